"""Simulated RF channel: scripted genuine reader, clock, eavesdropper.

Time is counted in ETU.  The card's nonce register shifts once per bit
period (8 ETU) of powered time, so schedules are load-bearing: a reader
that retransmits on an identical schedule meets an identical register.
The reader inserts a fixed gap before each of its frames and the card
answers after a fixed latency; both are configurable and recorded in
the event log, but only their effect on elapsed time matters.

The attacker port at the bottom is the entire attack-facing surface of
the simulator: raw frames in and out, a power switch and a clock.
"""

from __future__ import annotations

import random
import shlex
from dataclasses import dataclass, field

from .card import SectorPersona, SimCard, sector_first_block, sector_of_block
from .commands import ACK, AUTH_KEY_A, AUTH_KEY_B
from .crypto import CIPHER_VARIANTS, CipherSession, decrypt_frame, encrypt_frame
from .framing import (
    ATQA,
    REQA,
    SAK,
    SELECT_STAGE,
    FrameKind,
    WireBits,
    crc_a_ok,
    decode_frame,
    encode_short7,
    encode_standard,
    select_commit_payload,
    with_crc_a,
)
from .tracefmt import Trace, TraceEntry, wire_to_data

DEFAULT_READER_GAP_ETU = 2000
DEFAULT_TAG_LATENCY_ETU = 64


@dataclass
class TimedEvent:
    start_etu: int
    sender: str  # "PCD" or "TAG"
    wire: WireBits

    @property
    def end_etu(self) -> int:
        return self.start_etu + self.wire.duration_etu


# reader script intents

@dataclass
class Anticollision:
    pass


@dataclass
class Authenticate:
    sector: int
    slot: str = "A"


@dataclass
class Read:
    block: int


@dataclass
class Write:
    block: int
    data: bytes


@dataclass
class Increment:
    block: int
    value: int


@dataclass
class Decrement:
    block: int
    value: int


@dataclass
class Restore:
    block: int


@dataclass
class Transfer:
    block: int


Intent = (Anticollision | Authenticate | Read | Write | Increment
          | Decrement | Restore | Transfer)


def parse_script(text: str) -> list[Intent]:
    """Script text: one intent per line, name plus key=value arguments.

    Example:
        anticollision
        authenticate sector=1 slot=A
        increment block=4 value=1
        transfer block=4
        read block=4
    """
    intents: list[Intent] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = shlex.split(raw, comments=True)
        if not tokens:
            continue
        name, args = tokens[0].lower(), {}
        for token in tokens[1:]:
            if "=" not in token:
                raise ValueError(f"line {lineno}: expected key=value, got {token!r}")
            key, value = token.split("=", 1)
            args[key] = value
        try:
            intents.append(_build_intent(name, args))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return intents


def _build_intent(name: str, args: dict[str, str]) -> Intent:
    if name == "anticollision":
        return Anticollision()
    if name == "authenticate":
        return Authenticate(int(args["sector"], 0), args.get("slot", "A").upper())
    if name == "read":
        return Read(int(args["block"], 0))
    if name == "write":
        data = bytes.fromhex(args["data"])
        if len(data) != 16:
            raise ValueError("write data must be 16 bytes")
        return Write(int(args["block"], 0), data)
    if name == "increment":
        return Increment(int(args["block"], 0), int(args["value"], 0))
    if name == "decrement":
        return Decrement(int(args["block"], 0), int(args["value"], 0))
    if name == "restore":
        return Restore(int(args["block"], 0))
    if name == "transfer":
        return Transfer(int(args["block"], 0))
    raise ValueError(f"unknown intent {name!r}")


def validate_script(script: list[Intent]) -> None:
    if not script or not isinstance(script[0], Anticollision):
        raise ValueError("script must start with anticollision")
    authenticated = False
    for intent in script:
        if isinstance(intent, Authenticate):
            authenticated = True
        elif not isinstance(intent, Anticollision) and not authenticated:
            raise ValueError("memory intents must follow an authenticate")


def reader_keys_for(persona) -> dict[tuple[int, str], bytes]:
    """Key table a legitimate reader would hold for this card."""
    keys: dict[tuple[int, str], bytes] = {}
    from .card import sector_count

    for sector in range(sector_count(persona.profile)):
        sp = persona.sectors.get(sector, SectorPersona())
        keys[(sector, "A")] = sp.key_a
        keys[(sector, "B")] = sp.key_b
    return keys


@dataclass
class TransactionResult:
    ok: bool = True
    error: str | None = None
    reads: dict[int, bytes] = field(default_factory=dict)


class TransactionAbort(Exception):
    pass


def run_transaction(card: SimCard, reader_keys: dict[tuple[int, str], bytes],
                    script: list[Intent], *, nr_seed: int,
                    reader_gap_etu: int = DEFAULT_READER_GAP_ETU,
                    tag_latency_etu: int = DEFAULT_TAG_LATENCY_ETU,
                    ) -> tuple[list[TimedEvent], TransactionResult]:
    """Run a genuine scripted reader against a card, logging every frame.

    Entering the reader's field powers the card up, so state from any
    previous session is gone and the nonce generator restarts.
    """
    validate_script(script)
    card.power_cycle()
    reader = _GenuineReader(card, reader_keys, nr_seed,
                            reader_gap_etu, tag_latency_etu)
    result = TransactionResult()
    try:
        for intent in script:
            reader.execute(intent, result)
    except TransactionAbort as exc:
        result.ok = False
        result.error = str(exc)
    return reader.events, result


class _GenuineReader:
    def __init__(self, card, keys, nr_seed, gap, latency):
        self.card = card
        self.keys = keys
        self.rng = random.Random(nr_seed)
        self.gap = gap
        self.latency = latency
        self.clock = 0
        self.events: list[TimedEvent] = []
        self.cipher: CipherSession | None = None
        self.uid: bytes | None = None

    def transmit(self, wire: WireBits) -> WireBits | None:
        if self.events:
            self.clock += self.gap
        start = self.clock
        self.clock += wire.duration_etu
        self.card.tick_to(self.clock)
        self.events.append(TimedEvent(start, "PCD", wire))
        response = self.card.receive(wire)
        if response is not None:
            rstart = self.clock + self.latency
            self.events.append(TimedEvent(rstart, "TAG", response))
            self.clock = rstart + response.duration_etu
            self.card.tick_to(self.clock)
        return response

    def expect(self, wire: WireBits, what: str) -> WireBits:
        response = self.transmit(wire)
        if response is None:
            raise TransactionAbort(f"no response to {what}")
        return response

    def command(self, payload: bytes, what: str):
        assert self.cipher is not None, "not authenticated"
        wire = encrypt_frame(self.cipher, encode_standard(payload))
        response = self.transmit(wire)
        if response is None:
            return None
        return decode_frame(decrypt_frame(self.cipher, response))

    def expect_ack(self, decoded, what: str) -> None:
        if decoded is None:
            raise TransactionAbort(f"no response to {what}")
        if decoded.kind is not FrameKind.NIBBLE4:
            raise TransactionAbort(f"{what}: expected a 4-bit response")
        if decoded.payload[0] != ACK:
            raise TransactionAbort(f"{what}: card answered 0x{decoded.payload[0]:x}")

    def execute(self, intent, result: TransactionResult) -> None:
        if isinstance(intent, Anticollision):
            self._anticollision()
        elif isinstance(intent, Authenticate):
            self._authenticate(intent.sector, intent.slot)
        elif isinstance(intent, Read):
            result.reads[intent.block] = self._read(intent.block)
        elif isinstance(intent, Write):
            self._write(intent.block, intent.data)
        elif isinstance(intent, Increment):
            self._value_op("increment", intent.block, intent.value)
        elif isinstance(intent, Decrement):
            self._value_op("decrement", intent.block, intent.value)
        elif isinstance(intent, Restore):
            self._value_op("restore", intent.block, 0)
        elif isinstance(intent, Transfer):
            decoded = self.command(
                with_crc_a(bytes((self.card.codes.transfer, intent.block))),
                "transfer")
            self.expect_ack(decoded, "transfer")
        else:
            raise TransactionAbort(f"unsupported intent {intent!r}")

    def _anticollision(self) -> None:
        atqa = self.expect(encode_short7(REQA), "poll")
        if decode_frame(atqa).payload != ATQA:
            raise TransactionAbort("unexpected poll response")
        uid_bcc = self.expect(encode_standard(SELECT_STAGE), "select stage")
        payload = decode_frame(uid_bcc).payload
        if len(payload) != 5:
            raise TransactionAbort("unexpected select stage response")
        self.uid = payload[:4]
        sak = self.expect(encode_standard(select_commit_payload(self.uid)),
                          "select")
        decoded = decode_frame(sak)
        if decoded.payload[0] != SAK or not crc_a_ok(decoded.payload):
            raise TransactionAbort("select not acknowledged")

    def _authenticate(self, sector: int, slot: str) -> None:
        if self.uid is None:
            raise TransactionAbort("authenticate before select")
        try:
            key = self.keys[(sector, slot)]
        except KeyError:
            raise TransactionAbort(f"no key {slot} for sector {sector}") from None
        code = AUTH_KEY_A if slot == "A" else AUTH_KEY_B
        block = sector_first_block(sector)
        request = with_crc_a(bytes((code, block)))
        nonce_wire = self.expect(encode_standard(request), "auth request")
        card_nonce = bytes(decode_frame(nonce_wire).payload)
        if len(card_nonce) != 4:
            raise TransactionAbort("unexpected auth challenge")
        reader_nonce = self.rng.getrandbits(32).to_bytes(4, "big")
        config = CIPHER_VARIANTS[self.card.persona.cipher]
        boot = CipherSession(key, self.uid, card_nonce, bytes(4), config)
        answer = reader_nonce + bytes(b ^ 0xFF for b in card_nonce)
        proof_wire = self.expect(
            encrypt_frame(boot, encode_standard(answer)), "auth answer")
        cipher = CipherSession(key, self.uid, card_nonce, reader_nonce, config)
        proof = decode_frame(decrypt_frame(cipher, proof_wire))
        if not proof.all_parity_ok() \
                or proof.payload != bytes(reversed(card_nonce)):
            raise TransactionAbort("card failed the authentication proof")
        self.cipher = cipher

    def _read(self, block: int) -> bytes:
        decoded = self.command(
            with_crc_a(bytes((self.card.codes.read, block))), "read")
        if decoded is None:
            raise TransactionAbort("no response to read")
        if decoded.kind is FrameKind.NIBBLE4:
            raise TransactionAbort(
                f"read: card answered 0x{decoded.payload[0]:x}")
        if len(decoded.payload) != 18 or not decoded.all_parity_ok() \
                or not crc_a_ok(decoded.payload):
            raise TransactionAbort("read: corrupted response")
        return decoded.payload[:16]

    def _write(self, block: int, data: bytes) -> None:
        decoded = self.command(
            with_crc_a(bytes((self.card.codes.write, block))), "write")
        self.expect_ack(decoded, "write")
        decoded = self.command(with_crc_a(data), "write data")
        self.expect_ack(decoded, "write data")

    def _value_op(self, name: str, block: int, value: int) -> None:
        code = getattr(self.card.codes, name)
        decoded = self.command(with_crc_a(bytes((code, block))), name)
        self.expect_ack(decoded, name)
        operand = (value & 0xFFFFFFFF).to_bytes(4, "little")
        decoded = self.command(with_crc_a(operand), f"{name} operand")
        if decoded is not None:
            # the operand is accepted silently; any reply is a refusal
            raise TransactionAbort(
                f"{name} operand rejected: 0x{decoded.payload[0]:x}")


def eavesdrop(events: list[TimedEvent]) -> Trace:
    """Convert an event log to a trace as a passive sniffer sees it."""
    entries = []
    prev_end = 0
    for i, event in enumerate(events):
        entries.append(TraceEntry(
            etu_delta=event.start_etu - prev_end,
            seq=i + 1,
            sender=event.sender,
            data=wire_to_data(event.wire),
        ))
        prev_end = event.end_etu
    return Trace(entries)


class AttackerPort:
    """Raw access to a card: frames, power, clock.  Nothing else.

    send transmits one frame and returns the card's response, if any;
    the port clock advances by the frame durations plus the card's
    response latency.  power_cycle restarts the card and zeroes the
    port clock so recorded schedules can be replayed absolutely.
    """

    def __init__(self, card: SimCard,
                 tag_latency_etu: int = DEFAULT_TAG_LATENCY_ETU):
        self._card = card
        self._latency = tag_latency_etu
        self._now = 0
        card.power_cycle()

    @property
    def now_etu(self) -> int:
        return self._now

    def advance_clock(self, etu: int) -> None:
        if etu < 0:
            raise ValueError("cannot rewind the clock")
        self._now += etu
        self._card.tick_to(self._now)

    def power_cycle(self) -> None:
        self._card.power_cycle()
        self._now = 0

    def send(self, wire: WireBits) -> WireBits | None:
        self._now += wire.duration_etu
        self._card.tick_to(self._now)
        response = self._card.receive(wire)
        if response is not None:
            self._now += self._latency + response.duration_etu
            self._card.tick_to(self._now)
        return response
