"""Card memory model and command state machine.

Memory is split into sectors of 16-byte blocks: the 1K profile has 16
sectors of 4 blocks, the 4K profile adds 8 sectors of 16 blocks after
the first 32.  Block 0 holds uid, uid checksum and manufacturer data
and is read-only.  The last block of every sector is the trailer:

    key A (6) | access bits (3) | user byte (1) | key B (6)

Access bits pack one 3-bit condition code per block group, stored with
inverted copies for integrity.  Key A always reads as zeros; key B
reads as zeros when its condition code hides it, and a key B that is
readable cannot be used for authentication.

Value blocks store a signed 32-bit value three times (plain, inverted,
plain) plus an address byte with copies: v ~v v a ~a a ~a.

The card answers with a 4-bit ACK (0xa) or NACK: 0x4 when an operation
is not allowed, 0x5 on a transmission error (parity or checksum).
After a NACK, or any malformed frame, the card stops responding until
it sees a new poll.  A REQA poll restarts the protocol in any state
without touching the nonce register; only a power cycle reseeds it.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from . import commands as cmd
from .commands import CommandTable
from .crypto import CIPHER_VARIANTS, CipherSession, NoncePrng, decrypt_frame, encrypt_frame
from .framing import (
    ATQA,
    ETU_PER_BIT,
    REQA,
    SAK,
    SELECT_COMMIT,
    SELECT_STAGE,
    FrameKind,
    WireBits,
    compute_bcc,
    crc_a_ok,
    decode_frame,
    encode_nibble,
    encode_standard,
    with_crc_a,
)

BLOCK_SIZE = 16

# condition code -> operation -> key slots that may perform it
DATA_ACCESS = {
    0b000: {"read": "AB", "write": "AB", "increment": "AB", "decrement": "AB"},
    0b001: {"read": "AB", "write": "B", "increment": "", "decrement": ""},
    0b010: {"read": "AB", "write": "", "increment": "", "decrement": ""},
    0b011: {"read": "AB", "write": "", "increment": "", "decrement": ""},
    0b100: {"read": "AB", "write": "B", "increment": "B", "decrement": "AB"},
    0b101: {"read": "B", "write": "B", "increment": "", "decrement": ""},
    0b110: {"read": "AB", "write": "", "increment": "B", "decrement": "AB"},
    0b111: {"read": "", "write": "", "increment": "", "decrement": ""},
}

# trailer condition code -> (key B readable, trailer writable with key A);
# the high bit hides key B, the low bit locks the trailer
TRAILER_ACCESS = {
    code: (code & 0b100 == 0, code & 0b001 == 0) for code in range(8)
}

TRANSPORT_CODE = 0b000
VALUE_CODE = 0b110
TRAILER_DEFAULT_CODE = 0b100


@dataclass
class AccessConditions:
    """One condition code per block group of a sector."""

    codes: tuple[int, int, int, int]

    def __post_init__(self) -> None:
        if len(self.codes) != 4 or any(not 0 <= c <= 7 for c in self.codes):
            raise ValueError("four 3-bit condition codes required")

    def pack(self) -> bytes:
        c1 = sum(((c >> 2) & 1) << i for i, c in enumerate(self.codes))
        c2 = sum(((c >> 1) & 1) << i for i, c in enumerate(self.codes))
        c3 = sum((c & 1) << i for i, c in enumerate(self.codes))
        return bytes((
            ((~c2 & 0xF) << 4) | (~c1 & 0xF),
            (c1 << 4) | (~c3 & 0xF),
            (c3 << 4) | c2,
        ))

    @classmethod
    def unpack(cls, raw: bytes) -> "AccessConditions":
        if len(raw) != 3:
            raise ValueError("access bits are 3 bytes")
        c1 = raw[1] >> 4
        c2 = raw[2] & 0xF
        c3 = raw[2] >> 4
        if (~c1 & 0xF) != (raw[0] & 0xF) or (~c2 & 0xF) != (raw[0] >> 4) \
                or (~c3 & 0xF) != (raw[1] & 0xF):
            raise ValueError("inverted access bit copies do not match")
        codes = tuple(
            (((c1 >> i) & 1) << 2) | (((c2 >> i) & 1) << 1) | ((c3 >> i) & 1)
            for i in range(4)
        )
        return cls(codes)  # type: ignore[arg-type]


@dataclass
class ValueBlock:
    value: int
    addr: int = 0

    def encode(self) -> bytes:
        v = self.value & 0xFFFFFFFF
        inv = ~self.value & 0xFFFFFFFF
        a = self.addr & 0xFF
        na = ~self.addr & 0xFF
        return (v.to_bytes(4, "little") + inv.to_bytes(4, "little")
                + v.to_bytes(4, "little") + bytes((a, na, a, na)))

    @classmethod
    def decode(cls, raw: bytes) -> "ValueBlock | None":
        if len(raw) != BLOCK_SIZE:
            return None
        v = int.from_bytes(raw[0:4], "little")
        inv = int.from_bytes(raw[4:8], "little")
        if raw[8:12] != raw[0:4] or (v ^ inv) != 0xFFFFFFFF:
            return None
        a, na, a2, na2 = raw[12:16]
        if a != a2 or na != na2 or (a ^ na) != 0xFF:
            return None
        signed = v - 0x100000000 if v & 0x80000000 else v
        return cls(signed, a)


def wrap_signed32(value: int) -> int:
    return (value + 0x80000000) % 0x100000000 - 0x80000000


PROFILES = {"classic1k": 16, "classic4k": 40}


def sector_count(profile: str) -> int:
    try:
        return PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown profile {profile!r}") from None


def sector_size(sector: int) -> int:
    return 4 if sector < 32 else 16


def sector_first_block(sector: int) -> int:
    if sector < 32:
        return 4 * sector
    return 128 + 16 * (sector - 32)


def sector_of_block(block: int) -> int:
    if block < 128:
        return block // 4
    return 32 + (block - 128) // 16


def trailer_block(sector: int) -> int:
    return sector_first_block(sector) + sector_size(sector) - 1


def block_count(profile: str) -> int:
    n = sector_count(profile)
    return trailer_block(n - 1) + 1


def access_group(sector: int, block: int) -> int:
    """Index of the condition code governing a block of its sector."""
    index = block - sector_first_block(sector)
    if sector_size(sector) == 4:
        return index
    return min(index // 5, 3)


DEFAULT_KEY = bytes.fromhex("ffffffffffff")
DEFAULT_UID = bytes.fromhex("2a698d43")
DEFAULT_MFR = bytes.fromhex("c10840004713375500aa99")
DEFAULT_USER_BYTE = 0x69


@dataclass
class SectorPersona:
    key_a: bytes = DEFAULT_KEY
    key_b: bytes = DEFAULT_KEY
    access: AccessConditions = field(
        default_factory=lambda: AccessConditions(
            (TRANSPORT_CODE,) * 3 + (TRAILER_DEFAULT_CODE,)))
    user_byte: int = DEFAULT_USER_BYTE
    blocks: dict[int, bytes] = field(default_factory=dict)  # index within sector


@dataclass
class CardPersona:
    profile: str = "classic1k"
    uid: bytes = DEFAULT_UID
    manufacturer: bytes = DEFAULT_MFR
    prng_seed: int = 0xAE3B
    prng_taps: tuple[int, ...] = (16, 14, 13, 11)
    cipher: str = "variant-a"
    command_codes: CommandTable = field(default_factory=CommandTable)
    sectors: dict[int, SectorPersona] = field(default_factory=dict)

    def sector(self, index: int) -> SectorPersona:
        if index not in self.sectors:
            self.sectors[index] = SectorPersona()
        return self.sectors[index]


def build_memory(persona: CardPersona) -> list[bytearray]:
    blocks = [bytearray(BLOCK_SIZE) for _ in range(block_count(persona.profile))]
    blocks[0][0:4] = persona.uid
    blocks[0][4] = compute_bcc(persona.uid)
    blocks[0][5:16] = persona.manufacturer
    for s in range(sector_count(persona.profile)):
        sp = persona.sectors.get(s, SectorPersona())
        first = sector_first_block(s)
        for index, content in sp.blocks.items():
            if len(content) != BLOCK_SIZE:
                raise ValueError(f"sector {s} block {index}: need 16 bytes")
            if first + index == 0:
                raise ValueError("block 0 content is fixed by uid and mfr data")
            if first + index >= trailer_block(s):
                raise ValueError(f"sector {s} block {index} is the trailer")
            blocks[first + index][:] = content
        trailer = blocks[trailer_block(s)]
        trailer[0:6] = sp.key_a
        trailer[6:9] = sp.access.pack()
        trailer[9] = sp.user_byte
        trailer[10:16] = sp.key_b
    return blocks


def _parse_block_value(text: str) -> bytes:
    text = text.strip()
    if text.startswith("value:"):
        body = text[len("value:"):]
        if "@" in body:
            num, addr = body.split("@", 1)
            return ValueBlock(int(num, 0), int(addr, 0)).encode()
        return ValueBlock(int(body, 0)).encode()
    raw = bytes.fromhex(text)
    if len(raw) != BLOCK_SIZE:
        raise ValueError("block content must be 16 bytes of hex")
    return raw


def load_persona(text: str) -> CardPersona:
    """Parse a key=value personalization file.

    Layout: a [card] section for card-wide settings, then one
    [sector N] section per customized sector with key_a, key_b, u, ac
    (four condition codes in binary) and blockK entries that take raw
    hex or value:<n>@<addr>.
    """
    parser = configparser.ConfigParser()
    parser.read_string(text)
    persona = CardPersona()
    if parser.has_section("card"):
        card = parser["card"]
        persona.profile = card.get("profile", persona.profile)
        sector_count(persona.profile)
        if "uid" in card:
            persona.uid = bytes.fromhex(card["uid"])
            if len(persona.uid) != 4:
                raise ValueError("uid must be 4 bytes")
        if "mfr" in card:
            persona.manufacturer = bytes.fromhex(card["mfr"])
            if len(persona.manufacturer) != 11:
                raise ValueError("mfr data must be 11 bytes")
        if "prng_seed" in card:
            persona.prng_seed = int(card["prng_seed"], 0)
        if "prng_taps" in card:
            persona.prng_taps = tuple(
                int(t) for t in card["prng_taps"].split(","))
        persona.cipher = card.get("cipher", persona.cipher)
        if persona.cipher not in CIPHER_VARIANTS:
            raise ValueError(f"unknown cipher {persona.cipher!r}")
        codes = {}
        for name in ("read", "write", "increment", "decrement",
                     "restore", "transfer"):
            key = f"cmd_{name}"
            if key in card:
                codes[name] = int(card[key], 0)
        if codes:
            persona.command_codes = CommandTable(**{
                **persona.command_codes.as_dict(), **codes})
    for section in parser.sections():
        if not section.startswith("sector"):
            continue
        index = int(section.split()[1])
        if index >= sector_count(persona.profile):
            raise ValueError(f"sector {index} outside profile")
        sp = persona.sector(index)
        sec = parser[section]
        if "key_a" in sec:
            sp.key_a = bytes.fromhex(sec["key_a"])
        if "key_b" in sec:
            sp.key_b = bytes.fromhex(sec["key_b"])
        if len(sp.key_a) != 6 or len(sp.key_b) != 6:
            raise ValueError("keys must be 6 bytes")
        if "u" in sec:
            sp.user_byte = int(sec["u"], 0)
        if "ac" in sec:
            codes = tuple(int(c, 2) for c in sec["ac"].split(","))
            sp.access = AccessConditions(codes)  # type: ignore[arg-type]
        for option in sec:
            if option.startswith("block"):
                sp.blocks[int(option[5:])] = _parse_block_value(sec[option])
    build_memory(persona)  # validate block placement early
    return persona


def save_persona(persona: CardPersona) -> str:
    parser = configparser.ConfigParser()
    parser["card"] = {
        "profile": persona.profile,
        "uid": persona.uid.hex(),
        "mfr": persona.manufacturer.hex(),
        "prng_seed": f"0x{persona.prng_seed:04x}",
        "prng_taps": ",".join(str(t) for t in persona.prng_taps),
        "cipher": persona.cipher,
    }
    defaults = CommandTable()
    for name, code in persona.command_codes.as_dict().items():
        if code != getattr(defaults, name):
            parser["card"][f"cmd_{name}"] = f"0x{code:02x}"
    for index in sorted(persona.sectors):
        sp = persona.sectors[index]
        section = f"sector {index}"
        parser[section] = {
            "key_a": sp.key_a.hex(),
            "key_b": sp.key_b.hex(),
            "u": f"0x{sp.user_byte:02x}",
            "ac": ",".join(f"{c:03b}" for c in sp.access.codes),
        }
        for block_index in sorted(sp.blocks):
            parser[section][f"block{block_index}"] = sp.blocks[block_index].hex()
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


# protocol phases
IDLE = "idle"
READY = "ready"
ACTIVE = "active"
AUTH_WAIT = "auth-wait"
AUTHENTICATED = "authenticated"
HALTED = "halted"


class SimCard:
    """Transition function of the card: one wire frame in, at most one out.

    Timekeeping is external: callers advance the card clock with
    tick_to(total_etu) and the nonce register shifts once per full bit
    period elapsed since power-on.
    """

    def __init__(self, persona: CardPersona):
        self.persona = persona
        self.memory = build_memory(persona)
        self.cipher_config = CIPHER_VARIANTS[persona.cipher]
        self.codes = persona.command_codes
        self.prng = NoncePrng(persona.prng_seed, persona.prng_taps)
        self.phase = IDLE
        self.cipher: CipherSession | None = None
        self._auth: tuple[int, str, bytes] | None = None  # sector, slot, nonce
        self._pending: tuple | None = None
        self._register: tuple[int, int] | None = None     # value, addr
        self._ticked_etu = 0

    # -- power and time ------------------------------------------------

    def power_cycle(self) -> None:
        self.prng = NoncePrng(self.persona.prng_seed, self.persona.prng_taps)
        self._ticked_etu = 0
        self._reset_protocol(IDLE)

    def tick_to(self, total_etu: int) -> None:
        if total_etu < self._ticked_etu:
            raise ValueError("card clock cannot run backwards")
        done = self._ticked_etu // ETU_PER_BIT
        due = total_etu // ETU_PER_BIT
        self.prng.advance(due - done)
        self._ticked_etu = total_etu

    def _reset_protocol(self, phase: str) -> None:
        self.phase = phase
        self.cipher = None
        self._auth = None
        self._pending = None
        self._register = None

    # -- trailer masking -----------------------------------------------

    def _sector_key(self, sector: int, slot: str) -> bytes:
        sp = self.persona.sectors.get(sector, SectorPersona())
        return sp.key_a if slot == "A" else sp.key_b

    def _access_code(self, block: int) -> int:
        sector = sector_of_block(block)
        trailer = self.memory[trailer_block(sector)]
        ac = AccessConditions.unpack(bytes(trailer[6:9]))
        return ac.codes[access_group(sector, block)]

    def _read_view(self, block: int) -> bytes:
        raw = bytes(self.memory[block])
        sector = sector_of_block(block)
        if block != trailer_block(sector):
            return raw
        key_b_readable, _ = TRAILER_ACCESS[self._access_code(block)]
        view = bytearray(raw)
        view[0:6] = bytes(6)
        if not key_b_readable:
            view[10:16] = bytes(6)
        return bytes(view)

    # -- frame handling --------------------------------------------------

    def receive(self, wire: WireBits) -> WireBits | None:
        # a poll restarts the protocol from any state, nonce clock untouched
        if len(wire) == 7:
            decoded = decode_frame(wire)
            if decoded.payload[0] == REQA:
                self._reset_protocol(READY)
                return encode_standard(ATQA)
            return None
        if self.phase in (READY, ACTIVE):
            return self._receive_clear(wire)
        if self.phase == AUTH_WAIT:
            return self._receive_auth_answer(wire)
        if self.phase == AUTHENTICATED:
            return self._receive_encrypted(wire)
        return None  # idle or halted: silence

    def _halt(self) -> None:
        self._reset_protocol(HALTED)

    def _receive_clear(self, wire: WireBits) -> WireBits | None:
        try:
            decoded = decode_frame(wire)
        except ValueError:
            self._halt()
            return None
        if decoded.kind is not FrameKind.STANDARD or not decoded.all_parity_ok():
            self._halt()
            return None
        data = decoded.payload
        if self.phase == READY and data == SELECT_STAGE:
            uid = self.persona.uid
            return encode_standard(uid + bytes((compute_bcc(uid),)))
        if self.phase == READY and data[:2] == SELECT_COMMIT:
            if not crc_a_ok(data):
                self._halt()
                return None
            uid = self.persona.uid
            if data[2:7] != uid + bytes((compute_bcc(uid),)):
                self._halt()
                return None
            self.phase = ACTIVE
            return encode_standard(with_crc_a(bytes((SAK,))))
        if self.phase == ACTIVE and len(data) == 4 \
                and data[0] in (cmd.AUTH_KEY_A, cmd.AUTH_KEY_B):
            return self._start_auth(data)
        self._halt()
        return None

    def _start_auth(self, data: bytes) -> WireBits | None:
        if not crc_a_ok(data):
            self._halt()
            return None
        block = data[1]
        if block >= len(self.memory):
            self._halt()
            return None
        sector = sector_of_block(block)
        slot = "A" if data[0] == cmd.AUTH_KEY_A else "B"
        if slot == "B":
            key_b_readable, _ = TRAILER_ACCESS[
                self._access_code(trailer_block(sector))]
            if key_b_readable:
                # a readable key B is data, not an authentication secret
                self._halt()
                return None
        nonce = self.prng.draw_nonce()
        self._auth = (sector, slot, nonce)
        self.phase = AUTH_WAIT
        return encode_standard(nonce)

    def _receive_auth_answer(self, wire: WireBits) -> WireBits | None:
        assert self._auth is not None
        sector, slot, nonce = self._auth
        if len(wire) != 8 * 9:
            self._halt()
            return None
        key = self._sector_key(sector, slot)
        boot = CipherSession(key, self.persona.uid, nonce, bytes(4),
                             self.cipher_config)
        plain = decrypt_frame(boot, wire)
        decoded = decode_frame(plain)
        if not decoded.all_parity_ok():
            self._halt()
            return None
        reader_nonce = decoded.payload[:4]
        expected = bytes(b ^ 0xFF for b in nonce)
        if decoded.payload[4:] != expected:
            self._halt()
            return None
        self.cipher = CipherSession(key, self.persona.uid, nonce,
                                    reader_nonce, self.cipher_config)
        self.phase = AUTHENTICATED
        proof = bytes(reversed(nonce))
        return encrypt_frame(self.cipher, encode_standard(proof))

    # -- encrypted command layer -----------------------------------------

    def _enc_nibble(self, value: int) -> WireBits:
        assert self.cipher is not None
        return encrypt_frame(self.cipher, encode_nibble(value))

    def _nack(self, value: int) -> WireBits:
        response = self._enc_nibble(value)
        self._halt()
        return response

    def _receive_encrypted(self, wire: WireBits) -> WireBits | None:
        assert self.cipher is not None
        try:
            plain = decrypt_frame(self.cipher, wire)
            decoded = decode_frame(plain)
        except ValueError:
            self._halt()
            return None
        if decoded.kind is not FrameKind.STANDARD:
            self._halt()
            return None
        if not decoded.all_parity_ok():
            return self._nack(cmd.NACK_TRANSMISSION)
        if self._pending is None:
            return self._command(decoded.payload)
        if self._pending[0] == "write":
            return self._write_data(decoded.payload)
        return self._value_operand(decoded.payload)

    def _command(self, data: bytes) -> WireBits | None:
        assert self._auth is not None
        if len(data) != 4:
            self._halt()
            return None
        if not crc_a_ok(data):
            return self._nack(cmd.NACK_TRANSMISSION)
        code, block = data[0], data[1]
        sector, slot, _ = self._auth
        if block >= len(self.memory) or sector_of_block(block) != sector:
            return self._nack(cmd.NACK_NOT_ALLOWED)
        name = self.codes.name_of(code)
        if name == "read":
            return self._read_block(block, slot)
        if name == "write":
            if block == 0 or not self._allowed(block, "write", slot):
                return self._nack(cmd.NACK_NOT_ALLOWED)
            self._pending = ("write", block)
            return self._enc_nibble(cmd.ACK)
        if name in ("increment", "decrement", "restore"):
            op = "increment" if name == "increment" else "decrement"
            if not self._allowed(block, op, slot):
                return self._nack(cmd.NACK_NOT_ALLOWED)
            if ValueBlock.decode(bytes(self.memory[block])) is None:
                return self._nack(cmd.NACK_NOT_ALLOWED)
            self._pending = ("value", name, block)
            return self._enc_nibble(cmd.ACK)
        if name == "transfer":
            return self._transfer(block, slot)
        return self._nack(cmd.NACK_NOT_ALLOWED)

    def _allowed(self, block: int, op: str, slot: str) -> bool:
        sector = sector_of_block(block)
        code = self._access_code(block)
        if block == trailer_block(sector):
            if op != "write":
                return False
            _, writable = TRAILER_ACCESS[code]
            return writable and slot == "A"
        return slot in DATA_ACCESS[code][op]

    def _read_block(self, block: int, slot: str) -> WireBits:
        sector = sector_of_block(block)
        if block != trailer_block(sector) \
                and slot not in DATA_ACCESS[self._access_code(block)]["read"]:
            return self._nack(cmd.NACK_NOT_ALLOWED)
        view = self._read_view(block)
        assert self.cipher is not None
        return encrypt_frame(self.cipher, encode_standard(with_crc_a(view)))

    def _transfer(self, block: int, slot: str) -> WireBits:
        if self._register is None or block == 0 \
                or not self._allowed(block, "decrement", slot):
            return self._nack(cmd.NACK_NOT_ALLOWED)
        value, addr = self._register
        self.memory[block][:] = ValueBlock(value, addr).encode()
        return self._enc_nibble(cmd.ACK)

    def _write_data(self, data: bytes) -> WireBits | None:
        if len(data) != 18:
            self._halt()
            return None
        if not crc_a_ok(data):
            return self._nack(cmd.NACK_TRANSMISSION)
        _, block = self._pending  # type: ignore[misc]
        self._pending = None
        self.memory[block][:] = data[:16]
        return self._enc_nibble(cmd.ACK)

    def _value_operand(self, data: bytes) -> WireBits | None:
        if len(data) != 6:
            self._halt()
            return None
        if not crc_a_ok(data):
            return self._nack(cmd.NACK_TRANSMISSION)
        _, name, block = self._pending  # type: ignore[misc]
        self._pending = None
        operand = int.from_bytes(data[:4], "little")
        current = ValueBlock.decode(bytes(self.memory[block]))
        assert current is not None
        if name == "increment":
            value = wrap_signed32(current.value + operand)
        elif name == "decrement":
            value = wrap_signed32(current.value - operand)
        else:
            value = current.value  # restore ignores the operand
        self._register = (value, current.addr)
        return None  # operand is acknowledged by silence
