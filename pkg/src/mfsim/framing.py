"""ISO 14443-A style framing primitives.

Everything on the wire is LSB first within a byte.  Three frame kinds
exist in this protocol family:

  Short7    7 data bits, no parity (the REQA poll)
  Nibble4   4 data bits, no parity (ACK / NACK codes)
  Standard  n bytes, an odd parity bit follows every byte

CRC_A: width 16, reflected poly 0x8408, init 0x6363, no final xor,
appended low byte first.  crc_a(60 04) == d1 3d.

Timing: 1 ETU = 1.18 us, one bit period = 8 ETU = 9.44 us.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

ETU_MICROSECONDS = 1.18
ETU_PER_BIT = 8
BIT_PERIOD_MICROSECONDS = ETU_MICROSECONDS * ETU_PER_BIT

# anticollision constants
REQA = 0x26
ATQA = bytes((0x04, 0x00))
SELECT_STAGE = bytes((0x93, 0x20))
SELECT_COMMIT = bytes((0x93, 0x70))
SAK = 0x08

DATA = "d"
PARITY = "p"


class FrameKind(enum.Enum):
    SHORT7 = "short7"
    NIBBLE4 = "nibble4"
    STANDARD = "standard"


def odd_parity(byte: int) -> int:
    """Bit that makes the byte plus parity carry an odd number of ones."""
    return (byte.bit_count() & 1) ^ 1


def compute_bcc(uid: bytes) -> int:
    if len(uid) != 4:
        raise ValueError("uid must be 4 bytes")
    return uid[0] ^ uid[1] ^ uid[2] ^ uid[3]


def crc_a(data: bytes) -> bytes:
    crc = 0x6363
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ 0x8408 if crc & 1 else crc >> 1
    return bytes((crc & 0xFF, (crc >> 8) & 0xFF))


def with_crc_a(data: bytes) -> bytes:
    return data + crc_a(data)


def crc_a_ok(frame: bytes) -> bool:
    return len(frame) >= 3 and crc_a(frame[:-2]) == frame[-2:]


@dataclass
class WireBits:
    """A frame as transmitted: bit values plus per-position kind."""

    bits: list[int]
    kinds: list[str]

    def __post_init__(self) -> None:
        if len(self.bits) != len(self.kinds):
            raise ValueError("bits and kinds length mismatch")

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def duration_etu(self) -> int:
        return len(self.bits) * ETU_PER_BIT

    def data_bit_count(self) -> int:
        return sum(1 for k in self.kinds if k == DATA)

    def copy(self) -> "WireBits":
        return WireBits(list(self.bits), list(self.kinds))


@dataclass
class DecodedFrame:
    kind: FrameKind
    payload: bytes              # short/nibble payload is the single value byte
    parity_ok: list[bool] = field(default_factory=list)

    def all_parity_ok(self) -> bool:
        return all(self.parity_ok)


def _byte_bits(byte: int) -> list[int]:
    return [(byte >> i) & 1 for i in range(8)]


def encode_standard(data: bytes) -> WireBits:
    if not data:
        raise ValueError("empty standard frame")
    bits: list[int] = []
    kinds: list[str] = []
    for byte in data:
        bits.extend(_byte_bits(byte))
        kinds.extend(DATA * 8)
        bits.append(odd_parity(byte))
        kinds.append(PARITY)
    return WireBits(bits, kinds)


def encode_short7(value: int) -> WireBits:
    if not 0 <= value < 0x80:
        raise ValueError("short frame value out of range")
    return WireBits([(value >> i) & 1 for i in range(7)], [DATA] * 7)


def encode_nibble(value: int) -> WireBits:
    if not 0 <= value < 0x10:
        raise ValueError("nibble value out of range")
    return WireBits([(value >> i) & 1 for i in range(4)], [DATA] * 4)


def encode_frame(kind: FrameKind, payload: bytes | int) -> WireBits:
    if kind is FrameKind.STANDARD:
        if isinstance(payload, int):
            payload = bytes((payload,))
        return encode_standard(payload)
    if isinstance(payload, bytes):
        if len(payload) != 1:
            raise ValueError("short frame payload must be a single value")
        payload = payload[0]
    if kind is FrameKind.SHORT7:
        return encode_short7(payload)
    if kind is FrameKind.NIBBLE4:
        return encode_nibble(payload)
    raise ValueError(f"unknown frame kind {kind!r}")


def decode_frame(wire: WireBits) -> DecodedFrame:
    n = len(wire.bits)
    if n == 7:
        value = sum(b << i for i, b in enumerate(wire.bits))
        return DecodedFrame(FrameKind.SHORT7, bytes((value,)))
    if n == 4:
        value = sum(b << i for i, b in enumerate(wire.bits))
        return DecodedFrame(FrameKind.NIBBLE4, bytes((value,)))
    if n and n % 9 == 0:
        data = bytearray()
        parity_ok = []
        for off in range(0, n, 9):
            byte = sum(wire.bits[off + i] << i for i in range(8))
            data.append(byte)
            parity_ok.append(wire.bits[off + 8] == odd_parity(byte))
        return DecodedFrame(FrameKind.STANDARD, bytes(data), parity_ok)
    raise ValueError(f"{n}-bit buffer is not a decodable frame")


def standard_with_parity(data: bytes, parity_bits: list[int]) -> WireBits:
    """Standard frame with explicit parity bit values (received frames)."""
    if len(parity_bits) != len(data):
        raise ValueError("one parity bit per byte required")
    wire = encode_standard(data)
    for i, p in enumerate(parity_bits):
        wire.bits[9 * i + 8] = p & 1
    return wire


def select_commit_payload(uid: bytes) -> bytes:
    """SELECT frame payload: 93 70 uid bcc crc."""
    body = SELECT_COMMIT + uid + bytes((compute_bcc(uid),))
    return with_crc_a(body)
