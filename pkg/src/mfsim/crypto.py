"""Nonce generator and session stream cipher.

The card feeds its challenge nonce from a 16-bit Fibonacci LFSR that
shifts once per bit period (8 ETU) whenever the card is powered.  The
register is never reseeded except by a power cycle, so the nonce drawn
at a given instant depends only on time since power-up.  With the
default feedback taps the sequence has maximal period 65535, hence any
given 32-bit nonce reappears every 65535 bit periods, about 0.618 s.

The session cipher is a keystream generator seeded from (key, uid,
card nonce, reader nonce).  Internals are deliberately swappable: the
attack layer never touches them, it only relies on the stream being
position-synchronous between card and reader.  Two register-level
configurations are shipped; both use a 48-bit maximal-length LFSR
filtered through a 4-tap nonlinear output function.

Keystream discipline: a data bit consumes one step (next_bit), a
parity bit is encrypted with the upcoming bit without consuming it
(peek_bit).  That reuse is what leaks keystream through parity.
"""

from __future__ import annotations

from dataclasses import dataclass

from .framing import DATA, WireBits, decode_frame, odd_parity

NONCE_BITS = 16
NONCE_DEFAULT_TAPS = (16, 14, 13, 11)


def _taps_to_mask(taps: tuple[int, ...]) -> int:
    if 16 not in taps:
        raise ValueError("feedback taps must include position 16")
    mask = 0
    for tap in taps:
        if not 1 <= tap <= 16:
            raise ValueError(f"tap {tap} out of range")
        mask |= 1 << (16 - tap)
    return mask


class NoncePrng:
    """16-bit right-shifting LFSR; output is the bit shifted out."""

    def __init__(self, seed: int, taps: tuple[int, ...] = NONCE_DEFAULT_TAPS):
        if not 1 <= seed <= 0xFFFF:
            raise ValueError("seed must be a nonzero 16-bit value")
        self._mask = _taps_to_mask(taps)
        self.taps = taps
        self.state = seed
        self.shifts = 0

    def step(self) -> int:
        out = self.state & 1
        fb = (self.state & self._mask).bit_count() & 1
        self.state = (self.state >> 1) | (fb << 15)
        self.shifts += 1
        return out

    def advance(self, n: int) -> None:
        for _ in range(n):
            self.step()

    def draw_nonce(self) -> bytes:
        """32 successive output bits, packed LSB first per byte."""
        out = bytearray(4)
        for i in range(32):
            out[i >> 3] |= self.step() << (i & 7)
        return bytes(out)


def lfsr_period(taps: tuple[int, ...] = NONCE_DEFAULT_TAPS, seed: int = 1) -> int:
    prng = NoncePrng(seed, taps)
    for n in range(1, (1 << NONCE_BITS) + 1):
        prng.step()
        if prng.state == seed:
            return n
    raise ValueError("register did not return to its seed state")


def nonce_stream(seed: int, count: int,
                 taps: tuple[int, ...] = NONCE_DEFAULT_TAPS,
                 stride: int = 1) -> list[bytes]:
    """Nonces as drawn at shift offsets 0, stride, 2*stride, ...

    Equivalent to sampling a free-running register with draw_nonce at
    those instants, but computed from one pass over the bit sequence.
    """
    period = lfsr_period(taps, seed)
    prng = NoncePrng(seed, taps)
    bits = [prng.step() for _ in range(period)]
    nonces = []
    for k in range(count):
        start = (k * stride) % period
        value = bytearray(4)
        for i in range(32):
            value[i >> 3] |= bits[(start + i) % period] << (i & 7)
        nonces.append(bytes(value))
    return nonces


@dataclass(frozen=True)
class CipherConfig:
    name: str
    feedback_mask: int          # 48-bit, primitive feedback polynomial
    filter_taps: tuple[int, int, int, int]
    filter_table: int           # 16-bit truth table of the output filter
    warmup: int                 # clocks discarded after seeding
    mix_rotations: tuple[int, int, int]


VARIANT_A = CipherConfig(
    name="variant-a",
    feedback_mask=0x000020080003,
    filter_taps=(5, 13, 29, 41),
    filter_table=0xB48E,
    warmup=48,
    mix_rotations=(16, 8, 24),
)

VARIANT_B = CipherConfig(
    name="variant-b",
    feedback_mask=0x000000000823,
    filter_taps=(2, 17, 33, 46),
    filter_table=0x1E96,
    warmup=64,
    mix_rotations=(4, 20, 36),
)

CIPHER_VARIANTS = {cfg.name: cfg for cfg in (VARIANT_A, VARIANT_B)}

MASK48 = (1 << 48) - 1


def _rotl48(value: int, r: int) -> int:
    r %= 48
    return ((value << r) | (value >> (48 - r))) & MASK48


class CipherSession:
    """One directional keystream shared by card and reader.

    Seeded from the 48-bit key, the uid and both nonces.  next_bit
    emits the filter output and clocks the register; peek_bit emits
    the same output without clocking.
    """

    def __init__(self, key: bytes, uid: bytes, card_nonce: bytes,
                 reader_nonce: bytes, config: CipherConfig = VARIANT_A):
        if len(key) != 6:
            raise ValueError("key must be 6 bytes")
        if len(uid) != 4 or len(card_nonce) != 4 or len(reader_nonce) != 4:
            raise ValueError("uid and nonces must be 4 bytes")
        self.config = config
        r1, r2, r3 = config.mix_rotations
        state = int.from_bytes(key, "big")
        state ^= _rotl48(int.from_bytes(uid, "big"), r1)
        state ^= _rotl48(int.from_bytes(card_nonce, "big"), r2)
        state ^= _rotl48(int.from_bytes(reader_nonce, "big"), r3)
        if state == 0:
            state = config.feedback_mask
        self._state = state
        self._fmask = config.feedback_mask
        t0, t1, t2, t3 = config.filter_taps
        self._taps = (t0, t1, t2, t3)
        self._table = config.filter_table
        self.bits_consumed = 0
        for _ in range(config.warmup):
            self._clock()

    def _output(self) -> int:
        s = self._state
        t0, t1, t2, t3 = self._taps
        idx = ((s >> t0) & 1) | ((s >> t1) & 1) << 1 \
            | ((s >> t2) & 1) << 2 | ((s >> t3) & 1) << 3
        return (self._table >> idx) & 1

    def _clock(self) -> None:
        fb = (self._state & self._fmask).bit_count() & 1
        self._state = (self._state >> 1) | (fb << 47)

    def next_bit(self) -> int:
        out = self._output()
        self._clock()
        self.bits_consumed += 1
        return out

    def peek_bit(self) -> int:
        return self._output()

    def take(self, n: int) -> list[int]:
        return [self.next_bit() for _ in range(n)]


class FixedKeystream:
    """Cipher stand-in replaying a fixed bit sequence (tests, tooling)."""

    def __init__(self, bits: list[int]):
        self._bits = list(bits)
        self.pos = 0
        self.bits_consumed = 0

    def next_bit(self) -> int:
        out = self.peek_bit()
        self.pos += 1
        self.bits_consumed += 1
        return out

    def peek_bit(self) -> int:
        if self.pos >= len(self._bits):
            raise ValueError("fixed keystream exhausted")
        return self._bits[self.pos]

    def take(self, n: int) -> list[int]:
        return [self.next_bit() for _ in range(n)]


def encrypt_frame(cipher, wire: WireBits) -> WireBits:
    """Encrypt a plaintext frame bit by bit.

    Data positions consume a keystream bit each; every parity position
    is covered with the next still-unconsumed bit via peek.  Expects
    plaintext parity to be correct, which keeps encrypt and decrypt
    exact inverses.
    """
    decoded = decode_frame(wire)
    if not decoded.all_parity_ok():
        raise ValueError("plaintext frame has invalid parity")
    out = wire.copy()
    for i, kind in enumerate(out.kinds):
        if kind == DATA:
            out.bits[i] ^= cipher.next_bit()
        else:
            out.bits[i] ^= cipher.peek_bit()
    return out


def decrypt_frame(cipher, wire: WireBits) -> WireBits:
    """Inverse of encrypt_frame; same keystream consumption pattern.

    The returned plaintext carries the decrypted parity bits as
    received.  A parity mismatch after decryption (visible through
    decode_frame) signals corruption in transit.
    """
    out = wire.copy()
    for i, kind in enumerate(out.kinds):
        if kind == DATA:
            out.bits[i] ^= cipher.next_bit()
        else:
            out.bits[i] ^= cipher.peek_bit()
    return out


def parity_flags(wire: WireBits) -> list[bool]:
    """Per byte: True when the frame's parity bit does not match its byte.

    On an encrypted frame these anomalies are exactly the positions
    where the peeked keystream bit differs from the consumed one.
    """
    return [not ok for ok in decode_frame(wire).parity_ok]
