import random

import pytest

from mfsim import framing
from mfsim.framing import (
    DATA,
    PARITY,
    FrameKind,
    WireBits,
    compute_bcc,
    crc_a,
    crc_a_ok,
    decode_frame,
    encode_frame,
    encode_nibble,
    encode_short7,
    encode_standard,
    odd_parity,
    select_commit_payload,
    standard_with_parity,
    with_crc_a,
)


def test_odd_parity_values():
    assert odd_parity(0x26) == 0
    assert odd_parity(0x00) == 1
    assert odd_parity(0xFF) == 1
    assert odd_parity(0x01) == 0
    for b in range(256):
        assert (b.bit_count() + odd_parity(b)) % 2 == 1


def test_crc_a_known_vectors():
    assert crc_a(bytes.fromhex("6004")) == bytes.fromhex("d13d")
    assert crc_a(bytes.fromhex("93702a698d438d")) == bytes.fromhex("5255")
    assert crc_a(bytes.fromhex("08")) == bytes.fromhex("b6dd")
    assert crc_a(bytes.fromhex("c104")) == bytes.fromhex("f68b")
    assert crc_a(bytes.fromhex("01000000")) == bytes.fromhex("bb4a")
    assert crc_a(bytes.fromhex("b004")) == bytes.fromhex("ea62")


def test_crc_a_append_and_check():
    frame = with_crc_a(bytes.fromhex("6004"))
    assert frame == bytes.fromhex("6004d13d")
    assert crc_a_ok(frame)
    assert not crc_a_ok(frame[:-1] + bytes((frame[-1] ^ 1,)))
    assert not crc_a_ok(b"\x60")


def test_crc_a_is_affine_over_xor():
    # crc(x ^ d) ^ crc(x) depends only on d; the attack layer leans on this
    rng = random.Random(7)
    for _ in range(50):
        n = rng.randrange(1, 16)
        x = bytes(rng.randrange(256) for _ in range(n))
        d = bytes(rng.randrange(256) for _ in range(n))
        xd = bytes(a ^ b for a, b in zip(x, d))
        lhs = bytes(a ^ b for a, b in zip(crc_a(xd), crc_a(x)))
        rhs = bytes(a ^ b for a, b in zip(crc_a(d), crc_a(bytes(n))))
        assert lhs == rhs


def test_compute_bcc():
    assert compute_bcc(bytes.fromhex("2a698d43")) == 0x8D
    with pytest.raises(ValueError):
        compute_bcc(b"\x01\x02\x03")


def test_encode_short7_reqa():
    wire = encode_short7(framing.REQA)
    assert len(wire) == 7
    assert wire.kinds == [DATA] * 7
    assert wire.bits == [0, 1, 1, 0, 0, 1, 0]
    decoded = decode_frame(wire)
    assert decoded.kind is FrameKind.SHORT7
    assert decoded.payload == b"\x26"
    assert decoded.parity_ok == []


def test_encode_nibble():
    wire = encode_nibble(0xA)
    assert len(wire) == 4
    assert wire.bits == [0, 1, 0, 1]
    decoded = decode_frame(wire)
    assert decoded.kind is FrameKind.NIBBLE4
    assert decoded.payload == b"\x0a"


def test_encode_standard_atqa():
    wire = encode_standard(framing.ATQA)
    assert len(wire) == 18
    assert wire.kinds == ([DATA] * 8 + [PARITY]) * 2
    # 0x04 has one set bit, parity bit 0; 0x00 has none, parity bit 1
    assert wire.bits[8] == 0
    assert wire.bits[17] == 1


def test_standard_round_trip_random():
    rng = random.Random(1234)
    for _ in range(200):
        data = bytes(rng.randrange(256) for _ in range(rng.randrange(1, 20)))
        decoded = decode_frame(encode_standard(data))
        assert decoded.kind is FrameKind.STANDARD
        assert decoded.payload == data
        assert decoded.all_parity_ok()


def test_decode_rejects_odd_lengths():
    for n in (0, 1, 3, 5, 6, 8, 10, 53):
        with pytest.raises(ValueError):
            decode_frame(WireBits([0] * n, [DATA] * n))


def test_standard_with_parity_flags_mismatch():
    data = bytes.fromhex("6004d13d")
    good = [odd_parity(b) for b in data]
    bad = list(good)
    bad[2] ^= 1
    decoded = decode_frame(standard_with_parity(data, bad))
    assert decoded.payload == data
    assert decoded.parity_ok == [True, True, False, True]


def test_encode_frame_dispatch():
    assert encode_frame(FrameKind.SHORT7, 0x26).bits == encode_short7(0x26).bits
    assert encode_frame(FrameKind.NIBBLE4, b"\x04").bits == encode_nibble(4).bits
    assert len(encode_frame(FrameKind.STANDARD, b"\x04\x00")) == 18
    with pytest.raises(ValueError):
        encode_frame(FrameKind.SHORT7, b"\x26\x00")
    with pytest.raises(ValueError):
        encode_short7(0x80)
    with pytest.raises(ValueError):
        encode_nibble(16)


def test_select_commit_payload():
    uid = bytes.fromhex("2a698d43")
    assert select_commit_payload(uid) == bytes.fromhex("93702a698d438d5255")


def test_durations():
    assert encode_short7(0x26).duration_etu == 56
    assert encode_nibble(0xA).duration_etu == 32
    assert encode_standard(b"\x04\x00").duration_etu == 144
    assert framing.BIT_PERIOD_MICROSECONDS == pytest.approx(9.44)
