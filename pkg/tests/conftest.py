"""Shared test helpers: personas and a minimal reader-side driver."""

import pytest

from mfsim.card import (
    AccessConditions,
    CardPersona,
    SectorPersona,
    SimCard,
    ValueBlock,
    sector_of_block,
)
from mfsim.commands import AUTH_KEY_A, AUTH_KEY_B
from mfsim.crypto import CIPHER_VARIANTS, CipherSession, decrypt_frame, encrypt_frame
from mfsim.framing import (
    ATQA,
    REQA,
    SAK,
    SELECT_STAGE,
    FrameKind,
    crc_a_ok,
    decode_frame,
    encode_short7,
    encode_standard,
    select_commit_payload,
    with_crc_a,
)

SECRET_A = bytes.fromhex("a0a1a2a3a4a5")
SECRET_B = bytes.fromhex("b0b1b2b3b4b5")


def persona_with_value_block(profile="classic1k", cipher="variant-a",
                             trailer_code=0b100) -> CardPersona:
    """Sector 1 with distinct keys, a value block at block 5 and data at 4."""
    persona = CardPersona(profile=profile, cipher=cipher)
    persona.sectors[1] = SectorPersona(
        key_a=SECRET_A,
        key_b=SECRET_B,
        access=AccessConditions((0b000, 0b110, 0b000, trailer_code)),
        blocks={
            0: bytes(range(16)),
            1: ValueBlock(100, 5).encode(),
        },
    )
    return persona


def persona_for_replay(profile="classic1k", cipher="variant-a") -> CardPersona:
    """Transport-configured sector 1: value block at 4, blocks 5 and 6 empty.

    Shaped after the recorded reference transaction: a reader that
    authenticates for sector 1 with key A and updates the value block.
    """
    persona = CardPersona(profile=profile, cipher=cipher)
    persona.sectors[1] = SectorPersona(
        key_a=SECRET_A,
        key_b=SECRET_B,
        access=AccessConditions((0b000, 0b000, 0b000, 0b100)),
        blocks={0: ValueBlock(100, 4).encode()},
    )
    return persona


class ReaderDriver:
    """Reader-side protocol logic for driving a SimCard in tests.

    This is deliberately independent of the session module so card
    tests exercise the transition function in isolation.
    """

    def __init__(self, card: SimCard, nr: bytes = bytes.fromhex("11223344")):
        self.card = card
        self.nr = nr
        self.cipher = None
        self.clock = 0
        self.uid = card.persona.uid

    def tick(self, etu: int) -> None:
        self.clock += etu
        self.card.tick_to(self.clock)

    def send(self, wire):
        return self.card.receive(wire)

    def anticollision(self):
        atqa = self.send(encode_short7(REQA))
        assert decode_frame(atqa).payload == ATQA
        uid_bcc = self.send(encode_standard(SELECT_STAGE))
        self.uid = decode_frame(uid_bcc).payload[:4]
        sak = self.send(encode_standard(select_commit_payload(self.uid)))
        assert decode_frame(sak).payload[0] == SAK
        return self.uid

    def auth_request(self, block: int, slot: str = "A"):
        code = AUTH_KEY_A if slot == "A" else AUTH_KEY_B
        return self.send(encode_standard(with_crc_a(bytes((code, block)))))

    def authenticate(self, block: int, slot: str = "A", key: bytes | None = None):
        persona = self.card.persona
        if key is None:
            sp = persona.sectors.get(sector_of_block(block), SectorPersona())
            key = sp.key_a if slot == "A" else sp.key_b
        resp = self.auth_request(block, slot)
        if resp is None:
            return None
        nonce = bytes(decode_frame(resp).payload)
        config = CIPHER_VARIANTS[persona.cipher]
        boot = CipherSession(key, self.uid, nonce, bytes(4), config)
        answer = self.nr + bytes(b ^ 0xFF for b in nonce)
        proof = self.send(encrypt_frame(boot, encode_standard(answer)))
        if proof is None:
            return None
        self.cipher = CipherSession(key, self.uid, nonce, self.nr, config)
        plain = decode_frame(decrypt_frame(self.cipher, proof))
        assert plain.all_parity_ok()
        assert plain.payload == bytes(reversed(nonce))
        return nonce

    def command(self, payload: bytes):
        """One encrypted exchange; returns the decrypted decoded response."""
        resp = self.send(encrypt_frame(self.cipher, encode_standard(payload)))
        if resp is None:
            return None
        return decode_frame(decrypt_frame(self.cipher, resp))

    def nibble_of(self, decoded) -> int:
        assert decoded.kind is FrameKind.NIBBLE4
        return decoded.payload[0]

    def read(self, block: int) -> bytes:
        decoded = self.command(with_crc_a(bytes((self.card.codes.read, block))))
        assert decoded.kind is FrameKind.STANDARD and len(decoded.payload) == 18
        assert decoded.all_parity_ok() and crc_a_ok(decoded.payload)
        return decoded.payload[:16]

    def write(self, block: int, data: bytes) -> int:
        first = self.command(with_crc_a(bytes((self.card.codes.write, block))))
        value = self.nibble_of(first)
        if value != 0xA:
            return value
        second = self.command(with_crc_a(data))
        return self.nibble_of(second)

    def value_op(self, name: str, block: int, operand: int = 0):
        code = getattr(self.card.codes, name)
        first = self.command(with_crc_a(bytes((code, block))))
        value = self.nibble_of(first)
        if value != 0xA:
            return value
        resp = self.command(with_crc_a((operand & 0xFFFFFFFF).to_bytes(4, "little")))
        assert resp is None  # operand accepted silently
        return 0xA

    def transfer(self, block: int) -> int:
        code = self.card.codes.transfer
        return self.nibble_of(self.command(with_crc_a(bytes((code, block)))))


@pytest.fixture
def driver():
    card = SimCard(persona_with_value_block())
    d = ReaderDriver(card)
    d.anticollision()
    return d
