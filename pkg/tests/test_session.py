import pytest

from conftest import persona_for_replay, persona_with_value_block
from mfsim.card import SimCard, ValueBlock
from mfsim.crypto import nonce_stream
from mfsim.framing import REQA, decode_frame, encode_short7, encode_standard, with_crc_a
from mfsim.session import (
    Anticollision,
    AttackerPort,
    Authenticate,
    Increment,
    Read,
    Transfer,
    Write,
    eavesdrop,
    parse_script,
    reader_keys_for,
    run_transaction,
    validate_script,
)
from mfsim.tracefmt import emit_trace, parse_trace, segment_trace

TRACE04_SCRIPT = [Anticollision(), Authenticate(1, "A"),
                  Increment(4, 1), Transfer(4), Read(4)]


def run_replay_scenario(seed=7, script=None, persona=None, **kwargs):
    persona = persona or persona_for_replay()
    card = SimCard(persona)
    events, result = run_transaction(
        card, reader_keys_for(persona), script or TRACE04_SCRIPT,
        nr_seed=seed, **kwargs)
    return card, events, result


def test_parse_script():
    script = parse_script("""
# value update
anticollision
authenticate sector=1 slot=A
increment block=4 value=1
transfer block=4
read block=4
""")
    assert script == TRACE04_SCRIPT


def test_parse_script_errors():
    with pytest.raises(ValueError):
        parse_script("hover block=1\n")
    with pytest.raises(ValueError):
        parse_script("read block\n")
    with pytest.raises(ValueError):
        parse_script("write block=1 data=aabb\n")


def test_validate_script():
    with pytest.raises(ValueError):
        validate_script([Read(4)])
    with pytest.raises(ValueError):
        validate_script([Anticollision(), Read(4)])
    validate_script(TRACE04_SCRIPT)


def test_anticollision_event_shape():
    _, events, result = run_replay_scenario(script=[Anticollision()])
    assert result.ok
    assert [e.sender for e in events] == ["PCD", "TAG"] * 3
    payloads = [decode_frame(e.wire).payload for e in events]
    assert payloads[0] == b"\x26"
    assert payloads[1] == bytes((0x04, 0x00))
    assert payloads[2] == bytes((0x93, 0x20))
    assert payloads[3].hex() == "2a698d438d"
    assert payloads[4].hex() == "93702a698d438d5255"
    assert payloads[5].hex() == "08b6dd"


def test_full_transaction_shape():
    card, events, result = run_replay_scenario()
    assert result.ok, result.error
    assert len(events) == 17
    senders = [e.sender for e in events]
    assert senders == ["PCD", "TAG"] * 6 + ["PCD", "PCD", "TAG", "PCD", "TAG"]
    sizes = [len(e.wire) for e in events]
    # poll, atqa, select stage, uid, select, sak, auth req, nonce,
    # answer, proof, increment, ack, operand, transfer, ack, read, data
    assert sizes == [7, 18, 18, 45, 81, 27, 36, 36, 72, 36,
                     36, 4, 54, 36, 4, 36, 162]
    assert result.reads[4] == ValueBlock(101, 4).encode()
    assert ValueBlock.decode(bytes(card.memory[4])).value == 101


def test_write_script():
    data = bytes(range(16))
    _, events, result = run_replay_scenario(
        script=[Anticollision(), Authenticate(1, "A"), Write(5, data),
                Read(5)])
    assert result.ok, result.error
    assert result.reads[5] == data


def test_transaction_is_deterministic():
    _, events_a, _ = run_replay_scenario(seed=42)
    _, events_b, _ = run_replay_scenario(seed=42)
    assert [(e.start_etu, e.sender, e.wire.bits) for e in events_a] \
        == [(e.start_etu, e.sender, e.wire.bits) for e in events_b]
    assert emit_trace(eavesdrop(events_a)) == emit_trace(eavesdrop(events_b))


def test_reader_nonce_seed_changes_ciphertext():
    _, events_a, _ = run_replay_scenario(seed=1)
    _, events_b, _ = run_replay_scenario(seed=2)
    # the reader answer is message 9; different reader nonce, different bits
    assert events_a[8].wire.bits != events_b[8].wire.bits


def test_wrong_key_aborts():
    persona = persona_for_replay()
    keys = reader_keys_for(persona)
    keys[(1, "A")] = bytes(6)
    card = SimCard(persona)
    events, result = run_transaction(card, keys, TRACE04_SCRIPT, nr_seed=7)
    assert not result.ok
    assert "auth" in result.error
    # log truncated at the abort: anticollision plus request and nonce
    assert len(events) == 9


def test_nonce_follows_schedule():
    persona = persona_for_replay()
    _, events, _ = run_replay_scenario(persona=persona)
    shift = events[6].end_etu // 8
    expected = nonce_stream(persona.prng_seed, shift + 1)[shift]
    assert decode_frame(events[7].wire).payload == expected

    # a different reader gap shifts the draw instant and the nonce
    _, events_b, _ = run_replay_scenario(persona=persona, reader_gap_etu=2008)
    assert decode_frame(events_b[7].wire).payload != expected


def test_eavesdrop_trace():
    _, events, _ = run_replay_scenario()
    trace = eavesdrop(events)
    assert trace.entries[0].etu_delta == 0
    assert all(e.etu_delta == 64 for e in trace.entries if e.sender == "TAG")
    # clear prologue carries no anomalies
    assert not any(flag for e in trace.entries[:8] for flag in e.flags)
    # encrypted region: anomalies appear (half the parity bits on average)
    encrypted_flags = [f for e in trace.entries[8:] for f in e.flags]
    assert any(encrypted_flags)
    round_trip = parse_trace(emit_trace(trace))
    assert round_trip.entries == trace.entries


def test_eavesdropped_trace_segments_like_reference():
    _, events, _ = run_replay_scenario()
    phases, warnings = segment_trace(eavesdrop(events))
    assert [(p.label, p.first_seq, p.last_seq) for p in phases] == [
        ("anticollision", 1, 6),
        ("authentication", 7, 10),
        ("value-update", 11, 15),
        ("read", 16, 17),
    ]
    assert warnings == []


def test_variant_b_transaction():
    _, _, result = run_replay_scenario(persona=persona_for_replay(cipher="variant-b"))
    assert result.ok, result.error
    assert result.reads[4] == ValueBlock(101, 4).encode()


def test_attacker_port_surface_is_minimal():
    port = AttackerPort(SimCard(persona_for_replay()))
    public = {name for name in dir(port) if not name.startswith("_")}
    assert public == {"send", "power_cycle", "advance_clock", "now_etu"}


def draw_nonce_via_port(port, advance):
    port.power_cycle()
    port.advance_clock(advance)
    port.send(encode_short7(REQA))
    resp = port.send(encode_standard(with_crc_a(bytes((0x60, 4)))))
    return None if resp is None else bytes(decode_frame(resp).payload)


def test_auth_request_needs_select_first():
    port = AttackerPort(SimCard(persona_for_replay()))
    assert draw_nonce_via_port(port, 1000) is None


def test_attacker_port_full_select_determinism():
    from mfsim.framing import SELECT_STAGE, select_commit_payload

    persona = persona_for_replay()
    port = AttackerPort(SimCard(persona))

    def draw(advance):
        port.power_cycle()
        port.advance_clock(advance)
        port.send(encode_short7(REQA))
        port.send(encode_standard(SELECT_STAGE))
        port.send(encode_standard(select_commit_payload(persona.uid)))
        resp = port.send(encode_standard(with_crc_a(bytes((0x60, 4)))))
        return bytes(decode_frame(resp).payload)

    first = draw(1000)
    assert draw(1000) == first
    assert draw(1008) != first
    # one full register period later the same nonce reappears
    assert draw(1000 + 8 * 65535) == first


def test_attacker_port_clock_rules():
    port = AttackerPort(SimCard(persona_for_replay()))
    with pytest.raises(ValueError):
        port.advance_clock(-1)
    t0 = port.now_etu
    port.advance_clock(100)
    assert port.now_etu == t0 + 100
    port.send(encode_short7(REQA))
    assert port.now_etu > t0 + 100
    port.power_cycle()
    assert port.now_etu == 0
