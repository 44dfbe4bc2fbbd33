"""End-to-end runs of the command line front end."""

import pytest

from conftest import persona_for_replay, persona_with_value_block
from mfsim.card import CardPersona, save_persona
from mfsim.cli import main
from mfsim.tracefmt import parse_trace

TRACE04_SCRIPT = """\
anticollision
authenticate sector=1 slot=A
increment block=4 value=1
transfer block=4
read block=4
"""

READ0_SCRIPT = """\
anticollision
authenticate sector=0 slot=A
read block=1
"""


def write_card(tmp_path, persona=None):
    path = tmp_path / "card.ini"
    path.write_text(save_persona(persona or persona_for_replay()))
    return path


def write_script(tmp_path, text, name="script.txt"):
    path = tmp_path / name
    path.write_text(text)
    return path


def run_simulate(tmp_path, script_text, persona=None, seed="7", name="run.trace"):
    card = write_card(tmp_path, persona)
    script = write_script(tmp_path, script_text)
    trace = tmp_path / name
    code = main(["simulate", "--card", str(card), "--script", str(script),
                 "--trace", str(trace), "--seed", seed])
    return code, card, trace


def test_simulate_reference_transaction_shape(tmp_path, capsys):
    code, _, trace_path = run_simulate(tmp_path, TRACE04_SCRIPT)
    assert code == 0
    trace = parse_trace(trace_path.read_text())
    assert len(trace.entries) == 17
    out = capsys.readouterr().out
    assert "anticollision" in out and "authentication" in out
    assert len([line for line in out.splitlines() if line.startswith("  ")]) == 4


def test_simulate_anticollision_only(tmp_path):
    code, _, trace_path = run_simulate(tmp_path, "anticollision\n")
    assert code == 0
    assert len(parse_trace(trace_path.read_text()).entries) == 6


def test_simulate_reports_auth_failure(tmp_path, capsys):
    # Readable key B cannot authenticate; the reader's attempt fails.
    persona = persona_with_value_block(trailer_code=0b000)
    script = "anticollision\nauthenticate sector=1 slot=B\nread block=4\n"
    code, _, trace_path = run_simulate(tmp_path, script, persona)
    assert code == 1
    assert "failed" in capsys.readouterr().err
    # the truncated trace is still written for inspection
    assert len(parse_trace(trace_path.read_text()).entries) == 7


def test_simulate_output_is_reproducible(tmp_path):
    _, _, first = run_simulate(tmp_path, TRACE04_SCRIPT, name="a.trace")
    _, _, second = run_simulate(tmp_path, TRACE04_SCRIPT, name="b.trace")
    assert first.read_text() == second.read_text()
    _, _, reseeded = run_simulate(tmp_path, TRACE04_SCRIPT, seed="8",
                                  name="c.trace")
    assert first.read_text() != reseeded.read_text()


def test_nonce_stats_report(tmp_path, capsys):
    persona = CardPersona(prng_taps=(16,))  # rotation, period 16
    card = write_card(tmp_path, persona)
    out_dir = tmp_path / "stats"
    code = main(["nonce-stats", "--card", str(card), "--draws", "17",
                 "--seed", "5", "--out", str(out_dir)])
    assert code == 0
    out = capsys.readouterr().out
    assert "distinct nonces: 16" in out
    assert "first repeat at draw: 17" in out
    assert "reappearance interval" in out
    assert "16,289,061 days" in out
    jitter_line = next(l for l in out.splitlines() if "jitter" in l)
    assert int(jitter_line.rsplit(" ", 3)[1]) <= 9
    assert (out_dir / "nonce_stats.csv").read_text().startswith("draw,nonce")
    assert (out_dir / "nonce_stats.png").stat().st_size > 0
    assert (out_dir / "nonce_stats.txt").read_text() in out


def test_attack_read_sector0_writes_reports(tmp_path, capsys):
    code, card, trace = run_simulate(tmp_path, READ0_SCRIPT,
                                     persona=CardPersona())
    assert code == 0
    out_dir = tmp_path / "s0"
    code = main(["attack", "--attack", "read-sector0", "--card", str(card),
                 "--trace", str(trace), "--out", str(out_dir)])
    assert code == 0
    dump_text = (out_dir / "sector_dump.txt").read_text()
    assert "2a 69 8d 43" in dump_text  # uid row recovered
    rows = [line for line in dump_text.splitlines() if line.startswith("block")]
    assert rows and all("??" not in row for row in rows)
    report = (out_dir / "report.txt").read_text()
    assert "replays:" in report and "bytes known: 52" in report
    for artifact in ("sector_dump.png", "coverage.png", "keystream.txt"):
        assert (out_dir / artifact).stat().st_size > 0


def test_attack_write_block0_surfaces_nack(tmp_path, capsys):
    code, card, trace = run_simulate(tmp_path, READ0_SCRIPT,
                                     persona=CardPersona())
    assert code == 0
    code = main(["attack", "--attack", "write", "--card", str(card),
                 "--trace", str(trace), "--out", str(tmp_path / "w"),
                 "--block", "0", "--data", "00" * 16])
    assert code == 1
    captured = capsys.readouterr()
    assert "NACK 0x4" in captured.err
    assert "NACK 0x4" in (tmp_path / "w" / "report.txt").read_text()


def test_attack_write_data_block_verified(tmp_path):
    code, card, trace = run_simulate(
        tmp_path, "anticollision\nauthenticate sector=1 slot=A\nread block=4\n")
    assert code == 0
    out_dir = tmp_path / "w"
    code = main(["attack", "--attack", "write", "--card", str(card),
                 "--trace", str(trace), "--out", str(out_dir),
                 "--block", "5", "--data", "deadbeef" * 4])
    assert code == 0
    report = (out_dir / "report.txt").read_text()
    assert "verified: True" in report
    assert (out_dir / "coverage.png").stat().st_size > 0


def test_attack_extend_reports_growth(tmp_path):
    code, card, trace = run_simulate(
        tmp_path, "anticollision\nauthenticate sector=1 slot=A\nread block=4\n")
    assert code == 0
    out_dir = tmp_path / "ext"
    code = main(["attack", "--attack", "extend", "--card", str(card),
                 "--trace", str(trace), "--out", str(out_dir),
                 "--value-block", "4", "--known-block", "4",
                 "--known-data", "value:100@4", "--rounds", "2"])
    assert code == 0
    report = (out_dir / "report.txt").read_text()
    assert "coverage:" in report and "->" in report
    assert (out_dir / "keystream.txt").stat().st_size > 0


def test_attack_discovery_full_table(tmp_path):
    code, card, trace = run_simulate(
        tmp_path,
        "anticollision\nauthenticate sector=1 slot=A\n"
        "increment block=4 value=5\ntransfer block=4\n")
    assert code == 0
    out_dir = tmp_path / "disc"
    code = main(["attack", "--attack", "discover-commands", "--card", str(card),
                 "--trace", str(trace), "--out", str(out_dir),
                 "--value-block", "4", "--initial", "value:100@4",
                 "--increment", "5"])
    assert code == 0
    table = (out_dir / "command_table.txt").read_text()
    assert "increment=0xc1" in table and "transfer=0xb0" in table
    assert len(table.splitlines()) == 6
    assert (out_dir / "discovery.png").stat().st_size > 0


def test_attack_missing_parameters_is_usage_error(tmp_path, capsys):
    code, card, trace = run_simulate(tmp_path, READ0_SCRIPT)
    assert code == 0
    code = main(["attack", "--attack", "write", "--card", str(card),
                 "--trace", str(trace), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_decrypt_prints_transcript(tmp_path, capsys):
    code, card, trace = run_simulate(
        tmp_path, "anticollision\nauthenticate sector=1 slot=A\nread block=4\n")
    assert code == 0
    out_dir = tmp_path / "rs"
    assert main(["attack", "--attack", "read-sector", "--card", str(card),
                 "--trace", str(trace), "--out", str(out_dir),
                 "--known-block", "4", "--known-data", "value:100@4"]) == 0
    capsys.readouterr()
    code = main(["decrypt", "--trace", str(trace),
                 "--keystream", str(out_dir / "keystream.txt")])
    assert code == 0
    captured = capsys.readouterr()
    assert "| clear" in captured.out
    assert "| 30 04" in captured.out  # the read command decrypts
    assert captured.err == ""


def test_decrypt_warns_on_misalignment(tmp_path, capsys):
    code, card, trace = run_simulate(
        tmp_path, "anticollision\nauthenticate sector=1 slot=A\nread block=4\n")
    assert code == 0
    out_dir = tmp_path / "rs"
    assert main(["attack", "--attack", "read-sector", "--card", str(card),
                 "--trace", str(trace), "--out", str(out_dir),
                 "--known-block", "4", "--known-data", "value:100@4"]) == 0
    shifted = []
    for line in (out_dir / "keystream.txt").read_text().splitlines():
        if line.startswith("#"):
            continue
        index, rest = line.split(" ", 1)
        shifted.append(f"{int(index) + 8} {rest}")
    bad = tmp_path / "shifted.txt"
    bad.write_text("\n".join(shifted) + "\n")
    capsys.readouterr()
    code = main(["decrypt", "--trace", str(trace), "--keystream", str(bad)])
    assert code == 0
    assert "misaligned" in capsys.readouterr().err


def test_bad_config_is_reported(tmp_path, capsys):
    script = write_script(tmp_path, "anticollision\n")
    code = main(["simulate", "--card", str(tmp_path / "missing.ini"),
                 "--script", str(script), "--trace", str(tmp_path / "t"),
                 "--seed", "1"])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_unknown_attack_name_rejected(tmp_path):
    with pytest.raises(SystemExit):
        main(["attack", "--attack", "brute-force", "--card", "x",
              "--trace", "y", "--out", "z"])
