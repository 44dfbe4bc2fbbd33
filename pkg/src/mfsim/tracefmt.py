"""Text format for eavesdropped traces.

One line per message:

    <etu_delta>: <seq> : <PCD|TAG> <hex bytes>

where etu_delta is the idle time since the end of the previous message,
seq counts from 01, and a byte whose received parity bit does not match
its own odd parity is suffixed with '!'.  Long messages may wrap onto
continuation lines holding bytes only.  The parity anomaly flags are
load-bearing: on encrypted frames they carry one keystream relation per
byte, so they survive parse/emit round trips bit-exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .framing import (
    REQA,
    FrameKind,
    WireBits,
    decode_frame,
    encode_nibble,
    encode_short7,
    odd_parity,
    standard_with_parity,
)

PCD = "PCD"
TAG = "TAG"


@dataclass
class TraceEntry:
    etu_delta: int
    seq: int
    sender: str
    data: list[tuple[int, bool]]  # (byte, parity anomaly)

    def __post_init__(self) -> None:
        if self.etu_delta < 0:
            raise ValueError("etu_delta must be non-negative")
        if self.sender not in (PCD, TAG):
            raise ValueError(f"unknown sender {self.sender!r}")
        if not self.data:
            raise ValueError("entry must carry at least one byte")
        for byte, _ in self.data:
            if not 0 <= byte <= 0xFF:
                raise ValueError("byte out of range")

    @property
    def payload(self) -> bytes:
        return bytes(b for b, _ in self.data)

    @property
    def flags(self) -> list[bool]:
        return [f for _, f in self.data]


@dataclass
class Trace:
    entries: list[TraceEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        for i, entry in enumerate(self.entries):
            if entry.seq != i + 1:
                raise ValueError(
                    f"entry {i}: seq {entry.seq} breaks the 1..n sequence")

    def __len__(self) -> int:
        return len(self.entries)


class TraceParseError(ValueError):
    pass


def emit_trace(trace: Trace) -> str:
    lines = []
    for entry in trace.entries:
        rendered = " ".join(
            f"{byte:02x}" + ("!" if flag else "")
            for byte, flag in entry.data)
        lines.append(f"{entry.etu_delta}: {entry.seq:02d} : {entry.sender} {rendered}")
    return "\n".join(lines) + "\n"


_ENTRY_RE = re.compile(
    r"^(\d+)\s*:\s*(\d+)\s*:\s*(PCD|TAG)\s+(.+)$")
_BYTE_RE = re.compile(r"^([0-9a-f]{2})(!?)$")


def _parse_bytes(text: str, lineno: int) -> list[tuple[int, bool]]:
    out = []
    for token in text.split():
        m = _BYTE_RE.match(token)
        if not m:
            raise TraceParseError(f"line {lineno}: bad byte token {token!r}")
        out.append((int(m.group(1), 16), m.group(2) == "!"))
    return out


def parse_trace(text: str) -> Trace:
    entries: list[TraceEntry] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _ENTRY_RE.match(line)
        if m:
            delta, seq, sender, rest = m.groups()
            data = _parse_bytes(rest, lineno)
            if not data:
                raise TraceParseError(f"line {lineno}: entry without bytes")
            try:
                entries.append(TraceEntry(int(delta), int(seq), sender, data))
            except ValueError as exc:
                raise TraceParseError(f"line {lineno}: {exc}") from None
            continue
        # continuation line: bytes belonging to the previous entry
        if not entries:
            raise TraceParseError(f"line {lineno}: expected an entry header")
        entries[-1].data.extend(_parse_bytes(line, lineno))
    try:
        return Trace(entries)
    except ValueError as exc:
        raise TraceParseError(str(exc)) from None


def entry_kind(entry: TraceEntry) -> FrameKind:
    """Frame kind heuristic for transcribed traces.

    A single-byte PCD entry of 26 is the 7-bit poll; a single-byte TAG
    entry that fits 4 bits is an ACK/NACK nibble; everything else is a
    standard frame.
    """
    if len(entry.data) == 1:
        value = entry.data[0][0]
        if entry.sender == PCD and value == REQA:
            return FrameKind.SHORT7
        if entry.sender == TAG and value <= 0x0F:
            return FrameKind.NIBBLE4
    return FrameKind.STANDARD


def entry_to_wire(entry: TraceEntry) -> WireBits:
    kind = entry_kind(entry)
    if kind is FrameKind.SHORT7:
        return encode_short7(entry.data[0][0])
    if kind is FrameKind.NIBBLE4:
        return encode_nibble(entry.data[0][0])
    parity = [odd_parity(b) ^ int(f) for b, f in entry.data]
    return standard_with_parity(entry.payload, parity)


def wire_to_data(wire: WireBits) -> list[tuple[int, bool]]:
    decoded = decode_frame(wire)
    if decoded.kind is FrameKind.STANDARD:
        return [(b, not ok) for b, ok in zip(decoded.payload, decoded.parity_ok)]
    return [(decoded.payload[0], False)]


@dataclass
class PhaseLabel:
    label: str
    first_seq: int
    last_seq: int


def _is_auth_request(entry: TraceEntry) -> bool:
    from .framing import crc_a_ok

    return (entry.sender == PCD and len(entry.data) == 4
            and entry.payload[0] in (0x60, 0x61)
            and crc_a_ok(entry.payload))


def segment_trace(trace: Trace) -> tuple[list[PhaseLabel], list[str]]:
    """Advisory phase labels: poll/select, authentication, commands.

    Labels lean on cleartext structure (the auth request has a checkable
    CRC) and on command/response sizes after it.  Unrecognized runs are
    labeled as such with a warning; flags and bytes are never altered.
    """
    entries = trace.entries
    phases: list[PhaseLabel] = []
    warnings: list[str] = []
    n = len(entries)
    i = 0

    auth_at = next((k for k, e in enumerate(entries) if _is_auth_request(e)), n)
    if auth_at > 0:
        phases.append(PhaseLabel("anticollision", entries[0].seq,
                                 entries[auth_at - 1].seq))
        if entries[0].payload != bytes((REQA,)):
            warnings.append("trace does not begin with a poll")
    else:
        warnings.append("trace begins mid-transaction, no anticollision seen")
    i = auth_at

    if i < n:
        # auth request, card nonce, reader answer, card response
        want = [(PCD, 4), (TAG, 4), (PCD, 8), (TAG, 4)]
        got = 0
        for j, (sender, size) in enumerate(want):
            if i + j < n and entries[i + j].sender == sender \
                    and len(entries[i + j].data) == size:
                got += 1
            else:
                break
        if got == 4:
            phases.append(PhaseLabel("authentication", entries[i].seq,
                                     entries[i + 3].seq))
            i += 4
        else:
            warnings.append("authentication exchange has unexpected shape")
            phases.append(PhaseLabel("authentication", entries[i].seq,
                                     entries[i + got - 1].seq if got else entries[i].seq))
            i += max(got, 1)

    while i < n:
        start = i
        e = entries[i]
        if e.sender != PCD:
            warnings.append(f"entry {e.seq}: response without a command")
            phases.append(PhaseLabel("unrecognized", e.seq, e.seq))
            i += 1
            continue
        nxt = entries[i + 1] if i + 1 < n else None
        if len(e.data) == 4 and nxt is not None and nxt.sender == TAG \
                and len(nxt.data) == 18:
            phases.append(PhaseLabel("read", e.seq, nxt.seq))
            i += 2
            continue
        if len(e.data) == 4 and nxt is not None and nxt.sender == TAG \
                and len(nxt.data) == 1:
            i += 2
            label = "command"
            # data phase of a write, or operand of a value update
            if i < n and entries[i].sender == PCD and len(entries[i].data) == 18:
                label = "write"
                i += 1
                if i < n and entries[i].sender == TAG and len(entries[i].data) == 1:
                    i += 1
            elif i < n and entries[i].sender == PCD and len(entries[i].data) == 6:
                label = "value-update"
                i += 1
                # a directly following short exchange is the transfer
                if i + 1 < n and entries[i].sender == PCD \
                        and len(entries[i].data) == 4 \
                        and entries[i + 1].sender == TAG \
                        and len(entries[i + 1].data) == 1:
                    i += 2
            phases.append(PhaseLabel(label, e.seq, entries[i - 1].seq))
            continue
        warnings.append(f"entry {e.seq}: unrecognized exchange shape")
        phases.append(PhaseLabel("unrecognized", e.seq, e.seq))
        i += 1
        if i == start:
            break
    return phases, warnings
