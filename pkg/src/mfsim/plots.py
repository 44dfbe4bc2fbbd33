"""Report figures rendered to files, headless.

Every function takes the data it draws plus an output path, writes a
PNG and returns the path.  Nothing here computes: callers pass in the
numbers their text reports already contain, so a figure can never
disagree with the report next to it.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .attack import KNOWN, MASKED, UNKNOWN, RecoveredKeystream, SectorDump  # noqa: E402

_STATUS_COLOR = {
    KNOWN: "#7fc97f",
    MASKED: "#bdbdbd",
    UNKNOWN: "#f4a582",
}


def nonce_figure(nonces: list[bytes], first_repeat: int | None, path: str) -> str:
    """Distinct-nonce growth curve over successive draws."""
    seen: set[bytes] = set()
    distinct = []
    for nonce in nonces:
        seen.add(nonce)
        distinct.append(len(seen))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(nonces) + 1), distinct, lw=1.2)
    ax.plot([1, len(nonces)], [1, len(nonces)], ls=":", color="grey",
            label="all distinct")
    if first_repeat is not None:
        ax.axvline(first_repeat, color="crimson", ls="--", lw=1,
                   label=f"first repeat at draw {first_repeat}")
    ax.set_xlabel("draw")
    ax.set_ylabel("distinct nonces")
    ax.set_title("nonce reuse")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def dump_figure(dump: SectorDump, path: str) -> str:
    """Sector dump as a colored byte grid: green known, grey masked."""
    blocks = dump.block_numbers
    fig, ax = plt.subplots(figsize=(8, 0.6 * len(blocks) + 1))
    for row, block in enumerate(blocks):
        for col, (value, status) in enumerate(dump.bytes[block]):
            ax.add_patch(plt.Rectangle((col, -row), 1, 1,
                                       facecolor=_STATUS_COLOR[status],
                                       edgecolor="white"))
            if status == KNOWN:
                text = f"{value:02x}"
            elif status == MASKED:
                text = "00*"
            else:
                text = "??"
            ax.text(col + 0.5, -row + 0.5, text, ha="center", va="center",
                    fontsize=7, family="monospace")
    ax.set_xlim(0, 16)
    ax.set_ylim(-len(blocks) + 1, 1)
    ax.set_xticks([i + 0.5 for i in range(16)])
    ax.set_xticklabels(range(16), fontsize=7)
    ax.set_yticks([-i + 0.5 for i in range(len(blocks))])
    ax.set_yticklabels([f"block {b}" for b in blocks], fontsize=8)
    ax.set_title(f"sector {dump.sector_index} recovery "
                 "(green known, grey reads-as-zero, orange unknown)",
                 fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def coverage_figure(ks: RecoveredKeystream, path: str, *,
                    start: int = 0, end: int | None = None) -> str:
    """Keystream coverage: recovered bit positions as horizontal spans."""
    covered = sorted(i for i in ks.coverage if i >= start)
    if end is None:
        end = (covered[-1] + 8) if covered else start + 8
    spans = []
    for index in covered:
        if spans and index == spans[-1][0] + spans[-1][1]:
            spans[-1] = (spans[-1][0], spans[-1][1] + 1)
        else:
            spans.append((index, 1))
    fig, ax = plt.subplots(figsize=(8, 1.8))
    ax.broken_barh(spans, (0, 1), facecolors="#386cb0")
    ax.set_xlim(start, end)
    ax.set_ylim(0, 1)
    ax.set_yticks([])
    ax.set_xlabel("keystream bit index (0 = first encrypted bit)")
    ax.set_title(f"recovered coverage: {len(covered)} bits", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def attempts_figure(labels: list[str], attempts: list[int], path: str) -> str:
    """Replay attempts consumed per discovered command code."""
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.barh(range(len(labels)), attempts, color="#386cb0")
    ax.set_yticks(range(len(labels)))
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("replay attempts when confirmed")
    ax.set_title("command discovery progress", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
