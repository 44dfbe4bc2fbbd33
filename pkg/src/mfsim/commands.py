"""Command codes and short response codes.

Kept separate from the card model so that protocol-level tooling can
name codes without pulling in card internals.  The six memory-access
codes live in a table because a card may ship a vendor-specific
assignment; authentication codes and the 4-bit responses are fixed
protocol knowledge.
"""

from __future__ import annotations

from dataclasses import dataclass

AUTH_KEY_A = 0x60
AUTH_KEY_B = 0x61

ACK = 0xA
NACK_NOT_ALLOWED = 0x4
NACK_TRANSMISSION = 0x5


@dataclass(frozen=True)
class CommandTable:
    read: int = 0x30
    write: int = 0xA0
    increment: int = 0xC1
    decrement: int = 0xC0
    restore: int = 0xC2
    transfer: int = 0xB0

    def as_dict(self) -> dict[str, int]:
        return {
            "read": self.read,
            "write": self.write,
            "increment": self.increment,
            "decrement": self.decrement,
            "restore": self.restore,
            "transfer": self.transfer,
        }

    def name_of(self, code: int) -> str | None:
        for name, value in self.as_dict().items():
            if value == code:
                return name
        return None


DEFAULT_COMMANDS = CommandTable()
