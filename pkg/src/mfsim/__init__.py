"""Simulator of a weak contactless memory card plus an attack toolkit.

The simulator half (framing, crypto, card, session) models a
MIFARE-Classic-style card: ISO 14443-A framing, a time-driven 16-bit
nonce LFSR, a proprietary-style stream cipher that also covers parity
bits, and the sector-based command set.  The attack half (tracefmt,
attack) treats that system as a black box reachable only through
eavesdropped traces and a raw send/power/clock port, and recovers
keystream, card contents and write access without the secret key.
"""

__version__ = "0.1.0"
