"""Deterministic per-stage seed derivation from one master seed.

Every stage seed is the low 63 bits of sha256(f"{master}:{stage}"), so a single
integer reproduces an entire run and stages cannot collide or interact.
"""

from __future__ import annotations

import hashlib


def derive_seed(master_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF
