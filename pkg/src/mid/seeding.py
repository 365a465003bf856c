"""Deterministic seed fan-out.

One global seed covers a whole experiment; every stage derives its own
seed as the first four bytes of sha256("<seed>:<stage>") interpreted
big-endian, reduced mod 2**31. Stage names are stable strings, so reruns
of the same config replay identical randomness per stage.
"""
from __future__ import annotations

import hashlib

import torch


def derive_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big") % (2**31)


def make_generator(seed: int, stage: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, stage))
    return gen
