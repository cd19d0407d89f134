"""Temporal-order permutations and their forward/backward-merged class ids.

A permutation is a tuple ``ranks`` where ``ranks[j]`` is the capture-time rank
(0-based) of the frame shown at position ``j``. A sequence and its time
reversal are the same class, so there are ``n!/2`` classes; each class is
represented by the lexicographically smaller member of the pair.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

MAX_ENUM_N = 6

Permutation = tuple[int, ...]


def _check(p) -> Permutation:
    p = tuple(int(v) for v in p)
    if sorted(p) != list(range(len(p))):
        raise ValueError(f"not a permutation of 0..{len(p) - 1}: {p}")
    return p


def num_classes(n: int) -> int:
    if n < 2:
        raise ValueError(f"sequence length must be >= 2, got {n}")
    return math.factorial(n) // 2


def time_reverse(p) -> Permutation:
    p = _check(p)
    n = len(p)
    return tuple(n - 1 - r for r in p)


def canonicalize(p) -> Permutation:
    p = _check(p)
    return min(p, time_reverse(p))


def enumerate_permutations(n: int) -> list[Permutation]:
    """All ``n!`` permutations in lexicographic order (``2 <= n <= 6``)."""
    if n < 2:
        raise ValueError(f"sequence length must be >= 2, got {n}")
    if n > MAX_ENUM_N:
        raise ValueError(f"refusing to enumerate {n}! permutations (max n={MAX_ENUM_N})")
    return list(itertools.permutations(range(n)))


@lru_cache(maxsize=None)
def _class_table(n: int) -> tuple[tuple[Permutation, ...], dict[Permutation, int]]:
    canon = sorted({canonicalize(p) for p in itertools.permutations(range(n))})
    return tuple(canon), {p: i for i, p in enumerate(canon)}


def canonical_forms(n: int) -> tuple[Permutation, ...]:
    num_classes(n)
    return _class_table(n)[0]


def encode(p) -> int:
    """Class id of ``p``: index of its canonical form among all canonical forms."""
    c = canonicalize(p)
    num_classes(len(c))
    return _class_table(len(c))[1][c]


def decode(class_id: int, n: int) -> Permutation:
    forms = canonical_forms(n)
    if not 0 <= class_id < len(forms):
        raise ValueError(f"class id {class_id} out of range [0, {len(forms)}) for n={n}")
    return forms[class_id]


def identity(n: int) -> Permutation:
    return tuple(range(n))


def inverse(p) -> Permutation:
    p = _check(p)
    inv = [0] * len(p)
    for pos, rank in enumerate(p):
        inv[rank] = pos
    return tuple(inv)
