"""Pairwise-masked secure sum of per-client category counts.

Every pair of clients ``i < j`` shares a pseudorandom mask ``r_ij``; client
``i`` adds it and client ``j`` subtracts it, all modulo the Mersenne prime
``2**61 - 1``. Each masked vector on its own looks uniform, while the masks
cancel in the sum, so the server recovers the global counts without seeing
any one client's counts.

This simulates the arithmetic only. There is no key agreement and no
dropout recovery: a missing share leaves the result garbled, and that is
not detected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODULUS = (1 << 61) - 1


@dataclass(frozen=True)
class MaskedCounts:
    client_id: int
    masked: np.ndarray

    def __post_init__(self) -> None:
        masked = np.asarray(self.masked, dtype=np.uint64)
        if np.any(masked >= MODULUS):
            raise ValueError("masked entries must lie in [0, 2**61 - 1)")
        object.__setattr__(self, "masked", masked)


def _add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # both operands < 2**61, so the sum fits in uint64
    return (a + b) % np.uint64(MODULUS)


def _sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a + (np.uint64(MODULUS) - b)) % np.uint64(MODULUS)


def pair_mask(seed: int, i: int, j: int, size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, i, j])
    return rng.integers(0, MODULUS, size=size, dtype=np.uint64)


def make_shares(counts_per_client, seed: int) -> list[MaskedCounts]:
    counts = np.asarray(counts_per_client)
    if counts.ndim != 2:
        raise ValueError("expected one count vector per client")
    num_clients, size = counts.shape
    if num_clients < 2:
        raise ValueError("masking requires at least two clients")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    if np.any(counts >= MODULUS // num_clients):
        raise ValueError("counts too large: the true sum could wrap around the modulus")

    shares = [counts[k].astype(np.uint64) for k in range(num_clients)]
    for i in range(num_clients):
        for j in range(i + 1, num_clients):
            r = pair_mask(seed, i, j, size)
            shares[i] = _add(shares[i], r)
            shares[j] = _sub(shares[j], r)
    return [MaskedCounts(k, s) for k, s in enumerate(shares)]


def unmask_sum(shares) -> np.ndarray:
    """Element-wise sum of all shares mod ``2**61 - 1`` (the true global counts)."""
    shares = list(shares)
    if not shares:
        raise ValueError("no shares to sum")
    ids = [s.client_id for s in shares]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client_id among shares")
    total = np.zeros_like(shares[0].masked)
    for s in shares:
        if s.masked.shape != total.shape:
            raise ValueError("shares have different lengths")
        total = _add(total, s.masked)
    return total.astype(np.int64)
