"""Halton draws for simulated likelihoods."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtri


def first_primes(n: int) -> list[int]:
    primes: list[int] = []
    k = 2
    while len(primes) < n:
        if all(k % p for p in primes if p * p <= k):
            primes.append(k)
        k += 1
    return primes


@dataclass(frozen=True)
class HaltonConfig:
    draws: int = 1000
    skip: int = 100
    primes: Optional[tuple] = None
    scramble: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.draws < 1:
            raise ValueError("need at least one draw")
        if self.primes is not None and len(set(self.primes)) != len(self.primes):
            raise ValueError("Halton bases must be distinct")

    def bases(self, dims: int) -> list[int]:
        if self.primes is None:
            return first_primes(dims)
        if len(self.primes) < dims:
            raise ValueError(f"{dims} dimensions but only {len(self.primes)} bases configured")
        return list(self.primes[:dims])


def radical_inverse(index: np.ndarray, base: int, permutation: Optional[np.ndarray] = None) -> np.ndarray:
    """Van der Corput radical inverse of integer indices in ``base``.

    ``permutation`` maps digits before reflection; it must fix 0.
    """
    i = np.asarray(index, dtype=np.int64).copy()
    out = np.zeros(i.shape, dtype=float)
    f = 1.0 / base
    while np.any(i > 0):
        digit = i % base
        if permutation is not None:
            digit = permutation[digit]
        out += digit * f
        i //= base
        f /= base
    return out


def halton_sequence(n: int, base: int, skip: int = 0, permutation=None) -> np.ndarray:
    """Points ``skip + 1 .. skip + n`` of the base-``base`` sequence."""
    return radical_inverse(np.arange(skip + 1, skip + n + 1), base, permutation)


def halton_uniform(config: HaltonConfig, dims: int, n_points: int) -> np.ndarray:
    rng = np.random.default_rng(config.seed) if config.scramble else None
    cols = []
    for base in config.bases(dims):
        perm = None
        if rng is not None:
            perm = np.concatenate([[0], 1 + rng.permutation(base - 1)])
        cols.append(halton_sequence(n_points, base, config.skip, perm))
    return np.column_stack(cols) if cols else np.zeros((n_points, 0))


def halton_draws(config: HaltonConfig, dims: int, n_groups: int, draws: Optional[int] = None) -> np.ndarray:
    """Standard-normal draws of shape ``(n_groups, R, dims)``.

    Group ``g`` takes the consecutive block of points ``g*R .. (g+1)*R - 1``,
    so every observation in the group shares the same draw sequence.
    """
    r = config.draws if draws is None else draws
    u = halton_uniform(config, dims, n_groups * r)
    return ndtri(u).reshape(n_groups, r, dims)
