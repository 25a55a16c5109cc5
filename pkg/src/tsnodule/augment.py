"""Exact cube symmetries (axis permutation plus per-axis flips) for paired patches."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .rng import rng_for


@dataclass(frozen=True)
class CubeSymmetry:
    """Output axis ``i`` is input axis ``perm[i]``, reversed where ``flips[i]``."""
    perm: tuple[int, int, int]
    flips: tuple[bool, bool, bool]

    @property
    def is_rotation(self) -> bool:
        sign = _perm_parity(self.perm) * (-1) ** sum(self.flips)
        return sign == 1

    def apply(self, patch: np.ndarray) -> np.ndarray:
        """Transform the last three (spatial) axes of ``patch``."""
        _check_cubic(patch)
        lead = patch.ndim - 3
        axes = tuple(range(lead)) + tuple(lead + p for p in self.perm)
        out = np.transpose(patch, axes)
        flip_axes = tuple(lead + i for i, f in enumerate(self.flips) if f)
        if flip_axes:
            out = np.flip(out, flip_axes)
        return np.ascontiguousarray(out)

    def inverse(self) -> "CubeSymmetry":
        inv = [0, 0, 0]
        for i, p in enumerate(self.perm):
            inv[p] = i
        # flips act on output axis i == input axis perm[i]
        flips = tuple(self.flips[inv[j]] for j in range(3))
        return CubeSymmetry(tuple(inv), flips)


def _perm_parity(perm) -> int:
    sign = 1
    p = list(perm)
    for i in range(3):
        for j in range(i + 1, 3):
            if p[i] > p[j]:
                sign = -sign
    return sign


def _check_cubic(patch):
    if patch.ndim < 3 or len(set(patch.shape[-3:])) != 1:
        raise ValueError(f"augmentation needs cubic spatial dims, got {patch.shape}")


GROUP: tuple[CubeSymmetry, ...] = tuple(
    CubeSymmetry(perm, flips)
    for perm in itertools.permutations(range(3))
    for flips in itertools.product((False, True), repeat=3)
)
IDENTITY = GROUP[0]


def draw_symmetry(rng: np.random.Generator) -> CubeSymmetry:
    return GROUP[int(rng.integers(len(GROUP)))]


def augment_pair(patch_t1: np.ndarray, patch_t2: np.ndarray, rng_stream):
    """Apply one random group element to both patches.

    ``rng_stream`` is a Generator or a ``(seed, *counters)`` tuple.
    """
    if patch_t1.shape != patch_t2.shape:
        raise ValueError(f"patch shapes differ: {patch_t1.shape} vs {patch_t2.shape}")
    _check_cubic(patch_t1)
    rng = rng_stream if isinstance(rng_stream, np.random.Generator) else rng_for(rng_stream[0], "augment",
                                                                                  *rng_stream[1:])
    g = draw_symmetry(rng)
    return g.apply(patch_t1), g.apply(patch_t2)
