"""Random-subset coordinate sparsification.

A sender keeps a uniformly random subset of ``ceil(q d)`` coordinates and
transmits only those. The operator is biased (no rescaling) and idempotent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def mask_size(d: int, q: float) -> int:
    """Number of kept coordinates, ``ceil(q d)`` with a guard against float noise."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"fraction q must lie in (0, 1], got {q}")
    if d < 1:
        raise ValueError("dimension must be positive")
    return min(d, max(1, math.ceil(q * d - 1e-9)))


@dataclass(frozen=True)
class CoordinateMask:
    """Sorted indices (0-based) of the coordinates a sender transmits."""

    d: int
    kept: tuple

    def __post_init__(self):
        kept = tuple(sorted(int(k) for k in self.kept))
        if len(set(kept)) != len(kept):
            raise ValueError("duplicate coordinates in mask")
        if kept and not (0 <= kept[0] and kept[-1] < self.d):
            raise ValueError("mask coordinate out of range")
        object.__setattr__(self, "kept", kept)

    @classmethod
    def full(cls, d: int) -> "CoordinateMask":
        return cls(d, tuple(range(d)))

    @classmethod
    def from_bool(cls, keep: np.ndarray) -> "CoordinateMask":
        return cls(len(keep), tuple(np.flatnonzero(keep).tolist()))

    def as_bool(self) -> np.ndarray:
        keep = np.zeros(self.d, dtype=bool)
        keep[list(self.kept)] = True
        return keep

    def __contains__(self, m) -> bool:
        return m in self.kept

    def __len__(self) -> int:
        return len(self.kept)


@dataclass(frozen=True)
class MaskedMessage:
    """What a virtual node puts on the wire: its id, the mask and the kept values."""

    source: int
    mask: CoordinateMask
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != len(self.mask):
            raise ValueError("values length must equal mask size")

    def dense(self) -> np.ndarray:
        """Receiver-side view: kept values in place, zeros elsewhere."""
        out = np.zeros(self.mask.d)
        out[list(self.mask.kept)] = self.values
        return out


def draw_mask(d: int, q: float, rng: np.random.Generator) -> CoordinateMask:
    """Uniformly random subset of ``ceil(q d)`` coordinates."""
    k = mask_size(d, q)
    return CoordinateMask(d, tuple(rng.choice(d, size=k, replace=False).tolist()))


def draw_masks(n_sources: int, d: int, q: float, rng: np.random.Generator) -> np.ndarray | None:
    """Independent masks for ``n_sources`` senders as an ``(n_sources, d)`` bool array.

    Returns ``None`` when ``q`` keeps every coordinate, which callers treat as
    "no sparsification" without consuming random numbers.
    """
    return draw_mask_block((n_sources,), d, q, rng)


def draw_mask_block(shape: tuple, d: int, q: float, rng: np.random.Generator) -> np.ndarray | None:
    """Masks of shape ``shape + (d,)``, one independent subset per leading index.

    The kept set of each row is the ``k`` smallest of ``d`` iid uniforms,
    which is a uniformly random ``k``-subset.
    """
    k = mask_size(d, q)
    if k == d:
        return None
    u = rng.random(tuple(shape) + (d,))
    kth = np.partition(u, k - 1, axis=-1)[..., k - 1:k]
    return u <= kth


def apply_mask(vector, mask: CoordinateMask, source: int = 0) -> MaskedMessage:
    """Package the kept coordinates of ``vector`` as a message."""
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (mask.d,):
        raise ValueError(f"expected a length-{mask.d} vector, got shape {vector.shape}")
    return MaskedMessage(source, mask, vector[list(mask.kept)].copy())


def compress(vector, mask: CoordinateMask) -> np.ndarray:
    """Dense sparsified vector: masked coordinates zeroed, kept ones unchanged."""
    return apply_mask(vector, mask).dense()
