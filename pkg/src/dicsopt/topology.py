"""Time-varying directed graphs with windowed joint connectivity.

Nodes are indexed ``0 .. n-1``. An edge ``(j, i)`` means node ``j`` can send
to node ``i``. Every node implicitly hears itself, so self-loops are never
stored but always appear in neighbourhoods and weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np


class TopologyError(RuntimeError):
    """Raised when no admissible graph can be generated within the retry budget."""


@dataclass(frozen=True)
class DigraphSnapshot:
    """One directed graph on ``n`` nodes with implicit self-loops."""

    n: int
    edges: frozenset

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("node count must be positive")
        edges = frozenset((int(a), int(b)) for a, b in self.edges)
        for a, b in edges:
            if a == b:
                raise ValueError(f"explicit self-loop ({a}, {b}) not allowed")
            if not (0 <= a < self.n and 0 <= b < self.n):
                raise ValueError(f"edge ({a}, {b}) out of range for n={self.n}")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_adjacency(cls, adj: np.ndarray) -> "DigraphSnapshot":
        adj = np.asarray(adj, dtype=bool)
        src, dst = np.nonzero(adj & ~np.eye(adj.shape[0], dtype=bool))
        return cls(adj.shape[0], frozenset(zip(src.tolist(), dst.tolist())))

    @cached_property
    def adjacency(self) -> np.ndarray:
        """Boolean matrix with ``adj[j, i]`` true when ``j`` sends to ``i`` (no diagonal)."""
        adj = np.zeros((self.n, self.n), dtype=bool)
        for a, b in self.edges:
            adj[a, b] = True
        adj.flags.writeable = False
        return adj

    def in_neighbors(self, i: int) -> list[int]:
        return sorted({i} | {a for a, b in self.edges if b == i})

    def out_neighbors(self, j: int) -> list[int]:
        return sorted({j} | {b for a, b in self.edges if a == j})

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def _reaches_all(rows: list[int], full: int) -> bool:
    """Frontier search from node 0 over bitmask adjacency rows."""
    seen = frontier = 1
    while frontier:
        nxt = 0
        while frontier:
            low = frontier & -frontier
            nxt |= rows[low.bit_length() - 1]
            frontier ^= low
        frontier = nxt & ~seen
        seen |= nxt
    return seen == full


def _bit_rows(adj: np.ndarray) -> list[int]:
    n = adj.shape[0]
    if n <= 62:
        return (adj.astype(np.int64) @ (np.int64(1) << np.arange(n, dtype=np.int64))).tolist()
    return [sum(1 << int(j) for j in np.flatnonzero(row)) for row in adj]


def adjacency_strongly_connected(adj: np.ndarray) -> bool:
    """Strong connectivity of a boolean adjacency matrix (forward and backward search)."""
    adj = np.asarray(adj, dtype=bool)
    n = adj.shape[0]
    if n == 1:
        return True
    full = (1 << n) - 1
    return _reaches_all(_bit_rows(adj), full) and _reaches_all(_bit_rows(adj.T), full)


def strongly_connected(g: DigraphSnapshot) -> bool:
    """True iff every node reaches every other node along directed edges."""
    return adjacency_strongly_connected(g.adjacency)


def _draw_er(n, p, rng):
    adj = rng.random((n, n)) < p
    np.fill_diagonal(adj, False)
    return adj


def _drop_edges(adj, drop_count, rng, max_retries):
    if drop_count == 0:
        return adj
    src, dst = np.nonzero(adj)
    if drop_count > src.size:
        return None
    for _ in range(max_retries):
        # uniform drop_count-subset: indices of the smallest uniform keys
        pick = np.argpartition(rng.random(src.size), drop_count - 1)[:drop_count]
        trial = adj.copy()
        trial[src[pick], dst[pick]] = False
        if adjacency_strongly_connected(trial):
            return trial
    return None


def _er_adjacency(n, p, drop_count, rng, max_retries):
    if n < 2:
        raise ValueError("need at least two nodes")
    if not 0.0 <= p <= 1.0:
        raise ValueError("edge probability must lie in [0, 1]")
    if drop_count < 0 or drop_count >= n * (n - 1):
        raise ValueError("drop_count must be in [0, n(n-1))")
    for _ in range(max_retries):
        adj = _draw_er(n, p, rng)
        if not adjacency_strongly_connected(adj):
            continue
        kept = _drop_edges(adj, drop_count, rng, max_retries)
        if kept is not None:
            return kept
    raise TopologyError(
        f"no strongly connected draw for n={n}, p={p}, drop={drop_count} "
        f"within {max_retries} attempts; p is probably too small"
    )


def generate_er_directed(
    n: int, p: float, drop_count: int, rng: np.random.Generator, max_retries: int = 1000
) -> DigraphSnapshot:
    """Draw a strongly connected Erdos-Renyi digraph, then drop edges safely.

    Each ordered pair is kept with probability ``p``; draws are repeated until
    strongly connected. Then ``drop_count`` edges are removed, re-choosing the
    removed set whenever the removal would break strong connectivity.

    Raises
    ------
    TopologyError
        If the retry budget is exhausted.
    """
    return DigraphSnapshot.from_adjacency(_er_adjacency(n, p, drop_count, rng, max_retries))


@dataclass(frozen=True)
class TimeVaryingTopology:
    """A sequence of snapshots stored as a ``(horizon, n, n)`` boolean array.

    ``adjacency[t, j, i]`` is true when ``j`` sends to ``i`` at step ``t``.
    """

    adjacency: np.ndarray
    window: int = 1

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 3 or adj.shape[1] != adj.shape[2]:
            raise ValueError("adjacency must have shape (horizon, n, n)")
        if self.window < 1:
            raise ValueError("window must be positive")
        adj = adj & ~np.eye(adj.shape[1], dtype=bool)
        adj.flags.writeable = False
        object.__setattr__(self, "adjacency", adj)

    @classmethod
    def from_snapshots(cls, snapshots: Iterable[DigraphSnapshot], window: int = 1):
        snaps = list(snapshots)
        if not snaps:
            raise ValueError("need at least one snapshot")
        return cls(np.stack([s.adjacency for s in snaps]), window)

    @property
    def n(self) -> int:
        return self.adjacency.shape[1]

    @property
    def horizon(self) -> int:
        return self.adjacency.shape[0]

    def snapshot(self, t: int) -> DigraphSnapshot:
        return DigraphSnapshot.from_adjacency(self.adjacency[t])

    @property
    def snapshots(self) -> Iterator[DigraphSnapshot]:
        return (self.snapshot(t) for t in range(self.horizon))

    def window_union(self, k: int) -> np.ndarray:
        b = self.window
        return self.adjacency[k * b:(k + 1) * b].any(axis=0)

    def to_json(self) -> dict:
        snaps = [np.argwhere(a).tolist() for a in self.adjacency]
        return {"n": self.n, "B": self.window, "snapshots": snaps}

    @classmethod
    def from_json(cls, doc: dict) -> "TimeVaryingTopology":
        n, b = int(doc["n"]), int(doc["B"])
        snaps = [DigraphSnapshot(n, frozenset(map(tuple, s))) for s in doc["snapshots"]]
        return cls.from_snapshots(snaps, b)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "TimeVaryingTopology":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_joint_topology(
    n: int,
    p: float,
    drop_count: int,
    window: int,
    horizon: int,
    rng: np.random.Generator,
    max_retries: int = 1000,
) -> TimeVaryingTopology:
    """Build ``horizon`` snapshots whose aligned ``window``-unions are strongly connected.

    For ``window == 1`` every snapshot is an independent strongly connected
    draw. Otherwise one draw per window has its edges scattered uniformly at
    random over the window's snapshots.
    """
    if window < 1 or horizon < 1 or horizon % window:
        raise ValueError("horizon must be a positive multiple of the window")
    adj = np.zeros((horizon, n, n), dtype=bool)
    for k in range(horizon // window):
        union = _er_adjacency(n, p, drop_count, rng, max_retries)
        if window == 1:
            adj[k] = union
            continue
        src, dst = np.nonzero(union)
        slot = rng.integers(window, size=src.size)
        adj[k * window + slot, src, dst] = True
    return TimeVaryingTopology(adj, window)


def validate_b_joint(topology: TimeVaryingTopology) -> bool:
    """True iff every complete aligned window has a strongly connected union."""
    n_windows = topology.horizon // topology.window
    return all(adjacency_strongly_connected(topology.window_union(k)) for k in range(n_windows))


@dataclass(frozen=True)
class BaseWeights:
    """Uniform weights: ``w_in`` row-stochastic and ``w_out`` column-stochastic."""

    w_in: np.ndarray
    w_out: np.ndarray


def weights_from_adjacency(adj: np.ndarray) -> BaseWeights:
    n = adj.shape[0]
    link = np.asarray(adj, dtype=bool) | np.eye(n, dtype=bool)
    # link[j, i]: j -> i. Row i of w_in spreads over senders into i.
    w_in = link.T / link.sum(axis=0)[:, None]
    w_out = link.T / link.sum(axis=1)[None, :]
    return BaseWeights(w_in, w_out)


def base_weights(g: DigraphSnapshot) -> BaseWeights:
    """Uniform in/out weights including the implicit self-loop."""
    return weights_from_adjacency(g.adjacency)
