"""Sparsified surplus consensus and the gradient-tracking optimizers built on it.

State per node ``i``: a state vector ``x_i``, a surplus ``y_i`` (together the
``2n`` virtual nodes ``z``), and for the optimizers a tracked gradient ``g_i``
and a local estimate ``v_i``. One step, for every coordinate ``m``::

    x' = A_m x                 (+ gamma*y_stored - alpha*g_blk at block ends)
    y' = (I - A_m) x + B_m y   (- gamma*y_stored at block ends)
    g' = B_m g                 (+ v_new - v_old at block ends)

``y_stored``, ``x_blk`` and ``g_blk`` are snapshots taken at the block start.
Block ends are steps with ``t % B == B - 1``. All coordinates are updated at
once with the vectorized kernels of :mod:`dicsopt.mixing`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import mixing
from .mixing import mix_states, push_surplus
from .objectives import Dataset, centralized_optimum, component_grad, constants
from .sparsifier import draw_mask_block, mask_size
from .topology import TimeVaryingTopology

KINDS = ("consensus", "svrg", "full_grad", "plain_sgd")
STREAM_NAMES = ("topology", "data", "init", "masks", "samples")
TRACE_COLUMNS = (
    "t", "residual", "consensus_error", "optimality_error",
    "tracking_error", "comm_entries_cum", "grad_evals_cum",
)


class EngineError(RuntimeError):
    """Run-time failures: exhausted horizon, divergence."""


class DivergenceError(EngineError):
    pass


class Streams:
    """Independent named random generators derived from one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(STREAM_NAMES))
        for name, child in zip(STREAM_NAMES, children):
            setattr(self, name, np.random.default_rng(child))


@dataclass
class EngineConfig:
    """Engine parameters.

    ``T`` is the epoch length in steps (a multiple of ``B``); ``None`` picks
    ``2 * max(m_i) * B``. Optimizers run ``S * T`` steps in total.
    """

    kind: str = "svrg"
    alpha: float = 0.002
    gamma: float = 0.05
    B: int = 1
    T: int | None = None
    S: int = 1
    q: float = 1.0
    seed: int = 0
    record_every: int = 10
    record_blocks: int = 1
    keep_states: bool = False
    track_spectra: bool = False

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"engine kind must be one of {KINDS}, got {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.B < 1 or self.S < 1 or self.record_every < 1 or self.record_blocks < 1:
            raise ValueError("B, S, record_every and record_blocks must be positive")
        if self.T is not None and (self.T < 1 or self.T % self.B):
            raise ValueError("T must be a positive multiple of B")
        mask_size(1, self.q)

    def epoch_length(self, dataset: Dataset | None = None) -> int:
        if self.T is not None:
            return self.T
        m = int(dataset.sizes.max()) if dataset is not None else 1
        return 2 * m * self.B

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BlockState:
    """Snapshot of all node variables at a block boundary ``t = k B``."""

    k: int
    t: int
    x: np.ndarray
    y: np.ndarray
    g: np.ndarray | None = None
    tau: np.ndarray | None = None


@dataclass
class RunTrace:
    """Recorded metrics (one row per recorded step) plus run diagnostics."""

    columns: dict
    kind: str
    config: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    states: list = field(default_factory=list)
    window_sigma: list = field(default_factory=list)
    wall_time: float = 0.0

    def __getitem__(self, name) -> np.ndarray:
        return self.columns[name]

    def __len__(self) -> int:
        return len(self.columns["t"])

    @property
    def final_residual(self) -> float:
        return float(self.columns["residual"][-1])

    def as_matrix(self) -> np.ndarray:
        return np.column_stack([self.columns[c] for c in TRACE_COLUMNS])

    def first_step_below(self, threshold: float) -> int | None:
        """Smallest recorded ``t`` with residual at or below ``threshold``."""
        hit = np.flatnonzero(self.columns["residual"] <= threshold)
        return int(self.columns["t"][hit[0]]) if hit.size else None


class _Recorder:
    def __init__(self):
        self.rows = {c: [] for c in TRACE_COLUMNS}

    def add(self, **vals):
        for c in TRACE_COLUMNS:
            self.rows[c].append(vals[c])

    def finish(self):
        cols = {c: np.asarray(v, dtype=float) for c, v in self.rows.items()}
        cols["t"] = cols["t"].astype(np.int64)
        return cols


def _check_horizon(topology: TimeVaryingTopology, steps: int, n: int):
    if topology.n != n:
        raise ValueError(f"topology has {topology.n} nodes but the state has {n}")
    if topology.horizon < steps:
        raise EngineError(f"topology horizon {topology.horizon} is shorter than {steps} steps")


class _Schedule:
    """Per-step weights, masks and sample indices, prepared ``chunk`` steps at a time.

    Random draws are always made for whole chunks, so a short run sees
    exactly the draws of the first steps of a longer run with the same
    streams, and both engine backends consume identical randomness.
    """

    def __init__(self, adjacency, d, q, mask_rng, chunk=256, sample_rng=None, sizes=None):
        self.adj = adjacency
        self.n = adjacency.shape[1]
        self.d, self.q, self.mask_rng, self.chunk = d, q, mask_rng, chunk
        self.sample_rng, self.sizes = sample_rng, sizes
        self.kept = mask_size(d, q)

    def chunks(self, steps):
        for c0 in range(0, steps, self.chunk):
            adj = self.adj[c0:c0 + self.chunk]
            w_off, w_diag, w_out = mixing.step_weights(adj)
            fanout = adj.sum(axis=(1, 2)).astype(float)
            masks = draw_mask_block((self.chunk, 2, self.n), self.d, self.q, self.mask_rng)
            if masks is not None:
                masks = masks.astype(float)
            idx = None
            if self.sample_rng is not None:
                idx = self.sample_rng.integers(0, self.sizes, size=(self.chunk, self.n))
            yield c0, min(self.chunk, steps - c0), adj, w_off, w_diag, w_out, fanout, masks, idx

    def __call__(self, steps):
        for c0, m, adj, w_off, w_diag, w_out, fanout, masks, idx in self.chunks(steps):
            for j in range(m):
                kx = ky = None
                if masks is not None:
                    kx, ky = masks[j, 0], masks[j, 1]
                yield (c0 + j, adj[j], w_off[j], w_diag[j], w_out[j], fanout[j], kx, ky,
                       None if idx is None else idx[j])


def _window_sigma(step_mats, gamma):
    return max(r.sigma for r in mixing.window_spectra(step_mats, gamma))


def consensus_run(
    topology: TimeVaryingTopology,
    x0,
    gamma: float,
    q: float,
    steps: int,
    rng: Streams | int = 0,
    record_every: int = 1,
    keep_states: bool = False,
    track_spectra: bool = False,
) -> RunTrace:
    """Average consensus with sparsified messages and surplus correction.

    Parameters
    ----------
    topology : graph sequence with ``horizon >= steps``
    x0 : (n, d) initial states; surpluses start at zero
    gamma : perturbation weight in (0, 1)
    q : fraction of coordinates each sender transmits
    rng : :class:`Streams` or an integer seed (masks use the ``masks`` stream)

    Returns
    -------
    RunTrace
        ``residual`` is ``||x^t - xbar0|| / ||x^0 - xbar0||`` (stacked over
        nodes). ``diagnostics['max_mass_drift']`` is the largest change of
        the network mean over all steps, relative to ``max |x0|``.
    """
    streams = rng if isinstance(rng, Streams) else Streams(rng)
    x = np.array(x0, dtype=float, copy=True)
    if x.ndim != 2:
        raise ValueError("x0 must have shape (n, d)")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    n, d = x.shape
    _check_horizon(topology, steps, n)
    B = topology.window
    schedule = _Schedule(topology.adjacency, d, q, streams.masks)
    y = np.zeros_like(x)
    target = x.mean(axis=0)
    mass0 = x.sum(axis=0) / n
    mass_scale = max(float(np.abs(x).max()), 1e-300)
    res0 = np.linalg.norm(x - target)
    res0 = res0 if res0 > 0 else 1.0

    rec = _Recorder()
    comm = 0.0
    max_drift = 0.0
    max_eq_gap = 0.0
    states, sigmas, step_mats = [], [], []

    def record(t):
        zbar = (x.sum(axis=0) + y.sum(axis=0)) / n
        rec.add(t=t, residual=float(np.linalg.norm(x - target)) / res0,
                consensus_error=float(np.sum((x - zbar) ** 2)),
                optimality_error=float(n * np.sum((zbar - target) ** 2)),
                tracking_error=0.0, comm_entries_cum=comm, grad_evals_cum=0.0)

    start = time.perf_counter()
    record(0)
    y_stored = y
    for t, adj, w_off, w_diag, w_out, fanout, kx, ky, _ in schedule(steps):
        r = t % B
        if r == 0:
            y_stored = y.copy()
            if keep_states:
                states.append(BlockState(t // B, t, x.copy(), y.copy()))
        if track_spectra:
            step_mats.append(mixing.per_coordinate_matrices(adj, kx, ky, d))
        x_new = mix_states(w_off, w_diag, kx, x)
        pushed = push_surplus(w_out, ky, y)
        y_new = x - x_new + pushed
        comm += 2 * schedule.kept * fanout
        if r == B - 1:
            x_new += gamma * y_stored
            y_new -= gamma * y_stored
            if track_spectra:
                sigmas.append(_window_sigma(step_mats, gamma))
                step_mats = []
            # element-wise form: y' = B y - (x' - x)
            max_eq_gap = max(max_eq_gap, float(np.max(np.abs(pushed - (x_new - x) - y_new))))
        x, y = x_new, y_new
        drift = float(np.max(np.abs((x.sum(axis=0) + y.sum(axis=0)) / n - mass0))) / mass_scale
        if not drift <= max_drift:
            if not np.isfinite(drift):
                raise DivergenceError(f"non-finite state at step {t}")
            max_drift = drift
        if (t + 1) % record_every == 0 or t + 1 == steps:
            record(t + 1)
    if keep_states and steps % B == 0:
        states.append(BlockState(steps // B, steps, x.copy(), y.copy()))

    trace = RunTrace(rec.finish(), "consensus",
                     config={"gamma": gamma, "q": q, "B": B, "steps": steps, "seed": streams.seed},
                     states=states, window_sigma=sigmas)
    trace.diagnostics = {"max_mass_drift": max_drift, "elementwise_form_gap": max_eq_gap,
                         "final_x": x, "final_y": y, "target": target}
    trace.wall_time = time.perf_counter() - start
    return trace


def svrg_gradient_estimate(dataset: Dataset, i: int, x_block, w_snapshot, mu_full, l_i: int) -> np.ndarray:
    """Variance-reduced estimate ``grad f_il(x) - grad f_il(w) + full_grad_i(w)``."""
    return (component_grad(dataset, i, l_i, x_block) - component_grad(dataset, i, l_i, w_snapshot)
            + np.asarray(mu_full, dtype=float))


def gradient_tracking_update(g_prev, b_matrices, v_new, v_old) -> np.ndarray:
    """One-shot tracking update with explicit per-coordinate window products.

    ``b_matrices`` has shape ``(d, n, n)``; column ``m`` of the result is
    ``b_matrices[m] @ g_prev[:, m] + v_new[:, m] - v_old[:, m]``.
    """
    g_prev = np.asarray(g_prev, float)
    mixed = np.einsum("mij,jm->im", np.asarray(b_matrices, float), g_prev)
    return mixed + np.asarray(v_new, float) - np.asarray(v_old, float)


def _estimates(kind, dataset, x_blk, w_tilde, mu_full, idx):
    if kind == "full_grad":
        return dataset.local_grads(x_blk)
    if kind == "plain_sgd":
        return dataset.sample_grads(x_blk, idx)
    return dataset.sample_grads(x_blk, idx) - dataset.sample_grads(w_tilde, idx) + mu_full


def _numba_available() -> bool:
    try:
        from . import _kernels  # noqa: F401
    except ImportError:  # pragma: no cover - numba missing
        return False
    return True


def _optimize(topology, dataset, config: EngineConfig, rng, x0=None, x_star=None, L=None,
              backend: str = "auto") -> RunTrace:
    config.validate()
    streams = rng if isinstance(rng, Streams) else Streams(config.seed if rng is None else rng)
    kind = config.kind
    n, d = dataset.n, dataset.d
    B = config.B
    if topology.window != B:
        raise ValueError(f"topology window {topology.window} differs from engine B={B}")
    T = config.epoch_length(dataset)
    if T % B:
        raise ValueError("epoch length must be a multiple of B")
    steps = config.S * T
    _check_horizon(topology, steps, n)
    if L is None:
        L = constants(dataset).L
    if x_star is None:
        x_star = centralized_optimum(dataset).x_star
    x_star = np.asarray(x_star, dtype=float)
    x = (streams.init.standard_normal((n, d)) if x0 is None else np.array(x0, dtype=float, copy=True))
    if x.shape != (n, d):
        raise ValueError(f"x0 must have shape {(n, d)}")
    if backend == "auto":
        needs_numpy = config.keep_states or config.track_spectra
        backend = "numba" if (not needs_numpy and _numba_available()) else "numpy"
    if backend not in ("numpy", "numba"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and (config.keep_states or config.track_spectra):
        raise ValueError("state snapshots and spectra tracking need the numpy backend")

    sizes = dataset.sizes
    schedule = _Schedule(topology.adjacency, d, config.q, streams.masks,
                         sample_rng=None if kind == "full_grad" else streams.samples, sizes=sizes)
    grads = dataset.local_grads(x)
    res0 = np.linalg.norm(x - x_star)
    state = {
        "x": x, "y": np.zeros_like(x), "g": grads.copy(), "v": grads.copy(),
        "w_tilde": x.copy(), "mu_full": grads.copy(),
        "res0": res0 if res0 > 0 else 1.0, "L": float(L), "x_star": x_star,
        "total": float(sizes.sum()), "T": T, "steps": steps,
    }
    start = time.perf_counter()
    loop = _loop_numba if backend == "numba" else _loop_numpy
    # overflow ahead of divergence is reported as DivergenceError instead
    with np.errstate(over="ignore", invalid="ignore"):
        cols, diag, states, sigmas = loop(dataset, config, schedule, state)
    trace = RunTrace(cols, kind, config=config.to_dict(), states=states, window_sigma=sigmas)
    diag.update({"final_x": state["x"], "final_y": state["y"], "x_star": x_star, "L": L,
                 "epoch_length": T, "backend": backend})
    trace.diagnostics = diag
    trace.wall_time = time.perf_counter() - start
    return trace


def _divergence(t, B, alpha):
    return DivergenceError(
        f"non-finite iterate at step {t} (block {t // B}); alpha={alpha} is likely too large")


def _loop_numpy(dataset, config, schedule, st):
    kind = config.kind
    B, T, alpha, gamma = config.B, st["T"], config.alpha, config.gamma
    n, steps, total, L = dataset.n, st["steps"], st["total"], st["L"]
    x, y, g, v = st["x"], st["y"], st["g"], st["v"]
    w_tilde, mu_full, x_star, res0 = st["w_tilde"], st["mu_full"], st["x_star"], st["res0"]
    block_evals = {"svrg": 2 * n, "plain_sgd": n, "full_grad": total}[kind]
    evals = total
    comm = 0.0
    rec = _Recorder()
    diag = {"mean_dynamics_err": 0.0, "tracking_identity_err": 0.0, "elementwise_form_gap": 0.0}
    states, sigmas, step_mats = [], [], []

    def record(t):
        zbar = (x.sum(axis=0) + y.sum(axis=0)) / n
        rec.add(t=t, residual=float(np.linalg.norm(x - x_star)) / res0,
                consensus_error=float(np.sum((x - zbar) ** 2)),
                optimality_error=float(n * np.sum((zbar - x_star) ** 2)),
                tracking_error=float(np.sum((g - g.sum(axis=0) / n) ** 2)) / L ** 2,
                comm_entries_cum=comm, grad_evals_cum=evals / total)

    def check_tracking():
        err = float(np.max(np.abs(g.sum(axis=0) - v.sum(axis=0)))) / n
        err /= max(1.0, float(np.abs(v).max()))
        if err > diag["tracking_identity_err"]:
            diag["tracking_identity_err"] = err

    record(0)
    check_tracking()
    y_st = x_blk = g_blk = expect = None
    for t, adj, w_off, w_diag, w_out, fanout, kx, ky, idx in schedule(steps):
        r = t % B
        if kind == "svrg" and t % T == 0 and t > 0:
            w_tilde = x.copy()
            mu_full = dataset.local_grads(w_tilde)
            evals += total
        if r == 0:
            y_st, x_blk, g_blk = y.copy(), x.copy(), g.copy()
            # mean dynamics prediction for the end of this block
            expect = (x.sum(axis=0) + y.sum(axis=0) - alpha * v.sum(axis=0)) / n
            if config.keep_states:
                # tau is x at epoch starts and the epoch snapshot otherwise
                tau = x if t % T == 0 else w_tilde
                states.append(BlockState(t // B, t, x.copy(), y.copy(), g.copy(), tau.copy()))
        if config.track_spectra:
            step_mats.append(mixing.per_coordinate_matrices(adj, kx, ky, dataset.d))
        x_new = mix_states(w_off, w_diag, kx, x)
        pushed = push_surplus(w_out, ky, y)
        y_new = x - x_new + pushed
        g = push_surplus(w_out, ky, g)
        comm += 3 * schedule.kept * fanout
        if r == B - 1:
            x_new += gamma * y_st - alpha * g_blk
            y_new -= gamma * y_st
            v_new = _estimates(kind, dataset, x_blk, w_tilde, mu_full, idx)
            evals += block_evals
            g += v_new - v
            v = v_new
            gap = float(np.max(np.abs(pushed - (x_new - x) - y_new)))
            if gap > diag["elementwise_form_gap"]:
                diag["elementwise_form_gap"] = gap
            if config.track_spectra:
                sigmas.append(_window_sigma(step_mats, gamma))
                step_mats = []
        x, y = x_new, y_new
        if r == B - 1:
            k = t // B
            zbar = (x.sum(axis=0) + y.sum(axis=0)) / n
            err = float(np.max(np.abs(zbar - expect))) / max(1.0, float(np.abs(expect).max()))
            if not err <= diag["mean_dynamics_err"]:
                if not np.isfinite(err):
                    raise _divergence(t, B, alpha)
                diag["mean_dynamics_err"] = err
            check_tracking()
            if (k + 1) % config.record_blocks == 0 or t + 1 == steps:
                record(t + 1)
                continue
        if (t + 1) % config.record_every == 0 or t + 1 == steps:
            record(t + 1)
    if config.keep_states:
        tau = x if steps % T == 0 else w_tilde
        states.append(BlockState(steps // B, steps, x.copy(), y.copy(), g.copy(), tau.copy()))
    st.update(x=x, y=y, g=g, v=v)
    return rec.finish(), diag, states, sigmas


def _loop_numba(dataset, config, schedule, st):
    from . import _kernels as K

    kind = {"svrg": K.SVRG, "full_grad": K.FULL_GRAD, "plain_sgd": K.PLAIN_SGD}[config.kind]
    B, T, steps, n, d = config.B, st["T"], st["steps"], dataset.n, dataset.d
    m_max = int(dataset.sizes.max())
    D = np.zeros((n, m_max, d))
    Y = np.zeros((n, m_max))
    for i, (f, tg) in enumerate(zip(dataset.features, dataset.targets)):
        D[i, :len(tg)] = f
        Y[i, :len(tg)] = tg
    sizes = dataset.sizes.astype(np.int64)
    x, y, g, v = st["x"], st["y"], st["g"], st["v"]
    w_tilde, mu_full = st["w_tilde"], st["mu_full"]
    y_st, x_blk, g_blk = np.zeros_like(x), np.zeros_like(x), np.zeros_like(x)
    expect = np.zeros(d)
    acc = np.array([0.0, st["total"], st["total"]])
    max_rows = steps // config.record_every + steps // (B * config.record_blocks) + 3
    rows = np.zeros((max_rows, len(TRACE_COLUMNS)))
    diag = np.zeros(4)
    K._record(rows, 0, 0, x, y, g, st["x_star"], st["res0"], st["L"], 0.0, 1.0)
    nrow = 1
    err0 = float(np.max(np.abs(g.sum(axis=0) - v.sum(axis=0)))) / n / max(1.0, float(np.abs(v).max()))
    no_mask = np.zeros((1, 2, 1, 1))
    no_idx = np.zeros((1, 1), dtype=np.int64)
    for c0, m, _adj, w_off, w_diag, w_out, fanout, masks, idx in schedule.chunks(steps):
        nrow = K.run_chunk(
            c0, m, steps, B, T, kind, config.alpha, config.gamma,
            w_off, np.ascontiguousarray(w_diag[..., 0]), w_out, fanout,
            no_mask if masks is None else masks, masks is not None,
            no_idx if idx is None else idx.astype(np.int64),
            D, Y, sizes, dataset.kind == "logistic", float(dataset.mu_reg),
            x, y, g, v, w_tilde, mu_full, y_st, x_blk, g_blk, expect,
            float(schedule.kept), acc, st["x_star"], st["res0"], st["L"],
            config.record_every, config.record_blocks, rows, nrow, diag,
        )
        if nrow < 0:
            raise _divergence(int(diag[K.D_BAD_STEP]), B, config.alpha)
    cols = {c: rows[:nrow, j].copy() for j, c in enumerate(TRACE_COLUMNS)}
    cols["t"] = cols["t"].astype(np.int64)
    out = {"mean_dynamics_err": float(diag[K.D_MEAN]),
           "tracking_identity_err": max(err0, float(diag[K.D_TRACK])),
           "elementwise_form_gap": float(diag[K.D_GAP])}
    return cols, out, [], []


def svrg_run(topology, dataset, config: EngineConfig, rng=None, x0=None, x_star=None, L=None,
             backend: str = "auto") -> RunTrace:
    """Variance-reduced gradient tracking (double loop over epochs and blocks).

    At each epoch start ``w = x`` and ``mu = grad f_i(w)``; at each block end
    node ``i`` draws a sample ``l`` and forms
    ``v = grad f_il(x_blk) - grad f_il(w) + mu``.

    Raises
    ------
    DivergenceError
        If the iterates become non-finite.
    """
    if config.kind != "svrg":
        raise ValueError("svrg_run needs config.kind == 'svrg'")
    return _optimize(topology, dataset, config, rng, x0, x_star, L, backend)


def ablation_run(topology, dataset, config: EngineConfig, rng=None, x0=None, x_star=None, L=None,
                 backend: str = "auto") -> RunTrace:
    """Same machinery with full local gradients or plain single-sample gradients."""
    if config.kind not in ("full_grad", "plain_sgd"):
        raise ValueError("ablation_run needs config.kind in {'full_grad', 'plain_sgd'}")
    return _optimize(topology, dataset, config, rng, x0, x_star, L, backend)


def run_engine(topology, dataset, config: EngineConfig, rng=None, **kw) -> RunTrace:
    """Dispatch an optimizing engine by ``config.kind``."""
    if config.kind == "svrg":
        return svrg_run(topology, dataset, config, rng, **kw)
    return ablation_run(topology, dataset, config, rng, **kw)
