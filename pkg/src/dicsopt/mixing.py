"""Mask-aware weights, the surplus mixing matrix and its spectral diagnostics.

Two routes compute the same dynamics:

* explicit per-coordinate ``2n x 2n`` matrices (``normalize_in``,
  ``normalize_out``, ``assemble_mixing``, ``block_product``), used for
  spectra and as an oracle in tests;
* vectorized kernels (``mix_states``, ``push_surplus``) that apply all ``d``
  coordinates at once without forming the matrices; the engines use these.

Masks are boolean arrays of shape ``(n, d)``; ``keep[j, m]`` is true when
sender ``j`` transmits coordinate ``m``. ``None`` means nothing is dropped.
A node's own values are always available to itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparsifier import draw_mask_block


class SpectralError(RuntimeError):
    """Raised when the eigenvalue solver fails to converge."""


def _keep_column(masks, m, n):
    if masks is None:
        return np.ones(n, dtype=bool)
    if isinstance(masks, np.ndarray):
        return masks[:, m].astype(bool)
    return np.array([m in mk for mk in masks], dtype=bool)


def normalize_in(w_in: np.ndarray, x_masks, m: int) -> np.ndarray:
    """Row-stochastic weights for coordinate ``m``.

    Row ``i`` keeps senders that transmitted ``m`` plus ``i`` itself, then
    rescales the kept weights to sum to one.

    Parameters
    ----------
    w_in : (n, n) row-stochastic base weights
    x_masks : (n, d) bool array, sequence of CoordinateMask, or None
    m : coordinate index
    """
    n = w_in.shape[0]
    support = np.tile(_keep_column(x_masks, m, n), (n, 1))
    np.fill_diagonal(support, True)
    a = np.where(support, w_in, 0.0)
    return a / a.sum(axis=1, keepdims=True)


def normalize_out(w_out: np.ndarray, y_masks, m: int) -> np.ndarray:
    """Column-stochastic weights for coordinate ``m`` (sender semantics).

    Column ``j`` is the base column when ``j`` transmits ``m`` and the unit
    vector ``e_j`` otherwise, so a silent sender keeps its whole surplus.
    """
    n = w_out.shape[0]
    keep = _keep_column(y_masks, m, n)
    b = np.where(keep[None, :], w_out, np.eye(n))
    return b / b.sum(axis=0, keepdims=True)


def assemble_mixing(a_m: np.ndarray, b_m: np.ndarray) -> np.ndarray:
    """The ``2n x 2n`` matrix ``[[A, 0], [I - A, B]]``."""
    if a_m.shape != b_m.shape or a_m.shape[0] != a_m.shape[1]:
        raise ValueError("a_m and b_m must be square with equal shape")
    n = a_m.shape[0]
    out = np.zeros((2 * n, 2 * n))
    out[:n, :n] = a_m
    out[n:, :n] = np.eye(n) - a_m
    out[n:, n:] = b_m
    return out


def perturbation(n: int) -> np.ndarray:
    """``F = [[0, I], [0, -I]]``: moves stored surplus into the state."""
    f = np.zeros((2 * n, 2 * n))
    f[:n, n:] = np.eye(n)
    f[n:, n:] = -np.eye(n)
    return f


def chain_product(mats) -> np.ndarray:
    """``mats[-1] @ ... @ mats[0]`` (later steps act last)."""
    mats = list(mats)
    out = np.eye(mats[0].shape[0])
    for m in mats:
        out = m @ out
    return out


def block_product(mixings, gamma: float) -> np.ndarray:
    """Window product of mixing matrices plus ``gamma * F``."""
    mixings = list(mixings)
    if not mixings:
        raise ValueError("need at least one mixing matrix")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    prod = chain_product(mixings)
    return prod + gamma * perturbation(prod.shape[0] // 2)


def limit_matrix(n: int) -> np.ndarray:
    """``[[11^T/n, 11^T/n], [0, 0]]``, the limit of powers of a block product."""
    out = np.zeros((2 * n, 2 * n))
    out[:n, :] = 1.0 / n
    return out


def rank_one_limit_error(m_block: np.ndarray, power: int) -> float:
    """Frobenius distance between ``m_block ** power`` and the limit matrix."""
    n = m_block.shape[0] // 2
    return float(np.linalg.norm(np.linalg.matrix_power(m_block, power) - limit_matrix(n)))


def eigen_moduli(mat: np.ndarray) -> np.ndarray:
    """Eigenvalue moduli sorted in decreasing order (dense LAPACK solver)."""
    if not np.all(np.isfinite(mat)):
        raise SpectralError("matrix has non-finite entries")
    try:
        ev = np.linalg.eigvals(mat)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise SpectralError(f"eigenvalue iteration did not converge: {exc}") from exc
    return np.sort(np.abs(ev))[::-1]


@dataclass(frozen=True)
class SpectralReport:
    sigma: float
    m_moduli: np.ndarray
    b_moduli: np.ndarray

    @property
    def lambda2_m(self) -> float:
        return float(self.m_moduli[1]) if self.m_moduli.size > 1 else 0.0

    @property
    def lambda2_b(self) -> float:
        return float(self.b_moduli[1]) if self.b_moduli.size > 1 else 0.0

    @property
    def spectral_gap(self) -> float:
        return 1.0 - self.lambda2_m


def spectral_sigma(m_block: np.ndarray, b_block: np.ndarray) -> SpectralReport:
    """Second-largest eigenvalue moduli of the block product and the B-product."""
    mm, bm = eigen_moduli(m_block), eigen_moduli(b_block)
    l2m = mm[1] if mm.size > 1 else 0.0
    l2b = bm[1] if bm.size > 1 else 0.0
    return SpectralReport(float(max(l2m, l2b)), mm, bm)


# ----- vectorized kernels ---------------------------------------------------

def step_weights(adj: np.ndarray):
    """Base weights for one or many snapshots, split for fast masked mixing.

    Parameters
    ----------
    adj : (..., n, n) bool, ``adj[..., j, i]`` when ``j`` sends to ``i``

    Returns
    -------
    w_in_off : (..., n, n) in-weights with the diagonal removed
    w_in_diag : (..., n, 1) self weights of the in-weights
    w_out : (..., n, n) column-stochastic out-weights
    """
    adj = np.asarray(adj, dtype=bool)
    n = adj.shape[-1]
    link = adj | np.eye(n, dtype=bool)
    link_t = np.swapaxes(link, -1, -2)
    indeg = link.sum(axis=-2)
    outdeg = link.sum(axis=-1)
    w_in_off = np.swapaxes(adj, -1, -2) / indeg[..., :, None]
    w_out = link_t / outdeg[..., None, :]
    return w_in_off, (1.0 / indeg)[..., :, None], w_out


def mix_states(w_in_off, w_in_diag, keep, x: np.ndarray) -> np.ndarray:
    """Apply ``A_m`` to column ``m`` of ``x`` for every coordinate at once.

    ``keep`` is an ``(n, d)`` bool or 0/1 float mask, or ``None``.
    """
    if keep is None:
        return w_in_off @ x + w_in_diag * x
    num = w_in_off @ (x * keep) + w_in_diag * x
    return num / (w_in_off @ keep + w_in_diag)


def push_surplus(w_out, keep, y: np.ndarray) -> np.ndarray:
    """Apply ``B_m`` to column ``m`` of ``y`` for every coordinate at once."""
    if keep is None:
        return w_out @ y
    sent = y * keep
    return w_out @ sent + (y - sent)


def per_coordinate_matrices(adj: np.ndarray, x_keep, y_keep, d: int):
    """Explicit ``A_m`` and ``B_m`` stacks of shape ``(d, n, n)`` for one snapshot."""
    w_in_off, w_in_diag, w_out = step_weights(adj)
    w_in = w_in_off + np.diagflat(w_in_diag)
    a = np.stack([normalize_in(w_in, x_keep, m) for m in range(d)])
    b = np.stack([normalize_out(w_out, y_keep, m) for m in range(d)])
    return a, b


def window_spectra(step_mats, gamma: float) -> list[SpectralReport]:
    """Per-coordinate spectral reports for one window.

    ``step_mats`` is a list (over steps) of ``(a, b)`` stacks from
    :func:`per_coordinate_matrices`.
    """
    d = step_mats[0][0].shape[0]
    out = []
    for m in range(d):
        mixings = [assemble_mixing(a[m], b[m]) for a, b in step_mats]
        m_block = block_product(mixings, gamma)
        b_block = chain_product(b[m] for _, b in step_mats)
        out.append(spectral_sigma(m_block, b_block))
    return out


def contraction_ratio(m_block: np.ndarray, z: np.ndarray) -> float:
    """One-application ratio ``||M z - zbar|| / ||z - zbar||`` around the lifted mean.

    ``zbar`` puts the mean over all ``2n`` entries on the first ``n`` and
    zero on the rest. Values above the window's sigma are possible for
    non-normal blocks; only the long-run decay is governed by sigma.
    """
    z = np.asarray(z, dtype=float)
    n = z.shape[0] // 2
    lifted = np.concatenate([np.full(n, z.sum() / n), np.zeros(n)])
    before = np.linalg.norm(z - lifted)
    return float(np.linalg.norm(m_block @ z - lifted) / before) if before > 0 else 0.0


@dataclass(frozen=True)
class Calibration:
    """Spectra of ``windows`` consecutive windows, per coordinate."""

    lambda2_m: np.ndarray  # (windows, d)
    lambda2_b: np.ndarray  # (windows, d)

    @property
    def window_sigma(self) -> np.ndarray:
        return np.maximum(self.lambda2_m, self.lambda2_b).max(axis=1)

    @property
    def sigma(self) -> float:
        """Largest sigma over the sample; the constant used by the rate formulas."""
        return float(self.window_sigma.max())

    @property
    def min_gap(self) -> float:
        return 1.0 - float(self.lambda2_m.max())


def calibrate_sigma(adjacency, window: int, d: int, q: float, gamma: float, rng,
                    windows: int = 20) -> Calibration:
    """Measure per-window spectra on the first ``windows`` windows of a graph sequence.

    Masks are drawn from ``rng`` with the same per-step layout the engines use
    (x-masks then y-masks for every node).
    """
    adjacency = np.asarray(adjacency, dtype=bool)
    if adjacency.shape[0] < windows * window:
        raise ValueError(f"need {windows * window} snapshots, have {adjacency.shape[0]}")
    n = adjacency.shape[1]
    l2m = np.zeros((windows, d))
    l2b = np.zeros((windows, d))
    for k in range(windows):
        masks = draw_mask_block((window, 2, n), d, q, rng)
        mats = []
        for s in range(window):
            kx = ky = None
            if masks is not None:
                kx, ky = masks[s, 0], masks[s, 1]
            mats.append(per_coordinate_matrices(adjacency[k * window + s], kx, ky, d))
        for m, rep in enumerate(window_spectra(mats, gamma)):
            l2m[k, m] = rep.lambda2_m
            l2b[k, m] = rep.lambda2_b
    return Calibration(l2m, l2b)
