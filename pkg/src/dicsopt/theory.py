"""Step-size and rate constants, the three-error linear system, and trace checks.

The error vector at block boundary ``kB`` is

``u = [sum_i ||zbar - x_i||^2, n ||zbar - x*||^2, sum_{i,m} |g_im - gbar_m|^2 / L^2]``

with ``zbar`` the network mean over all ``2n`` virtual nodes, and the
snapshot vector is ``u_tilde = [sum_i ||tau_i - taubar||^2, n ||taubar - x*||^2, 0]``
where ``tau`` is the state at epoch starts and the epoch snapshot otherwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .mixing import eigen_moduli


@dataclass(frozen=True)
class TheoryInputs:
    sigma: float
    L: float
    mu: float
    B: int = 1
    n: int = 1

    def __post_init__(self):
        if not 0.0 <= self.sigma < 1.0:
            raise ValueError(f"sigma must lie in [0, 1), got {self.sigma}")
        if not (self.L > 0 and self.mu > 0 and self.L >= self.mu):
            raise ValueError("need L >= mu > 0")
        if self.B < 1 or self.n < 1:
            raise ValueError("B and n must be positive")

    @property
    def q_tilde(self) -> float:
        return self.L / self.mu

    @property
    def gap(self) -> float:
        """``1 - sigma^2``."""
        return 1.0 - self.sigma ** 2


def guaranteed_step_size(inputs: TheoryInputs) -> float:
    """Guaranteed step size ``(1 - sigma^2)^2 / (187 Q L)``."""
    return inputs.gap ** 2 / (187.0 * inputs.q_tilde * inputs.L)


def rate_epoch_length(inputs: TheoryInputs) -> int:
    """Epoch length ``B * ceil(1496 Q^2 ln(200 Q^2) / ((1 - sigma^2)^2 B))``."""
    q2 = inputs.q_tilde ** 2
    blocks = math.ceil(1496.0 * q2 / (inputs.gap ** 2 * inputs.B) * math.log(200.0 * q2))
    return inputs.B * blocks


def lambda_rate(inputs: TheoryInputs, T: float) -> float:
    """Per-epoch contraction ``8 Q^2 exp(-(1 - sigma^2)^2 T / (748 Q^2)) + 0.66``."""
    if T < 0:
        raise ValueError("T must be nonnegative")
    q2 = inputs.q_tilde ** 2
    return 8.0 * q2 * math.exp(-inputs.gap ** 2 * T / (748.0 * q2)) + 0.66


def admissible_alpha_bound(inputs: TheoryInputs) -> float:
    """Largest step size for which the linear system bound is stated."""
    return inputs.mu * inputs.gap / (14.0 * math.sqrt(2.0) * inputs.L ** 2)


@dataclass(frozen=True)
class LtiSystem:
    J: np.ndarray
    H: np.ndarray
    delta: np.ndarray
    q_weights: np.ndarray
    alpha: float
    admissible: bool


def build_lti(alpha: float, inputs: TheoryInputs, n: int | None = None) -> LtiSystem:
    """Coefficient matrices of ``u_next <= J u + H u_tilde``.

    A step size above :func:`admissible_alpha_bound` still yields matrices
    but sets ``admissible=False`` and emits a warning.
    """
    n = inputs.n if n is None else n
    s2, gap, L, mu = inputs.sigma ** 2, inputs.gap, inputs.L, inputs.mu
    q2 = inputs.q_tilde ** 2
    J = np.array([
        [(1 + s2) / 2, 0.0, 2 * alpha ** 2 * L ** 2 / gap],
        [2 * L ** 2 * alpha / mu, 1 - mu * alpha / 2, 0.0],
        [120 / gap, 89 / gap, (3 + s2) / 4],
    ])
    c = 4 * L ** 2 * alpha ** 2 / n
    H = np.array([
        [0.0, 0.0, 0.0],
        [c, c, 0.0],
        [38 / gap, 38 / gap, 0.0],
    ])
    delta = np.array([1.0, 8 * q2, 6656 * q2 / gap ** 2])
    q_weights = np.array([1.0, 1.0, 1457 / gap ** 2])
    ok = 0 <= alpha <= admissible_alpha_bound(inputs) * (1 + 1e-12)
    if not ok:
        warnings.warn(f"alpha={alpha:.3e} exceeds the admissible bound", RuntimeWarning, stacklevel=2)
    return LtiSystem(J, H, delta, q_weights, float(alpha), ok)


def weighted_inf_norm(matrix, weights) -> float:
    """Induced weighted max-norm ``max_i sum_j |M_ij| w_j / w_i``."""
    M = np.asarray(matrix, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be strictly positive")
    return float(np.max(np.abs(M) @ w / w))


@dataclass(frozen=True)
class ContractionReport:
    spectral_radius: float
    j_norm: float
    j_bound: float
    transfer_norm: float
    radius_ok: bool
    norm_ok: bool
    transfer_ok: bool
    entrywise_ok: bool

    @property
    def ok(self) -> bool:
        return self.radius_ok and self.norm_ok and self.transfer_ok


def check_contraction(alpha: float, inputs: TheoryInputs, rtol: float = 1e-12) -> ContractionReport:
    """Evaluate the weighted-norm contraction and transfer bounds of the system.

    The middle row of ``J delta`` equals ``(1 - mu alpha / 4) delta_2``
    exactly, so the bound on the weighted norm of ``J`` is tested as a
    non-strict inequality with relative tolerance ``rtol``.

    Raises
    ------
    numpy.linalg.LinAlgError
        If ``I - J`` is singular.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lti = build_lti(alpha, inputs)
    rho = float(eigen_moduli(lti.J)[0])
    j_norm = weighted_inf_norm(lti.J, lti.delta)
    bound = 1 - inputs.mu * alpha / 4
    transfer = np.linalg.solve(np.eye(3) - lti.J, lti.H)
    t_norm = weighted_inf_norm(transfer, lti.q_weights)
    entrywise = bool(np.all(lti.J @ lti.delta <= bound * lti.delta * (1 + rtol)))
    return ContractionReport(
        spectral_radius=rho, j_norm=j_norm, j_bound=bound, transfer_norm=t_norm,
        radius_ok=rho <= j_norm * (1 + rtol),
        norm_ok=j_norm <= bound * (1 + rtol),
        transfer_ok=t_norm < 0.66,
        entrywise_ok=entrywise,
    )


# ----- trace-based checks ---------------------------------------------------

def error_vectors(x, y, g, tau, x_star, L):
    """``(u, u_tilde)`` for one block-boundary snapshot."""
    n = x.shape[0]
    zbar = (x.sum(axis=0) + y.sum(axis=0)) / n
    u = np.array([
        np.sum((x - zbar) ** 2),
        n * np.sum((zbar - x_star) ** 2),
        np.sum((g - g.mean(axis=0)) ** 2) / L ** 2,
    ])
    taubar = tau.mean(axis=0)
    ut = np.array([np.sum((tau - taubar) ** 2), n * np.sum((taubar - x_star) ** 2), 0.0])
    return u, ut


def u_from_trace(trace, dataset=None, x_star=None, L=None):
    """Error vectors at every recorded block boundary.

    ``trace`` must come from an optimizing run with ``keep_states=True``.
    ``dataset`` is accepted for signature symmetry and is not needed.

    Returns
    -------
    (ndarray, ndarray)
        Arrays of shape ``(K, 3)`` holding ``u`` and ``u_tilde``.
    """
    if not trace.states or trace.states[0].g is None:
        raise ValueError("trace has no block-boundary snapshots; run with keep_states=True")
    x_star = trace.diagnostics["x_star"] if x_star is None else x_star
    L = trace.diagnostics["L"] if L is None else L
    pairs = [error_vectors(s.x, s.y, s.g, s.tau, x_star, L) for s in trace.states]
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


@dataclass(frozen=True)
class RecursionReport:
    worst_ratio: float
    worst_component: int
    worst_block: int
    violations: int
    slack: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def _ratio_report(lhs, rhs, slack, floor=0.0):
    ratio = np.where(rhs > floor, lhs / np.where(rhs > floor, rhs, 1.0),
                     np.where(lhs > floor, np.inf, 0.0))
    k, c = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
    return RecursionReport(float(ratio[k, c]), int(c), int(k), int(np.sum(ratio > 1 + slack)), slack)


def verify_lti_bound(traces, lti: LtiSystem, slack: float = 0.05) -> RecursionReport:
    """Check ``E u_next <= J E u + H E u_tilde`` on ensemble means.

    ``traces`` is a list of runs sharing one configuration, or a list of
    precomputed ``(u, u_tilde)`` pairs.
    """
    pairs = [t if isinstance(t, tuple) else u_from_trace(t) for t in traces]
    u = np.mean([p[0] for p in pairs], axis=0)
    ut = np.mean([p[1] for p in pairs], axis=0)
    lhs = u[1:]
    rhs = u[:-1] @ lti.J.T + ut[:-1] @ lti.H.T
    return _ratio_report(lhs, rhs, slack, floor=1e-300)


def consensus_recursion_check(trace, alpha: float, sigmas=None, slack: float = 0.01) -> RecursionReport:
    """Pathwise check of the consensus-error recursion, summed over nodes and coordinates.

    ``cons_next <= (1 + s^2)/2 * cons + 2 alpha^2 / (1 - s^2) * sum|g - gbar|^2``
    with ``s`` the measured sigma of each window (``trace.window_sigma`` by
    default).
    """
    u, _ = u_from_trace(trace)
    L = trace.diagnostics["L"]
    s = np.asarray(trace.window_sigma if sigmas is None else sigmas, dtype=float)
    K = min(len(u) - 1, len(s))
    if K < 1:
        raise ValueError("need per-window sigma values and at least two snapshots")
    s2 = s[:K] ** 2
    lhs = u[1:K + 1, :1]
    rhs = ((1 + s2) / 2 * u[:K, 0] + 2 * alpha ** 2 / (1 - s2) * u[:K, 2] * L ** 2)[:, None]
    return _ratio_report(lhs, rhs, slack, floor=1e-300)
