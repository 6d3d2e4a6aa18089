"""Decentralized finite-sum objectives: least squares and regularized logistic loss.

Node ``i`` holds ``m_i`` samples and the local objective is the sample mean
``f_i(x) = (1/m_i) sum_j f_ij(x)``. The global objective is ``(1/n) sum_i f_i``.

Components
----------
linear    ``f_ij(x) = (y_ij - d_ij^T x)^2``
logistic  ``f_ij(x) = (mu_reg/2)||x||^2 + log(1 + exp(-y_ij d_ij^T x))``
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("linear", "logistic")


class ObjectiveError(ValueError):
    """Raised for datasets that violate strong convexity or solver budgets."""


def _sigmoid(u):
    # numerically stable logistic function
    out = np.empty_like(u, dtype=float)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class Dataset:
    """Per-node samples ``features[i]`` (m_i x d) and ``targets[i]`` (m_i,)."""

    kind: str
    features: list
    targets: list
    mu_reg: float = 0.0
    _stacked: tuple | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if len(self.features) != len(self.targets) or not self.features:
            raise ValueError("need matching, nonempty feature and target lists")
        self.features = [np.asarray(f, dtype=float) for f in self.features]
        self.targets = [np.asarray(y, dtype=float) for y in self.targets]
        d = self.features[0].shape[1]
        for f, y in zip(self.features, self.targets):
            if f.ndim != 2 or f.shape[1] != d or f.shape[0] < 1 or y.shape != (f.shape[0],):
                raise ValueError("every node needs an (m_i, d) matrix and m_i targets")
        if self.mu_reg < 0:
            raise ValueError("mu_reg must be nonnegative")
        if len({f.shape[0] for f in self.features}) == 1:
            self._stacked = (np.stack(self.features), np.stack(self.targets))

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def d(self) -> int:
        return self.features[0].shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([f.shape[0] for f in self.features])

    # ----- scalar oracles -------------------------------------------------
    def component_loss(self, i: int, j: int, x) -> float:
        dij, yij = self.features[i][j], self.targets[i][j]
        u = dij @ x
        if self.kind == "linear":
            return float((yij - u) ** 2)
        return float(0.5 * self.mu_reg * (x @ x) + np.logaddexp(0.0, -yij * u))

    def local_loss(self, i: int, x) -> float:
        D, y = self.features[i], self.targets[i]
        u = D @ x
        if self.kind == "linear":
            return float(np.mean((y - u) ** 2))
        return float(0.5 * self.mu_reg * (x @ x) + np.mean(np.logaddexp(0.0, -y * u)))

    def global_loss(self, x) -> float:
        return float(np.mean([self.local_loss(i, x) for i in range(self.n)]))

    def global_grad(self, x) -> np.ndarray:
        return np.mean([local_full_grad(self, i, x) for i in range(self.n)], axis=0)

    # ----- vectorized oracles used by the engines -------------------------
    def sample_grads(self, X: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Row ``i`` is the gradient of sample ``idx[i]`` of node ``i`` at ``X[i]``."""
        if self._stacked is not None:
            rows = np.arange(self.n)
            D = self._stacked[0][rows, idx]
            y = self._stacked[1][rows, idx]
        else:
            D = np.stack([f[j] for f, j in zip(self.features, idx)])
            y = np.array([t[j] for t, j in zip(self.targets, idx)])
        u = np.einsum("ij,ij->i", D, X)
        if self.kind == "linear":
            return 2.0 * (u - y)[:, None] * D
        return self.mu_reg * X - (y * _sigmoid(-y * u))[:, None] * D

    def local_grads(self, X: np.ndarray) -> np.ndarray:
        """Row ``i`` is the full local gradient of node ``i`` at ``X[i]``."""
        if self._stacked is None:
            return np.stack([local_full_grad(self, i, X[i]) for i in range(self.n)])
        D, y = self._stacked
        u = np.einsum("imd,id->im", D, X)
        if self.kind == "linear":
            return (2.0 / D.shape[1]) * np.einsum("im,imd->id", u - y, D)
        w = y * _sigmoid(-y * u)
        return self.mu_reg * X - np.einsum("im,imd->id", w, D) / D.shape[1]

    # ----- persistence ----------------------------------------------------
    def save_csv(self, directory) -> list[Path]:
        """One CSV per node; each row is a sample followed by its target."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for i, (D, y) in enumerate(zip(self.features, self.targets)):
            path = directory / f"node_{i:03d}.csv"
            np.savetxt(path, np.column_stack([D, y]), delimiter=",", fmt="%.17g")
            paths.append(path)
        return paths

    @classmethod
    def load_csv(cls, directory, kind: str, mu_reg: float = 0.0) -> "Dataset":
        paths = sorted(Path(directory).glob("node_*.csv"))
        if not paths:
            raise FileNotFoundError(f"no node_*.csv files in {directory}")
        blocks = [np.loadtxt(p, delimiter=",", ndmin=2) for p in paths]
        return cls(kind, [b[:, :-1] for b in blocks], [b[:, -1] for b in blocks], mu_reg)


def component_grad(dataset: Dataset, i: int, j: int, x) -> np.ndarray:
    """Gradient of sample ``j`` of node ``i`` at ``x``."""
    x = np.asarray(x, dtype=float)
    dij, yij = dataset.features[i][j], dataset.targets[i][j]
    u = dij @ x
    if dataset.kind == "linear":
        return 2.0 * (u - yij) * dij
    return dataset.mu_reg * x - yij * _sigmoid(np.array([-yij * u]))[0] * dij


def local_full_grad(dataset: Dataset, i: int, x) -> np.ndarray:
    """Mean of the component gradients of node ``i`` at ``x``."""
    x = np.asarray(x, dtype=float)
    D, y = dataset.features[i], dataset.targets[i]
    u = D @ x
    if dataset.kind == "linear":
        return 2.0 * D.T @ (u - y) / len(y)
    return dataset.mu_reg * x - D.T @ (y * _sigmoid(-y * u)) / len(y)


def _linear_hessian(dataset: Dataset) -> np.ndarray:
    return sum(2.0 * D.T @ D / D.shape[0] for D in dataset.features) / dataset.n


def _redraw_rows(rng, shape, min_abs_row_sum):
    """Standard normal rows whose sums are bounded away from zero."""
    rows = rng.standard_normal(shape)
    while True:
        bad = np.abs(rows.sum(axis=1)) < min_abs_row_sum
        if not bad.any():
            return rows
        rows[bad] = rng.standard_normal((int(bad.sum()), shape[1]))


def gen_linreg(
    n: int,
    m_i: int,
    d: int,
    noise_variance: float,
    rng: np.random.Generator,
    min_abs_row_sum: float = 1.0,
):
    """Synthetic least-squares instance with rows normalized to sum to one.

    Rows are drawn standard normal and divided by their sum. A row whose raw
    sum is below ``min_abs_row_sum`` in magnitude is redrawn: tiny sums would
    blow the normalized row up and make the components extremely stiff.

    Returns
    -------
    (Dataset, ndarray)
        The dataset and the planted parameter vector.
    """
    if m_i < 1 or d < 1 or n < 1:
        raise ValueError("n, m_i and d must be positive")
    if min_abs_row_sum <= 0:
        raise ValueError("min_abs_row_sum must be positive (zero-sum rows cannot be normalized)")
    true_x = rng.standard_normal(d)
    feats, targs = [], []
    for _ in range(n):
        raw = _redraw_rows(rng, (m_i, d), min_abs_row_sum)
        D = raw / raw.sum(axis=1, keepdims=True)
        y = D @ true_x + np.sqrt(noise_variance) * rng.standard_normal(m_i)
        feats.append(D)
        targs.append(y)
    return Dataset("linear", feats, targs), true_x


def gen_logreg(
    n: int, m_i: int, d: int, mu_reg: float, rng: np.random.Generator, flip_prob: float = 0.1
) -> Dataset:
    """Synthetic binary classification with unit-norm features and label noise."""
    if mu_reg <= 0:
        raise ValueError("mu_reg must be positive for strong convexity")
    w = rng.standard_normal(d)
    feats, targs = [], []
    for _ in range(n):
        D = rng.standard_normal((m_i, d))
        D /= np.linalg.norm(D, axis=1, keepdims=True)
        y = np.where(D @ w >= 0, 1.0, -1.0)
        flip = rng.random(m_i) < flip_prob
        y[flip] *= -1
        feats.append(D)
        targs.append(y)
    return Dataset("logistic", feats, targs, mu_reg)


@dataclass(frozen=True)
class ObjectiveConstants:
    L: float
    mu: float

    @property
    def q_tilde(self) -> float:
        return self.L / self.mu


def constants(dataset: Dataset) -> ObjectiveConstants:
    """Component smoothness ``L`` and global strong convexity ``mu``.

    For logistic loss ``mu`` is the regularization weight, a lower bound.
    """
    sq = max(float(np.max(np.sum(D * D, axis=1))) for D in dataset.features)
    if dataset.kind == "linear":
        L = 2.0 * sq
        mu = float(np.linalg.eigvalsh(_linear_hessian(dataset))[0])
        if mu <= 1e-14 * max(L, 1.0):
            raise ObjectiveError("stacked data is rank deficient; objective not strongly convex")
    else:
        L = sq / 4.0 + dataset.mu_reg
        mu = dataset.mu_reg
        if mu <= 0:
            raise ObjectiveError("logistic objective needs mu_reg > 0")
    return ObjectiveConstants(L, mu)


@dataclass(frozen=True)
class OptimumCertificate:
    x_star: np.ndarray
    gradient_norm_at_x_star: float
    relative_gradient_norm: float


def _logistic_hessian(dataset, x):
    H = dataset.mu_reg * np.eye(dataset.d)
    for D, y in zip(dataset.features, dataset.targets):
        s = _sigmoid(y * (D @ x))
        H += (D.T * (s * (1 - s))) @ D / (len(y) * dataset.n)
    return H


def centralized_optimum(dataset: Dataset, tol: float = 1e-12, max_iter: int = 200) -> OptimumCertificate:
    """Minimizer of the global objective with a gradient-norm certificate.

    Least squares solves the normal equations (plus one refinement sweep).
    Logistic loss uses damped Newton steps with backtracking, which reaches
    the certificate in a handful of iterations where 1/L gradient descent
    would need hundreds of thousands at small ``mu_reg``.
    """
    d = dataset.d
    g0 = np.linalg.norm(dataset.global_grad(np.zeros(d)))
    scale = max(g0, 1e-300)
    if dataset.kind == "linear":
        H = _linear_hessian(dataset)
        b = sum(2.0 * D.T @ y / len(y) for D, y in zip(dataset.features, dataset.targets)) / dataset.n
        x = np.linalg.solve(H, b)
        x = x - np.linalg.solve(H, H @ x - b)
    else:
        x = np.zeros(d)
        for _ in range(max_iter):
            g = dataset.global_grad(x)
            if np.linalg.norm(g) <= tol * scale:
                break
            step = np.linalg.solve(_logistic_hessian(dataset, x), g)
            f0, t = dataset.global_loss(x), 1.0
            while dataset.global_loss(x - t * step) > f0 - 0.25 * t * (g @ step) and t > 1e-12:
                t *= 0.5
            x = x - t * step
        else:
            raise ObjectiveError("optimum solver exhausted its iteration budget")
    gn = float(np.linalg.norm(dataset.global_grad(x)))
    cert = OptimumCertificate(x, gn, gn / scale)
    if cert.relative_gradient_norm > 1e-10:
        raise ObjectiveError(f"optimum certificate failed: relative gradient {cert.relative_gradient_norm:.3e}")
    return cert
