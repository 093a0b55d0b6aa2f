"""Benchmark posteriors and the three reference measures.

Every model stores its potential ``U_leb`` relative to Lebesgue measure.
Data-independent normalising constants are dropped; everything that depends
on the argument is kept.  Potentials relative to the Gaussian or Haar-mixture
reference are obtained with :func:`potential_wrt`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .transforms import Preconditioner

LEBESGUE = "lebesgue"
GAUSSIAN = "gaussian"
HAAR = "haar"
REFERENCE_KINDS = (LEBESGUE, GAUSSIAN, HAAR)


class SingularityError(ValueError):
    """Haar-mixture potential evaluated at the centre, where it is undefined."""


def _log1pexp(eta):
    # log(1 + e^eta) with a branch at 0 so neither side overflows
    eta = np.asarray(eta, dtype=float)
    return np.where(eta > 0, eta + np.log1p(np.exp(-np.abs(eta))), np.log1p(np.exp(-np.abs(eta))))


@dataclass
class TargetModel:
    """Potential ``U_leb``, its gradient and (optionally) its Hessian action."""

    name: str
    dim: int
    potential: Callable[[np.ndarray], float]
    grad_potential: Callable[[np.ndarray], np.ndarray]
    hess_vec: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    info: dict = field(default_factory=dict)

    def log_density(self, x) -> float:
        return -self.potential(x)

    def grad_log_density(self, x) -> np.ndarray:
        return -self.grad_potential(x)


@dataclass(frozen=True)
class ReferenceMeasure:
    kind: str = LEBESGUE
    pre: Optional[Preconditioner] = None

    def __post_init__(self):
        if self.kind not in REFERENCE_KINDS:
            raise ValueError(f"unknown reference measure {self.kind!r}")
        if self.kind != LEBESGUE and self.pre is None:
            raise ValueError(f"{self.kind} reference needs a preconditioner")

    def log_density(self, x) -> float:
        """Log density w.r.t. Lebesgue, up to a constant."""
        if self.kind == LEBESGUE:
            return 0.0
        delta = self.pre.mahalanobis(x)
        if self.kind == GAUSSIAN:
            return -0.5 * delta
        if not delta > 0.0:
            raise SingularityError("Haar-mixture reference is singular at its centre")
        return -0.5 * self.pre.dim * np.log(delta)

    def grad_log_density(self, x) -> np.ndarray:
        if self.kind == LEBESGUE:
            return np.zeros_like(x)
        g = self.pre.inverse @ (x - self.pre.M)
        if self.kind == GAUSSIAN:
            return -g
        delta = float((x - self.pre.M) @ g)
        if not delta > 0.0:
            raise SingularityError("Haar-mixture reference is singular at its centre")
        return -(self.pre.dim / delta) * g


def potential_wrt(model: TargetModel, ref: ReferenceMeasure, x) -> float:
    """U relative to ``ref``: Pi(dx) = exp(-U(x)) ref(dx)."""
    return model.potential(x) + ref.log_density(x)


def grad_potential_wrt(model: TargetModel, ref: ReferenceMeasure, x) -> np.ndarray:
    return model.grad_potential(x) + ref.grad_log_density(x)


# ---------------------------------------------------------------------------
# Analytic targets


def gaussian_target(d: int, mean=None, cov=None) -> TargetModel:
    """N(mean, cov); U_leb(x) = (x - mean)^T cov^{-1} (x - mean) / 2."""
    mean = np.zeros(d) if mean is None else np.broadcast_to(np.asarray(mean, float), (d,)).copy()
    cov = np.eye(d) if cov is None else np.asarray(cov, float)
    pre = Preconditioner.from_moments(mean, cov)
    P = pre.inverse

    def potential(x):
        u = x - mean
        return 0.5 * float(u @ P @ u)

    def grad(x):
        return P @ (x - mean)

    def hess_vec(x, u):
        return P @ u

    return TargetModel("gaussian", d, potential, grad, hess_vec, {"mean": mean, "cov": pre.Sigma})


def student_t_target(d: int, nu: float, mean=None, scale=None) -> TargetModel:
    """Multivariate t; U_leb(x) = (nu + d)/2 log(1 + Delta(x)/nu)."""
    if not nu > 0:
        raise ValueError("nu must be positive")
    mean = np.zeros(d) if mean is None else np.broadcast_to(np.asarray(mean, float), (d,)).copy()
    scale = np.eye(d) if scale is None else np.asarray(scale, float)
    pre = Preconditioner.from_moments(mean, scale)
    P = pre.inverse
    c = 0.5 * (nu + d)

    def potential(x):
        u = x - mean
        return c * float(np.log1p(u @ P @ u / nu))

    def grad(x):
        Pu = P @ (x - mean)
        return (2.0 * c) * Pu / (nu + float((x - mean) @ Pu))

    def hess_vec(x, w):
        Pu = P @ (x - mean)
        s = nu + float((x - mean) @ Pu)
        return (2.0 * c) * (P @ w / s - 2.0 * Pu * float(Pu @ w) / s**2)

    return TargetModel("student_t", d, potential, grad, hess_vec,
                       {"nu": nu, "mean": mean, "scale": pre.Sigma})


def student_t_draw(rng: np.random.Generator, nu: float, mean, scale, size: Optional[int] = None) -> np.ndarray:
    """Exact draw(s) from the multivariate t via the Gaussian / chi-square mixture."""
    F = np.linalg.cholesky(np.asarray(scale, float))
    d = F.shape[0]
    n = 1 if size is None else size
    z = rng.standard_normal((n, d)) @ F.T
    w = rng.chisquare(nu, size=n) / nu
    out = np.asarray(mean, float) + z / np.sqrt(w)[:, None]
    return out[0] if size is None else out


# ---------------------------------------------------------------------------
# Logistic regression


@dataclass
class DatasetTable:
    features: np.ndarray
    labels: np.ndarray
    binary: np.ndarray
    names: list = field(default_factory=list)

    @property
    def rows(self) -> int:
        return self.features.shape[0]


def scale_columns(X: np.ndarray, binary: np.ndarray) -> np.ndarray:
    """Non-binary columns to mean 0 and standard deviation 0.5 (population sd)."""
    X = np.array(X, dtype=float)
    for j in np.flatnonzero(~binary):
        col = X[:, j]
        sd = col.std()
        if not sd > 0:
            raise ValueError(f"column {j} is constant and cannot be scaled")
        X[:, j] = 0.5 * (col - col.mean()) / sd
    return X


def load_dataset(path, label_column, drop_columns: Sequence = ()) -> DatasetTable:
    """Read a headed CSV, map labels to {0, 1} and scale non-binary features.

    ``label_column`` and ``drop_columns`` may be header names or 0-based indices.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]

    def index_of(col):
        if isinstance(col, int) or (isinstance(col, str) and col.isdigit() and col not in header):
            return int(col)
        return header.index(col)

    label_idx = index_of(label_column)
    dropped = {index_of(c) for c in drop_columns} | {label_idx}
    keep = [j for j in range(len(header)) if j not in dropped]

    raw_labels = []
    X = np.empty((len(rows), len(keep)))
    for i, row in enumerate(rows):
        if len(row) != len(header) or any(cell.strip() == "" for cell in row):
            raise ValueError(f"missing value in data row {i}")
        raw_labels.append(row[label_idx].strip())
        try:
            X[i] = [float(row[j]) for j in keep]
        except ValueError as exc:
            raise ValueError(f"non-numeric feature in data row {i}: {exc}") from None

    levels = sorted(set(raw_labels))
    if len(levels) != 2:
        raise ValueError(f"label column must have exactly two values, found {levels}")
    if set(levels) == {"0", "1"}:
        labels = np.array([float(s) for s in raw_labels])
    else:
        labels = np.array([float(s == levels[1]) for s in raw_labels])

    binary = np.array([len(np.unique(X[:, j])) == 2 for j in range(X.shape[1])], dtype=bool)
    return DatasetTable(scale_columns(X, binary), labels, binary, [header[j] for j in keep])


def synthetic_logistic_data(n: int, p: int, seed: int, n_binary: int = 0) -> DatasetTable:
    """Random design with a sparse true coefficient vector, already scaled."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    X[:, 1:] += 0.5 * X[:, :-1]
    binary = np.zeros(p, dtype=bool)
    if n_binary:
        X[:, :n_binary] = (rng.random((n, n_binary)) < 0.4).astype(float)
        binary[:n_binary] = True
    X = scale_columns(X, binary)
    beta = np.zeros(p + 1)
    beta[: min(6, p + 1)] = rng.normal(0.0, 1.5, size=min(6, p + 1))
    eta = beta[0] + X @ beta[1:]
    y = (rng.random(n) < expit(eta)).astype(float)
    return DatasetTable(X, y, binary, [f"x{j}" for j in range(p)])


def logistic_target(data: DatasetTable) -> TargetModel:
    """Logistic regression with an intercept and a Cauchy prior on all d = p + 1 coefficients."""
    X = np.hstack([np.ones((data.rows, 1)), data.features])
    y = np.asarray(data.labels, float)
    d = X.shape[1]
    c = 0.5 * (d + 1)

    def potential(beta):
        if not np.all(np.isfinite(beta)):
            raise ValueError("non-finite coefficients")
        eta = X @ beta
        return float(np.sum(_log1pexp(eta) - y * eta)) + c * float(np.log1p(beta @ beta))

    def grad(beta):
        eta = X @ beta
        return X.T @ (expit(eta) - y) + (2.0 * c) * beta / (1.0 + beta @ beta)

    def hess_vec(beta, u):
        s = expit(X @ beta)
        q = 1.0 + beta @ beta
        return X.T @ (s * (1.0 - s) * (X @ u)) + (2.0 * c) * (u / q - 2.0 * beta * (beta @ u) / q**2)

    return TargetModel("logistic", d, potential, grad, hess_vec, {"rows": data.rows})


# ---------------------------------------------------------------------------
# Stochastic volatility

SV_PHI_PRIOR = (2.0, 5.0)  # Beta shape parameters
SV_SIGMA_PRIOR = (5.0, 0.2)  # Gamma shape and rate


def sv_simulate(T: int, phi: float, sigma: float, seed: int, return_latent: bool = False):
    """Observations y_1..y_T of the volatility recursion (x_0 scaled by phi / (1 - phi^2))."""
    if not -1.0 < phi < 1.0 or not sigma > 0:
        raise ValueError("need |phi| < 1 and sigma > 0")
    rng = np.random.default_rng(seed)
    x = np.empty(T + 1)
    x[0] = phi / (1.0 - phi**2) * sigma * rng.standard_normal()
    eps = sigma * rng.standard_normal(T)
    for t in range(1, T + 1):
        x[t] = phi * x[t - 1] + eps[t - 1]
    y = np.exp(0.5 * x[1:]) * rng.standard_normal(T)
    return (y, x) if return_latent else y


def sv_prior_potential(a: float, b: float):
    """Prior potential of (logit phi, log sigma) including both Jacobians, with gradient."""
    al, be = SV_PHI_PRIOR
    k, rate = SV_SIGMA_PRIOR
    log_phi = -np.logaddexp(0.0, -a)
    log_1mphi = -np.logaddexp(0.0, a)
    phi = np.exp(log_phi)
    sigma = np.exp(b)
    value = -al * log_phi - be * log_1mphi - k * b + rate * sigma
    grad = np.array([-al * (1.0 - phi) + be * phi, -k + rate * sigma])
    return float(value), grad


def sv_target(y, T: Optional[int] = None) -> TargetModel:
    """Joint posterior of theta = (x_0..x_T, logit phi, log sigma)."""
    y = np.asarray(y, float)
    T = y.shape[0] if T is None else T
    if T < 1 or y.shape[0] != T:
        raise ValueError("need T >= 1 observations")
    y2 = y**2

    def unpack(theta):
        x = theta[: T + 1]
        a, b = theta[T + 1], theta[T + 2]
        return x, a, b

    def potential(theta):
        x, a, b = unpack(theta)
        phi = expit(a)
        sigma = np.exp(b)
        log_s0 = b + np.log(phi) - np.log1p(-phi**2)
        e = x[1:] - phi * x[:-1]
        val = 0.5 * x[0] ** 2 * np.exp(-2.0 * log_s0) + log_s0
        val += 0.5 * float(e @ e) / sigma**2 + T * b
        val += 0.5 * float(np.sum(y2 * np.exp(-x[1:]) + x[1:]))
        return float(val + sv_prior_potential(a, b)[0])

    def grad(theta):
        x, a, b = unpack(theta)
        phi = expit(a)
        sigma2 = np.exp(2.0 * b)
        log_s0 = b + np.log(phi) - np.log1p(-phi**2)
        inv_s02 = np.exp(-2.0 * log_s0)
        e = x[1:] - phi * x[:-1]
        g = np.zeros(T + 3)
        g[0] = x[0] * inv_s02
        g[1:T + 1] += e / sigma2 + 0.5 - 0.5 * y2 * np.exp(-x[1:])
        g[:T] -= phi * e / sigma2
        dA_dlogs0 = 1.0 - x[0] ** 2 * inv_s02
        dphi = dA_dlogs0 * (1.0 / phi + 2.0 * phi / (1.0 - phi**2)) - float(e @ x[:-1]) / sigma2
        g[T + 1] = dphi * phi * (1.0 - phi)
        g[T + 2] = dA_dlogs0 - float(e @ e) / sigma2 + T
        g[T + 1:] += sv_prior_potential(a, b)[1]
        return g

    return TargetModel("sv", T + 3, potential, grad, None, {"T": T})


# ---------------------------------------------------------------------------
# Discretely observed diffusion

SDE_V_STRENGTH = 27.5
SDE_PRIOR_NU = 3.0
SDE_PRIOR_SCALE = 10.0


def sde_drift(x, alpha, Sinv, strength: float = SDE_V_STRENGTH):
    """a(x, alpha) = -grad V(x - alpha) / 2 for V(u) = strength * log(1 + u^T Sinv u); rows of x allowed."""
    u = np.atleast_2d(x) - alpha
    Su = u @ Sinv
    q = np.einsum("ij,ij->i", u, Su)
    a = -strength * Su / (1.0 + q)[:, None]
    return a if np.ndim(x) == 2 else a[0]


def sde_simulate(d: int, N: int, T_horizon: float, alpha_true, SigmaV, seed: int,
                 x0=None, strength: float = SDE_V_STRENGTH) -> np.ndarray:
    """Euler-Maruyama path with unit diffusion; returns an (N + 1) x d array."""
    rng = np.random.default_rng(seed)
    h = T_horizon / N
    Sinv = np.linalg.inv(np.asarray(SigmaV, float))
    alpha_true = np.asarray(alpha_true, float)
    X = np.empty((N + 1, d))
    X[0] = np.zeros(d) if x0 is None else x0
    noise = np.sqrt(h) * rng.standard_normal((N, d))
    for i in range(N):
        X[i + 1] = X[i] + sde_drift(X[i], alpha_true, Sinv, strength) * h + noise[i]
    return X


def sde_target(observations, h: float, SigmaV, strength: float = SDE_V_STRENGTH) -> TargetModel:
    """Posterior of the drift location alpha under the Euler likelihood and a t_3(0, 10 I) prior."""
    X = np.asarray(observations, float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("observations must be an (N + 1) x d array with N >= 1")
    d = X.shape[1]
    SigmaV = np.atleast_2d(np.asarray(SigmaV, float))
    if SigmaV.shape != (d, d):
        raise ValueError(f"SigmaV must be {d} x {d}")
    if not h > 0:
        raise ValueError("h must be positive")
    Sinv = Preconditioner.from_moments(np.zeros(d), SigmaV).inverse
    Xs, dX = X[:-1], np.diff(X, axis=0)
    nu, s2 = SDE_PRIOR_NU, SDE_PRIOR_SCALE
    c = 0.5 * (nu + d)

    def potential(alpha):
        r = dX - sde_drift(Xs, alpha, Sinv, strength) * h
        return float(np.sum(r * r)) / (2.0 * h) + c * float(np.log1p(alpha @ alpha / (s2 * nu)))

    def grad(alpha):
        u = Xs - alpha
        Su = u @ Sinv
        q1 = 1.0 + np.einsum("ij,ij->i", u, Su)
        r = dX + strength * h * Su / q1[:, None]
        # d a_i / d alpha = strength / q1 * (Sinv - 2 Su Su^T / q1), symmetric
        Sr = r @ Sinv
        Jr = strength / q1[:, None] * (Sr - 2.0 * Su * (np.einsum("ij,ij->i", Su, r) / q1)[:, None])
        return -Jr.sum(axis=0) + (2.0 * c) * alpha / (s2 * nu + alpha @ alpha)

    return TargetModel("sde", d, potential, grad, None, {"N": X.shape[0] - 1, "h": h})


def wishart_scale(d: int, df: int, seed: int) -> np.ndarray:
    """G^T G for a df x d standard normal G (Wishart with identity scale)."""
    if df < d:
        raise ValueError(f"df = {df} must be at least d = {d}")
    G = np.random.default_rng(seed).standard_normal((df, d))
    S = G.T @ G
    return 0.5 * (S + S.T)

