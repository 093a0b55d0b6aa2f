"""Small-step behaviour of the unpreconditioned weave map.

Everything here uses ``xi = grad U`` of ``model.potential`` with the weave
centred at the origin and an identity bounce metric.  For a step size ``h``
the map moves ``x`` along level sets of ``U`` up to ``O(h^2)`` per step, and
the projected path ``p(z) = (x, P(x) v)`` converges at rate ``O(h)`` to the
solution of an ODE that keeps ``U`` and the tangency ``xi_bar^T w = 0``
constant.  The functions below evaluate that ODE, integrate it with RK4 and
compare it with the discrete iterates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .targets import TargetModel
from .transforms import PhasePoint, weave_step

# Gradients smaller than this are treated as lying in the critical set.
GRAD_GUARD = 1e-8


class ZeroGradientError(ArithmeticError):
    """The gradient vanished (or nearly so) where a direction was needed."""

    def __init__(self, x, norm):
        super().__init__(f"|grad U| = {norm:.3e} at x = {np.array2string(np.asarray(x), precision=6)}")
        self.x = np.array(x, dtype=float)
        self.norm = float(norm)


def _grad(model: TargetModel, x: np.ndarray) -> tuple[np.ndarray, float]:
    g = np.asarray(model.grad_potential(x), dtype=float)
    n = float(np.linalg.norm(g))
    if not n >= GRAD_GUARD:
        raise ZeroGradientError(x, n)
    return g, n


def hessian_method(model: TargetModel) -> str:
    return "analytic" if model.hess_vec is not None else "finite-difference"


def hess_vec(model: TargetModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Hessian of U at x applied to u.

    Falls back to central differences of the gradient, step 1e-5 * (1 + |x|)
    along the unit vector u / |u|.
    """
    if model.hess_vec is not None:
        return np.asarray(model.hess_vec(x, u), dtype=float)
    nu = float(np.linalg.norm(u))
    if nu == 0.0:
        return np.zeros_like(x, dtype=float)
    eps = 1e-5 * (1.0 + float(np.linalg.norm(x)))
    e = u / nu
    gp = np.asarray(model.grad_potential(x + eps * e), dtype=float)
    gm = np.asarray(model.grad_potential(x - eps * e), dtype=float)
    return nu * (gp - gm) / (2.0 * eps)


def hessian(model: TargetModel, x: np.ndarray) -> np.ndarray:
    d = x.shape[0]
    H = np.column_stack([hess_vec(model, x, e) for e in np.eye(d)])
    return 0.5 * (H + H.T)


def xi_bar(model: TargetModel, x: np.ndarray) -> np.ndarray:
    g, n = _grad(model, x)
    return g / n


def project_P(model: TargetModel, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Component of v orthogonal to grad U(x)."""
    e = xi_bar(model, x)
    return v - (e @ v) * e


def project_Q(model: TargetModel, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Component of v along grad U(x)."""
    e = xi_bar(model, x)
    return (e @ v) * e


def dxi_bar(model: TargetModel, x: np.ndarray, u: np.ndarray, v: np.ndarray) -> float:
    """sum_ij d_j xi_bar_i(x) u_i v_j = (P u)^T H v / |xi|."""
    g, n = _grad(model, x)
    e = g / n
    Pu = u - (e @ u) * e
    return float(Pu @ hess_vec(model, x, v)) / n


def _dxi_frame(model, x):
    """(xi_bar, |xi|, J applied to a vector) at x, with J = P H / |xi|."""
    g, n = _grad(model, x)
    e = g / n

    def J(v):
        Hv = hess_vec(model, x, v)
        return (Hv - (e @ Hv) * e) / n

    return e, n, J


@dataclass
class LevelSetState:
    x: np.ndarray
    w: np.ndarray  # tangential velocity, xi_bar(x)^T w = 0
    r: float  # radius |z| of the generating phase point

    @classmethod
    def from_phase(cls, model: TargetModel, z: PhasePoint) -> "LevelSetState":
        x = np.asarray(z.x, dtype=float)
        return cls(x, project_P(model, x, np.asarray(z.v, dtype=float)), z.norm())


def limit_rhs(model: TargetModel, zeta: LevelSetState) -> tuple[np.ndarray, np.ndarray]:
    """Right-hand side (x', w') of the limit equation.

    x' = 2 w,  w' = -2 P x + b(x, w) with
    b = -2 (r^2 - |w|^2 - |x|^2) J xi_bar - 2 (w^T J w) xi_bar.
    """
    x, w = zeta.x, zeta.w
    e, _, J = _dxi_frame(model, x)
    Px = x - (e @ x) * e
    slack = zeta.r ** 2 - w @ w - x @ x
    Jw = J(w)
    b = -2.0 * slack * J(e) - 2.0 * float(w @ Jw) * e
    return 2.0 * w, -2.0 * Px + b


@dataclass
class OdeRunReport:
    times: np.ndarray
    xs: np.ndarray
    ws: np.ndarray
    u_drift: float  # max_t |U(x(t)) - U(x(0))|
    tangency: float  # max_t |xi_bar(x(t))^T w(t)|
    dt: float
    hessian: str
    r: float
    sup_error: float = float("nan")


def integrate_limit(model: TargetModel, zeta0: LevelSetState, T: float, dt: float) -> OdeRunReport:
    """Classical RK4 with fixed step ``dt`` up to time ``T``."""
    if not dt > 0 or not T >= 0:
        raise ValueError(f"need dt > 0 and T >= 0, got dt={dt}, T={T}")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    r = zeta0.r
    xs = np.empty((n + 1, zeta0.x.shape[0]))
    ws = np.empty_like(xs)
    x, w = np.array(zeta0.x, dtype=float), np.array(zeta0.w, dtype=float)
    xs[0], ws[0] = x, w
    u0 = float(model.potential(x))
    drift = 0.0
    tang = abs(float(xi_bar(model, x) @ w))

    def f(xx, ww):
        return limit_rhs(model, LevelSetState(xx, ww, r))

    for k in range(1, n + 1):
        k1x, k1w = f(x, w)
        k2x, k2w = f(x + 0.5 * dt * k1x, w + 0.5 * dt * k1w)
        k3x, k3w = f(x + 0.5 * dt * k2x, w + 0.5 * dt * k2w)
        k4x, k4w = f(x + dt * k3x, w + dt * k3w)
        x = x + (dt / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        w = w + (dt / 6.0) * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
        xs[k], ws[k] = x, w
        drift = max(drift, abs(float(model.potential(x)) - u0))
        tang = max(tang, abs(float(xi_bar(model, x) @ w)))
    return OdeRunReport(dt * np.arange(n + 1), xs, ws, drift, tang, dt, hessian_method(model), r)


@dataclass
class DiscretePath:
    h: float
    zs: list  # weave iterates z_0, ..., z_n
    xs: np.ndarray
    ws: np.ndarray  # P(x_k) v_k

    def at(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Piecewise-constant path value, iterate floor(t / h) at time t."""
        idx = np.floor(np.asarray(t) / self.h + 1e-9).astype(int)
        return self.xs[idx], self.ws[idx]


def discrete_trajectory(model: TargetModel, z0: PhasePoint, h: float, T: float) -> DiscretePath:
    """Weave iterates up to time T with their projections (x, P(x) v)."""
    n = int(np.floor(T / h + 1e-9))
    zs = [z0]
    for _ in range(n):
        zs.append(weave_step(zs[-1], h, model.grad_potential))
    xs = np.array([z.x for z in zs])
    ws = np.array([project_P(model, z.x, z.v) for z in zs])
    return DiscretePath(h, zs, xs, ws)


def compare_limit(model: TargetModel, z0: PhasePoint, h: float, T: float, dt: float,
                  report: Optional[OdeRunReport] = None) -> float:
    """sup over the RK4 grid of |p(z^h(t)) - zeta(t)|.

    Pass a previously computed ``report`` (same z0, T, dt) to reuse the ODE
    solution across several h.
    """
    if report is None:
        report = integrate_limit(model, LevelSetState.from_phase(model, z0), T, dt)
    path = discrete_trajectory(model, z0, h, report.times[-1])
    px, pw = path.at(report.times)
    err = np.sqrt(np.sum((px - report.xs) ** 2, axis=1) + np.sum((pw - report.ws) ** 2, axis=1))
    return float(np.max(err))


def _dP_vv(e, J, v):
    """Vector u -> dP(x)[u, v, v] = -(e^T v) J v - (v^T J v) e."""
    Jv = J(v)
    return -(e @ v) * Jv - float(v @ Jv) * e


def expansion_terms(model: TargetModel, z: PhasePoint) -> tuple[np.ndarray, np.ndarray]:
    """(a_tilde, b_tilde) at z; a_tilde has length 2d, b_tilde length d."""
    x, v = z.x, z.v
    e, _, J = _dxi_frame(model, x)
    Pv = v - (e @ v) * e
    Px = x - (e @ x) * e
    Rv = v - 2.0 * (e @ v) * e
    a = 2.0 * np.concatenate([Pv, -Px])
    b = _dP_vv(e, J, v) + _dP_vv(e, J, Rv)
    return a, b


def expansion_residual(model: TargetModel, z: PhasePoint, h: float) -> float:
    """|p(phi_h(z)) - p(z) - h (a_tilde + (0, b_tilde))(z)|."""
    if h == 0:
        return 0.0
    a, b = expansion_terms(model, z)
    d = z.x.shape[0]
    z1 = weave_step(z, h, model.grad_potential)
    p0 = np.concatenate([z.x, project_P(model, z.x, z.v)])
    p1 = np.concatenate([z1.x, project_P(model, z1.x, z1.v)])
    c = a.copy()
    c[d:] += b
    return float(np.linalg.norm(p1 - p0 - h * c))


def energy_drift(model: TargetModel, z: PhasePoint, h: float) -> float:
    """|U(x_1) - U(x)| after one weave step."""
    z1 = weave_step(z, h, model.grad_potential)
    return abs(float(model.potential(z1.x)) - float(model.potential(z.x)))


@dataclass
class DriftConstant:
    """Sampled estimate of r * sup_{B_r}|xi| + r^2 * sup_{B_r}|d xi|.

    ``radii`` are the sorted sample radii; ``grad_sup`` and ``hess_sup`` are
    running maxima over samples with radius at most the matching entry.
    """

    radii: np.ndarray
    grad_sup: np.ndarray
    hess_sup: np.ndarray

    def __call__(self, r: float) -> float:
        i = int(np.searchsorted(self.radii, r, side="right")) - 1
        if i < 0:
            return 0.0
        if r > self.radii[-1] * (1 + 1e-12):
            raise ValueError(f"r={r} exceeds the sampled radius {self.radii[-1]}")
        return float(r * self.grad_sup[i] + r * r * self.hess_sup[i])


def drift_constant(model: TargetModel, r_max: float, n: int, rng: np.random.Generator) -> DriftConstant:
    """Estimate the drift-bound constant by sampling B_{r_max}.

    Radii are drawn uniformly on [0, r_max] (not by volume) so that small
    balls are represented; the endpoint r_max and the origin are included.
    """
    d = model.dim
    radii = np.sort(np.concatenate([[0.0, r_max], rng.uniform(0.0, r_max, size=n)]))
    dirs = rng.standard_normal((radii.size, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    gs = np.empty(radii.size)
    hs = np.empty(radii.size)
    for i, (rad, u) in enumerate(zip(radii, dirs)):
        x = rad * u
        gs[i] = np.linalg.norm(model.grad_potential(x))
        hs[i] = np.linalg.norm(hessian(model, x), 2)
    return DriftConstant(radii, np.maximum.accumulate(gs), np.maximum.accumulate(hs))
