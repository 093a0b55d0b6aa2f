"""Deterministic phase-space transforms on z = (x, v).

Every transform here is a pure function: gradients are passed in as
callables so the same code serves any target and any reference measure.
All of them satisfy ``flip(phi(flip(phi(z)))) == z`` where ``flip`` reverses
the velocity about the centre ``M`` (about the origin when ``M = 0``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

# Below this value of xi^T Sigma xi the gradient is treated as zero.
ZERO_GRAD_TOL = 1e-300

GradFn = Callable[[np.ndarray], np.ndarray]


class NumericalError(ArithmeticError):
    """A gradient or potential evaluation returned a non-finite value."""


class PhasePoint(NamedTuple):
    x: np.ndarray
    v: np.ndarray

    @classmethod
    def make(cls, x, v) -> "PhasePoint":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if x.ndim != 1 or x.shape != v.shape:
            raise ValueError(f"x and v must be vectors of equal length, got {x.shape} and {v.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ValueError("phase point has non-finite coordinates")
        return cls(x, v)

    def norm(self) -> float:
        return float(np.sqrt(self.x @ self.x + self.v @ self.v))


@dataclass(frozen=True)
class Preconditioner:
    """Location ``M`` and SPD scale ``Sigma`` with cached factor and inverse."""

    M: np.ndarray
    Sigma: np.ndarray
    factor: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)

    @classmethod
    def from_moments(cls, M, Sigma) -> "Preconditioner":
        Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
        d = Sigma.shape[0]
        M = np.broadcast_to(np.asarray(M, dtype=float), (d,)).copy()
        if Sigma.shape != (d, d):
            raise ValueError(f"Sigma must be square, got {Sigma.shape}")
        scale = np.max(np.abs(Sigma))
        if not np.allclose(Sigma, Sigma.T, rtol=0.0, atol=1e-12 * scale):
            raise ValueError("Sigma is not symmetric")
        Sigma = 0.5 * (Sigma + Sigma.T)
        try:
            F = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError as exc:
            raise ValueError("Sigma is not positive definite") from exc
        eye = np.eye(d)
        inv = np.linalg.solve(Sigma, eye)
        inv = 0.5 * (inv + inv.T)
        return cls(M, Sigma, F, inv)

    @classmethod
    def identity(cls, d: int) -> "Preconditioner":
        return cls.from_moments(np.zeros(d), np.eye(d))

    @property
    def dim(self) -> int:
        return self.M.shape[0]

    def mahalanobis(self, x: np.ndarray) -> float:
        """Squared distance (x - M)^T Sigma^{-1} (x - M)."""
        u = x - self.M
        return float(u @ self.inverse @ u)

    def draw(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        """One draw from N(M, scale * Sigma)."""
        return self.M + np.sqrt(scale) * (self.factor @ rng.standard_normal(self.dim))


@dataclass(frozen=True)
class TransformParams:
    """Step angle ``h``, step count ``L`` and optional relative jitter of ``h``."""

    h: float
    L: int = 1
    jitter: float = 0.0

    def __post_init__(self):
        if not (self.h > 0):
            raise ValueError(f"h must be positive, got {self.h}")
        if int(self.L) != self.L or self.L < 1:
            raise ValueError(f"L must be a positive integer, got {self.L}")
        if not (0.0 <= self.jitter < 1.0):
            raise ValueError(f"jitter must lie in [0, 1), got {self.jitter}")

    def draw_h(self, rng: Optional[np.random.Generator]) -> float:
        """Step size for one iteration; consumes no randomness when jitter is off."""
        if self.jitter == 0.0 or rng is None:
            return self.h
        return float(rng.uniform(self.h * (1.0 - self.jitter), self.h * (1.0 + self.jitter)))


def _checked(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient")
    return g


def flip(z: PhasePoint, M=None) -> PhasePoint:
    """(x, v) -> (x, -v), or (x, 2M - v) when a centre is given."""
    if M is None:
        return PhasePoint(z.x, -z.v)
    return PhasePoint(z.x, 2.0 * M - z.v)


def circle(z: PhasePoint, h: float, M=None) -> PhasePoint:
    """Rotate (x - M, v - M) by angle ``h``."""
    c, s = np.cos(h), np.sin(h)
    if M is None:
        return PhasePoint(c * z.x + s * z.v, c * z.v - s * z.x)
    if np.shape(M) != z.x.shape:
        raise ValueError(f"centre has shape {np.shape(M)}, state has {z.x.shape}")
    dx, dv = z.x - M, z.v - M
    return PhasePoint(M + c * dx + s * dv, M + c * dv - s * dx)


def reflect(v: np.ndarray, xi: np.ndarray, M=None, Sigma=None) -> np.ndarray:
    """Velocity part of the bounce: M + (I - 2 Sigma xi xi^T / xi^T Sigma xi)(v - M).

    A vanishing gradient reverses v about M.
    """
    u = v if M is None else v - M
    Sxi = xi if Sigma is None else Sigma @ xi
    denom = float(xi @ Sxi)
    if not denom > ZERO_GRAD_TOL:
        out = -u
    else:
        out = u - (2.0 * float(xi @ u) / denom) * Sxi
    return out if M is None else out + M


def bounce(z: PhasePoint, xi: np.ndarray, M=None, Sigma=None) -> PhasePoint:
    if xi.shape != z.x.shape:
        raise ValueError(f"gradient has shape {xi.shape}, state has {z.x.shape}")
    return PhasePoint(z.x, reflect(z.v, xi, M, Sigma))


def weave_step(z: PhasePoint, h: float, grad: GradFn, pre: Optional[Preconditioner] = None) -> PhasePoint:
    """circle -> bounce -> circle, the bounce using the gradient at the midpoint."""
    M = None if pre is None else pre.M
    Sigma = None if pre is None else pre.Sigma
    z = circle(z, h, M)
    xi = _checked(grad(z.x))
    z = PhasePoint(z.x, reflect(z.v, xi, M, Sigma))
    return circle(z, h, M)


def weave(z: PhasePoint, h: float, L: int, grad: GradFn, pre: Optional[Preconditioner] = None,
          trace: Optional[list] = None) -> PhasePoint:
    """``L`` successive weave steps; intermediate states are appended to ``trace`` if given."""
    for _ in range(L):
        z = weave_step(z, h, grad, pre)
        if trace is not None:
            trace.append(z)
    return z


def leapfrog_step(z: PhasePoint, h: float, grad_u: GradFn, grad_k: GradFn) -> PhasePoint:
    v = z.v - 0.5 * h * _checked(grad_u(z.x))
    x = z.x + h * _checked(grad_k(v))
    v = v - 0.5 * h * _checked(grad_u(x))
    return PhasePoint(x, v)


def infhmc_step(z: PhasePoint, h: float, kick: GradFn, M=None) -> PhasePoint:
    """Half kick, exact rotation about M, half kick.

    ``kick(x)`` is the (preconditioned) gradient of the potential relative to
    the Gaussian reference, e.g. ``Sigma @ grad U_gauss(x)``.
    """
    v = z.v - 0.5 * h * _checked(kick(z.x))
    z = circle(PhasePoint(z.x, v), h, M)
    return PhasePoint(z.x, z.v - 0.5 * h * _checked(kick(z.x)))


def hug_step(z: PhasePoint, h: float, grad_k: GradFn, grad_xi: GradFn, Sigma=None) -> PhasePoint:
    """Half drift along grad_k(v), bounce at the midpoint, half drift along grad_k of the new v."""
    x_half = z.x + 0.5 * h * _checked(grad_k(z.v))
    v = reflect(z.v, _checked(grad_xi(x_half)), None, Sigma)
    return PhasePoint(x_half + 0.5 * h * _checked(grad_k(v)), v)
