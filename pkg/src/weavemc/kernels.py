"""Markov kernels as single-step updaters around one Metropolis acceptance rule.

Each ``*_step`` function takes the current :class:`KernelState` and returns a
:class:`StepOutcome`.  The state caches the potential relative to the kernel's
own reference measure, so the acceptance ratio never re-evaluates the current
point.  :class:`Kernel` bundles a step function with its model, preconditioner
and tuning parameters for the tuner and the experiment harness.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np
from scipy.special import gammaln

from .targets import (
    GAUSSIAN,
    HAAR,
    LEBESGUE,
    ReferenceMeasure,
    SingularityError,
    TargetModel,
)
from .transforms import (
    NumericalError,
    PhasePoint,
    Preconditioner,
    hug_step,
    infhmc_step,
    leapfrog_step,
    weave,
)

if TYPE_CHECKING:
    from .diagnostics import ChainRecord

_FAILURES = (NumericalError, SingularityError, FloatingPointError, ValueError, OverflowError)


@dataclass
class KernelState:
    x: np.ndarray
    potential: float  # relative to the kernel's reference measure
    log_like: float  # -U_leb(x)
    grad: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class StepOutcome:
    state: KernelState
    proposal: np.ndarray
    alpha: float
    accepted: bool
    failed: bool = False

    @property
    def log_like(self) -> float:
        return self.state.log_like


def make_state(model: TargetModel, ref: ReferenceMeasure, x) -> KernelState:
    x = np.array(x, dtype=float)
    u_leb = model.potential(x)
    u = u_leb + ref.log_density(x)
    if not np.isfinite(u):
        raise NumericalError("initial state has non-finite potential")
    return KernelState(x, float(u), -float(u_leb))


def accept(alpha_log: float, rng: np.random.Generator, counter: Optional[Counter] = None) -> bool:
    """Accept with probability min(1, exp(alpha_log)); exactly one uniform is drawn."""
    u = rng.random()
    if math.isnan(alpha_log):
        if counter is not None:
            counter["nan"] += 1
        return False
    if alpha_log >= 0.0:
        return True
    return u < math.exp(alpha_log)


def _finish(state, y, u_y, u_leb_y, log_alpha, rng, counter, grad_y=None) -> StepOutcome:
    ok = accept(log_alpha, rng, counter)
    alpha = 0.0 if math.isnan(log_alpha) else math.exp(min(0.0, log_alpha))
    if ok:
        return StepOutcome(KernelState(y, u_y, -u_leb_y, grad_y), y, alpha, True)
    return StepOutcome(state, y, alpha, False)


def _failure(state, rng, counter, proposal=None) -> StepOutcome:
    rng.random()  # keep one uniform per iteration
    if counter is not None:
        counter["failed"] += 1
    return StepOutcome(state, state.x if proposal is None else proposal, 0.0, False, True)


def _evaluate(model, ref, y):
    u_leb = float(model.potential(y))
    u = u_leb + ref.log_density(y)
    if not (np.isfinite(u) and np.isfinite(u_leb)):
        raise NumericalError("non-finite potential at proposal")
    return u, u_leb


class _GradCache:
    """Gradient of one potential, reusing the value at the last point seen."""

    def __init__(self, model, ref, state):
        self.model, self.ref, self.state = model, ref, state
        self.x, self.g = state.x, state.grad

    def __call__(self, x):
        if x is self.x and self.g is not None:
            return self.g
        g = self.model.grad_potential(x) + self.ref.grad_log_density(x)
        if x is self.state.x:
            self.state.grad = g
        self.x, self.g = x, g
        return g

    def at(self, x):
        return self.g if x is self.x else None


def _draw_h(h, jitter, rng):
    if jitter == 0.0:
        return h
    return float(rng.uniform(h * (1.0 - jitter), h * (1.0 + jitter)))


def _haar_scale(pre, x, rng):
    """Draw g ~ Gamma(d/2, rate Delta(x)/2)."""
    delta = pre.mahalanobis(x)
    if not delta > 0.0:
        raise SingularityError("state coincides with the Haar-mixture centre")
    return rng.gamma(0.5 * pre.dim, 2.0 / delta)


# ---------------------------------------------------------------------------
# Gradient-free kernels


def rwm_step(state, model, pre, s, rng, counter=None) -> StepOutcome:
    ref = ReferenceMeasure(LEBESGUE)
    y = state.x + math.sqrt(s) * (pre.factor @ rng.standard_normal(pre.dim))
    try:
        u_y, u_leb = _evaluate(model, ref, y)
    except _FAILURES:
        return _failure(state, rng, counter, y)
    return _finish(state, y, u_y, u_leb, state.potential - u_y, rng, counter)


def pcn_step(state, model, pre, h, rng, counter=None) -> StepOutcome:
    ref = ReferenceMeasure(GAUSSIAN, pre)
    w = pre.factor @ rng.standard_normal(pre.dim)
    y = pre.M + math.cos(h) * (state.x - pre.M) + math.sin(h) * w
    try:
        u_y, u_leb = _evaluate(model, ref, y)
    except _FAILURES:
        return _failure(state, rng, counter, y)
    return _finish(state, y, u_y, u_leb, state.potential - u_y, rng, counter)


def mpcn_step(state, model, pre, h, rng, counter=None) -> StepOutcome:
    ref = ReferenceMeasure(HAAR, pre)
    try:
        g = _haar_scale(pre, state.x, rng)
    except SingularityError:
        return _failure(state, rng, counter)
    w = pre.factor @ rng.standard_normal(pre.dim)
    y = pre.M + math.cos(h) * (state.x - pre.M) + (math.sin(h) / math.sqrt(g)) * w
    try:
        u_y, u_leb = _evaluate(model, ref, y)
    except _FAILURES:
        return _failure(state, rng, counter, y)
    return _finish(state, y, u_y, u_leb, state.potential - u_y, rng, counter)


def mpcn_proposal_logpdf(x, y, h, pre: Preconditioner) -> float:
    """Closed-form log density of the Haar-mixed autoregressive proposal, g integrated out."""
    d = pre.dim
    b = 0.5 * pre.mahalanobis(x)
    s2 = math.sin(h) ** 2
    r = y - pre.M - math.cos(h) * (x - pre.M)
    r2 = float(r @ pre.inverse @ r)
    logdet = 2.0 * float(np.sum(np.log(np.diag(pre.factor))))
    return float(gammaln(d) - gammaln(0.5 * d) - 0.5 * d * math.log(2.0 * math.pi * s2) - 0.5 * logdet
                 + 0.5 * d * math.log(b) - d * math.log(b + 0.5 * r2 / s2))


# ---------------------------------------------------------------------------
# Weave kernels


def wm_step(state, model, pre, h, L, rng, jitter=0.0, counter=None) -> StepOutcome:
    """Weave-Metropolis: v ~ N(M, Sigma), L weave steps, accept on U relative to N(M, Sigma)."""
    ref = ReferenceMeasure(GAUSSIAN, pre)
    v = pre.draw(rng)
    hh = _draw_h(h, jitter, rng)
    grad = _GradCache(model, ref, state)
    try:
        z = weave(PhasePoint(state.x, v), hh, L, grad, pre)
        u_y, u_leb = _evaluate(model, ref, z.x)
    except _FAILURES:
        return _failure(state, rng, counter)
    return _finish(state, z.x, u_y, u_leb, state.potential - u_y, rng, counter)


def hwm_step(state, model, pre, h, L, rng, jitter=0.0, counter=None) -> StepOutcome:
    """Haar-Weave-Metropolis: g ~ Gamma(d/2, Delta/2), v ~ N(M, Sigma/g), weave, accept on U_star.

    The weave map itself does not depend on g: rotations about M and the
    Sigma-reflection are both invariant under rescaling (x - M, v - M) by sqrt(g).
    """
    ref = ReferenceMeasure(HAAR, pre)
    try:
        g = _haar_scale(pre, state.x, rng)
    except SingularityError:
        return _failure(state, rng, counter)
    v = pre.M + (pre.factor @ rng.standard_normal(pre.dim)) / math.sqrt(g)
    hh = _draw_h(h, jitter, rng)
    if L == 0:
        return _finish(state, state.x, state.potential, -state.log_like, 0.0, rng, counter)
    grad = _GradCache(model, ref, state)
    try:
        z = weave(PhasePoint(state.x, v), hh, L, grad, pre)
        u_y, u_leb = _evaluate(model, ref, z.x)
    except _FAILURES:
        return _failure(state, rng, counter)
    return _finish(state, z.x, u_y, u_leb, state.potential - u_y, rng, counter)


# ---------------------------------------------------------------------------
# Hamiltonian-type kernels (acceptance on the joint energy)


def infhmc_kernel_step(state, model, pre, h, L, rng, jitter=0.0, counter=None) -> StepOutcome:
    """Kicks by Sigma grad U_gauss around exact rotations about M.

    The map preserves Lebesgue measure, so the energy is
    U_leb(x) + (v - M)^T Sigma^{-1} (v - M) / 2.
    """
    ref = ReferenceMeasure(GAUSSIAN, pre)
    v = pre.draw(rng)
    hh = _draw_h(h, jitter, rng)
    grad = _GradCache(model, ref, state)
    kick = lambda x: pre.Sigma @ grad(x)
    h0 = -state.log_like + 0.5 * pre.mahalanobis(v)
    try:
        z = PhasePoint(state.x, v)
        for _ in range(L):
            z = infhmc_step(z, hh, kick, pre.M)
        u_y, u_leb = _evaluate(model, ref, z.x)
        h1 = u_leb + 0.5 * pre.mahalanobis(z.v)
    except _FAILURES:
        return _failure(state, rng, counter)
    return _finish(state, z.x, u_y, u_leb, h0 - h1, rng, counter, grad.at(z.x))


def _kinetic(pre, v):
    return 0.5 * float(v @ pre.inverse @ v)


def hug_kernel_step(state, model, pre, h, L, rng, jitter=0.0, counter=None) -> StepOutcome:
    """Hug with v ~ N(0, Sigma): the drift velocity Sigma grad K(v) = v and the
    Sigma-reflection flips its component along grad U_leb."""
    ref = ReferenceMeasure(LEBESGUE)
    v = pre.factor @ rng.standard_normal(pre.dim)
    hh = _draw_h(h, jitter, rng)
    grad = _GradCache(model, ref, state)
    h0 = state.potential + _kinetic(pre, v)
    try:
        z = PhasePoint(state.x, v)
        for _ in range(L):
            z = hug_step(z, hh, _identity, grad, pre.Sigma)
        u_y, u_leb = _evaluate(model, ref, z.x)
        h1 = u_y + _kinetic(pre, z.v)
    except _FAILURES:
        return _failure(state, rng, counter)
    return _finish(state, z.x, u_y, u_leb, h0 - h1, rng, counter)


def leapfrog_hmc_step(state, model, pre, h, L, rng, jitter=0.0, counter=None) -> StepOutcome:
    """Leap-frog HMC with v ~ N(0, Sigma), kicks Sigma grad U_leb and drift v."""
    ref = ReferenceMeasure(LEBESGUE)
    v = pre.factor @ rng.standard_normal(pre.dim)
    hh = _draw_h(h, jitter, rng)
    grad = _GradCache(model, ref, state)
    kick = lambda x: pre.Sigma @ grad(x)
    h0 = state.potential + _kinetic(pre, v)
    try:
        z = PhasePoint(state.x, v)
        for _ in range(L):
            z = leapfrog_step(z, hh, kick, _identity)
        u_y, u_leb = _evaluate(model, ref, z.x)
        h1 = u_y + _kinetic(pre, z.v)
    except _FAILURES:
        return _failure(state, rng, counter)
    return _finish(state, z.x, u_y, u_leb, h0 - h1, rng, counter, grad.at(z.x))


def _identity(v):
    return v


# ---------------------------------------------------------------------------
# Registry


@dataclass(frozen=True)
class KernelSpec:
    name: str
    reference: str
    param: str  # "s" for the random walk, "h" otherwise
    target_ar: float
    bounds: tuple
    trajectory: bool  # takes L and jitter


KERNELS = {
    "rwm": KernelSpec("rwm", LEBESGUE, "s", 0.25, (1e-5, 1e2), False),
    "pcn": KernelSpec("pcn", GAUSSIAN, "h", 0.40, (1e-4, math.pi / 2), False),
    "mpcn": KernelSpec("mpcn", HAAR, "h", 0.40, (1e-4, math.pi / 2), False),
    "infhmc": KernelSpec("infhmc", GAUSSIAN, "h", 0.65, (1e-4, math.pi / 2), True),
    "hug": KernelSpec("hug", LEBESGUE, "h", 0.80, (1e-4, 1e2), True),
    "hmc": KernelSpec("hmc", LEBESGUE, "h", 0.65, (1e-4, 1e2), True),
    "wm": KernelSpec("wm", GAUSSIAN, "h", 0.60, (1e-4, math.pi / 2), True),
    "hwm": KernelSpec("hwm", HAAR, "h", 0.60, (1e-4, math.pi / 2), True),
}

_STEPS: dict[str, Callable] = {
    "rwm": rwm_step,
    "pcn": pcn_step,
    "mpcn": mpcn_step,
    "infhmc": infhmc_kernel_step,
    "hug": hug_kernel_step,
    "hmc": leapfrog_hmc_step,
    "wm": wm_step,
    "hwm": hwm_step,
}


@dataclass
class Kernel:
    """A configured kernel: ``step(state, rng)`` advances one iteration."""

    name: str
    model: TargetModel
    pre: Preconditioner
    param: float
    L: int = 1
    jitter: float = 0.0
    counter: Counter = field(default_factory=Counter, repr=False)

    def __post_init__(self):
        if self.name not in KERNELS:
            raise ValueError(f"unknown kernel {self.name!r}; choose from {sorted(KERNELS)}")
        if not self.param > 0:
            raise ValueError(f"{self.spec.param} must be positive, got {self.param}")
        if self.L < 0 or int(self.L) != self.L:
            raise ValueError(f"L must be a non-negative integer, got {self.L}")
        if not 0.0 <= self.jitter < 1.0:
            raise ValueError(f"jitter must lie in [0, 1), got {self.jitter}")
        if self.pre.dim != self.model.dim:
            raise ValueError(f"preconditioner dimension {self.pre.dim} != model dimension {self.model.dim}")

    @property
    def spec(self) -> KernelSpec:
        return KERNELS[self.name]

    @property
    def reference(self) -> ReferenceMeasure:
        kind = self.spec.reference
        return ReferenceMeasure(kind, None if kind == LEBESGUE else self.pre)

    def with_param(self, value: float) -> "Kernel":
        return replace(self, param=float(value), counter=Counter())

    def init(self, x) -> KernelState:
        return make_state(self.model, self.reference, x)

    def step(self, state: KernelState, rng: np.random.Generator) -> StepOutcome:
        fn = _STEPS[self.name]
        if self.spec.trajectory:
            return fn(state, self.model, self.pre, self.param, self.L, rng, self.jitter, self.counter)
        return fn(state, self.model, self.pre, self.param, rng, self.counter)


def sample(kernel: Kernel, x0, n_iter: int, rng: np.random.Generator) -> "ChainRecord":
    """Run ``n_iter`` iterations from ``x0``; row i holds the state after iteration i."""
    from .diagnostics import ChainRecord

    state = kernel.init(x0)
    draws = np.empty((n_iter, kernel.model.dim))
    log_like = np.empty(n_iter)
    accepted = np.zeros(n_iter, dtype=bool)
    t0 = time.perf_counter()
    for i in range(n_iter):
        out = kernel.step(state, rng)
        state = out.state
        draws[i] = state.x
        log_like[i] = state.log_like
        accepted[i] = out.accepted
    return ChainRecord(draws, log_like, accepted, time.perf_counter() - t0)
