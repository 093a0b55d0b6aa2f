"""Preconditioner estimation and acceptance-rate tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernels import Kernel, KernelState
from .targets import TargetModel
from .transforms import Preconditioner

AM_SCALE = 2.38 ** 2
AM_EPS = 1e-8
RIDGE = 1e-8


@dataclass
class PretuneResult:
    pre: Preconditioner
    draws: np.ndarray  # post-burn-in chain
    acceptance: float


def adaptive_pretune(model: TargetModel, iters: int = 100_000, rng: Optional[np.random.Generator] = None,
                     x0=None, init_cov=None, burn_in: Optional[int] = None) -> PretuneResult:
    """Adaptive Metropolis; returns the mean and covariance of the post-burn-in draws.

    The proposal is N(x, init_cov) for the first 2d steps and afterwards
    N(x, (2.38^2/d) C_t + 1e-8 I) with C_t the running covariance of the chain.
    """
    if rng is None:
        rng = np.random.default_rng()
    d = model.dim
    iters = int(iters)
    burn_in = iters // 10 if burn_in is None else int(burn_in)
    if not 0 <= burn_in < iters - 1:
        raise ValueError(f"need 0 <= burn_in < iters - 1, got burn_in={burn_in}, iters={iters}")
    x = np.zeros(d) if x0 is None else np.array(x0, dtype=float)
    cov0 = (0.1 ** 2 / d) * np.eye(d) if init_cov is None else np.asarray(init_cov, dtype=float)
    chol = np.linalg.cholesky(cov0)
    u = float(model.potential(x))
    if not math.isfinite(u):
        raise ValueError("starting point has non-finite potential")

    mean = x.copy()
    m2 = np.zeros((d, d))
    draws = np.empty((iters, d))
    n_acc = 0
    eye = np.eye(d)
    for t in range(iters):
        if t >= 2 * d:
            cov = (AM_SCALE / d) * (m2 / t) + AM_EPS * eye
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                pass  # keep the previous factor
        y = x + chol @ rng.standard_normal(d)
        try:
            uy = float(model.potential(y))
        except (FloatingPointError, OverflowError, ValueError):
            uy = math.inf
        w = rng.uniform()
        if math.isfinite(uy) and w < math.exp(min(0.0, u - uy)):
            x, u = y, uy
            n_acc += 1
        draws[t] = x
        # Welford update over the t + 2 points seen so far (start included)
        delta = x - mean
        mean = mean + delta / (t + 2)
        m2 = m2 + np.outer(delta, x - mean)

    kept = draws[burn_in:]
    M = kept.mean(axis=0)
    S = np.atleast_2d(np.cov(kept, rowvar=False)) + RIDGE * eye
    try:
        pre = Preconditioner.from_moments(M, S)
    except ValueError as exc:
        raise ValueError(f"estimated covariance is not positive definite: {exc}") from exc
    return PretuneResult(pre, kept, n_acc / iters)


@dataclass
class TuneResult:
    param: float
    rate: float
    converged: bool  # |rate - target| <= tolerance
    history: list  # (param, rate) per probe
    state: KernelState


def probe_rate(kernel: Kernel, state: KernelState, n: int, rng: np.random.Generator):
    acc = 0
    for _ in range(n):
        out = kernel.step(state, rng)
        state = out.state
        acc += out.accepted
    return acc / n, state


def tune_acceptance(kernel: Kernel, target_rate: Optional[float] = None, tolerance: float = 0.05,
                    rng: Optional[np.random.Generator] = None, x0=None, probe_iters: int = 10_000,
                    max_probes: int = 14) -> TuneResult:
    """Stochastic bisection in log-parameter space.

    Acceptance is assumed to decrease with the step parameter.  The search
    stops once a probe lands within tolerance / 2 of the target; otherwise the
    probe closest to the target is returned with ``converged`` set accordingly.
    """
    if rng is None:
        rng = np.random.default_rng()
    spec = kernel.spec
    target = spec.target_ar if target_rate is None else float(target_rate)
    if not 0.0 < target < 1.0:
        raise ValueError(f"target rate must lie in (0, 1), got {target}")
    lo, hi = (math.log(b) for b in spec.bounds)
    # default start: a draw from N(M, Sigma), which avoids the Haar singularity at M
    state = kernel.init(kernel.pre.draw(rng) if x0 is None else x0)
    history = []
    for _ in range(max_probes):
        p = math.exp(0.5 * (lo + hi))
        rate, state = probe_rate(kernel.with_param(p), state, probe_iters, rng)
        history.append((p, rate))
        if abs(rate - target) <= 0.5 * tolerance:
            break
        if rate > target:
            lo = math.log(p)
        else:
            hi = math.log(p)
    p, rate = min(history, key=lambda pr: abs(pr[1] - target))
    return TuneResult(p, rate, abs(rate - target) <= tolerance, history, state)
