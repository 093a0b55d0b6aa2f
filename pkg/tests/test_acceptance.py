"""Acceptance suite: twelve end-to-end criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also written to the terminal when output is captured.
Every seed below is fixed in advance.
"""

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.signal import lfilter

from weavemc.diagnostics import ess, ess_min, mcse_mean, msjd
from weavemc.dynamics import (
    LevelSetState,
    compare_limit,
    drift_constant,
    energy_drift,
    expansion_residual,
    integrate_limit,
)
from weavemc.harness import ExperimentConfig, TARGETS, main, seed_split, worker_cap
from weavemc.kernels import KERNELS, Kernel, mpcn_proposal_logpdf, sample
from weavemc.targets import (
    HAAR,
    gaussian_target,
    logistic_target,
    sde_simulate,
    sde_target,
    student_t_draw,
    student_t_target,
    sv_simulate,
    sv_target,
    synthetic_logistic_data,
    wishart_scale,
)
from weavemc.transforms import (
    PhasePoint,
    Preconditioner,
    bounce,
    circle,
    flip,
    hug_step,
    infhmc_step,
    leapfrog_step,
    weave,
)
from weavemc.tuning import adaptive_pretune, tune_acceptance


@pytest.fixture
def verdict(capsys):
    """Print one line per criterion, then fail the test if the criterion failed."""

    def report(n, title, ok, detail, started, budget=None):
        elapsed = time.perf_counter() - started
        in_time = budget is None or elapsed <= budget
        status = "PASS" if ok and in_time else "FAIL"
        limit = "" if budget is None else f" / {budget:.0f}s"
        with capsys.disabled():
            print(f"\n[{status}] criterion {n:2d} {title}: {detail} ({elapsed:.1f}s{limit})")
        assert ok, detail
        assert in_time, f"took {elapsed:.1f}s, budget {budget}s"

    return report


def dyn_t2():
    return student_t_target(2, 3.0, np.zeros(2), np.array([[1.0, 0.6], [0.6, 0.8]]))


def dyn_quadratic():
    return gaussian_target(2)


def t_grad(x):
    return dyn_t2().grad_potential(x)


# ---------------------------------------------------------------------------


def test_01_involutions(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    d, n = 3, 1000
    A = rng.standard_normal((d, d))
    pre = Preconditioner.from_moments(rng.standard_normal(d), A @ A.T + 0.5 * np.eye(d))
    model = student_t_target(d, 3.0, np.zeros(d), np.diag([1.0, 0.5, 2.0]))
    g = model.grad_potential
    transforms = {
        "circle": (lambda z: circle(z, 0.7, pre.M), pre.M),
        "bounce": (lambda z: bounce(z, g(z.x), pre.M, pre.Sigma), pre.M),
        "leapfrog": (lambda z: leapfrog_step(z, 0.1, g, lambda v: v), None),
        "infhmc": (lambda z: infhmc_step(z, 0.2, g, pre.M), pre.M),
        "hug": (lambda z: hug_step(z, 0.2, lambda v: v, g, pre.Sigma), None),
    }
    for L in (1, 5, 40):
        transforms[f"weave L={L}"] = (lambda z, L=L: weave(z, 0.3, L, g), None)
        transforms[f"weave_preconditioned L={L}"] = (lambda z, L=L: weave(z, 0.3, L, g, pre), pre.M)
    worst = {}
    for name, (phi, M) in transforms.items():
        err = 0.0
        for _ in range(n):
            z = PhasePoint(rng.standard_normal(d) * 2, rng.standard_normal(d) * 2)
            back = flip(phi(flip(phi(z), M)), M)
            err = max(err, float(np.max(np.abs(np.concatenate([back.x - z.x, back.v - z.v])))))
        worst[name] = err
    bad = {k: v for k, v in worst.items() if v > 1e-9}
    detail = f"max error {max(worst.values()):.2e} over {n} states per transform"
    if bad:
        detail += "; above 1e-9: " + ", ".join(f"{k} {v:.1e}" for k, v in bad.items())
    verdict(1, "involutions", not bad, detail, t0, budget=10)


def test_02_weave_norm(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    worst = 0.0
    for L in (1, 5, 40):
        for _ in range(300):
            z = PhasePoint(rng.standard_normal(2) * 2, rng.standard_normal(2) * 2)
            out = weave(z, rng.uniform(0.05, 1.0), L, t_grad)
            worst = max(worst, abs(out.norm() - z.norm()) / z.norm())
    verdict(2, "weave norm", worst <= 1e-12, f"max relative norm change {worst:.2e}", t0, budget=5)


def test_03_energy_drift(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    model, h = dyn_t2(), 0.1
    zs = [PhasePoint(rng.standard_normal(2), rng.standard_normal(2)) for _ in range(1000)]
    C = drift_constant(model, max(z.norm() for z in zs), 2000, rng)
    d1 = np.array([energy_drift(model, z, h) for z in zs])
    d2 = np.array([energy_drift(model, z, h / 2) for z in zs])
    ratio = float(np.median(d1 / d2))
    bound_ok = all(a <= h ** 2 * C(z.norm()) and b <= (h / 2) ** 2 * C(z.norm()) for a, b, z in zip(d1, d2, zs))
    worst = max(a / (h ** 2 * C(z.norm())) for a, z in zip(d1, zs))
    verdict(3, "energy drift", 3.2 <= ratio <= 4.8 and bound_ok,
            f"median ratio {ratio:.3f}, bound held {bound_ok}, worst drift/bound {worst:.2f}", t0, budget=30)


def test_04_limit_order(verdict):
    t0 = time.perf_counter()
    z0 = PhasePoint(np.array([0.8, -0.3]), np.array([0.4, 0.5]))
    hs = [0.2, 0.1, 0.05, 0.025]
    parts, ok = [], True
    for name, model in (("quadratic", dyn_quadratic()), ("student_t", dyn_t2())):
        rep = integrate_limit(model, LevelSetState.from_phase(model, z0), 1.0, 1e-4)
        errs = [compare_limit(model, z0, h, 1.0, 1e-4, rep) for h in hs]
        ratios = [a / b for a, b in zip(errs, errs[1:])]
        good = all(1.6 <= r <= 2.4 for r in ratios) and rep.u_drift <= 1e-6 and rep.tangency <= 1e-6
        ok &= good
        parts.append(f"{name} ratios {', '.join(f'{r:.2f}' for r in ratios)} "
                     f"U drift {rep.u_drift:.1e} tangency {rep.tangency:.1e}")
    verdict(4, "limit ODE order", ok, "; ".join(parts), t0, budget=120)


def test_05_expansion_order(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(105)
    model, h = dyn_t2(), 0.05
    ratios = []
    for _ in range(1000):
        z = PhasePoint(rng.standard_normal(2), rng.standard_normal(2))
        ratios.append(expansion_residual(model, z, h) / expansion_residual(model, z, h / 2))
    med = float(np.median(ratios))
    q = np.quantile(ratios, [0.1, 0.9])
    verdict(5, "expansion order", 3.2 <= med <= 4.8,
            f"median residual ratio {med:.3f} (10-90% {q[0]:.2f}-{q[1]:.2f}) over 1000 points", t0, budget=30)


# ---------------------------------------------------------------------------

STATIONARY_ITERS = 200_000
STATIONARY_SETTINGS = {  # (param, L, jitter); identity preconditioner for every kernel
    "rwm": (0.3, 1, 0.0), "pcn": (0.5, 1, 0.0), "mpcn": (0.5, 1, 0.0), "infhmc": (0.5, 3, 0.0),
    "hug": (0.5, 3, 0.0), "hmc": (0.3, 3, 0.0), "wm": (1.0, 1, 0.2), "hwm": (1.0, 1, 0.2),
}


def stationary_target_moments(d=10):
    rng = np.random.default_rng(0)
    A = rng.standard_normal((d, d))
    return rng.standard_normal(d), A @ A.T / d + 0.5 * np.eye(d)


def stationarity_job(name):
    d = 10
    mu, S = stationary_target_moments(d)
    haar = KERNELS[name].reference == HAAR
    model = student_t_target(d, 3.0, mu, S) if haar else gaussian_target(d, mu, S)
    var_true = 3.0 * np.diag(S) if haar else np.diag(S)
    p, L, jitter = STATIONARY_SETTINGS[name]
    rng = np.random.default_rng(seed_split(0, list(KERNELS).index(name)))
    x0 = student_t_draw(rng, 3.0, mu, S) if haar else rng.multivariate_normal(mu, S)
    k = Kernel(name, model, Preconditioner.identity(d), p, L=L, jitter=jitter)
    X = sample(k, x0, STATIONARY_ITERS, rng).draws
    z_mean = [(X[:, j].mean() - mu[j]) / mcse_mean(X[:, j]) for j in range(d)]
    sq = (X - mu) ** 2
    z_var = [(sq[:, j].mean() - var_true[j]) / mcse_mean(sq[:, j]) for j in range(d)]
    return name, float(np.max(np.abs(z_mean))), float(np.max(np.abs(z_var)))


def test_06_stationarity(verdict):
    t0 = time.perf_counter()
    names = sorted(KERNELS)
    with ProcessPoolExecutor(max_workers=min(worker_cap(), len(names))) as pool:
        results = list(pool.map(stationarity_job, names))
    bad = [f"{n} (mean z {zm:.2f}, var z {zv:.2f})" for n, zm, zv in results if zm > 4 or zv > 4]
    summary = ", ".join(f"{n} {max(zm, zv):.2f}" for n, zm, zv in results)
    detail = f"max |z| per kernel: {summary}" + (f"; outside 4 MCSE: {'; '.join(bad)}" if bad else "")
    verdict(6, "stationarity", not bad, detail, t0, budget=300)


# ---------------------------------------------------------------------------


def mpcn_by_quadrature(x, y, h, pre):
    d = pre.dim
    rate = 0.5 * pre.mahalanobis(x)
    centre = pre.M + math.cos(h) * (x - pre.M)
    s2 = math.sin(h) ** 2
    r2 = float((y - centre) @ pre.inverse @ (y - centre))
    logdet = np.linalg.slogdet(pre.Sigma)[1]

    def integrand(g):
        log_n = 0.5 * d * math.log(g / (2 * math.pi * s2)) - 0.5 * logdet - 0.5 * g * r2 / s2
        return math.exp(log_n + stats.gamma.logpdf(g, 0.5 * d, scale=1 / rate))

    return integrate.quad(integrand, 0, np.inf, epsabs=0, epsrel=1e-12, limit=200)[0]


def test_07_mpcn_closed_form(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(107)
    pre = Preconditioner.identity(3)
    worst = 0.0
    for _ in range(100):
        x, h = rng.standard_normal(3) * 1.5, rng.uniform(0.1, 1.5)
        y = math.cos(h) * x + rng.standard_normal(3) * math.sin(h) * np.linalg.norm(x)
        closed = math.exp(mpcn_proposal_logpdf(x, y, h, pre))
        worst = max(worst, abs(closed / mpcn_by_quadrature(x, y, h, pre) - 1))
    verdict(7, "mpcn closed form", worst <= 1e-6, f"max relative error {worst:.2e} at 100 points, d=3",
            t0, budget=60)


# ---------------------------------------------------------------------------


def fd_relative_error(model, x):
    g = model.grad_potential(x)
    fd = np.empty_like(x)
    for j in range(x.shape[0]):
        eps = 1e-6 * (1 + abs(x[j]))
        e = np.zeros_like(x)
        e[j] = eps
        fd[j] = (model.potential(x + e) - model.potential(x - e)) / (2 * eps)
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1.0))


def test_08_gradients(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(108)
    sv_y = sv_simulate(50, 0.5, 10.0, seed=0)
    Sv = wishart_scale(10, 10, seed=0)
    models = {
        "gaussian": TARGETS["gaussian"].build(ExperimentConfig()),
        "student_t": TARGETS["student_t"].build(ExperimentConfig()),
        "logistic": logistic_target(synthetic_logistic_data(569, 30, seed=0)),
        "sv": sv_target(sv_y),
        "sde": sde_target(sde_simulate(10, 100, 5.0, np.ones(10), Sv, seed=0), 0.05, Sv),
    }
    errs = {}
    for name, model in models.items():
        scale = 0.1 if name == "logistic" else 1.0
        errs[name] = max(fd_relative_error(model, scale * rng.standard_normal(model.dim)) for _ in range(3))
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert models["logistic"].dim == 31 and models["sv"].dim == 53 and models["sde"].dim == 10
    verdict(8, "gradients", worst <= 1e-5, f"max relative error: {detail}", t0, budget=60)


def test_09_ess_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(109)
    rho, n = 0.5, 10 ** 6
    e = rng.standard_normal(n) * math.sqrt(1 - rho ** 2)
    e[0] = rng.standard_normal()
    ratio = ess(lfilter([1.0], [1.0, -rho], e)) / n
    rel = abs(ratio / (1 / 3) - 1)
    verdict(9, "ess oracle", rel <= 0.1, f"ESS/N = {ratio:.4f} vs 1/3 (rel err {rel:.3f})", t0, budget=30)


# ---------------------------------------------------------------------------

ORDERING_ITERS = 100_000


def ordering_job(rep):
    d = 20
    seed = 1000 + rep
    model = student_t_target(d, 3.0, np.zeros(d), wishart_scale(d, d + 5, seed=0) / (d + 5))
    pretune = adaptive_pretune(model, 100_000, np.random.default_rng(seed_split(seed, 0)))
    x0 = pretune.draws[-1]
    out = {}
    for i, name in enumerate(("pcn", "wm", "hwm")):
        k = Kernel(name, model, pretune.pre, 1.0)
        tuned = tune_acceptance(k, rng=np.random.default_rng(seed_split(seed, 1 + i)), x0=x0)
        rec = sample(k.with_param(tuned.param), x0, ORDERING_ITERS,
                     np.random.default_rng(seed_split(seed, 10 + i))).tail(ORDERING_ITERS // 10)
        out[name] = (ess_min(rec), msjd(rec), tuned.rate)
    return rep, out


def test_10_heavy_tail_ordering(verdict):
    t0 = time.perf_counter()
    with ProcessPoolExecutor(max_workers=min(worker_cap(), 3)) as pool:
        results = list(pool.map(ordering_job, range(3)))
    ok, parts = True, []
    for rep, r in results:
        good = r["hwm"][0] >= 2 * r["pcn"][0] and r["hwm"][1] >= r["wm"][1]
        ok &= good
        parts.append(f"rep {rep}: ess_min hwm/pcn {r['hwm'][0]:.0f}/{r['pcn'][0]:.0f}, "
                     f"msjd hwm/wm {r['hwm'][1]:.1f}/{r['wm'][1]:.1f}")
    verdict(10, "heavy-tail ordering", ok, "; ".join(parts), t0, budget=300)


def test_11_tuner(verdict):
    t0 = time.perf_counter()
    model = logistic_target(synthetic_logistic_data(569, 30, seed=0))
    pretune = adaptive_pretune(model, 100_000, np.random.default_rng(seed_split(11, 0)))
    targets = {"rwm": 0.25, "wm": 0.60, "hwm": 0.60, "infhmc": 0.65}
    got = {}
    for i, (name, rate) in enumerate(targets.items()):
        k = Kernel(name, model, pretune.pre, 1.0)
        res = tune_acceptance(k, rate, rng=np.random.default_rng(seed_split(11, 1 + i)), x0=pretune.draws[-1])
        got[name] = res.rate
    ok = all(abs(got[k] - targets[k]) <= 0.05 for k in targets)
    detail = ", ".join(f"{k} {got[k]:.3f} (target {targets[k]:.2f})" for k in targets)
    verdict(11, "tuner", ok, detail, t0, budget=180)


def strip_timing(json_text):
    payload = json.loads(json_text)
    payload.pop("timing")
    return json.dumps(payload, sort_keys=True)


def test_12_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    # tuning is exercised on three kernels; the rest run at fixed steps to keep this quick
    args = ["run", "--target", "gaussian", "--dim", "4", "--kernel", "rwm,wm,hwm", "--h", "auto", "--s", "auto",
            "--L", "2", "--iters", "2000", "--pretune_iters", "2000", "--chains", "2", "--seed", "12"]
    fixed = ["run", "--target", "gaussian", "--dim", "4", "--kernel", "all", "--h", "0.4", "--s", "0.4",
             "--L", "2", "--iters", "2000", "--pretune_iters", "2000", "--chains", "2", "--seed", "12"]
    out = tmp_path / "run"
    texts = []
    for _ in range(2):
        assert main(args + [f"--out={out}"]) == 0
        csv_rows = Path(f"{out}.csv").read_text().splitlines()
        header = csv_rows[0].split(",")
        keep = [i for i, c in enumerate(header) if c not in ("essl_per_s", "ess_min_per_s", "msjd_per_s", "time_s")]
        table = "\n".join(",".join(r.split(",")[i] for i in keep) for r in csv_rows)
        texts.append((table, strip_timing(Path(f"{out}.json").read_text())))
    same = texts[0] == texts[1]
    for _ in range(2):
        assert main(fixed + [f"--out={out}"]) == 0
        texts.append((Path(f"{out}.csv").read_text().split("\n", 1)[0], strip_timing(Path(f"{out}.json").read_text())))
    same = same and texts[2] == texts[3]
    verdict(12, "determinism", same, "non-timing CSV and JSON byte-identical across two runs" if same
            else "outputs differ", t0)
