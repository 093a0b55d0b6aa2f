"""Effective sample size, jump distance and run summaries.

ESS uses non-overlapping batch means with batch size floor(sqrt(N)); the
incomplete tail batch is discarded.  MSJD averages over the N - 1 stored
transitions of an N-row chain.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

SUMMARY_COLUMNS = ("method", "essl", "ess_min", "msjd", "essl_per_s", "ess_min_per_s",
                   "msjd_per_s", "time_s", "ar")
TIMING_COLUMNS = ("essl_per_s", "ess_min_per_s", "msjd_per_s", "time_s")


@dataclass
class ChainRecord:
    draws: np.ndarray  # iterations x d
    log_like: np.ndarray  # -U_leb at each stored draw
    accepted: np.ndarray  # bool, one per stored iteration
    wall_seconds: float = 0.0

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim == 1:
            self.draws = self.draws[:, None]
        self.log_like = np.asarray(self.log_like, dtype=float)
        self.accepted = np.asarray(self.accepted, dtype=bool)
        n = self.draws.shape[0]
        if self.log_like.shape != (n,) or self.accepted.shape != (n,):
            raise ValueError("draws, log_like and accepted must have the same length")

    def __len__(self):
        return self.draws.shape[0]

    def tail(self, burn_in: int) -> "ChainRecord":
        return ChainRecord(self.draws[burn_in:], self.log_like[burn_in:], self.accepted[burn_in:],
                           self.wall_seconds)


@dataclass
class RunSummary:
    method: str
    essl: float
    ess_min: float
    msjd: float
    essl_per_s: float
    ess_min_per_s: float
    msjd_per_s: float
    time_s: float
    ar: float

    def as_row(self) -> list:
        return [getattr(self, c) for c in SUMMARY_COLUMNS]

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _batch_means_var(series: np.ndarray):
    """(sample variance, batch-means long-run variance) of a 1-d series."""
    x = np.asarray(series, dtype=float)
    n = x.shape[0]
    if n < 100:
        raise ValueError(f"need at least 100 draws, got {n}")
    lam2 = float(np.var(x, ddof=1))
    if not lam2 > 0.0:
        raise ValueError("series is constant")
    b = math.isqrt(n)
    a = n // b
    batches = x[: a * b].reshape(a, b).mean(axis=1)
    sigma2 = b * float(np.var(batches, ddof=1))
    return lam2, sigma2


def ess(series) -> float:
    """N * lambda^2 / sigma^2, clipped to (0, N]."""
    n = len(series)
    lam2, sigma2 = _batch_means_var(series)
    if not sigma2 > 0.0:
        return float(n)
    return float(min(n, n * lam2 / sigma2))


def mcse_mean(series) -> float:
    """Batch-means standard error of the sample mean."""
    _, sigma2 = _batch_means_var(series)
    return math.sqrt(sigma2 / len(series))


def ess_min(record: ChainRecord) -> float:
    return min(ess(record.draws[:, j]) for j in range(record.draws.shape[1]))


def essl(record: ChainRecord) -> float:
    return ess(record.log_like)


def msjd(record: ChainRecord) -> float:
    n = len(record)
    if n < 2:
        raise ValueError("need at least two draws")
    jumps = np.diff(record.draws, axis=0)
    return float(np.einsum("ij,ij->", jumps, jumps) / (n - 1))


def _per_second(value: float, seconds: float) -> float:
    return value / seconds if seconds > 0 else float("nan")


def summarize(record: ChainRecord, method: str = "") -> RunSummary:
    e_l, e_m, jump = essl(record), ess_min(record), msjd(record)
    t = float(record.wall_seconds)
    return RunSummary(method, e_l, e_m, jump, _per_second(e_l, t), _per_second(e_m, t),
                      _per_second(jump, t), t, float(np.mean(record.accepted)))


def summaries_to_csv(summaries, include_timing: bool = True) -> str:
    cols = [c for c in SUMMARY_COLUMNS if include_timing or c not in TIMING_COLUMNS]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for s in summaries:
        writer.writerow([getattr(s, c) if c == "method" else repr(float(getattr(s, c))) for c in cols])
    return buf.getvalue()


def summary_from_dict(d: dict) -> RunSummary:
    return RunSummary(**{f.name: d[f.name] for f in fields(RunSummary)})
