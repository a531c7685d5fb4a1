"""Censored-survival tools: Cox partial-likelihood loss for network risk
scores, Kaplan-Meier curves, the two-group log-rank test and median-risk
stratification.

Conventions: tied event times share one risk-set denominator (Breslow), and
the risk set of subject ``i`` is every subject with ``t_j >= t_i``, so a
subject censored exactly at an event time is still at risk.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, as_tensor


@dataclass(frozen=True)
class SurvivalRecord:
    follow_up: float  # months
    event: bool

    def __post_init__(self):
        if not math.isfinite(self.follow_up) or self.follow_up < 0:
            raise ValueError(f"follow-up must be finite and non-negative, got {self.follow_up}")


def _arrays(records: Sequence[SurvivalRecord]) -> Tuple[np.ndarray, np.ndarray]:
    t = np.array([r.follow_up for r in records], dtype=np.float64)
    e = np.array([r.event for r in records], dtype=bool)
    return t, e


def cox_loss(risks, records: Sequence[SurvivalRecord]) -> Tensor:
    """Negative log partial likelihood ``-sum_{i in D} [f_i - log sum_{t_j >= t_i} exp f_j]``.

    Differentiable with respect to ``risks`` (shape [N]).
    """
    risks = as_tensor(risks)
    t, e = _arrays(records)
    f = risks.data.reshape(-1)
    if f.shape[0] != t.shape[0]:
        raise ValueError("one risk per record required")
    if not np.isfinite(f).all():
        raise ValueError("risk scores contain NaN or Inf")
    if not e.any():
        raise ValueError("cox loss needs at least one observed event")

    # at_risk[i, j] = subject j is in the risk set of subject i
    at_risk = t[None, :] >= t[:, None]
    shift = f.max()
    w = np.exp(f - shift)
    denom = at_risk @ w
    log_denom = np.log(denom) + shift
    loss = -np.sum((f - log_denom)[e])

    def back(g):
        # d/df_k of log_denom_i = w_k * at_risk[i, k] / denom_i
        coeff = e / denom
        grad = -e.astype(np.float64) + w * (at_risk.T @ coeff)
        return (g * grad.reshape(risks.shape),)

    return Tensor.from_op(np.array(loss), (risks,), back, "cox_loss")


@dataclass
class KmCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t: float) -> float:
        """Step-function value S(t) (right-continuous)."""
        idx = np.searchsorted(self.times, t, side="right")
        return 1.0 if idx == 0 else float(self.survival[idx - 1])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "survival", "at_risk", "events"])
            for row in zip(self.times, self.survival, self.at_risk, self.events):
                w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])


def kaplan_meier(records: Sequence[SurvivalRecord]) -> KmCurve:
    """Product-limit estimate over the distinct event times."""
    if len(records) == 0:
        raise ValueError("kaplan_meier needs at least one record")
    t, e = _arrays(records)
    times = np.unique(t[e])
    at_risk = np.array([(t >= s).sum() for s in times], dtype=np.int64)
    events = np.array([((t == s) & e).sum() for s in times], dtype=np.int64)
    survival = np.cumprod((at_risk - events) / at_risk)
    return KmCurve(times, survival, at_risk, events)


def _gamma_series(a: float, x: float) -> float:
    # lower regularized P(a, x)
    term = total = 1.0 / a
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    # upper regularized Q(a, x) by modified Lentz continued fraction
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if a <= 0 or x < 0:
        raise ValueError("gamma_q needs a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def chi2_sf(stat: float, dof: int = 1) -> float:
    return gamma_q(dof / 2.0, stat / 2.0)


def log_rank_test(group_a: Sequence[SurvivalRecord], group_b: Sequence[SurvivalRecord]) -> Tuple[float, float]:
    """Two-group log-rank test; returns (chi-square statistic, p-value)."""
    if len(group_a) == 0 or len(group_b) == 0:
        raise ValueError("log-rank test needs subjects in both groups")
    ta, ea = _arrays(group_a)
    tb, eb = _arrays(group_b)
    times = np.unique(np.concatenate([ta[ea], tb[eb]]))
    o_minus_e = 0.0
    var = 0.0
    for s in times:
        na, nb = (ta >= s).sum(), (tb >= s).sum()
        da, db = ((ta == s) & ea).sum(), ((tb == s) & eb).sum()
        n, d = na + nb, da + db
        o_minus_e += da - d * na / n
        if n > 1:
            var += d * (na / n) * (nb / n) * (n - d) / (n - 1)
    if var <= 0:
        return 0.0, 1.0
    stat = o_minus_e**2 / var
    p = chi2_sf(stat, 1)
    return float(stat), max(p, np.nextafter(0.0, 1.0))


@dataclass
class RiskSplit:
    low: np.ndarray  # indices
    high: np.ndarray
    median: float
    degenerate: bool


def median_risk_split(risks, records: Optional[Sequence[SurvivalRecord]] = None) -> RiskSplit:
    """Split subjects at the median risk: ``> median`` high, ``<= median`` low."""
    r = np.asarray(risks, dtype=np.float64).reshape(-1)
    if records is not None and len(records) != r.size:
        raise ValueError("one risk per record required")
    med = float(np.median(r))
    high = np.flatnonzero(r > med)
    low = np.flatnonzero(r <= med)
    return RiskSplit(low, high, med, degenerate=high.size == 0 or low.size == 0)


def read_cohort_csv(path) -> Tuple[List[str], List[SurvivalRecord], Optional[np.ndarray]]:
    """Read ``subject_id,follow_up_months,event[,risk]``."""
    ids, recs, risks = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["subject_id"])
            recs.append(SurvivalRecord(float(row["follow_up_months"]), row["event"].strip() in ("1", "true", "True")))
            if row.get("risk") not in (None, ""):
                risks.append(float(row["risk"]))
    return ids, recs, (np.array(risks) if len(risks) == len(ids) and ids else None)


def write_cohort_csv(path, ids: Sequence[str], records: Sequence[SurvivalRecord], risks=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "follow_up_months", "event"] + (["risk"] if risks is not None else []))
        for i, (sid, rec) in enumerate(zip(ids, records)):
            row = [sid, repr(rec.follow_up), int(rec.event)]
            if risks is not None:
                row.append(repr(float(risks[i])))
            w.writerow(row)
