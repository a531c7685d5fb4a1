"""Evaluation statistics and cross-validation mechanics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

TASK_COLUMNS = ("lymph", "mitosis", "prostate", "colorectal")


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    ranks = np.empty(v.size)
    start = 0
    while start < v.size:
        stop = start + 1
        while stop < v.size and sorted_v[stop] == sorted_v[start]:
            stop += 1
        ranks[order[start:stop]] = 0.5 * (start + stop - 1) + 1.0
        start = stop
    return ranks


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D arrays of equal length")
    if x.size < 3:
        raise ValueError("spearman needs at least 3 samples")
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    sx, sy = math.sqrt(rx @ rx), math.sqrt(ry @ ry)
    if sx == 0 or sy == 0:
        raise ValueError("spearman undefined: zero rank variance")
    return float(np.clip((rx @ ry) / (sx * sy), -1.0, 1.0))


def fisher_ci(rho: float, n: int, level: float = 0.95) -> Tuple[float, float]:
    """Fisher z interval: ``tanh(atanh(rho) +- z / sqrt(n - 3))``."""
    if n < 4:
        raise ValueError("Fisher interval needs n >= 4")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    z = norm.ppf(0.5 + level / 2.0)
    centre = math.atanh(min(max(rho, -1 + 1e-15), 1 - 1e-15))
    half = z / math.sqrt(n - 3)
    return math.tanh(centre - half), math.tanh(centre + half)


def spearman_ci(x, y, level: float = 0.95, method: str = "fisher_z", n_boot: int = 10000, seed: int = 0) -> Tuple[float, float]:
    """Confidence interval for Spearman's rho by ``fisher_z`` or percentile ``bootstrap``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 4:
        raise ValueError("confidence interval needs n >= 4")
    if method == "fisher_z":
        return fisher_ci(spearman(x, y), x.size, level)
    if method == "bootstrap":
        rng = np.random.default_rng(seed)
        stats = []
        for _ in range(n_boot):
            idx = rng.integers(0, x.size, x.size)
            try:
                stats.append(spearman(x[idx], y[idx]))
            except ValueError:
                continue
        alpha = (1 - level) / 2
        return float(np.quantile(stats, alpha)), float(np.quantile(stats, 1 - alpha))
    raise ValueError(f"unknown CI method {method!r}")


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outranks negative), ties counted 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = average_ranks(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class FoldPlan:
    """Fold assignment for ``k``-fold rotation.

    ``pattern`` is ``("train", "val")`` or ``("train", "val", "test")``. In
    rotation ``r`` fold ``r`` is the held-out fold (validation, or test in
    the three-role pattern, where fold ``r+1`` validates).
    """

    k: int
    assignment: np.ndarray
    pattern: Tuple[str, ...]
    seed: int

    def rotation(self, r: int) -> dict:
        folds = self.assignment
        idx = np.arange(folds.size)
        if self.pattern == ("train", "val"):
            return {"train": idx[folds != r], "val": idx[folds == r]}
        val_fold = (r + 1) % self.k
        return {
            "train": idx[(folds != r) & (folds != val_fold)],
            "val": idx[folds == val_fold],
            "test": idx[folds == r],
        }

    def rotations(self) -> Iterator[dict]:
        for r in range(self.k):
            yield self.rotation(r)

    @property
    def held_out_role(self) -> str:
        return self.pattern[-1]


def kfold(n_or_ids, k: int = 4, pattern: Sequence[str] = ("train", "val"), seed: int = 0) -> FoldPlan:
    n = n_or_ids if isinstance(n_or_ids, int) else len(n_or_ids)
    pattern = tuple(pattern)
    if pattern not in (("train", "val"), ("train", "val", "test")):
        raise ValueError(f"unsupported fold pattern {pattern}")
    if not 2 <= k <= n or (len(pattern) == 3 and k < 3):
        raise ValueError(f"cannot make {k} folds from {n} samples with pattern {pattern}")
    perm = np.random.default_rng([seed, 11]).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % k
    return FoldPlan(k, assignment, pattern, seed)


def ensemble_mean(predictions) -> np.ndarray:
    """Per-sample arithmetic mean across models ([M][N] -> [N])."""
    p = np.asarray(predictions, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("predictions must be [models, samples]")
    # sorting makes the float sum independent of model order; summing offsets
    # from the per-sample minimum keeps identical models an exact identity
    s = np.sort(p, axis=0)
    return s[0] + (s - s[0]).sum(axis=0) / p.shape[0]


@dataclass(frozen=True)
class AblationRow:
    included: Tuple[bool, bool, bool, bool]
    correlation: float

    def __post_init__(self):
        if not any(self.included):
            raise ValueError("an ablation row must include at least one task")


def task_inclusion_correlation(rows: Sequence[AblationRow]) -> List[float]:
    """Spearman rho between each task's 0/1 inclusion flag and the score column."""
    flags = np.array([r.included for r in rows], dtype=np.float64)
    scores = np.array([r.correlation for r in rows], dtype=np.float64)
    out = []
    for t in range(flags.shape[1]):
        try:
            out.append(spearman(flags[:, t], scores))
        except ValueError as exc:
            raise ValueError(f"task column {t}: {exc}") from None
    return out


def _flag(text: str) -> bool:
    v = text.strip().lower()
    if v in ("yes", "1", "true"):
        return True
    if v in ("no", "0", "false"):
        return False
    raise ValueError(f"not an inclusion flag: {text!r}")


def read_ablation_csv(path) -> List[AblationRow]:
    """Rows of ``lymph,mitosis,prostate,colorectal,correlation``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(TASK_COLUMNS + ("correlation",)) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"ablation CSV lacks columns {sorted(missing)}")
        return [AblationRow(tuple(_flag(row[c]) for c in TASK_COLUMNS), float(row["correlation"])) for row in reader]


def write_ablation_csv(path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(TASK_COLUMNS) + ["correlation"])
        for r in rows:
            w.writerow(["Yes" if f else "No" for f in r.included] + [repr(r.correlation)])


def write_predictions_csv(path, rows: Sequence[Tuple[str, int, str, float, object]]) -> None:
    """Rows of (sample_id, fold, model, prediction, label)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "fold", "model", "prediction", "label"])
        for sid, fold, model, pred, label in rows:
            w.writerow([sid, fold, model, repr(float(pred)), label])


def read_predictions_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
