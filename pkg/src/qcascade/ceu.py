"""Confidence evaluation: generalised best-vs-second-best scoring and tuning.

A prediction is kept on the low-precision unit when the score
sum(p_1..p_M) - sum(p_(M+1)..p_N) of its sorted probability vector clears a
threshold; everything else is forwarded for high-precision re-processing.
Tuning picks (M, N, th) minimising the forwarded fraction subject to the
cascade error staying within tolerance of the high-precision error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import ValidationError

MAX_GRID_N = 10  # (M, N) pairs searched up to min(num_classes, 10)


@dataclass
class SortedProbVector:
    """Probabilities sorted descending plus the class index of each slot."""

    probs: np.ndarray
    class_order: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.class_order = np.asarray(self.class_order, dtype=np.int64)
        if self.probs.ndim != 1 or self.probs.shape != self.class_order.shape:
            raise ValidationError("probs and class_order must be equal-length vectors")
        if np.any(np.diff(self.probs) > 0):
            raise ValidationError("probs must be non-increasing")
        if self.probs[-1] < -1e-12 or self.probs[0] > 1 + 1e-12:
            raise ValidationError("probs must lie in [0, 1]")
        if abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise ValidationError("probs must sum to 1")

    @classmethod
    def from_probs(cls, p: np.ndarray) -> "SortedProbVector":
        """Sort a class-ordered probability vector; ties keep the lower class
        index first (stable)."""
        p = np.asarray(p, dtype=np.float64)
        order = np.argsort(-p, kind="stable")
        return cls(p[order], order)

    @property
    def top1(self) -> int:
        return int(self.class_order[0])

    def topk(self, k: int) -> np.ndarray:
        return self.class_order[:k]


@dataclass(frozen=True)
class CeuConfig:
    M: int
    N: int
    th: float

    def __post_init__(self) -> None:
        if not 1 <= self.M < self.N:
            raise ValidationError(f"need 1 <= M < N, got M={self.M}, N={self.N}")

    def to_json(self) -> str:
        return json.dumps({"M": self.M, "N": self.N, "th": self.th}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CeuConfig":
        d = json.loads(text)
        return cls(int(d["M"]), int(d["N"]), float(d["th"]))


def gbvsb(p: SortedProbVector | np.ndarray, m: int, n: int) -> float:
    """sum of the top m sorted probabilities minus the sum of the next n-m."""
    probs = p.probs if isinstance(p, SortedProbVector) else np.asarray(p, dtype=np.float64)
    if not 1 <= m < n <= len(probs):
        raise ValidationError(f"need 1 <= M < N <= {len(probs)}, got ({m}, {n})")
    return float(probs[:m].sum() - probs[m:n].sum())


def is_confident(p: SortedProbVector, cfg: CeuConfig) -> bool:
    return gbvsb(p, cfg.M, cfg.N) >= cfg.th


@dataclass
class ParetoPoint:
    M: int
    N: int
    th: float
    forwarded_fraction: float
    cascade_error: float


@dataclass
class TuningReport:
    """Outcome of the (M, N, th) search on the tuning samples."""

    config: CeuConfig
    forwarded_fraction: float
    cascade_error: float
    hpu_error: float
    lpu_error: float
    error_bound: float
    pareto: list[ParetoPoint]
    split: bool = False
    split_seed: int = 0
    validate_forwarded_fraction: float | None = None
    validate_cascade_error: float | None = None
    validate_hpu_error: float | None = None
    overfit_flag: bool = False
    overfit_slack: float = 0.02
    tune_indices: np.ndarray | None = None

    def to_json(self) -> str:
        doc = {
            "config": {"M": self.config.M, "N": self.config.N, "th": self.config.th},
            "forwarded_fraction": self.forwarded_fraction,
            "cascade_error": self.cascade_error,
            "hpu_error": self.hpu_error,
            "lpu_error": self.lpu_error,
            "error_bound": self.error_bound,
            "split": self.split,
            "split_seed": self.split_seed,
            "validate_forwarded_fraction": self.validate_forwarded_fraction,
            "validate_cascade_error": self.validate_cascade_error,
            "validate_hpu_error": self.validate_hpu_error,
            "overfit_flag": self.overfit_flag,
            "overfit_slack": self.overfit_slack,
            "pareto": [
                {
                    "M": p.M,
                    "N": p.N,
                    "th": p.th,
                    "forwarded_fraction": p.forwarded_fraction,
                    "cascade_error": p.cascade_error,
                }
                for p in self.pareto
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=2)


def _topk_hits(topk: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return (np.atleast_2d(topk) == labels[:, None]).any(axis=1)


def _threshold_candidates(scores: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive distinct scores plus below-min and
    above-max sentinels; only these can change the forwarded set."""
    distinct = np.unique(scores)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return np.concatenate(([distinct[0] - 1.0], mids, [distinct[-1] + 1.0]))


def simulate_cascade_errors(
    scores: np.ndarray,
    thresholds: np.ndarray,
    lpu_hit: np.ndarray,
    hpu_hit: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Cascade error and forwarded fraction for every threshold at once.

    A sample is kept when score >= th, so sorting by score lets each threshold
    split the set with one prefix sum: forwarded samples score with the
    high-precision hit, kept ones with the low-precision hit.
    """
    n = len(scores)
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    lpu_miss = (~lpu_hit[order]).astype(np.int64)
    hpu_miss = (~hpu_hit[order]).astype(np.int64)
    # counts[i] = number of samples with score < thresholds[i] (forwarded)
    counts = np.searchsorted(s_sorted, thresholds, side="left")
    hpu_cum = np.concatenate(([0], np.cumsum(hpu_miss)))
    lpu_cum = np.concatenate(([0], np.cumsum(lpu_miss)))
    misses = hpu_cum[counts] + (lpu_cum[n] - lpu_cum[counts])
    return misses / n, counts / n


def tune_ceu(
    lpu_preds: list[SortedProbVector],
    hpu_topk: np.ndarray,
    labels: np.ndarray,
    tolerance: float,
    metric: str = "top1",
    split: bool = True,
    seed: int = 0,
    slack: float = 0.02,
    max_grid_n: int = MAX_GRID_N,
) -> tuple[CeuConfig, TuningReport]:
    """Grid-search (M, N) and sweep thresholds over observed scores, returning
    the config with the smallest forwarded fraction whose simulated cascade
    error stays within `tolerance` of the high-precision error.

    Ties break toward smaller forwarded fraction, then smaller N, M, th. With
    `split`, tuning uses a seeded half of the samples and the other half
    reports generalisation (flagged when it misses the bound by more than
    `slack`).
    """
    from .engine import metric_k

    labels = np.asarray(labels, dtype=np.int64)
    hpu_topk = np.atleast_2d(np.asarray(hpu_topk, dtype=np.int64))
    if hpu_topk.shape[0] == 1 and len(labels) > 1:
        hpu_topk = hpu_topk.T
    n_total = len(labels)
    if not (len(lpu_preds) == hpu_topk.shape[0] == n_total):
        raise ValidationError("lpu_preds, hpu predictions, and labels must align")
    if tolerance < 0:
        raise ValidationError("tolerance must be >= 0")
    k = metric_k(metric)
    num_classes = len(lpu_preds[0].probs)

    lpu_topk = np.stack([p.topk(k) for p in lpu_preds])
    lpu_hit_all = _topk_hits(lpu_topk, labels)
    hpu_hit_all = _topk_hits(hpu_topk[:, :k], labels)

    if split and n_total >= 2:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n_total)
        tune_idx = np.sort(perm[: n_total // 2])
        val_idx = np.sort(perm[n_total // 2 :])
    else:
        tune_idx = np.arange(n_total)
        val_idx = np.array([], dtype=np.int64)

    grid_n = min(num_classes, max_grid_n)
    best = None  # (forwarded, N, M, th, error)
    pareto_input = []
    prob_rows = np.stack([p.probs for p in lpu_preds])
    lpu_hit, hpu_hit = lpu_hit_all[tune_idx], hpu_hit_all[tune_idx]
    hpu_err = float(1.0 - hpu_hit.mean())
    lpu_err = float(1.0 - lpu_hit.mean())
    bound = hpu_err + tolerance

    cumprobs = np.concatenate(
        [np.zeros((len(tune_idx), 1)), np.cumsum(prob_rows[tune_idx], axis=1)], axis=1
    )
    for m in range(1, grid_n):
        for n in range(m + 1, grid_n + 1):
            # gBvSB = 2 * cum[m] - cum[n] since sum(top m) - (cum[n] - cum[m])
            scores = 2 * cumprobs[:, m] - cumprobs[:, n]
            ths = _threshold_candidates(scores)
            errors, fractions = simulate_cascade_errors(scores, ths, lpu_hit, hpu_hit)
            ok = errors <= bound + 1e-12
            if not ok.any():
                continue
            idx = np.lexsort((ths[ok], fractions[ok]))[0]
            cand_fraction = float(fractions[ok][idx])
            cand = (cand_fraction, n, m, float(ths[ok][idx]), float(errors[ok][idx]))
            if best is None or cand[:4] < best[:4]:
                best = cand
            pareto_input.extend(
                ParetoPoint(m, n, float(t), float(f), float(e))
                for t, f, e in zip(ths[ok], fractions[ok], errors[ok])
            )
    assert best is not None, "forwarding everything always meets the bound"
    fraction, n_sel, m_sel, th_sel, err_sel = best
    config = CeuConfig(m_sel, n_sel, th_sel)

    pareto: list[ParetoPoint] = []
    for p in sorted(pareto_input, key=lambda p: (p.forwarded_fraction, p.cascade_error)):
        if not pareto or p.cascade_error < pareto[-1].cascade_error - 1e-15:
            pareto.append(p)

    report = TuningReport(
        config=config,
        forwarded_fraction=fraction,
        cascade_error=err_sel,
        hpu_error=hpu_err,
        lpu_error=lpu_err,
        error_bound=bound,
        pareto=pareto,
        split=split and len(val_idx) > 0,
        split_seed=seed,
        overfit_slack=slack,
        tune_indices=tune_idx,
    )
    if len(val_idx):
        scores_v = np.array(
            [gbvsb(lpu_preds[i], config.M, config.N) for i in val_idx]
        )
        fwd_v = scores_v < config.th
        hit_v = np.where(fwd_v, hpu_hit_all[val_idx], lpu_hit_all[val_idx])
        report.validate_forwarded_fraction = float(fwd_v.mean())
        report.validate_cascade_error = float(1.0 - hit_v.mean())
        report.validate_hpu_error = float(1.0 - hpu_hit_all[val_idx].mean())
        report.overfit_flag = (
            report.validate_cascade_error
            > report.validate_hpu_error + tolerance + slack + 1e-12
        )
    return config, report
