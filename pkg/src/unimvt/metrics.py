"""Evaluation suite: AUC, LogLoss, calibration ratios, and the cumulative-slope
uplift metrics for multi-valued treatments.

The cumulative-slope curve sorts samples by predicted unit uplift (descending,
stable ties), then measures, for each prefix of the ranking, the OLS slope of
outcome on dose within that prefix. Area under phi -> slope(phi) * (phi * n)
gives the rank-ordered sensitivity score; subtracting the global-slope baseline
gives the gain over random targeting.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .datagen import Dataset, Sample, dataset_arrays
from .errors import ConfigError, MetricUndefinedError

PROB_EPS = 1e-7
DEFAULT_GRID = 100


def auc(labels, scores) -> float:
    """Probability that a random positive outranks a random negative; ties count 1/2."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks handle ties as 1/2
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(labels, probs) -> float:
    """Mean negative log-likelihood with probabilities clamped into (0, 1)."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())


def _dose_outcome(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, Dataset) or (samples and isinstance(samples[0], Sample)):
        _, _, t, y, _, _ = dataset_arrays(samples)
        return t, y.astype(np.float64)
    t, y = samples  # (t, y) array pair accepted for convenience
    return np.asarray(t, dtype=np.float64), np.asarray(y, dtype=np.float64)


def prefix_slope(t: np.ndarray, y: np.ndarray, phi: float) -> float | None:
    """OLS slope (with intercept) of y on t over the first ceil(phi*n) rows.

    Inputs must already be sorted by predicted uplift, descending. Returns
    None when the prefix has no dose variance.
    """
    n = t.shape[0]
    m = min(max(int(np.ceil(phi * n - 1e-12)), 1), n)
    tp, yp = t[:m], y[:m]
    var = ((tp - tp.mean()) ** 2).sum()
    if var <= 0.0:
        return None
    cov = ((tp - tp.mean()) * (yp - yp.mean())).sum()
    return float(cov / var)


def _stable_descending(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


@dataclass
class CumulativeSlopeCurve:
    """Prefix-slope curve on a k/K grid, with the trapezoid areas derived from it."""

    phis: np.ndarray            # defined grid points, strictly increasing
    betas: np.ndarray           # slope at each defined point
    beta_global: float
    n: int
    include_origin: bool        # anchor (0, 0) participates iff the first grid point is defined

    def _integrate(self, values: np.ndarray) -> float:
        phis = self.phis
        if self.include_origin:
            phis = np.concatenate([[0.0], phis])
            values = np.concatenate([[0.0], values])
        if phis.size < 2:
            return 0.0
        return float(np.trapezoid(values, phis))

    def auuc(self) -> float:
        return self._integrate(self.betas * self.phis * self.n)

    def baseline_area(self) -> float:
        return self._integrate(self.beta_global * self.phis * self.n)

    def qini(self) -> float:
        return self._integrate((self.betas - self.beta_global) * self.phis * self.n)

    def points(self):
        """(phi, beta, beta_global) rows for curve dumps."""
        return [(float(p), float(b), self.beta_global) for p, b in zip(self.phis, self.betas)]


def cumulative_slope_curve(scores, samples, k: int = DEFAULT_GRID) -> CumulativeSlopeCurve:
    """Build the curve: sort by score descending (stable), evaluate prefix slopes
    at phi = 1/K .. K/K, skipping prefixes without dose variance."""
    t, y = _dose_outcome(samples)
    n = t.shape[0]
    if n == 0:
        raise MetricUndefinedError("empty dataset")
    if k <= 0:
        raise ConfigError("grid size must be positive")
    order = _stable_descending(scores)
    ts, ys = t[order], y[order]

    global_slope = prefix_slope(ts, ys, 1.0)
    if global_slope is None:
        raise MetricUndefinedError("dataset has no dose variance (needs treated and control rows)")

    # prefix sums give every slope in one pass
    ct = np.cumsum(ts)
    cy = np.cumsum(ys)
    ctt = np.cumsum(ts * ts)
    cty = np.cumsum(ts * ys)
    phis, betas, defined_js = [], [], []
    for j in range(1, k + 1):
        m = (j * n + k - 1) // k  # integer ceil of j*n/k
        var = ctt[m - 1] - ct[m - 1] ** 2 / m
        if var <= 0.0:
            continue
        cov = cty[m - 1] - ct[m - 1] * cy[m - 1] / m
        phis.append(j / k)
        betas.append(cov / var)
        defined_js.append(j)
    if not phis:
        raise MetricUndefinedError("no prefix has dose variance")
    return CumulativeSlopeCurve(
        phis=np.array(phis),
        betas=np.array(betas),
        beta_global=float(global_slope),
        n=n,
        include_origin=defined_js[0] == 1,
    )


def cs_auuc(scores, samples, k: int = DEFAULT_GRID) -> float:
    return cumulative_slope_curve(scores, samples, k).auuc()


def cs_qini(scores, samples, k: int = DEFAULT_GRID) -> float:
    return cumulative_slope_curve(scores, samples, k).qini()


def pcoc(pred_probs, samples, edges: Sequence[float]) -> list[tuple[str, float, int]]:
    """Predicted-over-observed click ratio per intensity bin.

    Control rows (w == 0) form their own bin; treated rows are grouped into
    [edges[i], edges[i+1]) intervals. Bins without rows or without a positive
    observation are omitted.
    """
    if isinstance(samples, Dataset) or (samples and isinstance(samples[0], Sample)):
        _, w, t, y, _, _ = dataset_arrays(samples)
    else:
        w, t, y = samples
        w, t, y = np.asarray(w), np.asarray(t), np.asarray(y)
    p = np.asarray(pred_probs, dtype=np.float64)
    edges = sorted(float(e) for e in edges)
    out = []

    def emit(label, mask):
        count = int(mask.sum())
        if count == 0:
            return
        observed = float(y[mask].mean())
        if observed <= 0.0:
            return
        out.append((label, float(p[mask].mean()) / observed, count))

    emit("control", w == 0)
    for lo, hi in zip(edges, edges[1:]):
        emit(f"[{lo:g},{hi:g})", (w == 1) & (t >= lo) & (t < hi))
    return out


@dataclass
class MetricsReport:
    """Everything one evaluation run produces, serializable to JSON and CSV."""

    auc: float | None
    logloss: float | None
    cs_auuc: float
    cs_qini: float
    pcoc_bins: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    CSV_HEADER = "auc,logloss,cs_auuc,cs_qini"

    def to_json(self) -> str:
        payload = {
            "auc": self.auc,
            "logloss": self.logloss,
            "cs_auuc": self.cs_auuc,
            "cs_qini": self.cs_qini,
            "pcoc_bins": [
                {"bin": label, "ratio": ratio, "count": count}
                for label, ratio, count in self.pcoc_bins
            ],
            "warnings": self.warnings,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def to_csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return ",".join([fmt(self.auc), fmt(self.logloss), fmt(self.cs_auuc), fmt(self.cs_qini)])
