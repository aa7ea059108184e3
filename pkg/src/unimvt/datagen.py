"""Synthetic coupon benchmarks with known ground truth.

Three presets (syn1/syn2/syn3) mimic a promotional environment: correlated
8-dim covariates, a logistic base click probability, a logistic per-unit
sensitivity, and a multimodal coupon-intensity mixture whose mode choice is
confounded by the same score that drives treatment propensity. The test
split is always an RCT. Generation is fully determined by the spec seed;
calibration intercepts are found by bisection and recorded in a metadata
sidecar next to each CSV.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import cholesky, toeplitz
from scipy.special import expit
from scipy.stats import norm

from .errors import ConfigError, DataFormatError

N_FEATURES = 8
FEATURE_CORR = 0.5          # Toeplitz covariance: Sigma_ij = FEATURE_CORR ** |i-j|
CLICK_PROB_CAP = 0.99       # keeps logits finite
MEAN_UPLIFT_TARGET = 0.05   # mean uplift at the mean treated dose
JITTER_TRUNC = 3.0          # dose jitter truncated to +-3 sd
CTR_SCORE_SD = 1.0          # sd of the base-CTR logit score a.x
SENS_SCORE_SD = 2.0         # sd of the sensitivity score c.x; wide spread keeps
                            # per-unit uplift strongly heterogeneous across users


@dataclass(eq=False)
class Sample:
    """One observation: covariates, treatment flag/intensity, click label,
    plus the latent ground truth when the row is synthetic."""

    x: np.ndarray
    w: int
    t: float
    y: int
    truth_p0: float | None = None
    truth_eta: float | None = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.w == 0 and self.t != 0.0:
            raise DataFormatError("control sample must have zero intensity")
        if self.w == 1 and self.t <= 0.0:
            raise DataFormatError("treated sample must have positive intensity")
        if (self.truth_p0 is None) != (self.truth_eta is None):
            raise DataFormatError("truth columns must be present together")


@dataclass(eq=False)
class Dataset:
    samples: list[Sample]
    split: str = "train"      # train | test
    rct: bool = False
    meta: dict | None = None  # generator sidecar content, when known

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise ConfigError(f"unknown split {self.split!r}")
        if self.split == "test" and not self.rct:
            raise ConfigError("test split must be RCT")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def has_truth(self) -> bool:
        return bool(self.samples) and self.samples[0].truth_p0 is not None


def dataset_arrays(ds: Dataset | Sequence[Sample]):
    """Stack samples into (X, w, t, y, truth_p0, truth_eta) float arrays.

    Truth arrays are None when the dataset carries no ground truth.
    """
    samples = ds.samples if isinstance(ds, Dataset) else list(ds)
    X = np.stack([s.x for s in samples])
    w = np.array([s.w for s in samples], dtype=np.int64)
    t = np.array([s.t for s in samples], dtype=np.float64)
    y = np.array([s.y for s in samples], dtype=np.int64)
    if samples and samples[0].truth_p0 is not None:
        p0 = np.array([s.truth_p0 for s in samples], dtype=np.float64)
        eta = np.array([s.truth_eta for s in samples], dtype=np.float64)
    else:
        p0 = eta = None
    return X, w, t, y, p0, eta


@dataclass(frozen=True)
class SynSpec:
    """Recipe for one synthetic benchmark."""

    name: str
    n_train: int
    n_test: int
    coupon_ratio: float
    modes: tuple[float, ...]
    mode_weights: tuple[float, ...]
    mode_jitter_sd: float
    target_avg_ctr: float
    confounding_strength: float
    seed: int

    def validate(self) -> None:
        if not self.modes:
            raise ConfigError("modes must be nonempty")
        if len(self.mode_weights) != len(self.modes):
            raise ConfigError("one weight per mode required")
        if any(m <= 0 for m in self.modes):
            raise ConfigError("modes must be positive")
        if any(w < 0 for w in self.mode_weights) or abs(sum(self.mode_weights) - 1.0) > 1e-9:
            raise ConfigError("mode weights must be nonnegative and sum to 1")
        if not (0.0 < self.coupon_ratio < 1.0):
            raise ConfigError("coupon_ratio must lie in (0, 1)")
        if not (0.0 < self.target_avg_ctr < 1.0):
            raise ConfigError("target_avg_ctr must lie in (0, 1)")
        if self.mode_jitter_sd <= 0:
            raise ConfigError("mode_jitter_sd must be positive")
        if min(self.modes) - JITTER_TRUNC * self.mode_jitter_sd <= 0:
            raise ConfigError("jitter too wide: doses could reach zero")
        if self.confounding_strength < 0:
            raise ConfigError("confounding_strength must be nonnegative")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ConfigError("split sizes must be positive")


PRESETS = {
    "syn1": SynSpec("syn1", 80_000, 8_000, 0.3478, (2.5,), (1.0,), 0.1, 0.208, 1.0, 101),
    "syn2": SynSpec("syn2", 80_000, 8_000, 0.3517, (1.5,), (1.0,), 0.1, 0.183, 1.0, 102),
    "syn3": SynSpec(
        "syn3", 80_000, 8_000, 0.3523, (1.0, 1.6, 2.4, 4.0), (0.25, 0.25, 0.25, 0.25),
        0.1, 0.209, 1.0, 103,
    ),
}


@dataclass
class GeneratorCoefficients:
    """Frozen draw of the latent functions behind one benchmark."""

    coef_ctr: np.ndarray        # a: logistic base-CTR direction
    coef_sensitivity: np.ndarray  # c: per-unit-uplift direction
    coef_propensity: np.ndarray   # d: treatment-assignment direction
    intercept_ctr: float = 0.0
    intercept_propensity: float = 0.0
    eta_max: float = 0.0

    def base_ctr(self, X: np.ndarray) -> np.ndarray:
        return expit(X @ self.coef_ctr + self.intercept_ctr)

    def sensitivity(self, X: np.ndarray) -> np.ndarray:
        return self.eta_max * expit(X @ self.coef_sensitivity)

    def click_prob(self, X: np.ndarray, t: np.ndarray) -> np.ndarray:
        return np.minimum(self.base_ctr(X) + self.sensitivity(X) * t, CLICK_PROB_CAP)


def _bisect(f, lo: float = -20.0, hi: float = 20.0, tol: float = 1e-12, iters: int = 200) -> float:
    """Root of a monotone-increasing f on [lo, hi]."""
    flo, fhi = f(lo), f(hi)
    if flo > 0 or fhi < 0:
        raise ConfigError("calibration target cannot be bracketed")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def _scaled_direction(rng: np.random.Generator, L: np.ndarray, sd: float = 1.0) -> np.ndarray:
    """Random direction scaled so the projected covariate score has the given sd."""
    v = rng.standard_normal(N_FEATURES)
    return sd * v / np.linalg.norm(L.T @ v)


def _draw_doses(
    rng: np.random.Generator,
    spec: SynSpec,
    score: np.ndarray,
    confounded: bool,
) -> np.ndarray:
    """Dose per treated row: confounded (or uniform) mode choice plus truncated jitter."""
    n = score.shape[0]
    modes = np.asarray(spec.modes)
    logits = np.log(np.asarray(spec.mode_weights) + 1e-300)[None, :].repeat(n, axis=0)
    if confounded and len(modes) > 1 and spec.confounding_strength > 0:
        mode_rank = (modes - modes.mean()) / modes.std()
        logits = logits + spec.confounding_strength * score[:, None] * mode_rank[None, :]
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    pick = np.minimum((rng.uniform(size=(n, 1)) > cdf).sum(axis=1), len(modes) - 1)
    # inverse-CDF truncated normal jitter: no rejection loop, one uniform per row
    lo, hi = norm.cdf(-JITTER_TRUNC), norm.cdf(JITTER_TRUNC)
    jitter = norm.ppf(lo + rng.uniform(size=n) * (hi - lo)) * spec.mode_jitter_sd
    return modes[pick] + jitter


def generate(spec: SynSpec) -> tuple[Dataset, Dataset]:
    """Generate the (train, test) pair for one benchmark spec.

    Draw order is fixed so a seed fully determines both splits. The latent
    functions are calibrated once against the train split (propensity
    intercept to the coupon ratio, sensitivity scale to the mean-uplift
    target, CTR intercept to the observed-CTR target) and then reused
    verbatim for the RCT test split.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cov = toeplitz(FEATURE_CORR ** np.arange(N_FEATURES))
    L = cholesky(cov, lower=True)

    coefs = GeneratorCoefficients(
        coef_ctr=_scaled_direction(rng, L, CTR_SCORE_SD),
        coef_sensitivity=_scaled_direction(rng, L, SENS_SCORE_SD),
        coef_propensity=_scaled_direction(rng, L),
    )

    X_train = rng.standard_normal((spec.n_train, N_FEATURES)) @ L.T
    score = X_train @ coefs.coef_propensity

    coefs.intercept_propensity = _bisect(
        lambda e: expit(score + e).mean() - spec.coupon_ratio
    )
    w_train = (rng.uniform(size=spec.n_train) < expit(score + coefs.intercept_propensity)).astype(int)

    t_train = np.zeros(spec.n_train)
    treated = w_train == 1
    t_train[treated] = _draw_doses(rng, spec, score[treated], confounded=True)

    mean_sens = expit(X_train @ coefs.coef_sensitivity).mean()
    coefs.eta_max = MEAN_UPLIFT_TARGET / (mean_sens * t_train[treated].mean())

    eta_t = coefs.eta_max * expit(X_train @ coefs.coef_sensitivity) * t_train
    coefs.intercept_ctr = _bisect(
        lambda b: np.minimum(expit(X_train @ coefs.coef_ctr + b) + eta_t, CLICK_PROB_CAP).mean()
        - spec.target_avg_ctr
    )
    y_train = (rng.uniform(size=spec.n_train) < coefs.click_prob(X_train, t_train)).astype(int)

    X_test = rng.standard_normal((spec.n_test, N_FEATURES)) @ L.T
    w_test = (rng.uniform(size=spec.n_test) < spec.coupon_ratio).astype(int)
    t_test = np.zeros(spec.n_test)
    treated_test = w_test == 1
    t_test[treated_test] = _draw_doses(
        rng, spec, np.zeros(int(treated_test.sum())), confounded=False
    )
    y_test = (rng.uniform(size=spec.n_test) < coefs.click_prob(X_test, t_test)).astype(int)

    def build(X, w, t, y, split, rct):
        p0 = coefs.base_ctr(X)
        eta = coefs.sensitivity(X)
        samples = [
            Sample(X[i], int(w[i]), float(t[i]), int(y[i]), float(p0[i]), float(eta[i]))
            for i in range(X.shape[0])
        ]
        return Dataset(samples, split=split, rct=rct, meta=_metadata(spec, coefs, split, rct))

    train = build(X_train, w_train, t_train, y_train, "train", rct=False)
    test = build(X_test, w_test, t_test, y_test, "test", rct=True)
    return train, test


def _metadata(spec: SynSpec, coefs: GeneratorCoefficients, split: str, rct: bool) -> dict:
    return {
        "name": spec.name,
        "split": split,
        "rct": rct,
        "seed": spec.seed,
        "coupon_ratio": spec.coupon_ratio,
        "target_avg_ctr": spec.target_avg_ctr,
        "modes": list(spec.modes),
        "mode_weights": list(spec.mode_weights),
        "mode_jitter_sd": spec.mode_jitter_sd,
        "confounding_strength": spec.confounding_strength,
        "coef_ctr": coefs.coef_ctr.tolist(),
        "coef_sensitivity": coefs.coef_sensitivity.tolist(),
        "coef_propensity": coefs.coef_propensity.tolist(),
        "intercept_ctr": coefs.intercept_ctr,
        "intercept_propensity": coefs.intercept_propensity,
        "eta_max": coefs.eta_max,
    }


# ---------------------------------------------------------------------------
# CSV and metadata IO
# ---------------------------------------------------------------------------

_BASE_COLUMNS = [f"x{i}" for i in range(1, N_FEATURES + 1)] + ["w", "t", "y"]
_TRUTH_COLUMNS = ["truth_p0", "truth_eta"]


def meta_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".meta")


def save_csv(dataset: Dataset, path, metadata: dict | None = None) -> None:
    """Write a dataset with full-precision decimals; metadata goes to a
    key=value sidecar with the same basename and a .meta suffix."""
    path = Path(path)
    cols = _BASE_COLUMNS + (_TRUTH_COLUMNS if dataset.has_truth else [])
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for s in dataset.samples:
            fields = [repr(float(v)) for v in s.x]
            fields += [str(s.w), repr(float(s.t)), str(s.y)]
            if dataset.has_truth:
                fields += [repr(float(s.truth_p0)), repr(float(s.truth_eta))]
            fh.write(",".join(fields) + "\n")
    meta = dict(metadata if metadata is not None else (dataset.meta or {}))
    meta.setdefault("split", dataset.split)
    meta.setdefault("rct", dataset.rct)
    save_meta(meta_path(path), meta)


def save_meta(path, meta: dict) -> None:
    with open(Path(path), "w", newline="\n") as fh:
        for key in sorted(meta):
            value = meta[key]
            if isinstance(value, (list, tuple, np.ndarray)):
                value = " ".join(repr(float(v)) for v in value)
            fh.write(f"{key}={value}\n")


def load_meta(path) -> dict:
    meta = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        meta[key] = value
    return meta


def load_csv(path, split: str | None = None, rct: bool | None = None) -> Dataset:
    """Read a dataset CSV; split/rct come from the sidecar unless overridden."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[: len(_BASE_COLUMNS)] != _BASE_COLUMNS:
        raise DataFormatError(f"{path}: unexpected header {lines[0]!r}")
    extra = header[len(_BASE_COLUMNS):]
    if extra not in ([], _TRUTH_COLUMNS):
        raise DataFormatError(f"{path}: unexpected trailing columns {extra}")
    has_truth = extra == _TRUTH_COLUMNS

    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != len(header):
            raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields")
        try:
            x = np.array([float(v) for v in fields[:N_FEATURES]])
            w = int(fields[N_FEATURES])
            t = float(fields[N_FEATURES + 1])
            y = int(fields[N_FEATURES + 2])
            if w not in (0, 1) or y not in (0, 1):
                raise ValueError("w and y must be binary")
            truth_p0 = float(fields[N_FEATURES + 3]) if has_truth else None
            truth_eta = float(fields[N_FEATURES + 4]) if has_truth else None
            samples.append(Sample(x, w, t, y, truth_p0, truth_eta))
        except (ValueError, DataFormatError) as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc

    if split is None or rct is None:
        mp = meta_path(path)
        meta = load_meta(mp) if mp.exists() else {}
        if split is None:
            split = meta.get("split", "train")
        if rct is None:
            rct = meta.get("rct", "False") in ("True", "true", "1")
    return Dataset(samples, split=split, rct=rct)
