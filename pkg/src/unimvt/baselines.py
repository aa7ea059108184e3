"""S-Learner and T-Learner reference models for multi-valued treatments.

Both reuse the tower sizes and optimizer of the main model so comparisons
isolate architecture rather than capacity. Intensity enters as an extra
input feature, min-max normalized by the same treated-support bounds the
main model uses; unit uplift is read off by contrasting intensity 1 against
intensity 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig, resolve_seed
from .datagen import Dataset, dataset_arrays
from .errors import ConfigError, NumericError, UsageError


def _normalize_t(t, t_min: float, t_max: float):
    return (np.asarray(t, dtype=np.float64) - t_min) / (t_max - t_min)


def _mlp_predict(layers, inputs: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    return ad.mlp_forward(layers, inputs, tape).value.reshape(-1)


def _fit_binary_mlp(layers, inputs, labels, cfg: ExperimentConfig, rng) -> None:
    """Cross-entropy minimization with the shared Adam settings."""
    params = ad.mlp_params(layers)
    state = ad.OptimizerState.for_params(params, lr=cfg.train.lr)
    y_col = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    n = inputs.shape[0]
    for epoch in range(cfg.train.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.train.batch):
            idx = perm[start : start + cfg.train.batch]
            tape = ad.Tape()
            p = ad.mlp_forward(layers, inputs[idx], tape)
            total = ad.sum_all(ad.binary_cross_entropy(y_col[idx], p))
            if not np.isfinite(total.value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {start // cfg.train.batch}"
                )
            ad.backward(tape)
            ad.optimizer_step(params, state)


@dataclass
class SLearnerModel:
    """Single net over (x, normalized t); control rows enter with t = 0."""

    net: list
    t_min: float
    t_max: float

    def outcome_prob(self, X, t) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        tn = np.broadcast_to(_normalize_t(t, self.t_min, self.t_max), (X.shape[0],))
        return _mlp_predict(self.net, np.column_stack([X, tn]))

    def base_ctr(self, X) -> np.ndarray:
        return self.outcome_prob(X, 0.0)

    def unit_uplift_scores(self, X) -> np.ndarray:
        return self.outcome_prob(X, 1.0) - self.outcome_prob(X, 0.0)


@dataclass
class TLearnerModel:
    """Independent control net f_C(x) and treated net f_T(x, normalized t)."""

    control_net: list
    treated_net: list
    t_min: float
    t_max: float

    def base_ctr(self, X) -> np.ndarray:
        return _mlp_predict(self.control_net, np.atleast_2d(np.asarray(X, dtype=np.float64)))

    def treated_prob(self, X, t) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        tn = np.broadcast_to(_normalize_t(t, self.t_min, self.t_max), (X.shape[0],))
        return _mlp_predict(self.treated_net, np.column_stack([X, tn]))

    def outcome_prob(self, X, t) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64),
                            (np.atleast_2d(X).shape[0],))
        return np.where(t > 0, self.treated_prob(X, t), self.base_ctr(X))

    def unit_uplift_scores(self, X) -> np.ndarray:
        return self.treated_prob(X, 1.0) - self.base_ctr(X)


def _t_bounds(w, t) -> tuple[float, float]:
    treated = w == 1
    if treated.any():
        lo, hi = float(t[treated].min()), float(t[treated].max())
        if lo < hi:
            return lo, hi
        return lo - 0.5, lo + 0.5  # degenerate single-dose support
    return 0.0, 1.0  # all-control data: raw intensity passes through


def train_slearner(dataset: Dataset, cfg: ExperimentConfig) -> SLearnerModel:
    X, w, t, y, _, _ = dataset_arrays(dataset)
    if X.shape[0] == 0:
        raise UsageError("training needs a nonempty dataset")
    t_min, t_max = _t_bounds(w, t)
    seed = resolve_seed(cfg)
    rng = np.random.default_rng(seed)
    dims = (X.shape[1] + 1, *cfg.net.tower_hidden, 1)
    net = ad.init_mlp(rng, "slearner", dims, out_activation="sigmoid")
    inputs = np.column_stack([X, _normalize_t(t, t_min, t_max)])
    _fit_binary_mlp(net, inputs, y, cfg, rng)
    return SLearnerModel(net, t_min, t_max)


def train_tlearner(dataset: Dataset, cfg: ExperimentConfig) -> TLearnerModel:
    X, w, t, y, _, _ = dataset_arrays(dataset)
    ctrl, trt = w == 0, w == 1
    if not ctrl.any() or not trt.any():
        raise ConfigError("T-Learner needs both control and treated rows")
    t_min, t_max = _t_bounds(w, t)
    seed = resolve_seed(cfg)
    rng = np.random.default_rng(seed)
    control_net = ad.init_mlp(rng, "tlearner.control", (X.shape[1], *cfg.net.tower_hidden, 1),
                              out_activation="sigmoid")
    treated_net = ad.init_mlp(rng, "tlearner.treated", (X.shape[1] + 1, *cfg.net.tower_hidden, 1),
                              out_activation="sigmoid")
    _fit_binary_mlp(control_net, X[ctrl], y[ctrl], cfg, rng)
    treated_inputs = np.column_stack([X[trt], _normalize_t(t[trt], t_min, t_max)])
    _fit_binary_mlp(treated_net, treated_inputs, y[trt], cfg, rng)
    return TLearnerModel(control_net, treated_net, t_min, t_max)


def unit_uplift(model, x) -> float:
    """Per-unit uplift of one sample: S-Learner f(x,1)-f(x,0); T-Learner
    f_T(x,1)-f_C(x); the main model reports its uplift head directly."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if hasattr(model, "unit_uplift_scores"):
        return float(model.unit_uplift_scores(x)[0])
    from .htenet import UniMvtModel, unit_uplift_scores

    if isinstance(model, UniMvtModel):
        return float(unit_uplift_scores(model, x)[0])
    raise ConfigError(f"cannot compute unit uplift for {type(model).__name__}")


# ---------------------------------------------------------------------------
# serialization (same key=value format as the main model)
# ---------------------------------------------------------------------------

def _net_dims(layers) -> str:
    dims = [layers[0].W.shape[0]] + [l.W.shape[1] for l in layers]
    return ",".join(str(d) for d in dims)


def save_baseline(model, path) -> None:
    from .htenet import _param_line

    if isinstance(model, SLearnerModel):
        kind = "slearner"
        nets = {"slearner": model.net}
    elif isinstance(model, TLearnerModel):
        kind = "tlearner"
        nets = {"tlearner.control": model.control_net, "tlearner.treated": model.treated_net}
    else:
        raise ConfigError(f"not a baseline model: {type(model).__name__}")
    lines = [f"kind={kind}", f"t_min={model.t_min!r}", f"t_max={model.t_max!r}"]
    lines.extend(f"dims.{name}={_net_dims(layers)}" for name, layers in nets.items())
    for layers in nets.values():
        lines.extend(_param_line(p) for p in ad.mlp_params(layers))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_baseline(path):
    from .htenet import _parse_kv, _restore_params

    kv = _parse_kv(path)
    kind = kv.get("kind")
    rng = np.random.default_rng(0)

    def build(name):
        dims = tuple(int(v) for v in kv[f"dims.{name}"].split(","))
        return ad.init_mlp(rng, name, dims, out_activation="sigmoid")

    if kind == "slearner":
        net = build("slearner")
        _restore_params(kv, ad.mlp_params(net))
        return SLearnerModel(net, float(kv["t_min"]), float(kv["t_max"]))
    if kind == "tlearner":
        control, treated = build("tlearner.control"), build("tlearner.treated")
        _restore_params(kv, ad.mlp_params(control) + ad.mlp_params(treated))
        return TLearnerModel(control, treated, float(kv["t_min"]), float(kv["t_max"]))
    raise ConfigError(f"not a baseline model file: kind={kind!r}")
