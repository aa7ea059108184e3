"""Heterogeneous treatment effect network.

Two decoupled sigmoid towers sit on the disentangled representations: the
base tower estimates the no-intervention click probability from u0, the
treatment tower estimates the intervened probability from ut, with every
hidden layer modulated by a treatment-aware gate 2*sigmoid(W e_t + b). An
intensity head (behind stop-gradient) imputes the dose a unit would have
received; a ReLU uplift head outputs the nonnegative per-unit sensitivity.
Counterfactual estimators bridge the two towers in logit space by shifting
with t_hat * eta_hat, and the joint loss combines factual cross-entropies,
the intensity regression, the counterfactual MSE terms and the expert
orthogonality penalty.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import PROB_EPS
from .config import AblationConfig, ExperimentConfig, LossWeights, resolve_seed
from .datagen import Dataset, dataset_arrays
from .dcr import DcrParams, dcr_forward, init_dcr, orth_penalty
from .errors import ConfigError, NumericError, UsageError

TREAT_ENC_DIM = 2        # normalized intensity and its square
UPLIFT_HEAD_INIT = 0.02  # initial uniform eta_hat, calibrated downstream by the X losses


@dataclass
class HteParams:
    """Towers, gates and heads; t bounds are fixed from the treated training
    split before any optimization happens."""

    base_tower: list
    treat_tower: list | None      # None when the treatment tower is ablated
    ta_gates: list                # one gate per treatment-tower hidden layer
    intensity_head: list
    uplift_head: list
    t_min: float
    t_max: float

    def __post_init__(self) -> None:
        if not (0.0 < self.t_min < self.t_max):
            raise ConfigError(f"need 0 < t_min < t_max, got [{self.t_min}, {self.t_max}]")
        if self.treat_tower is not None and len(self.ta_gates) != len(self.treat_tower) - 1:
            raise ConfigError("one TA-gate per treatment-tower hidden layer required")

    def parameters(self) -> list[ad.ParamTensor]:
        out = list(ad.mlp_params(self.base_tower))
        if self.treat_tower is not None:
            out.extend(ad.mlp_params(self.treat_tower))
            out.extend(ad.mlp_params(self.ta_gates))
        out.extend(ad.mlp_params(self.intensity_head))
        out.extend(ad.mlp_params(self.uplift_head))
        return out


@dataclass
class UniMvtModel:
    cfg: ExperimentConfig
    dcr: DcrParams
    hte: HteParams
    input_dim: int

    def parameters(self) -> list[ad.ParamTensor]:
        return self.dcr.parameters() + self.hte.parameters()


@dataclass
class Prediction:
    """Per-sample outputs; tau_hat is exactly (q or t_hat) * eta_hat."""

    p0_hat: float
    pt_hat: float
    t_hat: float
    eta_hat: float
    tau_hat: float
    extrapolated: bool = False


def build_model(cfg: ExperimentConfig, input_dim: int, t_min: float, t_max: float,
                seed: int = 0) -> UniMvtModel:
    rng = np.random.default_rng(seed)
    dcr_params = init_dcr(rng, input_dim, replace(cfg.dcr, enabled=cfg.dcr_enabled()))
    rep = dcr_params.output_dim
    tower_dims = (rep, *cfg.net.tower_hidden, 1)
    base_tower = ad.init_mlp(rng, "base_tower", tower_dims, out_activation="sigmoid")
    if cfg.ablate.treat_tower:
        treat_tower, ta_gates = None, []
    else:
        treat_tower = ad.init_mlp(rng, "treat_tower", tower_dims, out_activation="sigmoid")
        ta_gates = [
            ad.Layer(
                ad.ParamTensor(f"ta_gate{i}.W", ad.glorot_uniform(rng, TREAT_ENC_DIM, width)),
                ad.ParamTensor(f"ta_gate{i}.b", np.zeros(width)),
            )
            for i, width in enumerate(cfg.net.tower_hidden)
        ]
    head_dims = (rep, cfg.net.head_hidden, 1)
    intensity_head = ad.init_mlp(rng, "intensity_head", head_dims)
    uplift_head = ad.init_mlp(rng, "uplift_head", head_dims)
    # zero output weights with a small positive bias start the ReLU head alive
    # and uniform; a symmetric random start risks dying for good while the base
    # tower is still miscalibrated early in training
    uplift_head[-1].W.values[:] = 0.0
    uplift_head[-1].b.values[:] = UPLIFT_HEAD_INIT
    hte = HteParams(base_tower, treat_tower, ta_gates, intensity_head, uplift_head,
                    float(t_min), float(t_max))
    return UniMvtModel(cfg=cfg, dcr=dcr_params, hte=hte, input_dim=input_dim)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def treatment_encoding(t_raw: ad.Node, t_min: float, t_max: float) -> ad.Node:
    """e_t: intensity min-max normalized by the model's t bounds, plus its square."""
    tn = ad.scale(ad.add(t_raw, -t_min), 1.0 / (t_max - t_min))
    return ad.concat([tn, ad.square(tn)], axis=1)


def ta_gate(gate: ad.Layer, e_t: ad.Node, h: ad.Node) -> ad.Node:
    """Scale hidden activations by a = 2*sigmoid(W e_t + b), elementwise in (0, 2)."""
    tape = h.tape
    a = ad.scale(ad.sigmoid(ad.affine(e_t, tape.param(gate.W), tape.param(gate.b))), 2.0)
    return ad.mul(a, h)


def treat_tower_forward(hte: HteParams, ut: ad.Node, e_t: ad.Node) -> ad.Node:
    """Treatment tower with a TA-gate after every hidden layer (never the output)."""
    tape = ut.tape
    h = ut
    for i, layer in enumerate(hte.treat_tower[:-1]):
        h = ad.affine(h, tape.param(layer.W), tape.param(layer.b))
        h = ad.relu(h)
        h = ta_gate(hte.ta_gates[i], e_t, h)
    last = hte.treat_tower[-1]
    return ad.sigmoid(ad.affine(h, tape.param(last.W), tape.param(last.b)))


def intensity_head_forward(hte: HteParams, ut: ad.Node) -> ad.Node:
    """t_hat = sigmoid(MLP(SG(ut))) scaled into (t_min, t_max); no gradient
    reaches the representation layer from this head."""
    z = ad.mlp_forward(hte.intensity_head, ad.stop_gradient(ut))
    return ad.add(ad.scale(ad.sigmoid(z), hte.t_max - hte.t_min), hte.t_min)


def uplift_head_forward(hte: HteParams, ut: ad.Node) -> ad.Node:
    """eta_hat = ReLU(MLP(ut)) >= 0; nonnegativity is structural."""
    return ad.relu(ad.mlp_forward(hte.uplift_head, ut))


# counterfactual estimators in plain numpy (inference path); the tape route in
# joint_loss applies the same formulas with autodiff primitives

def logit_np(p):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return np.log(p) - np.log1p(-p)


def counterfactual_treat(p0_hat, t_hat, eta_hat):
    """Treated probability imputed from the base estimate: sigmoid(logit(p0) + t*eta)."""
    return expit(logit_np(p0_hat) + np.asarray(t_hat) * np.asarray(eta_hat))


def counterfactual_base(pt_hat, t_hat, eta_hat):
    """Base probability reconstructed from the treated estimate: sigmoid(logit(pt) - t*eta)."""
    return expit(logit_np(pt_hat) - np.asarray(t_hat) * np.asarray(eta_hat))


# ---------------------------------------------------------------------------
# joint loss
# ---------------------------------------------------------------------------

LOSS_COMPONENTS = ("l_base", "l_treat", "l_t", "l_x", "r_orth")


def joint_loss_arrays(X, w, t, y, dcr_params: DcrParams, hte: HteParams,
                      weights: LossWeights, tape: ad.Tape):
    """Array-level joint loss; returns (total node, unweighted component sums)."""
    n = X.shape[0]
    if n == 0:
        raise UsageError("joint_loss needs a nonempty batch")
    w_col = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    y_col = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    t_col = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    ctrl_mask = 1.0 - w_col

    x_node = tape.constant(np.asarray(X, dtype=np.float64))
    rep = dcr_forward(dcr_params, x_node, tape)
    p0 = ad.mlp_forward(hte.base_tower, rep.u0)
    t_hat = intensity_head_forward(hte, rep.ut)
    eta = uplift_head_forward(hte, rep.ut)
    tau = ad.mul(t_hat, eta)

    # observed dose drives the gate on treated rows; the imputed dose on controls
    t_mix = ad.add(ad.mul(ctrl_mask, t_hat), t_col)
    if hte.treat_tower is not None:
        pt = treat_tower_forward(hte, rep.ut, treatment_encoding(t_mix, hte.t_min, hte.t_max))
    else:
        pt = ad.sigmoid(ad.add(ad.logit(p0), tau))

    components = dict.fromkeys(LOSS_COMPONENTS, 0.0)
    total = None

    def accumulate(name, node, lam):
        nonlocal total
        components[name] = float(node.value)
        weighted = ad.scale(node, lam)
        total = weighted if total is None else ad.add(total, weighted)

    if weights.lambda_base > 0:
        accumulate("l_base", ad.sum_all(ad.mul(ctrl_mask, ad.binary_cross_entropy(y_col, p0))),
                   weights.lambda_base)
    if weights.lambda_treat > 0 and hte.treat_tower is not None:
        accumulate("l_treat", ad.sum_all(ad.mul(w_col, ad.binary_cross_entropy(y_col, pt))),
                   weights.lambda_treat)
    if weights.lambda_t > 0:
        err = ad.sub(t_col, t_hat)
        per_row = ad.add(ad.scale(ad.square(err), weights.l2),
                         ad.scale(ad.absolute(err), weights.l1))
        accumulate("l_t", ad.sum_all(ad.mul(w_col, per_row)), weights.lambda_t)
    if weights.lambda_x > 0:
        p_treat_cf = ad.sigmoid(ad.add(ad.logit(p0), tau))
        p_base_cf = ad.sigmoid(ad.sub(ad.logit(pt), tau))
        x_treat = ad.sum_all(ad.mul(w_col, ad.square(ad.sub(y_col, p_treat_cf))))
        x_base = ad.sum_all(ad.mul(ctrl_mask, ad.square(ad.sub(y_col, p_base_cf))))
        accumulate("l_x", ad.add(x_treat, x_base), weights.lambda_x)
    if weights.lambda_o > 0 and dcr_params.enabled:
        accumulate("r_orth", orth_penalty(dcr_params, tape), weights.lambda_o)

    if total is None:
        total = tape.constant(0.0)
    return total, components


def joint_loss(batch, dcr_params: DcrParams, hte: HteParams,
               weights: LossWeights, tape: ad.Tape):
    """Joint loss over a batch of samples: lambda-weighted sum of the factual
    cross-entropies, intensity regression, counterfactual MSE and the
    orthogonality penalty. Returns (total node, per-term unweighted sums)."""
    samples = batch.samples if isinstance(batch, Dataset) else list(batch)
    if not samples:
        raise UsageError("joint_loss needs a nonempty batch")
    X, w, t, y, _, _ = dataset_arrays(samples)
    return joint_loss_arrays(X, w, t, y, dcr_params, hte, weights, tape)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(dataset: Dataset, cfg: ExperimentConfig):
    """Train on one dataset; returns (model, per-epoch history of loss components).

    Deterministic in (cfg, seed): parameter init, batch shuffling and every
    update derive from one seeded generator.
    """
    X, w, t, y, _, _ = dataset_arrays(dataset)
    if X.shape[0] == 0:
        raise UsageError("training needs a nonempty dataset")
    treated = w == 1
    if not treated.any():
        raise ConfigError("training data has no treated rows; t bounds undefined")
    t_min, t_max = float(t[treated].min()), float(t[treated].max())

    seed = resolve_seed(cfg)
    model = build_model(cfg, X.shape[1], t_min, t_max, seed=seed)
    weights = replace(cfg.loss)
    if cfg.ablate.xnet:
        weights = replace(weights, lambda_x=0.0)
    weights.validate()

    params = model.parameters()
    state = ad.OptimizerState.for_params(params, lr=cfg.train.lr)
    rng = np.random.default_rng(seed + 1)  # shuffle stream separate from init
    n = X.shape[0]
    history = []
    for epoch in range(cfg.train.epochs):
        perm = rng.permutation(n)
        sums = dict.fromkeys(LOSS_COMPONENTS, 0.0)
        total_sum = 0.0
        n_batches = 0
        for start in range(0, n, cfg.train.batch):
            idx = perm[start : start + cfg.train.batch]
            tape = ad.Tape()
            total, comps = joint_loss_arrays(
                X[idx], w[idx], t[idx], y[idx], model.dcr, model.hte, weights, tape
            )
            if not np.isfinite(total.value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {start // cfg.train.batch}"
                )
            ad.backward(tape)
            ad.optimizer_step(params, state)
            for k in LOSS_COMPONENTS:
                sums[k] += comps[k]
            total_sum += float(total.value)
            n_batches += 1
        record = {"epoch": epoch, "total": total_sum / n}
        for k in LOSS_COMPONENTS:
            record[k] = sums[k] / (n_batches if k == "r_orth" else n)
        history.append(record)
    return model, history


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def predict_batch(model: UniMvtModel, X: np.ndarray, q=None) -> dict:
    """Vectorized prediction. When q (scalar or per-row array) is given, the
    treated probability and tau_hat are evaluated at that intensity instead of
    the imputed t_hat; values outside [t_min, t_max] set the extrapolated flag.

    The uplift head learns a per-unit logit shift (that is how the
    counterfactual losses calibrate it); the reported unit uplift eta_hat is
    the implied click-probability gain per unit of intensity, read off the
    counterfactual at the imputed dose:

        eta_hat = (sigmoid(logit(p0_hat) + t_hat * head) - p0_hat) / t_hat

    which puts it in the same units as the ground-truth sensitivity and the
    meta-learner baselines. The raw head output is returned as eta_head.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    hte = model.hte
    tape = ad.Tape()
    rep = dcr_forward(model.dcr, tape.constant(X), tape)
    p0 = ad.mlp_forward(hte.base_tower, rep.u0).value.reshape(-1)
    t_hat = intensity_head_forward(hte, rep.ut).value.reshape(-1)
    eta_head = uplift_head_forward(hte, rep.ut).value.reshape(-1)

    def clip(p):
        return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)

    p0 = clip(p0)
    eta = np.maximum((counterfactual_treat(p0, t_hat, eta_head) - p0) / t_hat, 0.0)

    if q is None:
        t_eff = t_hat
        extrapolated = np.zeros(n, dtype=bool)
    else:
        t_eff = np.broadcast_to(np.asarray(q, dtype=np.float64), (n,)).copy()
        extrapolated = (t_eff < hte.t_min) | (t_eff > hte.t_max)
    tau = t_eff * eta

    if hte.treat_tower is not None:
        e_t = treatment_encoding(tape.constant(t_eff.reshape(-1, 1)), hte.t_min, hte.t_max)
        pt = treat_tower_forward(hte, rep.ut, e_t).value.reshape(-1)
    else:
        pt = counterfactual_treat(p0, t_eff, eta_head)

    return {
        "p0_hat": p0,
        "pt_hat": clip(pt),
        "t_hat": t_hat,
        "eta_hat": eta,
        "eta_head": eta_head,
        "tau_hat": tau,
        "extrapolated": extrapolated,
    }


def predict(model: UniMvtModel, x, q: float | None = None) -> Prediction:
    out = predict_batch(model, np.atleast_2d(x), q=q)
    return Prediction(
        p0_hat=float(out["p0_hat"][0]),
        pt_hat=float(out["pt_hat"][0]),
        t_hat=float(out["t_hat"][0]),
        eta_hat=float(out["eta_hat"][0]),
        tau_hat=float(out["tau_hat"][0]),
        extrapolated=bool(out["extrapolated"][0]),
    )


def base_ctr_scores(model: UniMvtModel, X) -> np.ndarray:
    return predict_batch(model, X)["p0_hat"]


def unit_uplift_scores(model: UniMvtModel, X) -> np.ndarray:
    return predict_batch(model, X)["eta_hat"]


def observed_outcome_prob(model: UniMvtModel, X, w, t) -> np.ndarray:
    """Probability of the observed regime: p0 for control rows, pt at the
    observed dose for treated rows (calibration diagnostics)."""
    out = predict_batch(model, X, q=np.asarray(t, dtype=np.float64))
    return np.where(np.asarray(w) == 1, out["pt_hat"], out["p0_hat"])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _param_line(p: ad.ParamTensor) -> str:
    dims = " ".join(str(d) for d in p.values.shape)
    vals = " ".join(repr(float(v)) for v in p.values.reshape(-1))
    return f"param.{p.name}={p.values.ndim} {dims} {vals}"


def save_model(model: UniMvtModel, path) -> None:
    cfg = model.cfg
    lines = [
        "kind=unimvt",
        f"input_dim={model.input_dim}",
        f"t_min={model.hte.t_min!r}",
        f"t_max={model.hte.t_max!r}",
        f"dcr.experts_per_group={cfg.dcr.experts_per_group}",
        f"dcr.hidden={cfg.dcr.hidden}",
        f"dcr.out_dim={cfg.dcr.out_dim}",
        f"dcr.enabled={cfg.dcr.enabled}",
        f"net.tower_hidden={','.join(str(v) for v in cfg.net.tower_hidden)}",
        f"net.head_hidden={cfg.net.head_hidden}",
        f"ablate.dcr={cfg.ablate.dcr}",
        f"ablate.xnet={cfg.ablate.xnet}",
        f"ablate.treat_tower={cfg.ablate.treat_tower}",
    ]
    lines.extend(_param_line(p) for p in model.parameters())
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_kv(path) -> dict:
    out = {}
    for line in open(path):
        line = line.rstrip("\n")
        if not line:
            continue
        key, _, value = line.partition("=")
        out[key] = value
    return out


def _restore_params(kv: dict, params) -> None:
    for p in params:
        raw = kv.get(f"param.{p.name}")
        if raw is None:
            raise ConfigError(f"model file is missing parameter {p.name!r}")
        fields = raw.split()
        ndim = int(fields[0])
        shape = tuple(int(v) for v in fields[1 : 1 + ndim])
        vals = np.array([float(v) for v in fields[1 + ndim :]])
        if vals.size != int(np.prod(shape)):
            raise ConfigError(f"parameter {p.name!r} has wrong element count")
        p.values[...] = vals.reshape(shape)


def load_model(path) -> UniMvtModel:
    kv = _parse_kv(path)
    if kv.get("kind") != "unimvt":
        raise ConfigError(f"not a unimvt model file: kind={kv.get('kind')!r}")
    from .config import apply_overrides, default_config

    cfg = default_config()
    apply_overrides(cfg, {k: kv[k] for k in (
        "dcr.experts_per_group", "dcr.hidden", "dcr.out_dim", "dcr.enabled",
        "net.tower_hidden", "net.head_hidden",
        "ablate.dcr", "ablate.xnet", "ablate.treat_tower",
    )})
    model = build_model(cfg, int(kv["input_dim"]), float(kv["t_min"]), float(kv["t_max"]))
    _restore_params(kv, model.parameters())
    return model
