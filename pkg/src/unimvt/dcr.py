"""Deconfounded causal representation layer.

Three expert groups encode the covariates: base experts (intrinsic
preference), shared experts (confounders common to both outcomes) and
treated experts (intervention sensitivity). Two softmax gates weight every
expert's output block before concatenation, producing one representation per
downstream task. Stop-gradient on the off-task group keeps the base loss
from training treated experts and vice versa, while the shared path stays
open in both directions. A Frobenius cross-product penalty pushes the three
groups' weight matrices toward mutually orthogonal subspaces.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


@dataclass
class DcrConfig:
    experts_per_group: int = 2
    hidden: int = 32
    out_dim: int = 16
    enabled: bool = True


@dataclass
class DcrParams:
    """Parameter bundle for the representation layer.

    When ``enabled`` is False (the degenerate ablation), only ``shared_mlp``
    is populated and both task representations collapse to its output.
    """

    enabled: bool
    input_dim: int
    base_experts: list = field(default_factory=list)
    shared_experts: list = field(default_factory=list)
    treated_experts: list = field(default_factory=list)
    gate0: list = field(default_factory=list)
    gate_t: list = field(default_factory=list)
    shared_mlp: list | None = None

    @property
    def expert_groups(self):
        return (self.base_experts, self.shared_experts, self.treated_experts)

    @property
    def output_dim(self) -> int:
        if not self.enabled:
            return self.shared_mlp[-1].W.shape[1]
        per_expert = self.base_experts[0][-1].W.shape[1]
        n_experts = sum(len(g) for g in self.expert_groups)
        return per_expert * n_experts

    def parameters(self) -> list[ad.ParamTensor]:
        out = []
        if not self.enabled:
            return ad.mlp_params(self.shared_mlp)
        for group in self.expert_groups:
            for expert in group:
                out.extend(ad.mlp_params(expert))
        out.extend(ad.mlp_params(self.gate0))
        out.extend(ad.mlp_params(self.gate_t))
        return out

    def expert_parameters(self, group: str) -> list[ad.ParamTensor]:
        groups = {"base": self.base_experts, "shared": self.shared_experts,
                  "treated": self.treated_experts}
        out = []
        for expert in groups[group]:
            out.extend(ad.mlp_params(expert))
        return out


@dataclass
class DcrOutput:
    u0: ad.Node
    ut: ad.Node
    expert_outputs: dict  # group -> list of output nodes, retained for tests


def init_dcr(rng: np.random.Generator, input_dim: int, cfg: DcrConfig) -> DcrParams:
    if not cfg.enabled:
        total = 3 * cfg.experts_per_group * cfg.out_dim
        # degenerate path keeps the downstream tower width unchanged
        shared = ad.init_mlp(rng, "dcr.shared_mlp", (input_dim, cfg.hidden, total))
        return DcrParams(enabled=False, input_dim=input_dim, shared_mlp=shared)
    dims = (input_dim, cfg.hidden, cfg.out_dim)
    params = DcrParams(enabled=True, input_dim=input_dim)
    for group, store in (("base", params.base_experts),
                         ("shared", params.shared_experts),
                         ("treated", params.treated_experts)):
        for j in range(cfg.experts_per_group):
            store.append(ad.init_mlp(rng, f"dcr.{group}{j}", dims))
    n_experts = 3 * cfg.experts_per_group
    params.gate0 = ad.init_mlp(rng, "dcr.gate0", (input_dim, n_experts))
    params.gate_t = ad.init_mlp(rng, "dcr.gate_t", (input_dim, n_experts))
    return params


def dcr_forward(params: DcrParams, x: ad.Node, tape: ad.Tape | None = None) -> DcrOutput:
    """Produce the per-task representations for a batch of embedded features.

    u0 weights CONCAT(base, shared, SG(treated)); ut weights
    CONCAT(SG(base), shared, treated). Gate weights are softmax outputs over
    expert slots, applied as per-expert scalars on each output block.
    """
    if not isinstance(x, ad.Node):
        if tape is None:
            raise ConfigError("dcr_forward needs a tape for plain array input")
        x = tape.constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if x.value.shape[1] != params.input_dim:
        raise ConfigError(
            f"dcr input width {x.value.shape[1]} does not match configured {params.input_dim}"
        )
    tape = x.tape

    if not params.enabled:
        shared_out = ad.mlp_forward(params.shared_mlp, x, tape)
        return DcrOutput(u0=shared_out, ut=shared_out, expert_outputs={"shared_mlp": [shared_out]})

    outputs = {
        "base": [ad.mlp_forward(e, x, tape) for e in params.base_experts],
        "shared": [ad.mlp_forward(e, x, tape) for e in params.shared_experts],
        "treated": [ad.mlp_forward(e, x, tape) for e in params.treated_experts],
    }
    g0 = ad.softmax(ad.mlp_forward(params.gate0, x, tape))
    gt = ad.softmax(ad.mlp_forward(params.gate_t, x, tape))

    def combine(gate, blocked_group):
        blocks, slot = [], 0
        for group in ("base", "shared", "treated"):
            for out in outputs[group]:
                h = ad.stop_gradient(out) if group == blocked_group else out
                blocks.append(ad.mul(ad.column(gate, slot), h))
                slot += 1
        return ad.concat(blocks, axis=1)

    return DcrOutput(
        u0=combine(g0, blocked_group="treated"),
        ut=combine(gt, blocked_group="base"),
        expert_outputs=outputs,
    )


def orth_penalty(params: DcrParams, tape: ad.Tape) -> ad.Node:
    """Sum over layers and cross-group pairs of ||W_i^T W_j||_F^2.

    Computed on weight matrices only (biases excluded). Experts within a
    group are concatenated column-wise per layer, so one matrix product per
    (group pair, layer) covers every cross-group expert pair: the Frobenius
    norm of the blocked product equals the sum over expert-pair blocks.
    """
    if not params.enabled:
        return tape.constant(0.0)
    groups = params.expert_groups
    n_layers = {len(e) for g in groups for e in g}
    if len(n_layers) != 1:
        raise ConfigError("expert groups must share layer count for the orthogonality penalty")
    depth = n_layers.pop()

    stacked = []  # one column-concatenated weight node per (group, layer)
    for group in groups:
        per_layer = []
        for l in range(depth):
            fan_in = {e[l].W.shape[0] for e in group}
            if len(fan_in) != 1:
                raise ConfigError("experts within a group must share layer fan-in")
            nodes = [tape.param(e[l].W) for e in group]
            per_layer.append(nodes[0] if len(nodes) == 1 else ad.concat(nodes, axis=1))
        stacked.append(per_layer)

    total = None
    for gi in range(3):
        for gj in range(gi + 1, 3):
            for l in range(depth):
                a, b = stacked[gi][l], stacked[gj][l]
                if a.value.shape[0] != b.value.shape[0]:
                    raise ConfigError(
                        "expert layer widths differ across groups: "
                        f"{a.value.shape} vs {b.value.shape}"
                    )
                term = ad.sum_all(ad.square(ad.matmul(ad.transpose(a), b)))
                total = term if total is None else ad.add(total, term)
    return total
