"""Merge D dense experts into one sparse MoE and run routed forwards.

Merging averages every non-MLP tensor across experts (the trunk) and installs
each expert's per-layer MLP tensors unmodified as the layer's expert bank.
Routing policies: learned (top-k over router logits), oracle (batch domain
label), random (seeded uniform), and deterministic_domain (the statistics
capture path, identical mechanics to oracle but usable with uninitialized
routers). The trunk math is the dense model's forward_trunk, so a 1-expert
MoE reproduces the dense forward up to float32 accumulation noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import Batch
from .counters import CostCounters
from .errors import (
    ConfigError,
    DimensionMismatchError,
    ShapeMismatchError,
    UninitializedRouterError,
)
from .model import (
    ForwardTrace,
    ModelConfig,
    ModelParams,
    forward_trunk,
    is_mlp_name,
    mlp_apply,
    tensor_shapes,
)
from .serialization import MODEL_MAGIC, read_container, require_shape, write_container

_EXPERT_KEYS = ("w_gate", "w_up", "w_down")


@dataclass
class RoutingPolicy:
    """Routing variant plus the state it needs.

    The random variant holds a generator consumed one batch at a time;
    construct a fresh policy per evaluation run for reproducible draws.
    """

    variant: str
    seed: int = 0
    _rng: np.random.Generator | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in ("learned", "oracle", "random", "deterministic_domain"):
            raise ConfigError(f"unknown routing variant {self.variant!r}")
        if self.variant == "random":
            self._rng = np.random.default_rng(np.random.PCG64(self.seed))

    @staticmethod
    def learned() -> "RoutingPolicy":
        return RoutingPolicy("learned")

    @staticmethod
    def oracle() -> "RoutingPolicy":
        return RoutingPolicy("oracle")

    @staticmethod
    def random(seed: int) -> "RoutingPolicy":
        return RoutingPolicy("random", seed=seed)

    @staticmethod
    def deterministic_domain() -> "RoutingPolicy":
        return RoutingPolicy("deterministic_domain")


@dataclass
class RoutingRecord:
    """Per-layer chosen expert ids and gate values, plus the real-token mask."""

    expert_ids: list
    gates: list
    mask: np.ndarray

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for l, (ids, gs) in enumerate(zip(self.expert_ids, self.gates)):
                B, T, k = ids.shape
                for b in range(B):
                    for t in range(T):
                        if not self.mask[b, t]:
                            continue
                        for j in range(k):
                            f.write(
                                json.dumps(
                                    {
                                        "layer": l,
                                        "position": [b, t],
                                        "expert_id": int(ids[b, t, j]),
                                        "gate": float(gs[b, t, j]),
                                    }
                                )
                                + "\n"
                            )


@dataclass
class MoEModel:
    trunk: dict
    experts: list  # experts[l][d] -> {w_gate, w_up, w_down}
    routers: list | None  # L tensors of shape H x D, or None before init
    config: ModelConfig
    top_k: int = 1
    domain_names: list | None = None

    @property
    def n_experts(self) -> int:
        return len(self.experts[0])

    @property
    def n_layers(self) -> int:
        return len(self.experts)

    def routers_initialized(self) -> bool:
        return self.routers is not None

    def set_routers(self, mats) -> None:
        H, D = self.config.hidden_size, self.n_experts
        routers = []
        for l, m in enumerate(mats):
            if isinstance(m, np.ndarray):
                m = torch.from_numpy(np.ascontiguousarray(m.astype(np.float32)))
            m = m.detach().clone().to(torch.float32)
            if tuple(m.shape) != (H, D):
                raise ShapeMismatchError(
                    f"router {l} has shape {tuple(m.shape)}, expected {(H, D)}"
                )
            routers.append(m)
        if len(routers) != self.config.n_layers:
            raise ShapeMismatchError("router count does not match layer count")
        self.routers = routers


def average_trunk(experts: list) -> dict:
    """Arithmetic mean of every non-MLP tensor; accumulation in float64."""
    if not experts:
        raise ConfigError("average_trunk needs at least one expert")
    config = experts[0].config
    names = list(experts[0].tensors.keys())
    for e in experts[1:]:
        if e.config != config:
            raise ShapeMismatchError("experts have differing configs")
        if list(e.tensors.keys()) != names:
            raise ShapeMismatchError("experts have differing parameter name sets")
    trunk = {}
    for name in names:
        if is_mlp_name(name):
            continue
        acc = torch.zeros_like(experts[0].tensors[name], dtype=torch.float64)
        for e in experts:
            acc += e.tensors[name].to(torch.float64)
        trunk[name] = (acc / len(experts)).to(experts[0].tensors[name].dtype)
    return trunk


def assemble_moe(
    experts: list,
    routers="uninitialized",
    top_k: int = 1,
    router_seed: int = 0,
    domain_names=None,
) -> MoEModel:
    """Build the merged model: averaged trunk, per-layer expert banks, and
    routers that are absent, random normal, or caller-provided matrices."""
    if not experts:
        raise ConfigError("assemble_moe needs at least one expert")
    config = experts[0].config
    D = len(experts)
    if not 1 <= top_k <= D:
        raise ConfigError(f"top_k must be in 1..{D}, got {top_k}")
    trunk = average_trunk(experts)
    bank = []
    for l in range(config.n_layers):
        row = []
        for e in experts:
            p = f"layers.{l}.mlp."
            row.append({k: e.tensors[p + k].detach().clone() for k in _EXPERT_KEYS})
        bank.append(row)
    moe = MoEModel(
        trunk=trunk,
        experts=bank,
        routers=None,
        config=config,
        top_k=top_k,
        domain_names=list(domain_names) if domain_names else None,
    )
    if isinstance(routers, str):
        if routers == "uninitialized":
            pass
        elif routers == "random":
            rng = np.random.default_rng(np.random.PCG64(router_seed))
            moe.set_routers(
                [
                    rng.normal(0.0, 0.02, size=(config.hidden_size, D))
                    for _ in range(config.n_layers)
                ]
            )
        else:
            raise ConfigError(f"unknown router init {routers!r}")
    else:
        mats = list(routers)
        for m in mats:
            if np.asarray(m).shape[1] != D:
                raise DimensionMismatchError(
                    f"router has {np.asarray(m).shape[1]} columns for {D} experts"
                )
        moe.set_routers(mats)
    return moe


def _topk_lowest_index(scores: torch.Tensor, k: int):
    # stable descending sort keeps the lowest expert index first among ties
    order = torch.argsort(scores, dim=-1, descending=True, stable=True)
    ids = order[..., :k]
    vals = torch.gather(scores, -1, ids)
    return ids, vals


def _route(
    moe: MoEModel,
    layer: int,
    x: torch.Tensor,
    batch: Batch,
    policy: RoutingPolicy,
    counters: CostCounters | None,
    raw_gates: bool,
):
    B, T, H = x.shape
    D = moe.n_experts
    if policy.variant in ("oracle", "deterministic_domain"):
        if not 0 <= batch.domain_id < D:
            raise ConfigError(f"batch domain_id {batch.domain_id} out of range for D={D}")
        ids = torch.full((B, T, 1), batch.domain_id, dtype=torch.int64)
        gates = torch.ones((B, T, 1), dtype=x.dtype)
        return ids, gates
    if policy.variant == "random":
        draw = policy._rng.integers(0, D, size=(B, T, 1))
        ids = torch.from_numpy(draw.astype(np.int64))
        gates = torch.ones((B, T, 1), dtype=x.dtype)
        return ids, gates
    if moe.routers is None:
        raise UninitializedRouterError(
            "learned routing requested but routers are uninitialized"
        )
    if counters is not None:
        counters.router_reads += 1
    logits = x @ moe.routers[layer].to(x.dtype)
    probs = torch.softmax(logits, dim=-1)
    ids, vals = _topk_lowest_index(probs, moe.top_k)
    if raw_gates:
        gates = vals
    else:
        gates = vals / vals.sum(dim=-1, keepdim=True).clamp_min(1e-12)
    return ids, gates


def moe_forward(
    moe: MoEModel,
    batch: Batch,
    policy: RoutingPolicy,
    capture: bool = False,
    counters: CostCounters | None = None,
    raw_gates: bool = False,
):
    """Routed forward. Returns (ForwardTrace, RoutingRecord).

    Gate semantics: selected softmax values renormalized over the selected
    set. ``raw_gates=True`` keeps the unrenormalized softmax values instead;
    router finetuning uses that so the gate carries gradient even at k=1.
    """
    tokens = torch.from_numpy(np.ascontiguousarray(batch.tokens))
    get = moe.trunk.__getitem__
    rec_ids = []
    rec_gates = []

    def routed_mlp(l: int, x: torch.Tensor) -> torch.Tensor:
        ids, gates = _route(moe, l, x, batch, policy, counters, raw_gates)
        rec_ids.append(ids.detach().numpy())
        rec_gates.append(gates.detach().to(torch.float32).numpy())
        B, T, H = x.shape
        xf = x.reshape(B * T, H)
        idf = ids.reshape(B * T, -1)
        gf = gates.reshape(B * T, -1)
        out = torch.zeros_like(xf)
        for d in range(moe.n_experts):
            sel = idf == d
            rows = sel.any(dim=-1).nonzero(as_tuple=False).squeeze(-1)
            if rows.numel() == 0:
                continue
            w = moe.experts[l][d]
            y = mlp_apply(xf[rows], w["w_gate"].to(x.dtype), w["w_up"].to(x.dtype), w["w_down"].to(x.dtype))
            gate_d = (gf * sel.to(gf.dtype)).sum(dim=-1)[rows]
            out = out.index_add(0, rows, y * gate_d.unsqueeze(-1))
        return out.reshape(B, T, H)

    trace = forward_trunk(get, moe.config, tokens, routed_mlp, capture=capture)
    if counters is not None:
        counters.forward_passes += 1
    record = RoutingRecord(expert_ids=rec_ids, gates=rec_gates, mask=batch.mask.copy())
    return trace, record


def count_active_params(moe: MoEModel, top_k: int | None = None):
    """(total, active-per-token) parameter counts. Active = trunk + top_k
    expert MLPs per layer + all routers."""
    k = moe.top_k if top_k is None else top_k
    if not 1 <= k <= moe.n_experts:
        raise ConfigError(f"top_k must be in 1..{moe.n_experts}")
    trunk = sum(t.numel() for t in moe.trunk.values())
    per_expert_layer = sum(v.numel() for v in moe.experts[0][0].values())
    router = moe.config.n_layers * moe.config.hidden_size * moe.n_experts
    total = trunk + per_expert_layer * moe.n_experts * moe.n_layers + router
    active = trunk + per_expert_layer * k * moe.n_layers + router
    return total, active


def moe_tensor_items(moe: MoEModel):
    """Flat (name, float32 array) listing used by checkpointing."""
    items = []
    for name, t in moe.trunk.items():
        items.append((f"trunk.{name}", t.detach().to(torch.float32).numpy()))
    for l, row in enumerate(moe.experts):
        for d, w in enumerate(row):
            for k in _EXPERT_KEYS:
                items.append(
                    (
                        f"expert.{d}.layers.{l}.mlp.{k}",
                        w[k].detach().to(torch.float32).numpy(),
                    )
                )
    if moe.routers is not None:
        for l, r in enumerate(moe.routers):
            items.append((f"router.{l}", r.detach().to(torch.float32).numpy()))
    return items


def save_moe_checkpoint(moe: MoEModel, path, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "moe",
        "config": moe.config.to_dict(),
        "n_experts": moe.n_experts,
        "top_k": moe.top_k,
        "routers_initialized": moe.routers_initialized(),
        "domain_names": moe.domain_names,
    }
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, MODEL_MAGIC, meta, moe_tensor_items(moe))


def load_moe_checkpoint(path):
    meta, tensors = read_container(path, MODEL_MAGIC)
    if meta.get("kind") != "moe":
        raise ShapeMismatchError(f"{path}: not an MoE checkpoint")
    config = ModelConfig.from_dict(meta["config"])
    D = int(meta["n_experts"])
    shapes = tensor_shapes(config)
    trunk = {}
    for name, shape in shapes.items():
        if is_mlp_name(name):
            continue
        arr = require_shape(name, tensors[f"trunk.{name}"], shape)
        trunk[name] = torch.from_numpy(np.ascontiguousarray(arr.astype(np.float32)))
    experts = []
    for l in range(config.n_layers):
        row = []
        for d in range(D):
            w = {}
            for k in _EXPERT_KEYS:
                full = f"expert.{d}.layers.{l}.mlp.{k}"
                arr = require_shape(full, tensors[full], shapes[f"layers.{l}.mlp.{k}"])
                w[k] = torch.from_numpy(np.ascontiguousarray(arr.astype(np.float32)))
            row.append(w)
        experts.append(row)
    moe = MoEModel(
        trunk=trunk,
        experts=experts,
        routers=None,
        config=config,
        top_k=int(meta["top_k"]),
        domain_names=meta.get("domain_names"),
    )
    if meta.get("routers_initialized"):
        moe.set_routers(
            [tensors[f"router.{l}"] for l in range(config.n_layers)]
        )
    return moe, meta


def average_all_params(experts: list) -> ModelParams:
    """The model-averaging baseline: uniform mean of EVERY tensor, MLPs
    included. Deliberately a separate code path from average_trunk."""
    if not experts:
        raise ConfigError("average_all_params needs at least one expert")
    config = experts[0].config
    out = {}
    for name in experts[0].tensors.keys():
        acc = torch.zeros_like(experts[0].tensors[name], dtype=torch.float64)
        for e in experts:
            if e.config != config:
                raise ShapeMismatchError("experts have differing configs")
            acc += e.tensors[name].to(torch.float64)
        out[name] = (acc / len(experts)).to(experts[0].tensors[name].dtype)
    return ModelParams(config=config, tensors=out)
