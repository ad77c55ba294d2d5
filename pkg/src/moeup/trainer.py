"""Gradient training: seed pretraining, domain-expert branching, and
router-only finetuning of a merged model.

Optimization is plain Adam (beta 0.9/0.999, eps 1e-8, no weight decay) under a
linear-warmup cosine schedule. Training never mutates its input model; it
clones, optimizes the clone, and returns it together with a (step, lr, loss)
history. Router finetuning optimizes exactly the per-layer router matrices and
forwards with raw softmax gate values so the gate carries gradient even when a
single expert is selected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .corpus import DomainCorpus, interleave_batches
from .counters import CostCounters
from .errors import ConfigError, DivergenceError, NonFiniteError
from .model import ModelParams, forward, lm_loss
from .moerging import MoEModel, RoutingPolicy, moe_forward

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float
    warmup_steps: int
    total_steps: int
    batch_size: int
    grad_accum: int = 1
    seed: int = 0
    cosine_floor: float = 0.1
    trainable: str = "all"  # "all" | "routers-only"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.batch_size <= 0 or self.grad_accum <= 0:
            raise ConfigError("batch_size and grad_accum must be positive")
        if not 0.0 <= self.cosine_floor <= 1.0:
            raise ConfigError("cosine_floor must be in [0, 1]")
        if self.trainable not in ("all", "routers-only"):
            raise ConfigError(f"unknown trainable selector {self.trainable!r}")


def lr_at(config: TrainConfig, step: int) -> float:
    """Closed-form schedule: linear warmup to the base rate, then cosine decay
    to cosine_floor * base over the remaining steps."""
    base = config.learning_rate
    if step < config.warmup_steps:
        return base * (step + 1) / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    if span <= 0:
        return base
    progress = (step - config.warmup_steps) / span
    floor = config.cosine_floor
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def for_tensors(tensors: dict) -> "OptimizerState":
        return OptimizerState(
            m={k: torch.zeros_like(t) for k, t in tensors.items()},
            v={k: torch.zeros_like(t) for k, t in tensors.items()},
        )


def _adam_step(state: OptimizerState, tensors: dict, lr: float) -> None:
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    with torch.no_grad():
        for name, p in tensors.items():
            g = p.grad
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise NonFiniteError(f"gradient for {name!r} is non-finite")
            state.m[name].mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
            state.v[name].mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
            mhat = state.m[name] / bc1
            vhat = state.v[name] / bc2
            p.addcdiv_(mhat, vhat.sqrt().add_(ADAM_EPS), value=-lr)
            p.grad = None


def backward(params: ModelParams, batch, counters: CostCounters | None = None):
    """One forward + reverse pass; returns (name -> gradient, loss value).

    Restores the params' requires_grad state afterwards, so this is safe to
    call on a model that is otherwise frozen.
    """
    for t in params.tensors.values():
        t.requires_grad_(True)
        t.grad = None
    trace = forward(params, batch)
    if counters is not None:
        counters.forward_passes += 1
    loss = lm_loss(trace.logits, batch)
    loss.backward()
    if counters is not None:
        counters.backward_passes += 1
    grads = {}
    for name, t in params.tensors.items():
        g = t.grad if t.grad is not None else torch.zeros_like(t)
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"gradient for {name!r} is non-finite")
        grads[name] = g.detach().clone()
        t.requires_grad_(False)
        t.grad = None
    return grads, float(loss.detach())


def _batch_stream(corpora, batch_size: int, seq_len: int, seed: int):
    epoch = 0
    while True:
        for b in interleave_batches(corpora, "train", batch_size, seq_len, seed + 1000003 * epoch):
            yield b
        epoch += 1


def train(
    params: ModelParams,
    corpora,
    config: TrainConfig,
    counters: CostCounters | None = None,
):
    """Train a dense model on one corpus or a mixed list of corpora.

    Returns (trained ModelParams, history) where history rows are
    (step, lr, mean micro-batch loss). The input params are left untouched.
    """
    if config.trainable != "all":
        raise ConfigError("dense training requires trainable='all'")
    if isinstance(corpora, DomainCorpus):
        corpora = [corpora]
    out = params.clone()
    if config.total_steps == 0:
        return out, []
    for t in out.tensors.values():
        t.requires_grad_(True)
    opt = OptimizerState.for_tensors(out.tensors)
    stream = _batch_stream(corpora, config.batch_size, out.config.max_seq_len, config.seed)
    history = []
    for step in range(config.total_steps):
        lr = lr_at(config, step)
        step_loss = 0.0
        for _ in range(config.grad_accum):
            batch = next(stream)
            trace = forward(out, batch)
            if counters is not None:
                counters.forward_passes += 1
            loss = lm_loss(trace.logits, batch)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise DivergenceError(step)
            (loss / config.grad_accum).backward()
            if counters is not None:
                counters.backward_passes += 1
            step_loss += loss_val / config.grad_accum
        _adam_step(opt, out.tensors, lr)
        history.append((step, lr, step_loss))
    for t in out.tensors.values():
        t.requires_grad_(False)
    return out, history


def finetune_routers(
    moe: MoEModel,
    corpora,
    config: TrainConfig,
    counters: CostCounters | None = None,
):
    """Optimize only the router matrices of an assembled MoE on mixed-domain
    batches. Trunk and expert banks are left bit-identical. Returns
    (finetuned MoEModel, history)."""
    if config.trainable != "routers-only":
        raise ConfigError("finetune_routers requires trainable='routers-only'")
    if not moe.routers_initialized():
        raise ConfigError("finetune_routers needs initialized routers (ridge or random)")
    if isinstance(corpora, DomainCorpus):
        corpora = [corpora]
    tuned = MoEModel(
        trunk=moe.trunk,
        experts=moe.experts,
        routers=[r.detach().clone().requires_grad_(True) for r in moe.routers],
        config=moe.config,
        top_k=moe.top_k,
        domain_names=moe.domain_names,
    )
    named = {f"router.{l}": r for l, r in enumerate(tuned.routers)}
    opt = OptimizerState.for_tensors(named)
    policy = RoutingPolicy.learned()
    stream = _batch_stream(corpora, config.batch_size, moe.config.max_seq_len, config.seed)
    history = []
    for step in range(config.total_steps):
        lr = lr_at(config, step)
        step_loss = 0.0
        for _ in range(config.grad_accum):
            batch = next(stream)
            trace, _ = moe_forward(tuned, batch, policy, counters=counters, raw_gates=True)
            loss = lm_loss(trace.logits, batch)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise DivergenceError(step)
            (loss / config.grad_accum).backward()
            if counters is not None:
                counters.backward_passes += 1
            step_loss += loss_val / config.grad_accum
        _adam_step(opt, named, lr)
        history.append((step, lr, step_loss))
    tuned.routers = [r.detach() for r in tuned.routers]
    return tuned, history


def write_history_csv(history, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,lr,loss\n")
        for step, lr, loss in history:
            f.write(f"{step},{lr:.10g},{loss:.10g}\n")
