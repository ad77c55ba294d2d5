"""Perplexity evaluation, normalized scoring, routing diagnostics, and the
baseline ladder.

The ladder reproduces, at desk scale, the comparison grid: each dense expert
on each domain, uniform averaging of all parameters, the merged model under
oracle / random / learned routing with learned routers coming from random
init + finetuning (BTX), the closed-form ridge fit (RoME), or ridge fit +
finetuning (RoME+). Scores are normalized per domain against the matching
dense expert (p_hat_d / p_d * 100) so 100 means matching the best expert
everywhere; means and standard deviations are taken over independently
trained suites (one per seed).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import make_batches
from .counters import CostCounters
from .errors import ConfigError
from .model import ModelConfig, ModelParams, forward, init_params, lm_loss_sum
from .moerging import (
    MoEModel,
    RoutingPolicy,
    assemble_moe,
    average_all_params,
    moe_forward,
)
from .ridge_router import fit_routers_pipeline, solve_routers
from .trainer import TrainConfig, finetune_routers, train

LADDER_METHODS = (
    "dense_best",
    "model_averaging",
    "oracle",
    "random",
    "btx",
    "rome",
    "rome_plus",
)


def eval_perplexity(
    model,
    corpus,
    policy: RoutingPolicy | None = None,
    split: str = "test",
    batch_size: int = 8,
    counters: CostCounters | None = None,
    shuffle_seed: int = 0,
) -> float:
    """exp(mean masked next-token cross-entropy) over one split.

    ``model`` is dense ModelParams (policy ignored) or an assembled MoEModel
    (policy required).
    """
    seq_len = model.config.max_seq_len
    batches = make_batches(corpus, split, batch_size, seq_len, shuffle_seed)
    total = 0.0
    count = 0
    for batch in batches:
        if isinstance(model, MoEModel):
            if policy is None:
                raise ConfigError("MoE evaluation needs a routing policy")
            trace, _ = moe_forward(model, batch, policy, counters=counters)
        else:
            trace = forward(model, batch)
            if counters is not None:
                counters.forward_passes += 1
        s, n = lm_loss_sum(trace.logits, batch)
        total += float(s)
        count += n
    if count == 0:
        raise ConfigError(f"no valid tokens in {split!r} split of {corpus.name!r}")
    return float(np.exp(total / count))


def normalized_score(p, p_hat):
    """Per-domain scores 100 * p_hat_d / p_d and their mean. A score above
    100 means beating the matching dense expert on that domain."""
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p.shape != p_hat.shape:
        raise ConfigError("p and p_hat must have the same shape")
    if (p <= 0).any() or (p_hat <= 0).any():
        raise ConfigError("perplexities must be positive")
    scores = 100.0 * (p_hat / p)
    return scores, float(scores.mean())


def routing_accuracy(
    moe: MoEModel,
    corpora,
    policy: RoutingPolicy | None = None,
    split: str = "test",
    batch_size: int = 8,
    counters: CostCounters | None = None,
) -> np.ndarray:
    """Per-layer fraction of real tokens whose top-1 expert equals the batch
    domain label, aggregated over all corpora."""
    policy = policy or RoutingPolicy.learned()
    hits = np.zeros(moe.config.n_layers, dtype=np.int64)
    seen = 0
    for corpus in corpora:
        for batch in make_batches(corpus, split, batch_size, moe.config.max_seq_len, 0):
            _, record = moe_forward(moe, batch, policy, counters=counters)
            m = batch.mask
            seen += int(m.sum())
            for l, ids in enumerate(record.expert_ids):
                hits[l] += int(((ids[:, :, 0] == batch.domain_id) & m).sum())
    if seen == 0:
        raise ConfigError("no real tokens to score routing on")
    return hits / seen


def dense_grid(experts, corpora, split: str = "test", batch_size: int = 8) -> np.ndarray:
    """D x D perplexity grid: experts along rows, domains along columns."""
    D = len(corpora)
    grid = np.zeros((len(experts), D), dtype=np.float64)
    for i, e in enumerate(experts):
        for j, c in enumerate(corpora):
            grid[i, j] = eval_perplexity(e, c, split=split, batch_size=batch_size)
    return grid


@dataclass
class Suite:
    """One seed's trained artifacts: the pretrained seed model and the
    branched domain experts."""

    seed: int
    seed_params: ModelParams
    experts: list


@dataclass
class LadderSpec:
    """Everything the ladder needs to train and evaluate one suite."""

    model: ModelConfig
    seed_train: TrainConfig
    expert_train: TrainConfig
    rome_plus_train: TrainConfig
    btx_train: TrainConfig
    lam: float = 0.01
    top_k: int = 1
    btx_top_k: int = 2
    max_tokens: int | None = None
    eval_batch_size: int = 8
    normalize: bool = True


def default_ladder_spec(model: ModelConfig | None = None, **overrides) -> LadderSpec:
    """Desk-scale defaults: seed 2000 steps at 6e-4, experts 500 at 6e-5,
    router finetunes 300 steps at 1e-5 (ridge init) / 1e-4 (random init, k=2),
    all with 5% linear warmup and cosine decay."""
    spec = LadderSpec(
        model=model or ModelConfig(),
        seed_train=TrainConfig(
            learning_rate=6e-4, warmup_steps=100, total_steps=2000, batch_size=8
        ),
        expert_train=TrainConfig(
            learning_rate=6e-5, warmup_steps=25, total_steps=500, batch_size=8
        ),
        rome_plus_train=TrainConfig(
            learning_rate=1e-5,
            warmup_steps=15,
            total_steps=300,
            batch_size=8,
            trainable="routers-only",
        ),
        btx_train=TrainConfig(
            learning_rate=1e-4,
            warmup_steps=15,
            total_steps=300,
            batch_size=8,
            trainable="routers-only",
        ),
    )
    return replace(spec, **overrides) if overrides else spec


def train_suite(
    spec: LadderSpec,
    corpora,
    seed: int,
    seed_corpora=None,
    counters: CostCounters | None = None,
) -> Suite:
    """Pretrain the seed model, then branch one expert per domain. The seed
    phase runs on ``seed_corpora`` when given (a general pretraining corpus,
    as distinct from the domain suite) and on all domains mixed otherwise.
    Fully deterministic for a fixed seed."""
    base = init_params(spec.model, seed)
    seed_tc = replace(spec.seed_train, seed=seed)
    seed_params, _ = train(
        base, seed_corpora if seed_corpora is not None else corpora, seed_tc,
        counters=counters,
    )
    experts = []
    for c in corpora:
        tc = replace(spec.expert_train, seed=seed * 101 + c.domain_id)
        e, _ = train(seed_params, c, tc, counters=counters)
        experts.append(e)
    return Suite(seed=seed, seed_params=seed_params, experts=experts)


@dataclass
class MethodResult:
    method: str
    per_seed_ppl: list = field(default_factory=list)  # each (D,) domain perplexities
    per_seed_scores: list = field(default_factory=list)
    per_seed_pbar: list = field(default_factory=list)
    per_seed_routing: list = field(default_factory=list)  # (L,) or None
    counters: CostCounters = field(default_factory=CostCounters)

    @property
    def pbar_mean(self) -> float:
        return float(np.mean(self.per_seed_pbar))

    @property
    def pbar_std(self) -> float:
        return float(np.std(self.per_seed_pbar))


@dataclass
class EvalReport:
    domain_names: list
    methods: dict
    references: list = field(default_factory=list)  # per-seed (D,) p_hat
    dense_grids: list = field(default_factory=list)  # per-seed D x D
    wall_time: float = 0.0

    def to_json(self) -> str:
        out = {
            "domain_names": self.domain_names,
            "wall_time_seconds": self.wall_time,
            "references_per_seed": [list(map(float, r)) for r in self.references],
            "methods": {},
        }
        for name, m in self.methods.items():
            out["methods"][name] = {
                "pbar_mean": m.pbar_mean,
                "pbar_std": m.pbar_std,
                "per_seed_pbar": list(map(float, m.per_seed_pbar)),
                "per_seed_scores": [list(map(float, s)) for s in m.per_seed_scores],
                "per_seed_ppl": [list(map(float, p)) for p in m.per_seed_ppl],
                "per_seed_routing_accuracy": [
                    list(map(float, r)) if r is not None else None
                    for r in m.per_seed_routing
                ],
                "counters": m.counters.as_dict(),
            }
        return json.dumps(out, indent=2, sort_keys=True)

    def to_tsv(self) -> str:
        lines = ["method\tpbar_mean\tpbar_std\t" + "\t".join(self.domain_names)]
        for name, m in self.methods.items():
            mean_scores = np.mean(np.stack(m.per_seed_scores), axis=0)
            cells = "\t".join(f"{s:.2f}" for s in mean_scores)
            lines.append(f"{name}\t{m.pbar_mean:.2f}\t{m.pbar_std:.2f}\t{cells}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        w = max(len(n) for n in self.methods) + 2
        lines = [f"{'method':<{w}}{'pbar':>8}  {'std':>6}"]
        for name, m in self.methods.items():
            lines.append(f"{name:<{w}}{m.pbar_mean:>8.2f}  {m.pbar_std:>6.2f}")
        return "\n".join(lines)


def _eval_moe_per_domain(moe, corpora, policy_factory, batch_size, counters=None):
    ppl = []
    for c in corpora:
        ppl.append(
            eval_perplexity(
                moe, c, policy=policy_factory(), batch_size=batch_size, counters=counters
            )
        )
    return np.asarray(ppl)


def run_ladder(
    spec: LadderSpec,
    corpora,
    seeds,
    suites: list | None = None,
    stats_corpora=None,
    methods=LADDER_METHODS,
    seed_corpora=None,
) -> EvalReport:
    """Train (or reuse) one suite per seed and evaluate the requested ladder
    rows. ``stats_corpora`` switches the ridge fit to out-of-distribution
    statistics while evaluation stays on ``corpora``; ``seed_corpora`` feeds
    the pretraining phase when suites are trained here."""
    t0 = time.perf_counter()
    D = len(corpora)
    report = EvalReport(
        domain_names=[c.name for c in corpora],
        methods={m: MethodResult(method=m) for m in methods},
    )
    fit_corpora = stats_corpora if stats_corpora is not None else corpora
    for idx, seed in enumerate(seeds):
        suite = (
            suites[idx]
            if suites is not None
            else train_suite(spec, corpora, seed, seed_corpora=seed_corpora)
        )
        grid = dense_grid(suite.experts, corpora, batch_size=spec.eval_batch_size)
        p_hat = np.diag(grid).copy()
        report.references.append(p_hat)
        report.dense_grids.append(grid)

        def add(method, ppl, routing=None):
            scores, pbar = normalized_score(ppl, p_hat)
            m = report.methods[method]
            m.per_seed_ppl.append(np.asarray(ppl, dtype=np.float64))
            m.per_seed_scores.append(scores)
            m.per_seed_pbar.append(pbar)
            m.per_seed_routing.append(routing)

        if "dense_best" in methods:
            add("dense_best", p_hat)
        if "model_averaging" in methods:
            avg = average_all_params(suite.experts)
            add(
                "model_averaging",
                [eval_perplexity(avg, c, batch_size=spec.eval_batch_size) for c in corpora],
            )

        names = [c.name for c in corpora]
        if "oracle" in methods:
            moe = assemble_moe(suite.experts, "uninitialized", top_k=1, domain_names=names)
            cnt = report.methods["oracle"].counters
            ppl = _eval_moe_per_domain(
                moe, corpora, RoutingPolicy.oracle, spec.eval_batch_size, cnt
            )
            add("oracle", ppl)
        if "random" in methods:
            moe = assemble_moe(suite.experts, "uninitialized", top_k=1, domain_names=names)
            cnt = report.methods["random"].counters
            ppl = _eval_moe_per_domain(
                moe,
                corpora,
                lambda: RoutingPolicy.random(seed * 7 + 1),
                spec.eval_batch_size,
                cnt,
            )
            add("random", ppl)
        if "btx" in methods:
            moe = assemble_moe(
                suite.experts,
                "random",
                top_k=spec.btx_top_k,
                router_seed=seed * 13 + 5,
                domain_names=names,
            )
            cnt = report.methods["btx"].counters
            tc = replace(spec.btx_train, seed=seed * 17 + 3)
            moe, _ = finetune_routers(moe, corpora, tc, counters=cnt)
            ppl = _eval_moe_per_domain(
                moe, corpora, RoutingPolicy.learned, spec.eval_batch_size, cnt
            )
            acc = routing_accuracy(moe, corpora, batch_size=spec.eval_batch_size)
            add("btx", ppl, acc)
        rome_moe = None
        if "rome" in methods or "rome_plus" in methods:
            rome_moe = assemble_moe(
                suite.experts, "uninitialized", top_k=spec.top_k, domain_names=names
            )
            cnt = report.methods["rome" if "rome" in methods else "rome_plus"].counters
            rome_moe, _ = fit_routers_pipeline(
                rome_moe,
                fit_corpora,
                lam=spec.lam,
                max_tokens=spec.max_tokens,
                batch_size=spec.eval_batch_size,
                seq_len=spec.model.max_seq_len,
                normalize=spec.normalize,
                counters=cnt,
            )
        if "rome" in methods:
            cnt = report.methods["rome"].counters
            ppl = _eval_moe_per_domain(
                rome_moe, corpora, RoutingPolicy.learned, spec.eval_batch_size, cnt
            )
            acc = routing_accuracy(rome_moe, corpora, batch_size=spec.eval_batch_size)
            add("rome", ppl, acc)
        if "rome_plus" in methods:
            cnt = report.methods["rome_plus"].counters
            tc = replace(spec.rome_plus_train, seed=seed * 19 + 7)
            plus, _ = finetune_routers(rome_moe, corpora, tc, counters=cnt)
            ppl = _eval_moe_per_domain(
                plus, corpora, RoutingPolicy.learned, spec.eval_batch_size, cnt
            )
            acc = routing_accuracy(plus, corpora, batch_size=spec.eval_batch_size)
            add("rome_plus", ppl, acc)
    report.wall_time = time.perf_counter() - t0
    return report


def run_sweep(
    spec: LadderSpec,
    corpora,
    seeds,
    axis: str,
    values,
    suites: list | None = None,
    seed_corpora=None,
) -> list:
    """Sweep one knob and report mean/std of the ridge-fit p-bar per value.

    Rows are (value, mean, std). The lambda axis reuses one statistics pass
    per seed and re-solves; max_tokens and top_k re-fit per value.
    """
    if axis not in ("lambda", "top_k", "max_tokens"):
        raise ConfigError(f"unknown sweep axis {axis!r}")
    pbars = {v: [] for v in values}
    for idx, seed in enumerate(seeds):
        suite = (
            suites[idx]
            if suites is not None
            else train_suite(spec, corpora, seed, seed_corpora=seed_corpora)
        )
        grid = dense_grid(suite.experts, corpora, batch_size=spec.eval_batch_size)
        p_hat = np.diag(grid).copy()
        names = [c.name for c in corpora]
        if axis == "lambda":
            moe = assemble_moe(suite.experts, "uninitialized", top_k=spec.top_k, domain_names=names)
            moe, stats = fit_routers_pipeline(
                moe,
                corpora,
                lam=spec.lam,
                max_tokens=spec.max_tokens,
                batch_size=spec.eval_batch_size,
                seq_len=spec.model.max_seq_len,
                normalize=spec.normalize,
            )
            for v in values:
                sol = solve_routers(stats, lam=float(v), normalize=spec.normalize)
                moe.set_routers([w.astype(np.float32) for w in sol.W])
                ppl = _eval_moe_per_domain(
                    moe, corpora, RoutingPolicy.learned, spec.eval_batch_size
                )
                _, pbar = normalized_score(ppl, p_hat)
                pbars[v].append(pbar)
        else:
            for v in values:
                top_k = int(v) if axis == "top_k" else spec.top_k
                max_tokens = spec.max_tokens
                if axis == "max_tokens":
                    max_tokens = None if v in (None, 0, "inf") else int(v)
                moe = assemble_moe(
                    suite.experts, "uninitialized", top_k=top_k, domain_names=names
                )
                moe, _ = fit_routers_pipeline(
                    moe,
                    corpora,
                    lam=spec.lam,
                    max_tokens=max_tokens,
                    batch_size=spec.eval_batch_size,
                    seq_len=spec.model.max_seq_len,
                    normalize=spec.normalize,
                )
                ppl = _eval_moe_per_domain(
                    moe, corpora, RoutingPolicy.learned, spec.eval_batch_size
                )
                _, pbar = normalized_score(ppl, p_hat)
                pbars[v].append(pbar)
    rows = []
    for v in values:
        arr = np.asarray(pbars[v], dtype=np.float64)
        rows.append((v, float(arr.mean()), float(arr.std())))
    return rows


def sweep_rows_to_csv(rows, path, axis: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{axis},pbar_mean,pbar_std\n")
        for v, mean, std in rows:
            label = "inf" if v is None else v
            f.write(f"{label},{mean:.6f},{std:.6f}\n")
