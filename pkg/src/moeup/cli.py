"""Command-line pipeline: corpora -> training -> merge -> ridge fit -> eval.

One JSON experiment config drives every subcommand; flags override single
fields. Artifacts land in the config's output directory and every file embeds
a hash of the resolved config so `eval` can refuse to mix artifacts from
different experiments (--force bypasses the check). Builtin configs are
addressed as `builtin:desk3` (3-domain smoke scale) and `builtin:desk5`
(5-domain desk scale).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import eval_harness
from .corpus import (
    SYNTHETIC_KINDS,
    gen_synthetic_domain,
    ingest_text_file,
)
from .counters import CostCounters
from .errors import ConfigError, MissingArtifactError, MoeupError
from .eval_harness import (
    LadderSpec,
    dense_grid,
    eval_perplexity,
    normalized_score,
    routing_accuracy,
    run_ladder,
    run_sweep,
    sweep_rows_to_csv,
)
from .model import (
    ModelConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .moerging import (
    RoutingPolicy,
    assemble_moe,
    load_moe_checkpoint,
    save_moe_checkpoint,
)
from .ridge_router import add_domain, fit_routers_pipeline, load_stats, save_stats
from .serialization import MODEL_MAGIC, read_container
from .trainer import TrainConfig, finetune_routers, train, write_history_csv

BUILTIN_CONFIGS = {
    "desk3": {
        "model": {},
        "domains": [
            {"kind": "arith", "size": 120},
            {"kind": "prose", "size": 120},
            {"kind": "hexcode", "size": 120},
        ],
        "corpus_seed": 1234,
        "paragraph_bytes": 110,
        "train": {
            "seed": {"learning_rate": 6e-4, "warmup_steps": 10, "total_steps": 120, "batch_size": 8},
            "expert": {"learning_rate": 6e-5, "warmup_steps": 5, "total_steps": 60, "batch_size": 8},
            "rome_plus": {"learning_rate": 1e-5, "warmup_steps": 2, "total_steps": 40, "batch_size": 8, "trainable": "routers-only"},
            "btx": {"learning_rate": 1e-4, "warmup_steps": 2, "total_steps": 40, "batch_size": 8, "trainable": "routers-only"},
        },
        "lambda": 0.01,
        "top_k": 1,
        "btx_top_k": 2,
        "max_tokens": None,
        "seeds": [0],
        "eval_batch_size": 8,
        "normalize": True,
        "out_dir": "runs/desk3",
    },
    "desk5": {
        "model": {},
        "domains": [
            {"kind": "arith", "size": 400},
            {"kind": "brackets", "size": 400},
            {"kind": "prose", "size": 400},
            {"kind": "caesar", "size": 400},
            {"kind": "hexcode", "size": 400},
        ],
        "corpus_seed": 1234,
        "paragraph_bytes": 110,
        "pretrain_word_limit": 192,
        "train": {
            "seed": {"learning_rate": 6e-4, "warmup_steps": 100, "total_steps": 2000, "batch_size": 8},
            "expert": {"learning_rate": 3e-5, "warmup_steps": 25, "total_steps": 500, "batch_size": 8},
            "rome_plus": {"learning_rate": 1e-5, "warmup_steps": 15, "total_steps": 300, "batch_size": 8, "trainable": "routers-only"},
            "btx": {"learning_rate": 1e-4, "warmup_steps": 15, "total_steps": 300, "batch_size": 8, "trainable": "routers-only"},
        },
        "lambda": 0.01,
        "top_k": 1,
        "btx_top_k": 2,
        "max_tokens": None,
        "seeds": [0, 1, 2],
        "eval_batch_size": 8,
        "normalize": True,
        "out_dir": "runs/desk5",
    },
}


def _deep_update(base: dict, key_path: str, value) -> None:
    keys = key_path.split(".")
    node = base
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def _parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


class Experiment:
    """Resolved experiment config plus derived artifacts naming."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.model = ModelConfig.from_dict({**ModelConfig().to_dict(), **cfg.get("model", {})})
        self.lam = float(cfg.get("lambda", 0.01))
        if self.lam <= 0:
            raise ConfigError("lambda must be > 0")
        self.top_k = int(cfg.get("top_k", 1))
        self.btx_top_k = int(cfg.get("btx_top_k", 2))
        self.max_tokens = cfg.get("max_tokens")
        if self.max_tokens is not None:
            self.max_tokens = int(self.max_tokens)
        self.seeds = [int(s) for s in cfg.get("seeds", [0])]
        self.eval_batch_size = int(cfg.get("eval_batch_size", 8))
        self.normalize = bool(cfg.get("normalize", True))
        self.out_dir = Path(cfg.get("out_dir", "runs/default"))
        self.domains = cfg.get("domains", [])
        if not self.domains:
            raise ConfigError("config must declare at least one domain")
        if not 1 <= self.top_k <= len(self.domains):
            raise ConfigError(f"top_k must be in 1..{len(self.domains)}")
        for d in self.domains:
            if "path" in d and not Path(d["path"]).exists():
                raise ConfigError(f"domain corpus file {d['path']!r} does not exist")
            if "kind" in d and d["kind"] not in SYNTHETIC_KINDS:
                raise ConfigError(f"unknown synthetic kind {d['kind']!r}")
            if "path" not in d and "kind" not in d:
                raise ConfigError("each domain needs a 'kind' or a 'path'")
        self.corpus_seed = int(cfg.get("corpus_seed", 1234))
        self.paragraph_bytes = int(cfg.get("paragraph_bytes", 110))
        self.pretrain_word_limit = cfg.get("pretrain_word_limit")
        if self.pretrain_word_limit is not None:
            self.pretrain_word_limit = int(self.pretrain_word_limit)
            if self.pretrain_word_limit <= 0:
                raise ConfigError("pretrain_word_limit must be a positive word count")
        tr = cfg.get("train", {})
        self.train_cfgs = {
            name: TrainConfig(**tr[name]) for name in ("seed", "expert", "rome_plus", "btx") if name in tr
        }
        for required in ("seed", "expert"):
            if required not in self.train_cfgs:
                raise ConfigError(f"config.train must define {required!r}")
        canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
        self.config_hash = hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def build_corpora(self, domains=None, seed_offset: int = 0, word_limit=None) -> list:
        specs = self.domains if domains is None else domains
        out = []
        for d, spec in enumerate(specs):
            if "path" in spec:
                out.append(
                    ingest_text_file(
                        spec["path"],
                        domain_id=d,
                        name=spec.get("name"),
                        fractions=tuple(spec.get("fractions", (0.8, 0.1, 0.1))),
                    )
                )
            else:
                out.append(
                    gen_synthetic_domain(
                        spec["kind"],
                        int(spec.get("size", 400)),
                        self.corpus_seed + seed_offset + 1000 * d,
                        domain_id=d,
                        name=spec.get("name"),
                        paragraph_bytes=int(spec.get("paragraph_bytes", self.paragraph_bytes)),
                        word_limit=word_limit,
                    )
                )
        return out

    def build_seed_corpora(self):
        """Generic pretraining mix for the seed model: the same kinds and
        sizes as the domain manifest, but fresh text with the word vocabulary
        capped, so rarer words appear only in the specialists' corpora.
        None when pretrain_word_limit is unset; the seed model then pretrains
        on the domain mix itself. File-backed domains are reused as-is."""
        if self.pretrain_word_limit is None:
            return None
        return self.build_corpora(seed_offset=555000, word_limit=self.pretrain_word_limit)

    def ladder_spec(self) -> LadderSpec:
        base = eval_harness.default_ladder_spec(self.model)
        return LadderSpec(
            model=self.model,
            seed_train=self.train_cfgs["seed"],
            expert_train=self.train_cfgs["expert"],
            rome_plus_train=self.train_cfgs.get("rome_plus", base.rome_plus_train),
            btx_train=self.train_cfgs.get("btx", base.btx_train),
            lam=self.lam,
            top_k=self.top_k,
            btx_top_k=self.btx_top_k,
            max_tokens=self.max_tokens,
            eval_batch_size=self.eval_batch_size,
            normalize=self.normalize,
        )

    # artifact paths
    def seed_ckpt(self, seed: int) -> Path:
        return self.out_dir / f"seed_{seed}.ckpt"

    def expert_ckpt(self, seed: int, d: int) -> Path:
        return self.out_dir / f"expert_{seed}_{d}.ckpt"

    def moe_ckpt(self, seed: int, tag: str) -> Path:
        return self.out_dir / f"moe_{seed}_{tag}.ckpt"

    def stats_path(self, seed: int, tag: str = "rome") -> Path:
        return self.out_dir / f"stats_{seed}_{tag}.rstat"


def load_experiment(config_arg: str, overrides=None) -> Experiment:
    if config_arg.startswith("builtin:"):
        name = config_arg.split(":", 1)[1]
        if name not in BUILTIN_CONFIGS:
            raise ConfigError(
                f"unknown builtin config {name!r}; available: {sorted(BUILTIN_CONFIGS)}"
            )
        cfg = copy.deepcopy(BUILTIN_CONFIGS[name])
    else:
        p = Path(config_arg)
        if not p.exists():
            raise MissingArtifactError(f"config file {p} does not exist")
        try:
            cfg = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    for item in overrides or []:
        key, value = _parse_override(item)
        _deep_update(cfg, key, value)
    return Experiment(cfg)


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} not found at {path}; run the producing command first")
    return Path(path)


def _check_hash(meta: dict, exp: Experiment, force: bool, path) -> None:
    h = meta.get("config_hash")
    if h is not None and h != exp.config_hash and not force:
        raise ConfigError(
            f"{path} was produced by config {h}, current config is {exp.config_hash}; "
            "pass --force to evaluate anyway"
        )


def cmd_pretrain(exp: Experiment, args) -> int:
    corpora = exp.build_seed_corpora() or exp.build_corpora()
    for seed in exp.seeds:
        params = init_params(exp.model, seed)
        tc = replace(exp.train_cfgs["seed"], seed=seed)
        trained, history = train(params, corpora, tc)
        path = exp.seed_ckpt(seed)
        save_checkpoint(trained, exp.model, path, {"config_hash": exp.config_hash})
        write_history_csv(history, exp.out_dir / f"seed_{seed}_history.csv")
        print(f"seed {seed}: final loss {history[-1][2]:.4f} -> {path}")
    return 0


def cmd_branch(exp: Experiment, args) -> int:
    corpora = exp.build_corpora()
    for seed in exp.seeds:
        seed_params, _ = load_checkpoint(_require(exp.seed_ckpt(seed), "seed checkpoint"))
        for c in corpora:
            tc = replace(exp.train_cfgs["expert"], seed=seed * 101 + c.domain_id)
            expert, history = train(seed_params, c, tc)
            path = exp.expert_ckpt(seed, c.domain_id)
            save_checkpoint(expert, exp.model, path, {"config_hash": exp.config_hash})
            write_history_csv(history, exp.out_dir / f"expert_{seed}_{c.domain_id}_history.csv")
            print(f"seed {seed} domain {c.domain_id} ({c.name}): final loss {history[-1][2]:.4f} -> {path}")
    return 0


def _load_experts(exp: Experiment, seed: int) -> list:
    experts = []
    for d in range(len(exp.domains)):
        params, _ = load_checkpoint(_require(exp.expert_ckpt(seed, d), f"expert {d} checkpoint"))
        experts.append(params)
    return experts


def cmd_merge(exp: Experiment, args) -> int:
    names = [d.get("name") or d.get("kind") or Path(d["path"]).stem for d in exp.domains]
    for seed in exp.seeds:
        experts = _load_experts(exp, seed)
        moe = assemble_moe(
            experts,
            "random" if args.router_init == "random" else "uninitialized",
            top_k=exp.top_k,
            router_seed=seed,
            domain_names=names,
        )
        path = exp.moe_ckpt(seed, "merged")
        save_moe_checkpoint(moe, path, {"config_hash": exp.config_hash})
        print(f"seed {seed}: merged {len(experts)} experts -> {path}")
    return 0


def cmd_fit_routers(exp: Experiment, args) -> int:
    corpora = exp.build_corpora()
    stats_corpora = corpora
    if args.stats_corpora:
        manifest = json.loads(Path(args.stats_corpora).read_text(encoding="utf-8"))
        stats_corpora = exp.build_corpora(domains=manifest, seed_offset=777)
    lam = args.lam if args.lam is not None else exp.lam
    max_tokens = args.max_tokens if args.max_tokens is not None else exp.max_tokens
    normalize = exp.normalize and not args.no_normalize
    for seed in exp.seeds:
        moe, meta = load_moe_checkpoint(_require(exp.moe_ckpt(seed, "merged"), "merged checkpoint"))
        counters = CostCounters()
        moe, stats = fit_routers_pipeline(
            moe,
            stats_corpora,
            lam=lam,
            max_tokens=max_tokens,
            batch_size=exp.eval_batch_size,
            seq_len=exp.model.max_seq_len,
            normalize=normalize,
            counters=counters,
        )
        ck = exp.moe_ckpt(seed, "rome")
        save_moe_checkpoint(moe, ck, {"config_hash": exp.config_hash})
        sp = exp.stats_path(seed)
        save_stats(stats, sp)
        print(
            f"seed {seed}: fitted routers (lambda={lam}, forwards={counters.forward_passes}, "
            f"backwards={counters.backward_passes}) -> {ck}, {sp}"
        )
    return 0


def cmd_finetune_routers(exp: Experiment, args) -> int:
    corpora = exp.build_corpora()
    for seed in exp.seeds:
        if args.init == "ridge":
            moe, _ = load_moe_checkpoint(_require(exp.moe_ckpt(seed, "rome"), "ridge-fit checkpoint"))
            tc = replace(exp.train_cfgs["rome_plus"], seed=seed * 19 + 7)
            tag = "rome_plus"
        else:
            moe, _ = load_moe_checkpoint(_require(exp.moe_ckpt(seed, "merged"), "merged checkpoint"))
            if not moe.routers_initialized():
                names = moe.domain_names
                moe = assemble_moe(
                    _load_experts(exp, seed),
                    "random",
                    top_k=exp.btx_top_k,
                    router_seed=seed * 13 + 5,
                    domain_names=names,
                )
            moe.top_k = exp.btx_top_k
            tc = replace(exp.train_cfgs["btx"], seed=seed * 17 + 3)
            tag = "btx"
        counters = CostCounters()
        moe, history = finetune_routers(moe, corpora, tc, counters=counters)
        path = exp.moe_ckpt(seed, tag)
        save_moe_checkpoint(moe, path, {"config_hash": exp.config_hash})
        write_history_csv(history, exp.out_dir / f"{tag}_{seed}_history.csv")
        print(
            f"seed {seed}: finetuned routers ({tag}, backwards={counters.backward_passes}) -> {path}"
        )
    return 0


def cmd_eval(exp: Experiment, args) -> int:
    corpora = exp.build_corpora()
    ckpt = Path(args.ckpt) if args.ckpt else exp.moe_ckpt(exp.seeds[0], "rome")
    _require(ckpt, "checkpoint")
    meta, _ = read_container(ckpt, MODEL_MAGIC)
    _check_hash(meta, exp, args.force, ckpt)
    if meta.get("kind") == "moe":
        model, _ = load_moe_checkpoint(ckpt)
        policy_factory = {
            "learned": RoutingPolicy.learned,
            "oracle": RoutingPolicy.oracle,
            "random": lambda: RoutingPolicy.random(0),
        }[args.policy]
    else:
        model, _ = load_checkpoint(ckpt)
        policy_factory = lambda: None
    counters = CostCounters()
    ppl = []
    for c in corpora:
        ppl.append(
            eval_perplexity(
                model, c, policy=policy_factory(), batch_size=exp.eval_batch_size, counters=counters
            )
        )
    result = {
        "checkpoint": str(ckpt),
        "policy": args.policy if meta.get("kind") == "moe" else "dense",
        "domains": [c.name for c in corpora],
        "perplexity": ppl,
        "counters": counters.as_dict(),
    }
    refs_available = all(exp.expert_ckpt(exp.seeds[0], d).exists() for d in range(len(corpora)))
    if refs_available:
        experts = _load_experts(exp, exp.seeds[0])
        grid = dense_grid(experts, corpora, batch_size=exp.eval_batch_size)
        p_hat = np.diag(grid)
        scores, pbar = normalized_score(ppl, p_hat)
        result["reference_perplexity"] = [float(x) for x in p_hat]
        result["normalized_scores"] = [float(s) for s in scores]
        result["pbar"] = pbar
    if meta.get("kind") == "moe" and args.policy == "learned":
        acc = routing_accuracy(model, corpora, batch_size=exp.eval_batch_size)
        result["routing_accuracy_per_layer"] = [float(a) for a in acc]
    out = exp.out_dir / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=2, sort_keys=True), encoding="utf-8")
    for key in ("perplexity", "normalized_scores", "pbar", "routing_accuracy_per_layer"):
        if key in result:
            print(f"{key}: {result[key]}")
    print(f"wrote {out}")
    return 0


def cmd_ladder(exp: Experiment, args) -> int:
    corpora = exp.build_corpora()
    stats_corpora = None
    if args.stats_corpora:
        manifest = json.loads(Path(args.stats_corpora).read_text(encoding="utf-8"))
        stats_corpora = exp.build_corpora(domains=manifest, seed_offset=777)
    report = run_ladder(
        exp.ladder_spec(),
        corpora,
        exp.seeds,
        stats_corpora=stats_corpora,
        seed_corpora=exp.build_seed_corpora(),
    )
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    (exp.out_dir / "ladder.tsv").write_text(report.to_tsv(), encoding="utf-8")
    (exp.out_dir / "ladder.json").write_text(report.to_json(), encoding="utf-8")
    print(report.table())
    print(f"wrote {exp.out_dir / 'ladder.tsv'} and ladder.json")
    return 0


def cmd_sweep(exp: Experiment, args) -> int:
    corpora = exp.build_corpora()
    values = []
    for raw in args.values.split(","):
        raw = raw.strip()
        if args.axis == "lambda":
            values.append(float(raw))
        elif raw in ("inf", "none", "unlimited"):
            values.append(None)
        else:
            values.append(int(raw))
    rows = run_sweep(
        exp.ladder_spec(),
        corpora,
        exp.seeds,
        args.axis,
        values,
        seed_corpora=exp.build_seed_corpora(),
    )
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    out = exp.out_dir / f"sweep_{args.axis}.csv"
    sweep_rows_to_csv(rows, out, args.axis)
    for v, mean, std in rows:
        print(f"{args.axis}={'inf' if v is None else v}: pbar {mean:.2f} +/- {std:.2f}")
    print(f"wrote {out}")
    return 0


def cmd_add_domain(exp: Experiment, args) -> int:
    corpora = exp.build_corpora()
    D = len(corpora)
    if args.new_kind:
        new_corpus = gen_synthetic_domain(
            args.new_kind,
            args.new_size,
            exp.corpus_seed + 9999,
            domain_id=D,
            paragraph_bytes=exp.paragraph_bytes,
        )
    elif args.new_path:
        new_corpus = ingest_text_file(args.new_path, domain_id=D)
    else:
        raise ConfigError("add-domain needs --new-kind or --new-path")
    for seed in exp.seeds:
        moe, _ = load_moe_checkpoint(_require(exp.moe_ckpt(seed, "rome"), "ridge-fit checkpoint"))
        stats = load_stats(_require(exp.stats_path(seed), "ridge statistics"))
        if args.new_expert:
            new_expert, _ = load_checkpoint(Path(args.new_expert), expect_config=exp.model)
        else:
            seed_params, _ = load_checkpoint(_require(exp.seed_ckpt(seed), "seed checkpoint"))
            tc = replace(exp.train_cfgs["expert"], seed=seed * 101 + D)
            new_expert, _ = train(seed_params, new_corpus, tc)
        before = routing_accuracy(moe, corpora, batch_size=exp.eval_batch_size)
        grown, grown_stats = add_domain(
            stats,
            moe,
            new_expert,
            new_corpus,
            lam=exp.lam,
            max_tokens=exp.max_tokens,
            batch_size=exp.eval_batch_size,
            seq_len=exp.model.max_seq_len,
            normalize=exp.normalize,
            reaverage_trunk=not args.pin_trunk,
        )
        after = routing_accuracy(grown, corpora, batch_size=exp.eval_batch_size)
        ck = exp.moe_ckpt(seed, "grown")
        save_moe_checkpoint(grown, ck, {"config_hash": exp.config_hash})
        save_stats(grown_stats, exp.stats_path(seed, "grown"))
        print(
            f"seed {seed}: added domain {new_corpus.name!r} (D={D} -> {D + 1}); "
            f"original-domain layer-1 routing accuracy {before[1]:.3f} -> {after[1]:.3f} -> {ck}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moeup",
        description="Upcycle dense domain experts into a sparse MoE with ridge-initialized routers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config path or builtin:<name>")
        p.add_argument("--set", action="append", dest="overrides", metavar="KEY=VALUE",
                       help="override a config field (dotted path, JSON value)")

    common(sub.add_parser(
        "pretrain",
        help="train the shared seed model (domain mix, or a vocabulary-capped "
        "generic mix when the config sets pretrain_word_limit)",
    ))
    common(sub.add_parser("branch", help="finetune one dense expert per domain from the seed"))
    p = sub.add_parser("merge", help="average trunks and install expert banks")
    common(p)
    p.add_argument("--router-init", choices=["uninitialized", "random"], default="uninitialized")
    p = sub.add_parser("fit-routers", help="stream ridge statistics and solve routers in closed form")
    common(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--max-tokens", type=int, default=None)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--stats-corpora", default=None,
                   help="JSON domain manifest for out-of-distribution statistics")
    p = sub.add_parser("finetune-routers", help="gradient-finetune routers only")
    common(p)
    p.add_argument("--init", choices=["ridge", "random"], required=True)
    p = sub.add_parser("eval", help="evaluate one checkpoint across all domains")
    common(p)
    p.add_argument("--ckpt", default=None, help="checkpoint to evaluate (default: first seed's ridge fit)")
    p.add_argument("--policy", choices=["learned", "oracle", "random"], default="learned")
    p.add_argument("--force", action="store_true", help="ignore config-hash mismatches")
    p = sub.add_parser("ladder", help="train suites and emit the full baseline comparison table")
    common(p)
    p.add_argument("--stats-corpora", default=None)
    p = sub.add_parser("sweep", help="sweep lambda, top_k, or max_tokens and emit a CSV")
    common(p)
    p.add_argument("--axis", choices=["lambda", "top_k", "max_tokens"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values; 'inf' = unlimited")
    p = sub.add_parser("add-domain", help="grow the fitted model by one domain without refitting old data")
    common(p)
    p.add_argument("--new-kind", choices=list(SYNTHETIC_KINDS), default=None)
    p.add_argument("--new-size", type=int, default=400)
    p.add_argument("--new-path", default=None)
    p.add_argument("--new-expert", default=None, help="checkpoint of the new domain's expert")
    p.add_argument("--pin-trunk", action="store_true",
                   help="keep the old trunk instead of re-averaging over D+1 experts")
    return parser


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "branch": cmd_branch,
    "merge": cmd_merge,
    "fit-routers": cmd_fit_routers,
    "finetune-routers": cmd_finetune_routers,
    "eval": cmd_eval,
    "ladder": cmd_ladder,
    "sweep": cmd_sweep,
    "add-domain": cmd_add_domain,
}


def main(argv=None) -> int:
    threads = os.environ.get("MOEUP_THREADS")
    if threads:
        try:
            torch.set_num_threads(int(threads))
        except ValueError:
            print(f"MOEUP_THREADS={threads!r} is not an integer", file=sys.stderr)
            return 2
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        exp = load_experiment(args.config, args.overrides)
        exp.out_dir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](exp, args)
    except MoeupError as exc:
        print(f"moeup {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
