"""Closed-form router fitting from streamed per-layer ridge statistics.

For every layer l the fit maintains A_l = sum of F^T F and b_l = sum of F^T Y
over all real tokens seen so far, where F holds the pre-MLP activations
captured while each batch is forwarded to the expert matching its own domain
label, and Y is the one-hot domain target (so column d of b_l accumulates the
plain feature sum of domain d's tokens). Routers are then W*_l =
(A_l + lambda I)^-1 b_l, optionally column-normalized. The statistics are
plain sums, so they are streamable in any batch order, mergeable across
parallel shards, and extendable with new domains without revisiting old data.
No gradient is ever computed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import DomainCorpus, make_batches
from .counters import CostCounters
from .errors import (
    ConfigError,
    NotPositiveDefiniteError,
    ShapeMismatchError,
)
from .model import ModelConfig, ModelParams
from .moerging import MoEModel, RoutingPolicy, moe_forward
from .numerics import solve_spd
from .serialization import STATS_MAGIC, read_container, require_shape, write_container


@dataclass
class RidgeStats:
    """Per-layer (A_l, b_l) sufficient statistics plus per-domain token counts."""

    A: list  # L arrays of H x H float64
    b: list  # L arrays of H x D float64
    token_count: np.ndarray  # D int64
    domain_names: list

    @property
    def n_layers(self) -> int:
        return len(self.A)

    @property
    def hidden_size(self) -> int:
        return self.A[0].shape[0]

    @property
    def n_domains(self) -> int:
        return self.b[0].shape[1]

    def copy(self) -> "RidgeStats":
        return RidgeStats(
            A=[a.copy() for a in self.A],
            b=[m.copy() for m in self.b],
            token_count=self.token_count.copy(),
            domain_names=list(self.domain_names),
        )


@dataclass
class RouterSolution:
    """Solved router matrices; ``normalized`` records whether columns were
    already scaled to unit norm, making a second normalization a no-op."""

    W: list  # L arrays of H x D float64
    lam: float
    normalized: bool = False


def new_stats(config: ModelConfig, n_domains: int, domain_names=None) -> RidgeStats:
    if n_domains < 1:
        raise ConfigError("n_domains must be >= 1")
    H, L = config.hidden_size, config.n_layers
    names = list(domain_names) if domain_names else [f"domain{d}" for d in range(n_domains)]
    if len(names) != n_domains:
        raise ConfigError("domain_names length must equal n_domains")
    return RidgeStats(
        A=[np.zeros((H, H), dtype=np.float64) for _ in range(L)],
        b=[np.zeros((H, n_domains), dtype=np.float64) for _ in range(L)],
        token_count=np.zeros(n_domains, dtype=np.int64),
        domain_names=names,
    )


def masked_features(activation: torch.Tensor, mask: np.ndarray, max_tokens=None) -> np.ndarray:
    """Select real-token rows of one layer's B x T x H activations as float64.

    With ``max_tokens`` set, only the first ``max_tokens`` real tokens of each
    sequence contribute.
    """
    m = np.asarray(mask, dtype=bool)
    if max_tokens is not None:
        if max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1 when given")
        keep = np.cumsum(m, axis=1) <= max_tokens
        m = m & keep
    acts = activation.detach().to(torch.float64).numpy()
    return acts[m]


def accumulate(
    stats: RidgeStats,
    moe: MoEModel,
    batch,
    max_tokens=None,
    counters: CostCounters | None = None,
) -> RidgeStats:
    """Add one batch's contribution to every layer's (A_l, b_l) in place.

    The batch is forwarded once under deterministic_domain routing (routers
    unused, all layers captured simultaneously); column ``batch.domain_id`` of
    each b_l receives the feature sum because the target one-hot has a single
    nonzero at the domain index.
    """
    d = batch.domain_id
    if not 0 <= d < stats.n_domains:
        raise ConfigError(f"batch domain_id {d} out of range for D={stats.n_domains}")
    if moe.config.n_layers != stats.n_layers or moe.config.hidden_size != stats.hidden_size:
        raise ShapeMismatchError("stats shape does not match model config")
    trace, _ = moe_forward(
        moe, batch, RoutingPolicy.deterministic_domain(), capture=True, counters=counters
    )
    n_rows = None
    for l, act in enumerate(trace.activations):
        F = masked_features(act, batch.mask, max_tokens)
        stats.A[l] += F.T @ F
        stats.b[l][:, d] += F.sum(axis=0)
        n_rows = F.shape[0]
    stats.token_count[d] += int(n_rows or 0)
    return stats


def merge_stats(a: RidgeStats, b: RidgeStats) -> RidgeStats:
    """Element-wise sum of two partial statistics (parallel-shard merge)."""
    if (
        a.n_layers != b.n_layers
        or a.hidden_size != b.hidden_size
        or a.n_domains != b.n_domains
        or a.domain_names != b.domain_names
    ):
        raise ShapeMismatchError("cannot merge stats with differing shapes or domains")
    return RidgeStats(
        A=[x + y for x, y in zip(a.A, b.A)],
        b=[x + y for x, y in zip(a.b, b.b)],
        token_count=a.token_count + b.token_count,
        domain_names=list(a.domain_names),
    )


def normalize_solution(sol: RouterSolution) -> RouterSolution:
    """Scale every router column to unit Euclidean norm; zero columns (domains
    with no data) stay zero. Calling twice is a bit-exact no-op."""
    if sol.normalized:
        return sol
    W = []
    for w in sol.W:
        norms = np.linalg.norm(w, axis=0)
        scale = np.where(norms > 0.0, norms, 1.0)
        W.append(w / scale[None, :])
    return RouterSolution(W=W, lam=sol.lam, normalized=True)


def solve_routers(stats: RidgeStats, lam: float = 0.01, normalize: bool = True) -> RouterSolution:
    """W*_l = (A_l + lam I)^-1 b_l for every layer, via the SPD solver."""
    if lam <= 0:
        raise ConfigError("lambda must be > 0")
    W = []
    for l in range(stats.n_layers):
        try:
            W.append(solve_spd(stats.A[l], stats.b[l], ridge=lam))
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(
                exc.pivot, f"layer {l}: {exc}"
            ) from exc
    sol = RouterSolution(W=W, lam=lam, normalized=False)
    return normalize_solution(sol) if normalize else sol


def fit_routers_pipeline(
    moe: MoEModel,
    corpora: list,
    lam: float = 0.01,
    max_tokens=None,
    batch_size: int = 8,
    seq_len: int = 128,
    normalize: bool = True,
    split: str = "train",
    counters: CostCounters | None = None,
    shuffle_seed: int = 0,
):
    """One statistics pass over each corpus, then solve and install routers.

    Returns (moe, stats). Every batch is forwarded exactly once and no
    backward pass happens anywhere in this path.
    """
    if len(corpora) != moe.n_experts:
        raise ConfigError(
            f"{len(corpora)} corpora for {moe.n_experts} experts; counts must match"
        )
    stats = new_stats(moe.config, moe.n_experts, [c.name for c in corpora])
    for c in corpora:
        for batch in make_batches(c, split, batch_size, seq_len, shuffle_seed):
            accumulate(stats, moe, batch, max_tokens=max_tokens, counters=counters)
    sol = solve_routers(stats, lam, normalize=normalize)
    moe.set_routers([w.astype(np.float32) for w in sol.W])
    return moe, stats


def add_domain(
    stats: RidgeStats,
    moe: MoEModel,
    new_expert: ModelParams,
    new_corpus: DomainCorpus,
    lam: float = 0.01,
    max_tokens=None,
    batch_size: int = 8,
    seq_len: int = 128,
    normalize: bool = True,
    reaverage_trunk: bool = True,
    counters: CostCounters | None = None,
    shuffle_seed: int = 0,
):
    """Grow a D-expert model to D+1 without revisiting old domains.

    The old (A_l, b_l) sums are kept; b_l gains a zero column that the new
    corpus then fills. The trunk is re-averaged incrementally as
    (D * old_trunk + new_expert) / (D + 1) unless ``reaverage_trunk`` is off
    (the pinned-trunk mode used by controlled equivalence checks). Returns
    (moe with D+1 experts, expanded stats).
    """
    if new_expert.config != moe.config:
        raise ShapeMismatchError("new expert config does not match the merged model")
    D = moe.n_experts
    if new_corpus.domain_id != D:
        raise ConfigError(
            f"new corpus must carry domain_id {D}, got {new_corpus.domain_id}"
        )
    grown = stats.copy()
    grown.b = [np.concatenate([m, np.zeros((m.shape[0], 1))], axis=1) for m in grown.b]
    grown.token_count = np.concatenate([grown.token_count, [0]])
    grown.domain_names = list(grown.domain_names) + [new_corpus.name]

    if reaverage_trunk:
        trunk = {}
        for name, t in moe.trunk.items():
            acc = t.to(torch.float64) * D + new_expert.tensors[name].to(torch.float64)
            trunk[name] = (acc / (D + 1)).to(t.dtype)
    else:
        trunk = {k: v.detach().clone() for k, v in moe.trunk.items()}

    experts = []
    for l, row in enumerate(moe.experts):
        p = f"layers.{l}.mlp."
        new_w = {
            k: new_expert.tensors[p + k].detach().clone()
            for k in ("w_gate", "w_up", "w_down")
        }
        experts.append([dict(w) for w in row] + [new_w])
    names = (moe.domain_names or grown.domain_names[:D]) + [new_corpus.name]
    moe2 = MoEModel(
        trunk=trunk,
        experts=experts,
        routers=None,
        config=moe.config,
        top_k=moe.top_k,
        domain_names=names,
    )
    if new_corpus.train:  # a domain may join with no data yet; its column stays zero
        for batch in make_batches(new_corpus, "train", batch_size, seq_len, shuffle_seed):
            accumulate(grown, moe2, batch, max_tokens=max_tokens, counters=counters)
    sol = solve_routers(grown, lam, normalize=normalize)
    moe2.set_routers([w.astype(np.float32) for w in sol.W])
    return moe2, grown


def save_stats(stats: RidgeStats, path) -> None:
    meta = {
        "kind": "ridge_stats",
        "n_layers": stats.n_layers,
        "hidden_size": stats.hidden_size,
        "n_domains": stats.n_domains,
        "domain_names": stats.domain_names,
        "token_count": [int(c) for c in stats.token_count],
    }
    items = [(f"A.{l}", stats.A[l]) for l in range(stats.n_layers)]
    items += [(f"b.{l}", stats.b[l]) for l in range(stats.n_layers)]
    write_container(path, STATS_MAGIC, meta, items)


def load_stats(path) -> RidgeStats:
    meta, tensors = read_container(path, STATS_MAGIC)
    L = int(meta["n_layers"])
    H = int(meta["hidden_size"])
    D = int(meta["n_domains"])
    A = [require_shape(f"A.{l}", tensors[f"A.{l}"], (H, H)).astype(np.float64) for l in range(L)]
    b = [require_shape(f"b.{l}", tensors[f"b.{l}"], (H, D)).astype(np.float64) for l in range(L)]
    return RidgeStats(
        A=A,
        b=b,
        token_count=np.asarray(meta["token_count"], dtype=np.int64),
        domain_names=list(meta["domain_names"]),
    )