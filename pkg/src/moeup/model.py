"""Minimal decoder-only transformer shared by every dense expert.

Architecture: byte embedding, L pre-norm blocks (RMS norm, causal multi-head
attention with rotary positions, RMS norm, SiLU-gated MLP), final RMS norm,
untied output head. Parameters live in an ordered name -> torch tensor map;
names containing ".mlp." form the MLP group that merging turns into per-layer
expert banks, everything else is trunk. The walk over trunk blocks is factored
out so the merged model runs the exact same trunk math and only swaps how the
MLP output at each layer is produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Batch, PAD_ID, VOCAB_SIZE
from .errors import (
    ConfigError,
    DimensionMismatchError,
    NonFiniteError,
    ShapeMismatchError,
)
from .serialization import MODEL_MAGIC, read_container, require_shape, write_container

NORM_EPS = 1e-5
ROPE_THETA = 10000.0
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    hidden_size: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_hidden: int = 256
    max_seq_len: int = 128
    pad_id: int = PAD_ID

    def __post_init__(self):
        for name in ("vocab_size", "hidden_size", "n_layers", "n_heads", "mlp_hidden", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"ModelConfig.{name} must be positive")
        if self.hidden_size % self.n_heads != 0:
            raise ConfigError("hidden_size must be divisible by n_heads")
        if not 0 <= self.pad_id < self.vocab_size:
            raise ConfigError("pad_id must be a valid token id")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "hidden_size": self.hidden_size,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "mlp_hidden": self.mlp_hidden,
            "max_seq_len": self.max_seq_len,
            "pad_id": self.pad_id,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**{k: int(v) for k, v in d.items()})


def desk_config() -> ModelConfig:
    return ModelConfig()


def tensor_shapes(config: ModelConfig) -> dict:
    """Ordered name -> shape map; the single source of truth for layout."""
    H, M, V = config.hidden_size, config.mlp_hidden, config.vocab_size
    shapes = {"embed": (V, H)}
    for l in range(config.n_layers):
        p = f"layers.{l}"
        shapes[f"{p}.attn_norm"] = (H,)
        shapes[f"{p}.attn.wq"] = (H, H)
        shapes[f"{p}.attn.wk"] = (H, H)
        shapes[f"{p}.attn.wv"] = (H, H)
        shapes[f"{p}.attn.wo"] = (H, H)
        shapes[f"{p}.mlp_norm"] = (H,)
        shapes[f"{p}.mlp.w_gate"] = (H, M)
        shapes[f"{p}.mlp.w_up"] = (H, M)
        shapes[f"{p}.mlp.w_down"] = (M, H)
    shapes["final_norm"] = (H,)
    shapes["head"] = (H, V)
    return shapes


def is_mlp_name(name: str) -> bool:
    """MLP-group membership; the pre-MLP norm stays in the trunk because the
    router consumes its output."""
    return ".mlp." in name


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def clone(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            tensors={k: v.detach().clone() for k, v in self.tensors.items()},
        )

    def mlp_tensors(self, layer: int) -> dict:
        p = f"layers.{layer}.mlp."
        return {k: v for k, v in self.tensors.items() if k.startswith(p)}

    def check(self):
        shapes = tensor_shapes(self.config)
        if list(self.tensors.keys()) != list(shapes.keys()):
            raise ShapeMismatchError("parameter name set does not match config layout")
        for name, t in self.tensors.items():
            require_shape(name, t, shapes[name])
            if not torch.isfinite(t).all():
                raise NonFiniteError(f"parameter {name!r} contains non-finite entries")
        return self


def init_params(config: ModelConfig, seed: int, dtype=torch.float32) -> ModelParams:
    """Scaled normal init: std 0.02 everywhere, residual output projections
    (attention out, MLP down) scaled by 1/sqrt(2L), norm gains at 1."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    out_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith("_norm"):
            arr = np.ones(shape, dtype=np.float64)
        else:
            std = INIT_STD
            if name.endswith(".attn.wo") or name.endswith(".mlp.w_down"):
                std *= out_scale
            arr = rng.normal(0.0, std, size=shape)
        tensors[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
    return ModelParams(config=config, tensors=tensors)


def _rms_norm(x: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + NORM_EPS) * weight


def _rope(q: torch.Tensor, k: torch.Tensor) -> tuple:
    # q, k: (B, heads, T, head_dim); rotate half-split pairs by position angle
    head_dim = q.shape[-1]
    T = q.shape[-2]
    half = head_dim // 2
    inv_freq = ROPE_THETA ** (
        -torch.arange(0, half, dtype=q.dtype) * 2.0 / head_dim
    )
    angles = torch.arange(T, dtype=q.dtype)[:, None] * inv_freq[None, :]
    cos = torch.cos(angles)[None, None, :, :]
    sin = torch.sin(angles)[None, None, :, :]

    def rot(x):
        x1, x2 = x[..., :half], x[..., half:]
        return torch.cat([x1 * cos - x2 * sin, x2 * cos + x1 * sin], dim=-1)

    return rot(q), rot(k)


def _attention(x: torch.Tensor, get: Callable, prefix: str, config: ModelConfig) -> torch.Tensor:
    B, T, H = x.shape
    nh = config.n_heads
    hd = H // nh
    q = (x @ get(f"{prefix}.attn.wq")).view(B, T, nh, hd).transpose(1, 2)
    k = (x @ get(f"{prefix}.attn.wk")).view(B, T, nh, hd).transpose(1, 2)
    v = (x @ get(f"{prefix}.attn.wv")).view(B, T, nh, hd).transpose(1, 2)
    q, k = _rope(q, k)
    out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
    out = out.transpose(1, 2).reshape(B, T, H)
    return out @ get(f"{prefix}.attn.wo")


def mlp_apply(x: torch.Tensor, w_gate: torch.Tensor, w_up: torch.Tensor, w_down: torch.Tensor) -> torch.Tensor:
    return (F.silu(x @ w_gate) * (x @ w_up)) @ w_down


@dataclass
class ForwardTrace:
    activations: list
    logits: torch.Tensor
    loss: float | None = None


def forward_trunk(
    get: Callable,
    config: ModelConfig,
    tokens: torch.Tensor,
    mlp_out: Callable,
    capture: bool = False,
) -> ForwardTrace:
    """Shared trunk walk. ``get(name)`` returns a trunk tensor; ``mlp_out(l, x)``
    maps the layer index and the post-norm MLP input to the MLP output.
    Captured activations are the exact tensors handed to ``mlp_out``."""
    if tokens.ndim != 2:
        raise DimensionMismatchError(f"tokens must be B x T, got {tuple(tokens.shape)}")
    if tokens.shape[1] > config.max_seq_len:
        raise DimensionMismatchError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )
    if int(tokens.max()) >= config.vocab_size or int(tokens.min()) < 0:
        raise ConfigError("token id out of range for vocab")
    h = get("embed")[tokens]
    captured = []
    for l in range(config.n_layers):
        p = f"layers.{l}"
        h = h + _attention(_rms_norm(h, get(f"{p}.attn_norm")), get, p, config)
        x = _rms_norm(h, get(f"{p}.mlp_norm"))
        if capture:
            captured.append(x.detach())
        h = h + mlp_out(l, x)
    h = _rms_norm(h, get("final_norm"))
    logits = h @ get("head")
    return ForwardTrace(activations=captured, logits=logits)


def forward(params: ModelParams, batch: Batch, capture: bool = False) -> ForwardTrace:
    tokens = torch.from_numpy(np.ascontiguousarray(batch.tokens))
    get = params.tensors.__getitem__

    def dense_mlp(l: int, x: torch.Tensor) -> torch.Tensor:
        p = f"layers.{l}.mlp"
        return mlp_apply(x, get(f"{p}.w_gate"), get(f"{p}.w_up"), get(f"{p}.w_down"))

    return forward_trunk(get, params.config, tokens, dense_mlp, capture=capture)


def lm_loss_sum(logits: torch.Tensor, batch: Batch) -> tuple:
    """Summed next-token cross-entropy over valid positions plus the count.

    A position t is valid when both t and t+1 hold real tokens. An all-pad
    batch contributes (0, 0).
    """
    tokens = torch.from_numpy(np.ascontiguousarray(batch.tokens))
    mask = torch.from_numpy(np.ascontiguousarray(batch.mask))
    valid = mask[:, :-1] & mask[:, 1:]
    n = int(valid.sum())
    if n == 0:
        return logits.sum() * 0.0, 0
    pred = logits[:, :-1, :][valid]
    target = tokens[:, 1:][valid]
    total = F.cross_entropy(pred, target, reduction="sum")
    return total, n


def lm_loss(logits: torch.Tensor, batch: Batch) -> torch.Tensor:
    """Mean masked next-token cross-entropy as a 0-dim tensor (keeps the
    autograd graph when logits carry one); float() gives the f64 value."""
    total, n = lm_loss_sum(logits, batch)
    if n == 0:
        raise ConfigError("lm_loss: batch has no valid next-token positions")
    return total / n


def save_checkpoint(params: ModelParams, config: ModelConfig, path, extra_meta: dict | None = None) -> None:
    items = [
        (name, t.detach().to(torch.float32).numpy()) for name, t in params.tensors.items()
    ]
    meta = {"kind": "dense", "config": config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, MODEL_MAGIC, meta, items)


def load_checkpoint(path, expect_config: ModelConfig | None = None):
    meta, tensors = read_container(path, MODEL_MAGIC)
    config = ModelConfig.from_dict(meta["config"])
    if expect_config is not None and config != expect_config:
        raise ShapeMismatchError(
            f"checkpoint config {config.to_dict()} does not match requested {expect_config.to_dict()}"
        )
    shapes = tensor_shapes(config)
    out = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise ShapeMismatchError(f"checkpoint missing tensor {name!r}")
        arr = require_shape(name, tensors[name], shape)
        out[name] = torch.from_numpy(np.ascontiguousarray(arr.astype(np.float32)))
    params = ModelParams(config=config, tensors=out)
    return params, config
