"""Tiny decoder-only byte LM with a pluggable attention variant.

Pre-norm residual blocks: RMSNorm -> attention -> add, RMSNorm -> 2-matrix
GELU MLP -> add; learned positional embeddings; untied output head; no
biases anywhere. The attention variant is the only moving part between
runs. Weights are float32 for training; oracles re-init at float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as at
from . import autograd as ag
from .autograd import Tensor

BOS = 256  # byte vocab 0..255 plus this start sentinel

_NORM_EPS = 1e-6
_INIT_STD = 0.02
_GELU_C = 0.7978845608028654  # sqrt(2/pi)


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 257
    mlp_hidden: int | None = None  # defaults to 4 * d_model
    max_seq_len: int = 128
    variant: str = at.VANILLA
    seed: int = 0

    def __post_init__(self):
        if self.mlp_hidden is None:
            self.mlp_hidden = 4 * self.d_model
        for name in ("d_model", "n_layers", "n_heads", "vocab_size", "mlp_hidden", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.variant not in at.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerParams:
    ln1: Tensor
    attn: at.AttentionParams
    ln2: Tensor
    mlp_w1: Tensor
    mlp_w2: Tensor


@dataclass
class Model:
    config: ModelConfig
    embed: Tensor
    pos: Tensor
    layers: list[LayerParams]
    ln_f: Tensor
    head: Tensor


def init_model(config: ModelConfig, dtype=np.float32) -> Model:
    """Deterministic init from config.seed.

    Draw order is fixed (embed, pos, then per layer q/k/v/o plus the
    variant extra, then mlp, then head); norm gains start at 1 and sinks
    at 0 without consuming draws, so a given (seed, variant) pair always
    yields bitwise-identical weights.
    """
    rng = np.random.default_rng(config.seed)

    def draw(*shape):
        return Tensor(rng.normal(0.0, _INIT_STD, size=shape).astype(dtype))

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype))

    c = config
    embed = draw(c.vocab_size, c.d_model)
    pos = draw(c.max_seq_len, c.d_model)
    layers = []
    for _ in range(c.n_layers):
        ln1 = ones(c.d_model)
        attn = at.AttentionParams(
            w_q=draw(c.d_model, c.d_model),
            w_k=draw(c.d_model, c.d_model),
            w_v=draw(c.d_model, c.d_model),
            w_o=draw(c.d_model, c.d_model),
            n_heads=c.n_heads,
            sink=Tensor(np.zeros(c.n_heads, dtype=dtype)) if c.variant == at.SINK else None,
            w_theta=draw(c.d_model, c.n_heads) if c.variant == at.GATED else None,
        )
        ln2 = ones(c.d_model)
        layers.append(
            LayerParams(
                ln1=ln1,
                attn=attn,
                ln2=ln2,
                mlp_w1=draw(c.d_model, c.mlp_hidden),
                mlp_w2=draw(c.mlp_hidden, c.d_model),
            )
        )
    return Model(
        config=c,
        embed=embed,
        pos=pos,
        layers=layers,
        ln_f=ones(c.d_model),
        head=draw(c.d_model, c.vocab_size),
    )


def param_count(config: ModelConfig) -> int:
    """Exact parameter count for the configured variant."""
    c = config
    per_layer = c.d_model + 4 * c.d_model * c.d_model + c.d_model
    per_layer += c.d_model * c.mlp_hidden + c.mlp_hidden * c.d_model
    if c.variant == at.SINK:
        per_layer += c.n_heads
    elif c.variant == at.GATED:
        per_layer += c.d_model * c.n_heads
    total = c.vocab_size * c.d_model + c.max_seq_len * c.d_model
    total += c.n_layers * per_layer
    total += c.d_model + c.d_model * c.vocab_size
    return total


def named_params(model: Model) -> list[tuple[str, Tensor]]:
    """Stable (name, tensor) listing; the order defines checkpoint layout."""
    out = [("embed", model.embed), ("pos", model.pos)]
    for i, layer in enumerate(model.layers):
        p = f"layer{i}"
        out.append((f"{p}.ln1", layer.ln1))
        out.append((f"{p}.attn.w_q", layer.attn.w_q))
        out.append((f"{p}.attn.w_k", layer.attn.w_k))
        out.append((f"{p}.attn.w_v", layer.attn.w_v))
        out.append((f"{p}.attn.w_o", layer.attn.w_o))
        if layer.attn.sink is not None:
            out.append((f"{p}.attn.sink", layer.attn.sink))
        if layer.attn.w_theta is not None:
            out.append((f"{p}.attn.w_theta", layer.attn.w_theta))
        out.append((f"{p}.ln2", layer.ln2))
        out.append((f"{p}.mlp_w1", layer.mlp_w1))
        out.append((f"{p}.mlp_w2", layer.mlp_w2))
    out.append(("ln_f", model.ln_f))
    out.append(("head", model.head))
    return out


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    ms = ag.mean_(x * x, axis=-1, keepdims=True)
    inv = (ms + _NORM_EPS) ** -0.5
    return ag.mul(ag.mul(x, inv), gain)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    inner = ag.mul(x + (x * x * x) * 0.044715, ag.constant(_GELU_C, x.dtype))
    one = ag.constant(np.ones((), x.dtype), x.dtype)
    return ag.mul(ag.mul(x, ag.constant(0.5, x.dtype)), one + ag.tanh(inner))


def forward(
    model: Model, token_ids: np.ndarray, zero_value_heads: np.ndarray | None = None
) -> tuple[Tensor, list[at.AttentionRecord]]:
    """Logits (B, T, vocab) plus one attention record per layer.

    zero_value_heads is an optional (n_layers, n_heads) boolean mask for
    first-value-zeroing evals (vanilla variant only).
    """
    c = model.config
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise ValueError(f"token_ids must be (batch, T), got {token_ids.shape}")
    t_len = token_ids.shape[1]
    if t_len > c.max_seq_len:
        raise ValueError(f"sequence length {t_len} exceeds max_seq_len {c.max_seq_len}")
    if zero_value_heads is not None:
        zero_value_heads = np.asarray(zero_value_heads, dtype=bool)
        if zero_value_heads.shape != (c.n_layers, c.n_heads):
            raise ValueError(
                f"zero_value_heads shape {zero_value_heads.shape} != "
                f"({c.n_layers}, {c.n_heads})"
            )

    x = ag.add(ag.take_rows(model.embed, token_ids), model.pos[:t_len])
    records = []
    for li, layer in enumerate(model.layers):
        zmask = None if zero_value_heads is None else zero_value_heads[li]
        a, rec = at.multi_head_forward(
            rmsnorm(x, layer.ln1), layer.attn, c.variant, zero_first_value=zmask
        )
        records.append(rec)
        x = ag.add(x, a)
        h = ag.matmul(gelu(ag.matmul(rmsnorm(x, layer.ln2), layer.mlp_w1)), layer.mlp_w2)
        x = ag.add(x, h)
    logits = ag.matmul(rmsnorm(x, model.ln_f), model.head)
    return logits, records
