"""Causal attention in three flavors: vanilla, sink, gated.

Vanilla is standard softmax attention; its first token doubles as a mass
dump, which induces an implicit per-head gate G = 1 - A[:, 0]. Sink adds a
learnable per-head scalar to the softmax denominator, so G = 1 - A_sink
with the closed form sigma(LSE - sink). Gated multiplies head outputs by
an explicit per-head sigmoid gate before the output projection.

Everything here is built from tape primitives and differentiates when a
GradTape is active. The sink training path is fused: one custom primitive
does blocked online softmax and returns (head outputs, LSE) without ever
holding a T x T weight tensor; the gate is applied outside from the LSE.
Materialized-weight functions exist for oracles and offline analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

VANILLA, SINK, GATED = "vanilla", "sink", "gated"
VARIANTS = (VANILLA, SINK, GATED)

_BLOCK = 32  # key-block width of the fused path

# When a test sets this to a list, the fused path appends the shape of every
# score block it allocates; lets tests prove no (T, T) tensor exists.
SCORE_BLOCK_PROBE: list | None = None


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class AttentionParams:
    """Per-layer attention weights.

    w_q/w_k/w_v: (d_model, H*d_h); w_o: (H*d_h, d_model); sink: (H,) for
    the sink variant only; w_theta: (d_model, H) for the gated variant only.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int
    sink: Tensor | None = None
    w_theta: Tensor | None = None

    def __post_init__(self):
        d_model, proj = self.w_q.shape
        if proj % self.n_heads != 0:
            raise ValueError(f"projection width {proj} not divisible by {self.n_heads} heads")
        if self.sink is not None and self.sink.shape != (self.n_heads,):
            raise ValueError(f"sink shape {self.sink.shape} != ({self.n_heads},)")
        if self.w_theta is not None and self.w_theta.shape != (d_model, self.n_heads):
            raise ValueError(f"w_theta shape {self.w_theta.shape} != ({d_model}, {self.n_heads})")

    @property
    def d_head(self) -> int:
        return self.w_q.shape[1] // self.n_heads


@dataclass
class AttentionRecord:
    """Diagnostics from one attention forward.

    gate and lse are always present, shape (B, H, T). sink_weight is the
    per-token mass on the sink component (first token for vanilla) and is
    None for the gated variant, whose gate is a learned function rather
    than softmax mass. z is the materialized logit tensor, None on the
    fused path.
    """

    gate: Tensor
    lse: Tensor
    sink_weight: Tensor | None
    head_outputs: Tensor
    z: Tensor | None = None
    # per-head projections (B, H, T, d_h), kept for offline geometry and
    # value-norm analyses; references to tensors computed anyway
    queries: Tensor | None = None
    keys: Tensor | None = None
    values: Tensor | None = None


def _swap_last2(t: Tensor) -> Tensor:
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return ag.transpose(t, axes)


def causal_mask(t_len: int, dtype=np.float64) -> np.ndarray:
    """(T, T) additive mask: 0 on j <= t, -inf above the diagonal."""
    m = np.zeros((t_len, t_len), dtype=dtype)
    m[np.triu_indices(t_len, k=1)] = -np.inf
    return m


def scaled_logits(q: Tensor, k: Tensor, d_h: int) -> Tensor:
    """z[..., t, j] = dot(q_t, k_j) / sqrt(d_h), -inf where j > t.

    d_h is the scaling denominator and need not equal the trailing extent.
    """
    if d_h <= 0:
        raise ValueError(f"d_h must be positive, got {d_h}")
    z = ag.mul(ag.matmul(q, _swap_last2(k)), ag.constant(1.0 / np.sqrt(d_h), q.dtype))
    return ag.add(z, Tensor(causal_mask(z.shape[-1], q.dtype.type)))


def vanilla_weights(z: Tensor) -> Tensor:
    """Row-stochastic attention weights from masked logits."""
    return ag.stable_softmax(z, axis=-1)


def sink_softmax(z: Tensor, sink) -> tuple[Tensor, Tensor]:
    """Softmax with a learnable extra logit in the denominator.

    Returns (token_weights, sink_weight); each row of token_weights plus
    its sink_weight sums to 1. The max shift runs over tokens and sink
    together, so a dominating sink stays stable. sink may be a scalar or a
    per-head (H,) tensor against z of shape (B, H, T, T).
    """
    if not isinstance(sink, Tensor):
        sink = Tensor(np.asarray(sink, dtype=z.dtype))
    col_shape = z.shape[:-1] + (1,)
    sink_col = ag.add(
        ag.reshape(sink, sink.shape + (1, 1)) if sink.ndim == 1 else sink,
        Tensor(np.zeros(col_shape, dtype=z.dtype.type)),
    )
    full = ag.stable_softmax(ag.concat([z, sink_col], axis=-1), axis=-1)
    t_len = z.shape[-1]
    return full[..., :t_len], full[..., t_len]


def gated_gate(x: Tensor, w_theta: Tensor) -> Tensor:
    """Explicit per-token per-head gate sigma(x @ w_theta), shape (B, T, H)."""
    return ag.sigmoid(ag.matmul(x, w_theta))


def head_output(weights: Tensor, v: Tensor) -> Tensor:
    """O_t = sum_j weights[t, j] * v_j."""
    return ag.matmul(weights, v)


def implicit_gate_from_weights(record: AttentionRecord) -> Tensor:
    """Gate recovered from materialized weights: G = 1 - A_sink."""
    if record.sink_weight is None:
        raise ValueError("record has no sink weight (gated variant or fused run)")
    return ag.sub(
        ag.constant(np.ones((), record.sink_weight.dtype), record.sink_weight.dtype),
        record.sink_weight,
    )


def implicit_gate_lse_vanilla(lse_excl0: Tensor, z0: Tensor) -> Tensor:
    """Vanilla gate in closed form: sigma(LSE over j>=1 minus the j=0 logit).

    Callers handle t=0 separately (no non-first positions exist; the gate
    there is exactly 0 by the weights form).
    """
    return ag.sigmoid(ag.sub(lse_excl0, z0))


def implicit_gate_lse_sink(lse_tokens: Tensor, sink) -> Tensor:
    """Sink gate in closed form: sigma(LSE over real tokens minus sink)."""
    if not isinstance(sink, Tensor):
        sink = Tensor(np.asarray(sink, dtype=lse_tokens.dtype))
    return ag.sigmoid(ag.sub(lse_tokens, sink))


def renormalized_weights(weights: Tensor, sink_weight: Tensor) -> Tensor:
    """Token weights conditioned on not-sink: A / (1 - A_sink); rows sum to 1.

    The denominator is evaluated as the token row sum, which equals
    1 - A_sink exactly in real arithmetic but loses no digits to
    cancellation when the sink soaks up almost all the mass.
    """
    if np.any(sink_weight.data >= 1.0 - 1e-12):
        raise ValueError("sink weight is 1 within 1e-12; renormalization is degenerate")
    return ag.div(weights, ag.sum_(weights, axis=-1, keepdims=True))


# -----------------------------------------------------------------------------
# Fused sink path
# -----------------------------------------------------------------------------


def _flash_attention(q: Tensor, k: Tensor, v: Tensor, scale: float):
    """Blocked causal softmax attention returning (output, lse).

    Online max/sum recurrence over key blocks; score tensors never exceed
    (..., T, _BLOCK). backward recomputes each probability block from the
    saved LSE instead of storing weights. Registered as one tape record
    with both outputs.
    """
    qd, kd, vd = q.data, k.data, v.data
    t_len = qd.shape[-2]
    lead = qd.shape[:-2]
    dt = qd.dtype

    m = np.full(lead + (t_len,), -np.inf, dtype=dt)
    s = np.zeros(lead + (t_len,), dtype=dt)
    acc = np.zeros(lead + (t_len, vd.shape[-1]), dtype=dt)
    rows = np.arange(t_len)[:, None]

    for j0 in range(0, t_len, _BLOCK):
        j1 = min(j0 + _BLOCK, t_len)
        kb = kd[..., j0:j1, :]
        sb = np.matmul(qd, np.swapaxes(kb, -1, -2)) * scale
        if SCORE_BLOCK_PROBE is not None:
            SCORE_BLOCK_PROBE.append(sb.shape)
        sb = np.where(np.arange(j0, j1)[None, :] > rows, -np.inf, sb)
        bm = np.max(sb, axis=-1)
        m_new = np.maximum(m, bm)
        # every row sees key 0 in the first block, so m_new is finite from
        # then on; -inf - finite underflows to exp 0 without NaN
        alpha = np.exp(m - m_new)
        p = np.exp(sb - m_new[..., None])
        s = s * alpha + p.sum(axis=-1)
        acc = acc * alpha[..., None] + np.matmul(p, vd[..., j0:j1, :])
        m = m_new

    out_d = acc / s[..., None]
    lse_d = m + np.log(s)
    out, lse = Tensor(out_d), Tensor(lse_d)

    def bwd(gs):
        g_out, g_lse = gs
        gq = np.zeros_like(qd)
        gk = np.zeros_like(kd)
        gv = np.zeros_like(vd)
        if g_out is not None:
            delta = (g_out * out_d).sum(axis=-1)  # rowwise <dO, O>
        for j0 in range(0, t_len, _BLOCK):
            j1 = min(j0 + _BLOCK, t_len)
            kb = kd[..., j0:j1, :]
            sb = np.matmul(qd, np.swapaxes(kb, -1, -2)) * scale
            if SCORE_BLOCK_PROBE is not None:
                SCORE_BLOCK_PROBE.append(sb.shape)
            sb = np.where(np.arange(j0, j1)[None, :] > rows, -np.inf, sb)
            p = np.exp(sb - lse_d[..., None])
            ds = np.zeros_like(p)
            if g_out is not None:
                dp = np.matmul(g_out, np.swapaxes(vd[..., j0:j1, :], -1, -2))
                gv[..., j0:j1, :] += np.matmul(np.swapaxes(p, -1, -2), g_out)
                ds += p * (dp - delta[..., None])
            if g_lse is not None:
                ds += g_lse[..., None] * p
            gq += np.matmul(ds, kb) * scale
            gk[..., j0:j1, :] += np.matmul(np.swapaxes(ds, -1, -2), qd) * scale
        return gq, gk, gv

    ag.record((out, lse), (q, k, v), bwd)
    return out, lse


def fused_sink_attention(q: Tensor, k: Tensor, v: Tensor, sink) -> tuple[Tensor, Tensor, Tensor]:
    """Sink attention without materialized weights.

    Runs plain softmax attention over real tokens, then scales each row by
    G = sigma(LSE - sink); algebraically identical to dividing by the
    sink-augmented denominator. Returns (O, G, lse) with O: (B, H, T, d_h)
    and G, lse: (B, H, T).
    """
    d_h = q.shape[-1]
    out_tok, lse = _flash_attention(q, k, v, 1.0 / float(np.sqrt(d_h)))
    gate = implicit_gate_lse_sink(lse, _sink_broadcast(sink, lse))
    out = ag.mul(ag.reshape(gate, gate.shape + (1,)), out_tok)
    return out, gate, lse


def _sink_broadcast(sink, like: Tensor):
    """Lift a per-head (H,) sink to broadcast against (..., H, T)."""
    if not isinstance(sink, Tensor):
        sink = Tensor(np.asarray(sink, dtype=like.dtype))
    if sink.ndim == 1:
        return ag.reshape(sink, sink.shape + (1,))
    return sink


# -----------------------------------------------------------------------------
# Multi-head layer
# -----------------------------------------------------------------------------


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    b, t_len, proj = t.shape
    r = ag.reshape(t, (b, t_len, n_heads, proj // n_heads))
    return ag.transpose(r, (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    b, h, t_len, d_h = t.shape
    return ag.reshape(ag.transpose(t, (0, 2, 1, 3)), (b, t_len, h * d_h))


def multi_head_forward(
    x: Tensor, params: AttentionParams, variant: str, zero_first_value=None
) -> tuple[Tensor, AttentionRecord]:
    """One attention layer over x: (B, T, d_model) -> same shape, plus record.

    Vanilla materializes weights (its gate is read off column 0); sink runs
    the fused path; gated materializes weights and applies the explicit
    gate to head outputs before w_o. zero_first_value is an (H,) flag
    vector for analysis evals: flagged heads see the position-0 value
    vector as exactly zero (vanilla only).
    """
    _check_variant(variant)
    if x.ndim != 3:
        raise ValueError(f"expected (batch, T, d_model), got {x.shape}")
    if variant == SINK and params.sink is None:
        raise ValueError("sink variant needs params.sink")
    if variant == GATED and params.w_theta is None:
        raise ValueError("gated variant needs params.w_theta")
    if variant != SINK and params.sink is not None:
        raise ValueError("params.sink is only valid for the sink variant")
    if variant != GATED and params.w_theta is not None:
        raise ValueError("params.w_theta is only valid for the gated variant")
    if zero_first_value is not None and variant != VANILLA:
        raise ValueError("first-value zeroing is defined for the vanilla variant only")

    h, d_h = params.n_heads, params.d_head
    q = _split_heads(ag.matmul(x, params.w_q), h)
    k = _split_heads(ag.matmul(x, params.w_k), h)
    v = _split_heads(ag.matmul(x, params.w_v), h)
    if zero_first_value is not None:
        # multiply by a 0/1 keep mask: times 1.0 is bitwise identity, so
        # unflagged heads and positions t >= 1 are untouched floats
        flags = np.asarray(zero_first_value, dtype=bool)
        keep = np.ones((h, x.shape[1], 1), dtype=x.dtype.type)
        keep[flags, 0, :] = 0.0
        v = ag.mul(v, Tensor(keep))

    if variant == SINK:
        o, gate, lse = fused_sink_attention(q, k, v, params.sink)
        one = ag.constant(np.ones((), x.dtype), x.dtype)
        rec = AttentionRecord(
            gate=gate, lse=lse, sink_weight=ag.sub(one, gate), head_outputs=o,
            z=None, queries=q, keys=k, values=v,
        )
    else:
        z = scaled_logits(q, k, d_h)
        weights = vanilla_weights(z)
        o_std = head_output(weights, v)
        lse = ag.logsumexp(z, axis=-1)
        if variant == VANILLA:
            # first token is the mass dump; row 0 has weight 1 there, gate 0
            first_col = weights[..., 0]
            one = ag.constant(np.ones((), x.dtype), x.dtype)
            gate = ag.sub(one, first_col)
            rec = AttentionRecord(
                gate=gate, lse=lse, sink_weight=first_col, head_outputs=o_std,
                z=z, queries=q, keys=k, values=v,
            )
            o = o_std
        else:
            gate = ag.transpose(gated_gate(x, params.w_theta), (0, 2, 1))
            o = ag.mul(ag.reshape(gate, gate.shape + (1,)), o_std)
            rec = AttentionRecord(
                gate=gate, lse=lse, sink_weight=None, head_outputs=o,
                z=z, queries=q, keys=k, values=v,
            )

    y = ag.matmul(_merge_heads(o), params.w_o)
    return y, rec


def zero_first_value_output(q: Tensor, k: Tensor, v: Tensor, zero_mask) -> Tensor:
    """Vanilla attention with the first value vector zeroed on flagged heads.

    zero_mask: (H,) booleans against inputs shaped (B, H, T, d_h). Flagged
    heads produce exactly the floats of v[0] := 0, which equals the
    renormalized form (1 - A[:, 0]) * sum_{j>=1} A~ v_j.
    """
    zero_mask = np.asarray(zero_mask, dtype=bool)
    weights = vanilla_weights(scaled_logits(q, k, q.shape[-1]))
    vz = v.data.copy()
    vz[:, zero_mask, 0, :] = 0.0
    return head_output(weights, Tensor(vz))
