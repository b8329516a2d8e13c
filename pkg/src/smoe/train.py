"""Byte-level training: data pipeline, AdamW, loop, BPB eval, checkpoints.

Everything here is deterministic given (seed, config, corpus bytes): batch
offsets come from one seeded generator whose state is checkpointed, so a
resumed run replays the exact byte stream an uninterrupted run would see.
"""

import json
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import balance as bl
from . import metrics as mx
from . import model as md
from .autograd import NumericError, Tensor

CHECKPOINT_MAGIC = b"SMOE"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 1.0

_LOG_KEYS = ("step", "loss_base", "loss_aux", "lr", "cv_per_layer",
             "head_imbalance", "wall_ms")


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 8
    seq_len: int = 128
    lr_peak: float = 0.02
    decay_frac: float = 0.2
    weight_decay: float = 0.0
    lam: float = 0.0
    mode: str = bl.OFF
    m: int = 0
    eval_every: int = 50
    seed: int = 0
    corpus: str = ""

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 < self.decay_frac <= 1.0:
            raise ValueError(f"decay_frac must be in (0, 1], got {self.decay_frac}")
        for name in ("batch_size", "seq_len", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def balance_config(self) -> bl.BalanceConfig:
        return bl.BalanceConfig(lam=self.lam, mode=self.mode, m=self.m)


def default_steps(n_params: int, batch_size: int, seq_len: int) -> int:
    """Step count giving ~20 tokens of training data per model parameter."""
    return max(1, math.ceil(20 * n_params / (batch_size * seq_len)))


# -----------------------------------------------------------------------------
# data
# -----------------------------------------------------------------------------


def tokenize_bytes(data: bytes) -> np.ndarray:
    """Sequence-start marker followed by the raw byte values; lossless."""
    return np.concatenate(
        [[md.BOS], np.frombuffer(bytes(data), dtype=np.uint8)]
    ).astype(np.int64)


def decode_bytes(ids) -> bytes:
    ids = np.asarray(ids)
    return bytes(ids[ids != md.BOS].astype(np.uint8))


@dataclass
class TokenBatch:
    inputs: np.ndarray   # (B, T) ids fed to the model
    targets: np.ndarray  # (B, T) next-token ids, all raw bytes


def load_corpus(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    return np.frombuffer(data, dtype=np.uint8)


def sample_batch(corpus: np.ndarray, seq_len: int, batch_size: int, rng) -> TokenBatch:
    """Contiguous byte windows at seeded offsets, start marker prepended."""
    if len(corpus) < seq_len:
        raise ValueError(
            f"corpus has {len(corpus)} bytes, need at least seq_len={seq_len}"
        )
    offsets = rng.integers(0, len(corpus) - seq_len + 1, size=batch_size)
    windows = np.stack([corpus[o : o + seq_len] for o in offsets]).astype(np.int64)
    bos = np.full((batch_size, 1), md.BOS, dtype=np.int64)
    inputs = np.concatenate([bos, windows[:, :-1]], axis=1)
    return TokenBatch(inputs=inputs, targets=windows)


# -----------------------------------------------------------------------------
# optimizer
# -----------------------------------------------------------------------------


def lr_at(step: int, config: TrainConfig) -> float:
    """Flat peak, then linear decay to zero over the final decay_frac."""
    if step < 0 or step > config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps}]")
    flat_until = (1.0 - config.decay_frac) * config.steps
    if step < flat_until:
        return config.lr_peak
    return config.lr_peak * (config.steps - step) / (config.steps - flat_until)


@dataclass
class OptState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def opt_state_for(model: md.Model) -> OptState:
    state = OptState()
    for name, tens in md.named_params(model):
        state.m[name] = np.zeros_like(tens.data)
        state.v[name] = np.zeros_like(tens.data)
    return state


def clip_global_norm(grads: dict, max_norm: float = CLIP_NORM) -> float:
    """Scale grads in place so their joint l2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = (grads[name] * scale).astype(grads[name].dtype)
    return norm


def adamw_step(named, grads: dict, state: OptState, lr: float,
               weight_decay: float = 0.0) -> None:
    """Bias-corrected AdamW update with decoupled decay, in place.

    named is the (name, Tensor) list of md.named_params; grads maps the
    same names to arrays. Mutating tensor data directly is the one
    sanctioned in-place update, and only runs between tape lifetimes.
    """
    for name, _ in named:
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    c1 = 1.0 - ADAM_BETA1 ** state.t
    c2 = 1.0 - ADAM_BETA2 ** state.t
    for name, tens in named:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        denom = np.sqrt(v / c2) + ADAM_EPS
        if weight_decay:
            tens.data *= 1.0 - lr * weight_decay
        tens.data -= (lr / c1) * m / denom


# -----------------------------------------------------------------------------
# metrics log
# -----------------------------------------------------------------------------


class MetricsLog:
    """Append-only step records with strictly increasing step numbers.

    Serialized as JSON lines. wall_ms is the one wall-clock field; byte
    comparisons between runs should serialize with timing=False, which
    drops it (everything else is deterministic for a fixed seed/config).
    """

    def __init__(self, records=None):
        self.records = []
        for rec in records or []:
            self.append(rec)

    def append(self, rec: dict) -> None:
        if set(rec) != set(_LOG_KEYS):
            raise ValueError(f"record keys {sorted(rec)} != {sorted(_LOG_KEYS)}")
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError(
                f"step {rec['step']} not above {self.records[-1]['step']}"
            )
        self.records.append(dict(rec))

    def __len__(self):
        return len(self.records)

    def to_jsonl(self, timing: bool = True) -> str:
        lines = []
        for rec in self.records:
            out = {k: rec[k] for k in _LOG_KEYS if timing or k != "wall_ms"}
            lines.append(json.dumps(out, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricsLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                rec.setdefault("wall_ms", 0.0)
                log.append(rec)
        return log


# -----------------------------------------------------------------------------
# training loop
# -----------------------------------------------------------------------------


@dataclass
class TrainState:
    step: int
    opt: OptState
    rng: np.random.Generator


def fresh_state(model: md.Model, seed: int) -> TrainState:
    return TrainState(step=0, opt=opt_state_for(model), rng=np.random.default_rng(seed))


def train_loop(model: md.Model, corpus: np.ndarray, config: TrainConfig,
               shared_sets=None, state: TrainState | None = None,
               log: MetricsLog | None = None, stop_at: int | None = None):
    """Run (config.steps - state.step) optimization steps; returns (model, log).

    The loss is mean next-byte cross-entropy plus the configured balance
    term. A zero lam is skipped outright (the term is identically zero),
    which keeps lam=0 runs bitwise equal to mode="off" runs. Passing a
    state resumes mid-schedule; the caller keeps the reference for
    checkpointing. stop_at interrupts early without altering the LR
    schedule, so a checkpoint written there resumes bitwise. Non-finite
    losses or gradients abort with the step index rather than writing a
    poisoned update.
    """
    bal = config.balance_config()
    if bal.mode == bl.FINETUNE and bal.lam != 0.0 and shared_sets is None:
        raise ValueError("finetune mode needs shared_sets from a calibration pass")
    if state is None:
        state = fresh_state(model, config.seed)
    if log is None:
        log = MetricsLog()
    named = md.named_params(model)
    use_aux = bal.mode != bl.OFF and bal.lam != 0.0
    until = config.steps if stop_at is None else min(stop_at, config.steps)

    while state.step < until:
        t0 = time.perf_counter()
        lr = lr_at(state.step, config)
        batch = sample_batch(corpus, config.seq_len, config.batch_size, state.rng)
        try:
            tape = ag.GradTape()
            with tape:
                logits, records = md.forward(model, batch.inputs)
                base = ag.cross_entropy_from_logits(logits, batch.targets)
                imp = bl.minibatch_importance(records)
                if use_aux and bal.mode == bl.SCRATCH:
                    aux = bl.aux_loss_scratch(imp, bal.lam)
                elif use_aux:
                    aux = bl.aux_loss_finetune(imp, bal.lam, shared_sets)
                else:
                    aux = ag.constant(0.0, logits.dtype)
                total = bl.total_loss(base, aux)
            grads_all = tape.backward(total)
            grads = {name: grads_all.wrt(t) for name, t in named}
            clip_global_norm(grads)
            adamw_step(named, grads, state.opt, lr, config.weight_decay)
        except NumericError as e:
            raise NumericError(f"aborted at step {state.step + 1}: {e}") from e
        state.step += 1
        wall_ms = (time.perf_counter() - t0) * 1e3

        if state.step % config.eval_every == 0 or state.step == config.steps:
            cv_per_layer = [mx.population_cv(t.data) for t in imp]
            log.append({
                "step": state.step,
                "loss_base": base.item(),
                "loss_aux": aux.item(),
                "lr": lr,
                "cv_per_layer": cv_per_layer,
                "head_imbalance": float(np.mean(cv_per_layer)),
                "wall_ms": wall_ms,
            })
    return model, log


# -----------------------------------------------------------------------------
# evaluation
# -----------------------------------------------------------------------------


def evaluate_bpb(model: md.Model, data: np.ndarray, seq_len: int = 128,
                 batch_size: int = 16, zero_value_heads=None) -> float:
    """Bits per byte over non-overlapping windows of the byte stream.

    Every byte is predicted exactly once; start markers are inputs only,
    so they appear in neither the nll sum nor the byte count.
    """
    data = np.asarray(data, dtype=np.uint8)
    if data.size == 0:
        raise ValueError("evaluate_bpb: empty data")
    seq_len = min(seq_len, model.config.max_seq_len)
    total_nll = 0.0
    starts = range(0, len(data), seq_len)
    # group same-length windows into batches; only the tail can be ragged
    groups: dict[int, list] = {}
    for s in starts:
        w = data[s : s + seq_len]
        groups.setdefault(len(w), []).append(w)
    for length, windows in groups.items():
        for i in range(0, len(windows), batch_size):
            block = np.stack(windows[i : i + batch_size]).astype(np.int64)
            bos = np.full((block.shape[0], 1), md.BOS, dtype=np.int64)
            inputs = np.concatenate([bos, block[:, :-1]], axis=1)
            logits, _ = md.forward(model, inputs, zero_value_heads=zero_value_heads)
            mean_nll = ag.cross_entropy_from_logits(logits, block)
            total_nll += mean_nll.item() * block.size
    return total_nll / (math.log(2.0) * len(data))


# -----------------------------------------------------------------------------
# checkpoints
# -----------------------------------------------------------------------------


def _config_to_dict(cfg: md.ModelConfig) -> dict:
    return {
        "d_model": cfg.d_model, "n_layers": cfg.n_layers, "n_heads": cfg.n_heads,
        "vocab_size": cfg.vocab_size, "mlp_hidden": cfg.mlp_hidden,
        "max_seq_len": cfg.max_seq_len, "variant": cfg.variant, "seed": cfg.seed,
    }


def _checkpoint_tensors(model: md.Model, state: TrainState):
    """Stable name -> array listing: parameters, then both moment sets."""
    entries = [(name, t.data) for name, t in md.named_params(model)]
    for name, _ in md.named_params(model):
        entries.append((f"opt.m.{name}", state.opt.m[name]))
    for name, _ in md.named_params(model):
        entries.append((f"opt.v.{name}", state.opt.v[name]))
    return entries


def save_checkpoint(model: md.Model, state: TrainState, path: str) -> None:
    """Magic, version, length-prefixed JSON header, raw little-endian data."""
    entries = _checkpoint_tensors(model, state)
    directory = []
    offset = 0
    payloads = []
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        directory.append({
            "name": name, "shape": list(arr.shape),
            "dtype": arr.dtype.newbyteorder("<").str, "offset": offset,
        })
        payloads.append(raw)
        offset += len(raw)
    header = {
        "config": _config_to_dict(model.config),
        "step": state.step,
        "opt_t": state.opt.t,
        "rng": state.rng.bit_generator.state,
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Inverse of save_checkpoint; returns (model, state).

    Round trips are bitwise: load then save reproduces the file exactly.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 16:
        raise ValueError("truncated checkpoint: missing header prefix")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"version {version}, expected {CHECKPOINT_VERSION}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise ValueError("truncated checkpoint: header cut short")
    header = json.loads(blob[16 : 16 + hlen])
    payload = blob[16 + hlen :]

    cfg = md.ModelConfig(**header["config"])
    arrays = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = entry["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise ValueError(f"truncated checkpoint: tensor {entry['name']} cut short")
        arrays[entry["name"]] = np.frombuffer(
            payload, dtype=dtype, count=count, offset=entry["offset"]
        ).reshape(entry["shape"]).copy()

    param_dtype = arrays["embed"].dtype
    model = md.init_model(cfg, dtype=param_dtype.type)
    opt = OptState(t=header["opt_t"])
    for name, tens in md.named_params(model):
        for prefix, dest in (("", None), ("opt.m.", opt.m), ("opt.v.", opt.v)):
            key = prefix + name
            if key not in arrays:
                raise ValueError(f"checkpoint missing tensor {key}")
            if tuple(arrays[key].shape) != tens.shape:
                raise ValueError(
                    f"tensor {key} has shape {arrays[key].shape}, "
                    f"expected {tens.shape}"
                )
            if dest is None:
                tens.data[...] = arrays[key]
            else:
                dest[name] = arrays[key]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = header["rng"]
    return model, TrainState(step=header["step"], opt=opt, rng=rng)
