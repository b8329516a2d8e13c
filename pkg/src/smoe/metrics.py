"""Gate and head diagnostics: importance, imbalance, sink ratios, PCA.

Everything here aggregates over immutable forward records or plain arrays
and is deterministic; the CSV/JSON emission lives in the cli module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class GateStats:
    """Running flat pool of gates over every (sample, position) pair.

    gate_sum is (n_layers, n_heads); token_count is shared by all layers.
    Pooling is flat: a batch of 2 sequences of length 128 adds 256 tokens,
    so short samples are not over-weighted the way a mean of means would.
    """

    gate_sum: np.ndarray
    token_count: int = 0

    @classmethod
    def empty(cls, n_layers: int, n_heads: int) -> "GateStats":
        return cls(np.zeros((n_layers, n_heads), dtype=np.float64), 0)

    def update(self, records) -> None:
        """Fold one forward's per-layer attention records into the pool."""
        if len(records) != self.gate_sum.shape[0]:
            raise ValueError(
                f"{len(records)} records for {self.gate_sum.shape[0]} layers"
            )
        for li, rec in enumerate(records):
            g = rec.gate.data  # (B, H, T)
            self.gate_sum[li] += g.sum(axis=(0, 2), dtype=np.float64)
        b, _, t_len = records[0].gate.data.shape
        self.token_count += b * t_len


@dataclass
class HeadImportanceMap:
    imp: np.ndarray  # (n_layers, n_heads), each entry in [0, 1]
    token_count: int


@dataclass
class ImbalanceReport:
    cv_per_layer: np.ndarray
    overall: float
    n_layers: int
    n_heads: int


@dataclass
class SinkRatioMap:
    alpha: np.ndarray  # (n_layers, n_heads) mean sink weight, in [0, 1]


def head_importance(stats: GateStats) -> HeadImportanceMap:
    """Mean gate per head over the whole pooled token set."""
    if stats.token_count < 1:
        raise ValueError("no tokens pooled; run at least one forward pass")
    imp = stats.gate_sum / stats.token_count
    if imp.min() < -1e-9 or imp.max() > 1.0 + 1e-9:
        raise ValueError("importance left [0, 1]; gate accounting is broken")
    return HeadImportanceMap(np.clip(imp, 0.0, 1.0), stats.token_count)


def population_cv(values: np.ndarray) -> float:
    """std/mean with population (divide-by-N) std; 0 when the mean is ~0."""
    mean = float(np.mean(values))
    if mean < 1e-12:
        return 0.0
    return float(np.std(values)) / mean


def head_imbalance(imp_map: HeadImportanceMap) -> ImbalanceReport:
    """Per-layer CV of head importances and their mean over layers."""
    imp = imp_map.imp
    cv = np.array([population_cv(row) for row in imp])
    return ImbalanceReport(
        cv_per_layer=cv,
        overall=float(cv.mean()),
        n_layers=imp.shape[0],
        n_heads=imp.shape[1],
    )


def sink_ratio(records, t_limit: int | None = None) -> SinkRatioMap:
    """Per-layer per-head mean sink weight over batch and position.

    Only meaningful for variants with a sink component; gated records
    carry no sink weight and raise.
    """
    rows = []
    for rec in records:
        if rec.sink_weight is None:
            raise ValueError("record has no sink weight (gated variant)")
        sw = rec.sink_weight.data
        if t_limit is not None:
            sw = sw[..., :t_limit]
        rows.append(sw.mean(axis=(0, 2)))
    return SinkRatioMap(np.stack(rows))


def value_l2_norms(v) -> np.ndarray:
    """L2 norm of each value vector: (..., T, d) -> (..., T)."""
    data = v.data if isinstance(v, Tensor) else np.asarray(v)
    return np.linalg.norm(data, axis=-1)


def select_top_m_heads(imp_map: HeadImportanceMap, m: int) -> list[list[int]]:
    """Indices of the m most important heads per layer, ties to lower index.

    Returned index lists are sorted ascending. Increasing m always yields
    a superset of the smaller selection.
    """
    n_heads = imp_map.imp.shape[1]
    if not 0 <= m <= n_heads:
        raise ValueError(f"m={m} outside [0, {n_heads}]")
    sets = []
    for row in imp_map.imp:
        order = np.argsort(-row, kind="stable")  # stable sort = lower index wins ties
        sets.append(sorted(int(i) for i in order[:m]))
    return sets


# -----------------------------------------------------------------------------
# PCA
# -----------------------------------------------------------------------------


def _jacobi_eigh(a: np.ndarray, sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix, f64.

    Returns (eigenvalues, eigenvectors-as-columns), unsorted. Rotations
    repeat until the off-diagonal mass is at rounding level.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= 1e-14 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.array([[c, s], [-s, c]])
                a[[p, q], :] = rot.T @ a[[p, q], :]
                a[:, [p, q]] = a[:, [p, q]] @ rot
                v[:, [p, q]] = v[:, [p, q]] @ rot
    return np.diag(a).copy(), v


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude coordinate is positive."""
    out = components.copy()
    for i, row in enumerate(out):
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            out[i] = -row
    return out


def pca_2d(vectors) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project points onto their top-2 principal axes.

    vectors: (N, D) with N >= 2, D >= 2. Returns (projections (N, 2),
    components (2, D) as rows, explained_variance (2,)) where explained
    variance uses the sample (N-1) convention. All-identical points have
    no principal direction and raise.
    """
    x = np.asarray(
        vectors.data if isinstance(vectors, Tensor) else vectors, dtype=np.float64
    )
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"need (N>=2, D>=2) points, got {x.shape}")
    centered = x - x.mean(axis=0)
    if np.max(np.abs(centered)) == 0.0:
        raise ValueError("all points identical; no principal directions")
    cov = centered.T @ centered / (x.shape[0] - 1)
    evals, evecs = _jacobi_eigh(cov)
    order = np.argsort(-evals, kind="stable")[:2]
    components = _fix_signs(evecs[:, order].T)
    explained = np.maximum(evals[order], 0.0)
    return centered @ components.T, components, explained
