"""Encoding statistics, their aggregation, and the losses built on them.

Statistics are raw batch moments, so the statistics of a union of batches
are the count-weighted mean of the per-batch statistics. Inside a graph the
vector statistics are kept as ``1 x d`` nodes; :class:`EncodingStats`
stores them as flat length-``d`` arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import (
    BatchTooSmall,
    DegenerateVariance,
    DimensionMismatch,
    DimensionTooSmall,
    EmptyList,
    ParseError,
    ShapeMismatch,
)

STAT_FIELDS = ("mean_f", "mean_f2", "mean_g", "mean_g2", "cross")
DEFAULT_EPS = 1e-8
DEFAULT_LAMBDA = 20.0
DEFAULT_TEMPERATURE = 0.1


@dataclass(frozen=True)
class EncodingStats:
    mean_f: np.ndarray
    mean_f2: np.ndarray
    mean_g: np.ndarray
    mean_g2: np.ndarray
    cross: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean_f.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, f) for f in STAT_FIELDS)

    def max_abs_diff(self, other: EncodingStats) -> float:
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.arrays(), other.arrays()))

    def bitwise_equal(self, other: EncodingStats) -> bool:
        return self.count == other.count and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass(frozen=True)
class StatNodes:
    """Graph-resident statistics. Vector fields are ``1 x d`` nodes."""

    mean_f: ad.Node
    mean_f2: ad.Node
    mean_g: ad.Node
    mean_g2: ad.Node
    cross: ad.Node
    count: int

    @property
    def dim(self) -> int:
        return self.mean_f.shape[1]

    def nodes(self) -> tuple[ad.Node, ...]:
        return tuple(getattr(self, f) for f in STAT_FIELDS)

    def values(self) -> EncodingStats:
        vals = [n.value.reshape(-1) if f != "cross" else n.value
                for f, n in zip(STAT_FIELDS, self.nodes())]
        return EncodingStats(*(np.array(v) for v in vals), count=self.count)


def local_stats(F: ad.Node, G: ad.Node) -> StatNodes:
    """Batch means of ``F``, ``F**2``, ``G``, ``G**2`` and ``F_i G_j``."""
    if F.shape != G.shape or len(F.shape) != 2:
        raise ShapeMismatch(f"F {F.shape} and G {G.shape} must be equal N x d")
    n = F.shape[0]
    if n < 1:
        raise ShapeMismatch("empty batch")
    return StatNodes(
        mean_f=ad.mean(F, axis=0, keepdims=True),
        mean_f2=ad.mean(ad.square(F), axis=0, keepdims=True),
        mean_g=ad.mean(G, axis=0, keepdims=True),
        mean_g2=ad.mean(ad.square(G), axis=0, keepdims=True),
        cross=(F.T @ G) / n,
        count=n,
    )


def local_stats_values(F: np.ndarray, G: np.ndarray) -> EncodingStats:
    g = ad.Graph()
    return local_stats(g.constant(F), g.constant(G)).values()


def weighted_mean(arrays: Sequence[np.ndarray], weights: Sequence[int]) -> np.ndarray:
    """``sum_k (w_k / sum w) * a_k`` accumulated in list order.

    Shared by statistics aggregation and model-delta aggregation. Callers
    sort inputs by client id first so the result is order-independent.
    """
    if not arrays:
        raise EmptyList("nothing to aggregate")
    total = float(np.sum(weights))
    acc = np.zeros_like(arrays[0], dtype=np.float64)
    for arr, w in zip(arrays, weights):
        acc = acc + (w / total) * arr
    return acc


def aggregate_stats(stats: Sequence[EncodingStats]) -> EncodingStats:
    """Count-weighted mean of client statistics (server side, no graph)."""
    if not stats:
        raise EmptyList("no statistics to aggregate")
    d = stats[0].dim
    for s in stats:
        if s.dim != d:
            raise DimensionMismatch(f"statistics of dimension {s.dim} and {d}")
        if s.count < 1:
            raise ValueError("statistics count must be >= 1")
    counts = [s.count for s in stats]
    merged = {f: weighted_mean([getattr(s, f) for s in stats], counts) for f in STAT_FIELDS}
    return EncodingStats(**merged, count=int(np.sum(counts)))


def combine_with_stop_gradient(local: StatNodes, aggregated: EncodingStats) -> StatNodes:
    """Combined statistics: aggregated values, gradients through local ones.

    Each field is ``local + stop_gradient(aggregated - local)`` in fused
    form, so the forward value is the aggregated value bitwise.
    """
    if local.dim != aggregated.dim:
        raise DimensionMismatch(f"local d={local.dim}, aggregated d={aggregated.dim}")
    g = local.mean_f.graph
    combined = {}
    for f, node in zip(STAT_FIELDS, local.nodes()):
        target = getattr(aggregated, f).reshape(node.shape)
        combined[f] = ad.straight_through(node, ad.stop_gradient(g.constant(target)))
    return StatNodes(**combined, count=local.count)


def correlation_matrix(stats: StatNodes, eps: float = DEFAULT_EPS) -> ad.Node:
    """``C_ij = (<F_i G_j> - <F_i><G_j>) / (sqrt(var F_i + eps) sqrt(var G_j + eps))``."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    var_f = stats.mean_f2 - ad.square(stats.mean_f)
    var_g = stats.mean_g2 - ad.square(stats.mean_g)
    if eps == 0 and (np.any(var_f.value <= 0) or np.any(var_g.value <= 0)):
        raise DegenerateVariance("non-positive variance with eps=0")
    centered = stats.cross - stats.mean_f.T @ stats.mean_g
    denom = ad.sqrt(var_f + eps).T @ ad.sqrt(var_g + eps)
    return centered / denom


def cco_loss(C: ad.Node, lam: float = DEFAULT_LAMBDA) -> ad.Node:
    """``sum_i (1 - C_ii)^2 + lam * sum_i 1/(d-1) sum_{j != i} C_ij^2``."""
    d = C.shape[0]
    if C.shape != (d, d):
        raise ShapeMismatch(f"correlation matrix must be square, got {C.shape}")
    if d < 2:
        raise DimensionTooSmall("cco_loss needs d >= 2")
    g = C.graph
    eye = np.eye(d)
    on_diag = ad.sum(ad.square(g.constant(eye) - C) * g.constant(eye))
    off_diag = ad.sum(ad.square(C) * g.constant(1.0 - eye))
    return on_diag + off_diag * (lam / (d - 1))


def cco_loss_value(C: np.ndarray, lam: float = DEFAULT_LAMBDA) -> float:
    g = ad.Graph()
    return float(cco_loss(g.constant(C), lam).value)


def correlation_values(stats: EncodingStats, eps: float = DEFAULT_EPS) -> np.ndarray:
    var_f = stats.mean_f2 - stats.mean_f ** 2
    var_g = stats.mean_g2 - stats.mean_g ** 2
    num = stats.cross - np.outer(stats.mean_f, stats.mean_g)
    return num / np.outer(np.sqrt(var_f + eps), np.sqrt(var_g + eps))


def stats_cotangents(stats: EncodingStats, lam: float = DEFAULT_LAMBDA,
                     eps: float = DEFAULT_EPS) -> EncodingStats:
    """Closed-form derivatives of the CCO loss wrt each statistic.

    The returned object reuses :class:`EncodingStats` as a container; each
    field holds ``dL/d<field>`` evaluated at ``stats``.
    """
    d = stats.dim
    if d < 2:
        raise DimensionTooSmall("cco_loss needs d >= 2")
    s = np.sqrt(stats.mean_f2 - stats.mean_f ** 2 + eps)
    t = np.sqrt(stats.mean_g2 - stats.mean_g ** 2 + eps)
    C = correlation_values(stats, eps)
    dC = 2.0 * lam / (d - 1) * C
    np.fill_diagonal(dC, -2.0 * (1.0 - np.diag(C)))
    d_cross = dC / np.outer(s, t)
    row = np.sum(dC * C, axis=1)
    col = np.sum(dC * C, axis=0)
    return EncodingStats(
        mean_f=-d_cross @ stats.mean_g + row * stats.mean_f / s ** 2,
        mean_f2=-row / (2.0 * s ** 2),
        mean_g=-d_cross.T @ stats.mean_f + col * stats.mean_g / t ** 2,
        mean_g2=-col / (2.0 * t ** 2),
        cross=d_cross,
        count=stats.count,
    )


def analytic_client_gradient(F: np.ndarray, G: np.ndarray, local: EncodingStats,
                             aggregated: EncodingStats, lam: float = DEFAULT_LAMBDA,
                             eps: float = DEFAULT_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``dL/dF`` and ``dL/dG`` on one client, without autodiff.

    The loss sees the aggregated statistics but differentiates only the
    local ones, so each sample gets ``1/N_k`` of the mean cotangents,
    ``2/N_k`` of the second-moment cotangents times its own value, and
    ``1/N_k`` of the cross cotangents contracted with the other view.
    """
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if F.shape != G.shape or F.ndim != 2:
        raise ShapeMismatch(f"F {F.shape} and G {G.shape} must be equal N x d")
    n, d = F.shape
    if local.count != n:
        raise ShapeMismatch(f"local count {local.count} != batch size {n}")
    if aggregated.dim != d or local.dim != d:
        raise ShapeMismatch("statistics dimension differs from encodings")
    cot = stats_cotangents(aggregated, lam, eps)
    dF = (cot.mean_f + 2.0 * cot.mean_f2 * F + G @ cot.cross.T) / n
    dG = (cot.mean_g + 2.0 * cot.mean_g2 * G + F @ cot.cross) / n
    return dF, dG


def _l2_normalize(x: ad.Node) -> ad.Node:
    return x / ad.sqrt(ad.sum(ad.square(x), axis=1, keepdims=True) + 1e-24)


def ntxent_loss(F: ad.Node, G: ad.Node, temperature: float = DEFAULT_TEMPERATURE) -> ad.Node:
    """Symmetric NT-Xent over ``2N`` embeddings with cosine similarity.

    Each of the ``2N`` rows is an anchor whose positive is the other view
    of the same sample; all remaining rows are negatives.
    """
    if F.shape != G.shape or len(F.shape) != 2:
        raise ShapeMismatch(f"F {F.shape} and G {G.shape} must be equal N x d")
    n = F.shape[0]
    if n < 2:
        raise BatchTooSmall("contrastive loss needs at least two samples")
    g = F.graph
    z = ad.concat([_l2_normalize(F), _l2_normalize(G)], axis=0)
    sim = (z @ z.T) / temperature
    not_self = 1.0 - np.eye(2 * n)
    positives = np.roll(np.eye(2 * n), n, axis=1)
    denom = ad.sum(ad.exp(sim) * g.constant(not_self), axis=1)
    pos = ad.sum(sim * g.constant(positives), axis=1)
    return ad.mean(ad.log(denom) - pos)


# Wire encoding (little-endian):
#   version u8 | d u32 | count u64 | mean_f | mean_f2 | mean_g | mean_g2 | cross (d*d)
STATS_WIRE_VERSION = 1
_HEADER = struct.Struct("<BIQ")


def stats_to_bytes(stats: EncodingStats) -> bytes:
    d = stats.dim
    parts = [_HEADER.pack(STATS_WIRE_VERSION, d, stats.count)]
    for f in STAT_FIELDS:
        arr = np.ascontiguousarray(getattr(stats, f), dtype="<f8")
        expected = (d, d) if f == "cross" else (d,)
        if arr.shape != expected:
            raise ShapeMismatch(f"{f} has shape {arr.shape}, expected {expected}")
        parts.append(arr.tobytes())
    return b"".join(parts)


def stats_from_bytes(data: bytes) -> EncodingStats:
    if len(data) < _HEADER.size:
        raise ParseError("truncated stats header", "offset 0")
    version, d, count = _HEADER.unpack_from(data, 0)
    if version != STATS_WIRE_VERSION:
        raise ParseError(f"unsupported stats version {version}", "offset 0")
    expected = _HEADER.size + 8 * (4 * d + d * d)
    if len(data) != expected:
        raise ParseError(f"stats payload is {len(data)} bytes, expected {expected}", "offset 0")
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    vecs = [flat[i * d:(i + 1) * d] for i in range(4)]
    cross = flat[4 * d:].reshape(d, d)
    return EncodingStats(*vecs, cross=cross, count=count)

