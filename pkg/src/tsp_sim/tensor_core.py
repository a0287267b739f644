"""Dense float64 kernels for one decoder layer: projections, offset-causal attention, gated MLP.

Tensors are plain ``numpy.ndarray`` objects in float64, row-major. Every
schedule in :mod:`tsp_sim.schedules` is built from these same kernels, and the
unsharded ``reference_*`` functions are the oracle the schedules are checked
against. Residual connections and norms are deliberately absent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from tsp_sim.config import ModelConfig

Tensor = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _as_f64(x: Tensor, name: str) -> Tensor:
    x = np.asarray(x)
    if x.dtype != np.float64:
        x = x.astype(np.float64)
    if x.size == 0:
        raise ShapeError(f"{name} has a zero extent: shape {x.shape}")
    return x


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``y[..., o] = sum_i x[..., i] * w[o, i]`` (weight stored ``[out, in]``)."""
    x = _as_f64(x, "x")
    w = _as_f64(w, "w")
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape} ([out, in])")
    return x @ w.T


def apply_right(x: Tensor, w: Tensor) -> Tensor:
    """``y[..., o] = sum_i x[..., i] * w[i, o]`` (weight stored ``[in, out]``)."""
    x = _as_f64(x, "x")
    w = _as_f64(w, "w")
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"apply_right: input {x.shape} incompatible with weight {w.shape} ([in, out])")
    return x @ w


def silu(x: Tensor) -> Tensor:
    # x * sigmoid(x), written to avoid overflow in exp for large |x|
    return x * (0.5 * (1.0 + np.tanh(0.5 * x)))


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """``[B, S, n*d] -> [B, S, n, d]``."""
    B, S, width = x.shape
    if width % num_heads:
        raise ShapeError(f"width {width} not divisible into {num_heads} heads")
    return x.reshape(B, S, num_heads, width // num_heads)


def merge_heads(x: Tensor) -> Tensor:
    """``[B, S, n, d] -> [B, S, n*d]``."""
    B, S, n, d = x.shape
    return x.reshape(B, S, n * d)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, query_offset: int = 0) -> Tensor:
    """Exact softmax attention under a causal mask shifted by ``query_offset``.

    Query row ``i`` sits at global position ``query_offset + i`` and may attend
    key ``j`` iff ``j <= query_offset + i`` (keys cover positions ``0..Sk-1``).
    Scores are scaled by ``1/sqrt(d)``. Query head ``hq`` reads K/V head
    ``hq // (H / Hkv)``.

    Shapes: q ``[B, Sq, H, d]``, k and v ``[B, Sk, Hkv, d]``; returns ``[B, Sq, H, d]``.
    """
    q = _as_f64(q, "q")
    k = _as_f64(k, "k")
    v = _as_f64(v, "v")
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError("causal_attention expects rank-4 [B, S, heads, d] operands")
    B, Sq, H, d = q.shape
    if k.shape != v.shape:
        raise ShapeError(f"k {k.shape} and v {v.shape} differ")
    Bk, Sk, Hkv, dk = k.shape
    if Bk != B or dk != d:
        raise ShapeError(f"q {q.shape} incompatible with k {k.shape}")
    if H % Hkv:
        raise ShapeError(f"{H} query heads not divisible by {Hkv} K/V heads")
    if query_offset < 0:
        raise ValueError(f"query_offset must be >= 0, got {query_offset}")

    group = H // Hkv
    if group > 1:
        k = np.repeat(k, group, axis=2)
        v = np.repeat(v, group, axis=2)

    qh = q.transpose(0, 2, 1, 3)  # [B, H, Sq, d]
    kh = k.transpose(0, 2, 3, 1)  # [B, H, d, Sk]
    vh = v.transpose(0, 2, 1, 3)  # [B, H, Sk, d]
    scores = (qh @ kh) * (1.0 / math.sqrt(d))

    rows = query_offset + np.arange(Sq)[:, None]
    allowed = np.arange(Sk)[None, :] <= rows
    # every row keeps key 0 since query_offset >= 0 and Sk >= 1; guard anyway
    if not allowed.any(axis=1).all():
        raise ValueError("causal_attention: a query row has no permitted keys")
    scores = np.where(allowed, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return (probs @ vh).transpose(0, 2, 1, 3)


def gated_mlp(x: Tensor, w1: Tensor, w3: Tensor, w2: Tensor) -> Tensor:
    """SiLU-gated MLP: ``(silu(x w1^T) * (x w3^T)) w2`` with all three weights ``[F*h, h]``."""
    if np.shape(w2) != np.shape(w1) or np.shape(w3) != np.shape(w1):
        raise ShapeError(f"gated_mlp weights disagree: {np.shape(w1)}, {np.shape(w3)}, {np.shape(w2)}")
    return apply_right(silu(linear(x, w1)) * linear(x, w3), w2)


@dataclass
class LayerWeights:
    """Full (unsharded) weights of one layer.

    ``w_q, w_o``: ``[h, h]``; ``w_k, w_v``: ``[h/g, h]``; ``w1, w3, w2``:
    ``[F*h, h]``. ``w2`` is applied un-transposed.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w1: Tensor
    w3: Tensor
    w2: Tensor

    @staticmethod
    def shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
        h, kv, ff = config.hidden_size, config.kv_dim, config.ffn_dim
        return {
            "w_q": (h, h),
            "w_k": (kv, h),
            "w_v": (kv, h),
            "w_o": (h, h),
            "w1": (ff, h),
            "w3": (ff, h),
            "w2": (ff, h),
        }

    def validate(self, config: ModelConfig) -> None:
        for name, shape in self.shapes(config).items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ShapeError(f"{name} has shape {actual}, expected {shape}")

    @classmethod
    def random(cls, config: ModelConfig, rng: np.random.Generator, scale: float = 0.1) -> LayerWeights:
        # field order fixes the draw order, and with it the seed -> weights map
        shapes = cls.shapes(config)
        return cls(**{f.name: rng.uniform(-scale, scale, size=shapes[f.name]) for f in fields(cls)})

    def equals(self, other: LayerWeights) -> bool:
        return all(np.array_equal(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


def reference_attention(x: Tensor, weights: LayerWeights, config: ModelConfig) -> Tensor:
    """Unsharded causal attention sublayer, ``[B, S, h] -> [B, S, h]``."""
    q = split_heads(linear(x, weights.w_q), config.num_heads)
    k = split_heads(linear(x, weights.w_k), config.num_kv_heads)
    v = split_heads(linear(x, weights.w_v), config.num_kv_heads)
    return apply_right(merge_heads(causal_attention(q, k, v, 0)), weights.w_o.T)


def reference_mlp(x: Tensor, weights: LayerWeights) -> Tensor:
    return gated_mlp(x, weights.w1, weights.w3, weights.w2)


def reference_layer(x: Tensor, weights: LayerWeights, config: ModelConfig) -> Tensor:
    """Attention sublayer followed by the MLP sublayer, no residual or norm."""
    return reference_mlp(reference_attention(x, weights, config), weights)
