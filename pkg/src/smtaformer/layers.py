"""Layers for the temporal encoder and the fusion attention stages."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError

LAYER_NORM_EPS = 1e-5


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    """Affine map ``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        if in_dim < 1 or out_dim < 1:
            raise ConfigurationError(f"Linear needs positive widths, got {in_dim}->{out_dim}")
        w = glorot(rng, (out_dim, in_dim), in_dim, out_dim) if rng is not None else np.zeros((out_dim, in_dim))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"Linear expects width {self.in_dim}, got input {x.shape}")
        return ad.matmul(x, ad.transpose(self.weight)) + self.bias

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


def embed_channel(x: Tensor, layer: Linear) -> Tensor:
    """Per-step ``ReLU(x_j W^T + b)``; the same layer is applied at every step."""
    return ad.relu(layer(x))


def positional_encoding(t: int, d: int) -> np.ndarray:
    """Fixed sinusoidal matrix ``(t, d)``: sin on even columns, cos on odd."""
    if d % 2:
        raise ConfigurationError(f"positional encoding needs an even width, got d={d}")
    if t < 1:
        raise ConfigurationError(f"positional encoding needs t >= 1, got {t}")
    pos = np.arange(t, dtype=np.float64)[:, None]
    freq = np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    enc = np.empty((t, d))
    enc[:, 0::2] = np.sin(pos / freq)
    enc[:, 1::2] = np.cos(pos / freq)
    return enc


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T / sqrt(d)) v``; returns the output and the weight matrix."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError(f"attention widths differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention key/value row counts differ: k {k.shape}, v {v.shape}")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
    weights = ad.softmax_rows(scores)
    return ad.matmul(weights, v), weights


class MultiHeadAttention:
    """Multi-head attention with full-width (d x d) per-head projections.

    Heads are concatenated to width ``h*d`` and mapped back to ``d`` by the
    output matrix.  Query and key/value sources may differ.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator | None = None):
        if heads < 1:
            raise ConfigurationError(f"attention needs at least one head, got {heads}")
        self.d = d
        self.heads = heads

        def init(shape, fan_in, fan_out):
            if rng is None:
                return Tensor(np.zeros(shape), requires_grad=True)
            return Tensor(glorot(rng, shape, fan_in, fan_out), requires_grad=True)

        self.w_query = init((heads, d, d), d, d)
        self.w_key = init((heads, d, d), d, d)
        self.w_value = init((heads, d, d), d, d)
        self.w_out = init((heads * d, d), heads * d, d)

    def _project(self, x: Tensor, w: Tensor) -> Tensor:
        # (..., rows, d) -> (..., heads, rows, d) with a single GEMM
        h, d = self.heads, self.d
        stacked = ad.reshape(ad.permute(w, (1, 0, 2)), (d, h * d))
        y = ad.matmul(x, stacked)
        lead = x.shape[:-2]
        rows = x.shape[-2]
        y = ad.reshape(y, lead + (rows, h, d))
        n = len(lead)
        return ad.permute(y, tuple(range(n)) + (n + 1, n, n + 2))

    def _check(self, query_src: Tensor, kv_src: Tensor) -> None:
        if query_src.shape[-1] != self.d or kv_src.shape[-1] != self.d:
            raise DimensionError(
                f"attention sources must have width {self.d}, got {query_src.shape} and {kv_src.shape}"
            )

    def __call__(self, query_src: Tensor, kv_src: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(output (..., m, d), weights (..., heads, m, n))``.

        Uses the factored form ``q_src (Wq_l Wk_l^T) kv_src^T`` for the scores
        and ``sum_l P_l kv_src (Wv_l W_l)`` for the output, where ``W_l`` is
        head ``l``'s block of the output matrix.  This equals the per-head
        projection form (:meth:`unfused`) up to rounding and halves the
        projection cost.
        """
        self._check(query_src, kv_src)
        h, d = self.heads, self.d
        qk = ad.matmul(self.w_query, ad.transpose(self.w_key))  # (h, d, d)
        vo = ad.matmul(self.w_value, ad.reshape(self.w_out, (h, d, d)))  # (h, d, d)
        lead = kv_src.shape[:-2]
        n = kv_src.shape[-2]
        kv_t = ad.transpose(ad.reshape(kv_src, lead + (1, n, d)))  # (..., 1, d, n)
        scores = ad.scale(ad.matmul(self._project(query_src, qk), kv_t), 1.0 / math.sqrt(d))
        weights = ad.softmax_rows(scores)
        per_head = ad.matmul(weights, self._project(kv_src, vo))  # (..., h, m, d)
        return ad.sum(per_head, axis=-3), weights

    def unfused(self, query_src: Tensor, kv_src: Tensor) -> tuple[Tensor, Tensor]:
        """Literal form: project per head, attend, concatenate heads, project by ``w_out``."""
        self._check(query_src, kv_src)
        q = self._project(query_src, self.w_query)
        k = self._project(kv_src, self.w_key)
        v = self._project(kv_src, self.w_value)
        heads_out, weights = scaled_dot_attention(q, k, v)
        lead = query_src.shape[:-2]
        m = query_src.shape[-2]
        n = len(lead)
        merged = ad.permute(heads_out, tuple(range(n)) + (n + 1, n, n + 2))
        merged = ad.reshape(merged, lead + (m, self.heads * self.d))
        return ad.matmul(merged, self.w_out), weights

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w_query", self.w_query
        yield f"{prefix}.w_key", self.w_key
        yield f"{prefix}.w_value", self.w_value
        yield f"{prefix}.w_out", self.w_out


def multi_head_attention(query_src: Tensor, kv_src: Tensor, params: MultiHeadAttention) -> tuple[Tensor, Tensor]:
    return params(query_src, kv_src)


class EncoderBlock:
    """Post-norm transformer encoder block.

    attention -> add & norm -> ReLU feed-forward -> add & norm
    """

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator | None = None):
        self.attention = MultiHeadAttention(d, heads, rng)
        self.ff_in = Linear(d, d_ff, rng)
        self.ff_out = Linear(d_ff, d, rng)
        self.norm1_gain = Tensor(np.ones(d), requires_grad=True)
        self.norm1_bias = Tensor(np.zeros(d), requires_grad=True)
        self.norm2_gain = Tensor(np.ones(d), requires_grad=True)
        self.norm2_bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        attended, weights = self.attention(x, x)
        x1 = ad.layer_norm(attended + x, self.norm1_gain, self.norm1_bias, LAYER_NORM_EPS)
        ff = self.ff_out(ad.relu(self.ff_in(x1)))
        x2 = ad.layer_norm(x1 + ff, self.norm2_gain, self.norm2_bias, LAYER_NORM_EPS)
        return x2, weights

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.attention.named_parameters(f"{prefix}.attention")
        yield from self.ff_in.named_parameters(f"{prefix}.ff_in")
        yield from self.ff_out.named_parameters(f"{prefix}.ff_out")
        yield f"{prefix}.norm1.gain", self.norm1_gain
        yield f"{prefix}.norm1.bias", self.norm1_bias
        yield f"{prefix}.norm2.gain", self.norm2_gain
        yield f"{prefix}.norm2.bias", self.norm2_bias


def encoder_block(x: Tensor, params: EncoderBlock) -> Tensor:
    return params(x)[0]
