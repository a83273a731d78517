"""Transformer encoder stack with windowed attention and relative positions.

The same stack serves audio and label encoding. Each layer sees a left/right
context window (`AttentionMask`), and attention scores carry a learned
relative-position term indexed by the clipped query-key offset plus two
global bias vectors, so scores depend on content and relative offset only.
That offset-only dependence is what makes cached streaming inference exact:
a window's encoding is the same at any absolute position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as tt
from .tensor import Rng, ShapeError, Tensor


@dataclass(frozen=True)
class AttentionMask:
    """Per-layer context window: position i may attend j iff
    i - left <= j <= i + right. `None` lifts the bound on that side."""

    left: int | None
    right: int | None

    def __post_init__(self):
        for side, value in (("left", self.left), ("right", self.right)):
            if value is not None and (not isinstance(value, int) or value < 0):
                raise ValueError(f"mask {side} must be a non-negative int or None, got {value!r}")

    @property
    def is_finite(self) -> bool:
        return self.left is not None and self.right is not None

    def window(self, seq_len: int | None = None) -> int:
        """Largest number of positions a single query can attend."""
        if not self.is_finite:
            if seq_len is None:
                raise ValueError("unbounded mask has no fixed window")
            return seq_len
        return self.left + self.right + 1


def build_mask(seq_len: int, mask: AttentionMask) -> np.ndarray:
    """Boolean [seq_len, seq_len] matrix; entry (i, j) true iff j is inside
    i's window. The diagonal is always true."""
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    i = np.arange(seq_len)[:, None]
    j = np.arange(seq_len)[None, :]
    allowed = np.ones((seq_len, seq_len), dtype=bool)
    if mask.left is not None:
        allowed &= j >= i - mask.left
    if mask.right is not None:
        allowed &= j <= i + mask.right
    return allowed


@dataclass
class EncoderConfig:
    num_layers: int
    model_dim: int
    ff_dim1: int
    ff_dim2: int
    num_heads: int
    head_dim: int
    dropout_ratio: float
    mask: AttentionMask
    input_dim: int
    max_relative_offset: int | None = None  # None: derived as left + right
    ln_eps: float = 1e-5
    final_layer_norm: bool = True

    def __post_init__(self):
        for name in ("model_dim", "ff_dim1", "ff_dim2", "num_heads", "head_dim", "input_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_layers < 0:
            raise ValueError(f"num_layers must be >= 0, got {self.num_layers}")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ValueError(f"dropout_ratio must be in [0, 1), got {self.dropout_ratio}")

    @property
    def rel_offset(self) -> int:
        if self.max_relative_offset is not None:
            return self.max_relative_offset
        if not self.mask.is_finite:
            raise ValueError("max_relative_offset is required with an unbounded mask")
        return self.mask.left + self.mask.right


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for f in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            yield f"{prefix}.{f}", getattr(self, f)

    def transform(self, fn: Callable[[Tensor], Tensor]) -> "LayerParams":
        return LayerParams(**{k: fn(v) for k, v in ((f, getattr(self, f)) for f in
                              ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2",
                               "ln1_g", "ln1_b", "ln2_g", "ln2_b"))})


@dataclass
class EncoderParams:
    """Weights for one encoder stack.

    Relative-position parameters (`rel_emb`, per head over clipped offsets,
    plus per-head content/position bias vectors) depend only on the offset
    i - j, never on absolute index.
    """

    input_w: Tensor
    input_b: Tensor
    layers: list[LayerParams]
    rel_emb: Tensor      # [num_heads, 2 * rel_offset + 1, head_dim]
    content_bias: Tensor  # [num_heads, head_dim]
    pos_bias: Tensor      # [num_heads, head_dim]
    final_g: Tensor
    final_b: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.input_w", self.input_w
        yield f"{prefix}.input_b", self.input_b
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"{prefix}.layer{i}")
        yield f"{prefix}.rel_emb", self.rel_emb
        yield f"{prefix}.content_bias", self.content_bias
        yield f"{prefix}.pos_bias", self.pos_bias
        yield f"{prefix}.final_g", self.final_g
        yield f"{prefix}.final_b", self.final_b

    def transform(self, fn: Callable[[Tensor], Tensor]) -> "EncoderParams":
        return EncoderParams(
            input_w=fn(self.input_w),
            input_b=fn(self.input_b),
            layers=[layer.transform(fn) for layer in self.layers],
            rel_emb=fn(self.rel_emb),
            content_bias=fn(self.content_bias),
            pos_bias=fn(self.pos_bias),
            final_g=fn(self.final_g),
            final_b=fn(self.final_b),
        )


def init_encoder_params(config: EncoderConfig, rng: Rng) -> EncoderParams:
    d, hd = config.model_dim, config.num_heads * config.head_dim

    def dense(label: str, fan_in: int, fan_out: int) -> Tensor:
        return Tensor(rng.substream(label).normal((fan_in, fan_out), sigma=1.0 / math.sqrt(fan_in)))

    layers = []
    for i in range(config.num_layers):
        layers.append(LayerParams(
            wq=dense(f"layer{i}.wq", d, hd),
            wk=dense(f"layer{i}.wk", d, hd),
            wv=dense(f"layer{i}.wv", d, hd),
            wo=dense(f"layer{i}.wo", hd, d),
            w1=dense(f"layer{i}.w1", d, config.ff_dim1),
            b1=tt.zeros(config.ff_dim1),
            w2=dense(f"layer{i}.w2", config.ff_dim1, config.ff_dim2),
            b2=tt.zeros(config.ff_dim2),
            ln1_g=tt.ones(d), ln1_b=tt.zeros(d),
            ln2_g=tt.ones(d), ln2_b=tt.zeros(d),
        ))
    k = 2 * config.rel_offset + 1
    return EncoderParams(
        input_w=dense("input_w", config.input_dim, d),
        input_b=tt.zeros(d),
        layers=layers,
        rel_emb=Tensor(rng.substream("rel_emb").normal((config.num_heads, k, config.head_dim), sigma=0.02)),
        content_bias=tt.zeros((config.num_heads, config.head_dim)),
        pos_bias=tt.zeros((config.num_heads, config.head_dim)),
        final_g=tt.ones(d),
        final_b=tt.zeros(d),
    )


class Counters:
    """Evaluation counters for constant-work assertions. Not synchronized;
    meaningful when a single stream or call sequence owns the model."""

    def __init__(self):
        self.attention_scores = 0
        self.joint_evals = 0

    def reset(self):
        self.attention_scores = 0
        self.joint_evals = 0


def attention_scores(
    q: Tensor,
    k: Tensor,
    rel_emb: Tensor,
    content_bias: Tensor,
    pos_bias: Tensor,
    q_positions: np.ndarray,
    k_positions: np.ndarray,
    max_offset: int,
) -> Tensor:
    """Single-head attention scores over explicit absolute positions.

    score(i, j) = [(q_i + content_bias) . k_j + (q_i + pos_bias) . r_{o(i,j)}]
                  / sqrt(head_dim), with o(i, j) the offset i - j clipped to
    [-max_offset, max_offset]. Only the offset enters, so shifting both
    position vectors leaves the scores unchanged.
    """
    head_dim = q.shape[-1]
    offsets = np.asarray(q_positions)[:, None] - np.asarray(k_positions)[None, :]
    idx = np.clip(offsets, -max_offset, max_offset) + max_offset
    content = tt.matmul(tt.add(q, content_bias), tt.transpose(k))
    pos_all = tt.matmul(tt.add(q, pos_bias), tt.transpose(rel_emb))
    pos = tt.gather_cols(pos_all, idx)
    return tt.mul(tt.add(content, pos), Tensor(1.0 / math.sqrt(head_dim)))


def _multi_head_attention(
    h: Tensor,
    h_keys: Tensor,
    layer: LayerParams,
    params: EncoderParams,
    config: EncoderConfig,
    q_positions: np.ndarray,
    k_positions: np.ndarray,
    mask_bool: np.ndarray | None,
    counters: Counters | None,
) -> Tensor:
    """Shared core of batch and single-query attention: h provides queries,
    h_keys provides keys/values."""
    dh = config.head_dim
    q_all = tt.matmul(h, layer.wq)
    k_all = tt.matmul(h_keys, layer.wk)
    v_all = tt.matmul(h_keys, layer.wv)
    heads = []
    for i in range(config.num_heads):
        cols = slice(i * dh, (i + 1) * dh)
        scores = attention_scores(
            q_all[:, cols], k_all[:, cols],
            params.rel_emb[i], params.content_bias[i], params.pos_bias[i],
            q_positions, k_positions, config.rel_offset,
        )
        if counters is not None:
            counters.attention_scores += scores.size
        if mask_bool is not None:
            scores = tt.apply_mask(scores, mask_bool)
        weights = tt.softmax(scores, axis=-1)
        heads.append(tt.matmul(weights, v_all[:, cols]))
    return tt.matmul(tt.concat(heads, axis=1), layer.wo)


def encoder_layer(
    x: Tensor,
    mask_bool: np.ndarray,
    layer: LayerParams,
    params: EncoderParams,
    config: EncoderConfig,
    rng: Rng | None = None,
    training: bool = False,
    counters: Counters | None = None,
) -> Tensor:
    """One encoder layer: pre-norm windowed multi-head attention with a
    residual, then a pre-norm two-dense feed-forward block with a residual."""
    if x.shape[-1] != config.model_dim:
        raise ShapeError(f"layer input dim {x.shape[-1]} != model_dim {config.model_dim}")
    if config.ff_dim2 != config.model_dim:
        raise ShapeError(
            f"ff_dim2 ({config.ff_dim2}) must equal model_dim ({config.model_dim}) for the residual")
    positions = np.arange(x.shape[0])
    eps = config.ln_eps

    def drop(t: Tensor) -> Tensor:
        if rng is None or not training:
            return t
        return tt.dropout(t, config.dropout_ratio, rng, training)

    h = tt.layer_norm(x, layer.ln1_g, layer.ln1_b, eps)
    attn = _multi_head_attention(h, h, layer, params, config, positions, positions, mask_bool, counters)
    x = tt.add(x, drop(attn))

    h2 = tt.layer_norm(x, layer.ln2_g, layer.ln2_b, eps)
    f = drop(tt.relu(tt.add(tt.matmul(h2, layer.w1), layer.b1)))
    f = drop(tt.add(tt.matmul(f, layer.w2), layer.b2))
    return tt.add(x, f)


def encode(
    x: Tensor,
    config: EncoderConfig,
    params: EncoderParams,
    rng: Rng | None = None,
    training: bool = False,
    counters: Counters | None = None,
) -> Tensor:
    """Project the input to model_dim and run the full layer stack under the
    shared mask. With `final_layer_norm` a closing LayerNorm is applied."""
    if x.shape[-1] != config.input_dim:
        raise ShapeError(f"encode input dim {x.shape[-1]} != config input_dim {config.input_dim}")
    h = tt.add(tt.matmul(x, params.input_w), params.input_b)
    mask_bool = build_mask(x.shape[0], config.mask)
    dropout_live = training and config.dropout_ratio > 0.0 and rng is not None
    for i, layer in enumerate(params.layers):
        layer_rng = rng.substream(f"layer{i}") if dropout_live else None
        h = encoder_layer(h, mask_bool, layer, params, config, layer_rng, training, counters)
    if config.final_layer_norm and config.num_layers > 0:
        h = tt.layer_norm(h, params.final_g, params.final_b, config.ln_eps)
    return h


def encoder_layer_step(
    window: np.ndarray,
    q_local: int,
    positions: np.ndarray,
    layer: LayerParams,
    params: EncoderParams,
    config: EncoderConfig,
    counters: Counters | None = None,
) -> np.ndarray:
    """Compute one layer's output at a single position from the window of
    layer-below outputs that position may attend. Work is bounded by the
    window size regardless of how much stream history precedes it."""
    with tt.no_grad():
        w = Tensor(window)
        h = tt.layer_norm(w, layer.ln1_g, layer.ln1_b, config.ln_eps)
        hq = h[q_local:q_local + 1]
        attn = _multi_head_attention(
            hq, h, layer, params, config,
            positions[q_local:q_local + 1], positions, None, counters,
        )
        x = tt.add(w[q_local:q_local + 1], attn)
        h2 = tt.layer_norm(x, layer.ln2_g, layer.ln2_b, config.ln_eps)
        f = tt.relu(tt.add(tt.matmul(h2, layer.w1), layer.b1))
        f = tt.add(tt.matmul(f, layer.w2), layer.b2)
        return tt.add(x, f).values[0]


@dataclass(frozen=True)
class ReceptiveField:
    past_frames: float
    future_frames: float
    future_latency_ms: float

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.past_frames) and math.isfinite(self.future_frames)


def receptive_field(num_layers: int, mask: AttentionMask, frame_ms: float) -> ReceptiveField:
    """Aggregate per-layer context over a stack: each layer extends reach by
    (left, right), so look-ahead latency is num_layers * right * frame_ms.
    Unlimited sides are reported as unbounded (inf)."""
    past = math.inf if mask.left is None else num_layers * mask.left
    future = math.inf if mask.right is None else num_layers * mask.right
    return ReceptiveField(past, future, future * frame_ms)
