"""Frame-synchronous decoding: greedy, beam with optional shallow fusion,
and streaming one-step inference over cached encoder state.

Streaming keeps a ring buffer of post-layer activations per encoder layer.
Because attention scores depend only on content and relative offset, a new
position's activation can be computed from those cached windows alone, so
the work per consumed frame is bounded by a constant (window size times
layers) no matter how long the stream has run. Right context makes each
layer's frontier lag the layer below by `right` positions; `flush` drains
that look-ahead at end of stream, reproducing batch behavior exactly on the
true final frames.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import attention as att
from . import tensor as tt
from .attention import Counters, EncoderConfig, EncoderParams
from .model import TransducerModel
from .tensor import Tensor
from .transducer import BLANK_ID


class StreamError(RuntimeError):
    """Streaming protocol violation (e.g. flushing twice)."""


class LmScorer(Protocol):
    """External language-model contract: pure, deterministic, finite scores."""

    def log_prob(self, history: Sequence[int], next_id: int) -> float: ...


@dataclass
class FusionConfig:
    """Shallow fusion: score += lm_weight * log P_LM(symbol | history)
    + length_bonus, per emitted non-blank symbol."""

    lm_weight: float = 0.0
    length_bonus: float = 0.0
    lm: LmScorer | None = None

    def __post_init__(self):
        if self.lm_weight != 0.0 and self.lm is None:
            raise ValueError("fusion with lm_weight != 0 needs an lm scorer")

    @property
    def enabled(self) -> bool:
        return self.lm_weight != 0.0 or self.length_bonus != 0.0


class BigramLm:
    """Add-k smoothed bigram scorer over label ids with a start context; the
    bundled scorer for fusion on synthetic-task vocabularies."""

    def __init__(self, num_labels: int, add_k: float = 0.5):
        self.num_labels = num_labels
        self.add_k = add_k
        self.counts = np.zeros((num_labels + 1, num_labels + 1))

    @classmethod
    def fit(cls, sequences, num_labels: int, add_k: float = 0.5) -> "BigramLm":
        lm = cls(num_labels, add_k)
        for seq in sequences:
            prev = 0
            for label in seq:
                lm.counts[prev, label] += 1
                prev = label
        return lm

    def log_prob(self, history: Sequence[int], next_id: int) -> float:
        prev = history[-1] if len(history) else 0
        row = self.counts[prev]
        return math.log((row[next_id] + self.add_k) / (row[1:].sum() + self.add_k * self.num_labels))


class IncrementalEncoder:
    """One encoder stack fed a row at a time.

    Layer l may compute position q once layer l-1 holds positions up to
    q + right, so the top frontier lags the input by num_layers * right;
    `finish` closes the gap with end-of-sequence windows. Each layer keeps
    only its last left + right + 1 outputs (unbounded when left is None).
    """

    def __init__(self, config: EncoderConfig, params: EncoderParams, counters: Counters | None = None):
        if config.mask.right is None:
            raise ValueError("incremental encoding requires a finite right context")
        self.config = config
        self.params = params
        self.counters = counters
        cap = None if config.mask.left is None else config.mask.left + config.mask.right + 1
        # bufs[l] holds layer-l outputs (l=0: projected inputs), consumed by layer l+1
        self.bufs: list[deque] = [deque(maxlen=cap) for _ in range(max(config.num_layers, 1))]
        self.counts = [0] * (config.num_layers + 1)
        self.finished = False

    def clone(self) -> "IncrementalEncoder":
        other = IncrementalEncoder.__new__(IncrementalEncoder)
        other.config, other.params, other.counters = self.config, self.params, self.counters
        other.bufs = [deque(buf, maxlen=buf.maxlen) for buf in self.bufs]
        other.counts = list(self.counts)
        other.finished = self.finished
        return other

    def push(self, row: np.ndarray) -> list[np.ndarray]:
        """Feed one input row; returns top-layer rows that became final."""
        if self.finished:
            raise StreamError("push after finish")
        with tt.no_grad():
            proj = row @ self.params.input_w.values + self.params.input_b.values
        self.counts[0] += 1
        if self.config.num_layers == 0:
            return [proj]
        self.bufs[0].append(proj)
        return self._advance(final=False)

    def finish(self) -> list[np.ndarray]:
        """Signal end of input and drain the per-layer look-ahead."""
        if self.finished:
            raise StreamError("finish called twice")
        self.finished = True
        if self.config.num_layers == 0:
            return []
        return self._advance(final=True)

    def _advance(self, final: bool) -> list[np.ndarray]:
        # Advance in waves of at most one row per layer, so a parent layer
        # never evicts buffer rows a child has yet to attend (the drain at
        # end of stream would otherwise outpace the ring buffers).
        left, right = self.config.mask.left, self.config.mask.right
        n_layers = self.config.num_layers
        total = self.counts[0] if self.finished else None
        new_top: list[np.ndarray] = []
        progressed = True
        while progressed:
            progressed = False
            for layer_i in range(1, n_layers + 1):
                below = self.counts[layer_i - 1]
                # a layer may pass the steady-state frontier only once the
                # layer below is complete; otherwise its right window would
                # be truncated mid-drain
                parent_done = final and (layer_i == 1 or below == total)
                limit = below if parent_done else max(0, below - right)
                if self.counts[layer_i] >= limit:
                    continue
                q = self.counts[layer_i]
                hi = min(q + right, below - 1)
                lo = 0 if left is None else max(0, q - left)
                src = self.bufs[layer_i - 1]
                base = below - len(src)
                window = np.stack([src[k - base] for k in range(lo, hi + 1)])
                out = att.encoder_layer_step(
                    window, q - lo, np.arange(lo, hi + 1),
                    self.params.layers[layer_i - 1], self.params, self.config, self.counters)
                self.counts[layer_i] += 1
                progressed = True
                if layer_i < n_layers:
                    self.bufs[layer_i].append(out)
                else:
                    new_top.append(self._finalize(out))
        return new_top

    def _finalize(self, row: np.ndarray) -> np.ndarray:
        if self.config.final_layer_norm:
            with tt.no_grad():
                return tt.layer_norm(Tensor(row), self.params.final_g,
                                     self.params.final_b, self.config.ln_eps).values
        return row


class LabelState:
    """Incrementally encoded label history: one push per emitted label,
    always holding the activation encoding the full history so far, plus its
    joint-network projection (the half of the joint that decoding reuses
    across frames)."""

    def __init__(self, model: TransducerModel):
        self.model = model
        self.encoder = IncrementalEncoder(model.config.label, model.params.label, model.counters)
        self.vec = self.encoder.push(model.params.label_embedding.values[BLANK_ID])[0]
        self.proj = model.project_label(self.vec)

    def advanced(self, label: int) -> "LabelState":
        other = LabelState.__new__(LabelState)
        other.model = self.model
        other.encoder = self.encoder.clone()
        other.vec = other.encoder.push(self.model.params.label_embedding.values[label])[0]
        other.proj = self.model.project_label(other.vec)
        return other

    def advance(self, label: int):
        self.vec = self.encoder.push(self.model.params.label_embedding.values[label])[0]
        self.proj = self.model.project_label(self.vec)


def _batch_encode_audio(model: TransducerModel, features: np.ndarray) -> np.ndarray:
    stacked = model.prepare_features(features)
    with tt.no_grad():
        return model.encode_audio(stacked).values


def greedy_decode(model: TransducerModel, features: np.ndarray,
                  max_symbols_per_frame: int = 10) -> list[int]:
    """Frame-synchronous argmax decoding. At each frame, emit the argmax
    symbol (ties to the lowest id) until blank wins or the per-frame cap is
    reached, then advance to the next frame."""
    enc = _batch_encode_audio(model, features)
    state = LabelState(model)
    out: list[int] = []
    for t in range(enc.shape[0]):
        _greedy_frame(model, enc[t], state, out, max_symbols_per_frame)
    return out


def _greedy_frame(model, enc_row, state: LabelState, out: list[int], cap: int):
    audio_proj = model.project_audio(enc_row)
    for _ in range(cap):
        lp = model.joint_from_projections(audio_proj, state.proj)
        best = int(np.argmax(lp))  # argmax takes the lowest index on ties
        if best == BLANK_ID:
            return
        out.append(best)
        state.advance(best)
    # cap reached: force the frame to close


@dataclass
class Hypothesis:
    """One beam entry: a blank-free label sequence, its accumulated score
    (joint log-probs plus any fusion terms), and the cached label-encoder
    state for exactly that history."""

    labels: tuple[int, ...]
    score: float
    state: LabelState

    @property
    def non_blank_count(self) -> int:
        return len(self.labels)


def beam_decode(model: TransducerModel, features: np.ndarray, beam_width: int,
                fusion: FusionConfig | None = None,
                max_symbols_per_frame: int = 10) -> list[Hypothesis]:
    """Frame-synchronous beam search.

    Per frame, hypotheses expand until each ends in blank; identical label
    sequences merge by log-sum-exp of their scores. With beam_width 1 and
    fusion off the selection at every round is the plain argmax, so the
    result reduces to `greedy_decode`.
    """
    if beam_width < 1:
        raise ValueError(f"beam_width must be >= 1, got {beam_width}")
    fusion = fusion if fusion is not None else FusionConfig()
    enc = _batch_encode_audio(model, features)
    beam = [Hypothesis(labels=(), score=0.0, state=LabelState(model))]

    for t in range(enc.shape[0]):
        audio_proj = model.project_audio(enc[t])
        active = beam
        done: dict[tuple[int, ...], Hypothesis] = {}
        for round_i in range(max_symbols_per_frame + 1):
            # children: (labels, score, parent_state, emitted label or None);
            # label-encoder states materialize only for surviving children
            children: list[tuple[tuple[int, ...], float, LabelState, int | None]] = []
            allow_emit = round_i < max_symbols_per_frame
            for hyp in active:
                lp = model.joint_from_projections(audio_proj, hyp.state.proj)
                children.append((hyp.labels, hyp.score + lp[BLANK_ID], hyp.state, None))
                if not allow_emit:
                    continue
                for v in range(1, lp.shape[0]):
                    bonus = fusion.length_bonus
                    if fusion.lm_weight != 0.0:
                        bonus += fusion.lm_weight * fusion.lm.log_prob(hyp.labels, v)
                    children.append((hyp.labels + (v,), hyp.score + lp[v] + bonus, hyp.state, v))
            children.sort(key=lambda c: (-c[1], c[0]))
            active = []
            for labels, score, state, emitted in children[:beam_width]:
                if emitted is None:
                    _merge(done, Hypothesis(labels, score, state))
                else:
                    active.append(Hypothesis(labels, score, state.advanced(emitted)))
            if not active:
                break
        beam = sorted(done.values(), key=lambda h: (-h.score, h.labels))[:beam_width]
    return beam


def _merge(done: dict, hyp: Hypothesis):
    prior = done.get(hyp.labels)
    if prior is None:
        done[hyp.labels] = hyp
    else:
        done[hyp.labels] = Hypothesis(hyp.labels, np.logaddexp(prior.score, hyp.score), prior.state)


class _StreamStacker:
    """Streaming frame stacker: emits each stacked row as soon as its input
    span is complete; `finish` emits tail rows with last-frame padding."""

    def __init__(self, stack: int, subsample: int):
        self.stack = stack
        self.subsample = subsample
        self.frames: list[np.ndarray] = []   # raw frames from self.offset onward
        self.offset = 0
        self.next_row = 0
        self.total = 0

    def push(self, frame: np.ndarray) -> list[np.ndarray]:
        self.frames.append(np.asarray(frame, dtype=np.float64))
        self.total += 1
        rows = []
        while self.next_row * self.subsample + self.stack <= self.total:
            rows.append(self._row(self.next_row))
            self.next_row += 1
        return rows

    def finish(self) -> list[np.ndarray]:
        rows = []
        m = math.ceil(self.total / self.subsample)
        while self.next_row < m:
            rows.append(self._row(self.next_row))
            self.next_row += 1
        return rows

    def _row(self, i: int) -> np.ndarray:
        first = i * self.subsample
        picks = [min(first + k, self.total - 1) - self.offset for k in range(self.stack)]
        row = np.concatenate([self.frames[p] for p in picks])
        keep_from = (self.next_row + 1) * self.subsample
        while self.offset < keep_from and len(self.frames) > 1:
            self.frames.pop(0)
            self.offset += 1
        return row


class StreamState:
    """Single-owner streaming decoder state.

    Feed raw feature frames with `step`; each call returns the labels emitted
    once enough look-ahead arrived to finalize further encoder positions.
    `flush` signals end of stream and drains the remaining look-ahead so the
    total output matches batch greedy decoding exactly.
    """

    def __init__(self, model: TransducerModel, max_symbols_per_frame: int = 10,
                 record_activations: bool = False):
        mask = model.config.audio.mask
        if mask.left is None or mask.right is None:
            raise ValueError("streaming requires a finite audio attention window on both sides")
        self.model = model
        self.max_symbols_per_frame = max_symbols_per_frame
        self.stacker = _StreamStacker(model.config.frontend.stack, model.config.frontend.subsample)
        self.encoder = IncrementalEncoder(model.config.audio, model.params.audio, model.counters)
        self.label_state = LabelState(model)
        self.frames_consumed = 0
        self.emitted: list[int] = []
        self.flushed = False
        self.activations: list[np.ndarray] | None = [] if record_activations else None

    def step(self, frame: np.ndarray) -> list[int]:
        """Consume one raw feature frame; return labels emitted by it."""
        if self.flushed:
            raise StreamError("step after flush")
        self.frames_consumed += 1
        new = []
        for stacked_row in self.stacker.push(frame):
            new.extend(self.encoder.push(stacked_row))
        return self._decode_rows(new)

    def flush(self) -> list[int]:
        """End of stream: process pending look-ahead as if the right context
        were truncated at the final frame, exactly like a batch encode."""
        if self.flushed:
            raise StreamError("double flush")
        self.flushed = True
        new = []
        for stacked_row in self.stacker.finish():
            new.extend(self.encoder.push(stacked_row))
        new.extend(self.encoder.finish())
        return self._decode_rows(new)

    def _decode_rows(self, rows: list[np.ndarray]) -> list[int]:
        emitted: list[int] = []
        for row in rows:
            if self.activations is not None:
                self.activations.append(row)
            _greedy_frame(self.model, row, self.label_state, emitted, self.max_symbols_per_frame)
        self.emitted.extend(emitted)
        return emitted


def stream_step(state: StreamState, frame: np.ndarray) -> tuple[StreamState, list[int]]:
    """Functional face of `StreamState.step`; mutates and returns the state."""
    return state, state.step(frame)


def flush(state: StreamState) -> list[int]:
    return state.flush()
