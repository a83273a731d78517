"""Optimization loop: learning-rate schedule, weight noise, adaptive-moment
updates with global-norm clipping, and versioned checkpoints.

The schedule ramps linearly from zero to the peak rate, holds, then decays
geometrically to the final rate. Weight noise perturbs only the forward pass:
noisy views are graph nodes over the stored leaves, so gradients land on the
stored parameters while updates point against the perturbed loss.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tt
from .model import ModelParams, TransducerModel, init_model, model_config_from_dict, model_config_to_dict
from .tasks import Utterance
from .tensor import NumericsError, Rng, Tensor, backward
from .transducer import batch_loss


class CheckpointFormatError(ValueError):
    """Checkpoint file violates the on-disk format."""


@dataclass
class ScheduleConfig:
    peak_lr: float = 2.5e-4
    warmup_steps: int = 4000
    hold_until: int = 30000
    decay_until: int = 200000
    final_lr: float = 2.5e-6

    def __post_init__(self):
        if not 0 < self.warmup_steps <= self.hold_until < self.decay_until:
            raise ValueError(
                f"need 0 < warmup_steps <= hold_until < decay_until, got "
                f"{self.warmup_steps}, {self.hold_until}, {self.decay_until}")
        if not 0 < self.final_lr <= self.peak_lr:
            raise ValueError(f"need 0 < final_lr <= peak_lr, got {self.final_lr}, {self.peak_lr}")


def lr_at(step: int, s: ScheduleConfig) -> float:
    """Linear warmup to the peak, constant hold, geometric decay to the
    final rate, then constant."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step <= s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if step <= s.hold_until:
        return s.peak_lr
    if step < s.decay_until:
        frac = (step - s.hold_until) / (s.decay_until - s.hold_until)
        return s.peak_lr * (s.final_lr / s.peak_lr) ** frac
    return s.final_lr


@dataclass
class TrainConfig:
    batch_size: int = 8
    total_steps: int = 1000
    seed: int = 0
    weight_noise_sigma: float = 0.0
    weight_noise_start_step: int = 10000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float = 5.0
    checkpoint_interval: int = 200

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 0 or self.checkpoint_interval < 1:
            raise ValueError("batch_size/checkpoint_interval must be >= 1 and total_steps >= 0")
        if self.weight_noise_sigma < 0:
            raise ValueError("weight_noise_sigma must be >= 0")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")


class Adam:
    """Adaptive moment estimation with bias correction, stepping every
    parameter in the fixed named order."""

    def __init__(self, model: TransducerModel, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in model.named_params()}
        self.v = {name: np.zeros_like(p.values) for name, p in model.named_params()}

    def step(self, model: TransducerModel, grads: dict[str, np.ndarray], lr: float):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.adam_beta1 ** self.t
        bc2 = 1.0 - c.adam_beta2 ** self.t
        for name, p in model.named_params():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.adam_beta1
            m += (1.0 - c.adam_beta1) * g
            v *= c.adam_beta2
            v += (1.0 - c.adam_beta2) * g * g
            p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients down so their global norm is at most `max_norm`;
    direction is preserved. Returns the pre-clip norm."""
    norm = global_norm(list(grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def apply_weight_noise(params: ModelParams, sigma: float, step: int,
                       start_step: int, rng: Rng) -> ModelParams:
    """Forward-pass weights: params + N(0, sigma^2) once `step` reaches
    `start_step`. The noise is a constant in the graph, so gradients flow to
    the stored parameters and the noise itself is never persisted."""
    if sigma == 0.0 or step < start_step:
        return params
    stream = rng.substream(f"weight_noise/{step}")
    return params.transform(lambda p: tt.add(p, Tensor(stream.normal(p.shape, sigma=sigma))))


def train_step(model: TransducerModel, optimizer: Adam, batch: Sequence[Utterance],
               step: int, schedule: ScheduleConfig, cfg: TrainConfig, rng: Rng) -> float:
    """One optimization step over a batch; returns the batch loss.

    Deterministic for a given (seed, step): augmentation, dropout, and noise
    all draw from labeled sub-streams keyed by the step and example index.
    """
    if not batch:
        raise ValueError("train_step needs a non-empty batch")
    lr = lr_at(step, schedule)
    step_rng = rng.substream(f"step{step}")
    model.zero_grad()

    fwd = model
    if cfg.weight_noise_sigma > 0.0 and step >= cfg.weight_noise_start_step:
        fwd = model.with_params(apply_weight_noise(
            model.params, cfg.weight_noise_sigma, step, cfg.weight_noise_start_step, step_rng))

    items = []
    for i, utt in enumerate(batch):
        grid = fwd.example_grid(utt.features, utt.labels, step_rng.substream(f"ex{i}"), training=True)
        items.append((grid, utt.labels))
    loss = batch_loss(items)
    value = loss.item()
    if not np.isfinite(value):
        ids = [utt.id for utt in batch]
        raise NumericsError(f"non-finite loss {value} at step {step} (examples {ids})")
    backward(loss)

    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.values))
             for name, p in model.named_params()}
    clip_gradients(grads, cfg.grad_clip_norm)
    optimizer.step(model, grads, lr)
    return value


def train_loop(model: TransducerModel, dataset, schedule: ScheduleConfig, cfg: TrainConfig,
               out_dir=None, log_fn=None) -> list[float]:
    """Run `total_steps` over the dataset in fixed batch order, optionally
    writing periodic checkpoints and per-step metric records."""
    import os

    optimizer = Adam(model, cfg)
    rng = Rng(cfg.seed)
    utts = dataset.utterances
    if not utts:
        raise ValueError("training dataset is empty")
    losses = []
    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
    start = time.monotonic()
    for step in range(cfg.total_steps):
        at = (step * cfg.batch_size) % len(utts)
        batch = [utts[(at + k) % len(utts)] for k in range(cfg.batch_size)]
        loss = train_step(model, optimizer, batch, step, schedule, cfg, rng)
        losses.append(loss)
        record = {"step": step, "loss": loss, "lr": lr_at(step, schedule),
                  "wall_clock": time.monotonic() - start}
        if metrics_path is not None:
            with open(metrics_path, "a") as f:
                f.write(json.dumps(record) + "\n")
        if log_fn is not None:
            log_fn(record)
        if out_dir is not None and (step + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(model, os.path.join(out_dir, f"ckpt_{step + 1:06d}.ttck"))
    if out_dir is not None:
        save_checkpoint(model, os.path.join(out_dir, "ckpt_final.ttck"))
    return losses


_MAGIC = b"TTCK"
_VERSION = 1


def checkpoint_bytes(model: TransducerModel) -> bytes:
    config_doc = json.dumps(model_config_to_dict(model.config),
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
    named = model.named_params()
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _VERSION)
    out += struct.pack("<Q", len(config_doc)) + config_doc
    out += struct.pack("<Q", len(named))
    for name, p in named:
        ident = name.encode("utf-8")
        out += struct.pack("<Q", len(ident)) + ident
        out += struct.pack("<Q", p.values.ndim)
        out += struct.pack(f"<{p.values.ndim}Q", *p.values.shape)
        out += np.ascontiguousarray(p.values, dtype="<f8").tobytes()
    return bytes(out)


def save_checkpoint(model: TransducerModel, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.at = 0

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.data):
            raise CheckpointFormatError(f"truncated file: needed {n} bytes at offset {self.at}")
        chunk = self.data[self.at:self.at + n]
        self.at += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path) -> TransducerModel:
    """Rebuild the model from the embedded config and stored tensors. Tensor
    names and shapes must agree exactly with what the config implies."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != _MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        config = model_config_from_dict(json.loads(r.take(r.u64()).decode("utf-8")))
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"bad embedded config: {e}") from e

    model = init_model(config, Rng(0))
    expected = dict(model.named_params())
    count = r.u64()
    if count != len(expected):
        raise CheckpointFormatError(f"checkpoint has {count} tensors, config implies {len(expected)}")
    seen = set()
    for _ in range(count):
        name = r.take(r.u64()).decode("utf-8")
        if name not in expected:
            raise CheckpointFormatError(f"unexpected tensor {name!r}")
        if name in seen:
            raise CheckpointFormatError(f"duplicate tensor {name!r}")
        seen.add(name)
        rank = r.u64()
        shape = tuple(r.u64() for _ in range(rank))
        p = expected[name]
        if shape != p.shape:
            raise CheckpointFormatError(
                f"shape disagreement for {name!r}: file has {shape}, config implies {p.shape}")
        n = int(np.prod(shape)) if shape else 1
        p.values[...] = np.frombuffer(r.take(n * 8), dtype="<f8").reshape(shape)
    if r.at != len(r.data):
        raise CheckpointFormatError(f"{len(r.data) - r.at} trailing bytes after last tensor")
    return model
