"""Model container: audio encoder + label encoder + joint network.

Ties the encoder stacks and joint parameters to a vocabulary and frontend so
training, decoding, and checkpointing can treat the whole model as one unit
with a flat named-parameter view.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import attention as att
from . import frontend as fe
from . import tensor as tt
from . import transducer as tr
from .attention import AttentionMask, Counters, EncoderConfig, EncoderParams
from .frontend import FrontendConfig
from .tensor import Rng, Tensor
from .transducer import JointParams, LogProbGrid, Vocab


@dataclass
class ModelConfig:
    vocab_size: int               # including blank
    feature_dim: int              # raw features, before stacking
    joint_dim: int
    audio: EncoderConfig
    label: EncoderConfig
    frontend: FrontendConfig

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.joint_dim < 1:
            raise ValueError("joint_dim must be positive")
        stacked = self.feature_dim * self.frontend.stack
        if self.audio.input_dim != stacked:
            raise ValueError(
                f"audio input_dim {self.audio.input_dim} != feature_dim*stack = {stacked}")
        if self.label.mask.right != 0:
            raise ValueError(
                f"label encoder must be causal (right=0), got right={self.label.mask.right}")

    @property
    def vocab(self) -> Vocab:
        return Vocab.from_size(self.vocab_size - 1)


@dataclass
class ModelParams:
    audio: EncoderParams
    label: EncoderParams
    label_embedding: Tensor       # [V, label.input_dim]; row 0 doubles as start-of-sequence
    joint: JointParams

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.audio.named("audio")
        yield from self.label.named("label")
        yield "label_embedding", self.label_embedding
        yield from self.joint.named("joint")

    def transform(self, fn: Callable[[Tensor], Tensor]) -> "ModelParams":
        return ModelParams(
            audio=self.audio.transform(fn),
            label=self.label.transform(fn),
            label_embedding=fn(self.label_embedding),
            joint=self.joint.transform(fn),
        )


class TransducerModel:
    def __init__(self, config: ModelConfig, params: ModelParams, counters: Counters | None = None):
        self.config = config
        self.params = params
        self.counters = counters if counters is not None else Counters()

    @property
    def vocab(self) -> Vocab:
        return self.config.vocab

    def named_params(self) -> list[tuple[str, Tensor]]:
        return list(self.params.named())

    def with_params(self, params: ModelParams) -> "TransducerModel":
        """Same config and counters over substituted parameters (weight
        noise views share the underlying leaves through the graph)."""
        return TransducerModel(self.config, params, self.counters)

    def zero_grad(self):
        for _, p in self.params.named():
            p.zero_grad()

    # ------------------------------------------------------------ forward

    def prepare_features(self, features: np.ndarray, rng: Rng | None = None, training: bool = False) -> np.ndarray:
        """Frontend: stacking/subsampling, plus masking when training."""
        out = fe.stack_subsample(features, self.config.frontend.stack, self.config.frontend.subsample)
        if training and rng is not None:
            out = fe.spec_augment(out, self.config.frontend, rng.substream("augment"))
        return out

    def encode_audio(self, stacked: np.ndarray, rng: Rng | None = None, training: bool = False) -> Tensor:
        """Audio encoder over already-prepared (stacked) features."""
        return att.encode(Tensor(stacked), self.config.audio, self.params.audio,
                          rng.substream("audio") if rng else None, training, self.counters)

    def encode_labels(self, y: Sequence[int], rng: Rng | None = None, training: bool = False) -> Tensor:
        """Label encoder over the start token plus the target history; row u
        encodes the first u labels."""
        self.vocab.check_targets(y)
        ids = np.array([tr.BLANK_ID] + list(y), dtype=np.intp)
        emb = tt.rows(self.params.label_embedding, ids)
        return att.encode(emb, self.config.label, self.params.label,
                          rng.substream("label") if rng else None, training, self.counters)

    def example_grid(self, features: np.ndarray, y: Sequence[int],
                     rng: Rng | None = None, training: bool = False) -> LogProbGrid:
        stacked = self.prepare_features(features, rng, training)
        audio = self.encode_audio(stacked, rng, training)
        labels = self.encode_labels(y, rng, training)
        self.counters.joint_evals += audio.shape[0] * labels.shape[0]
        return tr.log_prob_grid(audio, labels, self.params.joint)

    def joint_log_probs(self, audio_vec: np.ndarray, label_vec: np.ndarray) -> np.ndarray:
        """Single (frame, history) joint distribution for decoding."""
        return self.joint_from_projections(self.project_audio(audio_vec),
                                           self.project_label(label_vec))

    # Decoding evaluates the joint many times against few distinct encoder
    # activations, so the two linear halves are exposed for caching. The
    # arithmetic matches joint_logits exactly: tanh((a W_a + b_a) + (l W_l
    # + b_l)) W_o + b_o, then log-softmax.

    def project_audio(self, audio_vec: np.ndarray) -> np.ndarray:
        j = self.params.joint
        return audio_vec @ j.audio_w.values + j.audio_b.values

    def project_label(self, label_vec: np.ndarray) -> np.ndarray:
        j = self.params.joint
        return label_vec @ j.label_w.values + j.label_b.values

    def joint_from_projections(self, audio_proj: np.ndarray, label_proj: np.ndarray) -> np.ndarray:
        self.counters.joint_evals += 1
        j = self.params.joint
        logits = np.tanh(audio_proj + label_proj) @ j.out_w.values + j.out_b.values
        m = logits.max()
        return logits - (m + np.log(np.exp(logits - m).sum()))


def init_model(config: ModelConfig, rng: Rng) -> TransducerModel:
    emb = Tensor(rng.substream("embedding").normal(
        (config.vocab_size, config.label.input_dim)))
    params = ModelParams(
        audio=att.init_encoder_params(config.audio, rng.substream("audio")),
        label=att.init_encoder_params(config.label, rng.substream("label")),
        label_embedding=emb,
        joint=tr.init_joint_params(config.audio.model_dim, config.label.model_dim,
                                   config.joint_dim, config.vocab_size, rng.substream("joint")),
    )
    return TransducerModel(config, params)


def _mask_to_dict(mask: AttentionMask) -> dict:
    return {"left": mask.left, "right": mask.right}


def _encoder_config_to_dict(cfg: EncoderConfig) -> dict:
    return {
        "num_layers": cfg.num_layers, "model_dim": cfg.model_dim,
        "ff_dim1": cfg.ff_dim1, "ff_dim2": cfg.ff_dim2,
        "num_heads": cfg.num_heads, "head_dim": cfg.head_dim,
        "dropout_ratio": cfg.dropout_ratio, "mask": _mask_to_dict(cfg.mask),
        "input_dim": cfg.input_dim, "max_relative_offset": cfg.max_relative_offset,
        "ln_eps": cfg.ln_eps, "final_layer_norm": cfg.final_layer_norm,
    }


def _encoder_config_from_dict(d: dict) -> EncoderConfig:
    d = dict(d)
    mask = d.pop("mask")
    return EncoderConfig(mask=AttentionMask(mask["left"], mask["right"]), **d)


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "vocab_size": cfg.vocab_size, "feature_dim": cfg.feature_dim,
        "joint_dim": cfg.joint_dim,
        "audio": _encoder_config_to_dict(cfg.audio),
        "label": _encoder_config_to_dict(cfg.label),
        "frontend": {
            "stack": cfg.frontend.stack, "subsample": cfg.frontend.subsample,
            "freq_mask_width": cfg.frontend.freq_mask_width,
            "freq_mask_count": cfg.frontend.freq_mask_count,
            "time_mask_width": cfg.frontend.time_mask_width,
            "time_mask_count": cfg.frontend.time_mask_count,
            "augment_enabled": cfg.frontend.augment_enabled,
        },
    }


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        vocab_size=d["vocab_size"], feature_dim=d["feature_dim"], joint_dim=d["joint_dim"],
        audio=_encoder_config_from_dict(d["audio"]),
        label=_encoder_config_from_dict(d["label"]),
        frontend=FrontendConfig(**d["frontend"]),
    )


def desk_config(
    vocab_size: int = 7,
    feature_dim: int = 16,
    audio_mask: AttentionMask = AttentionMask(None, None),
    label_left: int | None = None,
    num_audio_layers: int = 2,
    num_label_layers: int = 1,
    model_dim: int = 32,
    dropout: float = 0.1,
    frontend: FrontendConfig | None = None,
    max_relative_offset: int = 16,
) -> ModelConfig:
    """Default desk-scale setup: 2 audio layers, 1 label layer, model_dim 32,
    2 heads. Masks and sizes stay configurable up to full-paper shapes."""
    frontend = frontend if frontend is not None else FrontendConfig()
    audio = EncoderConfig(
        num_layers=num_audio_layers, model_dim=model_dim, ff_dim1=2 * model_dim,
        ff_dim2=model_dim, num_heads=2, head_dim=model_dim // 2,
        dropout_ratio=dropout, mask=audio_mask,
        input_dim=feature_dim * frontend.stack,
        max_relative_offset=max_relative_offset,
    )
    label = EncoderConfig(
        num_layers=num_label_layers, model_dim=model_dim, ff_dim1=2 * model_dim,
        ff_dim2=model_dim, num_heads=2, head_dim=model_dim // 2,
        dropout_ratio=dropout, mask=AttentionMask(label_left, 0),
        input_dim=model_dim,
        max_relative_offset=max_relative_offset,
    )
    return ModelConfig(
        vocab_size=vocab_size, feature_dim=feature_dim, joint_dim=model_dim,
        audio=audio, label=label, frontend=frontend,
    )
