"""Synthetic utterances with known monotonic alignments, WER, dataset files.

Each utterance renders its label sequence as runs of a fixed per-symbol
template vector plus Gaussian noise, so a non-neural nearest-template decoder
recovers the labels exactly at zero noise. Consecutive labels are always
distinct, which keeps run-length deduplication lossless.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Rng
from .transducer import Vocab


class DatasetFormatError(ValueError):
    """Dataset file violates the on-disk format."""


@dataclass
class SyntheticTaskConfig:
    vocab: int                      # non-blank symbols
    label_len: tuple[int, int]      # inclusive range of target lengths
    frames_per_label: tuple[int, int]
    feature_dim: int
    noise_sigma: float
    size: int
    seed: int
    bigram_scale: float = 0.0       # >0 gives labels a seeded bigram structure
    first_index: int = 0            # start utterance index: same seed + disjoint
                                    # index ranges share templates but no data

    def __post_init__(self):
        if self.vocab < 2:
            raise ValueError(f"need at least 2 non-blank symbols, got {self.vocab}")
        for name in ("label_len", "frames_per_label"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty or non-positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.size < 0 or self.first_index < 0:
            raise ValueError("size and first_index must be >= 0")


@dataclass
class Utterance:
    id: str
    features: np.ndarray           # [T, d] float64
    labels: list[int]              # blank-free, ids in 1..vocab

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be [T>=1, d], got shape {self.features.shape}")


@dataclass
class Dataset:
    num_labels: int                # non-blank symbols
    utterances: list[Utterance] = field(default_factory=list)

    @property
    def vocab(self) -> Vocab:
        return Vocab.from_size(self.num_labels)

    def split(self, *sizes: int) -> list["Dataset"]:
        """Slice into consecutive subsets; the remainder forms a final part."""
        parts, at = [], 0
        for n in sizes:
            parts.append(Dataset(self.num_labels, self.utterances[at:at + n]))
            at += n
        parts.append(Dataset(self.num_labels, self.utterances[at:]))
        return parts


def symbol_templates(config: SyntheticTaskConfig) -> np.ndarray:
    """Per-symbol feature templates, unit Gaussian, frozen by the seed.
    Row i-1 is the template of label id i."""
    return Rng(config.seed).substream("templates").normal((config.vocab, config.feature_dim))


def _bigram_table(config: SyntheticTaskConfig) -> np.ndarray:
    """Row-stochastic next-label table (rows: previous label 0=start, 1..V);
    immediate repeats are forbidden so template runs stay unambiguous."""
    rng = Rng(config.seed).substream("bigram")
    logits = rng.normal((config.vocab + 1, config.vocab), sigma=config.bigram_scale)
    for prev in range(1, config.vocab + 1):
        logits[prev, prev - 1] = -np.inf
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    return probs / probs.sum(axis=1, keepdims=True)


def gen_synthetic(config: SyntheticTaskConfig) -> Dataset:
    """Render `size` utterances. Label sequences follow the (possibly flat)
    bigram table; each label occupies a sampled number of consecutive frames
    of its template plus noise."""
    templates = symbol_templates(config)
    table = _bigram_table(config)
    root = Rng(config.seed)
    utts = []
    for i in range(config.first_index, config.first_index + config.size):
        rng = root.substream(f"utt{i}")
        u = rng.integers(config.label_len[0], config.label_len[1] + 1)
        labels = []
        prev = 0
        for _ in range(u):
            r = rng.uniform()
            label = int(np.searchsorted(np.cumsum(table[prev]), r)) + 1
            label = min(label, config.vocab)
            labels.append(label)
            prev = label
        rows = []
        for label in labels:
            k = rng.integers(config.frames_per_label[0], config.frames_per_label[1] + 1)
            rows.append(np.tile(templates[label - 1], (k, 1)))
        features = np.concatenate(rows, axis=0)
        if config.noise_sigma > 0:
            features = features + rng.normal(features.shape, sigma=config.noise_sigma)
        utts.append(Utterance(id=f"utt{i:05d}", features=features, labels=labels))
    return Dataset(config.vocab, utts)


def nearest_template_decode(features: np.ndarray, templates: np.ndarray) -> list[int]:
    """Non-neural reference decoder: classify each frame by nearest template,
    then collapse runs. Exact on noiseless data."""
    d2 = ((features[:, None, :] - templates[None, :, :]) ** 2).sum(axis=2)
    per_frame = d2.argmin(axis=1) + 1
    out = []
    for label in per_frame:
        if not out or out[-1] != label:
            out.append(int(label))
    return out


def edit_distance(ref, hyp) -> int:
    """Levenshtein distance over sequence items."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref, hyp) -> float:
    """(substitutions + insertions + deletions) / |ref|."""
    ref = list(ref)
    if not ref:
        raise ValueError("wer needs a non-empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(pairs) -> float:
    """Total edits over total reference length across (ref, hyp) pairs."""
    edits, total = 0, 0
    for ref, hyp in pairs:
        edits += edit_distance(ref, hyp)
        total += len(list(ref))
    if total == 0:
        raise ValueError("corpus_wer needs non-empty references")
    return edits / total


_MAGIC = b"TTDS"
_VERSION = 1


def dataset_bytes(dataset: Dataset) -> bytes:
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<I", _VERSION)
    out += struct.pack("<QQ", dataset.num_labels, len(dataset.utterances))
    for utt in dataset.utterances:
        ident = utt.id.encode("utf-8")
        t, d = utt.features.shape
        out += struct.pack("<Q", len(ident)) + ident
        out += struct.pack("<QQ", t, d)
        out += np.ascontiguousarray(utt.features, dtype="<f8").tobytes()
        out += struct.pack("<Q", len(utt.labels))
        out += np.asarray(utt.labels, dtype="<u4").tobytes()
    return bytes(out)


def write_dataset(dataset: Dataset, path):
    with open(path, "wb") as f:
        f.write(dataset_bytes(dataset))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.at = 0

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.data):
            raise DatasetFormatError(f"truncated file: needed {n} bytes at offset {self.at}")
        chunk = self.data[self.at:self.at + n]
        self.at += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != _MAGIC:
        raise DatasetFormatError("bad magic: not a dataset file")
    version = r.u32()
    if version != _VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    num_labels = r.u64()
    count = r.u64()
    utts = []
    for _ in range(count):
        ident = r.take(r.u64()).decode("utf-8")
        t, d = r.u64(), r.u64()
        features = np.frombuffer(r.take(t * d * 8), dtype="<f8").reshape(t, d).copy()
        n_labels = r.u64()
        labels = np.frombuffer(r.take(n_labels * 4), dtype="<u4").tolist()
        for label in labels:
            if not 1 <= label <= num_labels:
                raise DatasetFormatError(f"label {label} outside declared vocab of {num_labels}")
        utts.append(Utterance(id=ident, features=features, labels=[int(x) for x in labels]))
    if r.at != len(r.data):
        raise DatasetFormatError(f"{len(r.data) - r.at} trailing bytes after last utterance")
    return Dataset(num_labels, utts)
