"""Joint network, alignment lattice, and the marginal log-probability loss.

The joint network turns one audio activation and one label-history activation
into a distribution over the output vocabulary (blank included). Stacking
those distributions over every (frame, history-length) pair gives the
log-probability grid; the training loss marginalizes over all monotonic
alignments through that grid with a log-space forward recursion, built inside
the differentiation graph so `backward` yields exact loss gradients.

`brute_force_log_prob` enumerates alignments outright and exists purely as
the small-instance oracle for the recursion.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as tt
from .tensor import Rng, ShapeError, Tensor

BLANK_ID = 0

# Test hook: added to every blank transition inside the forward recursion.
# Non-zero values deliberately break the oracle-equivalence suite.
dp_perturbation = 0.0


@dataclass(frozen=True)
class Vocab:
    """Output vocabulary. Index 0 is always blank; blank never occurs in
    target sequences."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(self.symbols) < 2:
            raise ValueError(f"vocab needs blank plus at least one symbol, got {len(self.symbols)}")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocab symbols must be unique")

    @classmethod
    def from_size(cls, num_labels: int) -> "Vocab":
        """Blank plus `num_labels` symbolic labels s1..sN."""
        return cls(("<b>",) + tuple(f"s{i}" for i in range(1, num_labels + 1)))

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def blank_id(self) -> int:
        return BLANK_ID

    def name(self, label_id: int) -> str:
        return self.symbols[label_id]

    def check_targets(self, y: Sequence[int]):
        for label in y:
            if not 0 < label < self.size:
                raise ValueError(f"target label {label} outside vocab of size {self.size} (blank forbidden)")


@dataclass
class JointParams:
    audio_w: Tensor   # [d_audio, joint_dim]
    audio_b: Tensor
    label_w: Tensor   # [d_label, joint_dim]
    label_b: Tensor
    out_w: Tensor     # [joint_dim, V]
    out_b: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for f in ("audio_w", "audio_b", "label_w", "label_b", "out_w", "out_b"):
            yield f"{prefix}.{f}", getattr(self, f)

    def transform(self, fn: Callable[[Tensor], Tensor]) -> "JointParams":
        return JointParams(*(fn(getattr(self, f)) for f in
                             ("audio_w", "audio_b", "label_w", "label_b", "out_w", "out_b")))


def init_joint_params(d_audio: int, d_label: int, joint_dim: int, vocab_size: int, rng: Rng) -> JointParams:
    def dense(label, fan_in, fan_out):
        return Tensor(rng.substream(label).normal((fan_in, fan_out), sigma=1.0 / np.sqrt(fan_in)))

    return JointParams(
        audio_w=dense("audio_w", d_audio, joint_dim),
        audio_b=tt.zeros(joint_dim),
        label_w=dense("label_w", d_label, joint_dim),
        label_b=tt.zeros(joint_dim),
        out_w=dense("out_w", joint_dim, vocab_size),
        out_b=tt.zeros(vocab_size),
    )


@dataclass
class LogProbGrid:
    """[T, U+1, V] log-probabilities: entry (t, u) is the distribution over
    the next output given frame t and a label history of length u. Every
    (t, u) row is a proper distribution (logsumexp 0)."""

    log_probs: Tensor

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def U(self) -> int:
        return self.log_probs.shape[1] - 1

    @property
    def vocab_size(self) -> int:
        return self.log_probs.shape[2]


def joint_logits(audio_t: Tensor, label_u: Tensor, params: JointParams) -> Tensor:
    """Combine one audio activation with one label-history activation:
    Linear(audio) + Linear(label) -> tanh -> Linear -> logits over V."""
    if audio_t.shape != (params.audio_w.shape[0],):
        raise ShapeError(f"audio activation shape {audio_t.shape} != ({params.audio_w.shape[0]},)")
    if label_u.shape != (params.label_w.shape[0],):
        raise ShapeError(f"label activation shape {label_u.shape} != ({params.label_w.shape[0]},)")
    pre = tt.add(
        tt.add(tt.matmul(audio_t, params.audio_w), params.audio_b),
        tt.add(tt.matmul(label_u, params.label_w), params.label_b),
    )
    return tt.add(tt.matmul(tt.tanh(pre), params.out_w), params.out_b)


def log_prob_grid(audio_acts: Tensor, label_acts: Tensor, params: JointParams) -> LogProbGrid:
    """Joint distribution at every (frame, history) pair, batched.

    The value at (t, u) is a pure function of the frame-t audio activation
    and the length-u history activation; no alignment context enters.
    """
    T = audio_acts.shape[0]
    u1 = label_acts.shape[0]
    a = tt.add(tt.matmul(audio_acts, params.audio_w), params.audio_b)   # [T, J]
    l = tt.add(tt.matmul(label_acts, params.label_w), params.label_b)  # [U+1, J]
    joint_dim = a.shape[1]
    pre = tt.add(tt.reshape(a, (T, 1, joint_dim)), tt.reshape(l, (1, u1, joint_dim)))
    hid = tt.reshape(tt.tanh(pre), (T * u1, joint_dim))
    logits = tt.add(tt.matmul(hid, params.out_w), params.out_b)
    grid = tt.log_softmax(tt.reshape(logits, (T, u1, params.out_w.shape[1])), axis=-1)
    return LogProbGrid(grid)


def _check_loss_args(grid: LogProbGrid, y: Sequence[int]):
    if len(y) > grid.U:
        raise ShapeError(f"grid holds {grid.U} history rows but targets have length {len(y)}")
    if grid.T == 0:
        raise ShapeError("grid must cover at least one frame")
    for label in y:
        if not 0 < label < grid.vocab_size:
            raise ValueError(f"label {label} outside vocab of size {grid.vocab_size} (blank forbidden)")


def rnnt_log_prob(grid: LogProbGrid, y: Sequence[int]) -> Tensor:
    """log P(y | x): forward recursion over the alignment lattice.

    alpha(t, u) accumulates all paths reaching frame t with u labels emitted;
    blanks advance the frame, target labels advance the history, and the path
    closes with the blank consuming the final frame. Runs inside the graph,
    so gradients flow through every on-lattice grid entry.
    """
    y = list(y)
    _check_loss_args(grid, y)
    T, U = grid.T, len(y)
    lp = grid.log_probs

    blanks = lp[:, :U + 1, BLANK_ID]  # [T, U+1]
    if dp_perturbation != 0.0:
        blanks = tt.add(blanks, Tensor(dp_perturbation))
    if U > 0:
        idx = np.broadcast_to(np.asarray(y, dtype=np.intp), (T, U)).copy()
        labels = tt.gather_last(lp[:, :U, :], idx)  # [T, U]; labels[t, u] = lp[t, u, y[u]]
    else:
        labels = None

    # alpha[t][u], 0-based frames; alpha[0][0] = log 1
    prev_row: list[Tensor] = [Tensor(0.0)]
    for u in range(1, U + 1):
        prev_row.append(tt.add(prev_row[u - 1], labels[0, u - 1]))
    for t in range(1, T):
        row: list[Tensor] = [tt.add(prev_row[0], blanks[t - 1, 0])]
        for u in range(1, U + 1):
            stay = tt.add(prev_row[u], blanks[t - 1, u])
            emit = tt.add(row[u - 1], labels[t, u - 1])
            row.append(tt.logaddexp(stay, emit))
        prev_row = row
    return tt.add(prev_row[U], blanks[T - 1, U])


def enumerate_alignments(T: int, U: int) -> Iterator[tuple[int, ...]]:
    """All valid alignments as move strings (0 = blank, 1 = emit label).

    A valid alignment interleaves T blanks with U label emissions and ends
    with the blank that consumes the final frame.
    """
    if T < 1:
        return
    total = T + U
    for label_slots in combinations(range(total - 1), U):
        moves = [0] * total
        for s in label_slots:
            moves[s] = 1
        yield tuple(moves)


def brute_force_log_prob(grid: LogProbGrid | np.ndarray, y: Sequence[int], max_size: int = 14) -> float:
    """Oracle: enumerate every alignment and sum the path probabilities.

    Deliberately naive; refuses instances with T + U beyond `max_size`.
    """
    lp = grid.log_probs.values if isinstance(grid, LogProbGrid) else np.asarray(grid)
    y = list(y)
    T, U = lp.shape[0], len(y)
    if U + 1 > lp.shape[1]:
        raise ShapeError(f"grid holds {lp.shape[1] - 1} history rows but targets have length {U}")
    if T + U > max_size:
        raise ValueError(f"instance too large for enumeration: T + U = {T + U} > {max_size}")
    if T == 0:
        raise ShapeError("grid must cover at least one frame")

    path_scores = []
    for moves in enumerate_alignments(T, U):
        t, u, acc = 0, 0, 0.0
        for move in moves:
            if move == 0:
                acc += lp[t, u, BLANK_ID]
                t += 1
            else:
                acc += lp[t, u, y[u]]
                u += 1
        path_scores.append(acc)
    m = max(path_scores)
    if m == -np.inf:
        return -np.inf
    return m + np.log(sum(np.exp(s - m) for s in path_scores))


def batch_loss(items: Sequence[tuple[LogProbGrid, Sequence[int]]]) -> Tensor:
    """Sum of negative alignment-marginal log-probabilities over a batch,
    reduced in example order."""
    total = None
    for grid, y in items:
        term = rnnt_log_prob(grid, y)
        total = term if total is None else tt.add(total, term)
    if total is None:
        raise ValueError("batch_loss needs at least one example")
    return tt.neg(total)


def random_grid(T: int, U: int, V: int, rng: Rng) -> LogProbGrid:
    """Well-formed random grid (each row a proper distribution); test helper."""
    logits = Tensor(rng.normal((T, U + 1, V), sigma=2.0))
    return LogProbGrid(tt.log_softmax(logits, axis=-1))


def uniform_grid(T: int, U: int, V: int) -> LogProbGrid:
    return LogProbGrid(tt.log_softmax(tt.zeros((T, U + 1, V)), axis=-1))
