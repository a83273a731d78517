"""Command-line surface: train, decode, eval, selftest, gen-data.

Exit codes: 0 success, 1 test/assertion failure, 2 usage or config error,
3 numerical failure. Every run prints its resolved configuration and seed to
stderr, so identical printed configs imply identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import decode as dec
from . import transducer as tr
from .config import ConfigError, DecodeOptions, load_run_config, resolved_config_dict
from .decode import BigramLm, FusionConfig, StreamState
from .model import init_model
from .tasks import DatasetFormatError, SyntheticTaskConfig, corpus_wer, edit_distance, gen_synthetic, read_dataset, write_dataset
from .tensor import NumericsError, Rng
from .train import CheckpointFormatError, load_checkpoint, train_loop

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _log(message: str):
    print(message, file=sys.stderr)


def _print_resolved(config_dict: dict, seed: int):
    _log(f"seed: {seed}")
    _log("resolved config: " + json.dumps(config_dict, sort_keys=True))


def _load_dataset_or_exit(path):
    try:
        return read_dataset(path)
    except FileNotFoundError:
        _log(f"error: dataset not found: {path}")
        raise SystemExit(EXIT_USAGE)
    except DatasetFormatError as e:
        _log(f"error: bad dataset file: {e}")
        raise SystemExit(EXIT_USAGE)


def _load_checkpoint_or_exit(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        _log(f"error: checkpoint not found: {path}")
        raise SystemExit(EXIT_USAGE)
    except CheckpointFormatError as e:
        _log(f"error: unreadable checkpoint: {e}")
        raise SystemExit(EXIT_USAGE)


def cmd_train(args) -> int:
    try:
        run = load_run_config(args.config)
    except ConfigError as e:
        _log(f"error: {e}")
        return EXIT_USAGE
    _print_resolved(resolved_config_dict(run), run.seed)
    if "dataset" not in run.paths:
        _log("error: config.paths.dataset: missing required key")
        return EXIT_USAGE
    data = _load_dataset_or_exit(run.paths["dataset"])
    if data.num_labels + 1 != run.model.vocab_size:
        _log(f"error: dataset vocab {data.num_labels}+blank != config.model.vocab_size {run.model.vocab_size}")
        return EXIT_USAGE
    model = init_model(run.model, Rng(run.seed))
    try:
        losses = train_loop(model, data, run.schedule, run.train, out_dir=args.out)
    except NumericsError as e:
        _log(f"error: {e}")
        return EXIT_NUMERIC
    _log(f"trained {len(losses)} steps; final loss {losses[-1]:.4f}; checkpoints in {args.out}")
    return EXIT_OK


def _build_fusion(args, model) -> FusionConfig | None:
    if args.lm_weight == 0.0 and args.length_bonus == 0.0:
        return None
    lm = None
    if args.lm_weight != 0.0:
        if not args.lm_dataset:
            _log("error: --lm-weight needs --lm-dataset to fit the bundled bigram scorer")
            raise SystemExit(EXIT_USAGE)
        lm_data = _load_dataset_or_exit(args.lm_dataset)
        lm = BigramLm.fit([u.labels for u in lm_data.utterances], model.vocab.size - 1)
    return FusionConfig(lm_weight=args.lm_weight, length_bonus=args.length_bonus, lm=lm)


def _transcribe(model, data, mode: str, opts: DecodeOptions, fusion: FusionConfig | None):
    """One (id, labels) pair per utterance, ordered by id."""
    out = []
    for utt in sorted(data.utterances, key=lambda u: u.id):
        if mode == "greedy":
            labels = dec.greedy_decode(model, utt.features, opts.max_symbols_per_frame)
        elif mode == "beam":
            best = dec.beam_decode(model, utt.features, opts.beam_width, fusion,
                                   opts.max_symbols_per_frame)
            labels = list(best[0].labels)
        elif mode == "stream":
            state = StreamState(model, opts.max_symbols_per_frame)
            labels = []
            for t in range(utt.features.shape[0]):
                labels.extend(state.step(utt.features[t]))
            labels.extend(state.flush())
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        out.append((utt.id, labels))
    return out


def cmd_decode(args) -> int:
    model = _load_checkpoint_or_exit(args.checkpoint)
    data = _load_dataset_or_exit(args.dataset)
    _print_resolved({"checkpoint": args.checkpoint, "dataset": args.dataset,
                     "mode": args.mode, "beam_width": args.beam_width,
                     "lm_weight": args.lm_weight, "length_bonus": args.length_bonus}, 0)
    if args.mode == "stream" and (model.config.audio.mask.left is None
                                  or model.config.audio.mask.right is None):
        _log("error: stream mode requires a finite audio attention window in the checkpoint")
        return EXIT_USAGE
    opts = DecodeOptions(beam_width=args.beam_width, lm_weight=args.lm_weight,
                         length_bonus=args.length_bonus,
                         max_symbols_per_frame=args.max_symbols_per_frame)
    fusion = _build_fusion(args, model)
    vocab = model.vocab
    lines = [f"{utt_id}\t{' '.join(vocab.name(l) for l in labels)}"
             for utt_id, labels in _transcribe(model, data, args.mode, opts, fusion)]
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.output:
        with open(args.output, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_checkpoint_or_exit(args.checkpoint)
    data = _load_dataset_or_exit(args.dataset)
    _print_resolved({"checkpoint": args.checkpoint, "dataset": args.dataset,
                     "mode": args.mode}, 0)
    opts = DecodeOptions(beam_width=args.beam_width,
                         max_symbols_per_frame=args.max_symbols_per_frame)
    refs = {utt.id: utt.labels for utt in data.utterances}
    per_utt = []
    for utt_id, hyp in _transcribe(model, data, args.mode, opts, None):
        ref = refs[utt_id]
        per_utt.append({"id": utt_id, "ref_len": len(ref),
                        "errors": edit_distance(ref, hyp),
                        "ref": ref, "hyp": hyp})
    report = {
        "wer": corpus_wer([(refs[r["id"]], r["hyp"]) for r in per_utt]),
        "utterances": per_utt,
    }
    json.dump(report, sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        cfg = SyntheticTaskConfig(
            vocab=args.vocab, label_len=(args.min_labels, args.max_labels),
            frames_per_label=(args.min_frames, args.max_frames),
            feature_dim=args.feature_dim, noise_sigma=args.noise,
            size=args.size, seed=args.seed, bigram_scale=args.bigram_scale,
            first_index=args.first_index)
    except ValueError as e:
        _log(f"error: {e}")
        return EXIT_USAGE
    _print_resolved({"command": "gen-data", "out": args.out, "vocab": args.vocab,
                     "label_len": [args.min_labels, args.max_labels],
                     "frames_per_label": [args.min_frames, args.max_frames],
                     "feature_dim": args.feature_dim, "noise": args.noise,
                     "size": args.size, "bigram_scale": args.bigram_scale}, args.seed)
    write_dataset(gen_synthetic(cfg), args.out)
    _log(f"wrote {args.size} utterances to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------- selftest

def _suite_oracle() -> bool:
    from .transducer import brute_force_log_prob, random_grid, rnnt_log_prob

    rng = Rng(2024)
    for trial in range(400):
        T = rng.integers(1, 5)
        U = rng.integers(0, 4)
        V = rng.integers(2, 5)
        grid = random_grid(T, U, V, rng.substream(f"grid{trial}"))
        y = [rng.integers(1, V) for _ in range(U)]
        if abs(rnnt_log_prob(grid, y).item() - brute_force_log_prob(grid, y)) >= 1e-9:
            return False
    return True


def _suite_gradients() -> bool:
    from . import tensor as tt
    from .model import desk_config
    from .attention import AttentionMask
    from .tensor import backward, finite_difference_gradient, max_gradient_error
    from .transducer import batch_loss

    cfg = desk_config(vocab_size=4, feature_dim=6, audio_mask=AttentionMask(2, 1),
                      label_left=2, dropout=0.0, model_dim=8,
                      num_audio_layers=1, num_label_layers=1)
    model = init_model(cfg, Rng(5))
    feats = Rng(6).normal((3, 6))
    y = [1, 2]

    def loss_value():
        grid = model.example_grid(feats, y)
        return batch_loss([(grid, y)]).item()

    loss = batch_loss([(model.example_grid(feats, y), y)])
    backward(loss)
    for name, p in model.named_params():
        num = finite_difference_gradient(loss_value, p)
        if p.grad is None:
            if np.abs(num).max() >= 1e-8:
                return False
            continue
        if max_gradient_error(p.grad, num) >= 1e-4:
            return False
    return True


def _suite_streaming() -> bool:
    from .attention import AttentionMask
    from .model import desk_config

    for (left, right), label_left in [((10, 0), 2), ((10, 2), 2), ((2, 0), 20)]:
        cfg = desk_config(vocab_size=5, feature_dim=6, audio_mask=AttentionMask(left, right),
                          label_left=label_left, dropout=0.0, model_dim=8)
        model = init_model(cfg, Rng(7))
        feats = Rng(8).normal((15, 6))
        batch = dec.greedy_decode(model, feats)
        state = StreamState(model)
        streamed = []
        for t in range(15):
            streamed.extend(state.step(feats[t]))
        streamed.extend(state.flush())
        if streamed != batch:
            return False
    return True


def _suite_schedule() -> bool:
    from .train import ScheduleConfig, lr_at

    s = ScheduleConfig()
    points = [(0, 0.0), (4000, 2.5e-4), (30000, 2.5e-4), (200000, 2.5e-6), (115000, 2.5e-5)]
    return all(abs(lr_at(step, s) - want) <= 1e-12 * max(1.0, abs(want)) for step, want in points)


def cmd_selftest(args) -> int:
    if args.perturb_dp:
        tr.dp_perturbation = 0.01
    suites = [
        ("oracle-equivalence", _suite_oracle),
        ("gradient-check", _suite_gradients),
        ("streaming-equivalence", _suite_streaming),
        ("lr-schedule", _suite_schedule),
    ]
    failures = 0
    try:
        for name, fn in suites:
            start = time.monotonic()
            ok = fn()
            failures += not ok
            print(f"{name:<24} {'PASS' if ok else 'FAIL'}  ({time.monotonic() - start:.1f}s)")
    finally:
        tr.dp_perturbation = 0.0
    return EXIT_OK if failures == 0 else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttkit", description=__doc__)
    parser.add_argument("--threads", type=int, default=1,
                        help="upper bound on internal parallelism (all current kernels are serial)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode", help="transcribe a dataset with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["greedy", "beam", "stream"], default="greedy")
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--lm-weight", type=float, default=0.0)
    p.add_argument("--length-bonus", type=float, default=0.0)
    p.add_argument("--lm-dataset", help="dataset whose labels fit the bundled bigram scorer")
    p.add_argument("--max-symbols-per-frame", type=int, default=10)
    p.add_argument("--output", help="write transcripts here instead of stdout")
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval", help="decode a dataset and report corpus WER")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["greedy", "beam", "stream"], default="greedy")
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--max-symbols-per-frame", type=int, default=10)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("selftest", help="run the built-in verification suites")
    p.add_argument("--perturb-dp", action="store_true",
                   help="deliberately break the loss recursion (sensitivity check)")
    p.set_defaults(fn=cmd_selftest)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", type=int, default=6)
    p.add_argument("--min-labels", type=int, default=3)
    p.add_argument("--max-labels", type=int, default=5)
    p.add_argument("--min-frames", type=int, default=1)
    p.add_argument("--max-frames", type=int, default=3)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--size", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bigram-scale", type=float, default=0.0)
    p.add_argument("--first-index", type=int, default=0,
                   help="start utterance index; same seed + disjoint ranges share "
                        "symbol templates, giving proper held-out splits")
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        _log("error: --threads must be >= 1")
        return EXIT_USAGE
    try:
        return args.fn(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except ConfigError as e:
        _log(f"error: {e}")
        return EXIT_USAGE
    except NumericsError as e:
        _log(f"error: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
