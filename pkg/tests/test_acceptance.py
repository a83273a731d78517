"""Acceptance suite: one test per criterion, each printing a pass line with
its measured quantities. Training-based criteria share cached runs."""

import time

import numpy as np

import ttkit.tensor as tt
from ttkit import transducer as tr
from ttkit.attention import AttentionMask, receptive_field
from ttkit.decode import BigramLm, FusionConfig, StreamState, beam_decode, greedy_decode
from ttkit.model import desk_config, init_model
from ttkit.tasks import (
    SyntheticTaskConfig,
    corpus_wer,
    dataset_bytes,
    gen_synthetic,
    read_dataset,
    symbol_templates,
    write_dataset,
)
from ttkit.tensor import Rng, backward, finite_difference_gradient, max_gradient_error
from ttkit.train import (
    ScheduleConfig,
    TrainConfig,
    checkpoint_bytes,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train_loop,
)

FULL = AttentionMask(None, None)
STREAMABLE = AttentionMask(10, 0)
LOOKAHEAD = AttentionMask(10, 2)

TOY_STEPS = 500
_toy_cache: dict = {}


def toy_task(seed: int, noise: float = 0.2, bigram_scale: float = 0.0, size: int = 2200):
    return SyntheticTaskConfig(vocab=6, label_len=(3, 5), frames_per_label=(1, 3),
                               feature_dim=16, noise_sigma=noise, size=size,
                               seed=seed, bigram_scale=bigram_scale)


def toy_schedule(steps: int = TOY_STEPS) -> ScheduleConfig:
    return ScheduleConfig(peak_lr=3e-3, warmup_steps=max(1, steps // 10),
                          hold_until=steps // 3, decay_until=steps, final_lr=3e-4)


def train_toy(seed: int, mask: AttentionMask, label_left):
    """Train the default desk config (2 audio layers, 1 label layer,
    model_dim 32, vocab 6, 2000 train utterances); cached per setting."""
    key = (seed, mask.left, mask.right, label_left)
    if key in _toy_cache:
        return _toy_cache[key]
    data = gen_synthetic(toy_task(seed))
    train, dev, test = data.split(2000, 100)
    cfg = desk_config(vocab_size=7, feature_dim=16, audio_mask=mask,
                      label_left=label_left, dropout=0.1)
    model = init_model(cfg, Rng(seed))
    start = time.monotonic()
    train_loop(model, train, toy_schedule(), TrainConfig(batch_size=8, total_steps=TOY_STEPS, seed=seed))
    elapsed = time.monotonic() - start
    ser = corpus_wer([(u.labels, greedy_decode(model, u.features)) for u in test.utterances])
    _toy_cache[key] = (model, ser, elapsed, test)
    return _toy_cache[key]


def test_criterion_1_oracle_equivalence():
    start = time.monotonic()
    rng = Rng(20240)
    worst = 0.0
    for trial in range(1000):
        T = rng.integers(1, 5)
        U = rng.integers(0, 4)
        V = rng.integers(2, 5)
        grid = tr.random_grid(T, U, V, rng.substream(f"grid{trial}"))
        y = [rng.integers(1, V) for _ in range(U)]
        gap = abs(tr.rnnt_log_prob(grid, y).item() - tr.brute_force_log_prob(grid, y))
        worst = max(worst, gap)
        assert gap < 1e-9, (trial, T, U, V, y)
    elapsed = time.monotonic() - start
    assert elapsed < 30.0
    print(f"\n[PASS] criterion 1: oracle equivalence over 1000 instances, "
          f"worst gap {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_uniform_grid_closed_form():
    grid = tr.uniform_grid(T=2, U=1, V=2)
    got = tr.rnnt_log_prob(grid, [1]).item()
    want = np.log(0.25)
    assert abs(got - want) < 1e-12
    assert len(list(tr.enumerate_alignments(2, 1))) == 2
    print(f"\n[PASS] criterion 2: uniform grid log P = {got:.12f} = ln(1/4), 2 alignments")


def test_criterion_3_end_to_end_gradient():
    start = time.monotonic()
    cfg = desk_config(vocab_size=4, feature_dim=6, audio_mask=AttentionMask(2, 1),
                      label_left=2, dropout=0.0, model_dim=8,
                      num_audio_layers=1, num_label_layers=1)
    model = init_model(cfg, Rng(31))
    feats = Rng(32).normal((3, 6))
    y = [1, 2]

    def loss_value():
        return tr.batch_loss([(model.example_grid(feats, y), y)]).item()

    backward(tr.batch_loss([(model.example_grid(feats, y), y)]))
    worst = 0.0
    checked = 0
    for name, p in model.named_params():
        num = finite_difference_gradient(loss_value, p)
        if p.grad is None:
            assert np.abs(num).max() < 1e-8, name
            continue
        err = max_gradient_error(p.grad, num)
        worst = max(worst, err)
        checked += p.size
        assert err < 1e-4, name
    elapsed = time.monotonic() - start
    assert elapsed < 120.0
    print(f"\n[PASS] criterion 3: end-to-end gradient on {checked} parameter "
          f"entries, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_4_causality_bitwise():
    import ttkit.attention as att

    cfg = desk_config(vocab_size=5, feature_dim=8, audio_mask=AttentionMask(6, 0),
                      label_left=2, dropout=0.0, model_dim=16)
    model = init_model(cfg, Rng(41))
    rng = Rng(42)
    x = rng.normal((12, 8))
    with tt.no_grad():
        base = att.encode(tt.Tensor(x), cfg.audio, model.params.audio).values
    for trial in range(100):
        t = rng.integers(0, 11)
        perturbed = x.copy()
        perturbed[t + 1:] += rng.normal(perturbed[t + 1:].shape)
        with tt.no_grad():
            out = att.encode(tt.Tensor(perturbed), cfg.audio, model.params.audio).values
        assert out[: t + 1].tobytes() == base[: t + 1].tobytes(), trial
    print("\n[PASS] criterion 4: right=0 causality bitwise over 100 trials")


def test_criterion_5_receptive_field_and_latency():
    import ttkit.attention as att

    cfg = desk_config(vocab_size=5, feature_dim=8, audio_mask=AttentionMask(2, 1),
                      label_left=2, dropout=0.0, model_dim=16, num_audio_layers=3)
    model = init_model(cfg, Rng(51))
    x = Rng(52).normal((14, 8))
    with tt.no_grad():
        base = att.encode(tt.Tensor(x), cfg.audio, model.params.audio).values
    pos = 6  # 1-based position 7

    inside = x.copy()
    inside[9] += 1.0  # 1-based 10 = 7 + 3 layers * right 1
    with tt.no_grad():
        moved = att.encode(tt.Tensor(inside), cfg.audio, model.params.audio).values
    assert not np.allclose(moved[pos], base[pos])

    outside = x.copy()
    outside[10] += 1.0  # 1-based 11, beyond the aggregated look-ahead
    with tt.no_grad():
        unmoved = att.encode(tt.Tensor(outside), cfg.audio, model.params.audio).values
    assert unmoved[pos].tobytes() == base[pos].tobytes()

    assert receptive_field(18, AttentionMask(512, 2), 30.0).future_latency_ms == 1080.0
    assert receptive_field(18, AttentionMask(512, 6), 30.0).future_latency_ms == 3240.0
    print("\n[PASS] criterion 5: position 7 sees input 10 but not 11; "
          "18-layer look-ahead 1080 ms (right=2) and 3240 ms (right=6)")


def test_criterion_6_streaming_equivalence_and_constant_work():
    start = time.monotonic()
    combos = [(a, ll) for a in (STREAMABLE, LOOKAHEAD, AttentionMask(2, 0)) for ll in (2, 20)]
    for audio_mask, label_left in combos:
        cfg = desk_config(vocab_size=5, feature_dim=8, audio_mask=audio_mask,
                          label_left=label_left, dropout=0.0, model_dim=16)
        model = init_model(cfg, Rng(61))
        feats = Rng(62).normal((40, 8))
        batch = greedy_decode(model, feats)

        state = StreamState(model, record_activations=True)
        streamed = []
        per_frame = []
        for t in range(40):
            before = model.counters.joint_evals
            out = state.step(feats[t])
            streamed.extend(out)
            per_frame.append((model.counters.joint_evals - before, len(out)))
        streamed.extend(state.flush())

        assert streamed == batch, (audio_mask, label_left)
        with tt.no_grad():
            enc = model.encode_audio(model.prepare_features(feats)).values
        gap = np.abs(np.stack(state.activations) - enc).max()
        assert gap < 1e-9, (audio_mask, label_left)
        # constant per-frame work: one joint evaluation closes each frame on
        # blank, plus exactly one per emitted label; at the emission cap the
        # frame closes without the blank check. Either way the count is a
        # function of the frame's own emissions, never of t.
        warmup = cfg.audio.num_layers * audio_mask.right
        for t in range(warmup, 40):
            evals, emitted = per_frame[t]
            expected = emitted + 1 if emitted < 10 else 10
            assert evals == expected, (audio_mask, label_left, t, per_frame[t])
    elapsed = time.monotonic() - start
    assert elapsed < 60.0
    print(f"\n[PASS] criterion 6: streaming == batch for 6 mask settings "
          f"(activations <= 1e-9, per-frame joint cost constant), {elapsed:.1f}s")


def test_criterion_7_lr_schedule_published_points():
    s = ScheduleConfig()  # 2.5e-4 / 4K / 30K / 200K / 2.5e-6
    for step, want in [(0, 0.0), (4000, 2.5e-4), (30000, 2.5e-4), (200000, 2.5e-6)]:
        got = lr_at(step, s)
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want)), step
    print("\n[PASS] criterion 7: schedule hits {0, 4000, 30000, 200000} -> "
          "{0, 2.5e-4, 2.5e-4, 2.5e-6} exactly")


def test_criterion_8_toy_convergence_within_budget():
    model_f, ser_full, time_full, _ = train_toy(0, FULL, None)
    model_s, ser_stream, time_stream, _ = train_toy(0, STREAMABLE, 2)
    budget = time_full + time_stream
    assert budget < 900.0
    assert ser_full < 0.05, ser_full
    assert ser_stream < 0.10, ser_stream
    assert ser_full <= ser_stream
    print(f"\n[PASS] criterion 8: full SER {ser_full:.3f} (<5%), streamable SER "
          f"{ser_stream:.3f} (<10%), full <= streamable, trained in {budget:.0f}s (<900s)")


def test_criterion_9_lookahead_bridges_the_gap():
    rows = []
    for seed in (0, 1, 2):
        _, ser_full, _, _ = train_toy(seed, FULL, None)
        _, ser_stream, _, _ = train_toy(seed, STREAMABLE, 2)
        _, ser_look, _, _ = train_toy(seed, LOOKAHEAD, 2)
        assert ser_look <= ser_stream, (seed, ser_look, ser_stream)
        assert ser_look >= ser_full, (seed, ser_look, ser_full)
        rows.append((seed, ser_full, ser_look, ser_stream))
    table = "; ".join(f"seed {s}: full {f:.3f} <= look {l:.3f} <= stream {st:.3f}"
                      for s, f, l, st in rows)
    print(f"\n[PASS] criterion 9: {table}")


def test_criterion_10_shallow_fusion_helps():
    """Transducer trained on flat label statistics, evaluated where labels
    follow a bigram process the bundled LM was fit on: fusion must not hurt,
    and is expected to help, on the held-out split for most seeds."""
    def beam_wer(model, utts, fusion=None):
        return corpus_wer([(u.labels, list(beam_decode(model, u.features, 4, fusion)[0].labels))
                           for u in utts])

    wins = 0
    details = []
    for seed in (0, 1, 2):
        train = gen_synthetic(toy_task(seed, noise=1.8, bigram_scale=0.0, size=1200))
        structured = toy_task(seed, noise=1.8, bigram_scale=5.0, size=300)
        assert symbol_templates(toy_task(seed, noise=1.8)).tobytes() \
            == symbol_templates(structured).tobytes()
        dev, test = gen_synthetic(structured).split(150)
        lm_text = toy_task(seed, noise=0.0, bigram_scale=5.0, size=4000)
        lm = BigramLm.fit([u.labels for u in gen_synthetic(lm_text).utterances], 6, add_k=0.1)

        cfg = desk_config(vocab_size=7, feature_dim=16, audio_mask=STREAMABLE,
                          label_left=2, dropout=0.1)
        model = init_model(cfg, Rng(seed))
        train_loop(model, train, toy_schedule(400),
                   TrainConfig(batch_size=8, total_steps=400, seed=seed))

        base_dev = beam_wer(model, dev.utterances)
        best, best_wer = None, base_dev - 0.01  # adopt fusion only on a clear dev win
        for lw in (0.3, 0.6):
            for lb in (0.0, 0.3):
                w = beam_wer(model, dev.utterances, FusionConfig(lw, lb, lm))
                if w < best_wer:
                    best_wer, best = w, (lw, lb)
        base_test = beam_wer(model, test.utterances)
        fused_test = base_test if best is None else beam_wer(
            model, test.utterances, FusionConfig(best[0], best[1], lm))
        wins += fused_test <= base_test
        details.append(f"seed {seed}: {base_test:.3f} -> {fused_test:.3f} (tuned {best})")
    assert wins >= 2, details
    print(f"\n[PASS] criterion 10: fusion <= baseline on {wins}/3 seeds; " + "; ".join(details))


def test_criterion_11_determinism_and_roundtrips(tmp_path):
    # identical seeds, identical checkpoints (fresh short runs, twice)
    def short_run():
        data = gen_synthetic(toy_task(3, size=300)).split(256)[0]
        cfg = desk_config(vocab_size=7, feature_dim=16, audio_mask=STREAMABLE,
                          label_left=2, dropout=0.1)
        model = init_model(cfg, Rng(3))
        train_loop(model, data, toy_schedule(60), TrainConfig(batch_size=8, total_steps=60, seed=3))
        return model

    bytes_a = checkpoint_bytes(short_run())
    bytes_b = checkpoint_bytes(short_run())
    assert bytes_a == bytes_b

    # save -> load -> save is byte-identical, and the restored model scores
    # the toy evaluation identically
    model, ser, _, test = train_toy(0, STREAMABLE, 2)
    p1, p2 = tmp_path / "m1.ttck", tmp_path / "m2.ttck"
    save_checkpoint(model, p1)
    restored = load_checkpoint(p1)
    save_checkpoint(restored, p2)
    assert p1.read_bytes() == p2.read_bytes()
    ser_restored = corpus_wer([(u.labels, greedy_decode(restored, u.features))
                               for u in test.utterances])
    assert ser_restored == ser

    # dataset write/read is exact
    data = gen_synthetic(toy_task(9, size=40))
    path = tmp_path / "d.ttds"
    write_dataset(data, path)
    again = read_dataset(path)
    assert dataset_bytes(again) == dataset_bytes(data)
    print(f"\n[PASS] criterion 11: seeded training, checkpoint, and dataset "
          f"round-trips all bit-exact (restored SER {ser_restored:.3f})")
