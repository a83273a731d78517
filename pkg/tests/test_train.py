import json

import numpy as np
import pytest

from ttkit.attention import AttentionMask
from ttkit.model import desk_config, init_model, model_config_from_dict, model_config_to_dict
from ttkit.tasks import SyntheticTaskConfig, gen_synthetic
from ttkit.tensor import NumericsError, Rng, Tensor
from ttkit.train import (
    Adam,
    CheckpointFormatError,
    ScheduleConfig,
    TrainConfig,
    apply_weight_noise,
    checkpoint_bytes,
    clip_gradients,
    global_norm,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train_loop,
    train_step,
)

PAPER_SCHEDULE = ScheduleConfig()  # 2.5e-4 peak, 4K warmup, 30K hold, 200K decay


def tiny_setup(audio_mask=AttentionMask(None, None), seed=0, noise=0.1, size=24):
    task = SyntheticTaskConfig(vocab=4, label_len=(2, 3), frames_per_label=(1, 2),
                               feature_dim=8, noise_sigma=noise, size=size, seed=seed)
    data = gen_synthetic(task)
    cfg = desk_config(vocab_size=5, feature_dim=8, audio_mask=audio_mask,
                      label_left=4, dropout=0.0, model_dim=8)
    model = init_model(cfg, Rng(seed))
    return model, data


# -------------------------------------------------------------- schedule

def test_lr_published_points():
    for step, expected in [(0, 0.0), (4000, 2.5e-4), (30000, 2.5e-4), (200000, 2.5e-6)]:
        got = lr_at(step, PAPER_SCHEDULE)
        assert got == pytest.approx(expected, rel=1e-12), step


def test_lr_geometric_midpoint():
    # halfway through decay: 2.5e-4 * (0.01)^0.5
    assert lr_at(115000, PAPER_SCHEDULE) == pytest.approx(2.5e-5, rel=1e-12)


def test_lr_warmup_is_linear():
    assert lr_at(2000, PAPER_SCHEDULE) == pytest.approx(1.25e-4, rel=1e-12)


def test_lr_after_decay_is_final():
    assert lr_at(300000, PAPER_SCHEDULE) == 2.5e-6


def test_lr_continuous_at_boundaries():
    s = PAPER_SCHEDULE
    for boundary in (s.warmup_steps, s.hold_until, s.decay_until):
        gap = abs(lr_at(boundary + 1, s) - lr_at(boundary, s))
        assert gap < s.peak_lr * 1e-3, boundary


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(warmup_steps=0)
    with pytest.raises(ValueError):
        ScheduleConfig(hold_until=300000)  # hold past decay
    with pytest.raises(ValueError):
        ScheduleConfig(final_lr=1.0)  # above peak


# ---------------------------------------------------------- weight noise

def test_weight_noise_inactive_before_start():
    model, _ = tiny_setup()
    out = apply_weight_noise(model.params, sigma=0.01, step=5, start_step=10, rng=Rng(0))
    assert out is model.params


def test_weight_noise_zero_sigma_identity():
    model, _ = tiny_setup()
    out = apply_weight_noise(model.params, sigma=0.0, step=50, start_step=10, rng=Rng(0))
    assert out is model.params


def test_weight_noise_perturbs_forward_only():
    model, _ = tiny_setup()
    stored = model.params.joint.out_w.values.copy()
    noisy = apply_weight_noise(model.params, sigma=0.01, step=50, start_step=10, rng=Rng(0))
    assert not np.array_equal(noisy.joint.out_w.values, stored)
    np.testing.assert_array_equal(model.params.joint.out_w.values, stored)
    # gradient path reaches the stored leaf through the noisy view
    assert model.params.joint.out_w in noisy.joint.out_w.parents


def test_weight_noise_mean_is_centered():
    sigma = 0.01
    draws = Rng(1).substream("weight_noise/50").normal((100_000,), sigma=sigma)
    assert abs(draws.mean()) < 3 * sigma / np.sqrt(100_000)


# ------------------------------------------------------------- optimizer

class _Shim:
    """Minimal named-parameter holder for optimizer-only tests."""

    def __init__(self, values):
        self.w = Tensor(values)

    def named_params(self):
        return [("w", self.w)]


def test_adam_converges_on_quadratic():
    shim = _Shim(np.array([5.0]))
    opt = Adam(shim, TrainConfig())
    for _ in range(2000):
        grad = 2.0 * (shim.w.values - 3.0)
        opt.step(shim, {"w": grad}, lr=0.05)
        if abs(shim.w.values[0] - 3.0) < 1e-6:
            break
    assert abs(shim.w.values[0] - 3.0) < 1e-6


def test_zero_lr_leaves_params_bitwise_unchanged():
    model, data = tiny_setup()
    before = {name: p.values.tobytes() for name, p in model.named_params()}
    sched = ScheduleConfig(peak_lr=1e-3, warmup_steps=1, hold_until=2, decay_until=3, final_lr=1e-4)
    opt = Adam(model, TrainConfig(batch_size=4))
    loss = train_step(model, opt, data.utterances[:4], 0, sched, TrainConfig(batch_size=4), Rng(0))
    assert np.isfinite(loss)
    after = {name: p.values.tobytes() for name, p in model.named_params()}
    assert before == after  # lr_at(0) == 0


def test_clip_preserves_direction_and_caps_norm():
    rng = Rng(2)
    grads = {"a": rng.normal((4, 4)), "b": rng.normal((7,))}
    originals = {k: v.copy() for k, v in grads.items()}
    norm = clip_gradients(grads, max_norm=0.5)
    assert norm > 0.5
    assert global_norm(list(grads.values())) == pytest.approx(0.5, rel=1e-9)
    for k in grads:
        ratio = grads[k] / originals[k]
        np.testing.assert_allclose(ratio, ratio.flat[0], rtol=1e-9)


def test_clip_noop_below_threshold():
    grads = {"a": np.array([0.3, 0.4])}
    norm = clip_gradients(grads, max_norm=5.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_array_equal(grads["a"], [0.3, 0.4])


# ------------------------------------------------------------- training

def test_training_deterministic_under_seed():
    def run():
        model, data = tiny_setup(seed=7)
        sched = ScheduleConfig(peak_lr=2e-3, warmup_steps=5, hold_until=10,
                               decay_until=40, final_lr=2e-4)
        cfg = TrainConfig(batch_size=4, total_steps=12, seed=3, weight_noise_sigma=0.01,
                          weight_noise_start_step=5)
        losses = train_loop(model, data, sched, cfg)
        return losses, checkpoint_bytes(model)

    losses_a, bytes_a = run()
    losses_b, bytes_b = run()
    assert losses_a == losses_b
    assert bytes_a == bytes_b


def test_training_reduces_loss_on_fixed_batch():
    wins = 0
    for seed in range(10):
        model, data = tiny_setup(seed=seed, size=4)
        sched = ScheduleConfig(peak_lr=3e-3, warmup_steps=5, hold_until=50,
                               decay_until=100, final_lr=3e-4)
        cfg = TrainConfig(batch_size=4, total_steps=50, seed=seed)
        losses = train_loop(model, data, sched, cfg)
        wins += losses[-1] < losses[0]
    assert wins >= 9


def test_non_finite_loss_aborts_with_diagnostics():
    model, data = tiny_setup()
    model.params.joint.out_w.values[...] = 1e6  # saturate to overflow downstream
    model.params.joint.out_b.values[...] = np.inf
    opt = Adam(model, TrainConfig(batch_size=2))
    with pytest.raises(NumericsError, match="step 0"):
        train_step(model, opt, data.utterances[:2], 0, PAPER_SCHEDULE,
                   TrainConfig(batch_size=2), Rng(0))


def test_train_loop_writes_metrics_and_checkpoints(tmp_path):
    model, data = tiny_setup()
    sched = ScheduleConfig(peak_lr=1e-3, warmup_steps=2, hold_until=4, decay_until=8, final_lr=1e-4)
    cfg = TrainConfig(batch_size=4, total_steps=6, seed=0, checkpoint_interval=3)
    train_loop(model, data, sched, cfg, out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 6
    record = json.loads(lines[2])
    assert record["step"] == 2 and "loss" in record and "lr" in record and "wall_clock" in record
    assert (tmp_path / "ckpt_000003.ttck").exists()
    assert (tmp_path / "ckpt_000006.ttck").exists()
    assert (tmp_path / "ckpt_final.ttck").exists()


# ----------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_byte_identical(tmp_path):
    model, _ = tiny_setup(seed=11)
    p1 = tmp_path / "a.ttck"
    p2 = tmp_path / "b.ttck"
    save_checkpoint(model, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for (na, pa), (nb, pb) in zip(model.named_params(), loaded.named_params()):
        assert na == nb
        assert pa.values.tobytes() == pb.values.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    model, _ = tiny_setup()
    path = tmp_path / "m.ttck"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    model, _ = tiny_setup()
    path = tmp_path / "m.ttck"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    model, _ = tiny_setup()
    path = tmp_path / "m.ttck"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_mismatched_model_dim_is_shape_error(tmp_path):
    import struct

    model, _ = tiny_setup()
    raw = checkpoint_bytes(model)
    config_len = struct.unpack("<Q", raw[8:16])[0]
    doc = json.loads(raw[16:16 + config_len].decode())
    doc["audio"]["model_dim"] = 16  # config now disagrees with stored tensors
    doc["audio"]["head_dim"] = 8
    doc["audio"]["ff_dim2"] = 16
    doc["joint_dim"] = 16
    new_doc = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    edited = raw[:8] + struct.pack("<Q", len(new_doc)) + new_doc + raw[16 + config_len:]
    path = tmp_path / "m.ttck"
    path.write_bytes(edited)
    with pytest.raises(CheckpointFormatError, match="shape disagreement"):
        load_checkpoint(path)


def test_model_config_dict_roundtrip():
    cfg = desk_config(audio_mask=AttentionMask(10, 2), label_left=2)
    back = model_config_from_dict(model_config_to_dict(cfg))
    assert model_config_to_dict(back) == model_config_to_dict(cfg)
    assert back.audio.mask == cfg.audio.mask
