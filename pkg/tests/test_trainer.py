import math
from collections import Counter

import numpy as np
import pytest
import torch

from conftest import tiny_model
from mixtune.checkpoint import CheckpointError, ParameterStore
from mixtune.trainer import (
    ShotPolicy,
    TrainConfig,
    Trainer,
    TrainingError,
    clip_grad_norm,
    lr_at,
    make_mixed_batches,
    sample_shots,
    select_samples,
)


def test_config_parsing(tmp_path):
    cfg = TrainConfig.from_text("lr=0.001\nbatch_size=4  # small\nshot_policy=uniform:1,2,3\n")
    assert cfg.lr == 1e-3 and cfg.batch_size == 4 and cfg.policy.counts == (1, 2, 3)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError, match="unknown config key"):
        TrainConfig.from_text("learning_rate=1")
    assert TrainConfig.from_text("lr=0.5", lr=0.1).lr == 0.1
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_defaults_match_training_recipe():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.warmup_ratio, cfg.weight_decay, cfg.grad_clip, cfg.epochs) == (1e-4, 0.01, 0.01, 5.0, 20)


def test_lr_schedule_points():
    cfg = TrainConfig(lr=1e-4, warmup_ratio=0.01)
    total = 1000
    warm = math.ceil(0.01 * total)
    assert lr_at(0, total, cfg) == 0.0
    assert lr_at(warm, total, cfg) == 1e-4
    mid = warm + (total - warm) // 2
    assert (total - warm) % 2 == 0
    assert lr_at(mid, total, cfg) == pytest.approx(1e-4 * (1 + math.cos(math.pi / 2)) / 2, abs=1e-18)
    assert lr_at(total, total, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_at(total + 1, total, cfg)


def test_lr_schedule_shape():
    cfg = TrainConfig(lr=1.0, warmup_ratio=0.05)
    total = 400
    vals = [lr_at(s, total, cfg) for s in range(total + 1)]
    peak = int(np.argmax(vals))
    assert all(a <= b for a, b in zip(vals[:peak], vals[1 : peak + 1]))
    assert all(a >= b for a, b in zip(vals[peak:], vals[peak + 1 :]))
    assert max(abs(a - b) for a, b in zip(vals, vals[1:])) < 0.06
    assert vals[-1] == 0.0


def test_single_task_probability():
    # T * (1/T)^B for T=3, B=8
    assert 3 * (1 / 3) ** 8 == pytest.approx(4.572e-4, rel=1e-3)


def test_mixed_batches_heterogeneous():
    tasks = ["a", "b", "c"] * 300
    batches = []
    epoch = 0
    while len(batches) < 100:
        batches += make_mixed_batches(tasks, 8, rng_seed=0, epoch=epoch)
        epoch += 1
    mixed = sum(len({tasks[i] for i in b}) >= 2 for b in batches[:100])
    assert mixed >= 90
    single = make_mixed_batches(["a"] * 40, 8, 0)
    assert all(len({"a"}) == 1 for _ in single)
    with pytest.raises(ValueError):
        make_mixed_batches(["a"] * 4, 8, 0)


def test_mixed_batches_brute_force_rate():
    # simulated single-task rate agrees with the analytic T * (1/T)^B for B=3
    tasks = ["a", "b", "c"] * 3000
    single = total = 0
    for epoch in range(5):
        for b in make_mixed_batches(tasks, 3, 1, epoch):
            single += len({tasks[i] for i in b}) == 1
            total += 1
    assert abs(single / total - 3 * (1 / 3) ** 3) < 0.02


def test_sample_shots_policies():
    rng = np.random.default_rng(0)
    pool = list(range(10))
    fixed = ShotPolicy.parse("fixed:2")
    for _ in range(10_000):
        ctx = sample_shots(fixed, pool, 3, rng)
        assert len(ctx) == 2 and 3 not in ctx and len(set(ctx)) == 2
    uni = ShotPolicy.parse("uniform:1,2,3")
    counts = Counter(len(sample_shots(uni, pool, 0, rng)) for _ in range(30_000))
    for n in (1, 2, 3):
        assert abs(counts[n] / 30_000 - 1 / 3) <= 0.02
    with pytest.raises(ValueError):
        sample_shots(fixed, [0], 5, rng)
    with pytest.raises(ValueError):
        ShotPolicy.parse("fixed:1,2")


def test_clip_to_five():
    p = torch.nn.Parameter(torch.zeros(4, dtype=torch.float64))
    p.grad = torch.tensor([30.0, 40.0, 0.0, 0.0], dtype=torch.float64)
    assert clip_grad_norm([p], 5.0) == pytest.approx(50.0)
    assert float(p.grad.norm()) == pytest.approx(5.0, abs=1e-6)


def test_select_samples(small_samples):
    assert len(select_samples(small_samples, TrainConfig(data_fraction=0.5))) == math.ceil(len(small_samples) / 2)
    kept = select_samples(small_samples, TrainConfig(exclude_tasks="grounding,mim"))
    assert {s.task for s in kept} <= {"caption", "vqa", "detection"}
    capped = select_samples(small_samples, TrainConfig(mixture="caption:5,vqa:3"))
    assert Counter(s.task for s in capped) == {"caption": 5, "vqa": 3}


def _trainer(vocab, samples, **kw):
    cfg = dict(lr=1e-3, batch_size=4, shot_policy="fixed:2", max_steps=40, rng_seed=0)
    cfg.update(kw)
    return Trainer(tiny_model(vocab), samples, vocab, TrainConfig(**cfg))


def test_trainable_set_exactness(small_vocab, small_samples):
    tr = _trainer(small_vocab, small_samples)
    before = {n: p.detach().clone() for n, p in tr.model.named_parameters()}
    tr.run(20)
    changed = {n for n, p in tr.model.named_parameters() if not torch.equal(p, before[n])}
    trainable = set(ParameterStore.from_module(tr.model).trainable_names())
    assert changed == trainable
    assert all(n.startswith("mixt.") for n in trainable)


def test_shots_logged(small_vocab, small_samples):
    tr = _trainer(small_vocab, small_samples, shot_policy="fixed:2")
    recs = tr.run(5)
    assert all(r["shots"] == 2 for r in recs)
    assert all(set(r) >= {"step", "lr", "loss", "shots", "tasks_in_batch"} for r in recs)


def test_loss_decreases(small_vocab, small_samples):
    tr = _trainer(small_vocab, small_samples[:64], lr=3e-3, max_steps=200, shot_policy="fixed:1")
    tr.run()
    trace = tr.loss_trace
    assert np.mean(trace[-100:]) < np.mean(trace[:100])


def test_deterministic_traces(small_vocab, small_samples):
    a = _trainer(small_vocab, small_samples)
    b = _trainer(small_vocab, small_samples)
    a.run(10)
    b.run(10)
    assert a.loss_trace == b.loss_trace


def test_resume_reproduces_trace(tmp_path, small_vocab, small_samples):
    full = _trainer(small_vocab, small_samples, shot_policy="uniform:1,2")
    full.run(20)
    part = _trainer(small_vocab, small_samples, shot_policy="uniform:1,2")
    part.run(10)
    part.save_checkpoint(tmp_path / "s.ckpt")
    resumed = _trainer(small_vocab, small_samples, shot_policy="uniform:1,2")
    resumed.load_checkpoint(tmp_path / "s.ckpt")
    resumed.run(10)
    assert resumed.step == 20
    assert np.max(np.abs(np.array(resumed.loss_trace) - np.array(full.loss_trace))) <= 1e-12


def test_checkpoint_rejections(tmp_path, small_vocab, small_samples):
    tr = _trainer(small_vocab, small_samples)
    tr.run(2)
    tr.save_checkpoint(tmp_path / "s.ckpt")
    other = Trainer(tiny_model(small_vocab, d_model=16), small_samples, small_vocab, tr.config)
    with pytest.raises(CheckpointError, match="config hash"):
        other.load_checkpoint(tmp_path / "s.ckpt")
    with pytest.raises(CheckpointError):
        tr.load_checkpoint("")
    data = bytearray((tmp_path / "s.ckpt").read_bytes())
    data[100] ^= 1
    (tmp_path / "bad.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        tr.load_checkpoint(tmp_path / "bad.ckpt")


def test_non_finite_loss_aborts(small_vocab, small_samples):
    tr = _trainer(small_vocab, small_samples)
    with torch.no_grad():
        tr.model.mixt.visual_encoder.patch.weight.fill_(float("nan"))
    with pytest.raises(TrainingError, match="step 0"):
        tr.run(1)


def test_backbone_mode_requires_zero_shot(small_vocab, small_samples):
    model = tiny_model(small_vocab, mixt=False)
    with pytest.raises(ValueError):
        Trainer(model, small_samples, small_vocab, TrainConfig(train_mode="backbone", shot_policy="fixed:1"))
    tr = Trainer(model, small_samples, small_vocab, TrainConfig(train_mode="backbone", shot_policy="fixed:0",
                                                                 batch_size=4, max_steps=3, lr=1e-3))
    before = model.backbone.tok_embed.weight.clone()
    tr.run()
    assert not torch.equal(before, model.backbone.tok_embed.weight)
