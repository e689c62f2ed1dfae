import json
import math

import numpy as np
import pytest
import torch

import motionslots.train as train_mod
from motionslots.datagen import GenConfig, generate_dataset
from motionslots.metrics import MetricReport
from motionslots.model import load_checkpoint
from motionslots.train import (TABLE1_VARIANTS, BatchCompositionError, ClipDataset, ConfigError,
                               TrainConfig, TrainingDivergedError, ablate, build_batches,
                               evaluate, format_config, load_config, lr_at, motion_mask_report,
                               parse_config_text, train)

TINY_GEN = GenConfig(frame_shape=(16, 16), clip_length=5, num_objects=(1, 2),
                     object_size=(8.0, 8.0), mover_prob=0.7, speed=(1.0, 1.5))


def tiny_config(**kw):
    base = dict(epochs=1, batch_size=4, warmup_iters=2, num_slots=3, slot_dim=8, feature_dim=8,
                encoder_channels=8, decoder_channels=(8, 8, 8), downsample=2,
                min_motion_fraction=0.0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_clips():
    return generate_dataset(10, TINY_GEN, seed=0)[0]


def test_defaults_mirror_published_setup():
    c = TrainConfig()
    assert (c.batch_size, c.base_lr, c.epochs, c.warmup_iters, c.decay_rate, c.decay_step,
            c.clip_length, c.lambda_motion, c.lambda_temporal, c.num_slots) == \
        (20, 1e-3, 500, 2000, 0.5, 500000, 5, 0.5, 0.01, 10)
    assert c.grad_clip is None


def test_lr_schedule_examples():
    assert lr_at(0) == 0.0
    assert lr_at(2000) == 0.001
    assert lr_at(502000) == 0.0005
    assert lr_at(1000) == 0.0005


def test_lr_continuous_and_monotone_after_warmup():
    c = TrainConfig()
    assert math.isclose(lr_at(1999, c), lr_at(2000, c), rel_tol=1e-3)
    steps = np.arange(2000, 3_000_000, 7919)
    vals = [lr_at(int(s)) for s in steps]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_at(-1)


def test_build_batches_half_motion():
    flags = np.array([True, False] * 50)
    for seed in range(5):
        batches = list(build_batches(flags, 20, seed))
        assert sorted(i for b in batches for i in b) == list(range(100))
        for b in batches:
            assert flags[b].sum() >= 10


def test_build_batches_all_motion_and_determinism():
    flags = np.ones(45, bool)
    a = list(build_batches(flags, 20, 3))
    assert [len(b) for b in a] == [20, 20, 5]
    assert a == list(build_batches(flags, 20, 3))
    assert a != list(build_batches(flags, 20, 4))


def test_build_batches_rejects_sparse_motion():
    flags = np.zeros(100, bool)
    flags[:10] = True
    with pytest.raises(BatchCompositionError, match="10%.*< 50%"):
        build_batches(flags, 20, 0)


def test_build_batches_unenforced_is_permutation():
    flags = np.zeros(23, bool)
    batches = list(build_batches(flags, 5, 0, enforce=False))
    assert sorted(i for b in batches for i in b) == list(range(23))


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nepochs = 7\ndecoder_channels = 16, 8, 8\ngrad_clip = none\n"
                 "use_motion = false  # trailing\nbase_lr = 2e-4\n")
    c = load_config(p, {"epochs": 9})
    assert c.epochs == 9 and c.decoder_channels == (16, 8, 8) and c.grad_clip is None
    assert c.use_motion is False and c.base_lr == 2e-4
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("nope = 1")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config_text("epochs = many")


def test_every_field_round_trips_through_config_text():
    c = TrainConfig(grad_clip=1.5, decode_mode="per_slot", seed=4, use_recon=False)
    assert load_config(None, parse_config_text(format_config(c))) == c


def test_train_one_epoch_bookkeeping(tmp_path, tiny_clips):
    rec = train(tiny_config(), tiny_clips, out_dir=tmp_path)
    assert rec.epochs_completed == 1
    assert len(rec.losses) == math.ceil(10 / 4)
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [x["step"] for x in lines] == [0, 1, 2]
    assert {"step", "epoch", "lr", "recon", "motion", "temporal", "total"} <= set(lines[0])
    for x in lines:
        assert math.isclose(x["total"], x["recon"] + 0.5 * x["motion"] + 0.01 * x["temporal"],
                            rel_tol=1e-5)
    assert len(rec.checkpoints) == 1
    model, meta = load_checkpoint(rec.checkpoints[0])
    assert meta["epoch"] == 0 and meta["step"] == 3
    with pytest.raises(TypeError):
        rec.config["epochs"] = 5


def test_resume_replays_schedule_and_losses(tmp_path, tiny_clips):
    cfg = tiny_config(epochs=4, checkpoint_every=2)
    full = train(cfg, tiny_clips, out_dir=tmp_path / "full")
    resumed = train(cfg, tiny_clips, out_dir=tmp_path / "resumed",
                    resume=tmp_path / "full" / "checkpoint_0001.safetensors")
    tail = [r for r in full.losses if r["epoch"] >= 2]
    assert [r["step"] for r in resumed.losses] == [r["step"] for r in tail]
    assert [r["lr"] for r in resumed.losses] == [r["lr"] for r in tail]
    for a, b in zip(resumed.losses, tail):
        assert math.isclose(a["total"], b["total"], rel_tol=1e-5)


def test_deterministic_runs_repeat(tiny_clips):
    a = train(tiny_config(epochs=2), tiny_clips)
    b = train(tiny_config(epochs=2), tiny_clips)
    assert [r["total"] for r in a.losses] == [r["total"] for r in b.losses]


def test_nan_loss_aborts_with_step_and_last_breakdown(monkeypatch, tiny_clips):
    real = train_mod.compute_losses
    calls = {"n": 0}

    def poisoned(*args, **kw):
        parts, out = real(*args, **kw)
        calls["n"] += 1
        if calls["n"] == 3:
            parts.total = parts.total * float("nan")
        return parts, out

    monkeypatch.setattr(train_mod, "compute_losses", poisoned)
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_config(epochs=2), tiny_clips)
    assert info.value.step == 2
    assert set(info.value.last_finite) >= {"recon", "motion", "temporal", "total"}


def test_motion_off_never_reads_motion_masks(tiny_clips):
    cfg = tiny_config(lambda_motion=0.0, decode_mode="one_shot")
    ds = ClipDataset(tiny_clips, 5, (8, 8), 3, cfg.degrade_config())
    train(cfg, ds)
    assert ds.motion_reads == 0
    ds2 = ClipDataset(tiny_clips, 5, (8, 8), 3, cfg.degrade_config())
    train(tiny_config(), ds2)
    assert ds2.motion_reads > 0


def test_motion_batches_respect_composition(tiny_clips):
    ds = ClipDataset(tiny_clips, 5, (8, 8), 3)
    assert ds.has_motion.any()
    frac = ds.has_motion.mean()
    seen = 0
    for epoch in range(100):
        try:
            batches = list(build_batches(ds.has_motion, 4, [0, epoch]))
        except BatchCompositionError:
            assert frac < 0.5
            return
        for b in batches:
            assert ds.has_motion[b].sum() >= math.ceil(len(b) / 2)
            seen += 1
    assert seen >= 100


def test_evaluate_windows_and_determinism(tiny_clips):
    rec = train(tiny_config(), tiny_clips)
    a = evaluate(rec.model, tiny_clips[:3], stride=5, window=5)
    b = evaluate(rec.model, tiny_clips[:3], stride=5, window=5)
    assert a == b
    assert a.num_frames == 15
    assert not math.isnan(a.fg_ari)
    c = evaluate(rec.model, tiny_clips[:3], stride=2, window=5)
    assert c.num_frames == 15
    with pytest.raises(ValueError):
        evaluate(rec.model, tiny_clips[:1], stride=0)


def test_evaluate_single_frame_clips(tiny_clips):
    rec = train(tiny_config(), tiny_clips)
    one = generate_dataset(3, GenConfig(frame_shape=(16, 16), clip_length=1, num_objects=(1, 2),
                                        object_size=(8.0, 8.0)), seed=1)[0]
    rep = evaluate(rec.model, one)
    assert rep.num_frames == 3 and math.isnan(rep.fg_ari_moving)


def test_evaluate_checkpoint_mismatch(tmp_path, tiny_clips):
    rec = train(tiny_config(), tiny_clips, out_dir=tmp_path)
    big = generate_dataset(1, GenConfig(frame_shape=(32, 32), clip_length=5), seed=0)[0]
    with pytest.raises(ConfigError, match="does not match"):
        evaluate(rec.checkpoints[0], big)


def test_ablate_two_variants(tmp_path, tiny_clips):
    grid = {"a": {"decode_mode": "one_shot"}, "b": {"decode_mode": "per_slot"}}
    res = ablate(tiny_config(), grid, tiny_clips, tiny_clips[:2], seeds=(0,), out_dir=tmp_path)
    assert [r.name for r in res.rows] == ["a", "b"]
    assert len(res.table().splitlines()) == 3
    assert json.loads((tmp_path / "ablation.json").read_text())["rows"][0]["name"] == "a"


def test_ablate_reuses_matching_runs_only(tmp_path, tiny_clips, monkeypatch):
    grid = {"a": {"decode_mode": "one_shot"}}
    first = ablate(tiny_config(), grid, tiny_clips, tiny_clips[:2], seeds=(0,), out_dir=tmp_path)
    calls = []
    monkeypatch.setattr(train_mod, "train", lambda *a, **k: calls.append(1) or train(*a, **k))
    again = ablate(tiny_config(), grid, tiny_clips, tiny_clips[:2], seeds=(0,), out_dir=tmp_path)
    assert not calls
    assert again.rows[0].fg_ari == pytest.approx(first.rows[0].fg_ari)
    ablate(tiny_config(base_lr=5e-4), grid, tiny_clips, tiny_clips[:2], seeds=(0,), out_dir=tmp_path)
    assert calls == [1]


def test_table1_grid_is_six_rung_ladder():
    names = list(TABLE1_VARIANTS)
    assert len(names) == 6
    v = TABLE1_VARIANTS
    assert v[names[0]]["inference_mode"] == "iterative"
    assert v[names[3]]["decode_mode"] == "one_shot" and not v[names[3]]["use_motion"]
    assert v[names[4]]["use_motion"] and v[names[4]]["use_recon"]
    assert v[names[5]]["use_motion"] and not v[names[5]]["use_recon"]


def test_motion_mask_report(tiny_clips):
    from motionslots.motionseg import DegradeConfig

    rep = motion_mask_report(tiny_clips[:3], DegradeConfig(), (8, 8))
    assert isinstance(rep, MetricReport) and rep.num_frames == 15
