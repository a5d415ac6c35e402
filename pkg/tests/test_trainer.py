import csv

import numpy as np
import pytest
import torch

from myoda.core import ValidationError
from myoda.losses import LossWeights
from myoda.nets import NetConfig
from myoda.train_scratch import (
    NonFiniteLossError,
    TrainConfig,
    build_scratch_models,
    lr_schedule,
    plan_epoch,
    train_scratch,
    train_step,
)

TINY_NETS = NetConfig(base_channels=2, depth=2, patch_disc_layers=2, res_blocks=1, seed=5)

PAPER_CFG = TrainConfig(epochs=100, lr0=2e-4, lr_const_epochs=50)


def tiny_train_cfg(**overrides):
    base = dict(
        epochs=2,
        lr0=2e-4,
        lr_const_epochs=2,
        batch_size=2,
        image_size=64,
        weights=LossWeights(),
        seed=11,
        checkpoint_every=1,
        image_pool_size=4,
    )
    base.update(overrides)
    return TrainConfig(**base)


def make_batches(size=16, n=2, seed=0):
    torch.manual_seed(seed)
    x_mr = torch.rand(n, 1, size, size) * 2 - 1
    x_ct = torch.rand(n, 1, size, size) * 2 - 1
    y_mr = torch.randint(0, 5, (n, size, size))
    return (x_mr, y_mr), x_ct


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_lr_schedule_paper_values():
    assert lr_schedule(10, PAPER_CFG) == pytest.approx(2e-4)
    assert lr_schedule(75, PAPER_CFG) == pytest.approx(1e-4)
    assert lr_schedule(100, PAPER_CFG) == pytest.approx(0.0)


def test_lr_schedule_boundaries():
    assert lr_schedule(49, PAPER_CFG) == pytest.approx(2e-4)
    assert lr_schedule(50, PAPER_CFG) == pytest.approx(2e-4)  # decay starts after epoch 50
    assert lr_schedule(99, PAPER_CFG) == pytest.approx(2e-4 * 1 / 50)


def test_lr_schedule_out_of_range():
    with pytest.raises(ValidationError):
        lr_schedule(-1, PAPER_CFG)
    with pytest.raises(ValidationError):
        lr_schedule(101, PAPER_CFG)


def test_lr_schedule_constant_when_no_decay_phase():
    cfg = TrainConfig(epochs=10, lr_const_epochs=10)
    assert lr_schedule(10, cfg) == pytest.approx(cfg.lr0)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=10, lr_const_epochs=20)


# ---------------------------------------------------------------------------
# train_step


def test_train_step_bitwise_reproducible():
    cfg = tiny_train_cfg()
    batch_mr, batch_ct = make_batches()
    reports = []
    for _ in range(2):
        models = build_scratch_models(TINY_NETS, cfg)
        reports.append(train_step(models, batch_mr, batch_ct, cfg).as_dict())
    assert reports[0] == reports[1]


def test_train_step_pure_gan_reduction():
    weights = LossWeights(lambda1=1.0, lambda2=0.0, lambda3=0.0, lambda4=0.0, lambda5=0.0)
    cfg = tiny_train_cfg(weights=weights)
    models = build_scratch_models(TINY_NETS, cfg)
    report = train_step(models, *make_batches(), cfg)
    assert report.cyc_ct == 0.0 and report.cyc_mr == 0.0
    assert report.identity == 0.0 and report.edge == 0.0 and report.seg_ce == 0.0
    assert report.g_adv_ct > 0.0 and report.d_ct > 0.0


def test_train_step_reports_every_component():
    cfg = tiny_train_cfg()
    models = build_scratch_models(TINY_NETS, cfg)
    report = train_step(models, *make_batches(), cfg)
    for name, value in report.as_dict().items():
        assert np.isfinite(value), name
    assert report.total_g > 0.0


def test_train_step_nonfinite_aborts_with_diagnostic(tmp_path):
    cfg = tiny_train_cfg()
    models = build_scratch_models(TINY_NETS, cfg, out_dir=tmp_path)
    with torch.no_grad():
        next(models.g_mr2ct.parameters())[:] = float("nan")
    with pytest.raises(NonFiniteLossError):
        train_step(models, *make_batches(), cfg)
    assert any(p.name.startswith("diagnostic_step") for p in tmp_path.iterdir())


def test_coupled_mode_updates_segmenter_in_g_step():
    cfg = tiny_train_cfg(coupled=True)
    models = build_scratch_models(TINY_NETS, cfg)
    before = [p.detach().clone() for p in models.seg.parameters()]
    train_step(models, *make_batches(), cfg)
    after = list(models.seg.parameters())
    assert any(not torch.equal(a, b) for a, b in zip(before, after))


# ---------------------------------------------------------------------------
# unpaired sampling


def test_plan_epoch_emits_permutations():
    mr, ct = plan_epoch(n_mr=12, n_ct=12, batch_size=3, seed=7, epoch=0)
    assert mr.shape == (4, 3) and ct.shape == (4, 3)
    assert sorted(mr.ravel().tolist()) == list(range(12))
    assert sorted(ct.ravel().tolist()) == list(range(12))


def test_plan_epoch_differs_across_epochs():
    a, _ = plan_epoch(12, 12, 3, seed=7, epoch=0)
    b, _ = plan_epoch(12, 12, 3, seed=7, epoch=1)
    assert not np.array_equal(a, b)


def test_plan_epoch_streams_are_independent():
    """MR and CT index sequences decorrelate across many epochs."""
    mr_all, ct_all = [], []
    for epoch in range(12):
        mr, ct = plan_epoch(40, 40, 1, seed=3, epoch=epoch)
        mr_all.extend(mr.ravel().tolist())
        ct_all.extend(ct.ravel().tolist())
    r = np.corrcoef(mr_all, ct_all)[0, 1]
    assert abs(r) < 0.15  # 480 paired draws; independent shuffles stay near 0


def test_plan_epoch_unequal_sizes():
    mr, ct = plan_epoch(n_mr=5, n_ct=9, batch_size=2, seed=1, epoch=0)
    assert mr.shape == ct.shape == (5, 2)
    assert set(ct.ravel().tolist()) <= set(range(9))
    assert set(mr.ravel().tolist()) == set(range(5))  # shorter domain wraps


# ---------------------------------------------------------------------------
# full loop


def test_smoke_training_reduces_seg_ce(processed_phantoms, tmp_path):
    cfg = tiny_train_cfg(epochs=5, lr_const_epochs=5, seed=3, seg_lr_scale=5.0)
    smoke_nets = NetConfig(base_channels=8, depth=3, patch_disc_layers=2, res_blocks=1, seed=5)
    train_scratch(
        cfg,
        processed_phantoms["mr"],
        processed_phantoms["ct"],
        tmp_path / "run",
        net_cfg=smoke_nets,
    )
    with open(tmp_path / "run" / "train_log.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 5
    assert float(rows[-1]["seg_ce"]) < float(rows[0]["seg_ce"])


def test_validation_dice_logged(processed_phantoms, tmp_path):
    cfg = tiny_train_cfg(epochs=1, lr_const_epochs=1)
    train_scratch(
        cfg,
        processed_phantoms["mr"],
        processed_phantoms["ct"],
        tmp_path / "run",
        net_cfg=TINY_NETS,
        val_manifest=processed_phantoms["ct"],
    )
    with open(tmp_path / "run" / "train_log.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["val_dice_mean"] != ""
    assert 0.0 <= float(rows[0]["val_dice_mean"]) <= 1.0


def test_resume_continues_bit_identically(processed_phantoms, tmp_path):
    full_cfg = tiny_train_cfg(epochs=4, lr_const_epochs=4, checkpoint_every=2, seed=13)
    short_cfg = tiny_train_cfg(epochs=2, lr_const_epochs=2, checkpoint_every=2, seed=13)

    train_scratch(full_cfg, processed_phantoms["mr"], processed_phantoms["ct"], tmp_path / "a", net_cfg=TINY_NETS)
    train_scratch(short_cfg, processed_phantoms["mr"], processed_phantoms["ct"], tmp_path / "b", net_cfg=TINY_NETS)
    train_scratch(
        full_cfg,
        processed_phantoms["mr"],
        processed_phantoms["ct"],
        tmp_path / "b",
        net_cfg=TINY_NETS,
        resume=True,
    )
    log_a = (tmp_path / "a" / "train_log.csv").read_bytes()
    log_b = (tmp_path / "b" / "train_log.csv").read_bytes()
    assert log_a == log_b
    ck_a = (tmp_path / "a" / "seg.ckpt").read_bytes()
    ck_b = (tmp_path / "b" / "seg.ckpt").read_bytes()
    assert ck_a == ck_b


def test_empty_manifest_rejected(processed_phantoms, tmp_path):
    from myoda.core import DatasetManifest

    empty = DatasetManifest(items=(), cohort="train")
    with pytest.raises(ValidationError):
        train_scratch(tiny_train_cfg(), empty, processed_phantoms["ct"], tmp_path / "x", net_cfg=TINY_NETS)
