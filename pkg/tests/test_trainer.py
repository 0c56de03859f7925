import json
import math

import numpy as np
import pytest
import torch

from hcmt.backbone import NetworkSpec, flatten_parameters
from hcmt.config import MODES, TrainConfig
from hcmt.errors import DataError, NaNLossError
from hcmt.trainer import (
    BatchComposer,
    Trainer,
    compose_batch,
    learning_rate,
    prepare_data,
    train,
    train_step,
)


def tiny_config(**kw) -> TrainConfig:
    cfg = TrainConfig(total_iterations=12, patch_shape=(8, 8, 8), checkpoint_every=5, seed=3, data_seed=4, noise_seed=5)
    cfg.network = NetworkSpec(base_channels=2, encoder_depths=(1, 1, 1, 1), num_scales=3)
    cfg.scale_weights = (0.5, 0.4, 0.1)
    cfg.data.synthetic = True
    cfg.data.grid_size = 16
    cfg.data.n_labeled, cfg.data.n_unlabeled, cfg.data.n_test = 3, 4, 2
    cfg.data.crop_to_mask = False
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def tiny_data():
    return prepare_data(tiny_config())


# ---------------------------------------------------------------- batches

def test_batch_has_two_labeled_two_unlabeled(tiny_data):
    batch = compose_batch(tiny_data.labeled, tiny_data.unlabeled, tiny_config(), 0)
    assert batch.labeled_images.shape == (2, 1, 8, 8, 8)
    assert batch.labels.shape == (2, 8, 8, 8)
    assert batch.unlabeled_images.shape == (2, 1, 8, 8, 8)
    labeled_ids = {c.id for c in tiny_data.labeled}
    assert set(batch.ids[:2]) <= labeled_ids
    assert not set(batch.ids[2:]) & labeled_ids


def test_supervised_only_batch(tiny_data):
    cfg = tiny_config(labeled_per_batch=4)
    batch = compose_batch(tiny_data.labeled, [], cfg, 0)
    assert batch.n_labeled == 4 and len(batch.unlabeled_images) == 0


def test_batches_deterministic(tiny_data):
    cfg = tiny_config()
    a = BatchComposer(tiny_data.labeled, tiny_data.unlabeled, cfg, 9)
    b = BatchComposer(tiny_data.labeled, tiny_data.unlabeled, cfg, 9)
    for _ in range(6):
        x, y = a.next(), b.next()
        assert x.ids == y.ids
        assert np.array_equal(x.labeled_images, y.labeled_images)
        assert np.array_equal(x.unlabeled_images, y.unlabeled_images)


def test_epochs_visit_every_labeled_case(tiny_data):
    composer = BatchComposer(tiny_data.labeled, tiny_data.unlabeled, tiny_config(labeled_per_batch=3, batch_size=3), 0)
    assert sorted(composer.next().ids) == sorted(c.id for c in tiny_data.labeled)


def test_empty_pools_rejected(tiny_data):
    with pytest.raises(DataError):
        BatchComposer([], tiny_data.unlabeled, tiny_config(), 0)
    with pytest.raises(DataError):
        BatchComposer(tiny_data.labeled, [], tiny_config(), 0)


# ---------------------------------------------------------------- schedule

def test_learning_rate_examples():
    cfg = TrainConfig()
    assert learning_rate(0, cfg) == 0.01
    assert learning_rate(2499, cfg) == 0.01
    assert learning_rate(2500, cfg) == pytest.approx(0.001, rel=1e-12)
    assert learning_rate(5999, cfg) == pytest.approx(0.0001, rel=1e-12)


# ---------------------------------------------------------------- single steps

def test_no_consistency_means_total_equals_sup(tiny_data):
    trainer = Trainer(tiny_config(mode="mt_hu_hs", use_hu=False, use_teacher=False))
    batch = compose_batch(tiny_data.labeled, tiny_data.unlabeled, trainer.config, 0)
    rec = trainer.train_step(batch)
    assert rec.total == rec.loss_sup and rec.loss_unsup == 0.0
    assert trainer.teacher is None


def test_first_step_consistency_contribution_is_tiny(tiny_data):
    trainer = Trainer(tiny_config(mode="mt_hu_hs"))
    batch = compose_batch(tiny_data.labeled, tiny_data.unlabeled, trainer.config, 0)
    rec = trainer.train_step(batch, 0)
    assert rec.lam == pytest.approx(0.1 * math.exp(-5), rel=1e-12)
    assert rec.total - rec.loss_sup <= 6.74e-4 * rec.loss_unsup + 1e-9


def test_single_step_decreases_supervised_loss(tiny_data):
    cfg = tiny_config(mode="vnet", initial_lr=0.01, momentum=0.0, weight_decay=0.0, dtype="float64")
    cfg.perturbation.noise_kind = "none"
    trainer = Trainer(cfg)
    batch = compose_batch(tiny_data.labeled, tiny_data.unlabeled, trainer.config, 0)
    before = trainer.train_step(batch).loss_sup
    sup, _, _, _ = trainer.losses(batch, 1)
    assert sup.item() < before


@pytest.mark.parametrize("after", [True, False])
def test_ema_ordering(tiny_data, after):
    cfg = tiny_config(mode="mt_hu_hs", ema_after_step=after, dtype="float64", eta=0.9)
    trainer = Trainer(cfg)
    batch = compose_batch(tiny_data.labeled, tiny_data.unlabeled, trainer.config, 0)
    # desynchronise teacher and student first
    trainer.train_step(batch)
    teacher_before = flatten_parameters(trainer.teacher.network)
    student_before = flatten_parameters(trainer.student)
    trainer.train_step(batch)
    student_after = flatten_parameters(trainer.student)
    used = student_after if after else student_before
    expected = 0.9 * teacher_before + 0.1 * used
    assert torch.allclose(flatten_parameters(trainer.teacher.network), expected, atol=1e-14)


def test_functional_train_step(tiny_data):
    cfg = tiny_config(mode="mt")
    trainer = Trainer(cfg)
    batch = compose_batch(tiny_data.labeled, tiny_data.unlabeled, trainer.config, 0)
    student, teacher, rec = train_step(trainer.student, trainer.teacher, batch, 0, cfg)
    assert teacher.step == 1
    assert math.isfinite(rec.total)


def test_teacher_never_gets_gradients(tiny_data):
    trainer = Trainer(tiny_config(mode="mt_hu_hs"))
    batch = compose_batch(tiny_data.labeled, tiny_data.unlabeled, trainer.config, 0)
    trainer.train_step(batch)
    assert all(p.grad is None for p in trainer.teacher.network.parameters())


def test_hs_flag_selects_weights():
    assert Trainer(tiny_config(mode="vnet")).sup_weights.alphas == (1.0, 0.0, 0.0)
    t = Trainer(tiny_config(mode="mt_hu_hs"))
    assert t.sup_weights.alphas == t.unsup_weights.alphas == (0.5, 0.4, 0.1)
    t = Trainer(tiny_config(mode="mt_hu"))
    assert t.sup_weights.alphas == (1.0, 0.0, 0.0) and t.unsup_weights.alphas == (0.5, 0.4, 0.1)


# ---------------------------------------------------------------- whole runs

def test_run_report_and_lambda_trace(tiny_data, tmp_path):
    cfg = tiny_config()
    report, _ = train(cfg, tiny_data, tmp_path)
    assert [r.t for r in report.records] == list(range(12))
    for r in report.records:
        assert r.lam == pytest.approx(0.1 * math.exp(-5 * (1 - r.t / 12) ** 2), abs=1e-9)
        assert all(math.isfinite(v) for v in (r.loss_sup, r.loss_unsup, r.total))
    assert not report.seen_ids() & set(tiny_data.split.test)
    assert (tmp_path / "checkpoints" / "iter_000005.pt").exists()
    assert (tmp_path / "checkpoints" / "iter_000010.pt").exists()
    assert report.checkpoint.endswith("final.pt")
    rows = (tmp_path / "train_report.csv").read_text().splitlines()
    assert rows[0] == "t,lr,lambda,loss_sup,loss_unsup,total" and len(rows) == 13
    assert json.loads((tmp_path / "train_summary.json").read_text())["iterations"] == 12


def test_resume_reproduces_uninterrupted_run(tiny_data, tmp_path):
    cfg = tiny_config()
    full, _ = train(cfg, tiny_data, tmp_path / "full")
    train(cfg, tiny_data, tmp_path / "part", stop_after=5)
    resumed, _ = train(cfg, tiny_data, tmp_path / "resumed", resume_from=tmp_path / "part" / "checkpoints" / "iter_000005.pt")
    assert resumed.losses() == full.losses()


@pytest.mark.parametrize("mode", sorted(MODES))
def test_every_mode_runs(tiny_data, mode):
    report, trainer = train(tiny_config(mode=mode, total_iterations=2), tiny_data)
    assert len(report.records) == 2
    assert (trainer.teacher is not None) == MODES[mode][2]


def test_vnet_equals_flags_off(tiny_data):
    a, _ = train(tiny_config(mode="vnet", total_iterations=6), tiny_data)
    b, _ = train(tiny_config(mode="mt_hu_hs", use_hu=False, use_hs=False, use_teacher=False, total_iterations=6), tiny_data)
    assert a.losses() == b.losses()


def test_nan_aborts_with_dump(tiny_data, tmp_path):
    bad = prepare_data(tiny_config())
    for c in bad.labeled:
        c.volume.intensities[:] = np.nan
    with pytest.raises(NaNLossError) as info:
        train(tiny_config(), bad, tmp_path)
    assert info.value.record is None or info.value.record.t == 0
    dump = json.loads((tmp_path / "nan_abort.json").read_text())
    assert "non-finite" in dump["error"] or "NaN" in dump["error"]
