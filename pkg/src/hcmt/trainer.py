"""Training loop: batch composition, SGD with stepped decay, EMA teacher, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from hcmt.backbone import build_network, forward_multiscale, load_checkpoint, save_checkpoint
from hcmt.config import TrainConfig
from hcmt.data import Case, DatasetSplit, SyntheticParams, generate_synthetic, load_directory, make_split, pad_to_shape, preprocess, random_crop
from hcmt.errors import DataError, NaNLossError, NumericError
from hcmt.losses import RampSchedule, ScaleWeights, hierarchical_consistency_loss, hierarchical_supervised_loss, rampup_weight
from hcmt.mean_teacher import TeacherState, ema_update, make_generator, teacher_predict

log = logging.getLogger(__name__)

REPORT_FIELDS = ("t", "lr", "lambda", "loss_sup", "loss_unsup", "total")


# ---------------------------------------------------------------- data

@dataclass
class TrainingData:
    labeled: list[Case]
    unlabeled: list[Case]
    test: list[Case]
    split: DatasetSplit | None = None


def prepare_data(config: TrainConfig) -> TrainingData:
    """Generate or load the cases named by ``config.data`` and preprocess them."""
    dc = config.data
    if dc.synthetic:
        params = SyntheticParams(noise_sigma=dc.noise_sigma, bias_strength=dc.bias_strength,
                                 contrast=dc.contrast, distractors=dc.distractors)
        total = dc.n_labeled + dc.n_unlabeled + dc.n_test
        cases = {c.id: c for c in generate_synthetic(total, dc.grid_size, dc.synthetic_seed, params)}
        split = make_split(list(cases), dc.n_labeled, dc.n_unlabeled, dc.n_test, dc.split_seed)
    else:
        if not dc.split_file:
            raise DataError("data.split_file is required for non-synthetic data")
        split = DatasetSplit.load(dc.split_file)
        if not split.labeled:
            raise DataError(f"{dc.split_file}: no labeled cases")
        cases = load_directory(dc.root, split.labeled + split.unlabeled + split.test)

    def prep(case_id: str, keep_mask: bool) -> Case:
        case = cases[case_id]
        if keep_mask and case.mask is None:
            raise DataError(f"case {case_id} needs a label mask")
        vol, mask = preprocess(case.volume, case.mask, dc.margin, crop_to_mask=dc.crop_to_mask and case.mask is not None)
        img = pad_to_shape(vol.intensities, config.patch_shape)
        if mask is not None:
            mask = pad_to_shape(mask, config.patch_shape)
        vol.intensities = img
        return Case(vol, mask if keep_mask else None)

    return TrainingData(
        labeled=[prep(i, True) for i in split.labeled],
        unlabeled=[prep(i, False) for i in split.unlabeled],
        test=[prep(i, True) for i in split.test],
        split=split,
    )


class EpochSampler:
    """Cycles through indices in a fresh random order every epoch."""

    def __init__(self, n: int):
        self.n = n
        self.order: list[int] = []
        self.pos = 0

    def draw(self, k: int, rng: np.random.Generator) -> list[int]:
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.order = rng.permutation(self.n).tolist()
                self.pos = 0
            out.append(self.order[self.pos])
            self.pos += 1
        return out

    def state_dict(self) -> dict:
        return {"n": self.n, "order": list(self.order), "pos": self.pos}

    def load_state_dict(self, state: dict) -> None:
        self.n, self.order, self.pos = state["n"], list(state["order"]), state["pos"]


@dataclass
class Batch:
    labeled_images: np.ndarray  # (L, 1, H, W, D)
    labels: np.ndarray  # (L, H, W, D)
    unlabeled_images: np.ndarray  # (U, 1, H, W, D)
    ids: list[str]

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_images)


class BatchComposer:
    """Draws ``labeled_per_batch`` labeled and ``batch_size - labeled_per_batch`` unlabeled crops."""

    def __init__(self, labeled: Sequence[Case], unlabeled: Sequence[Case], config: TrainConfig, seed: int):
        if not labeled:
            raise DataError("labeled pool is empty")
        self.labeled, self.unlabeled = list(labeled), list(unlabeled)
        self.n_labeled = config.labeled_per_batch
        self.n_unlabeled = config.batch_size - config.labeled_per_batch
        if self.n_unlabeled and not self.unlabeled:
            raise DataError("unlabeled pool is empty but the batch needs unlabeled items")
        self.patch_shape = config.patch_shape
        self.rng = np.random.default_rng(seed)
        self.labeled_sampler = EpochSampler(len(self.labeled))
        self.unlabeled_sampler = EpochSampler(len(self.unlabeled))

    def next(self) -> Batch:
        imgs, labels, ids = [], [], []
        for i in self.labeled_sampler.draw(self.n_labeled, self.rng):
            case = self.labeled[i]
            img, mask, _ = random_crop(case.volume.intensities, case.mask, self.patch_shape, self.rng)
            imgs.append(img)
            labels.append(mask)
            ids.append(case.id)
        u_imgs = []
        for i in self.unlabeled_sampler.draw(self.n_unlabeled, self.rng):
            case = self.unlabeled[i]
            img, _, _ = random_crop(case.volume.intensities, None, self.patch_shape, self.rng)
            u_imgs.append(img)
            ids.append(case.id)
        empty = np.zeros((0,) + self.patch_shape, np.float32)
        return Batch(
            np.stack(imgs)[:, None].astype(np.float32),
            np.stack(labels).astype(np.int64),
            (np.stack(u_imgs) if u_imgs else empty)[:, None].astype(np.float32),
            ids,
        )

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "labeled": self.labeled_sampler.state_dict(),
                "unlabeled": self.unlabeled_sampler.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.labeled_sampler.load_state_dict(state["labeled"])
        self.unlabeled_sampler.load_state_dict(state["unlabeled"])


def compose_batch(labeled_pool, unlabeled_pool, config: TrainConfig, rng: int | BatchComposer) -> Batch:
    """One batch; pass a :class:`BatchComposer` to continue a stream, or an int seed for a fresh one."""
    composer = rng if isinstance(rng, BatchComposer) else BatchComposer(labeled_pool, unlabeled_pool, config, rng)
    return composer.next()


# ---------------------------------------------------------------- schedule

def learning_rate(t: int, config: TrainConfig) -> float:
    return config.initial_lr * config.lr_decay_factor ** (t // config.lr_decay_every)


def consistency_weight(t: int, config: TrainConfig) -> float:
    return rampup_weight(RampSchedule(t_max=config.total_iterations, t=t, lambda_max=config.lambda_max))


# ---------------------------------------------------------------- one step

@dataclass
class LossRecord:
    t: int
    lr: float
    lam: float
    loss_sup: float
    loss_unsup: float
    total: float
    ids: list[str] = field(default_factory=list)

    def row(self) -> dict:
        return {"t": self.t, "lr": self.lr, "lambda": self.lam, "loss_sup": self.loss_sup,
                "loss_unsup": self.loss_unsup, "total": self.total}


class Trainer:
    """Holds the student, optional teacher, optimizer and RNG streams for one run."""

    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config.resolved()
        self.use_hs, self.use_hu, self.use_teacher = self.config.flags()
        self.dtype = getattr(torch, self.config.dtype)
        self.device = torch.device(self.config.device)
        self.student = build_network(self.config.network, self.config.seed).to(self.device, self.dtype)
        self.student.train()
        self.teacher = TeacherState.from_student(self.student, self.config.eta, self.config.ema_warmup) if self.use_teacher else None
        self.optimizer = torch.optim.SGD(self.student.parameters(), lr=self.config.initial_lr,
                                         momentum=self.config.momentum, weight_decay=self.config.weight_decay)
        self.student_noise = make_generator(self.config.noise_seed)
        self.teacher_noise = make_generator(self.config.noise_seed + 1)
        S = self.config.network.num_scales
        alphas = ScaleWeights(self.config.scale_weights)
        self.sup_weights = alphas if self.use_hs else ScaleWeights.final_only(S)
        self.unsup_weights = alphas if self.use_hu else ScaleWeights.final_only(S)
        self.t = 0

    def _tensor(self, x: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(x, device=self.device, dtype=self.dtype)

    def losses(self, batch: Batch, t: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, float]:
        """(sup, unsup, total, lambda) on ``batch``; the graph reaches the student only."""
        cfg = self.config
        labeled = self._tensor(batch.labeled_images)
        labels = torch.as_tensor(batch.labels, device=self.device)
        if self.use_teacher:
            x = torch.cat([labeled, self._tensor(batch.unlabeled_images)])
        else:
            # without a teacher, unlabeled crops feed no term
            x = labeled
        student = forward_multiscale(self.student, x, cfg.perturbation, self.student_noise)
        n = batch.n_labeled
        sup = hierarchical_supervised_loss([p[:n] for p in student], labels, self.sup_weights)
        lam = consistency_weight(t, cfg)
        if self.use_teacher:
            teacher = teacher_predict(self.teacher, x, cfg.perturbation, self.teacher_noise)
            unsup = hierarchical_consistency_loss(student, teacher, self.unsup_weights)
            total = sup + lam * unsup
        else:
            unsup = sup.new_zeros(())
            total = sup
        return sup, unsup, total, lam

    def train_step(self, batch: Batch, t: int | None = None) -> LossRecord:
        t = self.t if t is None else t
        cfg = self.config
        lr = learning_rate(t, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        sup, unsup, total, lam = self.losses(batch, t)
        record = LossRecord(t, lr, lam, sup.item(), unsup.item(), total.item(), list(batch.ids))
        if not all(math.isfinite(v) for v in (record.loss_sup, record.loss_unsup, record.total)):
            raise NaNLossError(f"non-finite loss at iteration {t}: {record.row()}", record)
        if self.use_teacher and not cfg.ema_after_step:
            ema_update(self.teacher, self.student)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        if self.use_teacher and cfg.ema_after_step:
            ema_update(self.teacher, self.student)
        self.t = t + 1
        return record

    # -- persistence
    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "optimizer": self.optimizer.state_dict(),
            "student_noise": self.student_noise.get_state(),
            "teacher_noise": self.teacher_noise.get_state(),
            "teacher_meta": None if self.teacher is None else {"eta": self.teacher.eta, "warmup": self.teacher.warmup, "step": self.teacher.step},
        }

    def save(self, path: str | Path, **extra) -> Path:
        return save_checkpoint(path, self.config.network, self.student,
                               None if self.teacher is None else self.teacher.network,
                               trainer=self.state_dict(), config=self.config.dumps(), **extra)

    def load(self, payload: dict) -> None:
        self.student.load_state_dict(payload["student"])
        if self.teacher is not None:
            self.teacher.network.load_state_dict(payload["teacher"])
            meta = payload["trainer"]["teacher_meta"]
            self.teacher.eta, self.teacher.warmup, self.teacher.step = meta["eta"], meta["warmup"], meta["step"]
        st = payload["trainer"]
        self.optimizer.load_state_dict(st["optimizer"])
        self.student_noise.set_state(st["student_noise"])
        self.teacher_noise.set_state(st["teacher_noise"])
        self.t = st["t"]


def train_step(student, teacher, batch, t, config) -> tuple:
    """Functional form: builds a throwaway :class:`Trainer` around existing networks.

    Useful for single-step checks; :func:`train` keeps one trainer for the whole run.
    """
    trainer = Trainer(config)
    trainer.student = student
    trainer.optimizer = torch.optim.SGD(student.parameters(), lr=config.initial_lr,
                                        momentum=config.momentum, weight_decay=config.weight_decay)
    trainer.teacher = teacher if trainer.use_teacher else None
    record = trainer.train_step(batch, t)
    return student, teacher, record


# ---------------------------------------------------------------- full run

@dataclass
class TrainReport:
    records: list[LossRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str = ""
    config_snapshot: str = ""

    def losses(self) -> list[tuple[float, float, float]]:
        return [(r.loss_sup, r.loss_unsup, r.total) for r in self.records]

    def seen_ids(self) -> set[str]:
        return {i for r in self.records for i in r.ids}

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
        return path

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "iterations": len(self.records),
            "wall_clock_s": self.wall_clock,
            "checkpoint": self.checkpoint,
            "final": None if last is None else last.row(),
        }

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        self.write_csv(directory / "train_report.csv")
        (directory / "train_summary.json").write_text(json.dumps(self.summary(), indent=2))
        (directory / "batch_trace.json").write_text(json.dumps({r.t: r.ids for r in self.records}))


def train(config: TrainConfig, dataset: TrainingData | None = None, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None, callback: Callable[[LossRecord], None] | None = None,
          stop_after: int | None = None) -> tuple[TrainReport, Trainer]:
    """Run ``config.total_iterations`` steps (or stop early after ``stop_after`` for tests).

    Checkpoints go to ``out_dir/checkpoints`` every ``checkpoint_every`` steps and at
    the end. A NaN loss writes ``nan_abort.json`` next to them before re-raising.
    """
    dataset = dataset if dataset is not None else prepare_data(config)
    trainer = Trainer(config)
    composer = BatchComposer(dataset.labeled, dataset.unlabeled, trainer.config, trainer.config.data_seed)
    report = TrainReport(config_snapshot=trainer.config.dumps())
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        trainer.load(payload)
        composer.load_state_dict(payload["composer"])
        report.records = [LossRecord(**r) for r in payload.get("records", [])]

    ckpt_dir = None if out_dir is None else Path(out_dir) / "checkpoints"

    def checkpoint(name: str) -> str:
        if ckpt_dir is None:
            return ""
        path = trainer.save(ckpt_dir / name, composer=composer.state_dict(),
                            records=[asdict(r) for r in report.records])
        return str(path)

    start = time.perf_counter()
    end = config.total_iterations if stop_after is None else min(stop_after, config.total_iterations)
    while trainer.t < end:
        batch = composer.next()
        try:
            record = trainer.train_step(batch)
        except (NaNLossError, NumericError) as exc:
            record = getattr(exc, "record", None)
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                dump = {"error": str(exc), "record": None if record is None else asdict(record)}
                (Path(out_dir) / "nan_abort.json").write_text(json.dumps(dump, indent=2, default=str))
            raise NaNLossError(str(exc), record) from exc
        report.records.append(record)
        if callback is not None:
            callback(record)
        if trainer.t % config.checkpoint_every == 0 and trainer.t < config.total_iterations:
            checkpoint(f"iter_{trainer.t:06d}.pt")
    report.wall_clock = time.perf_counter() - start
    if trainer.t >= config.total_iterations:
        report.checkpoint = checkpoint("final.pt")
    if out_dir is not None:
        report.write(out_dir)
    return report, trainer
