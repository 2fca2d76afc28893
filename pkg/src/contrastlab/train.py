"""The three-view training loop: augment, encode with one shared encoder, contrast, step."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AuxPolicy, BasicPolicy, basic_augment, image_rng, make_triplet
from .config import ExperimentConfig
from .data import (ChannelStats, LabeledDataset, SyntheticSpec, UnlabeledImages, batch_sampler,
                   generate_synthetic, load_cifar10, load_record_dir, standardize)
from .evaluation import knn_evaluate
from .loss import loss_on_tape
from .model import EncoderState, encode, init_encoder, save_checkpoint
from .optim import SGD, scheduled_lr

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "step", "lr", "loss", "l_xy", "l_zx", "l_zy",
                  "mean_pos_sim", "mean_neg_sim", "grad_pos", "grad_neg_sum")
EVAL_COLUMNS = ("epoch", "step", "knn_top1")


class TrainingError(RuntimeError):
    pass


def load_datasets(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = config.dataset
    if d.kind == "synthetic":
        train = generate_synthetic(SyntheticSpec(d.num_classes, d.per_class, d.image_size, d.seed), "train")
        test = generate_synthetic(SyntheticSpec(d.num_classes, d.test_per_class, d.image_size, d.seed), "test")
    elif d.kind == "cifar10":
        train, test = load_cifar10(d.path, "train"), load_cifar10(d.path, "test")
    else:
        train, test = load_record_dir(d.path, "train"), load_record_dir(d.path, "test")
    if d.subset:
        train = train.subset(d.subset)
    if d.test_subset:
        test = test.subset(d.test_subset)
    return train, test


@dataclass
class ViewCounter:
    basic: int = 0
    aux: int = 0


def batch_views(images: UnlabeledImages, indices: np.ndarray, scheme: str, basic: BasicPolicy,
                aux: AuxPolicy | None, seed: int, epoch: int, counter: ViewCounter) -> list[np.ndarray]:
    """Stacked uint8 views per slot: [core1, core2] or [core1, core2, third]."""
    slots: list[list[np.ndarray]] = [[], [], []]
    for idx in indices:
        rng = image_rng(seed, epoch, int(idx))
        img = images[int(idx)]
        if scheme == "two_basic":
            r1, r2, _ = rng.spawn(3)
            views = (basic_augment(img, basic, r1), basic_augment(img, basic, r2))
            counter.basic += 2
        else:
            views = make_triplet(img, basic, aux if scheme == "three_view" else None, rng)
            counter.basic += 2 if scheme == "three_view" else 3
            counter.aux += 1 if scheme == "three_view" else 0
        for slot, v in zip(slots, views):
            slot.append(v)
    return [np.stack(s) for s in slots if s]


def train_step(state: EncoderState, optimizer: SGD, views: list[np.ndarray], stats: ChannelStats,
               lr: float, temperature: float, kind: str):
    """Encode every view with the same parameters, apply the loss, take one SGD step."""
    n = len(views[0])
    dtype = next(iter(state.params.values())).dtype
    batch = T.Tensor(standardize(np.concatenate(views), stats, dtype))
    _, emb = encode(state, batch)
    x, y = emb[0:n], emb[n:2 * n]
    z = emb[2 * n:3 * n] if len(views) == 3 else None
    loss, report = loss_on_tape(x, y, z, temperature, kind)
    if not math.isfinite(report.total):
        return report
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr)
    return report


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


@dataclass
class TrainResult:
    output_dir: Path
    state: EncoderState
    stats: ChannelStats
    metrics_path: Path
    eval_history: list[dict] = field(default_factory=list)
    views: ViewCounter = field(default_factory=ViewCounter)

    @property
    def final_knn(self) -> float | None:
        return self.eval_history[-1]["knn_top1"] if self.eval_history else None

    @property
    def initial_knn(self) -> float | None:
        first = self.eval_history[0] if self.eval_history else None
        return first["knn_top1"] if first and first["epoch"] == 0 else None


def train(config: ExperimentConfig, datasets: tuple[LabeledDataset, LabeledDataset] | None = None) -> TrainResult:
    """Run the full experiment and write checkpoints, metrics.csv, eval.csv and summary.json."""
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))

    train_set, test_set = datasets if datasets is not None else load_datasets(config)
    stats = ChannelStats.from_images(train_set.images)
    images = train_set.unlabeled()  # training never touches labels
    basic, aux = config.basic, config.aux_policy()
    schedule, sgd_cfg = config.schedule_config(), config.sgd
    state = init_encoder(config.encoder, config.seed)
    optimizer = SGD(state.parameters(), sgd_cfg)
    result = TrainResult(out, state, stats, out / "metrics.csv")

    def evaluate(epoch: int, step: int) -> None:
        res = knn_evaluate(state, train_set, test_set, stats, config.eval.k, config.eval.temperature)
        row = {"epoch": epoch, "step": step, "knn_top1": res.top1_accuracy}
        result.eval_history.append(row)
        eval_writer.writerow([_fmt(row[c]) for c in EVAL_COLUMNS])
        eval_fh.flush()
        log.info("epoch %d knn top-1 %.4f", epoch, res.top1_accuracy)
        if epoch > 0:
            save_checkpoint(out / f"epoch{epoch:04d}.ckpt", state, {"epoch": epoch, "config": config.to_dict()},
                            {"channel_stats": stats.as_array()})

    t0 = time.perf_counter()
    step = 0
    with open(out / "metrics.csv", "w", newline="") as metrics_fh, \
            open(out / "eval.csv", "w", newline="") as eval_fh, \
            open(out / "timing.csv", "w", newline="") as timing_fh:
        metrics = csv.writer(metrics_fh)
        eval_writer = csv.writer(eval_fh)
        timing = csv.writer(timing_fh)
        metrics.writerow(METRIC_COLUMNS)
        eval_writer.writerow(EVAL_COLUMNS)
        timing.writerow(("step", "wall_time"))
        if config.eval.at_start:
            evaluate(0, 0)
        for epoch in range(config.epochs):
            batches = batch_sampler(len(images), config.batch_size, epoch, config.seed)
            if not batches:
                raise TrainingError(f"dataset of {len(images)} images yields no full batch of {config.batch_size}")
            for b, idx in enumerate(batches):
                step += 1
                lr = scheduled_lr(epoch + b / len(batches), schedule, sgd_cfg)
                views = batch_views(images, idx, config.view_scheme, basic, aux, config.seed, epoch, result.views)
                report = train_step(state, optimizer, views, stats, lr, config.loss.temperature, config.loss.kind)
                if not math.isfinite(report.total):
                    raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})")
                if not state.all_finite():
                    raise TrainingError(f"non-finite parameters after step {step} (epoch {epoch})")
                metrics.writerow([_fmt(v) for v in (
                    epoch, step, lr, report.total, report.l_xy, report.l_zx, report.l_zy,
                    report.mean_pos_sim, report.mean_neg_sim, report.grad_pos, report.grad_neg_sum)])
                timing.writerow((step, f"{time.perf_counter() - t0:.3f}"))
            done = epoch + 1
            if done == config.epochs or (config.eval.every and done % config.eval.every == 0):
                evaluate(done, step)

    save_checkpoint(out / "final.ckpt", state, {"epoch": config.epochs, "config": config.to_dict()},
                    {"channel_stats": stats.as_array()})
    summary = {
        "steps": step,
        "final_knn_top1": result.final_knn,
        "initial_knn_top1": result.initial_knn,
        "basic_draws": result.views.basic,
        "aux_draws": result.views.aux,
        "view_scheme": config.view_scheme,
        "loss_kind": config.loss.kind,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return result


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
