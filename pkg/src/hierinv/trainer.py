"""SGD with momentum, the cosine schedule, and the pretraining loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import augment as aug
from .config import Config
from .io import load_dataset, save_checkpoint
from .model import HierarchicalModel
from .objectives import LossReport, barlow_twins_loss, overall_loss, simsiam_loss
from .tensor import Tensor

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "step", "lr", "L1", "L2", "L3", "L4", "L_overall"]


def lr_at(step: int, total_steps: int, base_lr: float = 0.05, batch_size: int = 256) -> float:
    """Linearly scaled base rate under cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = base_lr * batch_size / 256
    return peak * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def decays(name: str) -> bool:
    """Weight decay applies to conv and fully-connected weights only."""
    return name.endswith(".weight")


def sgd_step(params, grads, velocity, lr: float, momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    """In place: v <- m*v + g + wd*p ; p <- p - lr*v.

    ``params``/``grads``/``velocity`` are parallel sequences of arrays;
    ``weight_decay`` may be a per-parameter sequence.
    """
    wds = weight_decay if isinstance(weight_decay, (list, tuple)) else [weight_decay] * len(params)
    for p, g, v, wd in zip(params, grads, velocity, wds):
        if g is None:
            continue
        step = g + wd * p if wd else g
        v *= momentum
        v += step
        p -= lr * v


class SGD:
    """Momentum SGD over a model's named parameters."""

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.names, self.params = zip(*named_params) if named_params else ((), ())
        self.momentum = momentum
        self.weight_decay = [weight_decay if decays(n) else 0.0 for n in self.names]
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.velocity, lr,
                 self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return dict(zip(self.names, self.velocity))

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i, n in enumerate(self.names):
            if n in state:
                self.velocity[i] = np.array(state[n], dtype=self.velocity[i].dtype)


def build_model(config: Config) -> HierarchicalModel:
    pipes = config.pipelines()
    return HierarchicalModel(config.model_config(), [pipes.kinds(i) for i in range(1, 5)], seed=config.train.seed)


def stage_losses(model: HierarchicalModel, pairs, objective: str = "simsiam", bt_lambda: float = 0.005) -> list[Tensor]:
    """L_1..L_4 for one batch of view pairs."""
    feats = model.forward_stage_features(pairs)
    losses = []
    for i, ((e, e2), (_, _, pa, pb)) in enumerate(zip(feats, pairs), start=1):
        z, z2 = model.project_pair(e, e2, pa, pb, i)
        if objective == "simsiam":
            p, p2 = model.predict_pair(z, z2, i)
            losses.append(simsiam_loss(z, z2, p=p, p2=p2))
        else:
            losses.append(barlow_twins_loss(z, z2, bt_lambda))
    return losses


def train_step(model: HierarchicalModel, optimizer: SGD, images: np.ndarray, pipelines: aug.PipelineSet,
               rng: np.random.Generator, lr: float, config: Config) -> LossReport:
    t = config.train
    pairs = aug.generate_pairs(images, pipelines, rng, config.data.image_size)
    losses = stage_losses(model, pairs, t.objective, t.bt_lambda)
    weights = None if tuple(t.stage_weights) == (1.0, 1.0, 1.0, 1.0) else t.stage_weights
    report = overall_loss(losses, t.objective, weights)
    if not np.isfinite(report.overall):
        raise FloatingPointError(f"non-finite loss {report.row()}")
    optimizer.zero_grad()
    report.tensor.backward()
    optimizer.step(lr)
    report.tensor = None
    return report


def shuffle_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,))).permutation(n)


@dataclass
class PretrainResult:
    model: HierarchicalModel
    checkpoint: Path | None
    metrics: Path | None
    final: LossReport
    history: list


def pretrain(images: np.ndarray, config: Config, out_dir=None, log_every: int = 0) -> PretrainResult:
    """Self-supervised pretraining on an (N, H, W, 3) array.

    With ``out_dir`` the metrics CSV and checkpoints are written there. On a
    non-finite loss a diagnostic checkpoint is saved before re-raising.
    """
    config = config.validate()
    t = config.train
    pipelines = config.pipelines()
    model = build_model(config).train()
    optimizer = SGD(list(model.named_parameters()), t.momentum, t.weight_decay)
    n = images.shape[0]
    if t.max_images:
        n = min(n, t.max_images)
        images = images[:n]
    steps_per_epoch = n // t.batch_size
    if steps_per_epoch < 1:
        raise ValueError(f"{n} images do not fill one batch of {t.batch_size}")
    total = steps_per_epoch * t.epochs
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
    history, step, report = [], 0, None
    started = time.time()
    try:
        for epoch in range(t.epochs):
            order = shuffle_order(t.seed, epoch, n)
            for b in range(steps_per_epoch):
                idx = order[b * t.batch_size:(b + 1) * t.batch_size]
                lr = lr_at(step, total, t.base_lr, t.batch_size)
                rng = aug.view_rng(t.seed, epoch, b)
                try:
                    report = train_step(model, optimizer, images[idx], pipelines, rng, lr, config)
                except FloatingPointError:
                    if out is not None:
                        save_checkpoint(model, optimizer.state(), out / "nan_snapshot.haug", config)
                    logger.error("non-finite loss at epoch %d step %d; snapshot saved", epoch, step)
                    raise
                row = [epoch, step, lr, *report.row()]
                history.append(row)
                if writer is not None:
                    writer.writerow([epoch, step, repr(lr)] + [repr(float(v)) for v in row[3:]])
                if log_every and step % log_every == 0:
                    logger.info("epoch %d step %d lr %.5f loss %.4f (%.0fs)", epoch, step, lr, report.overall,
                                time.time() - started)
                step += 1
            if out is not None and t.ckpt_every and (epoch + 1) % t.ckpt_every == 0:
                save_checkpoint(model, optimizer.state(), out / f"epoch{epoch + 1:03d}.haug", config)
    finally:
        if fh is not None:
            fh.close()
    ckpt = save_checkpoint(model, optimizer.state(), out / "final.haug", config) if out is not None else None
    return PretrainResult(model.eval(), ckpt, out / "metrics.csv" if out is not None else None, report, history)


def run_pretrain(config: Config, out_dir=None, log_every: int = 0) -> PretrainResult:
    """Load ``data.train_path`` and pretrain; outputs go to ``out_dir`` or ``train.out_dir``."""
    images, _ = load_dataset(config.data.train_path, config.data.image_size)
    return pretrain(images, config, out_dir or config.train.out_dir, log_every)
