"""Seeded multi-run comparisons used by the CLI and the acceptance suite.

Pretrained checkpoints are cached on disk keyed by the config text, the
training images and the training code, so repeated studies reuse runs.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .io import load_checkpoint, render_synthetic
from .model import HierarchicalModel
from .probes import ProbeResult, aug_probe, invariance_report, linear_probe
from .trainer import build_model, pretrain

logger = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent
# modules whose code decides what a pretraining run produces
TRAINING_SOURCES = ("augment.py", "config.py", "io.py", "model.py", "objectives.py", "tensor.py", "trainer.py")


def default_cache_dir() -> Path:
    return Path(os.environ.get("HIERINV_CACHE", Path.home() / ".cache" / "hierinv"))


def source_digest() -> str:
    h = hashlib.sha256()
    for path in (PACKAGE_DIR / name for name in TRAINING_SOURCES):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def run_key(config: Config, images: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(config.to_text(("data", "model", "augment", "train")).encode())
    h.update(hashlib.sha256(np.ascontiguousarray(images).tobytes()).digest())
    h.update(source_digest().encode())
    return h.hexdigest()[:24]


def cached_pretrain(images: np.ndarray, config: Config, cache_dir=None) -> HierarchicalModel:
    """Pretrain once per (config, data, source) and reload the final checkpoint afterwards."""
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    out = cache / run_key(config, images)
    ckpt = out / "final.haug"
    if ckpt.exists():
        logger.info("cache hit %s", out.name)
        return load_checkpoint(ckpt, expected_config=config)[0].eval()
    logger.info("pretraining %s (mode=%s seed=%d)", out.name, config.augment.mode, config.train.seed)
    return pretrain(images, config, out).model


@dataclass
class SyntheticSplit:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    spec: object = None


def synthetic_split(n_train: int = 5000, n_test: int = 1000, classes: int = 10, seed: int = 0) -> SyntheticSplit:
    """Independent train and test draws of the synthetic shapes set, as floats in [0, 1]."""
    xtr, ytr, spec = render_synthetic(n_train, classes, seed)
    xte, yte, _ = render_synthetic(n_test, classes, seed + 10_000)
    return SyntheticSplit(xtr.astype(np.float32) / 255, ytr, xte.astype(np.float32) / 255, yte, spec)


@dataclass
class DirectionCheck:
    name: str
    lhs: float
    rhs: float
    relation: str  # ">=", ">", "<="
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        if self.relation == ">=":
            return self.lhs >= self.rhs
        if self.relation == ">":
            return self.lhs > self.rhs
        if self.relation == "<=":
            return self.lhs <= self.rhs
        raise ValueError(self.relation)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.lhs:.4f} {self.relation} {self.rhs:.4f}"


def seeded(config: Config, seed: int, **sets) -> Config:
    pairs = {"train.seed": str(seed)}
    pairs.update({k.replace("__", "."): str(v) for k, v in sets.items()})
    return config.with_overrides(pairs)


def write_rows(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return path


def probe_variants(variants: dict[str, Config], data: SyntheticSplit, seeds, cache_dir=None,
                   stage: int = 4) -> dict[str, list[ProbeResult]]:
    """Pretrain every (variant, seed) and linear-probe it on the synthetic classes."""
    out = {}
    for name, cfg in variants.items():
        out[name] = []
        for s in seeds:
            model = cached_pretrain(data.x_train, seeded(cfg, s), cache_dir)
            r = linear_probe(model, (data.x_train, data.y_train), (data.x_test, data.y_test), stage=stage, seed=s,
                             epochs=cfg.eval.probe_epochs, lr=cfg.eval.probe_lr, batch_size=cfg.eval.probe_batch)
            r.extra["variant"] = name
            out[name].append(r)
    return out


def mean_accuracy(results: list[ProbeResult]) -> float:
    return float(np.mean([r.accuracy for r in results]))


def mode_comparison(config: Config, data: SyntheticSplit, seeds=(0, 1, 2), cache_dir=None, out_csv=None):
    """Hierarchical against uniform mode on the linear probe."""
    res = probe_variants({"hierarchical": config.with_overrides({"augment.mode": "hierarchical"}),
                          "uniform": config.with_overrides({"augment.mode": "uniform"})}, data, seeds, cache_dir)
    if out_csv:
        write_rows(out_csv, [r.row() for rs in res.values() for r in rs])
    return DirectionCheck("hierarchical >= uniform (linear probe)", mean_accuracy(res["hierarchical"]),
                          mean_accuracy(res["uniform"]), ">=", {"results": res})


def rotation_placement_experiment(config: Config, data: SyntheticSplit, seeds=(0, 1, 2), cache_dir=None,
                                  out_csv=None):
    """Rotation added from stage 1, from stage 4, and not at all; linear probe on each."""
    variants = {"rotation_from_1": config.with_overrides({"augment.rotation_from_stage": "1"}),
                "rotation_from_4": config.with_overrides({"augment.rotation_from_stage": "4"}),
                "no_rotation": config.with_overrides({"augment.rotation_from_stage": "0"})}
    res = probe_variants(variants, data, seeds, cache_dir)
    rows = [r.row() for rs in res.values() for r in rs]
    rows += [{"task": "mean", "variant": k, "accuracy": mean_accuracy(v), "seed": "all"} for k, v in res.items()]
    if out_csv:
        write_rows(out_csv, rows)
    return DirectionCheck("rotation from stage 4 >= from stage 1", mean_accuracy(res["rotation_from_4"]),
                          mean_accuracy(res["rotation_from_1"]), ">=", {"results": res})


def expansion_probe_study(config: Config, data: SyntheticSplit, seeds=(0, 1, 2), cache_dir=None, out_csv=None,
                          n_buckets: int | None = None, per_bucket: int | None = None):
    """Jitter-strength probe on e (with and without expansion) and on h(e) (with)."""
    n_buckets = n_buckets or config.eval.n_buckets
    per_bucket = per_bucket or config.eval.per_bucket
    with_cfg = config.with_overrides({"model.expansion": "color"})
    without_cfg = config.with_overrides({"model.expansion": "none"})
    rows, acc = [], {"e_with": [], "e_without": [], "h_with": []}
    for s in seeds:
        m_with = cached_pretrain(data.x_train, seeded(with_cfg, s), cache_dir)
        m_without = cached_pretrain(data.x_train, seeded(without_cfg, s), cache_dir)
        for key, model, rep in (("e_with", m_with, "e"), ("e_without", m_without, "e"), ("h_with", m_with, "h")):
            r = aug_probe(model, data.x_test, rep, n_buckets, per_bucket, seed=s,
                          epochs=config.eval.probe_epochs, lr=config.eval.probe_lr)
            r.extra["variant"] = key
            acc[key].append(r.accuracy)
            rows.append(r.row())
    if out_csv:
        write_rows(out_csv, rows)
    means = {k: float(np.mean(v)) for k, v in acc.items()}
    chance = 1.0 / n_buckets
    return [DirectionCheck("aug probe: e(with expansion) > e(without)", means["e_with"], means["e_without"], ">"),
            DirectionCheck("aug probe: e(with expansion) >= 2x random", means["e_with"], 2 * chance, ">="),
            DirectionCheck("aug probe: |h(e) - random| <= 0.08", abs(means["h_with"] - chance), 0.08, "<=")], means


def invariance_study(config: Config, data: SyntheticSplit, seeds=(0, 1, 2), cache_dir=None, n_images: int = 256,
                     out_csv=None):
    """Trained against untrained invariance reports, paired by seed."""
    images = data.x_test[:n_images]
    trained, untrained = [], []
    for s in seeds:
        cfg = seeded(config, s)
        trained.append(invariance_report(cached_pretrain(data.x_train, cfg, cache_dir), images))
        untrained.append(invariance_report(build_model(cfg).eval(), images))
    t = np.mean([r.matrix for r in trained], axis=0)
    u = np.mean([r.matrix for r in untrained], axis=0)
    kinds = trained[0].kinds
    if out_csv:
        rows = [{"model": name, "stage": i + 1, **{k: f"{m[i, j]:.6f}" for j, k in enumerate(kinds)}}
                for name, m in (("trained", t), ("untrained", u)) for i in range(4)]
        write_rows(out_csv, rows)
    flip = kinds.index("hflip")
    crop = kinds.index("crop_resize")
    checks = [DirectionCheck("flip invariance stage 4 > stage 1", float(t[3, flip]), float(t[0, flip]), ">")]
    for i in range(4):
        checks.append(DirectionCheck(f"crop invariance stage {i + 1} >= untrained", float(t[i, crop]),
                                     float(u[i, crop]), ">="))
    return checks, t, u
