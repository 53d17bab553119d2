"""Frozen-feature evaluation: linear probe, augmentation-strength probe,
per-stage invariance report and the rotation-placement study."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import augment as aug
from .model import HierarchicalModel
from .tensor import Tensor, cross_entropy, linear, l2_normalize
from .trainer import lr_at, sgd_step


@dataclass
class ProbeResult:
    task: str
    accuracy: float
    n_classes: int
    n_train: int
    n_test: int
    seed: int
    train_accuracy: float = float("nan")
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    def row(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Softmax regression on fixed features, trained with momentum SGD under a cosine schedule."""

    def __init__(self, epochs=30, lr=0.1, batch_size=256, momentum=0.9, standardize=True, random_state=0):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        self.mean_ = X.mean(axis=0) if self.standardize else np.zeros(X.shape[1])
        self.scale_ = X.std(axis=0) + 1e-6 if self.standardize else np.ones(X.shape[1])
        Xs = ((X - self.mean_) / self.scale_).astype(np.float32)
        n, d = Xs.shape
        k = len(self.classes_)
        rng = np.random.default_rng(self.random_state)
        w = Tensor(np.zeros((k, d)), requires_grad=True)
        b = Tensor(np.zeros(k), requires_grad=True)
        vel = [np.zeros_like(w.data), np.zeros_like(b.data)]
        bs = min(self.batch_size, n)
        per_epoch = max(n // bs, 1)
        total = per_epoch * self.epochs
        step = 0
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for j in range(per_epoch):
                idx = order[j * bs:(j + 1) * bs]
                w.grad = b.grad = None
                loss = cross_entropy(linear(Tensor(Xs[idx]), w, b), y_idx[idx])
                loss.backward()
                sgd_step([w.data, b.data], [w.grad, b.grad], vel, lr_at(step, total, self.lr, 256),
                         self.momentum, 0.0)
                step += 1
        self.coef_ = w.data.astype(np.float64)
        self.intercept_ = b.data.astype(np.float64)
        self.n_features_in_ = d
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return ((X - self.mean_) / self.scale_) @ self.coef_.T + self.intercept_

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def backbone_checksum(model: HierarchicalModel) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.backbone_state().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def extract_features(model: HierarchicalModel, images: np.ndarray, stage: int = 4, batch: int = 500) -> np.ndarray:
    """Eval-mode pooled features e_stage for an (N, H, W, 3) array."""
    was_training = model.training
    model.eval()
    try:
        chunks = [model.features(images[i:i + batch], stage).data for i in range(0, len(images), batch)]
    finally:
        model.train(was_training)
    return np.concatenate(chunks).astype(np.float64)


def _load(model_or_path) -> HierarchicalModel:
    if isinstance(model_or_path, HierarchicalModel):
        return model_or_path
    from .io import load_checkpoint
    return load_checkpoint(model_or_path)[0]


def linear_probe(model_or_path, train: tuple, test: tuple, stage: int = 4, seed: int = 0, epochs: int = 30,
                 lr: float = 0.1, batch_size: int = 256, n_classes: int | None = None) -> ProbeResult:
    """Train one linear layer on frozen stage features; report held-out top-1."""
    model = _load(model_or_path)
    (xtr, ytr), (xte, yte) = train, test
    ytr, yte = np.asarray(ytr), np.asarray(yte)
    labels = np.union1d(ytr, yte)
    if n_classes is not None and (len(np.unique(ytr)) != n_classes or labels.max() >= n_classes):
        raise ValueError(f"labels {labels.tolist()} inconsistent with n_classes={n_classes}")
    before = backbone_checksum(model)
    ftr, fte = extract_features(model, xtr, stage), extract_features(model, xte, stage)
    probe = LinearProbe(epochs=epochs, lr=lr, batch_size=batch_size, random_state=seed).fit(ftr, ytr)
    if backbone_checksum(model) != before:
        raise RuntimeError("linear probe modified backbone parameters")
    return ProbeResult(f"linear_stage{stage}", float(probe.score(fte, yte)), len(labels), len(ytr), len(yte), seed,
                       train_accuracy=float(probe.score(ftr, ytr)), extra={"backbone_sha256": before})


# -- augmentation-strength probe -------------------------------------------------
def jitter_views(images: np.ndarray, jitter: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Colour-jitter each image with the given (b, c, s, hue) rows, random sub-op order."""
    n = images.shape[0]
    params = aug.AugBatch.identity(n, kinds={aug.CROP, aug.COLOR})
    params.jitter = np.asarray(jitter, np.float32)
    params.jitter_order = np.argsort(rng.random((n, 4)), axis=1)
    return aug.apply_params(images, params, images.shape[1]), params


def aug_probe_dataset(model: HierarchicalModel, images: np.ndarray, representation: str = "e",
                      n_buckets: int = 10, per_bucket: int = 200, seed: int = 0, batch: int = 500):
    """(features, bucket labels, jitter rows) for balanced-bucket jittered views of ``images``.

    ``representation`` "e" uses pooled stage-4 features; "h" passes them through
    head 4 together with the view's own augmentation embedding (when trained with one).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    jitter, labels = aug.sample_balanced_jitter(per_bucket, rng, n_buckets)
    picks = rng.integers(0, images.shape[0], size=labels.shape[0])
    views, params = jitter_views(images[picks], jitter, rng)
    model.eval()
    feats = []
    for i in range(0, len(views), batch):
        e = model.features(views[i:i + batch], 4)
        if representation == "h":
            sub = _slice_batch(params, i, i + batch)
            kinds = model.expansion_kinds(4)
            emb = model.embed_aug(sub, kinds, 4) if kinds else None
            e = model.project(e, emb, 4)
        elif representation != "e":
            raise ValueError(f"representation must be 'e' or 'h', got {representation!r}")
        feats.append(e.data)
    return np.concatenate(feats).astype(np.float64), labels, jitter


def _slice_batch(params: aug.AugBatch, lo: int, hi: int) -> aug.AugBatch:
    return aug.AugBatch(crop=params.crop[lo:hi], flip=params.flip[lo:hi], jitter=params.jitter[lo:hi],
                        jitter_order=params.jitter_order[lo:hi], gray=params.gray[lo:hi], sigma=params.sigma[lo:hi],
                        rot=params.rot[lo:hi], rot_applied=params.rot_applied[lo:hi], kinds=params.kinds)


def aug_probe(model_or_path, images: np.ndarray, representation: str = "e", n_buckets: int = 10,
              per_bucket: int = 200, seed: int = 0, epochs: int = 30, lr: float = 0.1) -> ProbeResult:
    """Predict the colour-jitter strength bucket of a view from its representation.

    Source images are split in half so train and test views never share an image.
    """
    model = _load(model_or_path)
    half = images.shape[0] // 2
    xtr, ytr, _ = aug_probe_dataset(model, images[:half], representation, n_buckets, per_bucket, seed)
    xte, yte, _ = aug_probe_dataset(model, images[half:], representation, n_buckets, max(per_bucket // 2, 1),
                                    seed + 1000)
    probe = LinearProbe(epochs=epochs, lr=lr, random_state=seed).fit(xtr, ytr)
    return ProbeResult(f"aug_strength_{representation}", float(probe.score(xte, yte)), n_buckets, len(ytr), len(yte),
                       seed, train_accuracy=float(probe.score(xtr, ytr)), extra={"random_guess": 1.0 / n_buckets})


# -- invariance report -----------------------------------------------------------
INVARIANCE_KINDS = ("identity", aug.CROP, aug.FLIP, aug.COLOR, aug.GRAY, aug.BLUR, aug.ROTATION)


def canonical_transform(images: np.ndarray, kind: str) -> np.ndarray:
    """Fixed-strength version of one augmentation kind."""
    n, size = images.shape[0], images.shape[1]
    p = aug.AugBatch.identity(n, kinds={aug.CROP, kind})
    if kind == aug.CROP:
        p.crop = np.tile(np.array([0.125, 0.125, 0.75, 0.75], np.float32), (n, 1))
    elif kind == aug.FLIP:
        p.flip[:] = True
    elif kind == aug.COLOR:
        p.jitter = np.tile(np.array([1.2, 1.2, 1.2, 0.05], np.float32), (n, 1))
    elif kind == aug.GRAY:
        p.gray[:] = True
    elif kind == aug.BLUR:
        p.sigma[:] = 1.0
    elif kind == aug.ROTATION:
        p.rot[:] = 1
        p.rot_applied[:] = True
    elif kind != "identity":
        raise ValueError(f"unknown augmentation kind {kind!r}")
    return aug.apply_params(images, p, size)


@dataclass
class InvarianceReport:
    kinds: tuple
    matrix: np.ndarray  # (4 stages, len(kinds)) mean cosine similarity

    def value(self, stage: int, kind: str) -> float:
        return float(self.matrix[stage - 1, self.kinds.index(kind)])

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", *self.kinds])
            for i, row in enumerate(self.matrix, start=1):
                w.writerow([i, *(f"{v:.6f}" for v in row)])
        return path


def invariance_report(model_or_path, images: np.ndarray, kinds=INVARIANCE_KINDS) -> InvarianceReport:
    """Mean cosine(e_i(x), e_i(a(x))) per stage i and augmentation kind a."""
    model = _load(model_or_path)
    kinds = tuple(kinds)
    base = [extract_features(model, images, s) for s in range(1, 5)]
    mat = np.zeros((4, len(kinds)))
    for j, kind in enumerate(kinds):
        moved = canonical_transform(images, kind)
        for s in range(1, 5):
            mat[s - 1, j] = _mean_cosine(base[s - 1], extract_features(model, moved, s))
    return InvarianceReport(kinds, mat)


def _mean_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = l2_normalize(Tensor(a), axis=1).data.astype(np.float64)
    nb = l2_normalize(Tensor(b), axis=1).data.astype(np.float64)
    return float(np.clip((na * nb).sum(axis=1).mean(), -1.0, 1.0))
