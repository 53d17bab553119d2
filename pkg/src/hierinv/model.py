"""Staged siamese encoder with stage adapters, projection heads, predictors and
the augmentation-parameter embedder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import augment as aug
from .tensor import (RunningStats, ShapeError, Tensor, batch_norm, concat, conv2d, global_average_pool, linear,
                     relu, split)

EMBED_KINDS = {"color": aug.COLOR, "crop": aug.CROP}
EMBED_ORDER = ("color", "crop")


class Module:
    """Container of named parameters, running statistics and child modules."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, ModuleList):
                for key, child in value.items():
                    yield from child.named_parameters(f"{prefix}{name}.{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, RunningStats):
                yield f"{prefix}{name}.running_mean", value.mean
                yield f"{prefix}{name}.running_var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, ModuleList):
                for key, child in value.items():
                    yield from child.named_buffers(f"{prefix}{name}.{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, ModuleList):
                for child in value.values():
                    yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        for name, ref in expected.items():
            if name not in state:
                raise KeyError(f"missing entry {name!r} in state")
            if tuple(state[name].shape) != tuple(ref.shape):
                raise ShapeError(f"parameter {name!r}: checkpoint shape {tuple(state[name].shape)} "
                                 f"!= model shape {tuple(ref.shape)}")
        extra = sorted(set(state) - set(expected))
        if extra:
            raise KeyError(f"unexpected entries in state: {extra[:3]}")
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.data.dtype)
        for mod_name, stats in self._stats_by_name().items():
            stats.mean = np.array(state[mod_name + ".running_mean"], dtype=stats.mean.dtype)
            stats.var = np.array(state[mod_name + ".running_var"], dtype=stats.var.dtype)

    def _stats_by_name(self, prefix: str = "") -> dict[str, RunningStats]:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, RunningStats):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value._stats_by_name(f"{prefix}{name}."))
            elif isinstance(value, ModuleList):
                for key, child in value.items():
                    out.update(child._stats_by_name(f"{prefix}{name}.{key}."))
        return out


class ModuleList(dict):
    """Ordered string-keyed children; keys become part of parameter names."""


class Conv(Module):
    """Bias-free 3x3 convolution (a norm always follows)."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, stride: int = 1):
        fan_in = c_in * 9
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3)), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, padding=1)


class BatchNorm(Module):
    def __init__(self, channels: int, affine: bool = True):
        self.gamma = Tensor(np.ones(channels), requires_grad=True) if affine else None
        self.beta = Tensor(np.zeros(channels), requires_grad=True) if affine else None
        self.stats = RunningStats(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.stats, training=self.training)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_out, n_in)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"linear layer expects {self.weight.shape[1]} inputs, got {x.shape}")
        return linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """3x3 conv, batch norm, rectifier."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, stride: int = 1):
        self.conv = Conv(rng, c_in, c_out, stride)
        self.bn = BatchNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


class Stage(Module):
    """Two conv blocks; the first halves the spatial extent."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, residual: bool = False):
        self.conv0 = Conv(rng, c_in, c_out, stride=2)
        self.bn0 = BatchNorm(c_out)
        self.conv1 = Conv(rng, c_out, c_out)
        self.bn1 = BatchNorm(c_out)
        self.residual = residual

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.bn0(self.conv0(x)))
        out = self.bn1(self.conv1(h))
        if self.residual:
            out = out + h
        return relu(out)


class Backbone(Module):
    def __init__(self, rng: np.random.Generator, width: int = 32, residual: bool = False):
        chans = [3] + [width * 2 ** i for i in range(4)]
        self.stage1 = Stage(rng, chans[0], chans[1], residual)
        self.stage2 = Stage(rng, chans[1], chans[2], residual)
        self.stage3 = Stage(rng, chans[2], chans[3], residual)
        self.stage4 = Stage(rng, chans[3], chans[4], residual)
        self.channels = chans[1:]

    def stage(self, i: int) -> Stage:
        return getattr(self, f"stage{i}")

    def __call__(self, x: Tensor, upto: int = 4) -> Tensor:
        for i in range(1, upto + 1):
            x = self.stage(i)(x)
        return x


class Adapter(Module):
    """Stage adapter: ``4 - stage`` stride-2 blocks bringing a tap to stage-4 shape."""

    def __init__(self, rng: np.random.Generator, stage: int, width: int):
        self.n_blocks = 4 - stage
        c = width * 2 ** (stage - 1)
        for b in range(self.n_blocks):
            setattr(self, f"block{b}", ConvBlock(rng, c, c * 2, stride=2))
            c *= 2

    def __call__(self, x: Tensor) -> Tensor:
        for b in range(self.n_blocks):
            x = getattr(self, f"block{b}")(x)
        return x


class ProjectionHead(Module):
    """Three fully-connected layers; the last one has norm but no rectifier."""

    def __init__(self, rng: np.random.Generator, n_in: int, dim: int):
        self.fc0, self.bn0 = Linear(rng, n_in, dim), BatchNorm(dim)
        self.fc1, self.bn1 = Linear(rng, dim, dim), BatchNorm(dim)
        self.fc2, self.bn2 = Linear(rng, dim, dim), BatchNorm(dim)
        self.n_in = n_in

    def __call__(self, x: Tensor) -> Tensor:
        x = relu(self.bn0(self.fc0(x)))
        x = relu(self.bn1(self.fc1(x)))
        return self.bn2(self.fc2(x))


class Predictor(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.fc0, self.bn0 = Linear(rng, dim, hidden), BatchNorm(hidden)
        self.fc1 = Linear(rng, hidden, dim)

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc1(relu(self.bn0(self.fc0(z))))


class KindEmbedder(Module):
    """One linear layer + norm + rectifier over a 4-vector of augmentation parameters."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.fc = Linear(rng, 4, dim)
        self.bn = BatchNorm(dim)

    def __call__(self, params: Tensor) -> Tensor:
        return relu(self.bn(self.fc(params)))


@dataclass(frozen=True)
class ModelConfig:
    width: int = 32
    embed_dim: int = 32
    proj_dim: int = 64
    pred_hidden: int = 16
    residual: bool = False
    expansion: tuple = ("color",)
    image_size: int = 32


class HierarchicalModel(Module):
    """Backbone f1..f4, adapters g1..g4, heads h1..h4, predictors and embedder.

    ``stage_kinds[i-1]`` lists the augmentation kinds in T_i; it fixes which
    embeddings widen head i.
    """

    def __init__(self, config: ModelConfig, stage_kinds: Sequence[frozenset], seed: int = 0):
        rng = np.random.default_rng(seed)
        for k in config.expansion:
            if k not in EMBED_KINDS:
                raise ValueError(f"unknown expansion kind {k!r}; expected a subset of {EMBED_ORDER}")
        self.config = config
        self.stage_kinds = tuple(frozenset(k) for k in stage_kinds)
        self.backbone = Backbone(rng, config.width, config.residual)
        self.feature_dim = self.backbone.channels[-1]
        self.adapter = ModuleList({str(i): Adapter(rng, i, config.width) for i in range(1, 4)})
        self.embedder = ModuleList({k: KindEmbedder(rng, config.embed_dim)
                                    for k in EMBED_ORDER if k in config.expansion})
        self.head = ModuleList()
        self.predictor = ModuleList()
        for i in range(1, 5):
            n_in = self.feature_dim + config.embed_dim * len(self.expansion_kinds(i))
            self.head[str(i)] = ProjectionHead(rng, n_in, config.proj_dim)
            self.predictor[str(i)] = Predictor(rng, config.proj_dim, config.pred_hidden)

    def expansion_kinds(self, stage: int) -> tuple:
        """Embedded kinds at a stage: the configured ones whose augmentation is in T_stage."""
        return tuple(k for k in EMBED_ORDER
                     if k in self.config.expansion and EMBED_KINDS[k] in self.stage_kinds[stage - 1])

    # -- features ------------------------------------------------------------
    def _check_views(self, x: Tensor) -> None:
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError(f"expected views of shape (N, 3, {s}, {s}), got {x.shape}")

    def stage_feature(self, fmap: Tensor, stage: int) -> Tensor:
        if stage < 4:
            fmap = self.adapter[str(stage)](fmap)
        return global_average_pool(fmap)

    def forward_stage_features(self, view_pairs: Sequence[tuple]) -> list[tuple[Tensor, Tensor]]:
        """Pooled features (e_i, e_i') for the four view pairs.

        All views enter stage 1 as one batch; after stage i the pair-i views
        leave for adapter g_i and the rest continue to stage i+1.
        """
        if len(view_pairs) != 4:
            raise ValueError(f"need four view pairs, got {len(view_pairs)}")
        views = [_as_nchw(v) for pair in view_pairs for v in pair[:2]]
        for v in views:
            self._check_views(v)
        sizes = [v.shape[0] for v in views]
        x = concat(views, axis=0)
        out = []
        for i in range(1, 5):
            x = self.backbone.stage(i)(x)
            here = sizes[:2]
            rest = sizes[2:]
            pieces = split(x, here + ([sum(rest)] if rest else []), axis=0)
            pair = concat(pieces[:2], axis=0)
            e = self.stage_feature(pair, i)
            out.append(tuple(split(e, here, axis=0)))
            if rest:
                x = pieces[2]
                sizes = rest
        return out

    def features(self, images, stage: int = 4) -> Tensor:
        """e_stage for a batch of unpaired views (NHWC array or NCHW tensor)."""
        x = _as_nchw(images)
        self._check_views(x)
        return self.stage_feature(self.backbone(x, upto=stage), stage)

    # -- expansion and projection -------------------------------------------------
    def embed_aug(self, params: aug.AugBatch, kinds: Sequence[str], stage: int | None = None) -> Tensor | None:
        """Concatenated per-kind embeddings in fixed kind order (colour first)."""
        kinds = [k for k in EMBED_ORDER if k in kinds]
        if not kinds:
            return None
        pieces = []
        for k in kinds:
            if k not in self.embedder:
                raise ValueError(f"model has no {k!r} embedder")
            if stage is not None and EMBED_KINDS[k] not in self.stage_kinds[stage - 1]:
                raise ValueError(f"stage {stage} pipeline has no {EMBED_KINDS[k]} step to embed")
            vec = params.color_vectors() if k == "color" else params.crop_vectors()
            pieces.append(self.embedder[k](Tensor(vec)))
        return pieces[0] if len(pieces) == 1 else concat(pieces, axis=1)

    def project(self, e: Tensor, e_aug: Tensor | None, stage: int) -> Tensor:
        head = self.head[str(stage)]
        x = e if e_aug is None else concat([e, e_aug], axis=1)
        if x.shape[1] != head.n_in:
            raise ShapeError(f"head {stage} expects {head.n_in} inputs, got {x.shape[1]}")
        return head(x)

    def project_pair(self, e: Tensor, e2: Tensor, params, params2, stage: int) -> tuple[Tensor, Tensor]:
        """Project both branches in one batch so they share normalisation statistics."""
        kinds = self.expansion_kinds(stage)
        both = concat([e, e2], axis=0)
        emb = None
        if kinds:
            emb = self.embed_aug(aug.AugBatch.concat([params, params2]), kinds, stage)
        z = self.project(both, emb, stage)
        n = e.shape[0]
        za, zb = split(z, [n, z.shape[0] - n], axis=0)
        return za, zb

    def predict_pair(self, z: Tensor, z2: Tensor, stage: int) -> tuple[Tensor, Tensor]:
        p = self.predictor[str(stage)](concat([z, z2], axis=0))
        n = z.shape[0]
        pa, pb = split(p, [n, p.shape[0] - n], axis=0)
        return pa, pb

    def backbone_state(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.state_dict().items() if k.startswith("backbone.")}


def _as_nchw(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim == 4 and arr.shape[-1] == 3 and arr.shape[1] != 3:
        arr = arr.transpose(0, 3, 1, 2)
    return Tensor(np.ascontiguousarray(arr))
