"""Parameter-recording image augmentations and add-one pipeline construction.

Images are float arrays in [0, 1] laid out ``(N, H, W, 3)``. Sampling and
application are split: ``sample_params`` draws an :class:`AugBatch` of exact
parameters, ``apply_params`` is a pure function of images and parameters, so a
recorded batch always reproduces its views bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

CROP = "crop_resize"
COLOR = "color_jitter"
GRAY = "grayscale"
BLUR = "blur"
FLIP = "hflip"
ROTATION = "rotation"

KINDS = (CROP, COLOR, GRAY, BLUR, FLIP, ROTATION)
ARRANGEABLE = (COLOR, GRAY, BLUR, FLIP)
LETTERS = {"C": COLOR, "G": GRAY, "B": BLUR, "F": FLIP}
# application order inside one composition, independent of the arrangement
APPLY_ORDER = (CROP, FLIP, COLOR, GRAY, BLUR, ROTATION)
MODES = ("hierarchical", "uniform", "hierarchical_strength")

# layout of AugParams.to_vector()
VECTOR_FIELDS = ("x", "y", "h", "w", "flip", "b", "c", "s", "hue", "gray", "sigma", "rot")

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class AugStepSpec:
    kind: str
    probability: float = 1.0
    jitter_max: tuple = (0.4, 0.4, 0.4, 0.1)
    sigma_range: tuple = (0.1, 2.0)
    scale_range: tuple = (0.2, 1.0)
    ratio_range: tuple = (3 / 4, 4 / 3)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PipelineError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise PipelineError(f"{self.kind}: probability {self.probability} outside [0, 1]")
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise PipelineError(f"{self.kind}: degenerate sigma range {self.sigma_range}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi <= 1:
            raise PipelineError(f"{self.kind}: degenerate scale range {self.scale_range}")
        if any(d < 0 for d in self.jitter_max) or self.jitter_max[3] > 0.5 or max(self.jitter_max[:3]) >= 1:
            raise PipelineError(f"{self.kind}: invalid jitter deltas {self.jitter_max}")


def default_step(kind: str, strength: float = 1.0, **overrides) -> AugStepSpec:
    """The common contrastive recipe, optionally scaled by ``strength`` in [0, 1]."""
    base = {
        CROP: AugStepSpec(CROP, 1.0),
        COLOR: AugStepSpec(COLOR, 0.8),
        GRAY: AugStepSpec(GRAY, 0.2),
        BLUR: AugStepSpec(BLUR, 0.5),
        FLIP: AugStepSpec(FLIP, 0.5),
        ROTATION: AugStepSpec(ROTATION, 0.5),
    }[kind]
    if overrides:
        base = replace(base, **overrides)
    if strength == 1.0:
        return base
    if kind == COLOR:
        return replace(base, jitter_max=tuple(d * strength for d in base.jitter_max))
    if kind == BLUR:
        lo, hi = base.sigma_range
        return replace(base, sigma_range=(lo, lo + (hi - lo) * strength))
    if kind in (GRAY, FLIP):
        return replace(base, probability=base.probability * strength)
    return base


@dataclass(frozen=True)
class PipelineSet:
    """Four compositions T1..T4; ``stages[i]`` holds the steps of T(i+1) in application order."""

    arrangement: tuple
    mode: str
    rotation_from_stage: int | None
    stages: tuple

    def kinds(self, stage: int) -> frozenset:
        return frozenset(step.kind for step in self.stages[stage - 1])

    def step(self, stage: int, kind: str) -> AugStepSpec | None:
        for s in self.stages[stage - 1]:
            if s.kind == kind:
                return s
        return None


def parse_arrangement(arrangement) -> tuple:
    if isinstance(arrangement, str):
        arrangement = [a.strip() for a in arrangement.replace("[", "").replace("]", "").split(",") if a.strip()]
    kinds = tuple(LETTERS.get(a, a) for a in arrangement)
    for k in kinds:
        if k not in ARRANGEABLE:
            raise PipelineError(f"arrangement entry {k!r} is not one of {ARRANGEABLE}")
    if len(set(kinds)) != len(kinds):
        raise PipelineError(f"arrangement has duplicate kinds: {list(kinds)}")
    if len(kinds) != 4:
        raise PipelineError(f"arrangement must list all four kinds once, got {list(kinds)}")
    return kinds


def build_pipelines(arrangement=("C", "G", "B", "F"), mode: str = "hierarchical",
                    rotation_from_stage: int | None = None, overrides: dict | None = None) -> PipelineSet:
    """Build T1..T4 by the add-one strategy (or one of the two baselines).

    ``overrides`` maps a kind to AugStepSpec field overrides (e.g. probabilities).
    """
    kinds = parse_arrangement(arrangement)
    if mode not in MODES:
        raise PipelineError(f"unknown pipeline mode {mode!r}; expected one of {MODES}")
    if rotation_from_stage is not None and rotation_from_stage not in (1, 2, 3, 4):
        raise PipelineError(f"rotation_from_stage must be 1..4 or None, got {rotation_from_stage}")
    overrides = overrides or {}
    stages = []
    for i in range(1, 5):
        if mode == "hierarchical":
            active, strength = (CROP,) + kinds[:i], 1.0
        elif mode == "uniform":
            active, strength = (CROP,) + kinds, 1.0
        else:
            active, strength = (CROP,) + kinds, i / 4
        if rotation_from_stage is not None and i >= rotation_from_stage:
            active = active + (ROTATION,)
        steps = []
        for k in APPLY_ORDER:
            if k in active:
                scale = 1.0 if k in (CROP, ROTATION) else strength
                steps.append(default_step(k, scale, **overrides.get(k, {})))
        stages.append(tuple(steps))
    return PipelineSet(kinds, mode, rotation_from_stage, tuple(stages))


@dataclass
class AugParams:
    """Exact parameters applied to one view; un-fired steps hold identity values."""

    crop: tuple = (0.0, 0.0, 1.0, 1.0)  # x, y, h, w as fractions
    flip_applied: bool = False
    jitter: tuple = (1.0, 1.0, 1.0, 0.0)  # b, c, s, hue
    jitter_order: tuple = (0, 1, 2, 3)
    grayscale_applied: bool = False
    blur_sigma: float | None = None
    rotation_quarter_turns: int | None = None
    rotation_applied: bool = False

    def to_vector(self) -> np.ndarray:
        x, y, h, w = self.crop
        b, c, s, hue = self.jitter
        return np.array([x, y, h, w, float(self.flip_applied), b, c, s, hue, float(self.grayscale_applied),
                         self.blur_sigma or 0.0, float(self.rotation_quarter_turns or 0)], dtype=np.float32)


@dataclass
class AugBatch:
    """Structure-of-arrays form of N AugParams."""

    crop: np.ndarray  # (N, 4) x, y, h, w
    flip: np.ndarray  # (N,) bool
    jitter: np.ndarray  # (N, 4) b, c, s, hue
    jitter_order: np.ndarray  # (N, 4) int permutation of the four sub-ops
    gray: np.ndarray  # (N,) bool
    sigma: np.ndarray  # (N,) 0 where blur did not fire
    rot: np.ndarray  # (N,) quarter turns
    rot_applied: np.ndarray  # (N,) bool
    kinds: frozenset = field(default_factory=frozenset)

    def __len__(self) -> int:
        return self.crop.shape[0]

    @classmethod
    def identity(cls, n: int, kinds=frozenset()) -> "AugBatch":
        return cls(crop=np.tile(np.array([0, 0, 1, 1], np.float32), (n, 1)), flip=np.zeros(n, bool),
                   jitter=np.tile(np.array([1, 1, 1, 0], np.float32), (n, 1)),
                   jitter_order=np.tile(np.arange(4), (n, 1)), gray=np.zeros(n, bool),
                   sigma=np.zeros(n, np.float32), rot=np.zeros(n, np.int64), rot_applied=np.zeros(n, bool),
                   kinds=frozenset(kinds))

    def __getitem__(self, i: int) -> AugParams:
        return AugParams(
            crop=tuple(float(v) for v in self.crop[i]), flip_applied=bool(self.flip[i]),
            jitter=tuple(float(v) for v in self.jitter[i]), jitter_order=tuple(int(v) for v in self.jitter_order[i]),
            grayscale_applied=bool(self.gray[i]),
            blur_sigma=float(self.sigma[i]) if BLUR in self.kinds else None,
            rotation_quarter_turns=int(self.rot[i]) if ROTATION in self.kinds else None,
            rotation_applied=bool(self.rot_applied[i]))

    @classmethod
    def from_params(cls, params: Sequence[AugParams], kinds=frozenset()) -> "AugBatch":
        return cls(crop=np.array([p.crop for p in params], np.float32).reshape(-1, 4),
                   flip=np.array([p.flip_applied for p in params], bool),
                   jitter=np.array([p.jitter for p in params], np.float32).reshape(-1, 4),
                   jitter_order=np.array([p.jitter_order for p in params], np.int64).reshape(-1, 4),
                   gray=np.array([p.grayscale_applied for p in params], bool),
                   sigma=np.array([p.blur_sigma or 0.0 for p in params], np.float32),
                   rot=np.array([p.rotation_quarter_turns or 0 for p in params], np.int64),
                   rot_applied=np.array([p.rotation_applied for p in params], bool), kinds=frozenset(kinds))

    def vectors(self) -> np.ndarray:
        """(N, 12) float rows in VECTOR_FIELDS order."""
        return np.column_stack([self.crop, self.flip, self.jitter, self.gray, self.sigma, self.rot]).astype(np.float32)

    def color_vectors(self) -> np.ndarray:
        return self.jitter.astype(np.float32)

    def crop_vectors(self) -> np.ndarray:
        return self.crop.astype(np.float32)

    @staticmethod
    def concat(batches: Sequence["AugBatch"]) -> "AugBatch":
        kinds = frozenset().union(*(b.kinds for b in batches))
        vals = {f.name: np.concatenate([getattr(b, f.name) for b in batches])
                for f in fields(AugBatch) if f.name != "kinds"}
        return AugBatch(**vals, kinds=kinds)


# -- sampling ----------------------------------------------------------------
def sample_params(steps: Sequence[AugStepSpec], n: int, rng: np.random.Generator) -> AugBatch:
    """Draw parameters for ``n`` independent views of one composition."""
    out = AugBatch.identity(n, kinds=frozenset(s.kind for s in steps))
    for step in steps:
        fire = rng.random(n) < step.probability
        if step.kind == CROP:
            out.crop = _sample_crops(step, n, rng)
        elif step.kind == FLIP:
            out.flip = fire
        elif step.kind == COLOR:
            dmax = np.asarray(step.jitter_max, np.float64)
            draw = rng.uniform(-1.0, 1.0, size=(n, 4)) * dmax
            jit = np.array([1.0, 1.0, 1.0, 0.0]) + draw
            out.jitter = np.where(fire[:, None], jit, [1.0, 1.0, 1.0, 0.0]).astype(np.float32)
            perms = np.argsort(rng.random((n, 4)), axis=1)
            out.jitter_order = np.where(fire[:, None], perms, np.arange(4))
        elif step.kind == GRAY:
            out.gray = fire
        elif step.kind == BLUR:
            lo, hi = step.sigma_range
            out.sigma = np.where(fire, rng.uniform(lo, hi, size=n), 0.0).astype(np.float32)
        elif step.kind == ROTATION:
            turns = rng.integers(0, 4, size=n)
            out.rot_applied = fire
            out.rot = np.where(fire, turns, 0)
    return out


def _sample_crops(step: AugStepSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = step.scale_range
    area = rng.uniform(lo, hi, size=n)
    logr = rng.uniform(np.log(step.ratio_range[0]), np.log(step.ratio_range[1]), size=n)
    ratio = np.exp(logr)
    w = np.minimum(np.sqrt(area * ratio), 1.0)
    h = np.minimum(np.sqrt(area / ratio), 1.0)
    x = rng.random(n) * (1.0 - w)
    y = rng.random(n) * (1.0 - h)
    return np.column_stack([x, y, h, w]).astype(np.float32)


# -- application -------------------------------------------------------------
def apply_params(images: np.ndarray, params: AugBatch, out_size: int = 32) -> np.ndarray:
    """Apply recorded parameters; images (N, H, W, 3) -> views (N, out, out, 3)."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] != len(params):
        raise ValueError(f"{images.shape[0]} images but {len(params)} parameter rows")
    v = crop_resize(images, params.crop, out_size)
    v = flip(v, params.flip)
    if COLOR in params.kinds:
        v = color_jitter(v, params.jitter, params.jitter_order)
    if params.gray.any():
        v = grayscale(v, params.gray)
    if (params.sigma > 0).any():
        v = gaussian_blur(v, params.sigma)
    if params.rot.any():
        v = rotate(v, params.rot)
    return v


def sample_view(image: np.ndarray, steps: Sequence[AugStepSpec], rng_seed, out_size: int = 32):
    """One random view of one (H, W, 3) image and the parameters that produced it."""
    rng = np.random.default_rng(rng_seed)
    params = sample_params(steps, 1, rng)
    view = apply_params(np.asarray(image)[None], params, out_size)[0]
    return view, params[0]


def generate_pairs(images: np.ndarray, pipelines: PipelineSet, rng: np.random.Generator, out_size: int = 32):
    """Two independent instances of each T_i for every image.

    Returns four tuples ``(views, views_prime, params, params_prime)``.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    n = images.shape[0]
    pairs = []
    for stage in range(1, 5):
        steps = pipelines.stages[stage - 1]
        pa = sample_params(steps, n, rng)
        pb = sample_params(steps, n, rng)
        pairs.append((apply_params(images, pa, out_size), apply_params(images, pb, out_size), pa, pb))
    return pairs


def view_rng(global_seed: int, epoch: int, index: int) -> np.random.Generator:
    """Generator for one (epoch, batch-or-sample) slot of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence([int(global_seed), int(epoch), int(index)]))


# -- primitive transforms ----------------------------------------------------
def crop_resize(images: np.ndarray, boxes: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear resize of per-image boxes (x, y, h, w fractions) to out_size^2.

    Sample positions use half-pixel centres, so the full box at equal size is
    an exact copy. Interpolation is separable: rows then columns, each as a
    batched matrix product.
    """
    n, hgt, wid, ch = images.shape
    boxes = np.asarray(boxes, np.float64)
    ry = _interp_matrix(boxes[:, 1], boxes[:, 2], hgt, out_size)
    rx = _interp_matrix(boxes[:, 0], boxes[:, 3], wid, out_size)
    rows = (ry @ images.reshape(n, hgt, wid * ch)).reshape(n, out_size, wid, ch)
    out = rx[:, None] @ rows
    return np.clip(out, 0.0, 1.0)


def _interp_matrix(start: np.ndarray, extent: np.ndarray, size: int, out_size: int) -> np.ndarray:
    """(N, out_size, size) linear-interpolation weights for 1-D resampling."""
    grid = (np.arange(out_size) + 0.5) / out_size
    pos = np.clip((start[:, None] + grid[None] * extent[:, None]) * size - 0.5, 0, size - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    frac = pos - lo
    m = np.zeros((start.shape[0], out_size, size), dtype=np.float32)
    n_idx = np.arange(start.shape[0])[:, None]
    o_idx = np.arange(out_size)[None]
    np.add.at(m, (n_idx, o_idx, lo), (1 - frac).astype(np.float32))
    np.add.at(m, (n_idx, o_idx, hi), frac.astype(np.float32))
    return m


def flip(images: np.ndarray, mask) -> np.ndarray:
    mask = np.broadcast_to(np.asarray(mask, bool), (images.shape[0],))
    out = images.copy()
    out[mask] = images[mask, :, ::-1]
    return out


def rotate(images: np.ndarray, quarter_turns) -> np.ndarray:
    turns = np.broadcast_to(np.asarray(quarter_turns, np.int64) % 4, (images.shape[0],))
    out = images.copy()
    for k in (1, 2, 3):
        sel = turns == k
        if sel.any():
            out[sel] = np.rot90(images[sel], k=k, axes=(1, 2))
    return out


def to_gray(images: np.ndarray) -> np.ndarray:
    return images @ LUMA


def grayscale(images: np.ndarray, mask=True) -> np.ndarray:
    mask = np.broadcast_to(np.asarray(mask, bool), (images.shape[0],))
    out = images.copy()
    g = to_gray(images[mask])
    out[mask] = np.repeat(g[..., None], 3, axis=-1)
    return out


def _blur_kernels(sigma: np.ndarray) -> np.ndarray:
    s = np.maximum(np.asarray(sigma, np.float64), 1e-6)[:, None]
    k = np.exp(-(np.array([-1.0, 0.0, 1.0])[None] ** 2) / (2 * s * s))
    return (k / k.sum(axis=1, keepdims=True)).astype(np.float32)


def gaussian_blur(images: np.ndarray, sigma) -> np.ndarray:
    """Separable 3-tap Gaussian with reflect padding; sigma <= 0 leaves the image alone."""
    sigma = np.broadcast_to(np.asarray(sigma, np.float32), (images.shape[0],))
    active = sigma > 0
    out = images.copy()
    if not active.any():
        return out
    x = images[active]
    k = _blur_kernels(sigma[active])[:, :, None, None, None]
    p = np.pad(x, ((0, 0), (1, 1), (0, 0), (0, 0)), mode="reflect")
    x = k[:, 0] * p[:, :-2] + k[:, 1] * p[:, 1:-1] + k[:, 2] * p[:, 2:]
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)), mode="reflect")
    x = k[:, 0] * p[:, :, :-2] + k[:, 1] * p[:, :, 1:-1] + k[:, 2] * p[:, :, 2:]
    out[active] = np.clip(x, 0.0, 1.0)
    return out


def _adjust(images: np.ndarray, op: int, value: np.ndarray) -> np.ndarray:
    v = value.astype(np.float32)[:, None, None, None]
    if op == 0:  # brightness
        out = images * v
    elif op == 1:  # contrast around the mean grey level
        m = to_gray(images).mean(axis=(1, 2))[:, None, None, None]
        out = m + (images - m) * v
    elif op == 2:  # saturation around per-pixel grey
        g = to_gray(images)[..., None]
        out = g + (images - g) * v
    else:
        out = shift_hue(images, value)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def color_jitter(images: np.ndarray, jitter: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Brightness/contrast/saturation/hue in each row's recorded order."""
    jitter = np.asarray(jitter, np.float32)
    order = np.asarray(order)
    identity = np.all(jitter == np.array([1, 1, 1, 0], np.float32), axis=1)
    out = images.copy()
    for pos in range(4):
        for op in range(4):
            sel = (order[:, pos] == op) & ~identity
            if sel.any():
                out[sel] = _adjust(out[sel], op, jitter[sel, op])
    return out


def shift_hue(images: np.ndarray, shift) -> np.ndarray:
    """Rotate the HSV hue channel by ``shift`` (fraction of a full turn)."""
    shift = np.asarray(shift, np.float32).reshape(-1, 1, 1)
    r, g, b = images[..., 0], images[..., 1], images[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    delta = maxc - np.minimum(np.minimum(r, g), b)
    safe = np.where(delta > 0, delta, np.float32(1))
    hue = np.where(maxc == r, (g - b) / safe, np.where(maxc == g, 2 + (b - r) / safe, 4 + (r - g) / safe))
    hue = np.where(delta > 0, hue / 6, 0)
    sat = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, np.float32(1)), 0)
    return hsv_to_rgb((hue + shift) % 1.0, sat, maxc)


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    k = np.array([5, 3, 1], np.float32) + (h * 6)[..., None]
    k = np.where(k >= 6, k - 6, k)
    ramp = np.clip(np.minimum(k, 4 - k), 0, 1)
    return (v[..., None] * (1 - s[..., None] * ramp)).astype(np.float32)


# -- strength buckets ----------------------------------------------------------
def jitter_strength(jitter: np.ndarray, jitter_max=(0.4, 0.4, 0.4, 0.1)) -> np.ndarray:
    """Normalised distance of (b, c, s, hue) from identity; 1 when every delta is maximal."""
    jitter = np.atleast_2d(np.asarray(jitter, np.float64))
    d = (jitter - np.array([1.0, 1.0, 1.0, 0.0])) / np.asarray(jitter_max, np.float64)
    return np.sqrt((d * d).sum(axis=1) / 4.0)


def jitter_strength_bucket(jitter, n_buckets: int = 10, jitter_max=(0.4, 0.4, 0.4, 0.1)) -> np.ndarray:
    s = jitter_strength(jitter, jitter_max)
    return np.minimum(np.floor(s * n_buckets).astype(np.int64), n_buckets - 1)


def sample_balanced_jitter(n_per_bucket: int, rng: np.random.Generator, n_buckets: int = 10,
                           jitter_max=(0.4, 0.4, 0.4, 0.1)) -> tuple[np.ndarray, np.ndarray]:
    """Jitter vectors with exactly ``n_per_bucket`` rows in each strength bucket.

    Candidates take a uniform direction and a uniform normalised radius, are
    clipped to the jitter box by rejection, and fill each bucket until full.
    """
    dmax = np.asarray(jitter_max, np.float64)
    kept = [[] for _ in range(n_buckets)]
    need = np.full(n_buckets, n_per_bucket)
    while need.any():
        direction = rng.normal(size=(4096, 4))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = rng.uniform(0, 2, size=(4096, 1))
        d = direction * radius
        d = d[np.all(np.abs(d) <= 1, axis=1)]
        jit = (np.array([1.0, 1.0, 1.0, 0.0]) + d * dmax).astype(np.float32)
        buckets = jitter_strength_bucket(jit, n_buckets, jitter_max)
        for b in np.flatnonzero(need):
            rows = jit[buckets == b][: need[b]]
            kept[b].append(rows)
            need[b] -= len(rows)
    jit = np.concatenate([np.concatenate(k) for k in kept])
    labels = np.repeat(np.arange(n_buckets), n_per_bucket)
    perm = rng.permutation(len(labels))
    return jit[perm], labels[perm]
