"""Dataset files, the synthetic shapes generator and the checkpoint format.

Dataset records follow the CIFAR-10 binary layout: one label byte then the
image as channel-planar unsigned bytes (R plane, G plane, B plane).

Checkpoint layout (all little-endian)::

    b"HAUG" | u32 version | 32-byte config digest | u32 n + UTF-8 config text
    | u32 entry count | entries (tensor serialisation) | u32 CRC32 of all prior bytes
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import LUMA, hsv_to_rgb
from .tensor import read_tensor, write_tensor

MAGIC = b"HAUG"
VERSION = 1


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


# -- dataset -----------------------------------------------------------------
def record_size(hw: int) -> int:
    return 1 + 3 * hw * hw


def load_dataset(path, expected_hw: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Read records -> (images float32 (N, H, W, 3) in [0, 1], labels uint8)."""
    raw = Path(path).read_bytes()
    stride = record_size(expected_hw)
    if len(raw) == 0 or len(raw) % stride:
        whole = len(raw) // stride
        raise DatasetError(f"{path}: length {len(raw)} is not a multiple of the {stride}-byte record "
                           f"for {expected_hw}x{expected_hw} images; expected {max(whole, 1) * stride} "
                           f"or {(whole + 1) * stride}, bad tail at offset {whole * stride}")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, stride)
    labels = recs[:, 0].copy()
    pixels = recs[:, 1:].reshape(-1, 3, expected_hw, expected_hw).transpose(0, 2, 3, 1)
    return (pixels.astype(np.float32) / 255.0), labels


def encode_records(images_u8: np.ndarray, labels: np.ndarray) -> bytes:
    """(N, H, W, 3) uint8 + labels -> record bytes."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n = images_u8.shape[0]
    planar = images_u8.transpose(0, 3, 1, 2).reshape(n, -1)
    return np.column_stack([np.asarray(labels, np.uint8), planar]).tobytes()


def save_dataset(path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_records(images_u8, labels))


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


# -- synthetic shapes --------------------------------------------------------
SHAPES = ("disc", "square", "triangle", "cross", "ring")
# hue centres of the colour families; pixel luma is matched across families
FAMILIES = {"red": 0.0, "cyan": 0.5, "green": 0.33, "violet": 0.78, "orange": 0.08}


@dataclass(frozen=True)
class SyntheticSpec:
    classes: tuple  # (shape, family) per label

    @classmethod
    def for_classes(cls, n_classes: int) -> "SyntheticSpec":
        """Pairs each shape with two hue families so classes come in colour-critical pairs."""
        families = ("red", "cyan")
        combos = [(s, f) for s in SHAPES for f in families]
        if n_classes > len(combos):
            extra = [(s, f) for s in SHAPES for f in FAMILIES if f not in families]
            combos += extra
        if not 1 <= n_classes <= len(combos):
            raise ValueError(f"synthetic generator supports 1..{len(combos)} classes, got {n_classes}")
        return cls(tuple(combos[:n_classes]))

    def color_critical_pairs(self) -> list[tuple[int, int]]:
        """Label pairs with the same shape whose only difference is hue."""
        out = []
        for a in range(len(self.classes)):
            for b in range(a + 1, len(self.classes)):
                if self.classes[a][0] == self.classes[b][0]:
                    out.append((a, b))
        return out

    def manifest(self) -> dict:
        return {"classes": [{"label": i, "shape": s, "family": f, "hue": FAMILIES[f]}
                            for i, (s, f) in enumerate(self.classes)],
                "color_critical_pairs": [list(p) for p in self.color_critical_pairs()],
                "note": "paired classes share shape and luma distribution; only hue separates them"}


def _shape_mask(shape: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "cross":
        t = r * 0.35
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if shape == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(shape)


def _family_rgb(hue: float, sat: float, luma: float) -> np.ndarray:
    rgb = hsv_to_rgb(np.array([hue % 1.0], np.float32), np.array([sat], np.float32), np.array([1.0], np.float32))[0]
    rgb = rgb * (luma / float(rgb @ LUMA))
    return np.clip(rgb, 0.0, 1.0)


def render_synthetic(n: int, classes: int, seed: int, size: int = 32):
    """Balanced shapes-on-background images -> (uint8 images (N, H, W, 3), labels, SyntheticSpec)."""
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    spec = SyntheticSpec.for_classes(classes)
    rng = np.random.default_rng(seed)
    labels = np.resize(np.arange(classes), n)
    labels = labels[rng.permutation(n)]
    out = np.empty((n, size, size, 3), dtype=np.float32)
    for i, lab in enumerate(labels):
        shape, family = spec.classes[lab]
        dark = rng.random() < 0.5
        bg = rng.uniform(0.0, 0.12) if dark else rng.uniform(0.88, 1.0)
        img = np.full((size, size, 3), bg, np.float32) + rng.normal(0, 0.03, size=(size, size, 3)).astype(np.float32)
        r = rng.uniform(0.2, 0.34) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = _shape_mask(shape, size, cy, cx, r)
        # luma capped so the most saturated red still reaches it without clipping
        colour = _family_rgb(FAMILIES[family] + rng.uniform(-0.04, 0.04), rng.uniform(0.6, 0.9),
                             rng.uniform(0.2, 0.34))
        img[mask] = colour + rng.normal(0, 0.02, size=(int(mask.sum()), 3))
        out[i] = img
    return to_uint8(out), labels.astype(np.uint8), spec


def generate_synthetic(n: int, classes: int, seed: int, path) -> Path:
    """Write the dataset file plus ``<path>.manifest.json`` naming colour-critical class pairs."""
    images, labels, spec = render_synthetic(n, classes, seed)
    path = Path(path)
    save_dataset(path, images, labels)
    manifest = spec.manifest() | {"n": n, "seed": seed, "image_size": int(images.shape[1])}
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


# -- checkpoints ---------------------------------------------------------------
def checkpoint_bytes(entries: dict[str, np.ndarray], config_text: str, digest: bytes) -> bytes:
    if len(digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(digest)
    text = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        write_tensor(buf, name, np.asarray(arr))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


@dataclass
class CheckpointData:
    digest: bytes
    config_text: str
    entries: dict


def parse_checkpoint(raw: bytes, source: str = "<checkpoint>") -> CheckpointData:
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{source}: truncated header")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise VersionMismatchError(f"{source}: format version {version}, this build reads {VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if crc != actual:
        raise ChecksumError(f"{source}: CRC32 mismatch (stored {crc:08x}, computed {actual:08x})")
    fh = io.BytesIO(body[8:])
    digest = fh.read(32)
    (tlen,) = struct.unpack("<I", fh.read(4))
    config_text = fh.read(tlen).decode("utf-8")
    (count,) = struct.unpack("<I", fh.read(4))
    entries = {}
    for _ in range(count):
        name, arr = read_tensor(fh)
        entries[name] = arr
    return CheckpointData(digest, config_text, entries)


def save_checkpoint(model, optimizer_state: dict | None, path, config) -> Path:
    """Model parameters, running stats and optimiser velocities under one CRC."""
    entries = dict(model.state_dict())
    for name, v in (optimizer_state or {}).items():
        entries[f"optim.velocity.{name}"] = v
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(entries, config.to_text(), config.digest()))
    return path


def load_checkpoint(path, model=None, expected_config=None):
    """Returns (model, optimizer_state, config).

    Without ``model`` a fresh one is built from the stored config. With
    ``expected_config`` the stored digest must match.
    """
    from .config import parse_config
    from .model import HierarchicalModel

    data = parse_checkpoint(Path(path).read_bytes(), str(path))
    config = parse_config(data.config_text, f"{path}:config")
    if config.digest() != data.digest:
        raise ConfigMismatchError(f"{path}: stored config text does not match its digest")
    if expected_config is not None and expected_config.digest() != data.digest:
        raise ConfigMismatchError(f"{path}: checkpoint architecture digest differs from the requested config")
    if model is None:
        pipes = config.pipelines()
        model = HierarchicalModel(config.model_config(), [pipes.kinds(i) for i in range(1, 5)])
    state = {k: v for k, v in data.entries.items() if not k.startswith("optim.")}
    optim = {k[len("optim.velocity."):]: v for k, v in data.entries.items() if k.startswith("optim.velocity.")}
    model.load_state_dict(state)
    return model, optim, config
