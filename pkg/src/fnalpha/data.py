"""Synthetic segmentation data: soft-edged ellipse blobs on a textured
background, with exactly-binary masks equal to the blob support.

A dataset directory holds ``images.fnt1`` and ``masks.fnt1`` (single
tensors "images"/"masks" of shape (count, 1, H, W), float32 in [0, 1])
plus ``meta.json`` echoing the generation spec and the train/val split
indices.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import fnt1

__all__ = ["SynthSpec", "synth_arrays", "gen_synth", "Dataset", "load_dataset",
           "GenerationError"]

FG_FRACTION_RANGE = (0.02, 0.6)
MAX_RETRIES = 60


class GenerationError(RuntimeError):
    """The foreground-fraction constraint could not be satisfied."""


@dataclass
class SynthSpec:
    count: int
    height: int = 64
    width: int = 64
    blob_count: tuple = (1, 2)
    blob_radius: tuple = (7, 14)
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.blob_count = tuple(self.blob_count)
        self.blob_radius = tuple(self.blob_radius)
        if self.count < 1 or self.height < 8 or self.width < 8:
            raise ValueError("count must be >= 1 and sizes >= 8")
        if self.blob_count[0] < 1 or self.blob_count[0] > self.blob_count[1]:
            raise ValueError("invalid blob count range")
        if self.blob_radius[0] < 1 or self.blob_radius[0] > self.blob_radius[1]:
            raise ValueError("invalid blob radius range")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _box_blur(a: np.ndarray, k: int) -> np.ndarray:
    """Separable k*k mean filter with edge padding."""
    r = k // 2
    p = np.pad(a, r, mode="edge")
    c = np.cumsum(p, axis=0)
    a = (c[k - 1:] - np.concatenate([np.zeros((1, c.shape[1])), c[:-k]], axis=0)) / k
    c = np.cumsum(a, axis=1)
    return (c[:, k - 1:] - np.concatenate([np.zeros((c.shape[0], 1)), c[:, :-k]], axis=1)) / k


def _background(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    coarse = rng.random((h, w))
    tex = _box_blur(_box_blur(coarse, 9), 5)
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-9)
    return 0.08 + 0.3 * tex + rng.normal(0.0, sigma, (h, w))


def _draw_blobs(rng: np.random.Generator, spec: SynthSpec):
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    shading = np.zeros((h, w))
    n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    for _ in range(n_blobs):
        a = rng.uniform(*spec.blob_radius)
        b = rng.uniform(*spec.blob_radius)
        theta = rng.uniform(0.0, np.pi)
        cy = rng.uniform(0.15 * h, 0.85 * h)
        cx = rng.uniform(0.15 * w, 0.85 * w)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        q = u * u + v * v
        mask |= q <= 1.0
        amp = rng.uniform(0.45, 0.75)
        shading += amp * np.clip((1.2 - q) / 0.4, 0.0, 1.0)  # soft edge across q=1
    return mask, shading


def synth_arrays(spec: SynthSpec):
    """Deterministic (images, masks) float32 arrays of shape (count,1,H,W)."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    h, w = spec.height, spec.width
    images = np.empty((spec.count, 1, h, w), dtype=np.float32)
    masks = np.empty((spec.count, 1, h, w), dtype=np.float32)
    lo, hi = FG_FRACTION_RANGE
    for i in range(spec.count):
        for attempt in range(MAX_RETRIES + 1):
            mask, shading = _draw_blobs(rng, spec)
            frac = mask.mean()
            if lo <= frac <= hi:
                break
        else:
            raise GenerationError(
                f"image {i}: foreground fraction outside [{lo}, {hi}] "
                f"after {MAX_RETRIES} retries")
        img = np.clip(_background(rng, h, w, spec.noise_sigma) + shading, 0.0, 1.0)
        images[i, 0] = img.astype(np.float32)
        masks[i, 0] = mask.astype(np.float32)
    return images, masks


def _split_indices(count: int, val_fraction: float, rng: np.random.Generator):
    n_val = int(round(count * val_fraction))
    order = rng.permutation(count)
    val = sorted(int(i) for i in order[:n_val])
    train = sorted(int(i) for i in order[n_val:])
    return train, val


def gen_synth(spec: SynthSpec, out_dir, val_fraction: float = 0.25) -> Path:
    """Generate and write a dataset directory; byte-identical per seed."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    images, masks = synth_arrays(spec)
    train, val = _split_indices(
        spec.count, val_fraction,
        np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1,))))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmp_paths = []
    try:
        for name, payload in (("images.fnt1", {"images": images}),
                              ("masks.fnt1", {"masks": masks})):
            tmp = out / (name + ".tmp")
            fnt1.write_tensors(tmp, payload)
            tmp_paths.append((tmp, out / name))
        meta = {"spec": asdict(spec), "split": {"train": train, "val": val}}
        tmp = out / "meta.json.tmp"
        tmp.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", "utf-8")
        tmp_paths.append((tmp, out / "meta.json"))
        for tmp, final in tmp_paths:
            tmp.replace(final)
    except BaseException:
        for tmp, _ in tmp_paths:
            tmp.unlink(missing_ok=True)
        raise
    return out


@dataclass
class Dataset:
    images: np.ndarray  # float64 (count, 1, H, W)
    masks: np.ndarray
    train_indices: list
    val_indices: list
    meta: dict

    @property
    def count(self) -> int:
        return self.images.shape[0]

    def subset(self, indices):
        return self.images[indices], self.masks[indices]


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    images = fnt1.read_tensors(d / "images.fnt1")["images"].astype(np.float64)
    masks = fnt1.read_tensors(d / "masks.fnt1")["masks"].astype(np.float64)
    meta = json.loads((d / "meta.json").read_text("utf-8"))
    if images.shape != masks.shape:
        raise ValueError("images and masks shapes differ")
    split = meta.get("split", {})
    train = list(split.get("train", range(images.shape[0])))
    val = list(split.get("val", []))
    return Dataset(images, masks, train, val, meta)
