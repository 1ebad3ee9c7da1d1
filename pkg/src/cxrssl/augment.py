"""Multi-crop views, patch masks and intensity normalisation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import keyed_rng

log = logging.getLogger(__name__)

# Crop fractions come from absolute ranges at 518 px: globals U(259, 518),
# locals U(104, 259) resampled to 196.
PAPER_SIDE = 518.0


@dataclass
class CropPolicy:
    image_size: int = 64
    patch_size: int = 8
    global_scale: tuple = (0.5, 1.0)
    local_scale: tuple = (104 / 518, 259 / 518)
    local_out_frac: float = 196 / 518
    global_count: int = 2
    local_count: int = 4
    teacher_blur: tuple = (0.1, 1.0)
    student_blur: tuple = (0.1, 2.0)
    flip_prob: float = 0.5
    jitter: float = 0.05

    def __post_init__(self):
        self.global_scale = tuple(float(v) for v in self.global_scale)
        self.local_scale = tuple(float(v) for v in self.local_scale)
        self.teacher_blur = tuple(float(v) for v in self.teacher_blur)
        self.student_blur = tuple(float(v) for v in self.student_blur)
        for name in ("global_scale", "local_scale"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi <= 1):
                raise ValueError(f"crop.{name} must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        for name in ("teacher_blur", "student_blur"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"crop.{name} must be an ordered positive range")
        if not self.teacher_blur[1] < self.student_blur[1]:
            raise ValueError("teacher blur ceiling must be below the student's")
        if self.global_count < 2:
            raise ValueError("crop.global_count must be >= 2")
        if self.local_count < 0:
            raise ValueError("crop.local_count must be >= 0")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("crop.flip_prob must lie in [0, 1]")
        if self.jitter < 0:
            raise ValueError("crop.jitter must be >= 0")
        if self.local_side < self.patch_size:
            raise ValueError("local output side smaller than one patch")

    @property
    def local_side(self) -> int:
        """round(R * 196/518) snapped to the nearest multiple of the patch size."""
        raw = self.image_size * self.local_out_frac
        return max(self.patch_size, int(round(raw / self.patch_size)) * self.patch_size)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskPolicy:
    masked_fraction: float = 0.5
    ratio: tuple = (0.1, 0.5)

    def __post_init__(self):
        self.ratio = tuple(float(v) for v in self.ratio)
        if not 0 <= self.masked_fraction <= 1:
            raise ValueError("mask.masked_fraction must lie in [0, 1]")
        lo, hi = self.ratio
        if not 0 <= lo <= hi <= 1:
            raise ValueError("mask.ratio must be an ordered range within [0, 1]")


@dataclass
class IntensityStats:
    mean: float
    std: float
    clamped: bool = False

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"intensity std must be positive, got {self.std}")


@dataclass
class CropSet:
    teacher_globals: torch.Tensor  # (G, R, R)
    student_globals: torch.Tensor  # (G, R, R) same geometry, student-branch blur
    locals: torch.Tensor  # (n, l, l)


# ---------------------------------------------------------------------------
# pixel operations
# ---------------------------------------------------------------------------


def resize(img: torch.Tensor, side: int) -> torch.Tensor:
    """Bilinear resample of a square (S, S) image to (side, side)."""
    if img.shape[-1] == side:
        return img
    antialias = side < img.shape[-1]
    return F.interpolate(img[None, None], size=(side, side), mode="bilinear",
                         align_corners=False, antialias=antialias)[0, 0]


def gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=img.dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    k = k / k.sum()
    t = F.pad(img[None, None], (radius, radius, radius, radius), mode="replicate")
    t = F.conv2d(t, k.view(1, 1, 1, -1))
    t = F.conv2d(t, k.view(1, 1, -1, 1))
    return t[0, 0]


def _crop_side(rng: np.random.Generator, scale: Sequence[float], base: int, limit: int) -> int:
    side = int(round(rng.uniform(scale[0] * base, scale[1] * base)))
    return min(max(side, 1), limit)


def sample_multicrop(image: torch.Tensor, policy: CropPolicy, rng: np.random.Generator) -> CropSet:
    """Global and local square crops of one (S, S) image with per-branch blur."""
    s = image.shape[-1]
    r = policy.image_size
    if s < r:
        raise ValueError(f"image side {s} smaller than base resolution {r}")

    def geometry(scale, out_side):
        side = _crop_side(rng, scale, r, s)
        y = int(rng.integers(0, s - side + 1))
        x = int(rng.integers(0, s - side + 1))
        crop = resize(image[y:y + side, x:x + side], out_side)
        if rng.random() < policy.flip_prob:
            crop = torch.flip(crop, dims=(-1,))
        c, b = rng.uniform(-policy.jitter, policy.jitter, size=2) if policy.jitter else (0.0, 0.0)
        return crop * (1.0 + float(c)) + float(b)

    t_views, s_views, l_views = [], [], []
    for _ in range(policy.global_count):
        base = geometry(policy.global_scale, r)
        t_views.append(gaussian_blur(base, float(rng.uniform(*policy.teacher_blur))))
        s_views.append(gaussian_blur(base, float(rng.uniform(*policy.student_blur))))
    ls = policy.local_side
    for _ in range(policy.local_count):
        base = geometry(policy.local_scale, ls)
        l_views.append(gaussian_blur(base, float(rng.uniform(*policy.student_blur))))
    locals_ = torch.stack(l_views) if l_views else image.new_zeros((0, ls, ls))
    return CropSet(torch.stack(t_views), torch.stack(s_views), locals_)


def sample_mask(n_tokens: int, policy: MaskPolicy, rng: np.random.Generator,
                ratio: Optional[float] = None) -> np.ndarray:
    """Boolean mask over ``n_tokens`` positions.

    With probability ``1 - masked_fraction`` nothing is masked; otherwise
    ``floor(r * n)`` distinct positions are chosen uniformly.
    """
    if n_tokens <= 0:
        raise ValueError("n_tokens must be positive")
    out = np.zeros(n_tokens, dtype=bool)
    if ratio is None:
        if rng.random() >= policy.masked_fraction:
            return out
        ratio = float(rng.uniform(*policy.ratio))
    k = int(math.floor(ratio * n_tokens))
    if k:
        out[rng.choice(n_tokens, size=k, replace=False)] = True
    return out


def normalize(image, stats: IntensityStats):
    if not stats.std > 0:
        raise ValueError("intensity std must be positive")
    return (image - stats.mean) / stats.std


def corpus_stats(images: Iterable, loader=None, eps: float = 1e-6) -> IntensityStats:
    """Pixel mean/std over a corpus in one streaming pass.

    ``images`` yields arrays, or paths when ``loader`` is given. Per-image
    moments are merged with the parallel Welford (Chan) update.
    """
    n, mean, m2 = 0, 0.0, 0.0
    for item in images:
        a = np.asarray(loader(item) if loader is not None else item, dtype=np.float64).ravel()
        if a.size == 0:
            continue
        nb, mb = a.size, float(a.mean())
        m2b = float(((a - mb) ** 2).sum())
        delta = mb - mean
        tot = n + nb
        mean += delta * nb / tot
        m2 += m2b + delta * delta * n * nb / tot
        n = tot
    if n == 0:
        raise ValueError("corpus_stats needs at least one non-empty image")
    std = math.sqrt(m2 / n)
    if std < eps:
        log.error("corpus has (near-)zero intensity spread; std clamped to %g", eps)
        return IntensityStats(mean, eps, clamped=True)
    return IntensityStats(mean, std)


# ---------------------------------------------------------------------------
# batch assembly
# ---------------------------------------------------------------------------


@dataclass
class ViewBatch:
    teacher_globals: torch.Tensor  # (G, B, R, R)
    student_globals: torch.Tensor  # (G, B, R, R)
    locals: torch.Tensor  # (n, B, l, l)
    masks: torch.Tensor  # (G, B, N) bool, student globals only


def make_batch(images: List[torch.Tensor], indices: Sequence[int], crop: CropPolicy,
               mask: MaskPolicy, stats: IntensityStats, seed: int, epoch: int) -> ViewBatch:
    """Views for a batch; randomness keyed per (seed, purpose, epoch, sample index)."""
    sets = []
    masks = []
    n_tok = (crop.image_size // crop.patch_size) ** 2
    for img, idx in zip(images, indices):
        sets.append(sample_multicrop(img, crop, keyed_rng(seed, "crop", epoch, idx)))
        mrng = keyed_rng(seed, "mask", epoch, idx)
        masks.append(np.stack([sample_mask(n_tok, mask, mrng) for _ in range(crop.global_count)]))
    tg = torch.stack([c.teacher_globals for c in sets], dim=1)
    sg = torch.stack([c.student_globals for c in sets], dim=1)
    lo = torch.stack([c.locals for c in sets], dim=1)
    mk = torch.from_numpy(np.stack(masks, axis=1))
    return ViewBatch(normalize(tg, stats), normalize(sg, stats), normalize(lo, stats), mk)
