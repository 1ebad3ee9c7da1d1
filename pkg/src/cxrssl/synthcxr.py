"""Procedural grayscale pseudo-radiographs with findings, masks and subjects.

Each scene is a bright elliptical torso holding two dark lung fields crossed
by periodic rib bands. Three optional findings can be rendered:

* ``blob``          a bright disc inside one lung ("opacity")
* ``tube``          a thin bright curve entering from the top of the image
* ``pneumothorax``  a darkened, rib-free rim along the upper outer lung edge

Every structure is rasterised from an explicit support set, so each mask is
exactly where the renderer touched pixels.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import keyed_rng
from .pnm import quantize, write_pgm

FINDINGS = ("blob", "tube", "pneumothorax")
STRUCTURES = ("lungs", "ribs") + FINDINGS
SCALE_CLASSES = ("small", "medium", "large")
SCALE_EDGES = (0.9, 1.1)
_SCALE_RANGES = ((0.7, 0.9), (0.9, 1.1), (1.1, 1.3))
_SCALE_MARGIN = 0.04


@dataclass
class SceneLatents:
    subject_id: str
    body_scale: float = 1.0
    lung_sep: float = 0.17
    lung_axes: Tuple[float, float] = (0.12, 0.24)
    lung_cy: float = 0.52
    body_axes: Tuple[float, float] = (0.34, 0.56)
    rib_period: float = 0.08
    rib_phase: float = 0.0
    rib_curve: float = 1.5
    tissue: float = 0.62
    lung_level: float = 0.22
    rib_contrast: float = 0.16
    heart: Tuple[float, float, float] = (0.04, 0.09, 0.12)  # x offset, half-width, half-height
    texture: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # amplitude, freq, angle, phase
    blob: Optional[Tuple[int, float, float, float]] = None  # lung side, u, v, radius
    tube: Optional[Tuple[float, float, float]] = None  # entry x, bend, depth
    pneumothorax: Optional[Tuple[int, float]] = None  # lung side, rim thickness
    noise: float = 0.02
    noise_seed: int = 0
    brightness: float = 0.0
    contrast: float = 1.0

    @property
    def scale_class(self) -> str:
        return scale_class(self.body_scale)


def scale_class(body_scale: float) -> str:
    if body_scale < SCALE_EDGES[0]:
        return "small"
    if body_scale < SCALE_EDGES[1]:
        return "medium"
    return "large"


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _grid(side: int):
    c = (np.arange(side, dtype=np.float64) + 0.5) / side
    return np.meshgrid(c, c, indexing="xy")  # x, y in [0, 1]


def _lung_geometry(lat: SceneLatents, side_index: int):
    s = lat.body_scale
    sign = -1.0 if side_index == 0 else 1.0
    cx = 0.5 + sign * lat.lung_sep * s
    return cx, lat.lung_cy, lat.lung_axes[0] * s, lat.lung_axes[1] * s


def _check_bounds(lat: SceneLatents) -> None:
    s = lat.body_scale
    bx, by = lat.body_axes[0] * s, lat.body_axes[1]
    if bx >= 0.5:
        raise ValueError("body ellipse exceeds image width")
    for i in (0, 1):
        cx, cy, ax, ay = _lung_geometry(lat, i)
        if cx - ax <= 0 or cx + ax >= 1 or cy - ay <= 0 or cy + ay >= 1:
            raise ValueError("lung ellipse outside image bounds")
    if lat.blob is not None:
        _, u, v, r = lat.blob
        if not (u * u + v * v <= 1.0 and 0 < r < 0.5):
            raise ValueError("blob geometry outside its lung")


def _polyline_distance(x, y, pts: np.ndarray) -> np.ndarray:
    best = np.full(x.shape, np.inf)
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        dx, dy = x1 - x0, y1 - y0
        t = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy + 1e-18), 0.0, 1.0)
        d = np.hypot(x - (x0 + t * dx), y - (y0 + t * dy))
        np.minimum(best, d, out=best)
    return best


def render(lat: SceneLatents, side: int) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Rasterise ``lat`` at ``side`` x ``side``; returns image in [0, 1] and masks."""
    if side < 32:
        raise ValueError("side must be >= 32")
    _check_bounds(lat)
    x, y = _grid(side)
    s = lat.body_scale

    body = ((x - 0.5) / (lat.body_axes[0] * s)) ** 2 + ((y - 0.58) / lat.body_axes[1]) ** 2 <= 1.0
    img = np.where(body, lat.tissue, 0.06)
    hx, hw, hh = lat.heart
    heart = ((x - 0.5 - hx * s) / (hw * s)) ** 2 + ((y - lat.lung_cy - 0.12 * s) / (hh * s)) ** 2 <= 1.0
    img = np.where(heart & body, lat.tissue + 0.12, img)

    lungs = np.zeros((side, side), dtype=bool)
    polar = []
    for i in (0, 1):
        cx, cy, ax, ay = _lung_geometry(lat, i)
        u, v = (x - cx) / ax, (y - cy) / ay
        rho = np.hypot(u, v)
        inside = rho <= 1.0
        lungs |= inside
        polar.append((u, v, rho, inside))
    amp, freq, ang, ph = lat.texture
    tex = amp * np.sin(2 * math.pi * freq * (x * math.cos(ang) + y * math.sin(ang)) + ph)
    img = np.where(lungs, lat.lung_level + 0.06 * (y - 0.3) + tex, img)

    # ribs: curved periodic bands restricted to the lung fields
    bend = lat.rib_curve * (x - 0.5) ** 2
    phase = np.cos(2 * math.pi * (y + bend - lat.rib_phase) / lat.rib_period)
    ribs = lungs & (phase > 0.45)

    masks = {k: np.zeros((side, side), dtype=bool) for k in STRUCTURES}
    masks["lungs"] = lungs

    if lat.pneumothorax is not None:
        li, thick = lat.pneumothorax
        u, v, rho, inside = polar[li]
        lateral = u * (-1.0 if li == 0 else 1.0)
        masks["pneumothorax"] = inside & (rho >= 1.0 - thick) & (lateral > 0.0) & (v < 0.3)
        ribs &= ~masks["pneumothorax"]

    masks["ribs"] = ribs
    img = img + lat.rib_contrast * ribs
    if masks["pneumothorax"].any():
        img = np.where(masks["pneumothorax"], max(0.03, lat.lung_level - 0.12), img)

    if lat.blob is not None:
        li, bu, bv, r = lat.blob
        cx, cy, ax, ay = _lung_geometry(lat, li)
        bx, by = cx + bu * ax, cy + bv * ay
        d = np.hypot(x - bx, y - by)
        blob = d <= r
        masks["blob"] = blob
        img = np.where(blob, img + 0.34 * (1.0 - 0.5 * (d / r) ** 2), img)

    if lat.tube is not None:
        ex, bend_t, depth = lat.tube
        t = np.linspace(0.0, 1.0, 48)
        p0 = np.array([ex, 0.0])
        p2 = np.array([0.5 + (ex - 0.5) * 0.3, depth])
        p1 = np.array([0.5 * (p0[0] + p2[0]) + bend_t, 0.5 * depth])
        pts = ((1 - t) ** 2)[:, None] * p0 + (2 * (1 - t) * t)[:, None] * p1 + (t**2)[:, None] * p2
        tube = _polyline_distance(x, y, pts) <= 0.75 / side
        masks["tube"] = tube
        img = np.where(tube, img + 0.38, img)

    img = lat.contrast * img + lat.brightness
    if lat.noise > 0:
        img = img + np.random.default_rng(lat.noise_seed).normal(0.0, lat.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0), masks


def measure_body_width(img: np.ndarray, threshold: float = 0.3) -> float:
    """Widest horizontal run of torso-bright pixels, as a fraction of the side.

    Rows are smoothed over a 3-pixel window before thresholding so pixel
    noise cannot break runs.
    """
    side = img.shape[1]
    best = 0
    for row in img:
        sm = np.convolve(row, np.ones(3) / 3, mode="same")
        idx = np.flatnonzero(sm > threshold)
        if idx.size:
            best = max(best, int(idx[-1] - idx[0] + 1))
    return best / side


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------


@dataclass
class GenSpec:
    count: int = 2000
    prevalence: Dict[str, float] = field(default_factory=lambda: {"blob": 0.4, "tube": 0.3, "pneumothorax": 0.3})
    seed: int = 0
    side: int = 64
    split: Tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        for k, p in self.prevalence.items():
            if k not in FINDINGS:
                raise ValueError(f"unknown finding {k!r}")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"prevalence of {k} must lie in [0, 1]")


@dataclass
class SampleRecord:
    image: str
    subject: str
    labels: List[str]
    masks: Dict[str, str]
    attributes: Dict[str, str]
    split: str


def _subject_anatomy(seed: int, subj: int) -> dict:
    rng = keyed_rng(seed, "subject", 0, subj)
    cls = int(rng.integers(0, 3))
    lo, hi = _SCALE_RANGES[cls]
    return dict(
        body_scale=float(rng.uniform(lo + _SCALE_MARGIN, hi - _SCALE_MARGIN)),
        lung_sep=float(rng.uniform(0.16, 0.18)),
        lung_axes=(float(rng.uniform(0.11, 0.13)), float(rng.uniform(0.22, 0.26))),
        lung_cy=float(rng.uniform(0.5, 0.54)),
        rib_period=float(rng.uniform(0.06, 0.11)),
        rib_phase=float(rng.uniform(0.0, 1.0)),
        rib_curve=float(rng.uniform(0.5, 3.0)),
        tissue=float(rng.uniform(0.45, 0.78)),
        lung_level=float(rng.uniform(0.14, 0.32)),
        rib_contrast=float(rng.uniform(0.06, 0.22)),
        heart=(float(rng.uniform(0.0, 0.08)), float(rng.uniform(0.06, 0.12)), float(rng.uniform(0.08, 0.14))),
        texture=(float(rng.uniform(0.0, 0.06)), float(rng.uniform(4.0, 12.0)),
                 float(rng.uniform(0.0, math.pi)), float(rng.uniform(0.0, 2 * math.pi))),
    )


def _assign_findings(spec: GenSpec) -> Dict[str, np.ndarray]:
    out = {}
    for k in FINDINGS:
        p = spec.prevalence.get(k, 0.0)
        flags = np.zeros(spec.count, dtype=bool)
        n_pos = int(round(p * spec.count))
        if n_pos:
            flags[keyed_rng(spec.seed, f"prevalence:{k}").permutation(spec.count)[:n_pos]] = True
        out[k] = flags
    return out


def _image_latents(seed: int, idx: int, subj_name: str, anatomy: dict, flags: Dict[str, bool]) -> SceneLatents:
    rng = keyed_rng(seed, "image", 0, idx)
    a = dict(anatomy)
    a["body_scale"] = float(np.clip(a["body_scale"] + rng.uniform(-0.005, 0.005), 0.7, 1.3))
    a["lung_cy"] = a["lung_cy"] + float(rng.uniform(-0.01, 0.01))
    lat = SceneLatents(subject_id=subj_name, **a)
    if flags["blob"]:
        ang, rad = rng.uniform(0, 2 * math.pi), math.sqrt(rng.uniform(0, 0.35))
        lat.blob = (int(rng.integers(0, 2)), rad * math.cos(ang), rad * math.sin(ang),
                    float(rng.uniform(0.07, 0.11)))
    if flags["tube"]:
        lat.tube = (float(rng.uniform(0.4, 0.6)), float(rng.uniform(-0.08, 0.08)), float(rng.uniform(0.45, 0.7)))
    if flags["pneumothorax"]:
        lat.pneumothorax = (int(rng.integers(0, 2)), float(rng.uniform(0.3, 0.45)))
    lat.noise = float(rng.uniform(0.01, 0.03))
    lat.noise_seed = int(rng.integers(0, 2**31 - 1))
    lat.brightness = float(rng.uniform(-0.05, 0.05))
    lat.contrast = float(rng.uniform(0.9, 1.1))
    return lat


def plan(spec: GenSpec) -> List[SceneLatents]:
    """Latents for every image; subjects contribute 1-3 images each."""
    flags = _assign_findings(spec)
    out: List[SceneLatents] = []
    subj = 0
    while len(out) < spec.count:
        n_img = int(keyed_rng(spec.seed, "subject-size", 0, subj).integers(1, 4))
        anatomy = _subject_anatomy(spec.seed, subj)
        name = f"s{subj:05d}"
        for _ in range(n_img):
            if len(out) >= spec.count:
                break
            i = len(out)
            out.append(_image_latents(spec.seed, i, name, anatomy, {k: bool(v[i]) for k, v in flags.items()}))
        subj += 1
    return out


def subject_split(seed: int, subject: str, fractions: Sequence[float] = (0.7, 0.15, 0.15)) -> str:
    u = keyed_rng(seed, f"split:{subject}").random()
    if u < fractions[0]:
        return "train"
    if u < fractions[0] + fractions[1]:
        return "val"
    return "test"


MANIFEST_FIELDS = ("image", "subject", "labels", "masks", "attributes", "split")


def generate(spec: GenSpec, out_dir, masks: bool = True) -> Path:
    """Write images, masks and ``manifest.csv`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        if masks:
            (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    rows = []
    for i, lat in enumerate(plan(spec)):
        img, mk = render(lat, spec.side)
        name = f"{i:05d}"
        img_rel = f"images/{name}.pgm"
        write_pgm(out / img_rel, quantize(img))
        mask_rel = {}
        if masks:
            for k in STRUCTURES:
                rel = f"masks/{name}_{k}.pgm"
                write_pgm(out / rel, mk[k].astype(np.uint8) * 255)
                mask_rel[k] = rel
        labels = [k for k in FINDINGS if mk[k].any()]
        rows.append(SampleRecord(
            image=img_rel, subject=lat.subject_id, labels=labels, masks=mask_rel,
            attributes={"body_scale": lat.scale_class, "body_scale_value": f"{lat.body_scale:.4f}"},
            split=subject_split(spec.seed, lat.subject_id, spec.split),
        ))
    manifest = out / "manifest.csv"
    write_manifest_rows(manifest, rows)
    return manifest


def write_manifest_rows(path, rows: Sequence[SampleRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([
                r.image, r.subject, ";".join(r.labels),
                ";".join(f"{k}={v}" for k, v in r.masks.items()),
                ";".join(f"{k}={v}" for k, v in r.attributes.items()),
                r.split,
            ])
