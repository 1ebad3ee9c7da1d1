"""Patch-similarity heatmaps and class-token attention maps.

Overlay colour ramp (fixed, for bit-exact regeneration): a field value t in
[0, 1] maps to RGB (255 t, 255 t, 0), i.e. black through pure yellow. The
output pixel is ``round(0.5 * gray + 0.5 * ramp)`` per channel, where
``gray`` replicates the base image luminance into all three channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import VisionTransformer
from .numerics import keyed_rng, l2_normalize
from .pnm import write_ppm

ALPHA = 0.5
RAMP = np.array([255.0, 255.0, 0.0])


@dataclass
class HeatmapOverlay:
    base: np.ndarray  # (S, S) in [0, 1]
    field: np.ndarray  # (g, g)
    lo: float = -1.0
    hi: float = 1.0


def patch_similarity_map(query: torch.Tensor, target: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Cosine similarity of one token against every token of a target grid.

    ``target`` is (N, D) or (g, g, D); the result is (g, g).
    """
    q = torch.as_tensor(query, dtype=torch.float32)
    t = torch.as_tensor(target, dtype=torch.float32)
    if t.dim() == 2:
        g = int(round(t.shape[0] ** 0.5))
        t = t.reshape(g, g, -1)
    if q.shape[-1] != t.shape[-1]:
        raise ValueError("query and target embedding widths differ")
    sim = l2_normalize(t, eps) @ l2_normalize(q, eps)
    return sim.clamp(-1.0, 1.0)


@torch.no_grad()
def cls_attention_maps(model: VisionTransformer, image: torch.Tensor, layer: int) -> torch.Tensor:
    """(H, g, g) attention of the class token over patches at ``layer``, renormalised."""
    if not 0 <= layer < model.cfg.depth:
        raise ValueError(f"layer {layer} outside [0, {model.cfg.depth})")
    out = model.forward_features(image.unsqueeze(0), want_attention=True)
    attn = out["attention"][0, layer, :, 0, 1:]  # (H, N)
    attn = attn / attn.sum(dim=-1, keepdim=True)
    g = image.shape[-1] // model.cfg.patch_size
    return attn.reshape(-1, g, g)


def upsample_field(field: np.ndarray, side: int) -> np.ndarray:
    t = torch.as_tensor(np.asarray(field, dtype=np.float32))[None, None]
    return F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)[0, 0].numpy()


def overlay_rgb(ov: HeatmapOverlay) -> np.ndarray:
    if not ov.hi > ov.lo:
        raise ValueError("rendering range must satisfy hi > lo")
    side = ov.base.shape[0]
    f = np.clip(np.asarray(ov.field, dtype=np.float64), ov.lo, ov.hi)
    f = upsample_field(f, side).astype(np.float64)
    t = np.clip((f - ov.lo) / (ov.hi - ov.lo), 0.0, 1.0)
    gray = np.clip(np.asarray(ov.base, dtype=np.float64), 0.0, 1.0)[..., None] * 255.0
    rgb = (1 - ALPHA) * gray + ALPHA * t[..., None] * RAMP
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def render_overlay(ov: HeatmapOverlay, path) -> None:
    write_ppm(path, overlay_rgb(ov))


# ---------------------------------------------------------------------------
# correspondence rate
# ---------------------------------------------------------------------------


def patch_coverage(mask: np.ndarray, patch: int) -> np.ndarray:
    """Fraction of each patch covered by ``mask``, flattened row-major over the grid."""
    s = mask.shape[0]
    g = s // patch
    return mask.reshape(g, patch, g, patch).mean(axis=(1, 3)).reshape(-1)


def correspondence_rate(patches: Sequence[np.ndarray], masks: Sequence[np.ndarray], subjects: Sequence[str],
                        patch: int, n_pairs: int = 100, seed: int = 0) -> Dict[str, object]:
    """How often a blob query token's best match in another image falls on that image's blob.

    The query is the token with the largest blob coverage in the source
    image; a hit means the argmax token of the target overlaps the target
    blob mask. Pairs use distinct subjects and images that both contain a
    blob.
    """
    idx = [i for i, m in enumerate(masks) if m.any()]
    if len(idx) < 2:
        raise ValueError("need at least two images with a blob")
    rng = keyed_rng(seed, "patchsim-pairs")
    hits, pairs = 0, []
    tries = 0
    while len(pairs) < n_pairs:
        tries += 1
        if tries > 100 * n_pairs:
            raise ValueError("could not draw enough subject-disjoint pairs")
        a, b = (int(v) for v in rng.choice(idx, size=2, replace=False))
        if subjects[a] == subjects[b]:
            continue
        cov_a = patch_coverage(masks[a], patch)
        q = int(np.argmax(cov_a))
        sim = patch_similarity_map(torch.as_tensor(patches[a][q]), torch.as_tensor(patches[b]))
        best = int(torch.argmax(sim.reshape(-1)))
        hit = bool(patch_coverage(masks[b], patch)[best] > 0)
        hits += hit
        pairs.append((a, b, q, best, hit))
    return {"kind": "patch_correspondence", "pairs": len(pairs), "hits": hits, "rate": hits / len(pairs)}
