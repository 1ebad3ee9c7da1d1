"""Small grayscale vision transformer with image- and patch-level prototype heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import gelu_tanh, l2_normalize


@dataclass
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    num_prototypes: int = 256
    head_hidden_dim: int = 256
    head_bottleneck_dim: int = 64
    share_heads: bool = False

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "depth", "num_heads",
                     "mlp_ratio", "num_prototypes", "head_hidden_dim", "head_bottleneck_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"encoder.{name} must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def to_dict(self) -> dict:
        return asdict(self)


def backbone_param_count(image_size: int, patch_size: int, embed_dim: int, depth: int,
                         mlp_ratio: int = 4, in_chans: int = 1) -> int:
    """Closed-form parameter count of the backbone (no projection heads)."""
    d = embed_dim
    n = (image_size // patch_size) ** 2
    patch = in_chans * patch_size * patch_size * d + d
    tokens = d + d + (n + 1) * d  # class token, mask token, positions
    hidden = mlp_ratio * d
    block = (
        2 * 2 * d  # two layer norms
        + 3 * d * d  # qkv, no bias
        + d * d + d  # attention output
        + d * hidden + hidden + hidden * d + d  # mlp
    )
    return patch + tokens + depth * block + 2 * d


def head_param_count(cfg: EncoderConfig) -> int:
    d, h, b, k = cfg.embed_dim, cfg.head_hidden_dim, cfg.head_bottleneck_dim, cfg.num_prototypes
    one = d * h + h + h * h + h + h * b + b + b * k
    return one if cfg.share_heads else 2 * one


def param_count(cfg: EncoderConfig) -> int:
    return backbone_param_count(cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.depth,
                                cfg.mlp_ratio) + head_param_count(cfg)


# ---------------------------------------------------------------------------
# tokenisation and positions
# ---------------------------------------------------------------------------


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(..., S, S) -> (..., (S/P)^2, P*P), tokens row-major over the grid."""
    s1, s2 = images.shape[-2:]
    if s1 != s2:
        raise ValueError(f"expected square images, got {s1}x{s2}")
    if s1 % patch:
        raise ValueError(f"image side {s1} not divisible by patch size {patch}")
    g = s1 // patch
    lead = images.shape[:-2]
    x = images.reshape(*lead, g, patch, g, patch)
    x = x.transpose(-3, -2)
    return x.reshape(*lead, g * g, patch * patch)


def interpolate_pos_embed(pos: torch.Tensor, target_grid: int) -> torch.Tensor:
    """Bilinearly resample the patch part of ``pos`` ((1 + g*g, D)) to ``target_grid``.

    The class position (row 0) is copied unchanged; same-size calls return
    the input untouched.
    """
    n = pos.shape[0] - 1
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ValueError(f"positional table of {n} patches is not a square grid")
    if target_grid < 1:
        raise ValueError("target grid must be >= 1")
    if g == target_grid:
        return pos
    cls_pos, grid = pos[:1], pos[1:]
    d = grid.shape[1]
    field = grid.T.reshape(1, d, g, g)
    if g == 1:
        out = field.expand(1, d, target_grid, target_grid)
    else:
        out = F.interpolate(field, size=(target_grid, target_grid), mode="bilinear", align_corners=False)
    out = out.reshape(d, target_grid * target_grid).T
    return torch.cat([cls_pos, out], dim=0)


# ---------------------------------------------------------------------------
# transformer
# ---------------------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        # no qkv bias: a key bias is inert under the row softmax (zero gradient)
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, want_attention: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), (attn if want_attention else None)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(gelu_tanh(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio * dim)

    def forward(self, x, want_attention: bool = False):
        a, attn = self.attn(self.norm1(x), want_attention)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, attn


class ProjectionHead(nn.Module):
    """3-layer GELU MLP, normalised bottleneck, unit-row prototype matrix."""

    def __init__(self, dim: int, hidden: int, bottleneck: int, prototypes: int):
        super().__init__()
        self.mlp = nn.ModuleList([
            nn.Linear(dim, hidden),
            nn.Linear(hidden, hidden),
            nn.Linear(hidden, bottleneck),
        ])
        self.prototypes = nn.Linear(bottleneck, prototypes, bias=False)

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        x = gelu_tanh(self.mlp[0](x))
        x = gelu_tanh(self.mlp[1](x))
        return l2_normalize(self.mlp[2](x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.prototypes(self.bottleneck(x))

    @torch.no_grad()
    def renormalize_prototypes(self) -> None:
        w = self.prototypes.weight
        w.copy_(l2_normalize(w))


class VisionTransformer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_size**2, d)
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches + 1, d))
        self.blocks = nn.ModuleList([Block(d, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(d, eps=1e-6)
        args = (d, cfg.head_hidden_dim, cfg.head_bottleneck_dim, cfg.num_prototypes)
        self.dino_head = ProjectionHead(*args)
        self.ibot_head = self.dino_head if cfg.share_heads else ProjectionHead(*args)

    def forward_features(self, images: torch.Tensor, masks: Optional[torch.Tensor] = None,
                         want_attention: bool = False, layer: Optional[int] = None) -> Dict[str, torch.Tensor]:
        """Encode a batch of (B, S, S) images.

        Returns ``cls`` (B, D), ``patches`` (B, N, D) and optionally
        ``attention`` (B, L, H, N+1, N+1). ``layer`` stops after that block
        (0-based) and applies the final norm to its tokens.
        """
        p = self.cfg.patch_size
        tokens = self.patch_embed(patchify(images, p))
        b, n, d = tokens.shape
        if masks is not None:
            if masks.shape != (b, n):
                raise ValueError(f"mask shape {tuple(masks.shape)} does not match {(b, n)} tokens")
            tokens = torch.where(masks.unsqueeze(-1), self.mask_token.to(tokens.dtype).expand_as(tokens), tokens)
        pos = interpolate_pos_embed(self.pos_embed, images.shape[-1] // p)
        x = torch.cat([self.cls_token.expand(b, 1, d), tokens], dim=1) + pos
        maps = []
        blocks = self.blocks
        if layer is not None:
            if not 0 <= layer < len(self.blocks):
                raise ValueError(f"layer {layer} outside [0, {len(self.blocks)})")
            blocks = self.blocks[:layer + 1]
        for blk in blocks:
            x, attn = blk(x, want_attention)
            if want_attention:
                maps.append(attn)
        x = self.norm(x)
        out = {"cls": x[:, 0], "patches": x[:, 1:]}
        if want_attention:
            out["attention"] = torch.stack(maps, dim=1)
        return out

    @torch.no_grad()
    def renormalize_prototypes(self) -> None:
        self.dino_head.renormalize_prototypes()
        if self.ibot_head is not self.dino_head:
            self.ibot_head.renormalize_prototypes()


def encode(model: VisionTransformer, image: torch.Tensor, mask: Optional[torch.Tensor] = None,
           want_attention: bool = False) -> Dict[str, torch.Tensor]:
    """Single-image convenience wrapper around ``forward_features``."""
    out = model.forward_features(image.unsqueeze(0), None if mask is None else mask.unsqueeze(0),
                                 want_attention)
    return {k: v[0] for k, v in out.items()}


def head_forward(head: ProjectionHead, embedding: torch.Tensor) -> torch.Tensor:
    return head(embedding)


def _trunc_normal_(t: torch.Tensor, std: float, gen: torch.Generator) -> None:
    # resample outside two standard deviations
    with torch.no_grad():
        t.normal_(0.0, std, generator=gen)
        while True:
            bad = t.abs() > 2 * std
            if not bool(bad.any()):
                break
            t[bad] = torch.empty(int(bad.sum())).normal_(0.0, std, generator=gen)


def build_encoder(cfg: EncoderConfig, seed: int = 0) -> VisionTransformer:
    """Randomly initialised encoder: truncated normal (0.02) weights, zero biases/tokens."""
    from .numerics import keyed_torch_generator

    model = VisionTransformer(cfg)
    gen = keyed_torch_generator(seed, "init")
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or name in ("cls_token", "mask_token"):
                p.zero_()
            elif ".norm" in name or name.startswith("norm."):
                p.fill_(1.0)
            else:
                _trunc_normal_(p, 0.02, gen)
        model.renormalize_prototypes()
    return model


def named_tensors(model: nn.Module) -> Dict[str, torch.Tensor]:
    """Parameter inventory keyed by dotted path (shared heads appear once)."""
    return dict(model.named_parameters())


def grid_shape(model: VisionTransformer, side: int) -> Tuple[int, int]:
    g = side // model.cfg.patch_size
    return g, g
