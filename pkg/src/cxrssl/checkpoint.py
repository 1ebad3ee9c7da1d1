"""RDWB checkpoint files.

Layout (all integers little-endian)::

    b"RDWB"  u32 version
    u32 header length, header as UTF-8 JSON (sorted keys, compact)
    u32 tensor count, then per tensor:
        u16 name length, UTF-8 name, u8 ndim, u32 per dim,
        float32 payload in row-major order

The header carries the encoder config, intensity statistics, step and seed.
Tensor names are ``student.<param>``, ``teacher.<param>``, ``center.image``,
``center.patch``, ``optim.exp_avg.<param>`` and ``optim.exp_avg_sq.<param>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

from .augment import IntensityStats
from .encoder import EncoderConfig, VisionTransformer, build_encoder

MAGIC = b"RDWB"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    encoder: EncoderConfig
    stats: Optional[IntensityStats]
    step: int
    seed: int
    tensors: Dict[str, torch.Tensor]
    extra: Dict[str, object] = field(default_factory=dict)

    def student(self) -> VisionTransformer:
        return self._model("student.")

    def teacher(self) -> VisionTransformer:
        return self._model("teacher.")

    def _model(self, prefix: str) -> VisionTransformer:
        model = build_encoder(self.encoder, seed=0)
        state = {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}
        if not state:
            raise CheckpointError(f"checkpoint has no {prefix.rstrip('.')} weights")
        load_into(model, state)
        return model


def load_into(model: torch.nn.Module, state: Dict[str, torch.Tensor]) -> None:
    params = dict(model.named_parameters())
    if set(state) != set(params):
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        raise CheckpointError(f"parameter inventory mismatch; missing={missing[:3]} unknown={extra[:3]}")
    with torch.no_grad():
        for k, p in params.items():
            if tuple(state[k].shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {k}")
            p.copy_(state[k])


def model_tensors(model: torch.nn.Module, prefix: str) -> Dict[str, torch.Tensor]:
    return {prefix + k: v.detach() for k, v in model.named_parameters()}


def _allowed(cfg: EncoderConfig) -> set:
    names = set(dict(build_encoder(cfg).named_parameters()))
    out = {"center.image", "center.patch"}
    for n in names:
        out |= {f"student.{n}", f"teacher.{n}", f"optim.exp_avg.{n}", f"optim.exp_avg_sq.{n}"}
    return out


def encode_header(ck: Checkpoint) -> bytes:
    header = {
        "encoder": ck.encoder.to_dict(),
        "stats": None if ck.stats is None else {"mean": ck.stats.mean, "std": ck.stats.std},
        "step": int(ck.step),
        "seed": int(ck.seed),
        "extra": ck.extra,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ck: Checkpoint) -> bytes:
    allowed = _allowed(ck.encoder)
    parts = [MAGIC, struct.pack("<I", VERSION)]
    hdr = encode_header(ck)
    parts += [struct.pack("<I", len(hdr)), hdr, struct.pack("<I", len(ck.tensors))]
    for name in sorted(ck.tensors):
        if name not in allowed:
            raise CheckpointError(f"unknown tensor name {name!r}")
        t = ck.tensors[name].detach().to(torch.float32).contiguous()
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.dim()))
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.numpy().astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not an RDWB checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    off = 12
    header = json.loads(buf[off:off + hlen].decode("utf-8"))
    off += hlen
    cfg = EncoderConfig(**header["encoder"])
    stats = None if header["stats"] is None else IntensityStats(**header["stats"])
    allowed = _allowed(cfg)
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        if name not in allowed:
            raise CheckpointError(f"unknown tensor name {name!r}")
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(buf):
        raise CheckpointError("trailing bytes after tensor table")
    return Checkpoint(cfg, stats, header["step"], header["seed"], tensors, header.get("extra", {}))


def save(path, ck: Checkpoint) -> None:
    data = to_bytes(ck)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
