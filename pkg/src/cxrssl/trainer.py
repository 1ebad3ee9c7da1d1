"""Pre-training loop: schedules, optimiser, EMA teacher, logging and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .augment import CropPolicy, IntensityStats, MaskPolicy, corpus_stats, make_batch
from .encoder import EncoderConfig, VisionTransformer, build_encoder
from .manifest import Manifest, load_manifest
from .numerics import (NonFiniteError, OptimState, Schedule, adamw_step, clip_grad_norm,
                       cosine_schedule, entropy, keyed_rng)
from .ssl import LossWeights, TeacherState, ema_update, total_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    manifest: str = ""
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    crop: CropPolicy = field(default_factory=CropPolicy)
    mask: MaskPolicy = field(default_factory=MaskPolicy)
    batch: int = 32
    epochs: int = 100
    steps: int = 0  # > 0 overrides the epochs-derived budget
    lr: float = 1e-3
    final_lr: float = 1e-6
    warmup_frac: float = 0.03
    weight_decay: float = 0.04
    clip: float = 3.0
    ema_start: float = 0.992
    ema_end: float = 1.0
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.04  # ramp to 0.07 collapses to uniform at desk scale
    teacher_temp_warmup_frac: float = 0.1
    student_temp: float = 0.1
    center_momentum: float = 0.9
    centering: bool = True
    w_dino: float = 1.0
    w_ibot: float = 1.0
    w_koleo: float = 0.1
    no_mim: bool = False
    seed: int = 0
    init: str = "random"
    init_checkpoint: str = ""
    subset: int = 0  # > 0 keeps only the first n manifest rows
    out_dir: str = "run"
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch < 2:
            raise ValueError("batch must be >= 2 (KoLeo needs pairs)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.steps < 0 or self.subset < 0 or self.checkpoint_every < 0:
            raise ValueError("steps, subset and checkpoint_every must be >= 0")
        if not 0 <= self.warmup_frac <= 1 or not 0 <= self.teacher_temp_warmup_frac <= 1:
            raise ValueError("warmup fractions must lie in [0, 1]")
        if self.lr < 0 or self.final_lr < 0 or self.weight_decay < 0 or self.clip <= 0:
            raise ValueError("lr, final_lr, weight_decay must be >= 0 and clip > 0")
        for name in ("ema_start", "ema_end", "center_momentum"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("teacher_temp_start", "teacher_temp_end", "student_temp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.init not in ("random", "checkpoint"):
            raise ValueError("init must be 'random' or 'checkpoint'")
        if self.init == "checkpoint" and not self.init_checkpoint:
            raise ValueError("init = checkpoint needs init_checkpoint")
        if self.crop.image_size != self.encoder.image_size or self.crop.patch_size != self.encoder.patch_size:
            raise ValueError("crop.image_size/patch_size must match encoder.image_size/patch_size")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_dino, 0.0 if self.no_mim else self.w_ibot, self.w_koleo)

    def total_steps(self, n_images: int) -> int:
        if self.steps:
            return self.steps
        return self.epochs * steps_per_epoch(n_images, self.batch)


def steps_per_epoch(n: int, batch: int) -> int:
    return int(math.ceil(n / batch))


def batch_indices(n: int, batch: int, seed: int, epoch: int, pos: int) -> List[int]:
    """Indices for batch ``pos`` of ``epoch``; the last batch wraps to stay full."""
    perm = keyed_rng(seed, "perm", epoch).permutation(n)
    idx = [int(perm[(pos * batch + j) % n]) for j in range(batch)]
    return idx


def collapse_metrics(probs: torch.Tensor) -> Dict[str, float]:
    """Mean entropy (nats) and KL to uniform of probability rows."""
    p = probs.reshape(-1, probs.shape[-1]).double()
    if bool((p < -1e-9).any()) or not torch.allclose(p.sum(-1), torch.ones(p.shape[0], dtype=p.dtype), atol=1e-5):
        raise ValueError("rows are not probability vectors")
    h = float(entropy(p).mean())
    return {"entropy": h, "kl_uniform": math.log(p.shape[-1]) - h}


@dataclass
class TrainState:
    student: VisionTransformer
    teacher: TeacherState
    optim: OptimState
    stats: IntensityStats
    step: int
    total_steps: int


def _no_decay(name: str) -> bool:
    return (name.endswith("bias") or "norm" in name or name in ("cls_token", "mask_token", "pos_embed")
            or name.endswith("prototypes.weight"))


def save_state(path, cfg: TrainConfig, st: TrainState) -> None:
    tensors = ckpt.model_tensors(st.student, "student.")
    tensors.update(ckpt.model_tensors(st.teacher.model, "teacher."))
    tensors["center.image"] = st.teacher.image_center
    tensors["center.patch"] = st.teacher.patch_center
    for k, v in st.optim.exp_avg.items():
        tensors[f"optim.exp_avg.{k}"] = v
    for k, v in st.optim.exp_avg_sq.items():
        tensors[f"optim.exp_avg_sq.{k}"] = v
    ckpt.save(path, ckpt.Checkpoint(cfg.encoder, st.stats, st.step, cfg.seed, tensors,
                                    {"total_steps": st.total_steps}))


def init_state(cfg: TrainConfig, manifest: Manifest, resume: Optional[str] = None) -> TrainState:
    total = cfg.total_steps(len(manifest))
    if resume:
        ck = ckpt.load(resume)
        student = ck.student()
        stats = ck.stats
        step = ck.step
    else:
        if cfg.init == "checkpoint":
            src = ckpt.load(cfg.init_checkpoint)
            student = build_encoder(cfg.encoder, cfg.seed)
            ckpt.load_into(student, {k[8:]: v for k, v in src.tensors.items() if k.startswith("student.")})
        else:
            student = build_encoder(cfg.encoder, cfg.seed)
        stats = corpus_stats([r.image for r in manifest.rows], loader=_pgm_loader)
        step = 0
    teacher = TeacherState(
        student, total, cfg.center_momentum, cfg.ema_start, cfg.ema_end,
        cfg.teacher_temp_start, cfg.teacher_temp_end,
        int(math.ceil(cfg.teacher_temp_warmup_frac * total)), cfg.student_temp, cfg.centering)
    optim = OptimState.for_params(dict(student.named_parameters()))
    optim.step = step
    if resume:
        ckpt.load_into(teacher.model, {k[8:]: v for k, v in ck.tensors.items() if k.startswith("teacher.")})
        teacher.image_center = ck.tensors["center.image"].clone()
        teacher.patch_center = ck.tensors["center.patch"].clone()
        for k in optim.exp_avg:
            optim.exp_avg[k] = ck.tensors[f"optim.exp_avg.{k}"].clone()
            optim.exp_avg_sq[k] = ck.tensors[f"optim.exp_avg_sq.{k}"].clone()
    return TrainState(student, teacher, optim, stats, step, total)


def _pgm_loader(path):
    from .pnm import load_image
    return load_image(path)


def train_step(cfg: TrainConfig, st: TrainState, images: List[torch.Tensor], lr_sched: Schedule) -> dict:
    """One optimisation step; mutates ``st`` and returns the log record."""
    s = st.step
    n = len(images)
    spe = steps_per_epoch(n, cfg.batch)
    epoch, pos = divmod(s, spe)
    idx = batch_indices(n, cfg.batch, cfg.seed, epoch, pos)
    vb = make_batch([images[i] for i in idx], idx, cfg.crop, cfg.mask, st.stats, cfg.seed, epoch)

    lr = cosine_schedule(lr_sched, s)
    out = total_loss(vb.teacher_globals, vb.student_globals, vb.locals, vb.masks, st.student,
                     st.teacher, s, cfg.loss_weights())
    lb = out.losses
    record = {"step": s + 1, "lr": lr, "ema_momentum": st.teacher.momentum(s),
              "teacher_temp": st.teacher.teacher_temp(s), **lb.as_floats(),
              "teacher_entropy": lb.teacher_entropy}
    if not all(math.isfinite(v) for v in record.values()):
        raise NonFiniteError(json.dumps({"error": "non_finite_loss", **record}))

    params = dict(st.student.named_parameters())
    for p in params.values():
        p.grad = None
    lb.total.backward()
    grads = {k: p.grad for k, p in params.items()}
    record["grad_norm"] = clip_grad_norm(grads, cfg.clip)
    adamw_step(st.optim, params, grads, lr, cfg.weight_decay,
               no_decay=[k for k in params if _no_decay(k)])
    st.student.renormalize_prototypes()
    ema_update(st.teacher.model, st.student, st.teacher.momentum(s))
    st.teacher.model.renormalize_prototypes()
    st.step = s + 1
    return record


def pretrain(cfg: TrainConfig, resume: Optional[str] = None, stop_at: Optional[int] = None,
             callback: Optional[Callable[[int, VisionTransformer], bool]] = None,
             log_path: Optional[str] = None) -> TrainState:
    """Run (or resume) pre-training; writes ``final.ckpt`` and ``train_log.jsonl`` under ``out_dir``.

    ``stop_at`` halts early at that step (schedules still span the full
    budget), which is how interrupted runs are simulated. ``callback`` is
    called after each step and may return True to stop (early stopping).
    """
    torch.manual_seed(cfg.seed)
    manifest = load_manifest(cfg.manifest)
    if cfg.subset:
        manifest = manifest.subset(cfg.subset)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    st = init_state(cfg, manifest, resume)
    images = manifest.load_images(cfg.encoder.image_size)
    warmup = int(round(cfg.warmup_frac * st.total_steps))
    lr_sched = Schedule(cfg.lr, cfg.final_lr, warmup, st.total_steps)
    end = st.total_steps if stop_at is None else min(stop_at, st.total_steps)
    log_file = Path(log_path) if log_path else out / "train_log.jsonl"
    t0 = time.time()
    with open(log_file, "a", encoding="ascii") as fh:
        while st.step < end:
            try:
                rec = train_step(cfg, st, images, lr_sched)
            except NonFiniteError as exc:
                fh.write(str(exc) + "\n")
                raise
            rec["wall_time"] = time.time() - t0
            if cfg.log_every and (rec["step"] % cfg.log_every == 0 or st.step == end):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
            if cfg.checkpoint_every and st.step % cfg.checkpoint_every == 0:
                save_state(out / f"step{st.step:07d}.ckpt", cfg, st)
            if callback is not None and callback(st.step, st.student):
                log.info("early stop at step %d", st.step)
                break
    save_state(out / "final.ckpt", cfg, st)
    return st
