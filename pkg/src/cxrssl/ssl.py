"""Self-distillation objectives, teacher centering and EMA maintenance."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import torch

from .encoder import VisionTransformer
from .numerics import (Schedule, cosine_schedule, cross_entropy, entropy, l2_normalize,
                       linear_then_constant, log_softmax_temp, softmax_temp)


@dataclass
class LossWeights:
    dino: float = 1.0
    ibot: float = 1.0
    koleo: float = 0.1


@dataclass
class LossBreakdown:
    dino: torch.Tensor
    ibot: torch.Tensor
    koleo: torch.Tensor
    total: torch.Tensor
    teacher_entropy: float = float("nan")

    def as_floats(self) -> Dict[str, float]:
        return {"dino_loss": float(self.dino.detach()), "ibot_loss": float(self.ibot.detach()),
                "koleo_loss": float(self.koleo.detach()), "total_loss": float(self.total.detach())}


class TeacherState:
    """EMA teacher plus centers and the momentum / temperature schedules."""

    def __init__(self, student: VisionTransformer, total_steps: int, center_momentum: float = 0.9,
                 ema_start: float = 0.992, ema_end: float = 1.0, teacher_temp_start: float = 0.04,
                 teacher_temp_end: float = 0.04, teacher_temp_warmup: Optional[int] = None,
                 student_temp: float = 0.1, centering: bool = True):
        self.model = copy.deepcopy(student)
        for p in self.model.parameters():
            p.requires_grad_(False)
        k = student.cfg.num_prototypes
        self.image_center = torch.zeros(k)
        self.patch_center = torch.zeros(k)
        if not 0.0 <= center_momentum <= 1.0:
            raise ValueError("center momentum must lie in [0, 1]")
        self.center_momentum = center_momentum
        self.ema = Schedule(ema_start, ema_end, 0, total_steps)
        self.teacher_temp_start = teacher_temp_start
        self.teacher_temp_end = teacher_temp_end
        self.teacher_temp_warmup = (int(math.ceil(0.1 * total_steps))
                                    if teacher_temp_warmup is None else teacher_temp_warmup)
        self.student_temp = student_temp
        self.centering = centering

    def momentum(self, step: int) -> float:
        return cosine_schedule(self.ema, step)

    def teacher_temp(self, step: int) -> float:
        return linear_then_constant(self.teacher_temp_start, self.teacher_temp_end,
                                    self.teacher_temp_warmup, step)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def teacher_probs(logits: torch.Tensor, center: Optional[torch.Tensor], tau: float) -> torch.Tensor:
    z = logits.detach()
    if center is not None:
        z = z - center
    return softmax_temp(z, tau)


def dino_image_loss(teacher_logits: Sequence[torch.Tensor], student_logits: Sequence[torch.Tensor],
                    center: Optional[torch.Tensor], teacher_temp: float,
                    student_temp: float) -> torch.Tensor:
    """Mean cross-entropy over ordered (teacher global g, student view v != g) pairs.

    Student views are ordered globals first, so view ``g`` of the student is
    the same crop the teacher saw as global ``g``. Each element is (B, K).
    """
    n_glob = len(teacher_logits)
    if n_glob < 2:
        raise ValueError("at least two teacher global views are required")
    if len(student_logits) < n_glob:
        raise ValueError("student views must include every global view")
    t_probs = [teacher_probs(t, center, teacher_temp) for t in teacher_logits]
    s_logp = [log_softmax_temp(s, student_temp) for s in student_logits]
    total, pairs = 0.0, 0
    for g, p in enumerate(t_probs):
        for v, lq in enumerate(s_logp):
            if v == g:
                continue
            total = total + (-(p * lq).sum(dim=-1)).mean()
            pairs += 1
    return total / pairs


def ibot_patch_loss(teacher_patch_logits: torch.Tensor, student_patch_logits: torch.Tensor,
                    masks: torch.Tensor, center: Optional[torch.Tensor], teacher_temp: float,
                    student_temp: float) -> torch.Tensor:
    """Mean cross-entropy over masked patch positions.

    Logits are (..., N, K) aligned with ``masks`` (..., N); zero when nothing
    is masked.
    """
    if teacher_patch_logits.shape != student_patch_logits.shape:
        raise ValueError("teacher and student patch grids do not align")
    if masks.shape != teacher_patch_logits.shape[:-1]:
        raise ValueError("mask shape does not match the patch grid")
    if not bool(masks.any()):
        return student_patch_logits.sum() * 0.0
    t = teacher_probs(teacher_patch_logits[masks], center, teacher_temp)
    lq = log_softmax_temp(student_patch_logits[masks], student_temp)
    return (-(t * lq).sum(dim=-1)).mean()


def koleo(embeddings: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """-(1/n) sum_i log(max(d_i, eps)), d_i the distance to i's nearest neighbour."""
    n = embeddings.shape[0]
    if n < 2:
        raise ValueError("koleo needs at least two embeddings")
    x = embeddings
    with torch.no_grad():
        d2 = torch.cdist(x, x)
        d2.fill_diagonal_(float("inf"))
        nn_idx = d2.argmin(dim=1)
    diff = x - x[nn_idx]
    # clamp before sqrt keeps the gradient finite for coincident points
    sq = (diff * diff).sum(dim=-1)
    d = torch.sqrt(sq.clamp_min(eps * eps))
    return -torch.log(d).mean()


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    """``m * center + (1 - m) * mean(teacher_logits)`` over all leading axes."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("center momentum must lie in [0, 1]")
    batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    return momentum * center + (1.0 - momentum) * batch_mean


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, m: float) -> None:
    """In place: theta_t <- m * theta_t + (1 - m) * theta_s."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("EMA momentum must lie in [0, 1]")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise KeyError("teacher and student parameter inventories differ")
    for name, pt in t_params.items():
        ps = s_params[name]
        if pt.shape != ps.shape:
            raise ValueError(f"shape mismatch for {name}")
        pt.mul_(m).add_(ps.detach(), alpha=1.0 - m)


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


@dataclass
class StepOutputs:
    losses: LossBreakdown
    teacher_image_logits: torch.Tensor  # (G, B, K)
    teacher_patch_logits: torch.Tensor  # (M, K) at masked positions
    teacher_image_probs: torch.Tensor


def total_loss(teacher_globals: torch.Tensor, student_globals: torch.Tensor, local_views: torch.Tensor,
               masks: torch.Tensor, student: VisionTransformer, teacher: TeacherState, step: int,
               weights: LossWeights = LossWeights(), update_centers: bool = True) -> StepOutputs:
    """Forward both branches and combine the three objectives.

    Shapes: globals (G, B, R, R), locals (n, B, l, l), masks (G, B, N). The
    student sees masked globals and unmasked locals; the teacher sees
    unmasked globals and contributes no gradient. Centers are updated after
    the losses have consumed their previous values.
    """
    n_glob, b = teacher_globals.shape[:2]
    tau_t = teacher.teacher_temp(step)
    tau_s = teacher.student_temp
    use_ibot = weights.ibot != 0.0
    m_flat = masks.reshape(n_glob * b, -1)

    with torch.no_grad():
        t_out = teacher.model.forward_features(teacher_globals.reshape(n_glob * b, *teacher_globals.shape[2:]))
        t_img = teacher.model.dino_head(t_out["cls"]).reshape(n_glob, b, -1)
        if use_ibot and bool(m_flat.any()):
            t_patch = teacher.model.ibot_head(t_out["patches"][m_flat])
        else:
            t_patch = t_img.new_zeros((0, t_img.shape[-1]))

    s_glob = student.forward_features(student_globals.reshape(n_glob * b, *student_globals.shape[2:]),
                                      m_flat if use_ibot else None)
    s_logits = list(student.dino_head(s_glob["cls"]).reshape(n_glob, b, -1))
    if local_views.shape[0]:
        n_loc = local_views.shape[0]
        s_loc = student.forward_features(local_views.reshape(n_loc * b, *local_views.shape[2:]))
        s_logits += list(student.dino_head(s_loc["cls"]).reshape(n_loc, b, -1))

    img_center = teacher.image_center if teacher.centering else None
    patch_center = teacher.patch_center if teacher.centering else None
    l_dino = dino_image_loss(list(t_img), s_logits, img_center, tau_t, tau_s)

    if use_ibot and t_patch.shape[0]:
        s_patch = student.ibot_head(s_glob["patches"][m_flat])
        l_ibot = ibot_patch_loss(t_patch, s_patch, torch.ones(t_patch.shape[0], dtype=torch.bool),
                                 patch_center, tau_t, tau_s)
    else:
        l_ibot = s_glob["cls"].sum() * 0.0

    cls_first = l2_normalize(s_glob["cls"][:b])
    l_koleo = koleo(cls_first) if b >= 2 else s_glob["cls"].sum() * 0.0

    total = weights.dino * l_dino + weights.ibot * l_ibot + weights.koleo * l_koleo
    t_probs = teacher_probs(t_img, img_center, tau_t)
    losses = LossBreakdown(l_dino, l_ibot, l_koleo, total,
                           teacher_entropy=float(entropy(t_probs).mean()))
    if update_centers:
        teacher.image_center = update_center(teacher.image_center, t_img, teacher.center_momentum)
        if t_patch.shape[0]:
            teacher.patch_center = update_center(teacher.patch_center, t_patch, teacher.center_momentum)
    return StepOutputs(losses, t_img, t_patch, t_probs)
