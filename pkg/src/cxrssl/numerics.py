"""Tensor-level primitives shared by the encoder, the objectives and the probes.

``torch.Tensor`` is the dense array type throughout; this module adds the
handful of operations whose exact semantics matter (temperature softmax,
guarded cross-entropy, decoupled AdamW, warmup+cosine schedule), a keyed
counter-based RNG, and a central-difference gradient checker.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional

import numpy as np
import torch

LOG_FLOOR = 1e-12


class NonFiniteError(FloatingPointError):
    """Raised when a public operation would hand out NaN or Inf."""


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# keyed randomness
# ---------------------------------------------------------------------------


def _tag_word(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def keyed_rng(seed: int, tag: str, epoch: int = 0, index: int = 0) -> np.random.Generator:
    """Philox generator keyed by ``(seed, tag, epoch, index)``.

    Two calls with the same key return generators producing identical
    streams, regardless of the order in which keys are visited. That is what
    makes worker count irrelevant to the data pipeline.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _tag_word(tag), int(epoch), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def keyed_torch_generator(seed: int, tag: str, epoch: int = 0, index: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(keyed_rng(seed, tag, epoch, index).integers(0, 2**63 - 1)))
    return g


# ---------------------------------------------------------------------------
# differentiable building blocks
# ---------------------------------------------------------------------------


def softmax_temp(logits: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax of ``logits / tau`` along the last axis (max-subtracted)."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if logits.numel() == 0 or logits.shape[-1] == 0:
        raise ValueError("softmax over an empty vector")
    z = logits / tau
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax_temp(logits: torch.Tensor, tau: float) -> torch.Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return torch.log_softmax(logits / tau, dim=-1)


def cross_entropy(p: torch.Tensor, q: torch.Tensor, eps: float = LOG_FLOOR) -> torch.Tensor:
    """H(p, q) = -sum p log q over the last axis.

    ``0 * log 0`` counts as 0 and ``q`` is floored at ``eps`` before the log.
    """
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    return -(p * torch.log(q.clamp_min(eps))).sum(dim=-1)


def entropy(p: torch.Tensor, eps: float = LOG_FLOOR) -> torch.Tensor:
    return -(p * torch.log(p.clamp_min(eps))).sum(dim=-1)


def l2_normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """``v / max(||v||, eps)`` along the last axis."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return v / v.norm(dim=-1, keepdim=True).clamp_min(eps)


def gelu_tanh(x: torch.Tensor) -> torch.Tensor:
    # 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    return torch.nn.functional.gelu(x, approximate="tanh")


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, torch.Tensor], **kw) -> "OptimState":
        st = cls(**kw)
        for name, p in params.items():
            st.exp_avg[name] = torch.zeros_like(p)
            st.exp_avg_sq[name] = torch.zeros_like(p)
        return st


@torch.no_grad()
def adamw_step(
    state: OptimState,
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, Optional[torch.Tensor]],
    lr: float,
    wd: float,
    no_decay: Iterable[str] = (),
) -> None:
    """One in-place AdamW update of ``params``.

    Weight decay is decoupled: ``p -= lr * wd * p`` happens independently of
    the moment-based step. A missing gradient is treated as zero.
    """
    if lr < 0 or wd < 0:
        raise ValueError("lr and wd must be non-negative")
    skip = set(no_decay)
    for name, p in params.items():
        g = grads.get(name)
        if g is not None:
            if g.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(g.shape)} vs {tuple(p.shape)}")
            check_finite(g, f"gradient of {name}")
        if name not in state.exp_avg:
            raise KeyError(f"optimizer state has no slot for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if wd and name not in skip:
            p.mul_(1.0 - lr * wd)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


@torch.no_grad()
def clip_grad_norm(grads: Mapping[str, Optional[torch.Tensor]], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    present = [g for g in grads.values() if g is not None]
    if not present:
        return 0.0
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in present))
    if not math.isfinite(total):
        raise NonFiniteError("non-finite gradient norm")
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in present:
            g.mul_(scale)
    return total


@dataclass(frozen=True)
class Schedule:
    base: float
    final: float
    warmup: int
    total: int

    def __post_init__(self):
        if self.warmup < 0 or self.total < 0 or self.warmup > self.total:
            raise ValueError(f"need 0 <= warmup <= total, got {self.warmup}, {self.total}")


def cosine_schedule(sched: Schedule, step: int) -> float:
    """Linear ramp 0 -> base over the warmup, then cosine from base to final."""
    if step < 0 or step > sched.total:
        raise ValueError(f"step {step} outside [0, {sched.total}]")
    if step < sched.warmup:
        return sched.base * step / sched.warmup
    span = sched.total - sched.warmup
    progress = 0.0 if span == 0 else (step - sched.warmup) / span
    return sched.final + 0.5 * (sched.base - sched.final) * (1.0 + math.cos(math.pi * progress))


def linear_then_constant(start: float, end: float, ramp: int, step: int) -> float:
    if ramp <= 0 or step >= ramp:
        return end
    return start + (end - start) * step / ramp


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    rel_errors: Dict[str, float]
    tol: float
    refined: Dict[str, int] = field(default_factory=dict)  # entries re-estimated by extrapolation

    @property
    def max_error(self) -> float:
        return max(self.rel_errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.rel_errors.values())


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    fn: Callable[[Dict[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
    refine: bool = False,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` maps a dict of float64 tensors to a scalar. The step per entry is
    ``1e-4 * max(1, |theta|)``; the per-parameter figure is the largest
    ``|a - n| / max(|a|, |n|, 1e-8)`` over the checked entries. With
    ``max_entries`` set, a seeded random subset of each tensor is probed.

    ``refine=True`` re-estimates only the entries that miss ``tol`` with the
    Richardson combination ``(4 D(h/2) - D(h)) / 3`` of two central
    differences, which removes the O(h^2) truncation term that dominates on
    entries whose gradient is small next to the local curvature.
    """
    theta = {k: v.detach().to(torch.float64).clone() for k, v in params.items()}
    leaves = {k: v.clone().requires_grad_(True) for k, v in theta.items()}
    out = fn(leaves)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    grads = torch.autograd.grad(out, list(leaves.values()), allow_unused=True)
    analytic = {}
    for (k, p), g in zip(leaves.items(), grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        check_finite(g, f"analytic gradient of {k}")
        analytic[k] = g

    def central(k: str, i: int, x0: float, h: float) -> float:
        probe = {kk: vv.clone() for kk, vv in theta.items()}
        probe[k].reshape(-1)[i] = x0 + h
        f_plus = float(fn(probe))
        probe[k].reshape(-1)[i] = x0 - h
        f_minus = float(fn(probe))
        return (f_plus - f_minus) / (2 * h)

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    refined: Dict[str, int] = {}
    with torch.no_grad():
        for k, base in theta.items():
            flat = base.reshape(-1)
            idx: List[int] = list(range(flat.numel()))
            if max_entries is not None and len(idx) > max_entries:
                idx = sorted(rng.choice(len(idx), size=max_entries, replace=False).tolist())
            worst, n_ref = 0.0, 0
            for i in idx:
                x0 = float(flat[i])
                h = 1e-4 * max(1.0, abs(x0))
                ana = float(analytic[k].reshape(-1)[i])
                num = central(k, i, x0, h)
                err = _rel_err(ana, num)
                if refine and err > tol:
                    num = (4.0 * central(k, i, x0, h / 2) - num) / 3.0
                    err = _rel_err(ana, num)
                    n_ref += 1
                worst = max(worst, err)
            errors[k] = worst
            refined[k] = n_ref
    return GradCheckReport(errors, tol, refined)
