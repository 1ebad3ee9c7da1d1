"""Finite-difference verification of every differentiable building block.

Each case builds a scalar function of a few small float64 tensors (at most 8
entries per axis) from a seed; ``run_suite`` checks them all over a range of
seeds, plus the composed training objective on a toy encoder.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import torch
import torch.nn.functional as F
from torch.func import functional_call

from .encoder import Attention, Block, EncoderConfig, Mlp, ProjectionHead, build_encoder, interpolate_pos_embed, patchify
from .numerics import (cross_entropy, entropy, gelu_tanh, grad_check, keyed_torch_generator, l2_normalize,
                       log_softmax_temp, softmax_temp)
from .ssl import LossWeights, TeacherState, dino_image_loss, ibot_patch_loss, koleo, total_loss

Case = Tuple[Callable[[Dict[str, torch.Tensor]], torch.Tensor], Dict[str, torch.Tensor]]

TOY = EncoderConfig(image_size=16, patch_size=4, embed_dim=8, depth=1, num_heads=2, mlp_ratio=2,
                    num_prototypes=4, head_hidden_dim=8, head_bottleneck_dim=4)


def _randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def _first(out):
    return out[0]


def _unit_scale_(module: torch.nn.Module, gen: torch.Generator, spread: float = 1.0) -> None:
    """Redraw parameters so activations stay O(1) through every layer.

    Probing at the tiny init scale of training would put L2 normalisations
    and softmaxes in high-curvature regions where an O(h^2) finite
    difference, not the analytic gradient, dominates the error.
    """
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                p.copy_(spread * _randn(gen, *p.shape) / p.shape[-1] ** 0.5)
            elif name.endswith("bias"):
                p.copy_(0.1 * spread * _randn(gen, *p.shape))
            else:
                p.copy_(1.0 + 0.1 * spread * _randn(gen, *p.shape))


def _module_case(module: torch.nn.Module, inputs: torch.Tensor, gen: torch.Generator, reduce=None) -> Case:
    module = module.double()
    _unit_scale_(module, gen)
    proj = torch.randn(1, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    params = {k: v.detach().clone() for k, v in module.named_parameters()}
    params["input"] = inputs

    def fn(p):
        x = p["input"]
        out = functional_call(module, {k: v for k, v in p.items() if k != "input"}, (x,))
        out = out if reduce is None else reduce(out)
        # a fixed random readout avoids symmetric cancellations of plain sums
        w = torch.sin(torch.arange(out.numel(), dtype=torch.float64) + proj).reshape(out.shape)
        return (out * w).mean()

    return fn, params


def op_cases(seed: int) -> Dict[str, Case]:
    g = keyed_torch_generator(seed, "gradcheck")
    cases: Dict[str, Case] = {}

    def readout(x):
        return torch.sin(torch.arange(x.numel(), dtype=torch.float64)).reshape(x.shape) / x.numel()

    cases["softmax_temp"] = (lambda p: (softmax_temp(p["z"], 0.5) * readout(p["z"])).sum(),
                             {"z": _randn(g, 3, 5)})
    cases["log_softmax_temp"] = (lambda p: (log_softmax_temp(p["z"], 0.1) * readout(p["z"])).sum(),
                                 {"z": 0.1 * _randn(g, 3, 5)})
    q0 = softmax_temp(_randn(g, 6), 1.0)
    cases["cross_entropy"] = (lambda p: cross_entropy(q0, softmax_temp(p["z"], 1.0)), {"z": _randn(g, 6)})
    cases["entropy"] = (lambda p: entropy(softmax_temp(p["z"], 1.0)), {"z": _randn(g, 7)})
    cases["l2_normalize"] = (lambda p: (l2_normalize(p["v"]) * readout(p["v"])).sum(), {"v": _randn(g, 4, 6)})
    cases["gelu_tanh"] = (lambda p: (gelu_tanh(p["x"]) * readout(p["x"])).sum(), {"x": _randn(g, 8)})
    cases["patchify"] = (lambda p: (patchify(p["img"], 2) ** 2 * readout(patchify(p["img"], 2))).sum(),
                         {"img": _randn(g, 4, 4)})
    cases["interpolate_pos_embed"] = (
        lambda p: (interpolate_pos_embed(p["pos"], 3) * readout(interpolate_pos_embed(p["pos"], 3))).sum(),
        {"pos": _randn(g, 5, 4)})
    cases["layer_norm"] = (
        lambda p: (F.layer_norm(p["x"], (6,), p["w"], p["b"], 1e-6) * readout(p["x"])).sum(),
        {"x": _randn(g, 3, 6), "w": 1 + 0.1 * _randn(g, 6), "b": 0.1 * _randn(g, 6)})
    cases["linear"] = (lambda p: (F.linear(p["x"], p["w"], p["b"]) ** 2).sum(),
                       {"x": _randn(g, 3, 5), "w": _randn(g, 4, 5), "b": _randn(g, 4)})

    cases["attention"] = _module_case(Attention(8, 2), _randn(g, 2, 5, 8), g, _first)
    cases["mlp"] = _module_case(Mlp(6, 8), _randn(g, 3, 6), g)
    cases["block"] = _module_case(Block(8, 2, 1), _randn(g, 1, 5, 8), g, _first)
    cases["projection_head"] = _module_case(ProjectionHead(6, 8, 4, 4), _randn(g, 3, 6), g)

    # logits at the scale of a freshly initialised head: z / tau has unit spread
    t_logits = [0.05 * _randn(g, 2, 4) for _ in range(2)]
    center = 0.01 * _randn(g, 4)
    cases["dino_image_loss"] = (
        lambda p: dino_image_loss(t_logits, [p["s0"], p["s1"], p["s2"]], center, 0.04, 0.1),
        {"s0": 0.1 * _randn(g, 2, 4), "s1": 0.1 * _randn(g, 2, 4), "s2": 0.1 * _randn(g, 2, 4)})
    tp = 0.05 * _randn(g, 2, 5, 4)
    masks = torch.zeros(2, 5, dtype=torch.bool)
    masks[0, 1] = masks[1, 3] = masks[1, 4] = True
    cases["ibot_patch_loss"] = (lambda p: ibot_patch_loss(tp, p["s"], masks, center, 0.04, 0.1),
                                {"s": 0.1 * _randn(g, 2, 5, 4)})
    cases["koleo"] = (lambda p: koleo(l2_normalize(p["e"])), {"e": _randn(g, 5, 4)})
    return cases


def total_loss_case(seed: int, cfg: EncoderConfig = TOY, batch: int = 2, n_local: int = 2) -> Case:
    """The composed objective as a function of the student parameters.

    The teacher is a frozen copy with perturbed weights so its targets differ
    from the student's predictions; centers are fixed non-zero vectors.
    """
    g = keyed_torch_generator(seed, "gradcheck-total")
    student = build_encoder(cfg, seed).double()
    _unit_scale_(student, g)
    student.renormalize_prototypes()
    ts = TeacherState(student, total_steps=10)
    with torch.no_grad():
        for p in ts.model.parameters():
            p.add_(0.1 * _randn(g, *p.shape) / (p.shape[-1] ** 0.5 if p.dim() >= 2 else 1.0))
    ts.model.renormalize_prototypes()
    ts.image_center = 0.01 * _randn(g, cfg.num_prototypes)
    ts.patch_center = 0.01 * _randn(g, cfg.num_prototypes)
    r = cfg.image_size
    tg = _randn(g, 2, batch, r, r)
    sg = tg + 0.1 * _randn(g, 2, batch, r, r)
    loc = _randn(g, n_local, batch, 2 * cfg.patch_size, 2 * cfg.patch_size)
    masks = torch.zeros(2, batch, cfg.num_patches, dtype=torch.bool)
    masks[0, 0, 1] = masks[1, 1, 0] = masks[1, 1, 2] = True
    params = {k: v.detach().clone() for k, v in student.named_parameters()}
    weights = LossWeights()

    def fn(p):
        swapped = {k: p[k] for k in params}

        def run(model):
            return total_loss(tg, sg, loc, masks, model, ts, step=3, weights=weights, update_centers=False)

        return _with_params(student, swapped, run).losses.total

    return fn, params


def _with_params(module: torch.nn.Module, params: Dict[str, torch.Tensor], run):
    """Call ``run(module)`` with its parameters temporarily replaced by ``params``."""
    saved = {}
    for name, value in params.items():
        owner, attr = _owner(module, name)
        saved[name] = owner._parameters[attr]
        owner._parameters[attr] = value
    try:
        return run(module)
    finally:
        for name, value in saved.items():
            owner, attr = _owner(module, name)
            owner._parameters[attr] = value


def _owner(module: torch.nn.Module, name: str):
    *path, attr = name.split(".")
    for part in path:
        module = getattr(module, part)
    return module, attr


def run_suite(seeds: int = 10, tol: float = 1e-4, total_entries: int = 0, refine: bool = True) -> Dict[str, object]:
    """Check every op and the composed loss for ``seeds`` seeds.

    ``total_entries`` > 0 probes a random subset of each student tensor in the
    composed case; 0 probes every entry. ``refine`` is passed to grad_check;
    the report counts how many entries needed the extrapolated estimate.
    """
    results: List[Dict[str, object]] = []

    def record(name, seed, rep):
        results.append({"case": name, "seed": seed, "max_rel_error": rep.max_error, "passed": rep.passed,
                        "refined_entries": sum(rep.refined.values())})

    for seed in range(seeds):
        for name, (fn, params) in op_cases(seed).items():
            record(name, seed, grad_check(fn, params, tol=tol, seed=seed, refine=refine))
        fn, params = total_loss_case(seed)
        record("total_loss", seed, grad_check(fn, params, tol=tol, max_entries=total_entries or None, seed=seed,
                                              refine=refine))
    return {"tol": tol, "seeds": seeds, "refine": refine,
            "max_rel_error": max(r["max_rel_error"] for r in results),
            "refined_entries": sum(r["refined_entries"] for r in results),
            "passed": all(r["passed"] for r in results), "cases": results}
