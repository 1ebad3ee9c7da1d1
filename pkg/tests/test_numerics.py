import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrssl.numerics import (NonFiniteError, OptimState, Schedule, adamw_step, clip_grad_norm, cosine_schedule,
                             cross_entropy, entropy, grad_check, keyed_rng, l2_normalize, linear_then_constant,
                             softmax_temp)

T = torch.tensor


# --- softmax_temp -----------------------------------------------------------


def test_softmax_uniform_pair():
    assert torch.allclose(softmax_temp(T([0.0, 0.0]), 0.1), T([0.5, 0.5]))


def test_softmax_closed_form():
    out = softmax_temp(T([math.log(4.0), 0.0], dtype=torch.float64), 1.0)
    assert torch.allclose(out, T([0.8, 0.2], dtype=torch.float64), atol=1e-12)


def test_softmax_sharp():
    # e^10 / (e^10 + 1)
    assert softmax_temp(T([1.0, 0.0]), 0.1)[0] > 0.9999


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_bad_temperature(tau):
    with pytest.raises(ValueError):
        softmax_temp(T([1.0, 2.0]), tau)


def test_softmax_rejects_empty():
    with pytest.raises(ValueError):
        softmax_temp(torch.zeros(0), 1.0)


def test_softmax_large_logits_stay_finite():
    out = softmax_temp(T([1e4, 0.0, -1e4]), 0.04)
    assert torch.isfinite(out).all() and abs(float(out.sum()) - 1) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100), st.floats(0.02, 5.0))
def test_softmax_shift_invariant_and_normalised(xs, c, tau):
    z = T(xs, dtype=torch.float32)
    a, b = softmax_temp(z, tau), softmax_temp(z + c, tau)
    assert torch.allclose(a, b, atol=1e-6)
    assert (a >= 0).all() and abs(float(a.sum()) - 1) < 1e-6


# --- cross entropy / entropy -----------------------------------------------


def test_cross_entropy_examples():
    ln2 = math.log(2)
    assert float(cross_entropy(T([1.0, 0.0]), T([1.0, 0.0]))) == pytest.approx(0.0, abs=1e-12)
    assert float(cross_entropy(T([0.5, 0.5]), T([0.5, 0.5]))) == pytest.approx(ln2, abs=1e-6)
    assert float(cross_entropy(T([1.0, 0.0]), T([0.5, 0.5]))) == pytest.approx(ln2, abs=1e-6)


def test_cross_entropy_length_mismatch():
    with pytest.raises(ValueError):
        cross_entropy(T([0.5, 0.5]), T([1.0, 0.0, 0.0]))


def test_cross_entropy_exact_zero_is_floored():
    # q has an exact zero where p has mass: floored log, not inf
    v = float(cross_entropy(T([0.0, 1.0], dtype=torch.float64), T([1.0, 0.0], dtype=torch.float64)))
    assert v == pytest.approx(-math.log(1e-12))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_cross_entropy_bounded_below_by_entropy(seed, k):
    g = torch.Generator().manual_seed(seed)
    p = torch.softmax(torch.randn(k, generator=g, dtype=torch.float64), -1)
    q = torch.softmax(torch.randn(k, generator=g, dtype=torch.float64), -1)
    assert float(cross_entropy(p, q)) >= float(entropy(p)) - 1e-12


# --- l2_normalize ---------------------------------------------------------------


def test_l2_normalize_examples():
    assert torch.allclose(l2_normalize(T([3.0, 4.0])), T([0.6, 0.8]))
    u = T([0.0, 1.0, 0.0])
    assert torch.equal(l2_normalize(u), u)
    assert torch.equal(l2_normalize(T([0.0, 0.0]), 1e-6), T([0.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6))
def test_l2_normalize_norm_at_most_one(xs):
    v = T(xs, dtype=torch.float64)
    n = float(l2_normalize(v, 1e-6).norm())
    assert n <= 1 + 1e-12
    if float(v.norm()) >= 1e-6:
        assert n == pytest.approx(1.0, abs=1e-12)


# --- adamw ---------------------------------------------------------------------


def _one(p, g, lr, wd, state=None):
    params = {"w": T([p], dtype=torch.float64)}
    grads = {"w": T([g], dtype=torch.float64)}
    state = state or OptimState.for_params(params)
    adamw_step(state, params, grads, lr, wd)
    return float(params["w"]), state


def test_adamw_first_step_closed_form():
    # m_hat = 1, v_hat = 1 -> step lr * 1 / (1 + eps)
    p, st_ = _one(0.0, 1.0, 0.1, 0.0)
    assert abs(p - (-0.1)) < 1e-6
    assert st_.step == 1


def test_adamw_pure_decoupled_decay():
    p, _ = _one(1.0, 0.0, 0.1, 0.5)
    assert p == pytest.approx(0.95, abs=1e-12)


def test_adamw_lr_zero_fixed_point_but_moments_move():
    p, st_ = _one(2.5, 0.7, 0.0, 0.3)
    assert p == 2.5
    assert float(st_.exp_avg["w"]) == pytest.approx(0.07)
    assert float(st_.exp_avg_sq["w"]) == pytest.approx(0.001 * 0.49)


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
def test_adamw_step_independent_of_magnitude_without_decay(scale):
    p, _ = _one(scale, 0.3, 0.01, 0.0)
    assert p - scale == pytest.approx(-0.01, rel=1e-6)


def test_adamw_multi_step_matches_torch():
    g = torch.Generator().manual_seed(0)
    w0 = torch.randn(5, 3, generator=g, dtype=torch.float64)
    ours = {"w": w0.clone()}
    ref = torch.nn.Parameter(w0.clone())
    opt = torch.optim.AdamW([ref], lr=0.01, weight_decay=0.1, eps=1e-8)
    st_ = OptimState.for_params(ours)
    for _ in range(5):
        grad = torch.randn(5, 3, generator=g, dtype=torch.float64)
        adamw_step(st_, ours, {"w": grad}, 0.01, 0.1)
        ref.grad = grad.clone()
        opt.step()
    assert torch.allclose(ours["w"], ref.detach(), atol=1e-12)


def test_adamw_errors():
    params = {"w": torch.zeros(3)}
    st_ = OptimState.for_params(params)
    with pytest.raises(ValueError):
        adamw_step(st_, params, {"w": torch.zeros(4)}, 0.1, 0.0)
    with pytest.raises(NonFiniteError):
        adamw_step(st_, params, {"w": T([0.0, float("nan"), 0.0])}, 0.1, 0.0)


def test_adamw_no_decay_names_skip_decay():
    params = {"w": T([1.0]), "b": T([1.0])}
    st_ = OptimState.for_params(params)
    adamw_step(st_, params, {"w": T([0.0]), "b": T([0.0])}, 0.1, 0.5, no_decay=["b"])
    assert float(params["w"]) == pytest.approx(0.95) and float(params["b"]) == 1.0


def test_clip_grad_norm():
    grads = {"a": T([3.0]), "b": T([4.0])}
    total = clip_grad_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    assert float(torch.sqrt(grads["a"] ** 2 + grads["b"] ** 2)) == pytest.approx(1.0, rel=1e-5)
    small = {"a": T([0.3])}
    clip_grad_norm(small, 3.0)
    assert float(small["a"]) == pytest.approx(0.3)


# --- schedules -----------------------------------------------------------------


def test_cosine_schedule_examples():
    s = Schedule(1.0, 0.0, 10, 110)
    assert cosine_schedule(s, 0) == 0.0
    assert cosine_schedule(s, 10) == pytest.approx(1.0)
    assert cosine_schedule(s, 60) == pytest.approx(0.5)
    assert cosine_schedule(s, 110) == pytest.approx(0.0, abs=1e-15)
    s2 = Schedule(1e-3, 1e-6, 10, 110)
    assert cosine_schedule(s2, 60) == pytest.approx((1e-3 + 1e-6) / 2)


def test_cosine_schedule_errors():
    with pytest.raises(ValueError):
        cosine_schedule(Schedule(1.0, 0.0, 0, 10), 11)
    with pytest.raises(ValueError):
        Schedule(1.0, 0.0, 20, 10)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 1.0), st.floats(0.0, 1.0), st.integers(0, 50), st.integers(1, 300))
def test_cosine_schedule_continuity_monotonicity_range(base, frac, warmup, extra):
    final = base * frac
    total = warmup + extra
    s = Schedule(base, final, warmup, total)
    vals = [cosine_schedule(s, k) for k in range(total + 1)]
    assert vals[warmup] == pytest.approx(base)
    if warmup:
        # linear ramp reaches base exactly at the warmup boundary
        assert vals[warmup - 1] == pytest.approx(base * (warmup - 1) / warmup)
    post = vals[warmup:]
    assert all(a >= b - 1e-15 for a, b in zip(post, post[1:]))
    assert all(min(0.0, final) - 1e-15 <= v <= max(base, final) + 1e-15 for v in vals)


def test_linear_then_constant():
    assert linear_then_constant(0.04, 0.07, 10, 0) == pytest.approx(0.04)
    assert linear_then_constant(0.04, 0.07, 10, 5) == pytest.approx(0.055)
    assert linear_then_constant(0.04, 0.07, 10, 10) == pytest.approx(0.07)
    assert linear_then_constant(0.04, 0.07, 10, 1000) == pytest.approx(0.07)


# --- keyed rng -------------------------------------------------------------------


def test_keyed_rng_determinism_and_independence():
    a = keyed_rng(3, "crop", 1, 7).random(5)
    b = keyed_rng(3, "crop", 1, 7).random(5)
    assert np.array_equal(a, b)
    for other in (keyed_rng(3, "mask", 1, 7), keyed_rng(3, "crop", 2, 7), keyed_rng(3, "crop", 1, 8),
                  keyed_rng(4, "crop", 1, 7)):
        assert not np.array_equal(a, other.random(5))


def test_keyed_rng_order_free():
    first = [keyed_rng(0, "x", 0, i).random() for i in range(5)]
    rev = [keyed_rng(0, "x", 0, i).random() for i in reversed(range(5))]
    assert first == rev[::-1]


# --- grad_check -------------------------------------------------------------------


def test_grad_check_square():
    rep = grad_check(lambda p: (p["x"] ** 2).sum(), {"x": T([3.0])})
    assert rep.max_error < 1e-8 and rep.passed


def test_grad_check_linear_exact():
    w = T([0.5, -2.0, 3.0], dtype=torch.float64)
    rep = grad_check(lambda p: (p["x"] * w).sum(), {"x": T([1.0, 2.0, -4.0])})
    assert rep.max_error < 1e-9


def test_grad_check_dino_two_prototypes():
    from cxrssl.ssl import dino_image_loss

    g = torch.Generator().manual_seed(1)
    t = [0.1 * torch.randn(3, 2, generator=g, dtype=torch.float64) for _ in range(2)]
    center = T([0.01, -0.02], dtype=torch.float64)
    params = {f"s{i}": 0.1 * torch.randn(3, 2, generator=g, dtype=torch.float64) for i in range(4)}
    rep = grad_check(lambda p: dino_image_loss(t, [p[f"s{i}"] for i in range(4)], center, 0.04, 0.1), params)
    assert rep.passed, rep.rel_errors


def test_grad_check_flags_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x  # should be 2x

    rep = grad_check(lambda p: Bad.apply(p["x"]).sum(), {"x": T([1.5])})
    assert not rep.passed


def test_grad_check_non_finite_analytic():
    with pytest.raises(NonFiniteError):
        grad_check(lambda p: torch.sqrt(p["x"]).sum(), {"x": T([0.0])})


def test_grad_check_refine_only_touches_failures():
    rep = grad_check(lambda p: torch.sin(p["x"]).sum(), {"x": T([0.3, 1.0])}, refine=True)
    assert rep.passed and sum(rep.refined.values()) == 0
