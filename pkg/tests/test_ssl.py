import math

import pytest
import torch

from cxrssl.encoder import EncoderConfig, build_encoder
from cxrssl.gradcheck_suite import TOY, total_loss_case
from cxrssl.numerics import entropy, grad_check, softmax_temp
from cxrssl.ssl import (LossWeights, TeacherState, dino_image_loss, ema_update, ibot_patch_loss, koleo,
                        total_loss, update_center)

T = torch.tensor


def test_dino_uniform_pair_is_ln2():
    z = [torch.zeros(1, 2), torch.zeros(1, 2)]
    loss = dino_image_loss(z, [torch.zeros(1, 2)] * 4, None, 0.04, 0.1)
    assert float(loss) == pytest.approx(math.log(2), abs=1e-6)


def test_dino_matched_distributions_give_teacher_entropy():
    g = torch.Generator().manual_seed(0)
    t = [torch.randn(3, 5, generator=g, dtype=torch.float64) for _ in range(2)]
    # student logits scaled so softmax(z_s / 0.1) == softmax(z_t / 0.04); cross views are the other global
    s = [t[1] * 0.1 / 0.04, t[0] * 0.1 / 0.04]
    loss = dino_image_loss(t, s, None, 0.04, 0.1)
    ent = [float(entropy(softmax_temp(x, 0.04)).mean()) for x in t]
    # pair (g=0, v=1) uses student view 1 which matches teacher 0
    assert float(loss) == pytest.approx(sum(ent) / 2, abs=1e-10)


def test_dino_pair_count_two_globals():
    g = torch.Generator().manual_seed(1)
    t = [torch.randn(2, 3, generator=g) for _ in range(2)]
    s = [torch.randn(2, 3, generator=g) for _ in range(2)]

    def ce(a, b):
        p = softmax_temp(a, 0.04)
        return float((-(p * torch.log_softmax(b / 0.1, -1)).sum(-1)).mean())

    want = (ce(t[0], s[1]) + ce(t[1], s[0])) / 2
    assert float(dino_image_loss(t, s, None, 0.04, 0.1)) == pytest.approx(want, rel=1e-5)


def test_dino_errors():
    with pytest.raises(ValueError):
        dino_image_loss([torch.zeros(1, 2)], [torch.zeros(1, 2)] * 2, None, 0.04, 0.1)


def test_dino_no_gradient_to_teacher():
    t = [torch.randn(2, 4, requires_grad=True) for _ in range(2)]
    s = [torch.randn(2, 4, requires_grad=True) for _ in range(3)]
    dino_image_loss(t, s, torch.zeros(4), 0.04, 0.1).backward()
    assert all(x.grad is None for x in t) and all(x.grad is not None for x in s)


def test_dino_bounded_below_by_teacher_entropy():
    for seed in range(10):
        g = torch.Generator().manual_seed(seed)
        t = [torch.randn(4, 6, generator=g) for _ in range(2)]
        s = [torch.randn(4, 6, generator=g) for _ in range(4)]
        c = 0.1 * torch.randn(6, generator=g)
        h = sum(float(entropy(softmax_temp(x - c, 0.04)).mean()) for x in t) / 2
        assert float(dino_image_loss(t, s, c, 0.04, 0.1)) >= h - 1e-5


def test_ibot_examples():
    z = torch.zeros(1, 3, 4)
    none = torch.zeros(1, 3, dtype=torch.bool)
    assert float(ibot_patch_loss(z, z, none, None, 0.04, 0.1)) == 0.0
    one = none.clone()
    one[0, 1] = True
    assert float(ibot_patch_loss(z, z, one, None, 0.04, 0.1)) == pytest.approx(math.log(4), abs=1e-6)


def test_ibot_matching_student_gives_entropy():
    g = torch.Generator().manual_seed(2)
    t = torch.randn(2, 5, 4, generator=g, dtype=torch.float64)
    m = torch.zeros(2, 5, dtype=torch.bool)
    m[0, 0] = m[1, 3] = True
    loss = ibot_patch_loss(t, t * 0.1 / 0.04, m, None, 0.04, 0.1)
    want = float(entropy(softmax_temp(t[m], 0.04)).mean())
    assert float(loss) == pytest.approx(want, abs=1e-10)


def test_ibot_misaligned():
    with pytest.raises(ValueError):
        ibot_patch_loss(torch.zeros(1, 3, 4), torch.zeros(1, 4, 4), torch.ones(1, 3, dtype=torch.bool),
                        None, 0.04, 0.1)


def test_koleo_examples():
    assert float(koleo(T([[1.0, 0.0], [0.0, 1.0]]))) == pytest.approx(-math.log(math.sqrt(2)), abs=1e-4)
    assert float(koleo(T([[0.0], [1.0], [3.0]]))) == pytest.approx(-math.log(2) / 3, abs=1e-4)
    assert float(koleo(T([[0.5, 0.5], [0.5, 0.5]], dtype=torch.float64))) == pytest.approx(-math.log(1e-8),
                                                                                             abs=1e-3)
    with pytest.raises(ValueError):
        koleo(T([[1.0, 0.0]]))


def test_update_center_examples():
    c = T([0.3, -0.3])
    batch = T([[2.0, 2.0], [2.0, 2.0]])
    assert torch.equal(update_center(c, batch, 1.0), c)
    assert torch.allclose(update_center(c, batch, 0.0), T([2.0, 2.0]))
    assert torch.allclose(update_center(torch.zeros(2), batch, 0.9), T([0.2, 0.2]))


def _pair(seed=0):
    cfg = EncoderConfig(image_size=16, patch_size=4, embed_dim=8, depth=1, num_heads=2, num_prototypes=4,
                        head_hidden_dim=8, head_bottleneck_dim=4)
    return build_encoder(cfg, seed), build_encoder(cfg, seed + 1)


def _params(m):
    return {k: v.detach().clone() for k, v in m.named_parameters()}


def test_ema_examples_and_contraction():
    t, s = _pair()
    t0, s0 = _params(t), _params(s)
    ema_update(t, s, 1.0)
    assert all(torch.equal(v, t0[k]) for k, v in _params(t).items())
    ema_update(t, s, 0.9)
    for k, v in _params(t).items():
        assert torch.allclose(v - s0[k], 0.9 * (t0[k] - s0[k]), atol=1e-6)
    ema_update(t, s, 0.0)
    assert all(torch.equal(v, s0[k]) for k, v in _params(t).items())


def test_ema_scalar_arithmetic():
    a, b = torch.nn.Linear(1, 1, bias=False), torch.nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        a.weight.fill_(1.0)
        b.weight.fill_(0.0)
    ema_update(a, b, 0.9)
    assert float(a.weight.detach()) == pytest.approx(0.9)


def test_ema_inventory_mismatch():
    with pytest.raises(KeyError):
        ema_update(torch.nn.Linear(2, 2), torch.nn.Linear(2, 2, bias=False), 0.5)


def test_teacher_schedules():
    s, _ = _pair()
    ts = TeacherState(s, total_steps=100, teacher_temp_end=0.07)
    assert ts.momentum(0) == pytest.approx(0.992)
    assert ts.momentum(100) == pytest.approx(1.0)
    assert ts.teacher_temp(0) == pytest.approx(0.04)
    assert ts.teacher_temp(10) == pytest.approx(0.07)
    assert not any(p.requires_grad for p in ts.model.parameters())


def _views(cfg, b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    r = cfg.image_size
    tg = torch.randn(2, b, r, r, generator=g)
    sg = tg + 0.1 * torch.randn(2, b, r, r, generator=g)
    loc = torch.randn(2, b, 2 * cfg.patch_size, 2 * cfg.patch_size, generator=g)
    masks = torch.rand(2, b, cfg.num_patches, generator=g) < 0.3
    return tg, sg, loc, masks


def test_total_is_weighted_sum_and_teacher_untouched():
    s, _ = _pair()
    ts = TeacherState(s, 10)
    tg, sg, loc, masks = _views(s.cfg)
    out = total_loss(tg, sg, loc, masks, s, ts, 0, LossWeights(1.0, 0.5, 0.1))
    lb = out.losses
    assert lb.total.item() == pytest.approx((lb.dino + 0.5 * lb.ibot + 0.1 * lb.koleo).item(), abs=1e-6)
    lb.total.backward()
    assert all(p.grad is None for p in ts.model.parameters())
    assert not ts.image_center.requires_grad


def test_total_centers_updated_after_use():
    s, _ = _pair()
    ts = TeacherState(s, 10)
    tg, sg, loc, masks = _views(s.cfg)
    out = total_loss(tg, sg, loc, masks, s, ts, 0)
    want = 0.1 * out.teacher_image_logits.reshape(-1, 4).mean(0)
    assert torch.allclose(ts.image_center, want, atol=1e-7)


def test_no_mim_total_independent_of_masks():
    s, _ = _pair()
    tg, sg, loc, masks = _views(s.cfg)
    w = LossWeights(1.0, 0.0, 0.1)
    a = total_loss(tg, sg, loc, masks, s, TeacherState(s, 10), 0, w).losses
    b = total_loss(tg, sg, loc, ~masks, s, TeacherState(s, 10), 0, w).losses
    assert a.ibot.item() == 0.0 and a.total.item() == b.total.item()


def test_zero_weights_zero_total_and_gradient():
    s, _ = _pair()
    tg, sg, loc, masks = _views(s.cfg)
    lb = total_loss(tg, sg, loc, masks, s, TeacherState(s, 10), 0, LossWeights(0.0, 0.0, 0.0)).losses
    assert lb.total.item() == 0.0
    lb.total.backward()
    assert all(p.grad is None or float(p.grad.abs().max()) == 0.0 for p in s.parameters())


@pytest.mark.parametrize("seed", [0, 1])
def test_total_loss_gradcheck_toy(seed):
    fn, params = total_loss_case(seed, TOY)
    rep = grad_check(fn, params, tol=1e-4, max_entries=6, seed=seed, refine=True)
    assert rep.passed, rep.max_error


def test_centering_toggle():
    s, _ = _pair()
    ts = TeacherState(s, 10, centering=False)
    tg, sg, loc, masks = _views(s.cfg)
    ts.image_center += 5.0
    a = total_loss(tg, sg, loc, masks, s, ts, 0).losses
    ts2 = TeacherState(s, 10, centering=False)
    b = total_loss(tg, sg, loc, masks, s, ts2, 0).losses
    assert a.dino.item() == pytest.approx(b.dino.item())
