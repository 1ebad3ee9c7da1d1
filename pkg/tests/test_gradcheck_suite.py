import torch

from cxrssl.gradcheck_suite import TOY, op_cases, run_suite, total_loss_case


def test_cases_are_small_float64():
    for name, (fn, params) in op_cases(0).items():
        for key, t in params.items():
            assert t.dtype == torch.float64, name
            # the fused q/k/v projection stacks three D x D matrices
            limit = (24, 8) if key.endswith("qkv.weight") else (8,) * t.dim()
            assert all(s <= m for s, m in zip(t.shape, limit)), (name, key)
        assert fn(params).dim() == 0


def test_toy_config_matches_criterion_shape():
    assert (TOY.embed_dim, TOY.num_prototypes, TOY.depth) == (8, 4, 1)
    fn, params = total_loss_case(0)
    assert torch.isfinite(fn(params))


def test_suite_single_seed():
    rep = run_suite(seeds=1, total_entries=4)
    assert rep["passed"], [c for c in rep["cases"] if not c["passed"]]
    names = {c["case"] for c in rep["cases"]}
    assert {"softmax_temp", "attention", "block", "projection_head", "dino_image_loss", "ibot_patch_loss",
            "koleo", "total_loss"} <= names
