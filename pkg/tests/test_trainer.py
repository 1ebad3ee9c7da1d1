import json
import math

import numpy as np
import pytest
import torch

from cxrssl import checkpoint as ckpt
from cxrssl.evalsuite import embed_corpus
from cxrssl.manifest import load_manifest
from cxrssl.numerics import Schedule, cosine_schedule
from cxrssl.trainer import TrainConfig, batch_indices, collapse_metrics, pretrain


def _log(path):
    return [json.loads(line) for line in open(path)]


def test_collapse_metrics_examples():
    u = collapse_metrics(torch.full((3, 4), 0.25))
    assert u["entropy"] == pytest.approx(math.log(4)) and u["kl_uniform"] == pytest.approx(0.0, abs=1e-12)
    oh = collapse_metrics(torch.eye(4))
    assert oh["entropy"] == pytest.approx(0.0, abs=1e-9) and oh["kl_uniform"] == pytest.approx(math.log(4))
    assert collapse_metrics(torch.tensor([[0.7, 0.1, 0.1, 0.1]]))["entropy"] == pytest.approx(0.9404, abs=1e-4)
    with pytest.raises(ValueError):
        collapse_metrics(torch.tensor([[0.7, 0.7]]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch=1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(init="checkpoint")
    assert TrainConfig(steps=7).total_steps(1000) == 7
    assert TrainConfig(batch=32, epochs=3).total_steps(100) == 12


def test_batch_indices_cover_epoch():
    seen = sorted(i for pos in range(4) for i in batch_indices(30, 8, 1, 0, pos))
    assert set(seen) == set(range(30))


def test_reload_gives_identical_embeddings(tiny_trained, small_corpus):
    man = load_manifest(small_corpus).subset(3)
    ck = ckpt.load(tiny_trained)
    a = embed_corpus(ck, man, [])
    ck2 = ckpt.from_bytes(ckpt.to_bytes(ck))
    b = embed_corpus(ck2, man, [])
    assert all(np.array_equal(x.cls, y.cls) for x, y in zip(a, b))
    assert ck.step == 4


def test_log_records_and_schedule_traces(tiny_trained):
    recs = _log(tiny_trained.parent / "train_log.jsonl")
    assert [r["step"] for r in recs] == [1, 2, 3, 4]
    keys = {"step", "lr", "ema_momentum", "teacher_temp", "dino_loss", "ibot_loss", "koleo_loss", "total_loss",
            "teacher_entropy", "wall_time", "grad_norm"}
    assert keys <= set(recs[0])
    total = 4
    lr = Schedule(1e-3, 1e-6, int(round(0.03 * total)), total)
    ema = Schedule(0.992, 1.0, 0, total)
    for r in recs:
        assert r["lr"] == cosine_schedule(lr, r["step"] - 1)
        assert r["ema_momentum"] == cosine_schedule(ema, r["step"] - 1)
        assert all(math.isfinite(v) for v in r.values())


def test_no_mim_logs_zero_patch_loss(small_corpus, tmp_path):
    cfg = TrainConfig(manifest=str(small_corpus), batch=4, steps=3, no_mim=True, out_dir=str(tmp_path))
    pretrain(cfg)
    assert all(r["ibot_loss"] == 0.0 for r in _log(tmp_path / "train_log.jsonl"))


def test_resume_equals_uninterrupted(small_corpus, tmp_path):
    kw = dict(manifest=str(small_corpus), batch=4, steps=6, checkpoint_every=3)
    full = tmp_path / "full"
    pretrain(TrainConfig(out_dir=str(full), **kw))
    part = tmp_path / "part"
    pretrain(TrainConfig(out_dir=str(part), **kw), stop_at=3)
    pretrain(TrainConfig(out_dir=str(part), **kw), resume=str(part / "step0000003.ckpt"))
    a, b = _log(full / "train_log.jsonl"), _log(part / "train_log.jsonl")[-6:]
    for ra, rb in zip(a, b):
        for k in ra:
            if k != "wall_time":
                assert ra[k] == pytest.approx(rb[k], abs=1e-6), k
    ca, cb = ckpt.load(full / "final.ckpt"), ckpt.load(part / "final.ckpt")
    assert all(torch.equal(ca.tensors[k], cb.tensors[k]) for k in ca.tensors)


def test_same_seed_same_checkpoint(small_corpus, tmp_path):
    for d in ("a", "b"):
        pretrain(TrainConfig(manifest=str(small_corpus), batch=4, steps=2, seed=7, out_dir=str(tmp_path / d)))
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_prototypes_unit_norm_after_steps(tiny_trained):
    s = ckpt.load(tiny_trained).student()
    for head in (s.dino_head, s.ibot_head):
        w = head.prototypes.weight
        assert torch.allclose(w.norm(dim=-1), torch.ones(w.shape[0]), atol=1e-5)


def test_early_stop_callback(small_corpus, tmp_path):
    st = pretrain(TrainConfig(manifest=str(small_corpus), batch=4, steps=10, out_dir=str(tmp_path)),
                  callback=lambda step, model: step >= 2)
    assert st.step == 2


@pytest.fixture(scope="module", params=[0, 1, 2])
def toy_run(request, small_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp(f"toy{request.param}")
    pretrain(TrainConfig(manifest=str(small_corpus), batch=8, steps=200, seed=request.param, out_dir=str(out)))
    return _log(out / "train_log.jsonl")


def test_toy_run_finite(toy_run):
    assert [r["step"] for r in toy_run] == list(range(1, 201))
    assert all(math.isfinite(v) for r in toy_run for v in r.values())


@pytest.mark.xfail(reason="the teacher starts as a copy of the student, so early loss sits below its "
                          "plateau; 200 cosine-decayed steps end before it recovers", strict=False)
def test_toy_run_loss_decreases(toy_run):
    early = np.mean([r["total_loss"] for r in toy_run[:10]])
    assert toy_run[-1]["total_loss"] < early
