import json
import subprocess
import sys

import pytest

from cxrssl.cli import EXIT_CODES, run
from cxrssl.config import parse_config


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Generate a corpus and pre-train briefly through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth-gen", "--out", str(root / "data"), "--count", "60", "--seed", "2"]) == 0
    cfg = root / "c.cfg"
    cfg.write_text("batch = 4\nsteps = 2\nencoder.depth = 2\n")
    man = root / "data" / "manifest.csv"
    assert run(["pretrain", "--config", str(cfg), "--manifest", str(man), "--seed", "7",
                "--out", str(root / "run")]) == 0
    return root, man


def test_pretrain_outputs_and_resolved_config(pipeline):
    root, _ = pipeline
    run_dir = root / "run"
    assert (run_dir / "final.ckpt").is_file()
    resolved = (run_dir / "resolved.cfg").read_text()
    cfg = parse_config("\n".join(line for line in resolved.splitlines() if not line.startswith("#")))
    assert cfg.train.seed == 7 and cfg.train.steps == 2 and cfg.train.encoder.depth == 2
    assert "weight_decay = 0.04" in resolved


def test_pretrain_deterministic(pipeline, tmp_path):
    root, man = pipeline
    args = ["pretrain", "--config", str(root / "c.cfg"), "--manifest", str(man), "--seed", "7"]
    assert run(args + ["--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "final.ckpt").read_bytes() == (root / "run" / "final.ckpt").read_bytes()


def test_pretrain_no_mim(pipeline, tmp_path):
    root, man = pipeline
    assert run(["pretrain", "--config", str(root / "c.cfg"), "--manifest", str(man), "--no-mim",
                "--out", str(tmp_path / "nomim")]) == 0
    logs = [json.loads(x) for x in open(tmp_path / "nomim" / "train_log.jsonl")]
    assert logs and all(r["ibot_loss"] == 0.0 for r in logs)


def test_embed_probe_demographics(pipeline, tmp_path):
    root, man = pipeline
    ck = str(root / "run" / "final.ckpt")
    emb = tmp_path / "e.bin"
    assert run(["embed", "--checkpoint", ck, "--manifest", str(man), "--out", str(emb), "--patches"]) == 0
    assert emb.read_bytes()[:4] == b"RDEM"
    out = tmp_path / "probe.jsonl"
    assert run(["probe", "--embeddings", str(emb), "--folds", "3", "--seeds", "2", "--set", "probe.epochs=20",
                "--out", str(out)]) == 0
    rep = json.loads(out.read_text().splitlines()[-1])
    assert set(rep["macro_auprc"]) == {"mean", "std"} and len(rep["runs"]) == 6
    assert (tmp_path / "resolved.cfg").is_file()
    assert "probe.epochs = 20" in (tmp_path / "resolved.cfg").read_text()
    dem = tmp_path / "dem.jsonl"
    assert run(["demographics", "--embeddings", str(emb), "--folds", "3", "--epochs", "5", "--out", str(dem)]) == 0
    assert json.loads(dem.read_text())["k"] == 3
    dem2 = tmp_path / "dem2.jsonl"
    assert run(["demographics", "--embeddings", str(emb), "--attribute", "body_scale_value", "--edges",
                "0.9,1.1", "--folds", "2", "--epochs", "5", "--out", str(dem2)]) == 0


def test_segment_and_stratify(pipeline, tmp_path):
    root, man = pipeline
    out = tmp_path / "seg.jsonl"
    assert run(["segment", "--checkpoint", str(root / "run" / "final.ckpt"), "--manifest", str(man),
                "--structure", "lungs", "--set", "seg.epochs=3", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["n_params"] == 65 and 0 <= rep["dice"]["mean"] <= 1
    cases = out.with_suffix(".cases.csv")
    assert cases.read_text().startswith("sample_id,subject,dice,body_scale")
    st = tmp_path / "strat.jsonl"
    assert run(["stratify", "--input", str(cases), "--bootstrap", "50", "--out", str(st)]) == 0
    res = json.loads(st.read_text())
    assert res["worst"] <= min(res["per_group"].values()) + 1e-12 and "bootstrap" in res


def test_patchsim_and_attention(pipeline, tmp_path):
    root, man = pipeline
    ck = str(root / "run" / "final.ckpt")
    img0 = str(root / "data" / "images" / "00000.pgm")
    img1 = str(root / "data" / "images" / "00001.pgm")
    assert run(["patchsim", "--checkpoint", ck, "--query", img0, "--target", img1, "--token", "10",
                "--out", str(tmp_path / "sim.ppm")]) == 0
    assert (tmp_path / "sim.ppm").read_bytes()[:2] == b"P6"
    assert run(["patchsim", "--checkpoint", ck, "--manifest", str(man), "--pairs", "10", "--layer", "0",
                "--out", str(tmp_path / "corr.jsonl")]) == 0
    assert json.loads((tmp_path / "corr.jsonl").read_text())["pairs"] == 10
    assert run(["attention", "--checkpoint", ck, "--image", img0, "--out", str(tmp_path / "att")]) == 0
    assert len(list(tmp_path.glob("att_l1_h*.ppm"))) == 4


def test_stats_and_env_output_root(pipeline, tmp_path, monkeypatch):
    _, man = pipeline
    monkeypatch.setenv("CXRSSL_OUT", str(tmp_path))
    assert run(["stats", "--manifest", str(man)]) == 0
    rec = json.loads((tmp_path / "stats.json").read_text())
    assert rec["std"] > 0 and rec["images"] == 60
    assert (tmp_path / "resolved.cfg").is_file()


def test_gradcheck_command(tmp_path):
    assert run(["gradcheck", "--seeds", "1", "--out", str(tmp_path / "gc.json")]) == 0
    assert json.loads((tmp_path / "gc.json").read_text())["passed"]


@pytest.mark.parametrize("argv,category", [
    ([], "usage"),
    (["frobnicate"], "usage"),
    (["stats", "--bogus"], "usage"),
    (["stats", "--manifest", "/nonexistent/m.csv"], "missing-input"),
    (["pretrain", "--manifest", "/nonexistent/m.csv", "--set", "batch=1"], "config"),
    (["pretrain", "--set", "nonsense=1"], "config"),
    (["pretrain", "--config", "/nonexistent.cfg"], "missing-input"),
])
def test_error_exit_codes(argv, category, capsys):
    assert run(argv) == EXIT_CODES[category]
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error: {category}: ")


def test_format_error(tmp_path, capsys):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"NOPE")
    img = tmp_path / "i.pgm"
    img.write_bytes(b"P5\n8 8\n255\n" + bytes(64))
    assert run(["attention", "--checkpoint", str(bad), "--image", str(img), "--layer", "0"]) == EXIT_CODES["format"]


def test_print_defaults(capsys):
    assert run(["--print-defaults"]) == 0
    assert "crop.local_count = 4" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cxrssl", "--print-defaults"], capture_output=True, text=True)
    assert res.returncode == 0 and "batch = 32" in res.stdout
