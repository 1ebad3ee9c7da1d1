"""Command-line entry point: ``cxrssl <subcommand> [options]``.

Every failure ends with one stderr line ``error: <category>: <message>`` and
a non-zero exit code; every successful run leaves ``resolved.cfg`` (all
defaults materialised) next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .augment import corpus_stats
from .config import Config, ConfigError, build, parse_pairs, print_defaults, render_config
from .evalsuite import (embed_corpus, kfold_linear_accuracy, load_masks, read_embeddings, train_linear_probe,
                        train_seg_linear, write_embeddings)
from .manifest import ManifestError, load_manifest
from .metrics import bin_continuous, bootstrap_ci, stratified_metric
from .numerics import NonFiniteError
from .pnm import load_image

log = logging.getLogger("cxrssl")

OUT_ENV = "CXRSSL_OUT"

EXIT_CODES = {"usage": 2, "missing-input": 3, "config": 4, "format": 5, "numeric": 6, "io": 7, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _out_path(p: Optional[str], default: str) -> Path:
    if p:
        return Path(p)
    return Path(os.environ.get(OUT_ENV, ".")) / default


def _load_config(args) -> Config:
    values: Dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError("missing-input", f"config file not found: {path}")
        values = parse_pairs(path.read_text(encoding="utf-8"))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError("usage", f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return build(values)


def _arg_record(args) -> Dict[str, object]:
    skip = {"func", "config_obj", "set", "print_defaults"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write_resolved(out_dir: Path, cfg: Config, extra: Optional[Dict[str, object]] = None) -> None:
    """All config keys with their effective values; command flags follow as comments."""
    out_dir.mkdir(parents=True, exist_ok=True)
    text = render_config(cfg)
    if extra:
        text += "".join(f"# cli.{k} = {v}\n" for k, v in extra.items())
    (out_dir / "resolved.cfg").write_text(text, encoding="utf-8")


def _append_jsonl(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="ascii") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _classes(arg: Optional[str]) -> List[str]:
    from .synthcxr import FINDINGS

    return [c for c in arg.split(",") if c] if arg else list(FINDINGS)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth_gen(args) -> Path:
    from .synthcxr import GenSpec, generate

    prev = {}
    for item in (args.prevalence or "").split(","):
        if item:
            k, v = item.split("=", 1)
            prev[k.strip()] = float(v)
    spec = GenSpec(count=args.count, seed=args.seed, side=args.side, **({"prevalence": prev} if prev else {}))
    out = _out_path(args.out, "synth")
    manifest = generate(spec, out, masks=not args.no_masks)
    args.prevalence = ",".join(f"{k}={v!r}" for k, v in sorted(spec.prevalence.items()))
    print(manifest)
    return out


def cmd_stats(args) -> Path:
    m = load_manifest(args.manifest)
    st = corpus_stats([r.image for r in m.rows], loader=load_image)
    rec = {"mean": st.mean, "std": st.std, "clamped": st.clamped, "images": len(m)}
    out = _out_path(args.out, "stats.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rec, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(rec, sort_keys=True))
    return out.parent


def cmd_pretrain(args) -> Path:
    from .trainer import pretrain

    values = {}
    if args.config:
        if not Path(args.config).is_file():
            raise CliError("missing-input", f"config file not found: {args.config}")
        values = parse_pairs(Path(args.config).read_text(encoding="utf-8"))
    for item in args.set or []:
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for flag, key in (("seed", "seed"), ("manifest", "manifest"), ("out", "out_dir"), ("steps", "steps"),
                      ("epochs", "epochs")):
        v = getattr(args, flag)
        if v is not None:
            values[key] = str(v)
    if args.no_mim:
        values["no_mim"] = "true"
    if "out_dir" not in values and OUT_ENV in os.environ:
        values["out_dir"] = str(Path(os.environ[OUT_ENV]) / "pretrain")
    cfg = build(values)
    if not cfg.train.manifest:
        raise CliError("config", "no manifest given (config key 'manifest' or --manifest)")
    out = Path(cfg.train.out_dir)
    args.config_obj = cfg
    _write_resolved(out, cfg, _arg_record(args))
    st = pretrain(cfg.train, resume=args.resume, stop_at=args.stop_at)
    print(json.dumps({"checkpoint": str(out / "final.ckpt"), "step": st.step}))
    return out


def cmd_embed(args) -> Path:
    ck = ckpt.load(args.checkpoint)
    m = load_manifest(args.manifest)
    recs = embed_corpus(ck, m, _classes(args.classes), with_patches=args.patches, side=args.side,
                        branch=args.branch)
    out = _out_path(args.out, "embeddings.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(out, recs)
    print(json.dumps({"embeddings": str(out), "records": len(recs)}))
    return out.parent


def cmd_probe(args) -> Path:
    cfg = _load_config(args)
    probe = cfg.probe
    if args.folds is not None:
        probe.folds = args.folds
    if args.seeds is not None:
        probe.seeds = args.seeds
    recs = read_embeddings(args.embeddings)
    x = np.stack([r.cls for r in recs]) if not args.pool_patches else np.stack([r.patches.mean(0) for r in recs])
    y = np.stack([r.labels for r in recs])
    rep = train_linear_probe(x, y, [r.subject for r in recs], probe, _classes(args.classes))
    out = _out_path(args.out, "probe_metrics.jsonl")
    _append_jsonl(out, rep.to_dict())
    args.config_obj = cfg
    print(json.dumps({"macro_auprc": rep.macro_auprc, "macro_auroc": rep.macro_auroc}))
    return out.parent


def _patch_grids(ck, manifest, side):
    recs = embed_corpus(ck, manifest, [], with_patches=True, side=side)
    return np.stack([r.patches for r in recs])


def cmd_segment(args) -> Path:
    cfg = _load_config(args)
    seg = cfg.seg
    if args.n_train is not None:
        seg.n_train = args.n_train
    ck = ckpt.load(args.checkpoint)
    m = load_manifest(args.manifest)
    parts = {s: m.subset(splits=[s]) for s in ("train", "val", "test")}
    side = args.side
    feats = {s: _patch_grids(ck, p, side) for s, p in parts.items() if len(p)}
    masks = {s: load_masks(p, args.structure, side) for s, p in parts.items() if len(p)}
    if "train" not in feats or "test" not in feats:
        raise CliError("missing-input", "manifest needs train and test rows")
    rep = train_seg_linear(feats["train"], masks["train"], feats["test"], masks["test"], seg,
                           feats.get("val"), masks.get("val"), structure=args.structure)
    out = _out_path(args.out, "seg_metrics.jsonl")
    _append_jsonl(out, rep.to_dict())
    kept = [r for r, gt in zip(parts["test"].rows, masks["test"]) if gt.any() or not seg.positives_only]
    with open(out.with_suffix(".cases.csv"), "w", newline="", encoding="utf-8") as fh:
        attrs = sorted({k for r in kept for k in r.attributes})
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "subject", "dice", *attrs])
        for r, d in zip(kept, rep.per_case):
            w.writerow([r.sample_id, r.subject, repr(d), *[r.attributes.get(a, "") for a in attrs]])
    args.config_obj = cfg
    print(json.dumps({"structure": args.structure, "dice": rep.dice, "n_params": rep.n_params}))
    return out.parent


def cmd_demographics(args) -> Path:
    recs = read_embeddings(args.embeddings)
    if args.edges:
        edges = [float(e) for e in args.edges.split(",")]
        targets = [bin_continuous(float(r.attributes[args.attribute]), edges) for r in recs]
    else:
        targets = [r.attributes[args.attribute] for r in recs]
    x = np.stack([r.cls for r in recs])
    res = kfold_linear_accuracy(x, targets, k=args.folds, seed=args.seed, groups=[r.subject for r in recs],
                                epochs=args.epochs)
    res["attribute"] = args.attribute
    out = _out_path(args.out, "demographics.jsonl")
    _append_jsonl(out, res)
    print(json.dumps({"attribute": args.attribute, "mean": res["mean"], "std": res["std"]}))
    return out.parent


def cmd_stratify(args) -> Path:
    with open(args.input, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError("missing-input", f"{args.input} has no rows")
    vals = [float(r[args.value_column]) for r in rows]
    groups = [r[args.group_column] for r in rows]
    res = {"kind": "stratified", "value": args.value_column, "group": args.group_column,
           **stratified_metric(vals, groups)}
    if args.bootstrap:
        res["bootstrap"] = bootstrap_ci(vals, args.bootstrap, args.seed)
    out = _out_path(args.out, "stratified.jsonl")
    _append_jsonl(out, res)
    print(json.dumps(res, sort_keys=True))
    return out.parent


def cmd_patchsim(args) -> Path:
    from .inspection import HeatmapOverlay, correspondence_rate, patch_similarity_map, render_overlay

    ck = ckpt.load(args.checkpoint)
    if args.manifest:
        m = load_manifest(args.manifest)
        recs = embed_corpus(ck, m, [], with_patches=True, side=args.side, layer=args.layer)
        masks = load_masks(m, args.structure, args.side)
        res = correspondence_rate([r.patches for r in recs], list(masks), m.subjects(),
                                  ck.encoder.patch_size, args.pairs, args.seed)
        out = _out_path(args.out, "patchsim.jsonl")
        _append_jsonl(out, res)
        print(json.dumps(res))
        return out.parent
    if not (args.query and args.target):
        raise CliError("usage", "patchsim needs --manifest, or --query and --target images")
    from .augment import normalize

    model = ck.teacher()
    q_img = torch.from_numpy(load_image(args.query))
    t_img = torch.from_numpy(load_image(args.target))
    with torch.no_grad():
        q = model.forward_features(normalize(q_img, ck.stats)[None], layer=args.layer)["patches"][0]
        t = model.forward_features(normalize(t_img, ck.stats)[None], layer=args.layer)["patches"][0]
    if not 0 <= args.token < q.shape[0]:
        raise CliError("usage", f"token index {args.token} outside [0, {q.shape[0]})")
    sim = patch_similarity_map(q[args.token], t)
    out = _out_path(args.out, "patchsim.ppm")
    out.parent.mkdir(parents=True, exist_ok=True)
    render_overlay(HeatmapOverlay(t_img.numpy(), sim.numpy(), -1.0, 1.0), out)
    print(json.dumps({"overlay": str(out), "argmax": int(sim.reshape(-1).argmax())}))
    return out.parent


def cmd_attention(args) -> Path:
    from .augment import normalize
    from .inspection import HeatmapOverlay, cls_attention_maps, render_overlay

    ck = ckpt.load(args.checkpoint)
    img = torch.from_numpy(load_image(args.image))
    maps = cls_attention_maps(ck.teacher(), normalize(img, ck.stats), args.layer)
    prefix = _out_path(args.out, "attention")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for h, grid in enumerate(maps.numpy()):
        p = prefix.parent / f"{prefix.name}_l{args.layer}_h{h}.ppm"
        render_overlay(HeatmapOverlay(img.numpy(), grid, 0.0, float(grid.max())), p)
        paths.append(str(p))
    print(json.dumps({"maps": paths}))
    return prefix.parent


def cmd_gradcheck(args) -> Path:
    from .gradcheck_suite import run_suite

    report = run_suite(seeds=args.seeds)
    out = _out_path(args.out, "gradcheck.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(json.dumps({"passed": report["passed"], "max_rel_error": report["max_rel_error"]}))
    if not report["passed"]:
        raise CliError("numeric", f"gradient check failed (max rel err {report['max_rel_error']:.3g})")
    return out.parent


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cxrssl", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap intra-op worker threads")
    p.add_argument("--print-defaults", action="store_true", help="print every config key and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth-gen", help="generate a synthetic corpus")
    s.add_argument("--out")
    s.add_argument("--count", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--prevalence", help="e.g. blob=0.4,tube=0.3,pneumothorax=0.3")
    s.add_argument("--no-masks", action="store_true")
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("stats", help="corpus intensity statistics")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("pretrain", help="self-supervised pre-training")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--no-mim", action="store_true")
    s.add_argument("--resume")
    s.add_argument("--stop-at", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("embed", help="encode a manifest with a frozen checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.add_argument("--patches", action="store_true")
    s.add_argument("--side", type=int)
    s.add_argument("--branch", choices=("teacher", "student"), default="teacher")
    s.add_argument("--classes")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("probe", help="k-fold multilabel linear probe")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--folds", type=int)
    s.add_argument("--seeds", type=int)
    s.add_argument("--classes")
    s.add_argument("--pool-patches", action="store_true", help="probe the mean patch token instead of [CLS]")
    s.add_argument("--out")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("segment", help="linear segmentation head on patch tokens")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--structure", default="blob")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--n-train", type=int)
    s.add_argument("--side", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("demographics", help="k-fold attribute classification")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--attribute", default="body_scale")
    s.add_argument("--edges", help="bin a continuous attribute at these edges")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_demographics)

    s = sub.add_parser("stratify", help="per-group and worst-group metric summary")
    s.add_argument("--input", required=True, help="CSV of per-sample values")
    s.add_argument("--value-column", default="dice")
    s.add_argument("--group-column", default="body_scale")
    s.add_argument("--bootstrap", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stratify)

    s = sub.add_parser("patchsim", help="patch similarity heatmap or correspondence rate")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--query")
    s.add_argument("--target")
    s.add_argument("--token", type=int, default=0)
    s.add_argument("--manifest")
    s.add_argument("--structure", default="blob")
    s.add_argument("--pairs", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--side", type=int)
    s.add_argument("--layer", type=int, default=-1, help="block whose patch tokens are compared; -1 = last")
    s.add_argument("--out")
    s.set_defaults(func=cmd_patchsim)

    s = sub.add_parser("attention", help="[CLS] self-attention maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--layer", type=int, default=-1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_attention)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one command line; returns the process exit code."""
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None:
            if args.threads < 1:
                raise CliError("usage", "--threads must be >= 1")
            torch.set_num_threads(args.threads)
        if args.print_defaults:
            sys.stdout.write(print_defaults())
            return 0
        if not getattr(args, "command", None):
            raise CliError("usage", "missing subcommand")
        if getattr(args, "layer", None) == -1:
            args.layer = ckpt.load(args.checkpoint).encoder.depth - 1
        out_dir = args.func(args)
        if out_dir is not None and args.command != "pretrain":
            _write_resolved(Path(out_dir), getattr(args, "config_obj", None) or Config(), _arg_record(args))
        return 0
    except CliError as exc:
        category, msg = exc.category, str(exc)
    except ConfigError as exc:
        category, msg = "config", str(exc)
    except FileNotFoundError as exc:
        category, msg = "missing-input", str(exc)
    except (ManifestError, ckpt.CheckpointError) as exc:
        category, msg = "format", str(exc)
    except NonFiniteError as exc:
        category, msg = "numeric", str(exc)
    except OSError as exc:
        category, msg = "io", str(exc)
    except (ValueError, KeyError) as exc:
        category, msg = "config", str(exc)
    sys.stderr.write(f"error: {category}: {' '.join(msg.split())}\n")
    return EXIT_CODES[category]


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
