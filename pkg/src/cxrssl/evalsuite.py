"""Frozen-encoder protocols: embedding files, linear probes, linear segmentation."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .augment import normalize, resize
from .manifest import Manifest, check_subject_disjoint
from .metrics import auprc, auroc, dice, mean_std
from .numerics import OptimState, adamw_step, keyed_rng, keyed_torch_generator
from .pnm import load_image, read_pgm

EMB_MAGIC = b"RDEM"
EMB_VERSION = 1


# ---------------------------------------------------------------------------
# embedding files
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingRecord:
    sample_id: str
    subject: str
    cls: np.ndarray  # (D,) float32
    patches: Optional[np.ndarray] = None  # (N, D) float32
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    attributes: Dict[str, str] = field(default_factory=dict)

    @property
    def grid(self) -> int:
        return int(round(math.sqrt(self.patches.shape[0]))) if self.patches is not None else 0


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for a u16 length prefix")
    return struct.pack("<H", len(raw)) + raw


def embeddings_to_bytes(records: Sequence[EmbeddingRecord]) -> bytes:
    """Serialise records in the RDEM layout (little-endian, float32)."""
    parts = [EMB_MAGIC, struct.pack("<II", EMB_VERSION, len(records))]
    for r in records:
        cls = np.asarray(r.cls, dtype="<f4").reshape(-1)
        parts += [_str(r.sample_id), _str(r.subject), struct.pack("<I", cls.size), cls.tobytes()]
        if r.patches is None:
            parts.append(b"\x00")
        else:
            p = np.asarray(r.patches, dtype="<f4")
            if p.ndim != 2 or p.shape[1] != cls.size:
                raise ValueError("patch grid must be (N, D) with the class-token width")
            parts += [b"\x01", struct.pack("<I", p.shape[0]), p.tobytes()]
        bits = np.asarray(r.labels, dtype=bool)
        parts += [struct.pack("<H", bits.size), np.packbits(bits, bitorder="little").tobytes()]
        parts.append(struct.pack("<H", len(r.attributes)))
        for k, v in r.attributes.items():
            parts += [_str(k), _str(v)]
    return b"".join(parts)


def embeddings_from_bytes(buf: bytes) -> List[EmbeddingRecord]:
    if buf[:4] != EMB_MAGIC:
        raise ValueError("not an RDEM embedding file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != EMB_VERSION:
        raise ValueError(f"unsupported embedding file version {version}")
    off = 12

    def read_str():
        nonlocal off
        (n,) = struct.unpack_from("<H", buf, off)
        s = buf[off + 2:off + 2 + n].decode("utf-8")
        off += 2 + n
        return s

    out = []
    for _ in range(count):
        sid, subj = read_str(), read_str()
        (d,) = struct.unpack_from("<I", buf, off)
        off += 4
        cls = np.frombuffer(buf, "<f4", d, off).astype(np.float32)
        off += 4 * d
        flag = buf[off]
        off += 1
        patches = None
        if flag:
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            patches = np.frombuffer(buf, "<f4", n * d, off).astype(np.float32).reshape(n, d)
            off += 4 * n * d
        (nb,) = struct.unpack_from("<H", buf, off)
        off += 2
        nbytes = (nb + 7) // 8
        bits = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, off), bitorder="little")[:nb].astype(bool)
        off += nbytes
        (na,) = struct.unpack_from("<H", buf, off)
        off += 2
        attrs = {}
        for _ in range(na):
            k = read_str()
            attrs[k] = read_str()
        out.append(EmbeddingRecord(sid, subj, cls, patches, bits, attrs))
    if off != len(buf):
        raise ValueError("trailing bytes in embedding file")
    return out


def write_embeddings(path, records: Sequence[EmbeddingRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(embeddings_to_bytes(records))


def read_embeddings(path) -> List[EmbeddingRecord]:
    with open(path, "rb") as fh:
        return embeddings_from_bytes(fh.read())


@torch.no_grad()
def embed_corpus(checkpoint: ckpt.Checkpoint, manifest: Manifest, classes: Sequence[str],
                 with_patches: bool = False, side: Optional[int] = None, branch: str = "teacher",
                 batch: int = 64, layer: Optional[int] = None) -> List[EmbeddingRecord]:
    """Encode every manifest row with the frozen checkpoint encoder.

    Images are encoded at their own side unless ``side`` is given; a grid
    different from the training grid uses interpolated positions. ``layer``
    takes the (normalised) tokens of an intermediate block.
    """
    if checkpoint.stats is None:
        raise ValueError("checkpoint carries no intensity statistics")
    model = checkpoint.teacher() if branch == "teacher" else checkpoint.student()
    model.eval()
    p = checkpoint.encoder.patch_size
    records = []
    rows = manifest.rows
    for start in range(0, len(rows), batch):
        chunk = rows[start:start + batch]
        imgs = []
        for r in chunk:
            img = torch.from_numpy(load_image(r.image))
            if side is not None:
                img = resize(img, side)
            if img.shape[-1] % p:
                raise ValueError(f"{r.image}: side {img.shape[-1]} not divisible by patch size {p}")
            imgs.append(normalize(img, checkpoint.stats))
        out = model.forward_features(torch.stack(imgs), layer=layer)
        for i, r in enumerate(chunk):
            records.append(EmbeddingRecord(
                r.sample_id, r.subject, out["cls"][i].numpy().copy(),
                out["patches"][i].numpy().copy() if with_patches else None,
                np.array([c in r.labels for c in classes], dtype=bool), dict(r.attributes)))
    return records


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def group_kfold(groups: Sequence[str], k: int, seed: int) -> np.ndarray:
    """Fold id per sample; every group lands in exactly one fold.

    Groups are shuffled (keyed by ``seed``) and dealt to the currently
    smallest fold, which keeps fold sizes within one group of each other.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    uniq = sorted(set(groups))
    if len(uniq) < k:
        raise ValueError(f"only {len(uniq)} groups for {k} folds")
    order = keyed_rng(seed, "folds").permutation(len(uniq))
    counts: Dict[str, int] = {}
    for g in groups:
        counts[g] = counts.get(g, 0) + 1
    sizes = [0] * k
    fold_of: Dict[str, int] = {}
    for i in order:
        g = uniq[i]
        f = int(np.argmin(sizes))
        fold_of[g] = f
        sizes[f] += counts[g]
    folds = np.array([fold_of[g] for g in groups])
    check_subject_disjoint(list(groups), folds.tolist())
    return folds


# ---------------------------------------------------------------------------
# linear probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    folds: int = 5
    seeds: int = 1
    epochs: int = 300
    lr: float = 0.01
    weight_decay: float = 1e-4
    seed: int = 0


def _standardize(train: torch.Tensor, *others: torch.Tensor):
    mu = train.mean(0, keepdim=True)
    sd = train.std(0, unbiased=False, keepdim=True).clamp_min(1e-6)
    return [(t - mu) / sd for t in (train, *others)]


def fit_logistic(x: torch.Tensor, y: torch.Tensor, epochs: int, lr: float, wd: float,
                 multiclass: int = 0, seed: int = 0, trace: Optional[list] = None):
    """Full-batch AdamW on a linear model.

    ``multiclass == 0`` fits one independent sigmoid output per column of
    ``y``; otherwise a softmax over ``multiclass`` classes with integer
    ``y``. Returns ``(weight, bias)``.
    """
    f = x.shape[1]
    out = multiclass or y.shape[1]
    gen = keyed_torch_generator(seed, "probe-init")
    w = (torch.randn(f, out, generator=gen, dtype=x.dtype) * 0.01).requires_grad_(True)
    b = torch.zeros(out, dtype=x.dtype, requires_grad=True)
    params = {"weight": w, "bias": b}
    st = OptimState.for_params(params)
    for _ in range(epochs):
        logits = x @ w + b
        if multiclass:
            loss = F.cross_entropy(logits, y)
        else:
            loss = F.binary_cross_entropy_with_logits(logits, y.to(x.dtype))
        if trace is not None:
            trace.append(float(loss.detach()))
        gw, gb = torch.autograd.grad(loss, [w, b])
        adamw_step(st, params, {"weight": gw, "bias": gb}, lr, wd, no_decay=["bias"])
    return w.detach(), b.detach()


@dataclass
class ProbeReport:
    classes: List[str]
    per_class_auprc: Dict[str, Dict[str, float]]
    per_class_auroc: Dict[str, Dict[str, float]]
    macro_auprc: Dict[str, float]
    macro_auroc: Dict[str, float]
    runs: List[Dict[str, object]]

    def to_dict(self) -> dict:
        return {"kind": "linear_probe", "classes": self.classes,
                "per_class_auprc": self.per_class_auprc, "per_class_auroc": self.per_class_auroc,
                "macro_auprc": self.macro_auprc, "macro_auroc": self.macro_auroc, "runs": self.runs}


def train_linear_probe(embeddings: np.ndarray, labels: np.ndarray, subjects: Sequence[str],
                       cfg: ProbeConfig = ProbeConfig(), classes: Optional[Sequence[str]] = None) -> ProbeReport:
    """Subject-grouped k-fold probing with one sigmoid output per class.

    Every (seed, fold) run trains on the other folds and scores the held-out
    fold; the report carries mean and std over runs.
    """
    x_all = torch.as_tensor(np.asarray(embeddings), dtype=torch.float64)
    y_all = np.asarray(labels, dtype=bool)
    if y_all.ndim == 1:
        y_all = y_all[:, None]
    n_cls = y_all.shape[1]
    classes = list(classes) if classes is not None else [f"class{i}" for i in range(n_cls)]
    for c in range(n_cls):
        pos = int(y_all[:, c].sum())
        if pos < 2 or len(y_all) - pos < 2:
            raise ValueError(f"class {classes[c]!r} lacks two samples of each polarity")
    runs = []
    for s in range(cfg.seeds):
        fold_ids = group_kfold(list(subjects), cfg.folds, cfg.seed + s)
        for f in range(cfg.folds):
            tr, te = fold_ids != f, fold_ids == f
            xtr, xte = _standardize(x_all[tr], x_all[te])
            w, b = fit_logistic(xtr, torch.as_tensor(y_all[tr]), cfg.epochs, cfg.lr, cfg.weight_decay,
                                seed=cfg.seed + s)
            scores = (xte @ w + b).numpy()
            ap, roc = {}, {}
            for c, name in enumerate(classes):
                yc = y_all[te][:, c]
                if yc.all() or not yc.any():
                    raise ValueError(f"class {name!r} has a single polarity in fold {f}")
                ap[name] = auprc(scores[:, c], yc)
                roc[name] = auroc(scores[:, c], yc)
            runs.append({"seed": s, "fold": f, "auprc": ap, "auroc": roc,
                         "macro_auprc": float(np.mean(list(ap.values()))),
                         "macro_auroc": float(np.mean(list(roc.values())))})
    per_ap = {c: mean_std([r["auprc"][c] for r in runs]) for c in classes}
    per_roc = {c: mean_std([r["auroc"][c] for r in runs]) for c in classes}
    return ProbeReport(classes, per_ap, per_roc, mean_std([r["macro_auprc"] for r in runs]),
                       mean_std([r["macro_auroc"] for r in runs]), runs)


def kfold_linear_accuracy(embeddings: np.ndarray, targets: Sequence, k: int = 5, seed: int = 0,
                          groups: Optional[Sequence[str]] = None, epochs: int = 100,
                          lr: float = 0.05, weight_decay: float = 1e-4) -> Dict[str, object]:
    """k-fold multinomial logistic regression accuracy (mean, std over folds).

    Folds are grouped by ``groups`` when given, otherwise by sample.
    """
    x_all = torch.as_tensor(np.asarray(embeddings), dtype=torch.float64)
    names = sorted(set(targets))
    y_all = torch.tensor([names.index(t) for t in targets])
    if groups is None:
        groups = [str(i) for i in range(len(targets))]
    counts = {c: int((y_all == i).sum()) for i, c in enumerate(names)}
    if any(v < k for v in counts.values()):
        raise ValueError(f"need at least {k} samples per class, got {counts}")
    fold_ids = group_kfold(list(groups), k, seed)
    accs = []
    for f in range(k):
        tr, te = fold_ids != f, fold_ids == f
        missing = set(range(len(names))) - set(y_all[tr].tolist())
        if missing:
            raise ValueError(f"class {names[min(missing)]!r} absent from training fold {f}")
        xtr, xte = _standardize(x_all[tr], x_all[te])
        w, b = fit_logistic(xtr, y_all[tr], epochs, lr, weight_decay, multiclass=len(names), seed=seed)
        pred = (xte @ w + b).argmax(1)
        accs.append(float((pred == y_all[te]).double().mean()))
    return {"kind": "kfold_accuracy", "k": k, "classes": names, "fold_accuracy": accs, **mean_std(accs)}


# ---------------------------------------------------------------------------
# linear segmentation
# ---------------------------------------------------------------------------


@dataclass
class SegConfig:
    epochs: int = 100
    lr: float = 0.01
    batch: int = 80
    weight_decay: float = 0.0
    n_train: int = 0  # > 0 caps the number of training images
    positives_only: bool = True
    pos_weight: float = 0.0  # BCE weight on foreground pixels; 0 = sqrt(background/foreground)
    threshold: float = 0.5
    seed: int = 0


class LinearSegHead(torch.nn.Module):
    """One linear unit per patch token; logits upsampled bilinearly to pixels."""

    def __init__(self, features: int):
        super().__init__()
        self.linear = torch.nn.Linear(features, 1)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, patches: torch.Tensor, side: int) -> torch.Tensor:
        # patches: (B, g, g, F) -> pixel logits (B, side, side)
        logits = self.linear(patches).squeeze(-1).unsqueeze(1)
        return F.interpolate(logits, size=(side, side), mode="bilinear", align_corners=False)[:, 0]


def seg_param_count(features: int) -> int:
    return LinearSegHead(features).n_params


@dataclass
class SegReport:
    structure: str
    n_params: int
    n_train: int
    dice: Dict[str, float]
    per_case: List[float]
    best_epoch: int

    def to_dict(self) -> dict:
        return {"kind": "linear_seg", "structure": self.structure, "n_params": self.n_params,
                "n_train": self.n_train, "dice": self.dice, "n_test": len(self.per_case),
                "best_epoch": self.best_epoch}


def _as_grid(patches: np.ndarray) -> torch.Tensor:
    p = torch.as_tensor(np.asarray(patches), dtype=torch.float32)
    if p.dim() == 3:
        g = int(round(math.sqrt(p.shape[1])))
        p = p.reshape(p.shape[0], g, g, p.shape[2])
    return p


def predict_masks(head: LinearSegHead, patches, side: int, threshold: float = 0.5) -> np.ndarray:
    with torch.no_grad():
        return (torch.sigmoid(head(_as_grid(patches), side)) >= threshold).numpy()


def train_seg_linear(train_patches, train_masks, test_patches, test_masks, cfg: SegConfig = SegConfig(),
                     val_patches=None, val_masks=None, structure: str = "structure") -> SegReport:
    """Fit a per-patch linear unit against pixel masks and report test Dice.

    Patch inputs are (n, N, F) or (n, g, g, F); masks are (n, S, S) bool.
    With a validation set, the epoch of lowest validation loss is kept.
    """
    xtr, ytr = _as_grid(train_patches), torch.as_tensor(np.asarray(train_masks), dtype=torch.float32)
    if cfg.n_train:
        xtr, ytr = xtr[:cfg.n_train], ytr[:cfg.n_train]
    if not bool(ytr.any()):
        raise ValueError(f"structure {structure!r} is empty throughout the training set")
    side = ytr.shape[-1]
    torch.manual_seed(cfg.seed)
    head = LinearSegHead(xtr.shape[-1])
    with torch.no_grad():
        head.linear.weight.zero_()
        head.linear.bias.zero_()
    params = dict(head.named_parameters())
    st = OptimState.for_params(params)
    pos_weight = cfg.pos_weight
    if pos_weight == 0.0:
        frac = float(ytr.mean())
        pos_weight = math.sqrt((1.0 - frac) / frac)
    pos_weight = torch.tensor(pos_weight)
    best = (math.inf, 0, {k: v.detach().clone() for k, v in params.items()})
    xval = yval = None
    if val_patches is not None:
        xval = _as_grid(val_patches)
        yval = torch.as_tensor(np.asarray(val_masks), dtype=torch.float32)
    n = xtr.shape[0]
    for epoch in range(cfg.epochs):
        perm = keyed_rng(cfg.seed, "seg-perm", epoch).permutation(n)
        for start in range(0, n, cfg.batch):
            idx = torch.as_tensor(perm[start:start + cfg.batch])
            loss = F.binary_cross_entropy_with_logits(head(xtr[idx], side), ytr[idx], pos_weight=pos_weight)
            grads = dict(zip(params, torch.autograd.grad(loss, list(params.values()))))
            adamw_step(st, params, grads, cfg.lr, cfg.weight_decay, no_decay=["linear.bias"])
        if xval is not None:
            with torch.no_grad():
                vl = float(F.binary_cross_entropy_with_logits(head(xval, side), yval, pos_weight=pos_weight))
            if vl < best[0]:
                best = (vl, epoch + 1, {k: v.detach().clone() for k, v in params.items()})
    best_epoch = cfg.epochs
    if xval is not None:
        best_epoch = best[1]
        with torch.no_grad():
            for k, v in params.items():
                v.copy_(best[2][k])
    gt = np.asarray(test_masks, dtype=bool)
    pred = predict_masks(head, test_patches, side, cfg.threshold)
    keep = [i for i in range(len(gt)) if gt[i].any()] if cfg.positives_only else list(range(len(gt)))
    scores = [dice(pred[i], gt[i]) for i in keep]
    if not scores:
        raise ValueError("no test cases to score")
    return SegReport(structure, head.n_params, int(n), mean_std(scores), scores, best_epoch)


def load_masks(manifest: Manifest, structure: str, side: Optional[int] = None) -> np.ndarray:
    out = []
    for r in manifest.rows:
        if structure not in r.masks:
            raise ValueError(f"{r.image}: no {structure!r} mask")
        m = read_pgm(r.masks[structure]) > 127
        if side is not None and m.shape[0] != side:
            t = torch.from_numpy(m.astype(np.float32))
            m = resize(t, side).numpy() >= 0.5
        out.append(m)
    return np.stack(out)
