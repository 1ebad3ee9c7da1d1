"""CSV manifests: one row per image with subject, labels, masks, attributes and split."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from .augment import resize
from .pnm import load_image

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass
class Row:
    image: Path
    subject: str
    labels: List[str]
    masks: Dict[str, Path] = field(default_factory=dict)
    attributes: Dict[str, str] = field(default_factory=dict)
    split: str = "train"

    @property
    def sample_id(self) -> str:
        return self.image.stem


@dataclass
class Manifest:
    path: Path
    rows: List[Row]

    def __len__(self) -> int:
        return len(self.rows)

    def subset(self, n: Optional[int] = None, splits: Optional[Iterable[str]] = None) -> "Manifest":
        rows = self.rows
        if splits is not None:
            keep = set(splits)
            rows = [r for r in rows if r.split in keep]
        if n is not None:
            rows = rows[:n]
        return Manifest(self.path, list(rows))

    def label_matrix(self, classes: Sequence[str]) -> np.ndarray:
        return np.array([[c in r.labels for c in classes] for r in self.rows], dtype=bool)

    def subjects(self) -> List[str]:
        return [r.subject for r in self.rows]

    def load_images(self, side: Optional[int] = None) -> List[torch.Tensor]:
        """Dequantised images, bilinearly resized to ``side`` when given."""
        out = []
        for r in self.rows:
            img = torch.from_numpy(load_image(r.image))
            out.append(resize(img, side) if side is not None else img)
        return out


def _pairs(text: str) -> Dict[str, str]:
    out = {}
    for item in filter(None, text.split(";")):
        if "=" not in item:
            raise ManifestError(f"malformed key=value item {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    rows: List[Row] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "image" not in reader.fieldnames or "subject" not in reader.fieldnames:
            raise ManifestError(f"{path}: header must contain at least image and subject columns")
        for lineno, rec in enumerate(reader, start=2):
            subject = (rec.get("subject") or "").strip()
            if not subject:
                raise ManifestError(f"{path}:{lineno}: empty subject id")
            split = (rec.get("split") or "train").strip()
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: split tag {split!r} not in {SPLITS}")
            img = base / rec["image"]
            masks = {k: base / v for k, v in _pairs(rec.get("masks") or "").items()}
            if check_files:
                for p in [img, *masks.values()]:
                    if not p.is_file():
                        raise FileNotFoundError(f"{path}:{lineno}: missing file {p}")
            labels = [x for x in (rec.get("labels") or "").split(";") if x]
            rows.append(Row(img, subject, labels, masks, _pairs(rec.get("attributes") or ""), split))
    if not rows:
        raise ManifestError(f"{path}: manifest has no rows")
    check_subject_disjoint([r.subject for r in rows], [r.split for r in rows])
    return Manifest(path, rows)


def check_subject_disjoint(subjects: Sequence[str], groups: Sequence) -> None:
    """Raise if any subject appears under more than one split/fold label."""
    seen: Dict[str, set] = defaultdict(set)
    for s, g in zip(subjects, groups):
        seen[s].add(g)
    bad = [s for s, gs in seen.items() if len(gs) > 1]
    if bad:
        raise ManifestError(f"subject {bad[0]!r} straddles splits {sorted(map(str, seen[bad[0]]))}")
