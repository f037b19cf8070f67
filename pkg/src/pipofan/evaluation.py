"""Overlap and surface-distance metrics, metric reports and cross-validation folds."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .exceptions import ConfigurationError, ContractError, MetricUndefinedError


def _mask(x, cls: Optional[int]) -> np.ndarray:
    x = np.asarray(x)
    return (x == cls) if cls is not None else x.astype(bool)


def _pair(pred, truth, cls):
    p, t = _mask(pred, cls), _mask(truth, cls)
    if p.shape != t.shape:
        raise ContractError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def dice_per_case(pred, truth, cls: Optional[int] = None) -> float:
    """Dice of class ``cls`` (or of two binary masks when ``cls`` is None); 1.0 if both are empty."""
    p, t = _pair(pred, truth, cls)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def dice_global(preds: Sequence, truths: Sequence, cls: Optional[int] = None) -> float:
    """Dice over voxel counts pooled across all cases."""
    if len(preds) == 0 or len(preds) != len(truths):
        raise ContractError("need equally long, non-empty lists of predictions and truths")
    inter = total = 0
    for pred, truth in zip(preds, truths):
        p, t = _pair(pred, truth, cls)
        inter += int(np.logical_and(p, t).sum())
        total += int(p.sum()) + int(t.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face-adjacent background neighbour.

    Voxels outside the array count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def surface_distances(pred, truth, spacing, cls: Optional[int] = None):
    """``(ASSD, MSSD)`` in millimetres between the surfaces of two masks.

    ASSD pools the distances from each surface to the other and averages
    them; MSSD is the symmetric Hausdorff distance.
    """
    p, t = _pair(pred, truth, cls)
    if not p.any() or not t.any():
        raise MetricUndefinedError("surface distance is undefined for an empty mask")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != p.ndim:
        raise ContractError(f"spacing {spacing} does not match {p.ndim}D masks")
    sp, st = surface_voxels(p), surface_voxels(t)
    to_t = ndimage.distance_transform_edt(~st, sampling=spacing)[sp]
    to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)[st]
    both = np.concatenate([to_t, to_p])
    return float(both.mean()), float(both.max())


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignments: Mapping[str, int]

    def folds(self) -> list:
        out = [[] for _ in range(self.k)]
        for vid, f in self.assignments.items():
            out[f].append(vid)
        return out

    def sizes(self) -> list:
        return [len(f) for f in self.folds()]

    def train_val(self, fold: int):
        val = [v for v, f in self.assignments.items() if f == fold]
        train = [v for v, f in self.assignments.items() if f != fold]
        return train, val

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignments": dict(self.assignments)}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "FoldPlan":
        d = json.loads(Path(path).read_text())
        return cls(int(d["k"]), int(d["seed"]), {str(k): int(v) for k, v in d["assignments"].items()})


def make_folds(volume_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle ids with ``seed`` and deal them into ``k`` folds of near-equal size."""
    ids = [str(v) for v in volume_ids]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("volume ids must be unique")
    if not 1 <= k <= len(ids):
        raise ConfigurationError(f"cannot split {len(ids)} volumes into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan(k, seed, {ids[i]: pos % k for pos, i in enumerate(order)})


REPORT_FIELDS = ("organ", "case_id", "dice", "assd", "mssd")


def evaluate_cases(preds: Mapping[str, np.ndarray], truths: Mapping[str, np.ndarray],
                   class_names: Sequence[str], spacings: Optional[Mapping[str, tuple]] = None) -> list:
    """Per-case rows plus per-organ mean, per-organ global and macro-average rows.

    Surface distances are None when either mask is empty.
    """
    rows = []
    cases = sorted(preds)
    for cls in range(1, len(class_names)):
        organ = class_names[cls]
        dices = []
        for cid in cases:
            pred, truth = preds[cid], truths[cid]
            d = dice_per_case(pred, truth, cls)
            dices.append(d)
            spacing = (spacings or {}).get(cid, (1.0,) * np.ndim(pred))
            try:
                assd, mssd = surface_distances(pred, truth, spacing, cls)
            except MetricUndefinedError:
                assd = mssd = None
            rows.append({"organ": organ, "case_id": cid, "dice": d, "assd": assd, "mssd": mssd})
        if cases:
            rows.append({"organ": organ, "case_id": "mean", "dice": float(np.mean(dices)),
                         "assd": None, "mssd": None})
            rows.append({"organ": organ, "case_id": "global",
                         "dice": dice_global([preds[c] for c in cases], [truths[c] for c in cases], cls),
                         "assd": None, "mssd": None})
    means = [r["dice"] for r in rows if r["case_id"] == "mean"]
    if means:
        rows.append({"organ": "macro", "case_id": "mean", "dice": float(np.mean(means)),
                     "assd": None, "mssd": None})
    return rows


def write_report(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in REPORT_FIELDS})
    return path
