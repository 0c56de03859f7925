"""Dice, Jaccard, ASD and 95HD, plus sliding-window inference over full volumes.

Surface distances are in voxel units unless a spacing is given. Surfaces use
6-connectivity, and 95HD is the larger of the two directed 95th percentiles
(linear interpolation).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from hcmt.errors import ShapeError

METRIC_NAMES = ("dice", "jaccard", "asd", "hd95")
UNDEFINED = "undefined"

_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass
class CaseScore:
    case_id: str
    dice: float
    jaccard: float
    asd: float
    hd95: float
    flag: str = ""

    @property
    def distances_defined(self) -> bool:
        return math.isfinite(self.asd) and math.isfinite(self.hd95)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} vs ground truth {gt.shape}")
    return pred.astype(bool), gt.astype(bool)


def dice_jaccard(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Percent Dice and Jaccard; two empty masks count as a perfect match."""
    p, g = _check_pair(pred, gt)
    inter = int(np.logical_and(p, g).sum())
    sp, sg = int(p.sum()), int(g.sum())
    if sp + sg == 0:
        return 100.0, 100.0
    return 200.0 * inter / (sp + sg), 100.0 * inter / (sp + sg - inter)


def extract_surface(mask: np.ndarray) -> np.ndarray:
    """Boolean grid of surface voxels: foreground with a background 6-neighbour or on the grid border."""
    m = mask.astype(bool)
    if not m.any():
        return np.zeros_like(m)
    interior = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return m & ~interior


def directed_surface_distances(src_surface: np.ndarray, dst_surface: np.ndarray, spacing=None) -> np.ndarray:
    """Distance from each ``src`` surface voxel to the nearest ``dst`` surface voxel."""
    dist = ndimage.distance_transform_edt(~dst_surface, sampling=spacing)
    return dist[src_surface]


def surface_distances(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float] | None = None) -> tuple[float, float]:
    """(ASD, 95HD); ``(nan, nan)`` when either mask is empty."""
    p, g = _check_pair(pred, gt)
    if not p.any() or not g.any():
        return math.nan, math.nan
    sp, sg = extract_surface(p), extract_surface(g)
    d_pg = directed_surface_distances(sp, sg, spacing)
    d_gp = directed_surface_distances(sg, sp, spacing)
    asd = (d_pg.mean() + d_gp.mean()) / 2
    hd95 = max(np.percentile(d_pg, 95), np.percentile(d_gp, 95))
    return float(asd), float(hd95)


def score_case(pred: np.ndarray, gt: np.ndarray, case_id: str = "", spacing=None) -> CaseScore:
    dice, jac = dice_jaccard(pred, gt)
    asd, hd95 = surface_distances(pred, gt, spacing)
    flag = ""
    if not pred.any():
        flag = "empty_prediction"
    elif not gt.any():
        flag = "empty_ground_truth"
    return CaseScore(case_id, dice, jac, asd, hd95, flag)


def aggregate(scores: Sequence[CaseScore], empty_policy: str = "exclude") -> dict[str, float]:
    """Mean of each metric. Undefined distances are dropped (``exclude``) or
    replaced by the grid diagonal passed as ``empty_policy='penalty:<value>'``."""
    out = {"dice": float(np.mean([s.dice for s in scores])) if scores else math.nan,
           "jaccard": float(np.mean([s.jaccard for s in scores])) if scores else math.nan}
    penalty = None
    if empty_policy.startswith("penalty:"):
        penalty = float(empty_policy.split(":", 1)[1])
    for name in ("asd", "hd95"):
        vals = [getattr(s, name) for s in scores]
        if penalty is not None:
            vals = [v if math.isfinite(v) else penalty for v in vals]
        vals = [v for v in vals if math.isfinite(v)]
        out[name] = float(np.mean(vals)) if vals else math.nan
    out["n_cases"] = len(scores)
    out["n_undefined"] = sum(not s.distances_defined for s in scores)
    return out


def _fmt(v: float) -> str:
    return f"{v:.4f}" if math.isfinite(v) else UNDEFINED


def write_case_csv(path: str | Path, scores: Sequence[CaseScore], metrics: Sequence[str] = METRIC_NAMES) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["case_id", *metrics, "flag"])
        for s in scores:
            w.writerow([s.case_id, *(_fmt(getattr(s, m)) for m in metrics), s.flag])
    return path


def read_case_csv(path: str | Path) -> list[dict]:
    with Path(path).open() as f:
        return list(csv.DictReader(f))


def format_table(rows: dict[str, dict], metrics: Sequence[str] = METRIC_NAMES, label: str = "Method") -> str:
    """Plain-text table with one row per method: Dice, Jaccard (percent), ASD, 95HD (voxel)."""
    headers = {"dice": "Dice(%)", "jaccard": "Jaccard(%)", "asd": "ASD", "hd95": "95HD"}
    width = max([len(label)] + [len(k) for k in rows]) + 2
    lines = [label.ljust(width) + "".join(headers[m].rjust(12) for m in metrics)]
    for name, agg in rows.items():
        lines.append(name.ljust(width) + "".join(
            (f"{agg[m]:.2f}" if math.isfinite(agg[m]) else UNDEFINED).rjust(12) for m in metrics))
    return "\n".join(lines)


# ---------------------------------------------------------------- inference

def _starts(size: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] + patch < size:
        starts.append(size - patch)
    return starts


@torch.no_grad()
def sliding_window_predict(network, volume: np.ndarray, patch_shape: Sequence[int],
                           stride: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray, dict]:
    """Tile ``volume`` with overlapping patches, average the scale-0 probabilities, take argmax.

    Returns ``(mask, probabilities, info)``; ``probabilities`` is ``C x H x W x D``.
    Axes shorter than the patch are reflection-padded and the result cropped
    back, which is reported in ``info['padded']``.
    """
    patch_shape = tuple(int(p) for p in patch_shape)
    stride = tuple(max(p // 2, 1) for p in patch_shape) if stride is None else tuple(int(s) for s in stride)
    if any(s > p or s < 1 for s, p in zip(stride, patch_shape)):
        raise ShapeError(f"stride {stride} must lie in 1..patch {patch_shape} per axis")
    orig_shape = volume.shape
    pads = [(0, 0)] * 3
    padded = any(n < p for n, p in zip(orig_shape, patch_shape))
    if padded:
        pads = [((p - n) // 2, p - n - (p - n) // 2) if n < p else (0, 0) for n, p in zip(orig_shape, patch_shape)]
        volume = np.pad(volume, pads, mode="reflect")

    was_training = getattr(network, "training", False)
    if hasattr(network, "eval"):
        network.eval()
    try:
        dtype = next(network.parameters()).dtype if hasattr(network, "parameters") else torch.float32
    except StopIteration:
        dtype = torch.float32
    probs = None
    counts = np.zeros(volume.shape, np.float64)
    for x in _starts(volume.shape[0], patch_shape[0], stride[0]):
        for y in _starts(volume.shape[1], patch_shape[1], stride[1]):
            for z in _starts(volume.shape[2], patch_shape[2], stride[2]):
                box = (slice(x, x + patch_shape[0]), slice(y, y + patch_shape[1]), slice(z, z + patch_shape[2]))
                inp = torch.as_tensor(np.ascontiguousarray(volume[box]), dtype=dtype)[None, None]
                out = torch.softmax(network(inp)[0], dim=1)[0].double().numpy()
                if probs is None:
                    probs = np.zeros((out.shape[0],) + volume.shape, np.float64)
                probs[(slice(None),) + box] += out
                counts[box] += 1
    if was_training and hasattr(network, "train"):
        network.train()
    probs /= counts
    if padded:
        crop = tuple(slice(a, a + n) for (a, _), n in zip(pads, orig_shape))
        probs = probs[(slice(None),) + crop]
    mask = np.argmax(probs, axis=0).astype(np.uint8)
    return mask, probs, {"padded": padded, "stride": stride}


def evaluate_cases(network, cases, patch_shape: Sequence[int], stride: Sequence[int] | None = None,
                   spacing_aware: bool = False) -> list[CaseScore]:
    """Sliding-window predict every labeled case and score it against its mask."""
    scores = []
    for case in cases:
        mask, _, info = sliding_window_predict(network, case.volume.intensities, patch_shape, stride)
        score = score_case(mask, case.mask, case.id, case.volume.spacing if spacing_aware else None)
        if info["padded"]:
            score.flag = ";".join(filter(None, [score.flag, "padded"]))
        scores.append(score)
    return scores
