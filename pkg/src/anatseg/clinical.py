"""Evaluation metrics and clinical read-outs: Dice, Hausdorff, LV volume, FWHM scar."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import VolumeStack
from .errors import InputError

_CROSS = ndimage.generate_binary_structure(2, 1)
REGIONS = ("apex", "middle", "base")


def _same_shape(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """2|a & b| / (|a| + |b|); two empty masks agree perfectly."""
    a, b = _same_shape(a, b)
    den = int(a.sum()) + int(b.sum())
    if den == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / den


def boundary(mask) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (image border counts as outside)."""
    m = np.asarray(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def _coords(mask, spacing):
    ys, xs = np.nonzero(mask)
    sx, sy = spacing
    return np.column_stack([xs * float(sx), ys * float(sy)])


def _directed(src, dst):
    _, idx = cKDTree(dst).query(src, k=1)
    # recompute from the returned partners so the value does not depend on the tree's arithmetic
    diff = src - dst[idx]
    return float(np.sqrt(np.max(np.sum(diff * diff, axis=1))))


def hausdorff(a, b, spacing=(1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance between mask boundaries, in spacing units.

    ``spacing`` is (x, y), i.e. (column, row) pixel size.
    """
    a, b = _same_shape(a, b)
    if not a.any() or not b.any():
        raise InputError("Hausdorff distance needs two non-empty masks")
    pa, pb = _coords(boundary(a), spacing), _coords(boundary(b), spacing)
    return max(_directed(pa, pb), _directed(pb, pa))


def region_of(index: int, kept_count: int) -> str:
    """Apex, middle or base third of the kept range, counting from the apex."""
    if not 0 <= index < kept_count:
        raise InputError(f"index {index} outside 0..{kept_count - 1}")
    if index < math.ceil(kept_count / 3):
        return "apex"
    if index >= kept_count - kept_count // 3:
        return "base"
    return "middle"


def slice_volumes(stack: VolumeStack) -> np.ndarray:
    """Per-slice LV volume: each slice stands for a slab one slice gap thick."""
    masks = stack.require_masks()
    sx, sy = stack.spacing
    return np.array([np.count_nonzero(m.lv) * sx * sy * stack.slice_gap for m in masks], dtype=np.float64)


def lv_volume(stack: VolumeStack) -> float:
    """Myocardium plus blood pool, nearest-neighbour extended half a gap each way from every slice."""
    return float(slice_volumes(stack).sum())


@dataclass
class ScarQuant:
    threshold_intensity: float
    scar_pixel_count: int
    scar_area_mm2: float
    gz_pixel_count: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def fwhm_scar(image, fibrosis, spacing=(1.0, 1.0)) -> ScarQuant:
    """Split fibrosis into scar (at or above half the maximum intensity) and gray zone."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    fib = np.asarray(fibrosis).astype(bool)
    if img.shape != fib.shape:
        raise InputError(f"image {img.shape} and fibrosis mask {fib.shape} differ in shape")
    if not fib.any():
        return ScarQuant(0.0, 0, 0.0, 0)
    vals = img[fib]
    thr = 0.5 * float(vals.max())
    n_scar = int(np.count_nonzero(vals >= thr))
    return ScarQuant(thr, n_scar, n_scar * float(spacing[0]) * float(spacing[1]),
                     int(fib.sum()) - n_scar, degenerate=bool(vals.max() <= 0))


def relative_mse(pred, gt) -> float:
    """||pred - gt|| / ||gt||, the root error normalized by the reference norm."""
    p = np.atleast_1d(np.asarray(pred, dtype=np.float64))
    g = np.atleast_1d(np.asarray(gt, dtype=np.float64))
    if p.shape != g.shape:
        raise InputError(f"length mismatch {p.shape} vs {g.shape}")
    ng = np.linalg.norm(g)
    if ng == 0:
        raise InputError("reference vector has zero norm")
    return float(np.linalg.norm(p - g) / ng)


def evaluate_stack(pred: VolumeStack, gt: VolumeStack, kept: Optional[int] = None) -> dict:
    """Per-slice and per-region agreement between two aligned labelled stacks.

    Only the first ``kept`` slices (all by default) are scored.
    """
    if len(pred) != len(gt) or pred.shape != gt.shape:
        raise InputError("predicted and reference stacks are not aligned")
    pm, gm = pred.require_masks(), gt.require_masks()
    n = len(gt) if kept is None else int(kept)
    if not 1 <= n <= len(gt):
        raise InputError(f"kept count {n} outside 1..{len(gt)}")
    spacing = gt.spacing
    rows = []
    for i in range(n):
        p, g = pm[i], gm[i]
        hd = hausdorff(p.myocardium, g.myocardium, spacing) if p.myocardium.any() and g.myocardium.any() else None
        sp = fwhm_scar(pred.images[i], p.fibrosis, spacing)
        sg = fwhm_scar(gt.images[i], g.fibrosis, spacing)
        rows.append({"index": i, "region": region_of(i, n), "dice_lv": dice(p.lv, g.lv),
                     "dice_myo": dice(p.myocardium, g.myocardium), "hausdorff_mm": hd,
                     "scar_pred": sp.scar_pixel_count, "scar_gt": sg.scar_pixel_count})
    regions = {}
    for r in REGIONS:
        sel = [row for row in rows if row["region"] == r]
        hds = [row["hausdorff_mm"] for row in sel if row["hausdorff_mm"] is not None]
        regions[r] = {"count": len(sel),
                      "dice_lv_mean": float(np.mean([row["dice_lv"] for row in sel])) if sel else None,
                      "dice_myo_mean": float(np.mean([row["dice_myo"] for row in sel])) if sel else None,
                      "dice_myo_values": [row["dice_myo"] for row in sel],
                      "hausdorff_mean": float(np.mean(hds)) if hds else None}
    vp = float(slice_volumes(pred)[:n].sum())
    vg = float(slice_volumes(gt)[:n].sum())
    scar_p = np.array([row["scar_pred"] for row in rows], dtype=np.float64)
    scar_g = np.array([row["scar_gt"] for row in rows], dtype=np.float64)
    return {"kept": n, "slices": rows, "regions": regions,
            "volume_pred_mm3": vp, "volume_gt_mm3": vg,
            "volume_rel_error": relative_mse(vp, vg) if vg > 0 else None,
            "scar_rel_error": relative_mse(scar_p, scar_g) if scar_g.any() else None}
