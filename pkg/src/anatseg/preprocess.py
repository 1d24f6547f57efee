"""Intensity standardization: windowing, rotation, CLAHE, crop/pad and range normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import IntensitySlice, SegMask, StudyMetadata, VolumeStack
from .errors import InputError, ParameterError

N_BINS = 256


def apply_window(sl: IntensitySlice, meta: StudyMetadata) -> IntensitySlice:
    """Rescale to display values, then apply a linear window ramp when one is given."""
    v = sl.data * meta.rescale_slope + meta.rescale_intercept
    if meta.window_center is None or meta.window_width is None:
        return sl.replace(v)
    c, w = meta.window_center, meta.window_width
    if not w > 0:
        raise ParameterError("window width must be positive")
    return sl.replace(255.0 * np.clip((v - (c - w / 2.0)) / w, 0.0, 1.0))


def quarter_rotate(x, k: int):
    """Rotate counterclockwise by 90*k degrees; spacings swap for odd k."""
    if k not in (0, 1, 2, 3):
        raise ParameterError(f"quarter turns must be in 0..3, got {k}")
    if isinstance(x, IntensitySlice):
        sx, sy = (x.px_spacing_y, x.px_spacing_x) if k % 2 else (x.px_spacing_x, x.px_spacing_y)
        return IntensitySlice(np.rot90(x.data, k), sx, sy)
    if isinstance(x, SegMask):
        return SegMask(np.rot90(x.labels, k))
    return np.rot90(np.asarray(x), k).copy()


# -- CLAHE --------------------------------------------------------------------

def to_bins(data) -> np.ndarray:
    """Quantize to 256 bins spanning the data range."""
    d = np.asarray(data, dtype=np.float64)
    lo, hi = d.min(), d.max()
    if hi <= lo:
        return np.zeros(d.shape, dtype=np.int64)
    return np.minimum((d - lo) / (hi - lo) * N_BINS, N_BINS - 1).astype(np.int64)


def _tile_edges(n, t):
    return np.round(np.linspace(0, n, t + 1)).astype(int)


def _clipped_lut(bins, clip_limit):
    npx = bins.size
    hist = np.bincount(bins.ravel(), minlength=N_BINS).astype(np.float64)
    limit = max(1.0, clip_limit * npx / N_BINS)
    excess = np.maximum(hist - limit, 0.0).sum()
    hist = np.minimum(hist, limit) + excess / N_BINS
    return 255.0 * np.cumsum(hist) / npx


def _interp_weights(n, edges):
    centres = (edges[:-1] + edges[1:]) / 2.0 - 0.5
    pos = np.arange(n, dtype=np.float64)
    i1 = np.clip(np.searchsorted(centres, pos), 0, len(centres) - 1)
    i0 = np.clip(i1 - 1, 0, len(centres) - 1)
    i0 = np.where(pos >= centres[i1], i1, i0)
    span = centres[i1] - centres[i0]
    w = np.where(span > 0, (pos - centres[i0]) / np.where(span > 0, span, 1.0), 0.0)
    return i0, i1, np.clip(w, 0.0, 1.0)


def clahe(sl: IntensitySlice, tiles=(8, 8), clip_limit: float = 2.0) -> IntensitySlice:
    """Contrast-limited adaptive histogram equalization.

    ``clip_limit`` is relative to a flat histogram: a bin may hold at most
    ``clip_limit * tile_pixels / 256`` counts, the excess being spread evenly.
    Tile mappings are blended bilinearly between tile centres.
    """
    ty, tx = (tiles, tiles) if np.isscalar(tiles) else tiles
    if ty < 1 or tx < 1:
        raise ParameterError("need at least one tile per axis")
    if clip_limit <= 0:
        raise ParameterError("clip_limit must be positive")
    h, w = sl.data.shape
    if ty > h or tx > w:
        raise ParameterError(f"{ty}x{tx} tiles do not fit a {h}x{w} image")
    bins = to_bins(sl.data)
    ey, ex = _tile_edges(h, ty), _tile_edges(w, tx)
    luts = np.empty((ty, tx, N_BINS))
    for i in range(ty):
        for j in range(tx):
            luts[i, j] = _clipped_lut(bins[ey[i]:ey[i + 1], ex[j]:ex[j + 1]], clip_limit)
    y0, y1, wy = _interp_weights(h, ey)
    x0, x1, wx = _interp_weights(w, ex)
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    WY, WX = np.meshgrid(wy, wx, indexing="ij")
    out = ((1 - WY) * (1 - WX) * luts[Y0, X0, bins] + (1 - WY) * WX * luts[Y0, X1, bins]
           + WY * (1 - WX) * luts[Y1, X0, bins] + WY * WX * luts[Y1, X1, bins])
    return sl.replace(np.clip(out, 0.0, 255.0))


# -- geometry -----------------------------------------------------------------

def _crop_pad_array(a, size, fill=0):
    h, w = a.shape
    oy, ox = (size - h) // 2, (size - w) // 2
    out = np.full((size, size), fill, dtype=a.dtype)
    sy0, sx0 = max(0, -oy), max(0, -ox)
    dy0, dx0 = max(0, oy), max(0, ox)
    ny, nx = min(h - sy0, size - dy0), min(w - sx0, size - dx0)
    out[dy0:dy0 + ny, dx0:dx0 + nx] = a[sy0:sy0 + ny, sx0:sx0 + nx]
    return out, (oy, ox)


def crop_or_pad(x, size: int):
    """Centre-crop and/or zero-pad to ``size`` x ``size``.

    Returns ``(result, (oy, ox))``: input pixel (y, x) lands at (y + oy, x + ox).
    """
    if size < 1:
        raise ParameterError("size must be positive")
    if isinstance(x, IntensitySlice):
        out, off = _crop_pad_array(x.data, size)
        return x.replace(out), off
    if isinstance(x, SegMask):
        out, off = _crop_pad_array(x.labels, size)
        return SegMask(out), off
    return _crop_pad_array(np.asarray(x), size)


def uncrop(x, offsets, shape, fill=0) -> np.ndarray:
    """Undo :func:`crop_or_pad` onto a grid of the original ``shape``; lost pixels get ``fill``."""
    a = np.asarray(x)
    oy, ox = offsets
    h, w = shape
    out = np.full((h, w), fill, dtype=a.dtype)
    ys = np.arange(h) + oy
    xs = np.arange(w) + ox
    vy = (ys >= 0) & (ys < a.shape[0])
    vx = (xs >= 0) & (xs < a.shape[1])
    out[np.ix_(vy, vx)] = a[np.ix_(ys[vy], xs[vx])]
    return out


def padded_region(shape, size, offsets) -> np.ndarray:
    """Pixels of the ``size`` grid that came from the original image (not padding)."""
    ones = np.ones(shape, dtype=bool)
    return _crop_pad_array(ones, size)[0]


# -- range normalization ------------------------------------------------------

def scale_to_byte_range(sl: IntensitySlice, region=None) -> IntensitySlice:
    """Min-max scale the region to [0, 255]; everything outside the region becomes 0."""
    region = np.ones(sl.data.shape, dtype=bool) if region is None else np.asarray(region, dtype=bool)
    if not region.any():
        raise InputError("scaling region is empty")
    vals = sl.data[region]
    lo, hi = vals.min(), vals.max()
    out = np.zeros_like(sl.data)
    if hi > lo:
        out[region] = np.clip(255.0 * (vals - lo) / (hi - lo), 0.0, 255.0)
    return sl.replace(out)


@dataclass(frozen=True)
class NormalizationContext:
    region: np.ndarray
    bp_median: float

    def __post_init__(self):
        region = np.asarray(self.region, dtype=bool)
        if not region.any():
            raise InputError("normalization region is empty")
        if not self.bp_median > 0:
            raise ParameterError("blood-pool median must be positive")
        object.__setattr__(self, "region", region)


def bloodpool_median(stack: VolumeStack) -> float:
    """Median intensity over every blood-pool pixel of the volume."""
    vals = [img.data[m.blood_pool] for img, m in stack.slices if m is not None]
    vals = np.concatenate(vals) if vals else np.array([])
    if vals.size == 0:
        raise InputError("no blood-pool pixels; supply the median explicitly")
    return float(np.median(vals))


def normalize_by_bloodpool_median(volume: VolumeStack, ctx: NormalizationContext) -> VolumeStack:
    """Divide by twice the blood-pool median, min-max stretch over the region, clamp to [0, 255]."""
    out = []
    for img, mask in volume.slices:
        if img.data.shape != ctx.region.shape:
            raise InputError("normalization region does not match the slice shape")
        v = img.data / (2.0 * ctx.bp_median)
        vals = v[ctx.region]
        lo, hi = vals.min(), vals.max()
        if not hi > lo:
            raise InputError("intensities are constant over the normalization region")
        v = 255.0 * (v - lo) / (hi - lo)
        out.append((img.replace(np.minimum(255.0, np.maximum(0.0, v))), mask))
    return volume.with_slices(out)


def preprocess_stack(stack: VolumeStack, meta: StudyMetadata, tiles=(8, 8), clip_limit: float = 2.0,
                     size: int = 192, turns=None) -> VolumeStack:
    """Window, rotate, CLAHE, crop/pad and byte-scale every slice; masks follow the geometry."""
    k = stack.orientation_turns if turns is None else turns
    out = []
    for img, mask in stack.slices:
        img = quarter_rotate(apply_window(img, meta), k)
        img = clahe(img, tiles, clip_limit)
        shape = img.data.shape
        img, off = crop_or_pad(img, size)
        img = scale_to_byte_range(img, padded_region(shape, size, off))
        if mask is not None:
            mask, _ = crop_or_pad(quarter_rotate(mask, k), size)
        out.append((img, mask))
    return VolumeStack(tuple(out), stack.slice_gap, 0)
