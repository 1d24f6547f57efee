"""Pseudo-enhanced images with known scar, made from non-enhanced images and their masks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import FIBROSIS, MYOCARDIUM, IntensitySlice, SegMask
from .errors import InputError, ParameterError

SCAR_FRACTION_RANGE = (0.05, 0.4)


@dataclass(frozen=True)
class SynthParams:
    scar_fraction: Optional[float] = None  # None: drawn uniformly from SCAR_FRACTION_RANGE per image
    blur_sigma: float = 1.5
    enhancement_gain: float = 1.0
    speckle_sigma: float = 0.08
    rng_seed: int = 0

    def __post_init__(self):
        if self.scar_fraction is not None and not 0.0 <= self.scar_fraction <= 1.0:
            raise ParameterError("scar_fraction must lie in [0, 1]")
        if min(self.blur_sigma, self.enhancement_gain, self.speckle_sigma) < 0:
            raise ParameterError("synthesis parameters must be non-negative")


def _myo(myo) -> np.ndarray:
    if isinstance(myo, SegMask):
        return myo.myocardium
    return np.asarray(myo).astype(bool)


def sample_pseudo_scar(myo, fraction: float, seed) -> np.ndarray:
    """Grow a blob of ``round(fraction * |myo|)`` myocardium pixels by randomized BFS.

    The blob starts at a random myocardium pixel and adds a uniformly chosen
    frontier pixel (4-neighbourhood) at each step, so it is connected whenever
    the myocardium component it starts in is large enough. If that component
    runs out, growth restarts from a fresh random pixel.
    """
    m = _myo(myo)
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError("fraction must lie in [0, 1]")
    total = int(m.sum())
    if total == 0:
        raise InputError("myocardium is empty")
    target = int(round(fraction * total))
    rng = np.random.default_rng(seed)
    h, w = m.shape
    scar = np.zeros_like(m)
    queued = np.zeros_like(m)
    count = 0
    frontier: list = []
    while count < target:
        if not frontier:
            free = np.flatnonzero(m & ~scar)
            start = int(free[rng.integers(len(free))])
            frontier.append(divmod(start, w))
            queued[frontier[0]] = True
        i = int(rng.integers(len(frontier)))
        frontier[i], frontier[-1] = frontier[-1], frontier[i]
        y, x = frontier.pop()
        scar[y, x] = True
        count += 1
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w and m[ny, nx] and not queued[ny, nx]:
                queued[ny, nx] = True
                frontier.append((ny, nx))
    return scar


def gaussian_kernel(sigma: float) -> np.ndarray:
    r = int(math.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(img, k, axis):
    r = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    p = np.pad(img, pad, mode="symmetric")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for i, wt in enumerate(k):
        out += wt * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(image, sigma: float) -> np.ndarray:
    """Separable Gaussian, kernel radius ceil(3 sigma), mirrored borders."""
    if sigma < 0:
        raise ParameterError("sigma must be non-negative")
    img = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    return _blur_axis(_blur_axis(img, k, 0), k, 1)


def histogram_match(src, ref) -> np.ndarray:
    """Quantile mapping: each source value goes to the reference value at the same CDF height."""
    s = np.asarray(src.data if isinstance(src, IntensitySlice) else src, dtype=np.float64)
    r = np.asarray(ref.data if isinstance(ref, IntensitySlice) else ref, dtype=np.float64)
    if s.size == 0 or r.size == 0:
        raise InputError("histogram matching needs non-empty images")
    s_vals, s_inv, s_cnt = np.unique(s.ravel(), return_inverse=True, return_counts=True)
    r_vals, r_cnt = np.unique(r.ravel(), return_counts=True)
    s_cdf = np.cumsum(s_cnt) / s.size
    r_cdf = np.cumsum(r_cnt) / r.size
    mapped = np.interp(s_cdf, r_cdf, r_vals)
    return mapped[s_inv].reshape(s.shape)


def speckle_noise(image, sigma: float, seed) -> np.ndarray:
    if sigma < 0:
        raise ParameterError("sigma must be non-negative")
    img = np.asarray(image, dtype=np.float64)
    n = np.random.default_rng(seed).normal(0.0, sigma, img.shape) if sigma > 0 else 0.0
    return np.clip(img * (1.0 + n), 0.0, 255.0)


def overlay_scar(image, blurred, bp_level: float, gain: float) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return img + gain * blurred * (bp_level - img)


def cine_to_lge(cine: IntensitySlice, myo: SegMask, ref: IntensitySlice, params: SynthParams = SynthParams()):
    """Return ``(pseudo-enhanced slice, labels with the sampled scar as fibrosis)``."""
    if cine.data.shape != myo.labels.shape:
        raise InputError(f"image {cine.data.shape} and mask {myo.labels.shape} differ in shape")
    bp = myo.blood_pool
    if not bp.any():
        raise InputError("mask has no blood pool to take the enhancement level from")
    s_frac, s_scar, s_noise = np.random.SeedSequence(params.rng_seed).spawn(3)
    frac = params.scar_fraction
    if frac is None:
        frac = float(np.random.default_rng(s_frac).uniform(*SCAR_FRACTION_RANGE))
    scar = sample_pseudo_scar(myo, frac, s_scar)
    blurred = gaussian_blur(scar.astype(np.float64), params.blur_sigma)
    bp_level = float(np.median(cine.data[bp]))
    img = overlay_scar(cine.data, blurred, bp_level, params.enhancement_gain)
    img = histogram_match(img, ref)
    img = speckle_noise(img, params.speckle_sigma, s_noise)
    labels = myo.labels.copy()
    labels[labels == FIBROSIS] = MYOCARDIUM
    labels[scar] = FIBROSIS
    return cine.replace(img), SegMask(labels)


def synth_stack(stack, refs, params: SynthParams = SynthParams()):
    """Apply :func:`cine_to_lge` slice by slice with per-slice seeds and a reference drawn per slice."""
    if not refs:
        raise InputError("need at least one reference image")
    root = np.random.SeedSequence(params.rng_seed)
    pick = np.random.default_rng(root.spawn(1)[0])
    out = []
    for (img, mask), child in zip(stack.slices, root.spawn(len(stack))):
        if mask is None:
            raise InputError("every slice needs a mask for synthesis")
        ref = refs[int(pick.integers(len(refs)))]
        seed = int(child.generate_state(1, np.uint64)[0])
        p = SynthParams(params.scar_fraction, params.blur_sigma, params.enhancement_gain,
                        params.speckle_sigma, seed)
        out.append(cine_to_lge(img, mask, ref, p))
    return stack.with_slices(out)
