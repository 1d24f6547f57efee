"""Synthetic short-axis phantoms and the perturbation suite used for desk-scale checks.

A phantom is an elliptical annulus of myocardium around a blood-pool cavity,
optionally opened into a "C" and optionally carrying a pseudo-scar blob.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import IntensitySlice, SegMask, VolumeStack, BACKGROUND, BLOOD_POOL, MYOCARDIUM, FIBROSIS
from .errors import InputError

BG_LEVEL, BP_LEVEL, MYO_LEVEL, SCAR_LEVEL = 30.0, 200.0, 60.0, 210.0


def phantom_labels(rng: np.random.Generator, size: int = 64, c_gap: bool = False,
                   scar: bool = False) -> np.ndarray:
    """One random label grid."""
    s = size / 64.0
    cy = size / 2 + rng.uniform(-4, 4) * s
    cx = size / 2 + rng.uniform(-4, 4) * s
    a = rng.uniform(13.0, 20.0) * s
    q = rng.uniform(0.8, 1.0)
    t = rng.uniform(4.5, 7.5) * s
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    outer = (u / a) ** 2 + (v / (a * q)) ** 2 <= 1.0
    inner = (u / (a - t)) ** 2 + (v / (a * q - t)) ** 2 <= 1.0
    labels = np.zeros((size, size), dtype=np.uint8)
    labels[outer] = MYOCARDIUM
    labels[inner] = BLOOD_POOL
    if c_gap:
        phi0 = rng.uniform(-np.pi, np.pi)
        half = np.deg2rad(rng.uniform(20, 35))
        ang = np.angle(np.exp(1j * (np.arctan2(dy, dx) - phi0)))
        labels[(labels == MYOCARDIUM) & (np.abs(ang) <= half)] = BACKGROUND
    if scar:
        from .synth import sample_pseudo_scar
        myo = SegMask(labels)
        blob = sample_pseudo_scar(myo, rng.uniform(0.05, 0.3), int(rng.integers(2**62)))
        labels[blob] = FIBROSIS
    return labels


def render_intensity(labels: np.ndarray, rng: np.random.Generator, noise: float = 8.0) -> np.ndarray:
    levels = np.array([BG_LEVEL, BP_LEVEL, MYO_LEVEL, SCAR_LEVEL])
    img = levels[labels] + rng.normal(0.0, noise, labels.shape)
    return np.clip(np.round(img), 0, 255)


def generate_phantoms(n: int, size: int = 64, seed: int = 0, c_fraction: float = 0.0,
                      scar_fraction: float = 0.5, slice_gap: float = 8.0):
    """Stack of ``n`` independent random phantoms, deterministic per seed.

    Returns ``(stack, c_flags)``; ``c_flags[i]`` marks slices deliberately
    opened into a C shape (roughly ``c_fraction`` of them).
    """
    if n < 1:
        raise InputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    slices, flags = [], []
    for _ in range(n):
        c = bool(rng.random() < c_fraction)
        sc = bool(rng.random() < scar_fraction)
        labels = phantom_labels(rng, size, c_gap=c, scar=sc)
        img = render_intensity(labels, rng)
        slices.append((IntensitySlice(img), SegMask(labels)))
        flags.append(c)
    return VolumeStack(tuple(slices), slice_gap=slice_gap), flags


def myo_of(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return ((labels == MYOCARDIUM) | (labels == FIBROSIS)).astype(np.uint8)


# -- perturbations ------------------------------------------------------------

def _polar(mask):
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    yy, xx = np.mgrid[0:mask.shape[0], 0:mask.shape[1]]
    return np.arctan2(yy - cy, xx - cx), np.hypot(yy - cy, xx - cx)


def _sector(ang, phi0, half):
    return np.abs(np.angle(np.exp(1j * (ang - phi0)))) <= half


def perturb_erosion(mask, rng):
    """Thin a random arc of the ring down to about one pixel."""
    out = mask.astype(bool).copy()
    ang, _ = _polar(out)
    sec = _sector(ang, rng.uniform(-np.pi, np.pi), np.deg2rad(rng.uniform(15, 35)))
    eroded = ndimage.binary_erosion(out, iterations=int(rng.integers(2, 4)))
    # keep a one-pixel skeleton-ish rim so the ring stays closed
    rim = out & ~ndimage.binary_erosion(out)
    inner_rim = rim & ndimage.binary_dilation(~out & ndimage.binary_fill_holes(out))
    out[sec] = eroded[sec] | inner_rim[sec]
    return out.astype(np.uint8)


def perturb_holes(mask, rng):
    """Punch one to three small holes strictly inside the ring."""
    out = mask.astype(bool).copy()
    core = ndimage.binary_erosion(out, iterations=1)
    ys, xs = np.nonzero(core)
    if len(ys) == 0:
        return out.astype(np.uint8)
    for _ in range(int(rng.integers(1, 4))):
        i = int(rng.integers(len(ys)))
        out[ys[i], xs[i]] = False
        if rng.random() < 0.5 and core[ys[i], min(xs[i] + 1, out.shape[1] - 1)]:
            out[ys[i], xs[i] + 1] = False
    return out.astype(np.uint8)


def perturb_gap(mask, rng):
    """Cut a radial gap of a few pixels through the ring."""
    out = mask.astype(bool).copy()
    ang, rad = _polar(out)
    r = np.sqrt(out.sum() / np.pi)
    width = rng.uniform(3.0, 10.0)
    half = width / (2.0 * max(r, 1.0))
    out[_sector(ang, rng.uniform(-np.pi, np.pi), half)] = False
    return out.astype(np.uint8)


PERTURBATIONS = (perturb_erosion, perturb_holes, perturb_gap)


def perturbation_suite(n: int, size: int = 64, seed: int = 0):
    """Return ``(clean, perturbed, kinds)`` arrays of ``n`` binary myocardium masks."""
    rng = np.random.default_rng(seed)
    clean, broken, kinds = [], [], []
    for i in range(n):
        src = myo_of(phantom_labels(rng, size))
        kind = i % len(PERTURBATIONS)
        clean.append(src)
        broken.append(PERTURBATIONS[kind](src, rng))
        kinds.append(PERTURBATIONS[kind].__name__.removeprefix("perturb_"))
    return np.array(clean), np.array(broken), kinds
