"""Single-slice anatomical validity check on a binary myocardium mask.

Conventions: foreground objects are 8-connected, background regions are
4-connected, pixel centres sit on integer coordinates (row, col).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import InputError, ParameterError

_FOUR = ndimage.generate_binary_structure(2, 1)
_EIGHT = ndimage.generate_binary_structure(2, 2)

# an open cavity must be at least this fraction of the myocardium to count as a C
C_CAVITY_FRACTION = 0.15


@dataclass(frozen=True)
class AnatomyConfig:
    min_circularity: float = 0.4
    max_defect_depth: float = 4.0
    min_thickness: float = 2.0
    max_components: int = 1
    max_holes: int = 0
    allow_c_shape: bool = False

    def __post_init__(self):
        if self.max_components < 1:
            raise ParameterError("max_components must be >= 1")
        if self.max_holes < 0 or self.min_circularity <= 0 or self.max_defect_depth <= 0 or self.min_thickness <= 0:
            raise ParameterError("anatomy thresholds must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "AnatomyConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ParameterError(f"unknown anatomy config keys: {sorted(unknown)}")
        return cls(**known)

    @classmethod
    def from_file(cls, path) -> "AnatomyConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Check:
    name: str
    value: Optional[float]
    threshold: float
    kind: str  # "max" or "min"
    passed: bool


@dataclass
class AnatomyReport:
    passed: bool
    checks: list = field(default_factory=list)
    c_shaped: bool = False

    @property
    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "failed": self.failed, "c_shaped": self.c_shaped,
                "checks": [asdict(c) for c in self.checks]}


def _binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InputError(f"expected a 2-D mask, got shape {m.shape}")
    return m.astype(bool)


def connected_components(mask, connectivity: int = 8):
    """Label foreground components. Labels follow row-major order of each component's first pixel."""
    if connectivity not in (4, 8):
        raise ParameterError("connectivity must be 4 or 8")
    labels, count = ndimage.label(_binary(mask), structure=_EIGHT if connectivity == 8 else _FOUR)
    return labels, int(count)


def enclosed_background(mask):
    """4-connected background components that do not touch the grid border, as a label grid."""
    m = _binary(mask)
    bg, n = ndimage.label(~m, structure=_FOUR)
    border = np.unique(np.concatenate([bg[0], bg[-1], bg[:, 0], bg[:, -1]]))
    keep = np.ones(n + 1, dtype=bool)
    keep[border] = False
    keep[0] = False
    relabel = np.zeros(n + 1, dtype=np.int64)
    relabel[keep] = np.arange(1, keep.sum() + 1)
    return relabel[bg], int(keep.sum())


def fill_holes(mask) -> np.ndarray:
    lab, n = enclosed_background(mask)
    return _binary(mask) | (lab > 0)


def _largest_cavity(mask):
    lab, n = enclosed_background(mask)
    if n == 0:
        return None
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (int(np.argmax(sizes)) + 1)


def count_holes(myo) -> int:
    """Enclosed background components beyond the one cavity taken as blood pool."""
    _, n = enclosed_background(myo)
    return max(n - 1, 0)


def _edge_perimeter(region) -> int:
    p = np.pad(region, 1)
    return int(np.sum(p[1:, :] != p[:-1, :]) + np.sum(p[:, 1:] != p[:, :-1]))


def circularity(region) -> float:
    """4*pi*A/P**2 of the filled region, with P counted in unit pixel edges."""
    m = _binary(region)
    if not m.any():
        raise InputError("circularity of an empty region")
    filled = fill_holes(m)
    area = float(filled.sum())
    return 4.0 * math.pi * area / float(_edge_perimeter(filled)) ** 2


# -- convex hull --------------------------------------------------------------

def convex_hull(points) -> np.ndarray:
    """Monotone-chain hull of integer points, counter-clockwise, no collinear vertices."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.int64).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.int64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.int64)


def hull_mask(mask) -> np.ndarray:
    """Pixels whose centres lie inside or on the convex hull of the foreground."""
    m = _binary(mask)
    out = np.zeros(m.shape, dtype=bool)
    pts = np.argwhere(m)
    if len(pts) == 0:
        return out
    hull = convex_hull(_contour_points(m) if len(pts) > 2 else pts)
    r0, c0 = pts.min(axis=0)
    r1, c1 = pts.max(axis=0)
    rr, cc = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    if len(hull) == 1:
        inside = np.ones(rr.shape, dtype=bool)
    elif len(hull) == 2:
        (ar, ac), (br, bc) = hull
        cr = (br - ar) * (cc - ac) - (bc - ac) * (rr - ar)
        inside = cr == 0
    else:
        inside = np.ones(rr.shape, dtype=bool)
        for (ar, ac), (br, bc) in zip(hull, np.roll(hull, -1, axis=0)):
            inside &= (br - ar) * (cc - ac) - (bc - ac) * (rr - ar) >= 0
    out[r0:r1 + 1, c0:c1 + 1] = inside
    return out


def _contour_points(m) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the foreground (grid edge counts as outside)."""
    inner = ndimage.binary_erosion(m, structure=_FOUR, border_value=0)
    return np.argwhere(m & ~inner)


def _dist2_to_hull(points, hull) -> np.ndarray:
    """Squared distance of each point to the hull boundary, from exact integer terms."""
    p = points.astype(np.int64)[:, None, :]
    a = hull[None, :, :]
    b = np.roll(hull, -1, axis=0)[None, :, :]
    ab = b - a
    ap = p - a
    len2 = np.sum(ab * ab, axis=2)
    t = np.sum(ap * ab, axis=2)
    cross = ab[..., 0] * ap[..., 1] - ab[..., 1] * ap[..., 0]
    d_line = cross.astype(np.float64) ** 2 / len2
    d_a = np.sum(ap * ap, axis=2).astype(np.float64)
    bp = p - b
    d_b = np.sum(bp * bp, axis=2).astype(np.float64)
    d = np.where(t <= 0, d_a, np.where(t >= len2, d_b, d_line))
    return d.min(axis=1)


def convexity_defect_depth(region) -> float:
    """Deepest excursion of the outer contour inside the convex hull, in pixels."""
    m = _binary(region)
    if not m.any():
        raise InputError("convexity defect of an empty region")
    _, n = connected_components(m, 8)
    if n != 1:
        raise InputError(f"convexity defect needs a single component, got {n}")
    filled = fill_holes(m)
    contour = _contour_points(filled)
    hull = convex_hull(contour)
    if len(hull) < 3:
        return 0.0
    return float(math.sqrt(_dist2_to_hull(contour, hull).max()))


# -- thickness ----------------------------------------------------------------

RAY_STEP = 0.25
RAY_WINDOW = 2
RAY_END_MARGIN = 8


def min_thickness(myo, step: float = RAY_STEP) -> float:
    """Least myocardium length crossed along rays cast 1 degree apart from the cavity centre.

    Each ray's length is the total myocardium it passes through; the profile is
    median-filtered over neighbouring rays before taking the minimum.
    """
    m = _binary(myo)
    if not m.any():
        raise InputError("thickness of an empty mask")
    cavity = _largest_cavity(m)
    if cavity is None and is_c_shaped(m):
        # centre of the sealed ring sits where the full cavity would be
        cavity = _largest_cavity(close_c_shape(m))
    centre = np.argwhere(cavity if cavity is not None else m).mean(axis=0)
    h, w = m.shape
    reach = math.hypot(h, w)
    t = np.arange(0.0, reach + step, step)
    ang = np.deg2rad(np.arange(360))
    rr = np.floor(centre[0] + np.sin(ang)[:, None] * t[None, :] + 0.5).astype(np.int64)
    cc = np.floor(centre[1] + np.cos(ang)[:, None] * t[None, :] + 0.5).astype(np.int64)
    valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    hit = np.zeros(rr.shape, dtype=bool)
    hit[valid] = m[rr[valid], cc[valid]]
    length = hit.sum(axis=1) * step
    crosses = length > 0
    if not crosses.any():
        raise InputError("no ray intersects the myocardium")
    # median over +-RAY_WINDOW degrees of crossing rays; single rays grazing a
    # pixel corner or the cut edge of an open ring would otherwise dominate the minimum
    prof = np.where(crosses, length, np.nan)
    win = np.stack([np.roll(prof, k) for k in range(-RAY_WINDOW, RAY_WINDOW + 1)])
    smooth = np.full(prof.shape, np.nan)
    smooth[crosses] = np.nanmedian(win[:, crosses], axis=0)
    # rays next to the opening of a C shape graze its cut face; skip them
    interior = crosses.copy()
    for k in range(1, RAY_END_MARGIN + 1):
        interior &= np.roll(crosses, k) & np.roll(crosses, -k)
    use = interior if interior.any() else crosses
    return float(np.nanmin(smooth[use]))


# -- C shapes -----------------------------------------------------------------

def _open_cavity(m):
    """Cavity of an open ring: largest 4-component of hull-minus-mask, or None."""
    hull = hull_mask(m)
    lab, n = ndimage.label(hull & ~m, structure=_FOUR)
    if n == 0:
        return None, hull
    sizes = np.bincount(lab.ravel())[1:]
    best = int(np.argmax(sizes))
    if sizes[best] < max(4.0, C_CAVITY_FRACTION * m.sum()):
        return None, hull
    return lab == best + 1, hull


def is_c_shaped(myo) -> bool:
    """True for a single open ring: no enclosed cavity, but a sizeable cavity inside its hull."""
    m = _binary(myo)
    if not m.any():
        return False
    _, n = connected_components(m, 8)
    if n != 1:
        return False
    _, enclosed = enclosed_background(m)
    if enclosed:
        return False
    cavity, _ = _open_cavity(m)
    return cavity is not None


def close_c_shape(myo) -> np.ndarray:
    """Seal the mouth of an open ring along its convex hull; other masks are returned as-is."""
    m = _binary(myo)
    if not is_c_shaped(m):
        return m.copy()
    cavity, hull = _open_cavity(m)
    outside = np.pad(~hull, 1, constant_values=True)
    touches = (outside[:-2, 1:-1] | outside[2:, 1:-1] | outside[1:-1, :-2] | outside[1:-1, 2:])
    return m | (cavity & touches)


# -- delta --------------------------------------------------------------------

def delta(myo, cfg: AnatomyConfig = AnatomyConfig()) -> AnatomyReport:
    """Evaluate every anatomical check; ``report.passed`` is the binary verdict."""
    m = _binary(myo)
    _, n_obj = connected_components(m, 8)
    checks = [Check("number of objects", float(n_obj), float(cfg.max_components), "max",
                    1 <= n_obj <= cfg.max_components)]
    if n_obj == 0:
        return AnatomyReport(False, checks)
    c_shape = cfg.allow_c_shape and is_c_shaped(m)
    topo = close_c_shape(m) if c_shape else m
    holes = count_holes(topo)
    checks.append(Check("holes", float(holes), float(cfg.max_holes), "max", holes <= cfg.max_holes))
    circ = circularity(topo)
    checks.append(Check("circularity", circ, cfg.min_circularity, "min", circ >= cfg.min_circularity))
    if n_obj == 1:
        depth_src = topo
    else:
        lab, _ = connected_components(topo, 8)
        depth_src = lab == (int(np.argmax(np.bincount(lab.ravel())[1:])) + 1)
    depth = convexity_defect_depth(depth_src)
    checks.append(Check("convexity defects", depth, cfg.max_defect_depth, "max", depth <= cfg.max_defect_depth))
    try:
        thick = min_thickness(m)
    except InputError:
        thick = 0.0
    checks.append(Check("thickness", thick, cfg.min_thickness, "min", thick >= cfg.min_thickness))
    return AnatomyReport(all(c.passed for c in checks), checks, c_shaped=bool(c_shape))


def is_valid(myo, cfg: AnatomyConfig = AnatomyConfig()) -> bool:
    return delta(myo, cfg).passed
