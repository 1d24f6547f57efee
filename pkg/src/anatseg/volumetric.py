"""Stack-level slice selection from area progression and C-shaped slices."""
from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .anatomy import is_c_shaped
from .core import VolumeStack
from .errors import InputError, ParameterError

DEFAULT_TAU = 0.6


def _masks(stack):
    if isinstance(stack, VolumeStack):
        return stack.require_masks()
    masks = list(stack)
    if any(m is None for m in masks):
        raise InputError("every slice needs a mask")
    return masks


def slice_areas(stack) -> list[int]:
    """Myocardium plus blood-pool pixel count per slice."""
    return [int(np.count_nonzero(m.lv)) for m in _masks(stack)]


def lis_final_index(areas) -> int:
    """End index of a longest strictly increasing subsequence, latest end on ties.

    Patience sorting: ``tails[L]`` holds the smallest possible last value of
    an increasing subsequence of length L + 1; each element's own LIS length
    is its insertion position plus one.
    """
    a = list(areas)
    if not a:
        raise InputError("need at least one slice")
    tails: list = []
    best_len, best_end = 0, 0
    for i, v in enumerate(a):
        pos = bisect_left(tails, v)
        if pos == len(tails):
            tails.append(v)
        else:
            tails[pos] = v
        if pos + 1 >= best_len:
            best_len, best_end = pos + 1, i
    return best_end


def first_c_index(stack, c_flags=None) -> Optional[int]:
    flags = c_flags if c_flags is not None else [is_c_shaped(m.myocardium) for m in _masks(stack)]
    for i, c in enumerate(flags):
        if c:
            return i
    return None


def first_deviation_index(areas, tau: float = DEFAULT_TAU) -> Optional[int]:
    """Last index before the first slice whose area falls below (1 - tau) of its predecessor."""
    if not 0.0 < tau < 1.0:
        raise ParameterError("tau must lie in (0, 1)")
    for j in range(1, len(areas)):
        if areas[j] < (1.0 - tau) * areas[j - 1]:
            return j - 1
    return None


def final_index(i_m: int, i_c: Optional[int], i_d: Optional[int], n: int) -> int:
    """max(i_M, min(i_C + 1, i_D)), dropping absent terms, clamped to the stack."""
    terms = [t for t in ((i_c + 1) if i_c is not None else None, i_d) if t is not None]
    upper = min(terms) if terms else n - 1
    return int(min(max(i_m, upper), n - 1))


@dataclass
class SliceSelection:
    areas: list
    i_m: int
    i_c: Optional[int]
    i_d: Optional[int]
    index: int
    c_indices: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    @property
    def kept(self) -> int:
        return self.index + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        return {"areas": d["areas"], "i_M": self.i_m, "i_C": self.i_c, "i_D": self.i_d,
                "i": self.index, "c_indices": self.c_indices, "dropped": self.dropped}


def select_slices(stack, tau: float = DEFAULT_TAU) -> SliceSelection:
    """Choose the last kept slice; at most one C-shaped slice survives."""
    masks = _masks(stack)
    if not masks:
        raise InputError("need at least one slice")
    areas = slice_areas(masks)
    flags = [is_c_shaped(m.myocardium) for m in masks]
    c_idx = [i for i, c in enumerate(flags) if c]
    i_m = lis_final_index(areas)
    i_c = c_idx[0] if c_idx else None
    i_d = first_deviation_index(areas, tau)
    i = final_index(i_m, i_c, i_d, len(masks))
    if len(c_idx) > 1:
        i = min(i, c_idx[1] - 1)
    return SliceSelection(areas, i_m, i_c, i_d, i, c_idx, list(range(i + 1, len(masks))))
