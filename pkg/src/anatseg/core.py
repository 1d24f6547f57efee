"""Domain types, label conventions and the on-disk stack format.

A stack directory holds ``manifest.json`` plus one ``slice_NNN.raw`` per slice
(row-major little-endian, uint16 unless the manifest says float64) and an
optional ``mask_NNN.pgm`` (binary P5, maxval 255) carrying the labels.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConsistencyError, FormatError, InputError, LabelError

BACKGROUND, BLOOD_POOL, MYOCARDIUM, FIBROSIS = 0, 1, 2, 3
LABELS = (BACKGROUND, BLOOD_POOL, MYOCARDIUM, FIBROSIS)

MANIFEST = "manifest.json"
FORMAT_NAME = "anatseg-stack"
FORMAT_VERSION = 1


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class IntensitySlice:
    data: np.ndarray
    px_spacing_x: float = 1.0
    px_spacing_y: float = 1.0

    def __post_init__(self):
        data = _frozen(self.data, np.float64)
        if data.ndim != 2 or data.size == 0:
            raise ConsistencyError(f"intensity slice must be a non-empty 2-D grid, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ConsistencyError("intensities must be finite")
        if not (self.px_spacing_x > 0 and self.px_spacing_y > 0):
            raise ConsistencyError("pixel spacings must be positive")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def spacing(self) -> tuple[float, float]:
        return (self.px_spacing_x, self.px_spacing_y)

    def replace(self, data) -> "IntensitySlice":
        return IntensitySlice(data, self.px_spacing_x, self.px_spacing_y)


@dataclass(frozen=True)
class SegMask:
    labels: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.labels)
        if raw.ndim != 2 or raw.size == 0:
            raise ConsistencyError(f"mask must be a non-empty 2-D grid, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() > FIBROSIS or
                         (raw.dtype.kind == "f" and np.any(raw != np.round(raw)))):
            raise LabelError(f"labels outside {{0,1,2,3}}: {sorted(set(np.unique(raw).tolist()) - set(LABELS))}")
        object.__setattr__(self, "labels", _frozen(raw, np.uint8))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def myocardium(self) -> np.ndarray:
        """Binary myocardium; fibrosis counts as myocardium."""
        return (self.labels == MYOCARDIUM) | (self.labels == FIBROSIS)

    @property
    def blood_pool(self) -> np.ndarray:
        return self.labels == BLOOD_POOL

    @property
    def fibrosis(self) -> np.ndarray:
        return self.labels == FIBROSIS

    @property
    def lv(self) -> np.ndarray:
        return self.labels != BACKGROUND


@dataclass(frozen=True)
class StudyMetadata:
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    window_center: Optional[float] = None
    window_width: Optional[float] = None
    patient_id: str = ""

    def __post_init__(self):
        if self.window_width is not None and not self.window_width > 0:
            raise ConsistencyError("window_width must be positive when present")

    @property
    def windowed(self) -> bool:
        return self.window_center is not None and self.window_width is not None


@dataclass(frozen=True)
class VolumeStack:
    """Slices ordered apex to base, each an (IntensitySlice, SegMask | None) pair."""

    slices: tuple = ()
    slice_gap: float = 1.0
    orientation_turns: int = 0

    def __post_init__(self):
        slices = tuple((img, mask) for img, mask in self.slices)
        if not self.slice_gap > 0 or not math.isfinite(self.slice_gap):
            raise ConsistencyError(f"slice_gap must be positive, got {self.slice_gap}")
        if self.orientation_turns not in (0, 1, 2, 3):
            raise ConsistencyError("orientation_turns must be in 0..3")
        if slices:
            shape = slices[0][0].data.shape
            spacing = slices[0][0].spacing
            for i, (img, mask) in enumerate(slices):
                if img.data.shape != shape:
                    raise ConsistencyError(f"slice {i} has shape {img.data.shape}, expected {shape}")
                if img.spacing != spacing:
                    raise ConsistencyError(f"slice {i} pixel spacing differs from slice 0")
                if mask is not None and mask.labels.shape != shape:
                    raise ConsistencyError(f"mask {i} has shape {mask.labels.shape}, expected {shape}")
        object.__setattr__(self, "slices", slices)

    def __len__(self) -> int:
        return len(self.slices)

    @property
    def images(self) -> list[IntensitySlice]:
        return [img for img, _ in self.slices]

    @property
    def masks(self) -> list[Optional[SegMask]]:
        return [m for _, m in self.slices]

    @property
    def shape(self):
        return self.slices[0][0].data.shape if self.slices else None

    @property
    def spacing(self):
        return self.slices[0][0].spacing if self.slices else None

    def require_masks(self) -> list[SegMask]:
        masks = self.masks
        missing = [i for i, m in enumerate(masks) if m is None]
        if missing:
            raise InputError(f"slices {missing} have no mask")
        return masks

    def with_slices(self, slices) -> "VolumeStack":
        return VolumeStack(tuple(slices), self.slice_gap, self.orientation_turns)


def stack_from_arrays(images, labels=None, spacing=(1.0, 1.0), slice_gap=1.0, orientation_turns=0):
    """Convenience constructor from plain arrays."""
    sx, sy = spacing
    masks = labels if labels is not None else [None] * len(images)
    slices = [(IntensitySlice(img, sx, sy), None if lab is None else SegMask(lab))
              for img, lab in zip(images, masks)]
    return VolumeStack(tuple(slices), slice_gap, orientation_turns)


# -- PGM ----------------------------------------------------------------------

def write_pgm(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    h, w = labels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + labels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    pos += 1
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise FormatError(f"{path}: PGM payload truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


# -- stack directory ----------------------------------------------------------

def _payload_dtype(stack: VolumeStack) -> str:
    for img in stack.images:
        d = img.data
        if d.min() < 0 or d.max() > 65535 or np.any(d != np.floor(d)):
            return "float64"
    return "uint16"


def save_stack(stack: VolumeStack, meta: StudyMetadata, path) -> None:
    """Write ``stack`` to directory ``path``.

    Integral intensities in [0, 65535] are stored as uint16; anything else
    (e.g. preprocessed floats) is stored as float64 so the round trip stays
    bit-exact.
    """
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create stack directory {root}: {exc}") from exc
    dtype = _payload_dtype(stack)
    entries = []
    for i, (img, mask) in enumerate(stack.slices):
        name = f"slice_{i:03d}.raw"
        arr = img.data.astype("<u2" if dtype == "uint16" else "<f8")
        (root / name).write_bytes(arr.tobytes())
        mname = None
        if mask is not None:
            mname = f"mask_{i:03d}.pgm"
            write_pgm(root / mname, mask.labels)
        entries.append({"image": name, "mask": mname})
    shape, spacing = stack.shape, stack.spacing
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "width": shape[1] if shape else None,
        "height": shape[0] if shape else None,
        "px_spacing_x": spacing[0] if spacing else None,
        "px_spacing_y": spacing[1] if spacing else None,
        "slice_gap": stack.slice_gap,
        "orientation_turns": stack.orientation_turns,
        "rescale_slope": meta.rescale_slope,
        "rescale_intercept": meta.rescale_intercept,
        "window_center": meta.window_center,
        "window_width": meta.window_width,
        "patient_id": meta.patient_id,
        "dtype": dtype,
        "slices": entries,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_stack(path) -> tuple[VolumeStack, StudyMetadata]:
    root = Path(path)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise FormatError(f"{root}: missing {MANIFEST}")
    try:
        man = json.loads(mpath.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{mpath}: invalid JSON: {exc}") from exc
    for key in ("slice_gap", "slices"):
        if key not in man:
            raise FormatError(f"{mpath}: missing field '{key}'")
    gap = man["slice_gap"]
    if not isinstance(gap, (int, float)) or not gap > 0:
        raise ConsistencyError(f"{mpath}: slice_gap must be positive, got {gap!r}")
    entries = man["slices"]
    dtype = man.get("dtype", "uint16")
    if dtype not in ("uint16", "float64"):
        raise FormatError(f"{mpath}: unsupported dtype {dtype!r}")
    w, h = man.get("width"), man.get("height")
    if entries and (not isinstance(w, int) or not isinstance(h, int) or w <= 0 or h <= 0):
        raise ConsistencyError(f"{mpath}: width/height must be positive integers")
    sx, sy = man.get("px_spacing_x") or 1.0, man.get("px_spacing_y") or 1.0
    item = 2 if dtype == "uint16" else 8
    slices = []
    for i, entry in enumerate(entries):
        ipath = root / entry["image"]
        if not ipath.is_file():
            raise FormatError(f"{root}: missing slice file {entry['image']}")
        raw = ipath.read_bytes()
        if len(raw) != w * h * item:
            raise ConsistencyError(f"{ipath}: {len(raw)} bytes, expected {w * h * item} for {w}x{h} {dtype}")
        arr = np.frombuffer(raw, dtype="<u2" if dtype == "uint16" else "<f8").reshape(h, w)
        mask = None
        if entry.get("mask"):
            mpth = root / entry["mask"]
            if not mpth.is_file():
                raise FormatError(f"{root}: missing mask file {entry['mask']}")
            lab = read_pgm(mpth)
            if lab.shape != (h, w):
                raise ConsistencyError(f"{mpth}: mask is {lab.shape[1]}x{lab.shape[0]}, expected {w}x{h}")
            mask = SegMask(lab)
        slices.append((IntensitySlice(arr, sx, sy), mask))
    meta = StudyMetadata(
        rescale_slope=man.get("rescale_slope", 1.0),
        rescale_intercept=man.get("rescale_intercept", 0.0),
        window_center=man.get("window_center"),
        window_width=man.get("window_width"),
        patient_id=man.get("patient_id", ""),
    )
    stack = VolumeStack(tuple(slices), gap, man.get("orientation_turns", 0))
    return stack, meta
