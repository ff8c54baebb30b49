"""Post-skull-stripping volume preprocessing.

Pipeline per volume: reorient to RAS (axis permutation + flips only), crop to
the dataset-wide brain bounding box, stride-2 downsample, z-score the brain
voxels.  The bounding box is a reduction over the whole corpus, so
``preprocess_corpus`` makes two passes over the manifest.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import nibabel as nib
import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter

from .audit import AuditLog

logger = logging.getLogger(__name__)

OBLIQUE_TOL = 1e-3
_AXIS_PAIRS = {"R": ("L", 0), "L": ("R", 0), "A": ("P", 1), "P": ("A", 1), "S": ("I", 2), "I": ("S", 2)}
_POSITIVE = "RAS"


class VolumeError(ValueError):
    pass


def validate_orientation(code: str) -> str:
    code = str(code).upper()
    if len(code) != 3 or any(c not in _AXIS_PAIRS for c in code):
        raise VolumeError(f"invalid orientation code {code!r}")
    if sorted(_AXIS_PAIRS[c][1] for c in code) != [0, 1, 2]:
        raise VolumeError(f"invalid orientation code {code!r}: anatomical axes repeat")
    return code


def orientation_from_affine(affine: np.ndarray) -> str:
    """Axis code of a voxel-to-world affine; each voxel axis must be world-aligned."""
    rot = np.asarray(affine, dtype=float)[:3, :3]
    norms = np.linalg.norm(rot, axis=0)
    if np.any(norms == 0):
        raise VolumeError("degenerate affine")
    cosines = rot / norms
    code = []
    for k in range(3):
        col = cosines[:, k]
        world = int(np.argmax(np.abs(col)))
        off = np.delete(np.abs(col), world)
        if np.any(off > OBLIQUE_TOL):
            raise VolumeError("oblique orientation unsupported")
        code.append(_POSITIVE[world] if col[world] > 0 else _AXIS_PAIRS[_POSITIVE[world]][0])
    return validate_orientation("".join(code))


def affine_from_orientation(code: str, spacing: Sequence[float]) -> np.ndarray:
    code = validate_orientation(code)
    aff = np.eye(4)
    aff[:3, :3] = 0
    for k, c in enumerate(code):
        world = _AXIS_PAIRS[c][1]
        aff[world, k] = spacing[k] if c in _POSITIVE else -spacing[k]
    return aff


@dataclass(frozen=True)
class VolumeMeta:
    shape: tuple[int, int, int]
    orientation: str = "RAS"
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.shape) != 3 or any(n <= 0 for n in self.shape):
            raise VolumeError(f"shape must be three positive ints, got {self.shape}")
        object.__setattr__(self, "orientation", validate_orientation(self.orientation))
        if self.affine is None:
            object.__setattr__(self, "affine", affine_from_orientation(self.orientation, self.spacing))

    @classmethod
    def from_affine(cls, shape, affine) -> "VolumeMeta":
        affine = np.asarray(affine, dtype=float)
        spacing = tuple(np.linalg.norm(affine[:3, :3], axis=0))
        return cls(tuple(shape), orientation_from_affine(affine), spacing, affine)


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    meta: VolumeMeta

    def __post_init__(self):
        if self.data.ndim != 3 or tuple(self.data.shape) != self.meta.shape:
            raise VolumeError(f"data shape {self.data.shape} != meta shape {self.meta.shape}")
        if not np.all(np.isfinite(self.data)):
            raise VolumeError("non-finite intensities")

    @classmethod
    def from_array(cls, data, orientation: str = "RAS", spacing=(1.0, 1.0, 1.0)) -> "Volume":
        data = np.asarray(data)
        return cls(data, VolumeMeta(data.shape, orientation, spacing))


@dataclass(frozen=True)
class BoundingBox:
    bounds: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple((int(lo), int(hi)) for lo, hi in self.bounds))
        if len(self.bounds) != 3 or any(lo < 0 or hi < lo for lo, hi in self.bounds):
            raise VolumeError(f"invalid bounding box {self.bounds}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(hi - lo + 1 for lo, hi in self.bounds)

    def to_list(self) -> list[list[int]]:
        return [list(b) for b in self.bounds]


def reorient_to_ras(v: Volume) -> Volume:
    """Permute and flip axes so that the stored orientation becomes RAS.

    Voxel values are only moved, never interpolated.
    """
    code = v.meta.orientation
    if v.meta.affine is not None:
        affine_code = orientation_from_affine(v.meta.affine)
        if affine_code != code:
            raise VolumeError(f"orientation {code} disagrees with affine ({affine_code})")
    if code == "RAS":
        return v

    # output axis w takes input axis k where code[k] names world axis w
    src_axis = [0, 0, 0]
    flip = [False, False, False]
    for k, c in enumerate(code):
        w = _AXIS_PAIRS[c][1]
        src_axis[w] = k
        flip[w] = c not in _POSITIVE
    data = np.transpose(v.data, src_axis)
    for w in range(3):
        if flip[w]:
            data = np.flip(data, axis=w)
    data = np.ascontiguousarray(data)

    # index map: in_index = M @ out_index
    shape_out = data.shape
    m = np.zeros((4, 4))
    m[3, 3] = 1.0
    for w in range(3):
        k = src_axis[w]
        if flip[w]:
            m[k, w] = -1.0
            m[k, 3] = shape_out[w] - 1
        else:
            m[k, w] = 1.0
    affine = v.meta.affine @ m
    spacing = tuple(v.meta.spacing[src_axis[w]] for w in range(3))
    return Volume(data, VolumeMeta(shape_out, "RAS", spacing, affine))


def brain_bbox(v: Volume, threshold: float = 0.0) -> BoundingBox:
    if threshold < 0:
        raise VolumeError("threshold must be >= 0")
    mask = v.data > threshold
    if not mask.any():
        raise VolumeError("empty brain mask")
    bounds = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(mask.any(axis=other))
        bounds.append((idx[0], idx[-1]))
    return BoundingBox(tuple(bounds))


def global_bbox(boxes: Iterable[BoundingBox]) -> BoundingBox:
    boxes = list(boxes)
    if not boxes:
        raise VolumeError("global_bbox needs at least one box")
    return BoundingBox(
        tuple(
            (min(b.bounds[a][0] for b in boxes), max(b.bounds[a][1] for b in boxes))
            for a in range(3)
        )
    )


def crop(v: Volume, box: BoundingBox, audit: AuditLog | None = None) -> Volume:
    """Cut ``box`` out of ``v``; parts of the box beyond the volume are zero-filled."""
    out = np.zeros(box.shape, dtype=v.data.dtype)
    src, dst = [], []
    padded = []
    for a, (lo, hi) in enumerate(box.bounds):
        n = v.meta.shape[a]
        s_hi = min(hi, n - 1)
        if s_hi < lo:
            src.append(slice(0, 0))
            dst.append(slice(0, 0))
        else:
            src.append(slice(lo, s_hi + 1))
            dst.append(slice(0, s_hi - lo + 1))
        if hi > n - 1:
            padded.append({"axis": a, "pad": hi - (n - 1)})
    out[tuple(dst)] = v.data[tuple(src)]
    if padded:
        logger.warning("crop box exceeds volume of shape %s; zero-padding %s", v.meta.shape, padded)
        if audit is not None:
            audit.add("crop padded", shape=list(v.meta.shape), box=box.to_list(), padding=padded)

    affine = v.meta.affine.copy()
    offset = np.array([lo for lo, _ in box.bounds] + [1.0])
    affine[:, 3] = v.meta.affine @ offset
    return Volume(out, VolumeMeta(out.shape, v.meta.orientation, v.meta.spacing, affine))


def downsample2(v: Volume, smooth_sigma: float | None = None) -> Volume:
    """Keep every second voxel from index 0, so each axis becomes ceil(n / 2)."""
    data = v.data
    if smooth_sigma:
        data = gaussian_filter(data.astype(np.float64), sigma=smooth_sigma, mode="constant")
        data = data.astype(v.data.dtype, copy=False)
    data = np.ascontiguousarray(data[::2, ::2, ::2])
    affine = v.meta.affine.copy()
    affine[:3, :3] = affine[:3, :3] * 2.0
    spacing = tuple(s * 2.0 for s in v.meta.spacing)
    return Volume(data, VolumeMeta(data.shape, v.meta.orientation, spacing, affine))


def normalize_intensity(v: Volume) -> Volume:
    data = v.data.astype(np.float64)
    mask = data != 0
    if not mask.any():
        raise VolumeError("empty brain mask")
    vals = data[mask]
    mean, std = vals.mean(), vals.std()
    if std == 0:
        raise VolumeError("zero-variance brain intensities")
    out = np.zeros_like(data)
    out[mask] = (vals - mean) / std
    return Volume(out.astype(np.float32) if v.data.dtype == np.float32 else out, v.meta)


def load_volume(path: str | Path) -> Volume:
    img = nib.load(str(path))
    data = np.asarray(img.dataobj, dtype=np.float32)
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    return Volume(data, VolumeMeta.from_affine(data.shape, img.affine))


def save_volume(v: Volume, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(np.asarray(v.data, dtype=np.float32), v.meta.affine)
    # fixed header fields keep output bytes reproducible
    img.header["descrip"] = b"mciconv"
    nib.save(img, str(path))


@dataclass
class PreprocessConfig:
    threshold: float = 0.0
    downsample: bool = True
    smooth_sigma: float | None = None
    normalize: bool = True
    expected_output_shape: tuple[int, int, int] | None = None


def preprocess_volume(v: Volume, box: BoundingBox, cfg: PreprocessConfig, audit: AuditLog | None = None) -> Volume:
    out = crop(reorient_to_ras(v), box, audit)
    if cfg.downsample:
        out = downsample2(out, cfg.smooth_sigma)
    if cfg.normalize:
        out = normalize_intensity(out)
    return out


def preprocess_corpus(
    manifest: pd.DataFrame,
    cfg: PreprocessConfig,
    audit: AuditLog | None = None,
) -> tuple[pd.DataFrame, BoundingBox]:
    """Run the full pipeline over a manifest of (subject_id, month, input_path, output_path).

    Returns the manifest with a ``status`` column filled in and the union box.
    Failed volumes are marked and skipped rather than aborting the corpus.
    """
    audit = audit if audit is not None else AuditLog()
    manifest = manifest.copy()
    manifest["status"] = "pending"

    boxes: dict[int, BoundingBox] = {}
    for i, row in manifest.iterrows():
        try:
            boxes[i] = brain_bbox(reorient_to_ras(load_volume(row["input_path"])), cfg.threshold)
        except (VolumeError, OSError) as err:
            manifest.at[i, "status"] = f"failed: {err}"
            audit.add("volume failed", subject_id=row["subject_id"], month=int(row["month"]), error=str(err))
    if not boxes:
        raise VolumeError("no usable volumes in manifest")
    box = global_bbox(boxes.values())
    audit.add("global bbox", bounds=box.to_list(), shape=list(box.shape))

    for i in boxes:
        row = manifest.loc[i]
        try:
            out = preprocess_volume(load_volume(row["input_path"]), box, cfg, audit)
        except VolumeError as err:
            manifest.at[i, "status"] = f"failed: {err}"
            audit.add("volume failed", subject_id=row["subject_id"], month=int(row["month"]), error=str(err))
            continue
        if cfg.expected_output_shape and tuple(out.meta.shape) != tuple(cfg.expected_output_shape):
            raise VolumeError(
                f"output shape {out.meta.shape} != expected {tuple(cfg.expected_output_shape)}"
            )
        save_volume(out, row["output_path"])
        manifest.at[i, "status"] = "ok"
    return manifest, box
