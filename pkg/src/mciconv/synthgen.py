"""Deterministic desk-scale cohort and volume generator.

Randomness comes from numpy's PCG64 generator seeded from the config, with a
separate child stream per subject so the output does not depend on the order
in which subjects are processed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .volumes import Volume, VolumeMeta, affine_from_orientation, save_volume

# disease severity drives both the clinical and the volumetric signal
SEVERITY = {"NC": 0, "sMCI": 1, "cMCI": 2, "AD": 3}
STORED_ORIENTATIONS = ("RAS", "LPS", "LAS")
FEATURES = ("age", "sex", "apoe4", "mmse", "adas13", "faq", "csf_abeta", "hippocampus")


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    seed: int = 0
    n_subjects: int = 40
    converter_fraction: float = 0.5
    # subjects with NC / AD at screening, on top of the n_subjects MCI ones
    n_screen_nc: int = 0
    n_screen_ad: int = 0
    visit_months: list[int] = field(default_factory=lambda: [0, 6, 12, 18, 24, 36, 48, 60, 72, 84, 96])
    volume_shape: tuple[int, int, int] = (32, 32, 32)
    ventricle_base: float = 0.10
    ventricle_step: float = 0.05
    clinical_separation: float = 1.5
    clinical_noise: float = 0.5
    volume_noise: float = 0.05
    missing_rate: float = 0.05

    def __post_init__(self):
        self.volume_shape = tuple(int(n) for n in self.volume_shape)
        if not 0 <= self.converter_fraction <= 1:
            raise SynthError("converter_fraction must be in [0, 1]")
        if len(self.volume_shape) != 3 or min(self.volume_shape) <= 0:
            raise SynthError("volume_shape must be three positive ints")
        if self.visit_months[0] != 0 or sorted(set(self.visit_months)) != list(self.visit_months):
            raise SynthError("visit_months must start at 0 and increase strictly")


def _subject_rng(cfg: SynthConfig, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, index])


def _trajectory(kind: str, rng: np.random.Generator, months: list[int]) -> list[tuple[int, str, str]]:
    """(month, diagnosis, severity state) for one subject."""
    if kind == "nc":
        n = int(rng.integers(3, len(months) + 1))
        return [(m, "NC", "NC") for m in months[:n]]
    if kind == "ad":
        n = int(rng.integers(2, 6))
        return [(m, "AD", "AD") for m in months[:n]]
    if kind == "converter":
        # conversion somewhere in months[1..7] (6 to 60 months), then 1-2 AD visits
        conv = int(rng.integers(1, min(8, len(months))))
        n_after = int(rng.integers(1, 3))
        last = min(conv + n_after, len(months))
        return [(m, "MCI" if i < conv else "AD", "cMCI" if i < conv else "AD") for i, m in enumerate(months[:last])]
    # stable: mostly long follow-up so that visits survive censoring
    lo = min(len(months), max(2, len(months) - 4))
    n = int(rng.integers(lo, len(months) + 1))
    return [(m, "MCI", "sMCI") for m in months[:n]]


def _clinical(state: str, subject_offset: np.ndarray, base: dict, rng, cfg: SynthConfig) -> dict:
    sev = SEVERITY[state]
    sep, noise = cfg.clinical_separation, cfg.clinical_noise
    z = subject_offset + rng.normal(0, noise, size=5)
    row = {
        "age": base["age"],
        "sex": base["sex"],
        "apoe4": base["apoe4"],
        "mmse": 29.0 - 2.0 * sep * sev + 1.5 * z[0],
        "adas13": 8.0 + 4.0 * sep * sev + 2.0 * z[1],
        "faq": 1.0 + 2.5 * sep * sev + 1.5 * z[2],
        "csf_abeta": 1100.0 - 120.0 * sep * sev + 80.0 * z[3],
        "hippocampus": 7500.0 - 400.0 * sep * sev + 250.0 * z[4],
    }
    for k in ("mmse", "adas13", "faq", "csf_abeta", "hippocampus"):
        row[k] = round(float(row[k]), 3)
        if rng.random() < cfg.missing_rate:
            row[k] = np.nan
    return row


def _plan_subjects(cfg: SynthConfig) -> list[tuple[str, str]]:
    n_conv = int(round(cfg.converter_fraction * cfg.n_subjects))
    kinds = ["converter"] * n_conv + ["stable"] * (cfg.n_subjects - n_conv)
    kinds = [kinds[i] for i in np.random.default_rng(cfg.seed).permutation(len(kinds))]
    kinds += ["nc"] * cfg.n_screen_nc + ["ad"] * cfg.n_screen_ad
    return [(f"S{i:04d}", k) for i, k in enumerate(kinds)]


def generate_cohort(cfg: SynthConfig) -> pd.DataFrame:
    """Visit table (subject_id, month, diagnosis, volume_path, state, features...).

    ``volume_path`` is left empty; ``write_workspace`` fills it in.  The
    ``state`` column carries the latent severity used for the volumes.
    """
    rows = []
    for index, (sid, kind) in enumerate(_plan_subjects(cfg)):
        rng = _subject_rng(cfg, index)
        base = {
            "age": round(float(rng.normal(73, 6)), 1),
            "sex": "F" if rng.random() < 0.5 else "M",
            "apoe4": int(rng.choice([0, 1, 2], p=[0.5, 0.38, 0.12])),
        }
        offset = rng.normal(0, cfg.clinical_noise, size=5)
        for month, dx, state in _trajectory(kind, rng, cfg.visit_months):
            row = {"subject_id": sid, "month": month, "diagnosis": dx, "volume_path": "", "state": state}
            row.update(_clinical(state, offset, base, rng, cfg))
            rows.append(row)
    cols = ["subject_id", "month", "diagnosis", "volume_path", "state", *FEATURES]
    return pd.DataFrame(rows, columns=cols)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=float) for n in shape], indexing="ij")
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def generate_volume(state: str, cfg: SynthConfig, rng: np.random.Generator) -> Volume:
    """RAS volume: bright ellipsoidal brain, dark ventricle growing with severity.

    Background is exactly 0 and brain voxels stay strictly positive.
    """
    shape = np.array(cfg.volume_shape, dtype=float)
    if shape.min() < 8:
        raise SynthError(f"volume_shape {cfg.volume_shape} too small for the phantom (min 8)")
    sev = SEVERITY[state]
    vent_frac = cfg.ventricle_base + cfg.ventricle_step * sev
    if vent_frac >= 0.35:
        raise SynthError("ventricle would not fit inside the brain")
    center = (shape - 1) / 2 + rng.uniform(-1, 1, size=3) * 0.03 * shape
    brain = _ellipsoid(cfg.volume_shape, center, 0.40 * shape)
    vent = _ellipsoid(cfg.volume_shape, center, vent_frac * shape)
    data = np.zeros(cfg.volume_shape, dtype=np.float32)
    data[brain] = 1.0
    data[vent] = 0.25
    data[brain] += rng.normal(0, cfg.volume_noise, size=int(brain.sum())).astype(np.float32)
    data[brain] = np.maximum(data[brain], 0.01)
    return Volume(data, VolumeMeta(cfg.volume_shape, "RAS", (1.0, 1.0, 1.0)))


def store_in_orientation(v: Volume, code: str) -> Volume:
    """Re-express an RAS volume in another axis-aligned orientation (flips only)."""
    if code == "RAS":
        return v
    data = v.data
    for axis, (c, pos) in enumerate(zip(code, "RAS")):
        if c != pos:
            data = np.flip(data, axis=axis)
    data = np.ascontiguousarray(data)
    aff = affine_from_orientation(code, v.meta.spacing)
    # keep the world position of voxel (0,0,0) consistent with the flipped axes
    for axis, (c, pos) in enumerate(zip(code, "RAS")):
        if c != pos:
            aff[axis, 3] = (v.meta.shape[axis] - 1) * v.meta.spacing[axis]
    return Volume(data, VolumeMeta(v.meta.shape, code, v.meta.spacing, aff))


def count_dark_voxels(v: Volume, threshold: float = 0.6) -> int:
    brain = v.data > 0
    return int(((v.data < threshold) & brain).sum())


def write_workspace(cfg: SynthConfig, out_dir: str | Path) -> tuple[Path, Path]:
    """Write visits.csv, raw NIfTI volumes and the volume manifest under ``out_dir``."""
    out = Path(out_dir)
    (out / "raw").mkdir(parents=True, exist_ok=True)
    visits = generate_cohort(cfg)
    manifest_rows = []
    subj_index = {sid: i for i, (sid, _) in enumerate(_plan_subjects(cfg))}
    for i, row in visits.iterrows():
        rng = np.random.default_rng([cfg.seed, subj_index[row["subject_id"]], int(row["month"]), 1])
        vol = generate_volume(row["state"], cfg, rng)
        code = STORED_ORIENTATIONS[int(rng.integers(len(STORED_ORIENTATIONS)))]
        rel = Path("raw") / f"{row['subject_id']}_m{int(row['month']):03d}.nii.gz"
        save_volume(store_in_orientation(vol, code), out / rel)
        visits.at[i, "volume_path"] = str(rel)
        manifest_rows.append(
            {
                "subject_id": row["subject_id"],
                "month": int(row["month"]),
                "input_path": str(rel),
                "output_path": str(Path("work") / "volumes" / rel.name),
                "status": "pending",
            }
        )
    visits_path, manifest_path = out / "visits.csv", out / "volumes.csv"
    visits.drop(columns=["state"]).to_csv(visits_path, index=False)
    visits[["subject_id", "month", "state"]].to_csv(out / "truth.csv", index=False)
    pd.DataFrame(manifest_rows).to_csv(manifest_path, index=False)
    return visits_path, manifest_path


def digest_tree(root: str | Path, pattern: str = "*") -> str:
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob(pattern)):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
