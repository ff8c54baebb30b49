from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from mciconv.cohort import build_conversion_dataset
from mciconv.synthgen import (
    SEVERITY,
    SynthConfig,
    SynthError,
    count_dark_voxels,
    digest_tree,
    generate_cohort,
    generate_volume,
    store_in_orientation,
    write_workspace,
)
from mciconv.volumes import load_volume, reorient_to_ras


class TestCohort:
    @pytest.mark.parametrize("n, frac", [(40, 0.5), (25, 0.2), (10, 1.0), (7, 0.0)])
    def test_converter_count_exact(self, n, frac):
        df = generate_cohort(SynthConfig(n_subjects=n, converter_fraction=frac))
        by_subject = df.groupby("subject_id")["diagnosis"].apply(list)
        converters = [s for s, dx in by_subject.items() if dx[0] == "MCI" and "AD" in dx]
        assert len(by_subject) == n
        assert len(converters) == round(frac * n)

    def test_screening_subjects(self):
        df = generate_cohort(SynthConfig(n_subjects=4, n_screen_nc=3, n_screen_ad=2))
        first = df.groupby("subject_id")["diagnosis"].first().value_counts().to_dict()
        assert first == {"MCI": 4, "NC": 3, "AD": 2}

    def test_deterministic_and_seeded(self):
        a = generate_cohort(SynthConfig(seed=3))
        pd.testing.assert_frame_equal(a, generate_cohort(SynthConfig(seed=3)))
        assert not a.equals(generate_cohort(SynthConfig(seed=4)))

    def test_feeds_cohort_builder(self):
        df = generate_cohort(SynthConfig(n_subjects=30, missing_rate=0.0)).assign(volume_path="x.nii.gz")
        examples, stats = build_conversion_dataset(df.drop(columns=["state"]))
        assert stats.subjects["converged"] > 0 and stats.subjects["stable"] > 0

    @pytest.mark.parametrize("kwargs", [
        {"converter_fraction": 1.5}, {"volume_shape": (8, 8)}, {"visit_months": [6, 12]},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(SynthError):
            SynthConfig(**kwargs)


class TestVolumes:
    def test_background_and_positive_brain(self):
        v = generate_volume("sMCI", SynthConfig(volume_shape=(20, 20, 20)), np.random.default_rng(0))
        assert v.data[0, 0, 0] == 0 and v.data[10, 10, 10] > 0
        assert v.data[v.data != 0].min() >= 0.01

    def test_dark_voxels_grow_with_severity(self):
        cfg = SynthConfig(volume_shape=(24, 24, 24), volume_noise=0.0)
        counts = [count_dark_voxels(generate_volume(s, cfg, np.random.default_rng(1))) for s in SEVERITY]
        assert counts == sorted(counts) and len(set(counts)) == 4

    def test_too_small(self):
        with pytest.raises(SynthError):
            generate_volume("NC", SynthConfig(volume_shape=(6, 6, 6)), np.random.default_rng(0))

    @pytest.mark.parametrize("code", ["RAS", "LPS", "LAS"])
    def test_stored_orientation_reorients_back(self, code):
        v = generate_volume("AD", SynthConfig(volume_shape=(10, 12, 14)), np.random.default_rng(2))
        back = reorient_to_ras(store_in_orientation(v, code))
        np.testing.assert_array_equal(back.data, v.data)


class TestWorkspace:
    def test_layout_and_digest(self, tmp_path):
        cfg = SynthConfig(n_subjects=4, volume_shape=(10, 10, 10))
        visits, manifest = write_workspace(cfg, tmp_path / "a")
        write_workspace(cfg, tmp_path / "b")
        assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")
        table = pd.read_csv(visits)
        assert "state" not in table.columns
        assert (tmp_path / "a" / "truth.csv").exists()
        m = pd.read_csv(manifest)
        assert len(m) == len(table) and set(m["status"]) == {"pending"}
        v = load_volume(tmp_path / "a" / table["volume_path"][0])
        assert v.data.shape == (10, 10, 10)

    def test_orientations_vary(self, tmp_path):
        write_workspace(SynthConfig(n_subjects=6, volume_shape=(8, 8, 8)), tmp_path)
        codes = {load_volume(p).meta.orientation for p in sorted((tmp_path / "raw").glob("*.nii.gz"))}
        assert len(codes) > 1
