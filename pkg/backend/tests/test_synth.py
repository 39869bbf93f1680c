import json

import numpy as np
import pytest

from app.core.config import Settings, SynthSection
from app.services.synth_service import SynthService
from conftest import small_config


def _service(tmp_path, **synth_overrides):
    config = small_config()
    config["synth"].update(synth_overrides)
    return SynthService(Settings(config).synth, tmp_path)


def _ks_statistic(a, b):
    """Two-sample Kolmogorov-Smirnov statistic: largest gap between the empirical CDFs."""
    a, b = np.sort(a), np.sort(b)
    points = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, points, side="right") / len(a)
    cdf_b = np.searchsorted(b, points, side="right") / len(b)
    return float(np.abs(cdf_a - cdf_b).max())


class TestGenSample:
    def test_deterministic_per_seed(self, tmp_path):
        service = _service(tmp_path)
        v1, l1 = service.gen_sample(seed=4, index=0)
        v2, l2 = service.gen_sample(seed=4, index=0)
        np.testing.assert_array_equal(v1.data, v2.data)
        np.testing.assert_array_equal(l1.data, l2.data)
        _, other = service.gen_sample(seed=4, index=1)
        assert not np.array_equal(l1.data, other.data)

    def test_every_class_present(self, tmp_path):
        _, labels = _service(tmp_path).gen_sample(seed=0)
        assert sorted(np.unique(labels.data).tolist()) == [0, 1, 2, 3]

    def test_noise_free_intensities_have_one_mode_per_class(self, tmp_path):
        volume, _ = _service(tmp_path, noise_sigma=0.0, twin_classes=False).gen_sample(seed=1)
        assert sorted(np.unique(volume.data).tolist()) == pytest.approx([0.0, 0.25, 0.5, 1.0])

    def test_twins_share_intensity_and_split_by_position(self, tmp_path):
        volume, labels = _service(tmp_path, noise_sigma=0.0).gen_sample(seed=2)
        assert len(np.unique(volume.data)) == 3
        np.testing.assert_array_equal(volume.data[labels.data == 2], volume.data[labels.data == 3][0])
        half = labels.shape[0] // 2
        assert not np.any(labels.data[half:] == 2)
        assert not np.any(labels.data[:half] == 3)

    def test_twin_intensities_are_indistinguishable(self, tmp_path):
        service = SynthService(SynthSection(), tmp_path)
        assert service.cfg.noise_sigma == 0.1
        twins, other = ([], []), []
        for index in range(6):
            volume, labels = service.gen_sample(seed=0, index=index)
            twins[0].append(volume.data[labels.data == 2])
            twins[1].append(volume.data[labels.data == 3])
            other.append(volume.data[labels.data == 1])
            half = labels.shape[0] // 2
            assert not np.any(labels.data[half:] == 2)
            assert not np.any(labels.data[:half] == 3)
        lower, upper = np.concatenate(twins[0]), np.concatenate(twins[1])
        assert _ks_statistic(lower, upper) < 0.05
        assert _ks_statistic(lower, np.concatenate(other)) > 0.9

    def test_small_class_is_small(self, tmp_path):
        _, labels = _service(tmp_path).gen_sample(seed=3)
        assert np.mean(labels.data == 1) < np.mean(labels.data == 2)

    def test_infeasible_placement(self, tmp_path):
        service = _service(tmp_path, large_blob_radius=[20.0, 30.0])
        with pytest.raises(ValueError, match="infeasible"):
            service.gen_sample(seed=0)


class TestDataset:
    def test_writes_manifest_and_files(self, tmp_path, small_settings):
        service = SynthService(small_settings.synth, tmp_path)
        root = service.gen_dataset()
        manifest = json.loads((root / "manifest.json").read_text())
        assert [e["id"] for e in manifest] == ["train_000", "train_001", "val_000"]
        assert {e["split"] for e in manifest} == {"train", "val"}
        for entry in manifest:
            assert (root / f"{entry['volume_path']}.raw").exists()
            assert (root / f"{entry['label_path']}.json").exists()

    def test_load_split(self, small_dataset):
        _, samples = small_dataset
        assert [s[0] for s in samples["train"]] == ["train_000", "train_001"]
        sample_id, volume, labels = samples["val"][0]
        assert sample_id == "val_000"
        assert volume.shape == labels.shape == (24, 24, 24)
        assert labels.num_classes == 4

    def test_regeneration_is_identical(self, tmp_path, small_settings):
        service = SynthService(small_settings.synth, tmp_path)
        root = service.gen_dataset()
        first = (root / "train_001_img.raw").read_bytes()
        service.gen_dataset(force=True)
        assert (root / "train_001_img.raw").read_bytes() == first

    def test_refuses_non_empty_directory(self, tmp_path, small_settings):
        service = SynthService(small_settings.synth, tmp_path)
        service.gen_dataset()
        with pytest.raises(FileExistsError):
            service.gen_dataset()

    def test_missing_manifest(self, tmp_path, small_settings):
        with pytest.raises(FileNotFoundError, match="synth"):
            SynthService(small_settings.synth, tmp_path).load_manifest()
