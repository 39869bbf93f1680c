import logging

import pytest
import toml

from app.core.config import Settings, apply_overrides, load_settings_from_file, parse_override
from app.core.exceptions import ConfigError, NumericError
from app.core.logger import get_logger_with_env_level, resolve_log_level
from conftest import small_config


class TestSettings:
    def test_defaults(self):
        settings = Settings({})
        assert settings.synth.shape == [48, 48, 48]
        assert settings.train.k_topk == 3
        assert settings.loss.lambda_entropy == pytest.approx(1e-4)
        assert settings.infer.k == 4
        assert settings.bench.frozen_class_weight == 6.0

    def test_unknown_section(self):
        with pytest.raises(ConfigError) as excinfo:
            Settings({"model": {}})
        assert excinfo.value.key == "model"

    def test_unknown_key_names_the_key(self):
        with pytest.raises(ConfigError) as excinfo:
            Settings({"train": {"k_top": 3}})
        assert excinfo.value.key == "train.k_top"

    def test_out_of_range_value(self):
        with pytest.raises(ConfigError, match="net.overlap"):
            Settings({"net": {"overlap": 1.5}})

    def test_intensity_means_length(self):
        with pytest.raises(ConfigError, match="intensity_means"):
            Settings({"synth": {"num_classes": 3}})

    def test_infer_k_accepts_full(self):
        assert Settings({"infer": {"k": "full"}}).infer.k == "full"

    def test_class_weight_source(self):
        assert Settings({"infer": {"class_weight": 6.0}}).infer.class_weight == 6.0
        with pytest.raises(ConfigError):
            Settings({"infer": {"class_weight": "trusted"}})

    def test_dump_toml_reloads(self, tmp_path, small_settings):
        path = small_settings.dump_toml(tmp_path / "out" / "resolved.toml")
        assert Settings(toml.load(path)).to_dict() == small_settings.to_dict()


class TestOverrides:
    def test_parse_scalar_types(self):
        assert parse_override("train.k_topk=5") == ("train", "k_topk", 5)
        assert parse_override("optim.lr=1e-3") == ("optim", "lr", 1e-3)
        assert parse_override("net.patch_shape=[8, 8, 8]") == ("net", "patch_shape", [8, 8, 8])
        assert parse_override("infer.k='full'") == ("infer", "k", "full")

    def test_bare_string(self):
        assert parse_override("infer.mode=sw") == ("infer", "mode", "sw")

    @pytest.mark.parametrize("override", ["train.k_topk", "k_topk=3", "a.b.c=1"])
    def test_malformed(self, override):
        with pytest.raises(ConfigError):
            parse_override(override)

    def test_apply_creates_section(self):
        data = apply_overrides({}, ["loss.entropy_sign=penalty"])
        assert Settings(data).loss.entropy_sign == "penalty"


class TestLoadFromFile:
    def test_file_with_overrides(self, tmp_path):
        path = tmp_path / "config.toml"
        path.write_text(toml.dumps(small_config()))
        settings = load_settings_from_file(path, ["train.epochs=3"])
        assert settings.train.epochs == 3
        assert settings.synth.shape == [24, 24, 24]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="file not found"):
            load_settings_from_file(tmp_path / "absent.toml")

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "broken.toml"
        path.write_text("[train\nepochs = ")
        with pytest.raises(ConfigError, match="invalid TOML"):
            load_settings_from_file(path)


class TestErrorsAndLogging:
    def test_numeric_error_carries_diagnostics(self):
        error = NumericError("non-finite loss at step 3", "runs/x/diagnostics/step_3.npz")
        assert error.diagnostics_path.endswith("step_3.npz")
        assert "diagnostics: runs/x/diagnostics/step_3.npz" in str(error)

    def test_config_error_is_a_value_error(self):
        assert isinstance(ConfigError("a.b", "bad"), ValueError)

    def test_log_level_from_environment(self, monkeypatch):
        monkeypatch.setenv("LOG_LEVEL", "debug")
        assert resolve_log_level() == logging.DEBUG
        assert get_logger_with_env_level("test.logger").level == logging.DEBUG
        monkeypatch.setenv("LOG_LEVEL", "chatty")
        assert resolve_log_level() == logging.INFO
