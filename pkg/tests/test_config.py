import json

import pytest

from cookie_kit import config as C
from cookie_kit.errors import ConfigError


class TestNormalize:
    def test_empty_gives_full_defaults(self):
        cfg = C.normalize_config({})
        assert cfg.encoder.d_model == 64
        assert cfg.train.stage1_epochs == 15
        assert cfg.train.stage2_epochs == 5
        assert cfg.train.weight_decay == 1e-4
        assert cfg.n_samples == 2000
        assert cfg.bench_sizes == [64, 128, 256, 512]

    def test_partial_override(self):
        cfg = C.normalize_config({"train": {"batch_size": 8}, "seed": 7})
        assert cfg.train.batch_size == 8
        assert cfg.train.stage1_epochs == 15
        assert cfg.seed == 7

    def test_negative_tau_rejected_with_field_name(self):
        with pytest.raises(ConfigError, match="train.tau"):
            C.normalize_config({"train": {"tau": -1.0}})

    def test_zero_stage2_epochs_valid(self):
        cfg = C.normalize_config({"train": {"stage2_epochs": 0}})
        assert cfg.train.stage2_epochs == 0

    def test_all_failing_fields_listed(self):
        raw = {"train": {"tau": -1.0, "batch_size": 0}, "n_samples": -5,
               "encoder": {"n_heads": 0}}
        with pytest.raises(ConfigError) as exc:
            C.normalize_config(raw)
        message = str(exc.value)
        for fragment in ("train.tau", "train.batch_size", "n_samples", "encoder.n_heads"):
            assert fragment in message

    def test_unknown_fields_rejected(self):
        with pytest.raises(ConfigError, match="mystery"):
            C.normalize_config({"mystery": 1})
        with pytest.raises(ConfigError, match="train.mystery"):
            C.normalize_config({"train": {"mystery": 1}})

    def test_cross_field_image_size_consistency(self):
        with pytest.raises(ConfigError, match="output_size"):
            C.normalize_config({"encoder": {"image_size": 16}})
        cfg = C.normalize_config({"encoder": {"image_size": 16},
                                  "visual_aug": {"output_size": [16, 16]}})
        assert cfg.visual_aug.output_size == (16, 16)

    def test_cross_field_vocab_consistency(self):
        with pytest.raises(ConfigError, match="vocab_size"):
            C.normalize_config({"encoder": {"vocab_size": 64}})

    def test_bad_bench_sizes(self):
        with pytest.raises(ConfigError, match="bench_sizes"):
            C.normalize_config({"bench_sizes": [128, 64]})


class TestValidateFile:
    def test_empty_file_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("")
        cfg = C.validate_config(path)
        assert cfg.train.stage1_epochs == 15

    def test_flags_beat_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 1, "train": {"batch_size": 16}}))
        cfg = C.validate_config(path, {"seed": 9, "train.batch_size": 4})
        assert cfg.seed == 9
        assert cfg.train.batch_size == 4

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError):
            C.validate_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            C.validate_config(tmp_path / "absent.json")

    def test_echo_round_trips(self, tmp_path):
        cfg = C.validate_config(None, {"seed": 4})
        path = C.echo_config(cfg, tmp_path, {"command": "test"})
        echoed = json.loads(path.read_text())
        assert echoed["seed"] == 4
        assert echoed["command"] == "test"
        assert echoed["train"]["weight_decay"] == 1e-4
