import dataclasses

import pytest

from tricod.config import (Config, ConfigError, ModelConfig, TrainConfig, config_fingerprint, dumps,
                           load_config, loads, resolve_data_path, set_value, tiny_model_config)


class TestParsing:
    def test_defaults(self):
        cfg = loads("")
        assert cfg.model.hmu_groups == 6
        assert cfg.model.hmu_group_channels == 32
        assert cfg.model.scale_set == (0.5, 1.0, 1.5)
        assert cfg.train.base_lr == 0.05
        assert cfg.train.main_scale == 384
        assert cfg.train.warmup_fraction == 0.05

    def test_nested_keys_and_comments(self):
        cfg = loads("""
            # comment
            model.backbone = tiny   # trailing comment
            model.scale_set = 1.0, 1.5
            train.ual.form = exp
            train.schedule.kind = linear
            train.schedule.t_start = 0.3
            train.schedule.t_end = 0.7
            train.hflip = false
        """)
        assert cfg.model.backbone == "tiny"
        assert cfg.model.scale_set == (1.0, 1.5)
        assert cfg.train.ual.form == "exp"
        assert cfg.train.schedule.t_start == 0.3
        assert cfg.train.hflip is False

    def test_overrides_win(self):
        cfg = loads("model.hmu_groups = 4", overrides=["model.hmu_groups=8"])
        assert cfg.model.hmu_groups == 8

    @pytest.mark.parametrize("text", ["model.nope = 1", "nosection.x = 1", "model = 3", "train.ual = pow",
                                      "model.backbone.deeper = 1"])
    def test_unknown_keys_are_errors(self, text):
        with pytest.raises(ConfigError):
            loads(text)

    @pytest.mark.parametrize("text", ["model.hmu_groups = six", "train.hflip = maybe", "just words"])
    def test_bad_values(self, text):
        with pytest.raises(ConfigError):
            loads(text)

    def test_every_field_reachable(self):
        text = dumps(Config())
        keys = [line.split("=")[0].strip() for line in text.splitlines()]
        cfg = Config()
        for key, line in zip(keys, text.splitlines()):
            set_value(cfg, key, line.split("=", 1)[1])
        assert cfg == Config()

    def test_roundtrip_dumps(self):
        cfg = loads("model.backbone = tiny\nmodel.scale_set = 1.0\ndata.train_roots = a, b")
        assert loads(dumps(cfg)) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "none.cfg")


class TestValidation:
    @pytest.mark.parametrize("text", [
        "model.hmu_groups = 1",
        "model.scale_set = 0.5, 1.5",
        "model.scale_set = 0.75, 1.0",
        "model.decoder_kernel_size = 4",
        "model.backbone = vgg",
        "model.base_channels = 0",
        "train.main_scale = 100",
        "train.base_lr = 0",
        "train.epochs = 0",
        "train.ual.alpha = 0",
        "train.schedule.kind = step",
    ])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            loads(text)

    def test_model_five_variant_is_expressible(self):
        cfg = loads("model.base_channels = 128\nmodel.fu_repeat = 3\nmodel.last_cbr_repeat = 3\n"
                    "model.decoder_kernel_size = 5\nmodel.scale_set = 1.0\nmodel.decoder_unit = cbr_baseline")
        assert cfg.model.scales == (1.0,)

    def test_tiny_preset(self):
        m = tiny_model_config(hmu_groups=2)
        assert m.backbone == "tiny" and m.hmu_groups == 2
        m.validate()


class TestFingerprint:
    def test_stable_and_hex(self):
        a = config_fingerprint(ModelConfig(), TrainConfig())
        assert a == config_fingerprint(ModelConfig(), TrainConfig())
        assert len(a) == 64 and int(a, 16) >= 0

    def test_sensitive_to_model_and_train(self):
        base = config_fingerprint(ModelConfig(), TrainConfig())
        assert config_fingerprint(dataclasses.replace(ModelConfig(), hmu_groups=4), TrainConfig()) != base
        assert config_fingerprint(ModelConfig(), dataclasses.replace(TrainConfig(), seed=1)) != base

    def test_ignores_run_and_data(self):
        a = loads("")
        b = loads("run.output_dir = elsewhere\ndata.train_roots = x")
        assert a.fingerprint() == b.fingerprint()


def test_data_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("TRICOD_DATA_ROOT", str(tmp_path))
    assert resolve_data_path("COD10K/Train") == tmp_path / "COD10K/Train"
    assert resolve_data_path("/abs/path") == resolve_data_path("/abs/path")
    monkeypatch.delenv("TRICOD_DATA_ROOT")
    assert str(resolve_data_path("rel")) == "rel"
