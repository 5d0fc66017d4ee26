"""Binary checkpoint round trips and run-config resolution."""

import json

import numpy as np
import pytest

from cpgm import checkpoint, config as cfg
from cpgm.aae import AaeConfig, CPGMAae
from cpgm.errors import ConfigError, FormatError
from cpgm.ladder_vae import CPGMVae, VaeConfig


def small_models():
    yield CPGMVae(VaeConfig(num_classes=3, channels=(4, 8), latent_dim=4, seed=1))
    yield CPGMVae(VaeConfig(num_classes=3, channels=(4, 8), latent_dim=4, architecture="plain"))
    yield CPGMAae(AaeConfig(num_classes=3, channels=(4, 8), latent_dim=4, variant="variant1", seed=2))
    yield CPGMAae(AaeConfig(num_classes=3, channels=(4, 8), latent_dim=4, classifier_only=True))


class TestCheckpoint:
    @pytest.mark.parametrize("model", list(small_models()), ids=lambda m: m.kind)
    def test_round_trip(self, model):
        rng = np.random.default_rng(0)
        for name in model.buffers:
            model.buffers[name][...] = rng.uniform(0.5, 2.0, model.buffers[name].shape)
        raw = checkpoint.to_bytes(model)
        back = checkpoint.from_bytes(raw)
        assert back.kind == model.kind and back.config == model.config
        for name, p in model.params.items():
            np.testing.assert_array_equal(back.params[name].data, p.data)
        for name, b in model.buffers.items():
            np.testing.assert_array_equal(back.buffers[name], b)
        assert checkpoint.to_bytes(back) == raw

    def test_file_round_trip(self, tmp_path):
        model = next(small_models())
        checkpoint.save(model, tmp_path / "m.ckpt")
        assert checkpoint.load(tmp_path / "m.ckpt").kind == "cpgm_vae"

    def test_bad_magic(self):
        raw = checkpoint.to_bytes(next(small_models()))
        with pytest.raises(FormatError, match="offset 0"):
            checkpoint.from_bytes(b"XXXX" + raw[4:])

    def test_truncated_reports_offset(self):
        raw = checkpoint.to_bytes(next(small_models()))
        with pytest.raises(FormatError, match="truncated checkpoint"):
            checkpoint.from_bytes(raw[:-5])

    def test_trailing_bytes(self):
        raw = checkpoint.to_bytes(next(small_models()))
        with pytest.raises(FormatError, match="trailing"):
            checkpoint.from_bytes(raw + b"\0")


class TestConfig:
    def test_defaults_materialised(self):
        resolved = cfg.resolve({"model_kind": "cpgm_vae"})
        assert resolved["vae"]["latent_dim"] == 32
        assert resolved["ablation_mode"] == "full" and resolved["seed"] == 0
        assert resolved["dataset"]["kind"] == "glyphs"
        assert resolved["thresholds"] == {"tau_l": 0.5, "coverage": 0.95}
        assert "num_classes" not in resolved["vae"]
        # the echo resolves to itself
        assert cfg.resolve(json.loads(cfg.dumps(resolved))) == resolved

    def test_seed_override(self):
        assert cfg.resolve({"model_kind": "cpgm_aae", "seed": 3}, seed=9)["seed"] == 9

    @pytest.mark.parametrize(
        "raw, field",
        [
            ({}, "model_kind"),
            ({"model_kind": "gan"}, "model_kind"),
            ({"model_kind": "cpgm_vae", "ablation_mode": "caae"}, "ablation_mode"),
            ({"model_kind": "cpgm_vae", "aae": {}}, "aae"),
            ({"model_kind": "cpgm_vae", "vae": {"lr": 1}}, "vae.lr"),
            ({"model_kind": "cpgm_vae", "vae": {"latent_dim": 0}}, "vae"),
            ({"model_kind": "cpgm_vae", "seed": -1}, "seed"),
            ({"model_kind": "cpgm_vae", "colour": 1}, "colour"),
            ({"model_kind": "cpgm_vae", "sweep": {"modes": ["caae"]}}, "sweep.modes"),
        ],
    )
    def test_field_level_errors(self, raw, field):
        with pytest.raises(ConfigError) as info:
            cfg.resolve(raw)
        assert info.value.field == field
