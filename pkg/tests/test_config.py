"""
Test suite per la configurazione
"""

import json

import pytest
import sys
import os

# Aggiungi la root del progetto al path per import
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.config import ConfigError, RunConfig, load_run_config
from src.datapipe import LabelMode


class TestRunConfig:
    """Test per caricamento e validazione"""

    def test_defaults(self):
        config = load_run_config()
        assert config.model.n_decoders == 3
        assert config.schedule.cross_enable_epoch == 20
        assert config.labels.mode == LabelMode.CONSENSUS
        assert config.loss_weights().betas == [1.0, 1.0, 1.0]

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"model": {"n_decoders": 3, "depth": 5}}))
        with pytest.raises(ConfigError) as excinfo:
            load_run_config(path)
        assert "depth" in str(excinfo.value)

    def test_betas_length_checked(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides={"loss.betas": [1.0, 1.0]})

    def test_yaml_file(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text("model:\n  stage_channels: [8, 16]\n  n_decoders: 2\n"
                        "loss:\n  alpha: 0.5\n  betas: [1.0, 2.0]\n")
        config = load_run_config(path)

        model_config = config.build_model_config()
        assert model_config.stage_channels == [8, 16]
        assert model_config.grid_multiple == 2
        assert config.loss_weights().alpha == 0.5

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"schedule": {"seed": 1, "total_epochs": 5}}))
        config = load_run_config(path, {"schedule.seed": 9, "output_dir": "runs/x",
                                        "loss.alpha": None})
        assert config.schedule.seed == 9
        assert config.schedule.total_epochs == 5
        assert config.output_dir == "runs/x"
        assert config.loss.alpha == 1.0

    def test_env_expansion(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MDSEG_DATA", "/data/brain")
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"data": {"path": "${MDSEG_DATA}"}}))
        assert load_run_config(path).data.path == "/data/brain"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.yaml")

    def test_invalid_ct_window(self):
        with pytest.raises(ConfigError):
            load_run_config(overrides={"data.ct_window": [300, -100]})

    def test_json_round_trip(self):
        config = load_run_config(overrides={"ensemble.size": 3, "labels.mode": "raters"})
        assert RunConfig.model_validate_json(config.to_json()) == config

    def test_ensemble_spec(self):
        config = load_run_config(overrides={"ensemble.size": 3, "schedule.seed": 4})
        spec = config.ensemble_spec()
        assert [r.seed for r in spec.runs] == [4, 5, 6]

        explicit = load_run_config(overrides={"ensemble.runs": [{"alpha": 0.1, "seed": 2}]})
        assert explicit.ensemble_spec().runs[0].alpha == 0.1

    def test_ensemble_keeps_configured_loss(self):
        config = load_run_config(overrides={"loss.alpha": 3.0, "loss.betas": [0.5, 1.0, 1.5],
                                            "ensemble.size": 3})
        runs = config.ensemble_spec().runs
        assert [r.alpha for r in runs] == [3.0, 1.5, 6.0]
        assert all(r.betas == [0.5, 1.0, 1.5] for r in runs)

    def test_schedule_conversion(self):
        schedule = load_run_config(overrides={"schedule.base_lr": 1e-3}).schedule.to_schedule()
        assert schedule.base_lr == 1e-3
        assert schedule.validate() is schedule
