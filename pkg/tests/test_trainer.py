"""
Test suite per il Trainer Multi-Decoder
"""

import numpy as np
import pytest
import torch
import sys
import os

# Aggiungi la root del progetto al path per import
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.backbone_net import ModelConfig, build_model, forward_all, load_checkpoint
from src.datapipe import LabelMode, prepare_cases, synth_generate
from src.losses import LossWeights, total_training_loss
from src.trainer import (
    EnsembleSpec,
    MultiDecoderTrainer,
    TrainSchedule,
    TrainingDivergenceError,
    adapt_betas,
    case_ground_truth,
    ensemble_predict,
    predict,
    select_best_epoch,
    train,
    train_ensemble,
    train_level_baselines,
    warmup_lr,
)

TINY = ModelConfig(stage_channels=[4, 8], n_decoders=3, n_classes=2)


def _tiny_cases(n_cases: int = 3, seed: int = 0):
    cases = synth_generate(n_cases, 3, seed=seed, ambiguity=0.3, shape=(15, 16))
    return prepare_cases(cases, TINY.grid_multiple)


class TestSchedule:
    """Test per learning rate e beta"""

    def test_warmup(self):
        schedule = TrainSchedule(base_lr=1e-3, warmup_epochs=10)
        assert warmup_lr(0, schedule) == pytest.approx(1e-4)
        assert warmup_lr(4, schedule) == pytest.approx(5e-4)
        assert warmup_lr(9, schedule) == pytest.approx(1e-3)
        assert warmup_lr(50, schedule) == 1e-3

    def test_default_warmup(self):
        schedule = TrainSchedule()
        assert warmup_lr(9, schedule) == pytest.approx(3e-4)
        assert warmup_lr(4, schedule) == pytest.approx(1.5e-4)
        assert warmup_lr(10, schedule) == warmup_lr(199, schedule) == 3e-4

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            TrainSchedule(warmup_epochs=0).validate()

    def test_adapt_betas(self):
        assert adapt_betas([0.1, 0.2, 0.3]) == [0.5, 1.0, 1.5]

    def test_adapt_betas_mean_is_one(self):
        betas = adapt_betas([0.37, 1.91, 0.02, 0.5])
        assert sum(betas) / len(betas) == pytest.approx(1.0, abs=1e-15)

    def test_adapt_betas_rejects_zero(self):
        with pytest.raises(ValueError):
            adapt_betas([0.0, 1.0])

    def test_select_best_epoch(self):
        assert select_best_epoch([0.5, 0.7, 0.7, 0.6]) == 1
        assert select_best_epoch([0.2]) == 0

    def test_default_ensemble(self):
        spec = EnsembleSpec.default(seed=10, size=3)
        assert [r.alpha for r in spec.runs] == [1.0, 0.5, 2.0]
        assert [r.seed for r in spec.runs] == [10, 11, 12]

    def test_default_ensemble_follows_loss_weights(self):
        spec = EnsembleSpec.default(seed=0, size=4, alpha=3.0, betas=[0.5, 1.0, 1.5])
        assert [r.alpha for r in spec.runs] == [3.0, 1.5, 6.0, 3.0]
        assert all(r.betas == [0.5, 1.0, 1.5] for r in spec.runs)


class TestPrediction:
    """Test per predict ed ensemble_predict"""

    def setup_method(self):
        """Setup per ogni test"""
        self.model = build_model(TINY, seed=0)
        self.image = np.random.default_rng(0).normal(size=(1, 8, 8)).astype(np.float32)

    def test_predict_is_branch_mean(self):
        soft = predict(self.model, self.image)

        with torch.no_grad():
            probs = forward_all(self.model, self.image).probs.numpy()
        expected = probs[:, 1].mean(axis=0)
        assert np.allclose(soft.values, expected, atol=1e-7)

    def test_predict_crops(self):
        from src.datapipe import CropRecord
        soft = predict(self.model, self.image, CropRecord(top=1, left=2, height=5, width=4))
        assert soft.shape == (5, 4)

    def test_ensemble_is_model_mean(self):
        other = build_model(TINY, seed=1)
        soft = ensemble_predict([self.model, other], self.image)
        expected = (predict(self.model, self.image).values + predict(other, self.image).values) / 2
        assert np.allclose(soft.values, expected, atol=1e-7)

    def test_single_branch_prediction(self):
        model = build_model(ModelConfig(stage_channels=[4, 8], n_decoders=1), seed=0)
        soft = predict(model, self.image)
        with torch.no_grad():
            branch = forward_all(model, self.image).branch(0)[1].numpy()
        assert np.array_equal(soft.values, branch)

    def test_empty_ensemble(self):
        with pytest.raises(ValueError):
            ensemble_predict([], self.image)

    def test_ground_truth_uses_original_grid(self):
        case = _tiny_cases(1)[0]
        assert case.spatial_shape == (16, 16)
        assert case_ground_truth(case).shape == (15, 16)


class TestOptimization:
    """Test per i passi di ottimizzazione"""

    def setup_method(self):
        """Setup per ogni test"""
        self.model = build_model(TINY, seed=0)
        self.trainer = MultiDecoderTrainer(self.model, TrainSchedule(batch_size=2),
                                           LossWeights.uniform(3))
        self.images, self.targets = self.trainer._tensors(_tiny_cases(2))

    def test_zero_lr_leaves_weights_unchanged(self):
        before = {k: v.clone() for k, v in self.model.state_dict().items()}
        self.trainer.set_lr(0.0)

        self.trainer.step(self.images, self.targets, LossWeights.uniform(3), epoch=0)

        for name, value in self.model.state_dict().items():
            assert torch.equal(before[name], value), name

    def test_step_updates_weights(self):
        before = self.model.decoders[0].head.weight.detach().clone()
        self.trainer.step(self.images, self.targets, LossWeights.uniform(3), epoch=0)
        assert not torch.equal(before, self.model.decoders[0].head.weight)
        assert self.trainer.get_stats()['steps'] == 1

    @pytest.mark.parametrize("cross_enabled", [False, True])
    def test_branch_loss_only_reaches_its_decoder(self, cross_enabled):
        probs = self.model(self.images)
        weights = LossWeights.uniform(3, cross_enabled=cross_enabled)
        _, report = total_training_loss(probs, self.targets, weights)

        others = list(self.model.decoders[1].parameters())
        own = list(self.model.decoders[0].parameters())
        grads = torch.autograd.grad(report.per_branch[0].loss, others + own, allow_unused=True)

        assert all(g is None or torch.count_nonzero(g) == 0 for g in grads[:len(others)])
        assert any(g is not None and g.abs().sum() > 0 for g in grads[len(others):])

    def test_divergence_is_reported(self):
        with torch.no_grad():
            for decoder in self.model.decoders:
                decoder.head.weight.fill_(float("nan"))

        with pytest.raises(TrainingDivergenceError) as excinfo:
            self.trainer.step(self.images, self.targets, LossWeights.uniform(3), epoch=3)
        assert excinfo.value.epoch == 3
        assert "branch_0" in excinfo.value.components


class TestTraining:
    """Test per il training completo"""

    def setup_method(self):
        """Setup per ogni test"""
        self.cases = _tiny_cases(3)
        self.schedule = TrainSchedule(base_lr=1e-3, warmup_epochs=1, cross_enable_epoch=2,
                                      total_epochs=3, seed=0, batch_size=2)

    def test_phases_and_beta_adaptation(self):
        model = build_model(TINY, seed=0)
        history = train(model, self.cases[:2], self.schedule, LossWeights.uniform(3),
                        self.cases[2:])

        records = history.records
        assert [r.cross_enabled for r in records] == [False, False, True]
        assert records[0].betas == [1.0, 1.0, 1.0]
        assert records[2].betas == adapt_betas(records[1].branch_losses)
        assert history.best_epoch == select_best_epoch(history.val_scores)

    def test_determinism(self):
        runs = []
        for _ in range(2):
            model = build_model(TINY, seed=0)
            history = train(model, self.cases[:2], self.schedule, LossWeights.uniform(3),
                            self.cases[2:])
            runs.append((history.totals, model.state_dict()))

        assert runs[0][0] == runs[1][0]
        for name, value in runs[0][1].items():
            assert torch.equal(value, runs[1][1][name])

    def test_training_keeps_global_rng(self):
        torch.manual_seed(1234)
        expected = torch.rand(4)
        torch.manual_seed(1234)
        train(build_model(TINY, seed=0), self.cases[:2], self.schedule, LossWeights.uniform(3),
              self.cases[2:])
        assert torch.equal(torch.rand(4), expected)

    def test_artifacts(self, tmp_path):
        model = build_model(TINY, seed=0)
        history = train(model, self.cases[:2], self.schedule, LossWeights.uniform(3),
                        self.cases[2:], output_dir=tmp_path)

        log = (tmp_path / "train_log.csv").read_text().splitlines()
        assert log[0].startswith("epoch,lr,cross_enabled,loss_branch_0")
        assert len(log) == 4
        components = (tmp_path / "loss_components.csv").read_text().splitlines()
        assert len(components) == 1 + 3 * 3

        _, extra = load_checkpoint(tmp_path / "best.ckpt")
        assert extra["best_epoch"] == history.best_epoch
        assert extra["label_mode"] == "consensus"

    def test_ensemble_writes_one_run_per_entry(self, tmp_path):
        schedule = TrainSchedule(base_lr=1e-3, warmup_epochs=1, cross_enable_epoch=1,
                                 total_epochs=1, batch_size=2)
        results = train_ensemble(TINY, EnsembleSpec.default(size=2), self.cases[:2], schedule,
                                 self.cases[2:], tmp_path)

        assert len(results) == 2
        assert (tmp_path / "run_00" / "best.ckpt").is_file()
        assert (tmp_path / "run_01" / "best.ckpt").is_file()

    def test_level_baselines(self):
        schedule = TrainSchedule(base_lr=1e-3, warmup_epochs=1, total_epochs=1, batch_size=2)
        results = train_level_baselines(TINY, self.cases[:2], schedule, val_cases=self.cases[2:])

        assert len(results) == 3
        assert all(model.n_decoders == 1 for model, _ in results)

    def test_label_mode_mismatch(self):
        model = build_model(ModelConfig(stage_channels=[4, 8], n_decoders=2), seed=0)
        with pytest.raises(ValueError):
            train(model, self.cases[:2], self.schedule, LossWeights.uniform(2),
                  label_mode=LabelMode.RATERS)

    def test_gate_never_opens(self):
        schedule = TrainSchedule(base_lr=1e-3, warmup_epochs=1, cross_enable_epoch=2,
                                 total_epochs=2, batch_size=2)
        history = train(build_model(TINY, seed=0), self.cases[:2], schedule,
                        LossWeights.uniform(3), self.cases[2:])

        assert not any(r.cross_enabled for r in history.records)
        assert all(r.betas == [1.0, 1.0, 1.0] for r in history.records)
