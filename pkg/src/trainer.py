"""
Trainer Multi-Decoder
Ottimizzazione a fasi: warmup lineare, fase A senza termini incrociati,
adattamento dei beta, fase B con cross loss completa, selezione del
checkpoint tramite score a soglie multiple ed ensemble di iperparametri
"""

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from src.backbone_net import (
    ModelConfig,
    MultiDecoderNet,
    build_model,
    forward_all,
    save_checkpoint,
)
from src.datapipe import (
    CaseRecord,
    CropRecord,
    LabelMode,
    average_annotations,
    default_level,
    to_onehot,
    training_targets,
    unpad,
)
from src.losses import LossWeights, total_training_loss, write_loss_report
from src.metrics import Provenance, SoftMap, ThresholdLadder, staple_score

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingDivergenceError(RuntimeError):
    """Loss non finita durante il training"""

    def __init__(self, epoch: int, components: Dict[str, Any]):
        self.epoch = epoch
        self.components = components
        super().__init__(f"Training diverged at epoch {epoch}: {components}")


@dataclass
class TrainSchedule:
    base_lr: float = 3e-4
    warmup_epochs: int = 10
    weight_decay: float = 1e-5
    cross_enable_epoch: int = 20
    total_epochs: int = 200
    seed: int = 0
    beta_adapt: bool = True
    batch_size: int = 4

    def validate(self) -> "TrainSchedule":
        if self.warmup_epochs < 1:
            raise ValueError(f"warmup_epochs must be >= 1, got {self.warmup_epochs}")
        if self.cross_enable_epoch < 0:
            raise ValueError(f"cross_enable_epoch must be >= 0, got {self.cross_enable_epoch}")
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.total_epochs < 0:
            raise ValueError(f"total_epochs must be >= 0, got {self.total_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        return self


@dataclass
class EnsembleRun:
    alpha: float
    betas: Optional[List[float]]
    seed: int


@dataclass
class EnsembleSpec:
    """Run dell'ensemble di iperparametri (alpha, betas, seed)"""
    runs: List[EnsembleRun]

    def __post_init__(self):
        if not self.runs:
            raise ValueError("ensemble needs at least one run")

    @classmethod
    def default(cls, seed: int = 0, size: int = 3, alpha: float = 1.0,
                betas: Optional[List[float]] = None) -> "EnsembleSpec":
        """La run 0 usa alpha e betas dati, le altre scalano alpha di 0.5 e 2.0"""
        alphas = [alpha, alpha * 0.5, alpha * 2.0]
        return cls(runs=[EnsembleRun(alpha=alphas[k % len(alphas)],
                                     betas=list(betas) if betas is not None else None,
                                     seed=seed + k)
                         for k in range(size)])


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    cross_enabled: bool
    branch_losses: List[float]
    total: float
    val_score: float
    betas: List[float]


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = float("-inf")
    best_state: Optional[Dict[str, torch.Tensor]] = None

    @property
    def totals(self) -> List[float]:
        return [r.total for r in self.records]

    @property
    def val_scores(self) -> List[float]:
        return [r.val_score for r in self.records]


def warmup_lr(epoch: int, schedule: TrainSchedule) -> float:
    """Crescita lineare fino a base_lr in warmup_epochs epoche, poi costante"""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * (epoch + 1) / schedule.warmup_epochs
    return schedule.base_lr


def adapt_betas(pretrain_losses: Sequence[float]) -> List[float]:
    """
    beta_j = L_j / media(L): i rami con loss più alta a fine fase A pesano di
    più nella fase B. Calcolo razionale esatto, media dei beta pari a 1.
    """
    if not pretrain_losses:
        raise ValueError("at least one loss is required")
    for value in pretrain_losses:
        if not (math.isfinite(value) and value > 0):
            raise ValueError(f"pretrain losses must be finite and > 0, got {list(pretrain_losses)}")
    exact = [Fraction(v) for v in pretrain_losses]
    total = sum(exact)
    n = len(exact)
    return [float(v * n / total) for v in exact]


def select_best_epoch(scores: Sequence[float]) -> int:
    """Argmax degli score di validazione; a parità vince l'epoca precedente"""
    best, best_score = -1, float("-inf")
    for epoch, score in enumerate(scores):
        if score > best_score:
            best, best_score = epoch, score
    return best


def predict(model: MultiDecoderNet, image: Union[np.ndarray, torch.Tensor],
            crop: Optional[CropRecord] = None) -> SoftMap:
    """Media sui rami del canale foreground, riportata alla forma originale"""
    was_training = model.training
    model.eval()
    with torch.no_grad():
        soft = forward_all(model, image).mean_foreground.cpu().numpy()
    model.train(was_training)
    if crop is not None:
        soft = unpad(soft, crop)
    return SoftMap(values=np.clip(soft, 0.0, 1.0), provenance=Provenance.BRANCH_AVERAGE)


def ensemble_predict(models: Sequence[MultiDecoderNet], image: Union[np.ndarray, torch.Tensor],
                     crop: Optional[CropRecord] = None) -> SoftMap:
    """Media aritmetica delle predizioni dei singoli modelli"""
    if not models:
        raise ValueError("ensemble needs at least one model")
    maps = [predict(m, image, crop).values for m in models]
    mean = np.mean(np.stack(maps), axis=0)
    return SoftMap(values=np.clip(mean, 0.0, 1.0), provenance=Provenance.BRANCH_AVERAGE)


def case_ground_truth(case: CaseRecord) -> SoftMap:
    """Media delle annotazioni, sulla griglia originale del caso"""
    raters = case.raters if case.crop is None else unpad(case.raters, case.crop)
    return average_annotations(raters)


class MultiDecoderTrainer:
    """
    Gestisce il training a fasi di una MultiDecoderNet
    """

    def __init__(self, model: MultiDecoderNet, schedule: TrainSchedule, weights: LossWeights,
                 label_mode: LabelMode = LabelMode.CONSENSUS, label_level: Optional[int] = None,
                 ladder: Optional[ThresholdLadder] = None):
        self.model = model
        self.schedule = schedule.validate()
        self.weights = weights.validate(model.n_decoders)
        self.label_mode = label_mode
        self.label_level = label_level
        self.ladder = ladder or ThresholdLadder()

        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=warmup_lr(0, self.schedule),
            betas=ADAM_BETAS,
            eps=ADAM_EPS,
            weight_decay=self.schedule.weight_decay,
        )

        # Statistiche
        self.stats = {
            'epochs_run': 0,
            'steps': 0,
            'best_epoch': -1,
            'best_score': float('-inf'),
            'beta_adaptations': 0,
            'divergences': 0,
            'train_time': 0.0,
        }

    def get_stats(self) -> Dict[str, Any]:
        return self.stats.copy()

    def _targets(self, case: CaseRecord) -> np.ndarray:
        masks = training_targets(case, self.label_mode, self.model.n_decoders, self.label_level)
        return to_onehot(masks, self.model.config.n_classes)

    def _tensors(self, cases: Sequence[CaseRecord]) -> Tuple[torch.Tensor, torch.Tensor]:
        param = next(self.model.parameters())
        images = torch.as_tensor(np.stack([c.image for c in cases]), dtype=param.dtype)
        # (B, N, K, H, W) -> (N, B, K, H, W)
        targets = torch.as_tensor(np.stack([self._targets(c) for c in cases]), dtype=param.dtype)
        return images.to(param.device), targets.transpose(0, 1).contiguous().to(param.device)

    def step(self, images: torch.Tensor, targets: torch.Tensor, weights: LossWeights,
             epoch: int):
        """Un passo di ottimizzazione su un batch"""
        self.optimizer.zero_grad(set_to_none=True)
        probs = self.model(images)
        total, report = total_training_loss(probs, targets, weights)
        if not torch.isfinite(total):
            components = {f"branch_{t.branch}": t.as_floats() for t in report.per_branch}
            logger.error(f"Non-finite loss at epoch {epoch}: {components}")
            self.stats['divergences'] += 1
            raise TrainingDivergenceError(epoch, components)
        total.backward()
        self.optimizer.step()
        self.stats['steps'] += 1
        return report

    def set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group['lr'] = lr

    def validation_score(self, cases: Sequence[CaseRecord]) -> float:
        scores = [
            staple_score(predict(self.model, c.image, c.crop), case_ground_truth(c), self.ladder)
            for c in cases
        ]
        return float(sum(scores) / len(scores)) if scores else float("nan")

    def train(self, train_cases: Sequence[CaseRecord],
              val_cases: Optional[Sequence[CaseRecord]] = None,
              output_dir: Optional[Union[str, Path]] = None) -> TrainingHistory:
        """Training completo; i casi devono essere già sulla griglia della rete"""
        # Lo stato RNG globale del chiamante non viene toccato
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.schedule.seed)
            return self._run(train_cases, val_cases, output_dir)

    def _run(self, train_cases: Sequence[CaseRecord],
             val_cases: Optional[Sequence[CaseRecord]],
             output_dir: Optional[Union[str, Path]]) -> TrainingHistory:
        if not train_cases:
            raise ValueError("training dataset is empty")
        if not val_cases:
            logger.warning("No validation cases, model selection uses the training cases")
            val_cases = train_cases

        s = self.schedule
        n = self.model.n_decoders
        order_rng = torch.Generator().manual_seed(s.seed)
        history = TrainingHistory()
        loss_rows: List[List[Any]] = []
        last_phase_a: Optional[List[float]] = None
        betas = list(self.weights.betas)
        start_time = time.time()

        logger.info(f"Training started: {len(train_cases)} train / {len(val_cases)} val cases, "
                    f"{s.total_epochs} epochs, cross loss from epoch {s.cross_enable_epoch}")

        for epoch in range(s.total_epochs):
            cross_enabled = epoch >= s.cross_enable_epoch and n > 1
            if (epoch == s.cross_enable_epoch and s.beta_adapt and n > 1
                    and last_phase_a is not None):
                betas = adapt_betas(last_phase_a)
                self.stats['beta_adaptations'] += 1
                logger.info(f"Cross loss enabled at epoch {epoch}, adapted betas: "
                            f"{[round(b, 4) for b in betas]}")

            weights = LossWeights(alpha=self.weights.alpha, betas=betas,
                                  cross_enabled=cross_enabled)
            lr = warmup_lr(epoch, s)
            self.set_lr(lr)
            self.model.train()

            order = torch.randperm(len(train_cases), generator=order_rng).tolist()
            branch_sums = np.zeros(n)
            total_sum = 0.0
            n_batches = 0
            for start in range(0, len(order), s.batch_size):
                batch = [train_cases[k] for k in order[start:start + s.batch_size]]
                images, targets = self._tensors(batch)
                report = self.step(images, targets, weights, epoch)
                branch_sums += np.array(report.branch_losses())
                total_sum += float(report.total)
                n_batches += 1
                loss_rows.extend(report.to_rows(epoch))
                logger.debug(f"epoch {epoch} batch {n_batches}: total {float(report.total):.5f}")

            branch_means = (branch_sums / n_batches).tolist()
            if not cross_enabled:
                last_phase_a = branch_means

            val_score = self.validation_score(val_cases)
            record = EpochRecord(epoch=epoch, lr=lr, cross_enabled=cross_enabled,
                                 branch_losses=branch_means, total=total_sum / n_batches,
                                 val_score=val_score, betas=list(betas))
            history.records.append(record)

            if val_score > history.best_score:
                history.best_epoch = epoch
                history.best_score = val_score
                history.best_state = copy.deepcopy(self.model.state_dict())

            self.stats['epochs_run'] += 1
            logger.info(f"Epoch {epoch}: lr={lr:.2e} total={record.total:.5f} "
                        f"val_score={val_score:.4f} cross={'on' if cross_enabled else 'off'}")

        self.stats['best_epoch'] = history.best_epoch
        self.stats['best_score'] = history.best_score
        self.stats['train_time'] = time.time() - start_time

        if history.best_state is not None:
            self.model.load_state_dict(history.best_state)

        if output_dir is not None:
            self._write_artifacts(Path(output_dir), history, loss_rows)

        logger.info(f"Training finished: best epoch {history.best_epoch} "
                    f"(val score {history.best_score:.4f})")
        return history

    def _write_artifacts(self, out: Path, history: TrainingHistory,
                         loss_rows: List[List[Any]]) -> None:
        out.mkdir(parents=True, exist_ok=True)
        n = self.model.n_decoders
        with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "lr", "cross_enabled"]
                            + [f"loss_branch_{i}" for i in range(n)]
                            + ["total", "val_staple"])
            for r in history.records:
                writer.writerow([r.epoch, repr(r.lr), int(r.cross_enabled)]
                                + [repr(v) for v in r.branch_losses]
                                + [repr(r.total), repr(r.val_score)])
        write_loss_report(out / "loss_components.csv", loss_rows)
        save_checkpoint(self.model, out / "best.ckpt", extra={
            "best_epoch": history.best_epoch,
            "best_score": history.best_score,
            "alpha": self.weights.alpha,
            "betas": history.records[-1].betas if history.records else list(self.weights.betas),
            "label_mode": self.label_mode.value,
            "schedule": asdict(self.schedule),
        })


def train(model: MultiDecoderNet, dataset: Sequence[CaseRecord], schedule: TrainSchedule,
          weights: LossWeights, val_cases: Optional[Sequence[CaseRecord]] = None,
          output_dir: Optional[Union[str, Path]] = None,
          label_mode: LabelMode = LabelMode.CONSENSUS,
          label_level: Optional[int] = None) -> TrainingHistory:
    """Scorciatoia funzionale attorno a MultiDecoderTrainer"""
    trainer = MultiDecoderTrainer(model, schedule, weights, label_mode, label_level)
    return trainer.train(dataset, val_cases, output_dir)


def train_ensemble(config: ModelConfig, spec: EnsembleSpec, train_cases: Sequence[CaseRecord],
                   schedule: TrainSchedule, val_cases: Optional[Sequence[CaseRecord]] = None,
                   output_dir: Optional[Union[str, Path]] = None,
                   label_mode: LabelMode = LabelMode.CONSENSUS,
                   label_level: Optional[int] = None
                   ) -> List[Tuple[MultiDecoderNet, TrainingHistory]]:
    """Una run per ogni (alpha, betas, seed); ogni run in run_XX/"""
    results = []
    for k, run in enumerate(spec.runs):
        betas = run.betas if run.betas is not None else [1.0] * config.n_decoders
        weights = LossWeights(alpha=run.alpha, betas=list(betas))
        run_schedule = TrainSchedule(**{**asdict(schedule), "seed": run.seed})
        model = build_model(config, seed=run.seed)
        run_dir = Path(output_dir) / f"run_{k:02d}" if output_dir is not None else None
        logger.info(f"Ensemble run {k + 1}/{len(spec.runs)}: alpha={run.alpha}, seed={run.seed}")
        history = train(model, train_cases, run_schedule, weights, val_cases, run_dir,
                        label_mode, label_level)
        results.append((model, history))
    return results


def _single_decoder_config(config: ModelConfig) -> ModelConfig:
    return ModelConfig(stage_channels=list(config.stage_channels), n_decoders=1,
                       n_classes=config.n_classes, in_channels=config.in_channels,
                       norm_epsilon=config.norm_epsilon)


def train_single_level_baseline(config: ModelConfig, train_cases: Sequence[CaseRecord],
                                schedule: TrainSchedule, alpha: float = 1.0,
                                level: Optional[int] = None,
                                val_cases: Optional[Sequence[CaseRecord]] = None,
                                output_dir: Optional[Union[str, Path]] = None
                                ) -> Tuple[MultiDecoderNet, TrainingHistory]:
    """U-Net a decoder singolo sul livello di consenso ceil(N/2)"""
    level = level or default_level(train_cases[0].n_raters)
    model = build_model(_single_decoder_config(config), seed=schedule.seed)
    history = train(model, train_cases, schedule, LossWeights.uniform(1, alpha=alpha),
                    val_cases, output_dir, LabelMode.LEVEL, level)
    return model, history


def train_level_baselines(config: ModelConfig, train_cases: Sequence[CaseRecord],
                          schedule: TrainSchedule, alpha: float = 1.0,
                          val_cases: Optional[Sequence[CaseRecord]] = None,
                          output_dir: Optional[Union[str, Path]] = None
                          ) -> List[Tuple[MultiDecoderNet, TrainingHistory]]:
    """N reti indipendenti, la rete k sul livello di consenso k; si combinano con ensemble_predict"""
    n = train_cases[0].n_raters
    results = []
    for k in range(1, n + 1):
        run_dir = Path(output_dir) / f"level_{k:02d}" if output_dir is not None else None
        results.append(train_single_level_baseline(
            config, train_cases, schedule, alpha, level=k, val_cases=val_cases,
            output_dir=run_dir))
    return results


def write_config_echo(path: Union[str, Path], data: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
