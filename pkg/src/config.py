"""
Configurazione di una run
Carica JSON/YAML, espande le variabili d'ambiente, applica gli override da
linea di comando e valida tutto con pydantic
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.backbone_net import ModelConfig
from src.datapipe import LabelMode, Modality
from src.losses import LossWeights
from src.trainer import EnsembleRun, EnsembleSpec, TrainSchedule

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Configurazione illeggibile o non valida"""

    def __init__(self, source: str, message: str):
        self.source = source
        self.message = message
        super().__init__(f"Invalid configuration ({source}): {message}")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(StrictModel):
    stage_channels: List[int] = Field(default_factory=lambda: [16, 32, 48, 64, 64], min_length=2)
    n_decoders: int = Field(3, ge=1)
    n_classes: int = Field(2, ge=2)
    in_channels: int = Field(1, ge=1)
    norm_epsilon: float = Field(1e-5, gt=0)

    @field_validator("stage_channels")
    @classmethod
    def _positive_channels(cls, v: List[int]) -> List[int]:
        if any(c <= 0 for c in v):
            raise ValueError("all stage widths must be positive")
        return v

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(**self.model_dump())


class ScheduleSection(StrictModel):
    base_lr: float = Field(3e-4, gt=0)
    warmup_epochs: int = Field(10, ge=1)
    weight_decay: float = Field(1e-5, ge=0)
    cross_enable_epoch: int = Field(20, ge=0)
    total_epochs: int = Field(200, ge=0)
    seed: int = 0
    beta_adapt: bool = True
    batch_size: int = Field(4, ge=1)
    val_fraction: float = Field(0.2, ge=0, lt=1)

    def to_schedule(self) -> TrainSchedule:
        data = self.model_dump()
        data.pop("val_fraction")
        return TrainSchedule(**data)


class LossSection(StrictModel):
    alpha: float = Field(1.0, ge=0)
    betas: Optional[List[float]] = None

    @field_validator("betas")
    @classmethod
    def _nonnegative(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is not None and any(not (b >= 0 and b != float("inf")) for b in v):
            raise ValueError("betas must be finite and >= 0")
        return v


class LabelSection(StrictModel):
    mode: LabelMode = LabelMode.CONSENSUS
    level: Optional[int] = Field(None, ge=1)


class DataSection(StrictModel):
    path: str = "data/synthetic"
    task: str = "synthetic"
    ct_window: Tuple[float, float] = (-100.0, 300.0)

    @field_validator("ct_window")
    @classmethod
    def _ordered_window(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if not v[0] < v[1]:
            raise ValueError("ct_window must satisfy lo < hi")
        return v


class SynthSection(StrictModel):
    n_cases: int = Field(8, ge=1)
    n_raters: int = Field(3, ge=1)
    seed: int = 7
    ambiguity: float = Field(0.3, ge=0, le=1)
    height: int = Field(64, ge=1)
    width: int = Field(64, ge=1)
    modality: Modality = Modality.MR


class EnsembleRunSection(StrictModel):
    alpha: float = Field(1.0, ge=0)
    betas: Optional[List[float]] = None
    seed: int = 0


class EnsembleSection(StrictModel):
    size: int = Field(1, ge=1)
    runs: Optional[List[EnsembleRunSection]] = None


class LoggingSection(StrictModel):
    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    @field_validator("level")
    @classmethod
    def _known_level(cls, v: str) -> str:
        v = v.upper()
        if v not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"unknown logging level {v}")
        return v


class RunConfig(StrictModel):
    """Configurazione completa di una run"""
    model: ModelSection = Field(default_factory=ModelSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    loss: LossSection = Field(default_factory=LossSection)
    labels: LabelSection = Field(default_factory=LabelSection)
    data: DataSection = Field(default_factory=DataSection)
    synth: SynthSection = Field(default_factory=SynthSection)
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    logging: LoggingSection = Field(default_factory=LoggingSection)
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _cross_fields(self) -> "RunConfig":
        n = self.model.n_decoders
        if self.loss.betas is not None and len(self.loss.betas) != n:
            raise ValueError(f"loss.betas has {len(self.loss.betas)} entries, "
                             f"model.n_decoders is {n}")
        for k, run in enumerate(self.ensemble.runs or []):
            if run.betas is not None and len(run.betas) != n:
                raise ValueError(f"ensemble.runs[{k}].betas has {len(run.betas)} entries, "
                                 f"model.n_decoders is {n}")
        if self.labels.level is not None and self.labels.level > self.synth.n_raters \
                and self.labels.mode == LabelMode.LEVEL:
            raise ValueError(f"labels.level {self.labels.level} exceeds synth.n_raters "
                             f"{self.synth.n_raters}")
        return self

    def build_model_config(self) -> ModelConfig:
        return self.model.to_model_config()

    def loss_weights(self) -> LossWeights:
        betas = self.loss.betas if self.loss.betas is not None else [1.0] * self.model.n_decoders
        return LossWeights(alpha=self.loss.alpha, betas=list(betas))

    def ensemble_spec(self) -> EnsembleSpec:
        if self.ensemble.runs:
            return EnsembleSpec(runs=[EnsembleRun(alpha=r.alpha, betas=r.betas, seed=r.seed)
                                      for r in self.ensemble.runs])
        return EnsembleSpec.default(seed=self.schedule.seed, size=self.ensemble.size,
                                    alpha=self.loss.alpha, betas=self.loss.betas)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)


def _expand_env_vars(obj: Any) -> Any:
    """Espande valori stringa del tipo ${VAR}"""
    if isinstance(obj, dict):
        return {k: _expand_env_vars(v) for k, v in obj.items()}
    elif isinstance(obj, list):
        return [_expand_env_vars(item) for item in obj]
    elif isinstance(obj, str) and obj.startswith('${') and obj.endswith('}'):
        return os.getenv(obj[2:-1], obj)
    return obj


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(dotted, f"'{part}' is not a section")
        node = child
    node[parts[-1]] = value


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """JSON per file .json, YAML altrimenti"""
    config_file = Path(path)
    if not config_file.is_file():
        raise ConfigError(str(config_file), "config file not found")
    text = config_file.read_text(encoding="utf-8")
    try:
        if config_file.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(str(config_file), f"cannot parse: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(str(config_file), "top level must be a mapping")
    return data


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Carica, espande, sovrascrive (vincono gli override) e valida"""
    source = str(path) if path else "<defaults>"
    data = read_config_file(path) if path else {}
    data = _expand_env_vars(data)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, dotted, value)

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        details = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}"
                            for err in e.errors())
        raise ConfigError(source, details) from e

    logger.info(f"Configuration loaded from {source}")
    return config
