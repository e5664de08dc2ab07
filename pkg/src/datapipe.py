"""
Data Pipeline
Ingestione dei casi, preprocessing (z-score / finestra CT / padding),
rietichettatura per consenso, generatore sintetico multi-annotatore e
formato su disco
"""

import json
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from src.backbone_net import ShapeMismatchError
from src.metrics import Provenance, SoftMap

logger = logging.getLogger(__name__)

META_FILE = "meta.json"
IMAGE_FILE = "image.f32"
PREDICTION_FILE = "pred.f32"
IMAGE_DTYPE = np.dtype("<f4")
MASK_DTYPE = np.dtype("u1")


class Modality(Enum):
    MR = "MR"
    CT = "CT"


class LabelMode(Enum):
    """Target dei decoder"""
    CONSENSUS = "consensus"  # decoder i -> livello di consenso i
    RATERS = "raters"        # decoder i -> annotatore i
    LEVEL = "level"          # tutti i decoder -> un solo livello


class DatasetError(Exception):
    """Errore strutturato su dataset o predizioni su disco"""

    def __init__(self, path: Union[str, Path], message: str, case_id: Optional[str] = None):
        self.path = str(path)
        self.case_id = case_id
        self.message = message
        prefix = f"case '{case_id}' " if case_id else ""
        super().__init__(f"{prefix}{message} [{self.path}]")


class PreprocessingError(ValueError):
    """Immagine o parametri non validi per il preprocessing"""


@dataclass(frozen=True)
class CropRecord:
    """Regione originale dentro la griglia paddata"""
    top: int
    left: int
    height: int
    width: int

    def to_dict(self) -> Dict[str, int]:
        return {"top": self.top, "left": self.left, "height": self.height, "width": self.width}

    @classmethod
    def identity(cls, height: int, width: int) -> "CropRecord":
        return cls(0, 0, height, width)


@dataclass(frozen=True, eq=False)
class CaseRecord:
    """Un'immagine (C, H, W) con le sue N maschere binarie (N, H, W)"""
    image: np.ndarray
    raters: np.ndarray
    modality: Modality
    case_id: str
    preprocessed: bool = False
    crop: Optional[CropRecord] = None

    def __post_init__(self):
        image = np.asarray(self.image)
        raters = np.asarray(self.raters)
        if image.ndim != 3:
            raise ShapeMismatchError(f"case '{self.case_id}' image rank", "(C, H, W)", image.shape)
        if raters.ndim != 3 or raters.shape[0] < 1:
            raise ShapeMismatchError(f"case '{self.case_id}' raters", "(N, H, W)", raters.shape)
        if raters.shape[1:] != image.shape[1:]:
            raise ShapeMismatchError(f"case '{self.case_id}' rater mask shape",
                                     image.shape[1:], raters.shape[1:])
        if not np.isin(raters, (0, 1)).all():
            raise ValueError(f"case '{self.case_id}': rater masks must be binary")
        image = image.copy()
        raters = raters.astype(MASK_DTYPE, copy=True)
        image.setflags(write=False)
        raters.setflags(write=False)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "raters", raters)

    @property
    def n_raters(self) -> int:
        return self.raters.shape[0]

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


@dataclass(eq=False)
class ConsensusLabels:
    """Livello k = pixel segnati da almeno k annotatori (k = 1..N)"""
    levels: np.ndarray  # (N, H, W) uint8
    counts: np.ndarray  # (H, W) conteggi di accordo 0..N

    @property
    def n_levels(self) -> int:
        return self.levels.shape[0]

    def to_onehot(self, n_classes: int = 2) -> np.ndarray:
        return to_onehot(self.levels, n_classes)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def zscore_normalize(image: np.ndarray) -> np.ndarray:
    """Media 0 e deviazione standard (di popolazione) 1 per canale"""
    arr = np.asarray(image)
    work = arr.astype(np.float64)
    axes = tuple(range(1, work.ndim)) if work.ndim > 2 else None
    mean = work.mean(axis=axes, keepdims=axes is not None)
    std = work.std(axis=axes, keepdims=axes is not None)
    if np.any(std == 0):
        raise PreprocessingError("cannot z-score a constant image (zero variance)")
    out = (work - mean) / std
    return out.astype(arr.dtype if np.issubdtype(arr.dtype, np.floating) else IMAGE_DTYPE)


def ct_rescale(image: np.ndarray, roi_window: Tuple[float, float]) -> np.ndarray:
    """Clip alla finestra [lo, hi] e mappa affine su [0, 1]"""
    lo, hi = float(roi_window[0]), float(roi_window[1])
    if not lo < hi:
        raise PreprocessingError(f"invalid CT window ({lo}, {hi}): lo must be < hi")
    arr = np.asarray(image)
    out = (np.clip(arr.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return out.astype(arr.dtype if np.issubdtype(arr.dtype, np.floating) else IMAGE_DTYPE)


def preprocess_case(case: CaseRecord, ct_window: Tuple[float, float] = (-100.0, 300.0)) -> CaseRecord:
    """Z-score per MR, finestra + rescale per CT"""
    if case.preprocessed:
        return case
    try:
        if case.modality == Modality.CT:
            image = ct_rescale(case.image, ct_window)
        else:
            image = zscore_normalize(case.image)
    except PreprocessingError as e:
        raise PreprocessingError(f"case '{case.case_id}': {e}") from e
    return replace(case, image=image.astype(IMAGE_DTYPE), preprocessed=True)


def grid_padding(size: int, multiple: int) -> Tuple[int, int]:
    """(prima, dopo) per arrivare al multiplo successivo; il pixel dispari va in fondo"""
    total = -size % multiple
    before = total // 2
    return before, total - before


def pad_array(array: np.ndarray, multiple: int) -> Tuple[np.ndarray, CropRecord]:
    """Zero-padding simmetrico delle ultime due dimensioni"""
    h, w = array.shape[-2:]
    top, bottom = grid_padding(h, multiple)
    left, right = grid_padding(w, multiple)
    pad = [(0, 0)] * (array.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(array, pad, mode="constant", constant_values=0), CropRecord(top, left, h, w)


def unpad(array: np.ndarray, crop: CropRecord) -> np.ndarray:
    return array[..., crop.top:crop.top + crop.height, crop.left:crop.left + crop.width]


def pad_to_grid(case: CaseRecord, multiple: int) -> Tuple[CaseRecord, CropRecord]:
    """Padding di immagine e maschere; il crop record inverte esattamente il padding"""
    if multiple < 1:
        raise ValueError(f"grid multiple must be >= 1, got {multiple}")
    image, local = pad_array(case.image, multiple)
    raters, _ = pad_array(case.raters, multiple)
    base = case.crop or CropRecord.identity(*case.spatial_shape)
    crop = CropRecord(top=base.top + local.top, left=base.left + local.left,
                      height=base.height, width=base.width)
    return replace(case, image=image, raters=raters, crop=crop), crop


def unpad_case(case: CaseRecord) -> CaseRecord:
    if case.crop is None:
        return case
    return replace(case, image=unpad(case.image, case.crop),
                   raters=unpad(case.raters, case.crop), crop=None)


def prepare_cases(cases: Sequence[CaseRecord], multiple: int,
                  ct_window: Tuple[float, float] = (-100.0, 300.0)) -> List[CaseRecord]:
    """Normalizza (se serve) e porta ogni caso sulla griglia della rete"""
    prepared = []
    for case in cases:
        case = preprocess_case(case, ct_window)
        case, _ = pad_to_grid(case, multiple)
        prepared.append(case)
    return prepared


# ---------------------------------------------------------------------------
# Etichette
# ---------------------------------------------------------------------------

def _stack_raters(raters: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    if isinstance(raters, np.ndarray):
        stack = raters
    else:
        masks = [np.asarray(m) for m in raters]
        if not masks:
            raise ValueError("at least one rater mask is required")
        for m in masks[1:]:
            if m.shape != masks[0].shape:
                raise ShapeMismatchError("rater mask shape", masks[0].shape, m.shape)
        stack = np.stack(masks)
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise ShapeMismatchError("rater stack", "(N, H, W) with N >= 1", stack.shape)
    return stack


def relabel_consensus(raters: Union[np.ndarray, Sequence[np.ndarray]]) -> ConsensusLabels:
    """Livello k = (conteggio >= k), calcolato su conteggi interi"""
    stack = _stack_raters(raters)
    counts = stack.astype(np.int64).sum(axis=0)
    n = stack.shape[0]
    levels = np.stack([(counts >= k) for k in range(1, n + 1)]).astype(MASK_DTYPE)
    return ConsensusLabels(levels=levels, counts=counts)


def average_annotations(raters: Union[np.ndarray, Sequence[np.ndarray]]) -> SoftMap:
    """Media per pixel delle maschere: valori in {0, 1/N, ..., 1}"""
    stack = _stack_raters(raters)
    counts = stack.astype(np.int64).sum(axis=0)
    return SoftMap(values=counts / stack.shape[0], provenance=Provenance.RATER_AVERAGE)


def default_level(n_raters: int) -> int:
    return int(math.ceil(n_raters / 2))


def training_targets(case: CaseRecord, mode: LabelMode, n_decoders: int,
                     level: Optional[int] = None) -> np.ndarray:
    """Maschere binarie (n_decoders, H, W) da usare come target dei rami"""
    n = case.n_raters
    if mode in (LabelMode.CONSENSUS, LabelMode.RATERS) and n_decoders != n:
        raise ValueError(f"case '{case.case_id}': {mode.value} labels need one decoder per "
                         f"rater ({n}), model has {n_decoders}")
    if mode == LabelMode.RATERS:
        return np.asarray(case.raters)
    labels = relabel_consensus(case.raters)
    if mode == LabelMode.CONSENSUS:
        return labels.levels
    k = level if level is not None else default_level(n)
    if not 1 <= k <= n:
        raise ValueError(f"consensus level {k} out of range 1..{n}")
    return np.repeat(labels.levels[k - 1:k], n_decoders, axis=0)


def to_onehot(masks: np.ndarray, n_classes: int = 2) -> np.ndarray:
    """(N, H, W) binarie -> (N, K, H, W) float32"""
    masks = np.asarray(masks).astype(np.int64)
    onehot = np.eye(n_classes, dtype=np.float32)[masks]
    return np.moveaxis(onehot, -1, -3)


def split_train_validation(cases: Sequence[CaseRecord],
                           fraction: float = 0.2) -> Tuple[List[CaseRecord], List[CaseRecord]]:
    """Ultimo 20% dei casi ordinati per case_id come validazione"""
    ordered = sorted(cases, key=lambda c: c.case_id)
    if len(ordered) < 2 or fraction <= 0:
        return ordered, []
    n_val = min(max(1, int(round(len(ordered) * fraction))), len(ordered) - 1)
    return ordered[:-n_val], ordered[-n_val:]


# ---------------------------------------------------------------------------
# Generatore sintetico
# ---------------------------------------------------------------------------

N_HARMONICS = 4
SHAPE_SPREAD = 0.08
RATER_SPREAD = 0.25
MAX_DISPLACEMENT = 0.6


def _radial_profile(coeffs: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Somma di armoniche a bassa frequenza, ampiezza decrescente come 1/k"""
    profile = np.zeros_like(theta)
    for k, (a, b) in enumerate(coeffs, start=1):
        profile += (a * np.cos(k * theta) + b * np.sin(k * theta)) / k
    return profile


def synth_generate(n_cases: int, n_raters: int, seed: int, ambiguity: float,
                   shape: Tuple[int, int] = (64, 64), modality: Modality = Modality.MR,
                   contrast: float = 1.0, noise: float = 0.15) -> List[CaseRecord]:
    """
    Fantocci a blob con N annotatori; ogni annotatore sposta il bordo vero con
    uno spostamento radiale liscio scalato da ambiguity. Le estrazioni casuali
    seguono sempre lo stesso ordine, indipendente da ambiguity.
    """
    if n_cases < 1 or n_raters < 1:
        raise ValueError("n_cases and n_raters must be positive")
    if not 0.0 <= ambiguity <= 1.0:
        raise ValueError(f"ambiguity must lie in [0, 1], got {ambiguity}")

    rng = np.random.default_rng(seed)
    height, width = shape
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cases = []

    for index in range(n_cases):
        cy = rng.uniform(0.35, 0.65) * height
        cx = rng.uniform(0.35, 0.65) * width
        radius = rng.uniform(0.15, 0.25) * min(height, width)
        shape_coeffs = rng.normal(0.0, SHAPE_SPREAD, size=(N_HARMONICS, 2))
        rater_coeffs = rng.normal(0.0, RATER_SPREAD, size=(n_raters, N_HARMONICS, 2))
        noise_field = rng.normal(0.0, 1.0, size=(height, width))

        theta = np.arctan2(yy - cy, xx - cx)
        dist = np.hypot(yy - cy, xx - cx)
        true_radius = radius * (1.0 + np.clip(_radial_profile(shape_coeffs, theta), -0.3, 0.3))
        true_mask = dist <= true_radius

        raters = []
        for j in range(n_raters):
            displacement = np.clip(_radial_profile(rater_coeffs[j], theta),
                                   -MAX_DISPLACEMENT, MAX_DISPLACEMENT)
            raters.append(dist <= true_radius * (1.0 + ambiguity * displacement))

        blob = ndimage.gaussian_filter(true_mask.astype(np.float64), sigma=1.5)
        signal = contrast * blob + noise * noise_field
        if modality == Modality.CT:
            image = 40.0 + 200.0 * signal
        else:
            image = 100.0 + 50.0 * signal

        cases.append(CaseRecord(
            image=image[np.newaxis].astype(IMAGE_DTYPE),
            raters=np.stack(raters).astype(MASK_DTYPE),
            modality=modality,
            case_id=f"case_{index:03d}",
        ))

    logger.info(f"Generated {n_cases} synthetic cases with {n_raters} raters "
                f"(seed={seed}, ambiguity={ambiguity})")
    return cases


# ---------------------------------------------------------------------------
# Formato su disco
# ---------------------------------------------------------------------------

def _write_json(path: Path, data: Dict[str, Any]) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path, case_id: Optional[str] = None) -> Dict[str, Any]:
    if not path.is_file():
        raise DatasetError(path, "metadata file not found", case_id)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(path, f"invalid metadata JSON: {e}", case_id) from e


def save_case(case: CaseRecord, root: Union[str, Path]) -> Path:
    case_dir = Path(root) / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)

    meta: Dict[str, Any] = {
        "case_id": case.case_id,
        "modality": case.modality.value,
        "shape": [int(s) for s in case.image.shape],
        "n_raters": case.n_raters,
    }
    if case.preprocessed:
        meta["preprocessed"] = True
    if case.crop is not None:
        meta["crop"] = case.crop.to_dict()
    _write_json(case_dir / META_FILE, meta)

    np.ascontiguousarray(case.image, dtype=IMAGE_DTYPE).tofile(case_dir / IMAGE_FILE)
    for j in range(case.n_raters):
        np.ascontiguousarray(case.raters[j], dtype=MASK_DTYPE).tofile(case_dir / f"rater_{j:02d}.u8")
    return case_dir


def save_dataset(cases: Sequence[CaseRecord], root: Union[str, Path]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for case in cases:
        save_case(case, root)
    logger.info(f"Dataset with {len(cases)} cases saved to {root}")
    return root


def _read_raw(path: Path, dtype: np.dtype, count: int, case_id: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(path, "data file not found", case_id)
    data = np.fromfile(path, dtype=dtype)
    if data.size != count:
        raise DatasetError(path, f"expected {count} values, found {data.size} "
                                 f"(shape mismatch with meta.json)", case_id)
    return data


def load_case(case_dir: Union[str, Path]) -> CaseRecord:
    case_dir = Path(case_dir)
    meta = _read_json(case_dir / META_FILE)
    case_id = str(meta.get("case_id", case_dir.name))
    try:
        c, h, w = (int(s) for s in meta["shape"])
        n_raters = int(meta["n_raters"])
        modality = Modality(meta["modality"])
    except (KeyError, ValueError, TypeError) as e:
        raise DatasetError(case_dir / META_FILE, f"incomplete metadata: {e}", case_id) from e

    image = _read_raw(case_dir / IMAGE_FILE, IMAGE_DTYPE, c * h * w, case_id).reshape(c, h, w)
    raters = np.stack([
        _read_raw(case_dir / f"rater_{j:02d}.u8", MASK_DTYPE, h * w, case_id).reshape(h, w)
        for j in range(n_raters)
    ])
    if not np.isin(raters, (0, 1)).all():
        raise DatasetError(case_dir, "rater masks must contain only 0/1", case_id)

    crop = CropRecord(**meta["crop"]) if "crop" in meta else None
    return CaseRecord(image=image.astype(np.float32), raters=raters, modality=modality,
                      case_id=case_id, preprocessed=bool(meta.get("preprocessed", False)),
                      crop=crop)


def load_dataset(path: Union[str, Path]) -> List[CaseRecord]:
    """Carica tutti i casi (una directory per caso), ordinati per case_id"""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(root, "dataset directory not found")
    case_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not case_dirs:
        raise DatasetError(root, "dataset contains no case directories")
    cases = sorted((load_case(d) for d in case_dirs), key=lambda c: c.case_id)
    logger.info(f"Dataset loaded from {root}: {len(cases)} cases")
    return cases


def save_prediction(path: Union[str, Path], softmap: SoftMap,
                    case_id: Optional[str] = None) -> Path:
    """Scrive pred.f32 (float32 little-endian) + meta.json nella directory indicata"""
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = np.ascontiguousarray(softmap.values, dtype=IMAGE_DTYPE)
    _write_json(out_dir / META_FILE, {
        "case_id": case_id or out_dir.name,
        "shape": [int(s) for s in values.shape],
        "provenance": softmap.provenance.value,
    })
    values.tofile(out_dir / PREDICTION_FILE)
    return out_dir


def load_prediction(path: Union[str, Path]) -> SoftMap:
    pred_dir = Path(path)
    meta = _read_json(pred_dir / META_FILE)
    case_id = meta.get("case_id")
    try:
        h, w = (int(s) for s in meta["shape"])
    except (KeyError, ValueError, TypeError) as e:
        raise DatasetError(pred_dir / META_FILE, f"incomplete metadata: {e}", case_id) from e
    values = _read_raw(pred_dir / PREDICTION_FILE, IMAGE_DTYPE, h * w, case_id).reshape(h, w)
    return SoftMap(values=values.astype(np.float32),
                   provenance=Provenance(meta.get("provenance", Provenance.BRANCH_AVERAGE.value)))


def load_predictions(root: Union[str, Path]) -> Dict[str, SoftMap]:
    """case_id -> SoftMap per ogni sottodirectory di predizione"""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(root, "prediction directory not found")
    preds = {}
    for pred_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        meta = _read_json(pred_dir / META_FILE)
        preds[str(meta.get("case_id", pred_dir.name))] = load_prediction(pred_dir)
    return preds
