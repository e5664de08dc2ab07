"""
Metriche di valutazione
Binarizzazione a soglie multiple e dice medio tra mappe soft
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.backbone_net import ShapeMismatchError

logger = logging.getLogger(__name__)

ArrayLike = Union["SoftMap", np.ndarray]


class Provenance(Enum):
    """Origine di una mappa soft"""
    BRANCH_AVERAGE = "branch_average"
    RATER_AVERAGE = "rater_average"


@dataclass(frozen=True)
class ThresholdLadder:
    """Soglie tau, di default 0.0, 0.1, ..., 0.9"""
    taus: Tuple[float, ...] = tuple(k / 10 for k in range(10))

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if not taus:
            raise ValueError("threshold ladder must not be empty")
        if any(t < 0.0 or t >= 1.0 for t in taus):
            raise ValueError(f"thresholds must lie in [0, 1), got {taus}")
        if any(b <= a for a, b in zip(taus[:-1], taus[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {taus}")
        object.__setattr__(self, "taus", taus)

    def __len__(self) -> int:
        return len(self.taus)


@dataclass
class SoftMap:
    """Mappa (H, W) con valori in [0, 1]"""
    values: np.ndarray
    provenance: Provenance = Provenance.BRANCH_AVERAGE

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeMismatchError("soft map rank", "(H, W)", self.values.shape)
        if self.values.size and (np.nanmin(self.values) < 0.0 or np.nanmax(self.values) > 1.0
                                 or np.isnan(self.values).any()):
            raise ValueError("soft map values must lie in [0, 1]")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape


def _values(m: ArrayLike) -> np.ndarray:
    return m.values if isinstance(m, SoftMap) else np.asarray(m)


def binarize_mask(m: ArrayLike, tau: float) -> np.ndarray:
    """Pixel = 1 se e solo se valore > tau (disuguaglianza stretta)"""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"threshold must lie in [0, 1), got {tau}")
    return _values(m) > tau


def binary_dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a∩b| / (|a|+|b|); entrambe vuote -> 1.0, una sola vuota -> 0.0"""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatchError("mask shape", a.shape, b.shape)
    size_a = int(a.sum())
    size_b = int(b.sum())
    if size_a == 0 and size_b == 0:
        return 1.0
    if size_a == 0 or size_b == 0:
        return 0.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (size_a + size_b)


def staple_curve(pred: ArrayLike, gt: ArrayLike,
                 ladder: Optional[ThresholdLadder] = None) -> np.ndarray:
    """Dice binaria per ogni soglia della scala"""
    ladder = ladder or ThresholdLadder()
    p, g = _values(pred), _values(gt)
    if p.shape != g.shape:
        raise ShapeMismatchError("soft map shape", g.shape, p.shape)
    return np.array([binary_dice(binarize_mask(p, tau), binarize_mask(g, tau))
                     for tau in ladder.taus])


def staple_score(pred: ArrayLike, gt: ArrayLike,
                 ladder: Optional[ThresholdLadder] = None) -> float:
    """Media della dice sulle soglie; la loss ausiliaria ne è il negativo"""
    curve = staple_curve(pred, gt, ladder)
    return float(sum(curve.tolist()) / len(curve))


def auxiliary_loss(pred: ArrayLike, gt: ArrayLike,
                   ladder: Optional[ThresholdLadder] = None) -> float:
    """Non differenziabile: usata solo per monitoraggio e selezione del checkpoint"""
    return -staple_score(pred, gt, ladder)


@dataclass
class EvaluationReport:
    """Score per caso di un task"""
    task: str
    case_ids: List[str]
    scores: List[float]
    curves: List[np.ndarray] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(sum(self.scores) / len(self.scores)) if self.scores else float("nan")

    def mean_curve(self) -> np.ndarray:
        return np.mean(np.stack(self.curves), axis=0) if self.curves else np.array([])


def evaluate_dataset(preds: Sequence[ArrayLike], gts: Sequence[ArrayLike],
                     case_ids: Optional[Sequence[str]] = None, task: str = "default",
                     ladder: Optional[ThresholdLadder] = None,
                     workers: int = 1) -> EvaluationReport:
    """Score per caso e media aritmetica; i casi possono essere valutati in parallelo"""
    if len(preds) != len(gts):
        raise ValueError(f"got {len(preds)} predictions for {len(gts)} ground truths")
    ids = list(case_ids) if case_ids is not None else [f"case_{i:03d}" for i in range(len(preds))]
    if len(ids) != len(preds):
        raise ValueError(f"got {len(ids)} case ids for {len(preds)} cases")

    ladder = ladder or ThresholdLadder()
    pairs = list(zip(preds, gts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            curves = list(pool.map(lambda pg: staple_curve(pg[0], pg[1], ladder), pairs))
    else:
        curves = [staple_curve(p, g, ladder) for p, g in pairs]

    scores = [float(sum(c.tolist()) / len(c)) for c in curves]
    report = EvaluationReport(task=task, case_ids=ids, scores=scores, curves=curves)
    logger.info(f"Evaluated task '{task}': {len(scores)} cases, mean score {report.mean:.4f}")
    return report


def write_scores_csv(reports: Sequence[EvaluationReport], path: Union[str, Path]) -> Path:
    """CSV (task, case_id, score)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "case_id", "score"])
        for report in reports:
            for case_id, score in zip(report.case_ids, report.scores):
                writer.writerow([report.task, case_id, repr(score)])
    return path


def write_summary_json(reports: Sequence[EvaluationReport], path: Union[str, Path]) -> Path:
    """JSON {task -> score medio}"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary: Dict[str, float] = {r.task: r.mean for r in reports}
    path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    return path


def save_difference_heatmap(pred: ArrayLike, gt: ArrayLike, path: Union[str, Path],
                            title: Optional[str] = None) -> Path:
    """PNG con media delle annotazioni, predizione e |pred - gt|"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    p, g = _values(pred), _values(gt)
    if p.shape != g.shape:
        raise ShapeMismatchError("soft map shape", g.shape, p.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    panels = [(g, "averaged annotations"), (p, "prediction"), (np.abs(p - g), "|pred - gt|")]
    for ax, (img, label) in zip(axes, panels):
        im = ax.imshow(img, cmap="magma", vmin=0.0, vmax=1.0)
        ax.set_title(label)
        ax.axis("off")
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.8)
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
