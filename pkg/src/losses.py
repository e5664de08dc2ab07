"""
Cross Loss
Dice + cross entropy per ramo, con termini di dice incrociati verso le
etichette degli altri rami
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch

from src.backbone_net import BranchPredictions, ShapeMismatchError

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5
CE_CLAMP = 1e-12

LOSS_CSV_HEADER = ["epoch", "branch", "L_ce", "L_dc_self", "L_dc_cross_mean", "L_loss", "total"]


class TargetEncodingError(ValueError):
    """Target non codificato one-hot"""


@dataclass
class LossWeights:
    """Coefficienti alpha e beta_j della cross loss"""
    alpha: float = 1.0
    betas: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    cross_enabled: bool = True

    def validate(self, n_branches: Optional[int] = None) -> "LossWeights":
        if not (self.alpha >= 0 and self.alpha != float("inf")):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        for b in self.betas:
            if not (b >= 0 and b != float("inf")):
                raise ValueError(f"betas must be finite and >= 0, got {self.betas}")
        if n_branches is not None and len(self.betas) != n_branches:
            raise ValueError(f"expected {n_branches} betas, got {len(self.betas)}")
        return self

    @classmethod
    def uniform(cls, n_branches: int, alpha: float = 1.0, cross_enabled: bool = True) -> "LossWeights":
        return cls(alpha=alpha, betas=[1.0] * n_branches, cross_enabled=cross_enabled)

    def with_gate(self, cross_enabled: bool) -> "LossWeights":
        return LossWeights(alpha=self.alpha, betas=list(self.betas), cross_enabled=cross_enabled)


@dataclass
class BranchLossTerms:
    """Componenti della loss del ramo i (tensori, differenziabili)"""
    branch: int
    ce_self: torch.Tensor
    dice_self: torch.Tensor
    dice_cross: Dict[int, torch.Tensor]
    loss: torch.Tensor

    @property
    def dice_cross_mean(self) -> float:
        if not self.dice_cross:
            return 0.0
        return float(sum(float(v) for v in self.dice_cross.values()) / len(self.dice_cross))

    def as_floats(self) -> Dict[str, Any]:
        return {
            "branch": self.branch,
            "L_ce": float(self.ce_self),
            "L_dc_self": float(self.dice_self),
            "L_dc_cross": {j: float(v) for j, v in self.dice_cross.items()},
            "L_loss": float(self.loss),
        }


@dataclass
class LossReport:
    per_branch: List[BranchLossTerms]
    total: torch.Tensor

    def branch_losses(self) -> List[float]:
        return [float(t.loss) for t in self.per_branch]

    def to_rows(self, epoch: int) -> List[List[Any]]:
        """Righe CSV (epoch, branch, L_ce, L_dc_self, L_dc_cross_mean, L_loss, total)"""
        total = float(self.total)
        return [
            [epoch, t.branch, float(t.ce_self), float(t.dice_self),
             t.dice_cross_mean, float(t.loss), total]
            for t in self.per_branch
        ]


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    if pred.shape != target.shape:
        raise ShapeMismatchError("prediction/target shape", tuple(target.shape), tuple(pred.shape))
    if pred.dim() == 3:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    elif pred.dim() != 4:
        raise ShapeMismatchError("prediction rank", "(K, H, W) or (B, K, H, W)", tuple(pred.shape))
    return pred, target


def _check_one_hot(target: torch.Tensor) -> None:
    with torch.no_grad():
        binary = torch.logical_or(target == 0, target == 1).all()
        single = (target.sum(dim=1) == 1).all()
    if not (bool(binary) and bool(single)):
        raise TargetEncodingError("target is not one-hot per pixel")


def dice_loss(pred: torch.Tensor, target: torch.Tensor,
              class_set: Optional[Sequence[int]] = None,
              smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """
    1 - (2/|K|) sum_k (sum_p u v) / (sum_p u + sum_p v), con smoothing su
    numeratore e denominatore. class_set di default: solo classi foreground.
    Con un batch la dice è calcolata per campione e poi mediata.
    """
    pred, target = _check_pair(pred, target)
    _check_one_hot(target)

    n_classes = pred.shape[1]
    classes = list(class_set) if class_set is not None else list(range(1, n_classes))
    if not classes:
        raise ValueError("class_set must be nonempty")
    if any(k < 0 or k >= n_classes for k in classes):
        raise ValueError(f"class_set {classes} out of range for {n_classes} classes")

    u = pred[:, classes]
    v = target[:, classes]
    intersection = (u * v).sum(dim=(-2, -1))
    denominator = u.sum(dim=(-2, -1)) + v.sum(dim=(-2, -1))
    dice = (2.0 * intersection + smooth) / (denominator + smooth)
    return (1.0 - dice.mean(dim=1)).mean()


def cross_entropy_loss(pred: torch.Tensor, target: torch.Tensor,
                       clamp: float = CE_CLAMP) -> torch.Tensor:
    """Media sui pixel di -sum_k v_k log(u_k), con u limitato a [clamp, 1]"""
    pred, target = _check_pair(pred, target)
    log_u = torch.log(pred.clamp(min=clamp, max=1.0))
    return -(target * log_u).sum(dim=1).mean()


def _as_targets(labels: Any, like: torch.Tensor) -> torch.Tensor:
    if hasattr(labels, "to_onehot"):
        labels = labels.to_onehot(like.shape[-3])
    return torch.as_tensor(labels, dtype=like.dtype, device=like.device)


def _as_probs(preds: Union[BranchPredictions, torch.Tensor]) -> torch.Tensor:
    return preds.probs if isinstance(preds, BranchPredictions) else preds


def branch_cross_loss(i: int, preds: Union[BranchPredictions, torch.Tensor],
                      labels: Any, weights: LossWeights) -> BranchLossTerms:
    """
    L^i = alpha * CE(i,i) + Dice(i,i) + 1/(N-1) * sum_{j != i} beta_j * Dice(i,j)

    labels: target one-hot allineati ai rami, (N, [B,] K, H, W), oppure un
    oggetto con metodo to_onehot(K).
    """
    probs = _as_probs(preds)
    targets = _as_targets(labels, probs)
    n = probs.shape[0]
    if targets.shape[0] != n:
        raise ShapeMismatchError("label count", n, targets.shape[0])
    if not 0 <= i < n:
        raise IndexError(f"branch index {i} out of range for {n} branches")
    if len(weights.betas) != n:
        raise ValueError(f"expected {n} betas, got {len(weights.betas)}")

    u = probs[i]
    ce_self = cross_entropy_loss(u, targets[i])
    dice_self = dice_loss(u, targets[i])
    loss = weights.alpha * ce_self + dice_self

    dice_cross: Dict[int, torch.Tensor] = {}
    if n > 1 and weights.cross_enabled:
        cross_sum = torch.zeros((), dtype=u.dtype, device=u.device)
        for j in range(n):
            if j == i:
                continue
            dice_cross[j] = dice_loss(u, targets[j])
            cross_sum = cross_sum + weights.betas[j] * dice_cross[j]
        loss = loss + cross_sum / (n - 1)
    elif n > 1:
        # Gate chiuso: i termini incrociati finiscono solo nel report
        with torch.no_grad():
            for j in range(n):
                if j != i:
                    dice_cross[j] = dice_loss(u, targets[j])

    return BranchLossTerms(branch=i, ce_self=ce_self, dice_self=dice_self,
                           dice_cross=dice_cross, loss=loss)


def total_training_loss(preds: Union[BranchPredictions, torch.Tensor], labels: Any,
                        weights: LossWeights) -> Tuple[torch.Tensor, LossReport]:
    """Media aritmetica delle loss di ramo"""
    probs = _as_probs(preds)
    targets = _as_targets(labels, probs)
    terms = [branch_cross_loss(i, probs, targets, weights) for i in range(probs.shape[0])]
    total = torch.stack([t.loss for t in terms]).mean()
    return total, LossReport(per_branch=terms, total=total)


def write_loss_report(path: Union[str, Path], rows: Iterable[Sequence[Any]]) -> Path:
    """Scrive le righe di LossReport.to_rows in CSV"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_CSV_HEADER)
        for row in rows:
            writer.writerow(row)
    return path
