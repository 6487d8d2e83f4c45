"""Training objectives and evaluation metrics.

The adversarial objective combines a source-domain regression loss with a
binary cross-entropy domain-classification loss weighted by ``alpha``; the
combined scalar is reported for monitoring, while parameter updates use the
per-branch gradients. Evaluation metrics (RMSE and the asymmetric scoring
function with constants a1=13, a2=10) operate on de-normalized RUL cycles.
"""

from dataclasses import dataclass

import numpy as np

BCE_CLAMP = 1e-7
SCORE_A1 = 13.0
SCORE_A2 = 10.0


@dataclass
class LossConfig:
    p: int = 1  # regression exponent: 1 = MAE, 2 = MSE
    alpha: float = 1.0  # domain-loss weight
    l2: float = 0.0  # weight decay on regressor and classifier weights

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ValueError(f"regression exponent must be 1 or 2, got {self.p}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")


def _paired(pred, target):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty prediction vector")
    return pred, target


def regression_loss(pred, target, p: int = 1) -> float:
    """Mean of |pred - target|^p over the batch."""
    pred, target = _paired(pred, target)
    if p not in (1, 2):
        raise ValueError(f"regression exponent must be 1 or 2, got {p}")
    return float(np.mean(np.abs(pred - target) ** p))


def regression_loss_grad(pred, target, p: int = 1) -> np.ndarray:
    """Gradient of :func:`regression_loss` with respect to ``pred``."""
    pred, target = _paired(pred, target)
    diff = pred - target
    if p == 1:
        return np.sign(diff) / pred.size
    return 2.0 * diff / pred.size


def domain_bce(pred_d, d) -> float:
    """Mean binary cross-entropy between domain labels and predicted probabilities.

    Predictions are clamped to [BCE_CLAMP, 1-BCE_CLAMP] before taking logs.
    """
    pred_d, d = _paired(pred_d, d)
    p = np.clip(pred_d, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(-np.mean(d * np.log(p) + (1.0 - d) * np.log(1.0 - p)))


def domain_bce_grad_logits(pred_d, d) -> np.ndarray:
    """Gradient of mean BCE with respect to the pre-sigmoid logits.

    For BCE composed with a sigmoid the logit gradient collapses to
    (prob - label) / n, which stays finite even where the probability
    saturates.
    """
    pred_d, d = _paired(pred_d, d)
    return (pred_d - d) / pred_d.size


def combined_loss(src_reg: float, src_dom: float, tgt_dom: float, cfg: LossConfig) -> float:
    """Monitoring scalar: regression loss minus alpha times the domain losses."""
    return float(src_reg - cfg.alpha * (src_dom + tgt_dom))


def rmse(pred, target) -> float:
    pred, target = _paired(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def nasa_score(pred, target) -> float:
    """Asymmetric exponential score; late predictions are penalised more.

    For each error c = pred - target the contribution is exp(-c/13)-1 when
    c < 0 and exp(c/10)-1 otherwise; the total is summed, not averaged.
    """
    pred, target = _paired(pred, target)
    c = pred - target
    early = np.expm1(-c / SCORE_A1)
    late = np.expm1(c / SCORE_A2)
    return float(np.sum(np.where(c < 0, early, late)))


def l2_penalty(weights, coeff: float) -> float:
    """coeff * sum of squared entries over an iterable of weight tensors."""
    if coeff < 0:
        raise ValueError("l2 coefficient must be >= 0")
    total = 0.0
    for w in weights:
        total += float(np.sum(np.asarray(w, dtype=np.float64) ** 2))
    return coeff * total
