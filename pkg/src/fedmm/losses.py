"""The four-term training objective.

Per minibatch the total loss is

    prediction MSE
    + mi_weight       * discriminator-style mutual-information bound penalty
    + align_weight    * pairwise squared-distance modality alignment penalty
    + contrast_weight * InfoNCE consistency against historical representations

Terms with a zero weight are skipped entirely, not computed. Targets are
expected in standardized units (the data module standardizes on the global
training split); the mutual-information bound multiplies predictions with
targets, which is only meaningful on a common scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ContractError, DomainError

_LOG_FLOOR = 1e-12
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Objective coefficients and the knobs of the regularizers."""

    mi_weight: float = 0.1
    align_weight: float = 0.1
    contrast_weight: float = 0.1
    temperature: float = 0.5
    align_sigma: float = 1.0
    history_size: int = 2

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.align_sigma <= 0.0:
            raise ConfigError(f"alignment sigma must be positive, got {self.align_sigma}")
        if min(self.mi_weight, self.align_weight, self.contrast_weight) < 0.0:
            raise ConfigError("loss weights must be non-negative")
        if self.history_size < 1:
            raise ConfigError(f"history size must be >= 1, got {self.history_size}")


@dataclass
class BatchForward:
    """Everything the objective needs about one forward pass of a minibatch."""

    predictions: Tensor                      # (b,)
    targets: np.ndarray                      # (b,) standardized
    modality_features: list[Tensor] = field(default_factory=list)   # M x (b,d)
    fused: Tensor | None = None              # (b,d)
    neg_targets: np.ndarray | None = None    # (b,) permuted targets
    prev_fused: np.ndarray | None = None     # (b,d) from the previous global model
    history: Sequence[np.ndarray] = ()       # older global representations, (b,d) each


def mse_loss(predictions: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared prediction error over the batch."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        raise DomainError("empty batch")
    if predictions.shape != targets.shape:
        raise ContractError(f"predictions {predictions.shape} vs targets {targets.shape}")
    diff = ad.sub(Tensor(targets), predictions)
    return (diff * diff).mean()


def mi_lower_bound_loss(predictions: Tensor, targets: np.ndarray,
                        neg_targets: np.ndarray) -> Tensor:
    """Negated discriminator bound on the prediction/target dependence.

    Scores prediction*target products with a logistic discriminator: positive
    pairs should score high, pairs with mismatched (permuted) targets low.
    Probabilities entering the logs are floored at 1e-12, so the loss is
    bounded and its gradient saturates instead of exploding.
    """
    targets = np.asarray(targets, dtype=np.float64)
    neg_targets = np.asarray(neg_targets, dtype=np.float64)
    if targets.size == 0:
        raise DomainError("empty batch")
    if predictions.shape != targets.shape or targets.shape != neg_targets.shape:
        raise ContractError("predictions, targets and negative targets must share a shape")
    pos = predictions * Tensor(targets)
    neg = predictions * Tensor(neg_targets)
    # 1 - sigmoid(u) == sigmoid(-u), computed stably
    log_pos = ad.log(ad.clamp_min(ad.sigmoid(pos), _LOG_FLOOR))
    log_neg = ad.log(ad.clamp_min(ad.sigmoid(-neg), _LOG_FLOOR))
    return -(log_pos + log_neg).mean()


def symkl_alignment_loss(modality_features: Sequence[Tensor], sigma: float) -> Tensor:
    """Average squared distance between modality features, over all pairs.

    Under a shared-variance Gaussian view of the per-modality features this
    is their symmetric KL divergence: ||mu_m - mu_n||^2 / (2 sigma^2),
    averaged over the batch and the M-choose-2 unordered modality pairs.
    """
    m = len(modality_features)
    if m < 2:
        raise DomainError("alignment needs at least two modalities; disable the term instead")
    if sigma <= 0.0:
        raise ConfigError(f"alignment sigma must be positive, got {sigma}")
    batch = modality_features[0].shape[0]
    pairs = m * (m - 1) // 2
    total = None
    for a in range(m):
        for b in range(a + 1, m):
            diff = modality_features[a] - modality_features[b]
            contrib = (diff * diff).sum()
            total = contrib if total is None else total + contrib
    scale = 1.0 / (2.0 * batch * sigma * sigma * pairs)
    return total * scale


def _cosine_rows(fused: Tensor, other: np.ndarray) -> Tensor:
    """Row-wise cosine similarity of a live tensor against constant anchors."""
    other = np.asarray(other, dtype=np.float64)
    dots = (fused * Tensor(other)).sum(axis=1)
    norms = ad.clamp_min(ad.sqrt((fused * fused).sum(axis=1)), _NORM_FLOOR)
    anchor_norms = np.maximum(np.linalg.norm(other, axis=1), _NORM_FLOOR)
    return dots / (norms * Tensor(anchor_norms))


def infonce_loss(fused: Tensor, prev_fused: np.ndarray,
                 history: Sequence[np.ndarray], temperature: float) -> Tensor:
    """Contrastive consistency against the stored global representations.

    The previous round's representation of the same inputs is the positive;
    older rounds' representations are negatives. With no negatives the
    softmax has a single term and the loss is exactly zero.
    """
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if prev_fused is None:
        raise ContractError("InfoNCE needs the previous global representation")
    history = list(history)
    if not history:
        return Tensor(0.0)
    sims = [_cosine_rows(fused, prev_fused)] + [_cosine_rows(fused, h) for h in history]
    logits = ad.concat([s.reshape((s.shape[0], 1)) for s in sims], axis=1) * (1.0 / temperature)
    lse = ad.logsumexp_rows(logits)
    pos = sims[0] * (1.0 / temperature)
    return (lse - pos).mean()


def draw_negative_targets(targets: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Within-batch target permutation with no fixed points (batch >= 2).

    A batch of one has only the identity permutation; it is returned as-is.
    """
    targets = np.asarray(targets, dtype=np.float64)
    n = targets.size
    if n < 2:
        return targets.copy()
    perm = rng.permutation(n)
    while np.any(perm == np.arange(n)):
        perm = rng.permutation(n)
    return targets[perm]


def total_loss(fwd: BatchForward, weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective plus a per-term breakdown for logging.

    Regularizers whose weight is zero are skipped outright. The contrastive
    term also contributes zero before any global representation history
    exists (round zero).
    """
    pred = mse_loss(fwd.predictions, fwd.targets)
    total = pred
    breakdown = {"pred": pred.item(), "mi": 0.0, "kl": 0.0, "fcl": 0.0}

    if weights.mi_weight > 0.0:
        if fwd.neg_targets is None:
            raise ContractError("mi term enabled but no negative targets supplied")
        mi = mi_lower_bound_loss(fwd.predictions, fwd.targets, fwd.neg_targets)
        breakdown["mi"] = mi.item()
        total = total + mi * weights.mi_weight

    if weights.align_weight > 0.0:
        kl = symkl_alignment_loss(fwd.modality_features, weights.align_sigma)
        breakdown["kl"] = kl.item()
        total = total + kl * weights.align_weight

    if weights.contrast_weight > 0.0 and fwd.prev_fused is not None:
        fcl = infonce_loss(fwd.fused, fwd.prev_fused, fwd.history, weights.temperature)
        breakdown["fcl"] = fcl.item()
        total = total + fcl * weights.contrast_weight

    breakdown["total"] = total.item()
    return total, breakdown
