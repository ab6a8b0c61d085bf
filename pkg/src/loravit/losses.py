"""Training objective: binary cross-entropy plus a weighted
single-center term.

The center term pulls real-sample features toward the mean of the
batch's real features and pushes fake features at least ``margin``
further away: with per-class mean distances d_real and d_fake to the
real center C, the term is d_real + max(d_real - d_fake + margin, 0).
C is recomputed per batch and detached, so no gradient flows through
the center itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, EmptyClassError

PRED_EPS = 1e-7  # predictions are clamped to [eps, 1-eps] before logs


class CenterPolicy(Enum):
    BATCH_MEAN = "batch_mean"


class EmptyClassPolicy(Enum):
    SKIP_SCL = "skip_scl"


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    margin: float = 3.0
    center_policy: CenterPolicy = CenterPolicy.BATCH_MEAN
    empty_class_policy: EmptyClassPolicy = EmptyClassPolicy.SKIP_SCL

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"loss weight lambda must be >= 0, got {self.lam}")
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")


@dataclass
class SclCounters:
    """Mutable tally of batches whose center term was skipped."""
    skipped: int = 0


class LabeledBatch:
    """Features, sigmoid predictions and binary labels for one batch.

    Label 1 marks a real sample, 0 a fake one. Predictions live in
    (0, 1); features are the penultimate-layer embeddings.
    """

    def __init__(self, features: Tensor, predictions: Tensor, labels):
        labels = np.asarray(labels)
        if labels.ndim != 1:
            raise ContractError("labels must be a 1-D array")
        if not np.isin(labels, (0, 1)).all():
            raise ContractError("labels must be binary (1 = real, 0 = fake)")
        if features.data.ndim != 2 or predictions.data.ndim != 1:
            raise ContractError(
                f"expected features (B, F) and predictions (B,), got "
                f"{tuple(features.shape)} and {tuple(predictions.shape)}"
            )
        if not (features.shape[0] == predictions.shape[0] == labels.shape[0]):
            raise ContractError("features, predictions and labels disagree on batch size")
        self.features = features
        self.predictions = predictions
        self.labels = labels.astype(np.int64)

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    @property
    def real_indices(self):
        return np.flatnonzero(self.labels == 1)

    @property
    def fake_indices(self):
        return np.flatnonzero(self.labels == 0)


def cross_entropy(batch: LabeledBatch) -> Tensor:
    """Mean binary cross-entropy over the batch."""
    if batch.size == 0:
        raise ContractError("cross_entropy on an empty batch")
    p = ag.clamp(batch.predictions, PRED_EPS, 1.0 - PRED_EPS)
    dtype = p.dtype
    c = Tensor(batch.labels.astype(dtype))
    one = Tensor(np.ones(batch.size, dtype=dtype))
    ll = ag.add(ag.mul(c, ag.log(p)),
                ag.mul(ag.sub(one, c), ag.log(ag.sub(one, p))))
    return ag.scale(ag.mean_all(ll), -1.0)


def real_center(batch: LabeledBatch) -> Tensor:
    """Mean feature vector of the real samples, detached from the tape."""
    idx = batch.real_indices
    if idx.size == 0:
        raise EmptyClassError("batch contains no real samples")
    return Tensor(batch.features.data[idx].mean(axis=0))


def _mean_center_distance(features: Tensor, indices, center: Tensor) -> Tensor:
    rows = ag.take_rows(features, indices)
    diff = ag.sub(rows, center)
    norms = ag.sqrt(ag.sum_last(ag.mul(diff, diff)))
    return ag.mean_all(norms)


def center_distances(batch: LabeledBatch, center: Tensor | None = None):
    """(d_real, d_fake): per-class mean Euclidean distances to the real
    center. Both classes must be present."""
    if batch.real_indices.size == 0 or batch.fake_indices.size == 0:
        raise EmptyClassError("center_distances needs both classes present")
    if center is None:
        center = real_center(batch)
    d_real = _mean_center_distance(batch.features, batch.real_indices, center)
    d_fake = _mean_center_distance(batch.features, batch.fake_indices, center)
    return d_real, d_fake


def scl(batch: LabeledBatch, cfg: LossConfig, counters: SclCounters | None = None,
        center: Tensor | None = None) -> Tensor:
    """Single-center term. Batches missing a class contribute zero under
    the skip policy and bump the counter so the event is never silent.

    ``center`` overrides the detached batch mean; gradient-checking
    oracles pass the unperturbed center so the finite-difference path
    differentiates the same stop-gradient function reverse mode does.
    """
    if batch.real_indices.size == 0 or batch.fake_indices.size == 0:
        if cfg.empty_class_policy is not EmptyClassPolicy.SKIP_SCL:
            raise EmptyClassError("batch is missing a class and the policy does not skip")
        if counters is not None:
            counters.skipped += 1
        return Tensor(np.asarray(0.0, dtype=batch.features.dtype))
    d_real, d_fake = center_distances(batch, center)
    hinge = ag.relu(ag.add(ag.sub(d_real, d_fake), float(cfg.margin)))
    return ag.add(d_real, hinge)


def combined_loss(batch: LabeledBatch, cfg: LossConfig,
                  counters: SclCounters | None = None,
                  center: Tensor | None = None) -> Tensor:
    """Cross-entropy plus lambda times the center term. A zero lambda
    skips the center term entirely so the result equals cross_entropy
    exactly."""
    ce = cross_entropy(batch)
    if cfg.lam == 0:
        return ce
    return ag.add(ce, ag.scale(scl(batch, cfg, counters, center), cfg.lam))
