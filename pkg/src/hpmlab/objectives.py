"""Reconstruction loss, loss-prediction objectives and reconstruction targets."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PIXEL = "raw-pixel-normalized"
EMA_FEATURE = "ema-feature"


@dataclass
class ReconTarget:
    kind: str
    values: np.ndarray  # (B, N, target_dim)


@dataclass
class PairIndicators:
    positive: np.ndarray  # (B, K, K) bool, loss[i] > loss[j]
    negative: np.ndarray  # (B, K, K) bool, loss[i] < loss[j]

    @property
    def valid(self) -> np.ndarray:
        return self.positive.sum(axis=(-2, -1)) + self.negative.sum(axis=(-2, -1))


def pixel_target(patches: np.ndarray, eps: float = 1e-6) -> ReconTarget:
    """Per-patch normalized pixels: (x - mean) / (std + eps)."""
    x = np.asarray(patches)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return ReconTarget(PIXEL, (x - mu) / (sd + eps))


def ema_feature_target(teacher_features, eps: float = 1e-12) -> ReconTarget:
    f = teacher_features.data if isinstance(teacher_features, Tensor) else np.asarray(teacher_features)
    norm = np.sqrt((f * f).sum(axis=-1, keepdims=True))
    return ReconTarget(EMA_FEATURE, f / np.maximum(norm, eps))


def _as_index(mask_or_ids: np.ndarray) -> np.ndarray:
    """Accept a (B, N) visibility mask or a (B, K) array of masked indices."""
    a = np.asarray(mask_or_ids)
    if a.dtype == bool:
        if a.ndim == 1:
            a = a[None]
        counts = (~a).sum(axis=1)
        if np.any(counts != counts[0]):
            raise ValueError("every mask in a batch must hide the same number of patches")
        ids = np.argsort(a, axis=1, kind="stable")[:, : counts[0]]
        return ids
    if a.ndim == 1:
        a = a[None]
    return a.astype(np.int64)


def recon_loss(prediction: Tensor, target: ReconTarget, mask) -> tuple[Tensor, np.ndarray]:
    """Mean squared error on masked patches.

    Returns the scalar loss (mean over masked patches) and the detached
    per-patch losses of shape (B, K), ordered like the masked indices.
    """
    ids = _as_index(mask)
    if ids.shape[1] == 0:
        raise ValueError("reconstruction loss needs at least one masked patch")
    pred = T.gather(prediction, ids)
    rows = np.arange(ids.shape[0])[:, None]
    tgt = target.values[rows, ids].astype(pred.dtype, copy=False)
    if target.kind == EMA_FEATURE:
        pred = T.l2_normalize(pred, axis=-1)
    per_patch = T.square(pred - tgt).mean(axis=-1)
    return per_patch.mean(), per_patch.data.copy()


def pred_loss_absolute(pred_loss: Tensor, rec_per_patch: np.ndarray, mask) -> Tensor:
    """Mean over masked patches of (predicted - measured)^2."""
    ids = _as_index(mask)
    if ids.shape[1] == 0:
        raise ValueError("loss prediction needs at least one masked patch")
    pred = T.gather(pred_loss.reshape(pred_loss.shape[0], pred_loss.shape[1], 1), ids)
    target = np.asarray(rec_per_patch, dtype=pred.dtype).reshape(pred.shape)
    return T.square(pred - target).mean()


def pair_indicators(rec_per_patch: np.ndarray) -> PairIndicators:
    l = np.asarray(rec_per_patch)
    if l.ndim == 1:
        l = l[None]
    return PairIndicators(l[:, :, None] > l[:, None, :], l[:, :, None] < l[:, None, :])


def pred_loss_relative(pred_loss: Tensor, rec_per_patch: np.ndarray, mask) -> Tensor:
    """Pairwise ranking objective over masked patches.

    For each ordered pair (i, j) of masked patches with loss[i] > loss[j] the
    term is -log sigmoid(p_i - p_j); for loss[i] < loss[j] it is
    -log(1 - sigmoid(p_i - p_j)). Each image is normalized by its number of
    ordered pairs with distinct losses, and images are averaged.
    """
    ids = _as_index(mask)
    if ids.shape[1] < 2:
        raise ValueError("relative loss prediction needs at least two masked patches")
    B, K = ids.shape
    ind = pair_indicators(np.asarray(rec_per_patch).reshape(B, K))
    valid = ind.valid
    if np.any(valid == 0):
        warnings.warn("all masked reconstruction losses tied in an image; its ranking term is 0", RuntimeWarning)
    pred = T.gather(pred_loss.reshape(B, pred_loss.shape[1], 1), ids).reshape(B, K)
    diff = T.pairwise_diff(pred)
    dtype = diff.dtype.type
    scale = np.where(valid > 0, 1.0 / np.maximum(valid, 1), 0.0)[:, None, None] / B
    w_pos = (ind.positive * scale).astype(dtype)
    w_neg = (ind.negative * scale).astype(dtype)
    # -log sigmoid(d) = softplus(-d); -log(1 - sigmoid(d)) = softplus(d)
    terms = T.softplus(-diff) * w_pos + T.softplus(diff) * w_neg
    return terms.sum()


def combined_loss(rec: Tensor, pred: Tensor | float) -> Tensor:
    return rec + pred
