"""Evaluation: k-NN probing, predicted-vs-measured loss agreement, heatmaps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import kendalltau, spearmanr

from . import objectives as obj
from .data import Geometry, write_pgm
from .masking import MaskSchedule, generate_batch_masks
from .model import HpmModel, MaskIndex, student_forward, teacher_forward
from .tensor import no_grad

K_VALUES = (1, 5, 10, 20)


# ---------------------------------------------------------------------------
# k-NN


def encoder_features(model: HpmModel, patches: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Globally averaged encoder output for full, unmasked images."""
    out = []
    with no_grad():
        for start in range(0, len(patches), batch_size):
            f = model.encode(patches[start:start + batch_size]).data
            out.append(f.mean(axis=1))
    return np.concatenate(out).astype(np.float64)


def knn_predict(train_feats: np.ndarray, train_labels: np.ndarray, test_feats: np.ndarray, k: int) -> np.ndarray:
    """Cosine k-NN majority vote; ties go to the tied class with the nearest neighbor."""
    train_labels = np.asarray(train_labels)
    if k < 1 or k > len(train_feats):
        raise ValueError(f"k={k} must lie in [1, {len(train_feats)}] (train size)")
    a = train_feats / np.maximum(np.linalg.norm(train_feats, axis=1, keepdims=True), 1e-12)
    b = test_feats / np.maximum(np.linalg.norm(test_feats, axis=1, keepdims=True), 1e-12)
    sim = b @ a.T
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    preds = np.empty(len(test_feats), dtype=train_labels.dtype)
    for i, nbrs in enumerate(order):
        votes = train_labels[nbrs]
        classes, counts = np.unique(votes, return_counts=True)
        tied = set(classes[counts == counts.max()].tolist())
        # neighbors are sorted nearest first
        preds[i] = next(lbl for lbl in votes if lbl in tied)
    return preds


def knn_probe(model: HpmModel, train_patches: np.ndarray, train_labels: np.ndarray,
              test_patches: np.ndarray, test_labels: np.ndarray, k: int) -> float:
    if k > len(train_patches):
        raise ValueError(f"k={k} exceeds train size {len(train_patches)}")
    tr = encoder_features(model, train_patches)
    te = encoder_features(model, test_patches)
    return float(np.mean(knn_predict(tr, train_labels, te, k) == np.asarray(test_labels)))


# ---------------------------------------------------------------------------
# predicted vs measured loss


def measured_patch_losses(model: HpmModel, patches: np.ndarray, n_masks: int, gamma: float,
                          rng: np.random.Generator, target: str = "pixel",
                          teacher: HpmModel | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Average per-patch reconstruction loss over ``n_masks`` random masks.

    Returns (mean loss, times masked), both (B, N); patches never masked get NaN.
    """
    B, N = patches.shape[:2]
    total = np.zeros((B, N))
    hits = np.zeros((B, N), dtype=np.int64)
    schedule = MaskSchedule(gamma=gamma, alpha_0=0.0, alpha_T=0.0)
    if target == "ema":
        tgt = obj.ema_feature_target(teacher_forward(teacher or model, patches).features)
    else:
        tgt = obj.pixel_target(patches)
    rows = np.arange(B)[:, None]
    with no_grad():
        for _ in range(n_masks):
            visible = generate_batch_masks(np.zeros((B, N)), schedule, 0, rng, alpha=0.0)
            idx = MaskIndex.from_visible(visible)
            out = student_forward(model, patches, visible)
            _, per_patch = obj.recon_loss(out.reconstruction, tgt, idx.ids_masked)
            np.add.at(total, (np.broadcast_to(rows, idx.ids_masked.shape), idx.ids_masked), per_patch)
            np.add.at(hits, (np.broadcast_to(rows, idx.ids_masked.shape), idx.ids_masked), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(hits > 0, total / np.maximum(hits, 1), np.nan)
    return mean, hits


def rank_agreement(predicted: np.ndarray, measured: np.ndarray) -> tuple[float, float, int]:
    """Mean per-image Spearman rho and Kendall tau (tie-aware) over patches with a measurement.

    Returns (rho, tau, number of excluded patches).
    """
    predicted = np.atleast_2d(predicted)
    measured = np.atleast_2d(measured)
    rhos, taus = [], []
    excluded = 0
    for p, m in zip(predicted, measured):
        keep = np.isfinite(m)
        excluded += int((~keep).sum())
        if keep.sum() < 2:
            continue
        rho = spearmanr(p[keep], m[keep]).statistic
        tau = kendalltau(p[keep], m[keep]).statistic
        if np.isfinite(rho):
            rhos.append(rho)
        if np.isfinite(tau):
            taus.append(tau)
    rho = float(np.mean(rhos)) if rhos else float("nan")
    tau = float(np.mean(taus)) if taus else float("nan")
    return rho, tau, excluded


def loss_correlation(student: HpmModel, teacher: HpmModel, patches: np.ndarray, n_masks: int = 10,
                     gamma: float = 0.75, rng: np.random.Generator | int = 0,
                     target: str = "pixel") -> tuple[float, float, int]:
    """Rank agreement of teacher-predicted losses with the student's measured losses."""
    if n_masks < 1:
        raise ValueError("n_masks must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(int(rng)))
    measured, _ = measured_patch_losses(student, patches, n_masks, gamma, rng, target, teacher)
    predicted = teacher_forward(teacher, patches).pred_loss.data
    return rank_agreement(predicted, measured)


def textured_gap(predicted: np.ndarray, textured: list[np.ndarray]) -> np.ndarray:
    """Per image: mean predicted loss on textured patches minus mean on flat ones."""
    gaps = np.empty(len(predicted))
    for i, (p, tex) in enumerate(zip(predicted, textured)):
        is_tex = np.zeros(p.shape[0], dtype=bool)
        is_tex[tex] = True
        gaps[i] = p[is_tex].mean() - p[~is_tex].mean()
    return gaps


def precision_at_k(predicted: np.ndarray, textured: list[np.ndarray], k: int | None = None) -> float:
    """Mean fraction of the top-k predicted patches that are textured (k defaults to |textured|)."""
    vals = []
    for p, tex in zip(predicted, textured):
        kk = len(tex) if k is None else k
        top = np.argsort(-p, kind="stable")[:kk]
        vals.append(np.isin(top, tex).mean())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# report


@dataclass
class ProbeReport:
    knn: dict[int, float] = field(default_factory=dict)
    spearman: float = float("nan")
    kendall: float = float("nan")
    excluded_patches: int = 0
    textured_gap: float = float("nan")
    textured_gap_positive: float = float("nan")
    precision_at_k: float = float("nan")

    def rows(self) -> list[tuple[str, float]]:
        out = [(f"knn_acc_k{k}", v) for k, v in sorted(self.knn.items())]
        out += [
            ("spearman", self.spearman),
            ("kendall", self.kendall),
            ("excluded_patches", self.excluded_patches),
            ("textured_gap", self.textured_gap),
            ("textured_gap_positive_frac", self.textured_gap_positive),
            ("precision_at_k", self.precision_at_k),
        ]
        return out

    def to_csv(self) -> str:
        return "metric,value\n" + "".join(f"{k},{v}\n" for k, v in self.rows())

    def pretty(self) -> str:
        width = max(len(k) for k, _ in self.rows())
        return "\n".join(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                         for k, v in self.rows())


def probe_report(student: HpmModel, teacher: HpmModel, train_patches: np.ndarray, train_labels: np.ndarray,
                 test_patches: np.ndarray, test_labels: np.ndarray, test_textured: list[np.ndarray],
                 k_values=K_VALUES, n_masks: int = 10, gamma: float = 0.75, seed: int = 0,
                 target: str = "pixel", encoder: HpmModel | None = None) -> ProbeReport:
    enc = encoder or student
    tr = encoder_features(enc, train_patches)
    te = encoder_features(enc, test_patches)
    report = ProbeReport()
    for k in k_values:
        if k <= len(tr):
            report.knn[k] = float(np.mean(knn_predict(tr, train_labels, te, k) == test_labels))
    rho, tau, excluded = loss_correlation(student, teacher, test_patches, n_masks, gamma, seed, target)
    report.spearman, report.kendall, report.excluded_patches = rho, tau, excluded
    predicted = teacher_forward(teacher, test_patches).pred_loss.data
    gaps = textured_gap(predicted, test_textured)
    report.textured_gap = float(gaps.mean())
    report.textured_gap_positive = float(np.mean(gaps > 0))
    report.precision_at_k = precision_at_k(predicted, test_textured)
    return report


# ---------------------------------------------------------------------------
# heatmaps


def heatmap_pixels(values: np.ndarray, geometry: Geometry) -> np.ndarray:
    """Per-patch values -> 8-bit image, min-max scaled and upsampled P x P."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape[0] != geometry.num_patches:
        raise ValueError(f"{values.shape[0]} values do not match N={geometry.num_patches}")
    lo, hi = values.min(), values.max()
    if not math.isfinite(lo) or not math.isfinite(hi):
        raise ValueError("heatmap values must be finite")
    if hi == lo:
        scaled = np.full(values.shape, 128, dtype=np.uint8)
    else:
        scaled = np.rint((values - lo) / (hi - lo) * 255).astype(np.uint8)
    gh, gw = geometry.grid
    P = geometry.patch
    return np.kron(scaled.reshape(gh, gw), np.ones((P, P), dtype=np.uint8))


def export_heatmap(values: np.ndarray, geometry: Geometry, path, image: np.ndarray | None = None) -> list[Path]:
    """Write the heatmap PGM; with ``image`` also write ``<stem>_pair.pgm`` (input | heatmap)."""
    path = Path(path)
    heat = heatmap_pixels(values, geometry)
    write_pgm(path, heat)
    written = [path]
    if image is not None:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 3:
            img = img.mean(axis=2)
        left = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
        pair = path.with_name(path.stem + "_pair.pgm")
        write_pgm(pair, np.concatenate([left, heat], axis=1))
        written.append(pair)
    return written
