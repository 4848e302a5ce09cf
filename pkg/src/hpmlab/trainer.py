"""Hard-patches-mining pre-training loop."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import objectives as obj
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import Geometry, iterate_batches, patchify
from .ema import EmaState, ema_update, init_teacher
from .masking import alpha_at, generate_batch_masks
from .model import HpmModel, MaskIndex, student_forward, teacher_forward
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = "step,epoch,L_rec,L_pred,alpha_t,spearman"


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class StepMetrics:
    step: int
    epoch: int
    rec_loss: float
    pred_loss: float
    total_loss: float
    pred_t_mean: float
    pred_t_max: float
    alpha: float
    spearman: float

    def csv_row(self) -> str:
        return (f"{self.step},{self.epoch},{self.rec_loss!r},{self.pred_loss!r},"
                f"{self.alpha!r},{self.spearman!r}")


# ---------------------------------------------------------------------------
# optimizer and schedule


def adamw_step(params, grads, moments, lr: float, betas=(0.9, 0.95), weight_decay: float = 0.05,
               eps: float = 1e-8, step: int = 1, decay_mask=None) -> None:
    """In-place AdamW update with bias-corrected moments and decoupled decay.

    ``params``/``grads`` map names to arrays (or Tensors); ``moments`` is a
    pair of dicts (first, second) updated in place. ``step`` is the 1-based
    update count used for bias correction.
    """
    b1, b2 = betas
    m_all, v_all = moments
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        data = p.data if isinstance(p, Tensor) else p
        if g is None:
            g = np.zeros_like(data)
        dt = data.dtype.type
        m = m_all.setdefault(name, np.zeros_like(data))
        v = v_all.setdefault(name, np.zeros_like(data))
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        wd = weight_decay if decay_mask is None or decay_mask(name, data) else 0.0
        if wd:
            data *= dt(1.0 - lr * wd)
        data -= dt(lr) * ((m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps)))


def _decays(name: str, value: np.ndarray) -> bool:
    # biases, norm parameters and mask tokens are not decayed
    return value.ndim >= 2


class AdamW:
    def __init__(self, params: "OrderedDict[str, Tensor]", lr: float, betas=(0.9, 0.95),
                 weight_decay: float = 0.05, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m: "OrderedDict[str, np.ndarray]" = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())
        self.v: "OrderedDict[str, np.ndarray]" = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())

    def step(self, lr: float | None = None) -> None:
        self.step_count += 1
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(self.params, grads, (self.m, self.v), self.lr if lr is None else lr, self.betas,
                   self.weight_decay, self.eps, self.step_count, _decays)


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0, then half-cosine decay reaching 0 at the last step."""
    total = config.epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch
    base = config.lr
    if step < warm:
        return base * step / warm
    span = max(total - 1 - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# per-step statistics


def rowwise_spearman(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Spearman rho per row with average ranks; NaN where a row is constant."""
    ra = rankdata(a, axis=-1)
    rb = rankdata(b, axis=-1)
    ra = ra - ra.mean(axis=-1, keepdims=True)
    rb = rb - rb.mean(axis=-1, keepdims=True)
    den = np.sqrt((ra * ra).sum(-1) * (rb * rb).sum(-1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, (ra * rb).sum(-1) / np.where(den > 0, den, 1.0), np.nan)


# ---------------------------------------------------------------------------
# one step


def train_step(student: HpmModel, ema: EmaState, optimizer: AdamW, patches: np.ndarray,
               pixel_targets: np.ndarray | None, epoch: int, config: TrainConfig,
               mask_rng: np.random.Generator, lr: float, step: int = 0) -> StepMetrics:
    """Teacher inference, mask generation, student update, EMA sync."""
    schedule = config.schedule()
    # (1) teacher on the full, unmasked batch
    teacher_out = teacher_forward(ema.teacher, patches)
    pred_t = teacher_out.pred_loss.data
    # (2) masks; without learn-to-mask the same generator runs with alpha = 0
    alpha = alpha_at(schedule, epoch) if config.learn_to_mask else 0.0
    visible = generate_batch_masks(pred_t, schedule, epoch, mask_rng, alpha=alpha)
    idx = MaskIndex.from_visible(visible)
    # (3) student on visible patches
    out = student_forward(student, patches, visible)
    # (4) objectives
    if config.target == "ema":
        target = obj.ema_feature_target(teacher_out.features)
    else:
        target = obj.ReconTarget(obj.PIXEL, pixel_targets if pixel_targets is not None
                                 else obj.pixel_target(patches).values)
    rec, rec_per_patch = obj.recon_loss(out.reconstruction, target, idx.ids_masked)
    if config.pred_loss == "relative":
        pred = obj.pred_loss_relative(out.pred_loss, rec_per_patch, idx.ids_masked)
    elif config.pred_loss == "absolute":
        pred = obj.pred_loss_absolute(out.pred_loss, rec_per_patch, idx.ids_masked)
    else:
        pred = None
    total = obj.combined_loss(rec, pred) if pred is not None else rec
    if not np.isfinite(total.item()):
        raise NonFiniteLossError(
            f"non-finite loss at step {step} (epoch {epoch}): L_rec={rec.item()}, "
            f"L_pred={None if pred is None else pred.item()}, alpha={alpha}, "
            f"input range=[{patches.min()}, {patches.max()}], teacher pred finite={np.isfinite(pred_t).all()}"
        )
    # (5) backward, (6) optimizer, (7) EMA
    student.zero_grad()
    total.backward()
    optimizer.step(lr)
    ema_update(ema, student)

    rows = np.arange(patches.shape[0])[:, None]
    pred_s = out.pred_loss.data[rows, idx.ids_masked]
    rho = rowwise_spearman(pred_s, rec_per_patch)
    return StepMetrics(
        step=step, epoch=epoch, rec_loss=rec.item(), pred_loss=0.0 if pred is None else pred.item(),
        total_loss=total.item(), pred_t_mean=float(pred_t.mean()), pred_t_max=float(pred_t.max()),
        alpha=float(alpha), spearman=float(np.nanmean(rho)) if np.isfinite(rho).any() else 0.0,
    )


# ---------------------------------------------------------------------------
# full loop


def _rng_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(3)
    return {name: np.random.Generator(np.random.PCG64(s)) for name, s in zip(("init", "data", "mask"), children)}


class Trainer:
    """Owns student, teacher, optimizer and RNG streams for one run."""

    def __init__(self, config: TrainConfig, images: np.ndarray, patch: int = 4,
                 out_dir: str | Path | None = None):
        self.config = config
        batch = patchify(images, patch)
        self.geometry: Geometry = batch.geometry
        self.patches = batch.values.astype(np.float32)
        self.pixel_targets = obj.pixel_target(self.patches).values.astype(np.float32)
        self.rngs = _rng_streams(config.seed)
        self.student = HpmModel(config.model_config(self.geometry.grid, self.geometry.patch_dim), self.rngs["init"])
        self.ema = init_teacher(self.student, config.momentum)
        self.optimizer = AdamW(self.student.params, config.lr, (config.beta1, config.beta2), config.weight_decay)
        self.epoch = 0  # epochs completed
        self.step = 0
        self.history: list[StepMetrics] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def steps_per_epoch(self) -> int:
        return -(-len(self.patches) // self.config.batch_size)

    def run_epoch(self) -> list[StepMetrics]:
        cfg = self.config
        t = self.epoch
        metrics = []
        for ids in iterate_batches(len(self.patches), cfg.batch_size, self.rngs["data"]):
            lr = lr_at(self.step, cfg, self.steps_per_epoch)
            m = train_step(self.student, self.ema, self.optimizer, self.patches[ids],
                           self.pixel_targets[ids], t, cfg, self.rngs["mask"], lr, self.step)
            self.step += 1
            metrics.append(m)
        self.epoch += 1
        self.history.extend(metrics)
        self._write_metrics(metrics)
        mean_rec = float(np.mean([m.rec_loss for m in metrics]))
        log.info("epoch %d/%d  L_rec=%.4f  L_pred=%.4f  alpha=%.3f  rho=%.3f", self.epoch, cfg.epochs, mean_rec,
                 float(np.mean([m.pred_loss for m in metrics])), metrics[-1].alpha,
                 float(np.mean([m.spearman for m in metrics])))
        return metrics

    def fit(self, until_epoch: int | None = None, callback=None) -> list[float]:
        """Train up to ``until_epoch`` completed epochs; returns per-epoch mean L_rec."""
        until = self.config.epochs if until_epoch is None else until_epoch
        means = []
        while self.epoch < until:
            metrics = self.run_epoch()
            means.append(float(np.mean([m.rec_loss for m in metrics])))
            if self.out_dir is not None and (self.epoch % self.config.checkpoint_every == 0
                                             or self.epoch == self.config.epochs):
                save_checkpoint(self.out_dir / f"checkpoint_{self.epoch:04d}.hpmk", self.checkpoint())
                save_checkpoint(self.out_dir / "checkpoint_last.hpmk", self.checkpoint())
            if callback is not None:
                callback(self, metrics)
        return means

    def _write_metrics(self, metrics: list[StepMetrics]) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / "metrics.csv"
        new = not path.exists()
        with open(path, "a") as f:
            if new:
                f.write(METRICS_HEADER + "\n")
            for m in metrics:
                f.write(m.csv_row() + "\n")

    # -- persistence ------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        meta = {
            "epoch": self.epoch,
            "step": self.step,
            "adam_step": self.optimizer.step_count,
            "ema_updates": self.ema.updates,
            "patch": self.geometry.patch,
            "grid": list(self.geometry.grid),
            "rng": {k: g.bit_generator.state for k, g in self.rngs.items()},
        }
        return Checkpoint(
            config_text=self.config.to_text(),
            student=self.student.state_dict(),
            teacher=self.ema.teacher.state_dict(),
            adam_m=OrderedDict((k, v.copy()) for k, v in self.optimizer.m.items()),
            adam_v=OrderedDict((k, v.copy()) for k, v in self.optimizer.v.items()),
            meta=meta,
        )

    def restore(self, ckpt: Checkpoint) -> None:
        self.student.load_state_dict(ckpt.student)
        self.ema.teacher.load_state_dict(ckpt.teacher)
        self.ema.updates = int(ckpt.meta["ema_updates"])
        for k in self.optimizer.m:
            self.optimizer.m[k] = np.array(ckpt.adam_m[k], dtype=self.optimizer.m[k].dtype)
            self.optimizer.v[k] = np.array(ckpt.adam_v[k], dtype=self.optimizer.v[k].dtype)
        self.optimizer.step_count = int(ckpt.meta["adam_step"])
        self.epoch = int(ckpt.meta["epoch"])
        self.step = int(ckpt.meta["step"])
        for k, state in ckpt.meta["rng"].items():
            self.rngs[k].bit_generator.state = state

    @classmethod
    def resume(cls, path, images: np.ndarray, out_dir=None) -> "Trainer":
        ckpt = load_checkpoint(path)
        config = TrainConfig.from_text(ckpt.config_text)
        trainer = cls(config, images, patch=int(ckpt.meta.get("patch", 4)), out_dir=out_dir)
        trainer.restore(ckpt)
        return trainer


def model_from_checkpoint(ckpt: Checkpoint, which: str = "student") -> tuple[HpmModel, TrainConfig]:
    """Rebuild the student or teacher network from a checkpoint."""
    config = TrainConfig.from_text(ckpt.config_text)
    state = ckpt.student if which == "student" else ckpt.teacher
    patch_dim = state["encoder.patch_embed.weight"].shape[0]
    model = HpmModel(config.model_config(tuple(ckpt.meta["grid"]), patch_dim))
    model.load_state_dict(state)
    return model, config
