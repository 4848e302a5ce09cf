"""Tiny ViT encoder with two transformer decoders (reconstructor, loss predictor)."""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    grid: tuple[int, int] = (8, 8)
    patch_dim: int = 16
    target_dim: int | None = None  # defaults to patch_dim (pixel regression)
    enc_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def out_dim(self) -> int:
        return self.patch_dim if self.target_dim is None else self.target_dim

    def validate(self) -> None:
        for name, dim, heads in (("encoder", self.enc_dim, self.enc_heads),
                                 ("decoder", self.dec_dim, self.dec_heads)):
            if dim % heads:
                raise ValueError(f"{name} dim {dim} is not divisible by {heads} heads")
        if self.enc_depth < 1 or self.dec_depth < 0:
            raise ValueError("encoder depth must be >= 1 and decoder depth >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


# ---------------------------------------------------------------------------
# positional tables


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(grid, dim: int) -> np.ndarray:
    """Fixed 2-D sine-cosine table of shape (rows*cols, dim).

    ``grid`` is (rows, cols) or a square patch count N. Half of the channels
    encode the row coordinate, the other half the column coordinate.
    """
    if dim % 2:
        raise ValueError(f"positional embedding dim must be even, got {dim}")
    if isinstance(grid, (int, np.integer)):
        side = int(round(np.sqrt(grid)))
        if side * side != grid:
            raise ValueError(f"N={grid} is not a square patch count; pass (rows, cols)")
        grid = (side, side)
    rows, cols = grid
    d_row = dim // 2 if (dim // 2) % 2 == 0 else dim // 2 + 1
    d_col = dim - d_row
    rr, cc = np.meshgrid(np.arange(rows, dtype=np.float64), np.arange(cols, dtype=np.float64), indexing="ij")
    parts = [_sincos_1d(d_row, rr)]
    if d_col:
        parts.append(_sincos_1d(d_col, cc))
    return np.concatenate(parts, axis=1)


# ---------------------------------------------------------------------------
# parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


class HpmModel:
    """Parameter set for encoder + reconstructor + loss predictor."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        c = config
        self._linear("encoder.patch_embed", c.patch_dim, c.enc_dim, rng)
        for i in range(c.enc_depth):
            self._block(f"encoder.blocks.{i}", c.enc_dim, c.mlp_ratio, rng)
        self._norm("encoder.norm", c.enc_dim)
        for head, out in (("reconstructor", c.out_dim), ("predictor", 1)):
            self._linear(f"{head}.embed", c.enc_dim, c.dec_dim, rng)
            self._param(f"{head}.mask_token", _trunc_normal(rng, (c.dec_dim,)))
            for i in range(c.dec_depth):
                self._block(f"{head}.blocks.{i}", c.dec_dim, c.mlp_ratio, rng)
            self._norm(f"{head}.norm", c.dec_dim)
            self._linear(f"{head}.head", c.dec_dim, out, rng)
        self.enc_pos = sincos_pos_embed(c.grid, c.enc_dim)
        self.dec_pos = sincos_pos_embed(c.grid, c.dec_dim)

    # -- construction helpers --------------------------------------------
    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def _linear(self, name: str, fan_in: int, fan_out: int, rng) -> None:
        # small-std init leaves the decoders stuck on the position-blind mean at desk scale
        self._param(f"{name}.weight", _xavier_uniform(rng, fan_in, fan_out))
        self._param(f"{name}.bias", np.zeros(fan_out))

    def _norm(self, name: str, dim: int) -> None:
        self._param(f"{name}.weight", np.ones(dim))
        self._param(f"{name}.bias", np.zeros(dim))

    def _block(self, name: str, dim: int, mlp_ratio: int, rng) -> None:
        self._norm(f"{name}.norm1", dim)
        for proj in ("q", "k", "v", "out"):
            self._linear(f"{name}.attn.{proj}", dim, dim, rng)
        self._norm(f"{name}.norm2", dim)
        self._linear(f"{name}.mlp.fc1", dim, dim * mlp_ratio, rng)
        self._linear(f"{name}.mlp.fc2", dim * mlp_ratio, dim, rng)

    # -- parameter access -------------------------------------------------
    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            v = np.asarray(v)
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = v.astype(self.params[k].dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> "HpmModel":
        other = copy.copy(self)
        other.params = OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype)) for k, v in self.params.items()
        )
        return other

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # -- layers ------------------------------------------------------------
    def _lin(self, x: Tensor, name: str) -> Tensor:
        return T.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], eps=self.config.ln_eps)

    def _attention(self, x: Tensor, name: str, heads: int) -> Tensor:
        B, N, D = x.shape
        hd = D // heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(B, N, heads, hd).transpose(0, 2, 1, 3)

        q = split(self._lin(x, f"{name}.q"))
        k = split(self._lin(x, f"{name}.k"))
        v = split(self._lin(x, f"{name}.v"))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        y = T.matmul(T.softmax(scores, axis=-1), v)
        return self._lin(y.transpose(0, 2, 1, 3).reshape(B, N, D), f"{name}.out")

    def _block_forward(self, x: Tensor, name: str, heads: int) -> Tensor:
        x = x + self._attention(self._ln(x, f"{name}.norm1"), f"{name}.attn", heads)
        h = T.gelu(self._lin(self._ln(x, f"{name}.norm2"), f"{name}.mlp.fc1"))
        return x + self._lin(h, f"{name}.mlp.fc2")

    def encode(self, patches: np.ndarray, ids_keep: np.ndarray | None = None) -> Tensor:
        """Encoder features for all tokens, or only the tokens listed in ``ids_keep``."""
        c = self.config
        patches = np.asarray(patches, dtype=self.params["encoder.patch_embed.weight"].dtype)
        pos = self.enc_pos.astype(patches.dtype)
        if ids_keep is None:
            x = self._lin(Tensor(patches), "encoder.patch_embed") + pos
        else:
            rows = np.arange(patches.shape[0])[:, None]
            x = self._lin(Tensor(patches[rows, ids_keep]), "encoder.patch_embed") + pos[ids_keep]
        for i in range(c.enc_depth):
            x = self._block_forward(x, f"encoder.blocks.{i}", c.enc_heads)
        return self._ln(x, "encoder.norm")

    def decode(self, head: str, features: Tensor, ids_restore: np.ndarray | None = None) -> Tensor:
        """Run one decoder. With ``ids_restore``, mask tokens fill the missing positions."""
        c = self.config
        x = self._lin(features, f"{head}.embed")
        B = x.shape[0]
        N = c.num_patches
        if ids_restore is not None:
            n_masked = N - x.shape[1]
            tokens = T.broadcast_to(self.params[f"{head}.mask_token"], (B, n_masked, c.dec_dim))
            x = T.gather(T.concat([x, tokens], axis=1), ids_restore)
        x = x + self.dec_pos.astype(x.dtype)
        for i in range(c.dec_depth):
            x = self._block_forward(x, f"{head}.blocks.{i}", c.dec_heads)
        return self._lin(self._ln(x, f"{head}.norm"), f"{head}.head")


@dataclass
class ForwardOutput:
    reconstruction: Tensor  # (B, N, out_dim)
    pred_loss: Tensor  # (B, N)
    features: Tensor  # (B, N_visible, enc_dim) for the student, (B, N, enc_dim) for the teacher


@dataclass
class MaskIndex:
    """Index bookkeeping for a batch of masks with equal visible counts."""

    ids_keep: np.ndarray  # (B, N_visible) sorted visible positions
    ids_masked: np.ndarray  # (B, N_masked) sorted masked positions
    ids_restore: np.ndarray  # (B, N) inverse of concat(ids_keep, ids_masked)

    @classmethod
    def from_visible(cls, visible: np.ndarray) -> "MaskIndex":
        visible = np.asarray(visible, dtype=bool)
        if visible.ndim == 1:
            visible = visible[None]
        counts = visible.sum(axis=1)
        N = visible.shape[1]
        if np.any(counts != counts[0]):
            raise ValueError("every mask in a batch must have the same number of visible patches")
        if counts[0] == 0 or counts[0] == N:
            raise ValueError(
                f"mask must leave at least one visible and one masked patch (visible={counts[0]}, N={N})"
            )
        order = np.argsort(~visible, axis=1, kind="stable")
        nv = int(counts[0])
        return cls(order[:, :nv], order[:, nv:], np.argsort(order, axis=1, kind="stable"))


def student_forward(model: HpmModel, patches: np.ndarray, visible: np.ndarray) -> ForwardOutput:
    """MAE-style forward: only visible patches reach the encoder."""
    patches = np.asarray(patches)
    if np.asarray(visible).shape[-1] != patches.shape[1]:
        raise ValueError(f"mask has {np.asarray(visible).shape[-1]} entries, expected N={patches.shape[1]}")
    idx = MaskIndex.from_visible(visible)
    feats = model.encode(patches, idx.ids_keep)
    rec = model.decode("reconstructor", feats, idx.ids_restore)
    pred = model.decode("predictor", feats, idx.ids_restore)
    return ForwardOutput(rec, pred.reshape(pred.shape[0], pred.shape[1]), feats)


def teacher_forward(model: HpmModel, patches: np.ndarray) -> ForwardOutput:
    """Full-sequence inference; never records a graph."""
    with T.no_grad():
        feats = model.encode(patches)
        rec = model.decode("reconstructor", feats)
        pred = model.decode("predictor", feats)
    return ForwardOutput(rec, pred.reshape(pred.shape[0], pred.shape[1]), feats)
