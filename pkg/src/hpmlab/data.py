"""Images, patch sequences, the synthetic texture corpus and on-disk formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HPMC_MAGIC = b"HPMC"
HPMC_VERSION = 1
_HPMC_HEADER = struct.Struct("<4sIIIII")


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    height: int
    width: int
    patch: int
    channels: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        return (self.height * self.width) // (self.patch * self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    def validate(self) -> None:
        if min(self.height, self.width, self.patch, self.channels) < 1:
            raise ValueError(f"non-positive geometry {self}")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"image size H={self.height}, W={self.width} is not divisible by patch size P={self.patch}"
            )


@dataclass
class PatchBatch:
    values: np.ndarray  # (B, N, P*P*C)
    geometry: Geometry

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def num_patches(self) -> int:
        return self.values.shape[1]

    @property
    def patch_dim(self) -> int:
        return self.values.shape[2]


def patchify(images: np.ndarray, patch: int) -> PatchBatch:
    """(B, H, W, C) images -> row-major patch tokens, each flattened channel-last."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) images, got shape {images.shape}")
    B, H, W, C = images.shape
    geom = Geometry(H, W, patch, C)
    geom.validate()
    gh, gw = geom.grid
    x = images.reshape(B, gh, patch, gw, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return PatchBatch(np.ascontiguousarray(x.reshape(B, gh * gw, patch * patch * C)), geom)


def unpatchify(patches: PatchBatch) -> np.ndarray:
    g = patches.geometry
    g.validate()
    v = np.asarray(patches.values)
    if v.ndim != 3 or v.shape[1] != g.num_patches or v.shape[2] != g.patch_dim:
        raise ValueError(
            f"patch values of shape {v.shape} do not match geometry {g} "
            f"(expected N={g.num_patches}, D={g.patch_dim})"
        )
    gh, gw = g.grid
    P, C = g.patch, g.channels
    x = v.reshape(v.shape[0], gh, gw, P, P, C).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(v.shape[0], g.height, g.width, C))


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Flat images each carrying one rectangular block of high-frequency noise.

    The block is aligned to the patch grid and its position is the image
    label, one of four classes drawn uniformly. With ``layout`` = "half" the
    block fills the top, bottom, left or right half of the grid (labels 0-3).
    With ``layout`` = "quadrant" it spans ``block`` x ``block`` patches at a
    random offset inside one quadrant, and the quadrant is the label.

    The block repeats one P x P uniform-noise tile. With ``tiles`` > 0 the
    tile is picked from a bank of that many tiles shared by the whole corpus;
    with ``tiles`` = 0 every image draws a fresh tile. ``grade`` blends in
    independent per-patch noise with a weight rising from 0 to ``grade`` along
    the block in raster order, which makes some textured patches harder than
    others.

    Pixels are ``level + s * (texture - 0.5)`` inside the block and ``level``
    outside, with ``level`` ~ U(0.2, 0.8) and ``s`` ~ U(*contrast) per image.
    A positive affine change leaves the per-patch normalized target untouched,
    so ``contrast`` only varies the raw appearance.
    """

    count: int = 1000
    height: int = 32
    width: int = 32
    patch: int = 4
    layout: str = "half"
    block: int = 4
    tiles: int = 1
    grade: float = 1.0
    contrast: tuple[float, float] = (0.05, 0.4)
    seed: int = 0

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.height, self.width, self.patch, 1)


@dataclass
class Corpus:
    images: np.ndarray  # (B, H, W, 1) float32 in [0, 1]
    textured: list[np.ndarray] = field(default_factory=list)
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return Corpus(self.images[idx], [self.textured[i] for i in idx], labels)


def num_classes() -> int:
    return 4


def _block_rect(layout: str, label: int, block: int, gh: int, gw: int, rng) -> tuple[int, int, int, int]:
    """Patch rows [r0, r1) and columns [c0, c1) of the textured block."""
    qh, qw = gh // 2, gw // 2
    if layout == "half":
        return ((0, qh, 0, gw), (qh, gh, 0, gw), (0, gh, 0, qw), (0, gh, qw, gw))[label]
    r = (label // 2) * qh + int(rng.integers(0, qh - block + 1))
    c = (label % 2) * qw + int(rng.integers(0, qw - block + 1))
    return r, r + block, c, c + block


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> Corpus:
    geom = spec.geometry
    geom.validate()
    gh, gw = geom.grid
    if gh % 2 or gw % 2:
        raise ValueError(f"patch grid {gh}x{gw} must have even sides to form halves and quadrants")
    if spec.layout not in ("half", "quadrant"):
        raise ValueError(f"layout must be half or quadrant, got {spec.layout!r}")
    qh, qw = gh // 2, gw // 2
    if spec.layout == "quadrant" and (spec.block < 1 or spec.block > qh or spec.block > qw):
        raise ValueError(f"texture block of {spec.block} patches does not fit a {qh}x{qw} quadrant")
    if not 0.0 <= spec.grade <= 1.0:
        raise ValueError(f"grade must lie in [0, 1], got {spec.grade}")
    lo, hi = spec.contrast
    if not 0.0 < lo <= hi <= 0.4:
        raise ValueError(f"contrast range must satisfy 0 < lo <= hi <= 0.4, got {spec.contrast}")
    if spec.tiles < 0:
        raise ValueError(f"tiles must be >= 0, got {spec.tiles}")
    P = spec.patch
    bank_seed, image_seed = np.random.SeedSequence(spec.seed).spawn(2)
    bank = np.random.Generator(np.random.PCG64(bank_seed)).uniform(0.0, 1.0, (spec.tiles, 1, P, 1, P))
    rng = np.random.Generator(np.random.PCG64(image_seed))
    images = np.empty((spec.count, spec.height, spec.width, 1), dtype=np.float32)
    textured: list[np.ndarray] = []
    labels = np.empty(spec.count, dtype=np.int64)
    for i in range(spec.count):
        label = int(rng.integers(0, 4))
        r0, r1, c0, c1 = _block_rect(spec.layout, label, spec.block, gh, gw, rng)
        bh, bw = r1 - r0, c1 - c0
        weights = np.linspace(0.0, spec.grade, bh * bw).reshape(bh, 1, bw, 1)
        level = rng.uniform(0.2, 0.8)
        amp = rng.uniform(lo, hi)
        tile = bank[rng.integers(0, spec.tiles)] if spec.tiles else rng.uniform(0.0, 1.0, (1, P, 1, P))
        own = rng.uniform(0.0, 1.0, (bh, P, bw, P))
        block = level + amp * ((1.0 - weights) * tile + weights * own - 0.5)
        img = np.full((spec.height, spec.width), level, dtype=np.float32)
        img[r0 * P:r1 * P, c0 * P:c1 * P] = block.reshape(bh * P, bw * P)
        images[i, :, :, 0] = img
        rows, cols = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        textured.append((rows * gw + cols).reshape(-1))
        labels[i] = label
    return Corpus(images, textured, labels)


# ---------------------------------------------------------------------------
# file formats


def save_corpus(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype="<f4")
    if images.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) images, got shape {images.shape}")
    B, H, W, C = images.shape
    with open(path, "wb") as f:
        f.write(_HPMC_HEADER.pack(HPMC_MAGIC, HPMC_VERSION, B, H, W, C))
        f.write(images.tobytes())


def load_corpus(path) -> np.ndarray:
    """Read an HPMC file, or import a binary PGM/PPM as a single-image batch."""
    raw = Path(path).read_bytes()
    if raw[:2] in (b"P5", b"P6"):
        return read_pnm(path)[None].astype(np.float32) / _pnm_scale(raw)
    if len(raw) < _HPMC_HEADER.size:
        raise FormatError(f"{path}: file too short for an HPMC header")
    magic, version, B, H, W, C = _HPMC_HEADER.unpack_from(raw)
    if magic != HPMC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != HPMC_VERSION:
        raise FormatError(f"{path}: unsupported HPMC version {version}")
    expected = B * H * W * C * 4
    body = raw[_HPMC_HEADER.size:]
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} pixel bytes for {B}x{H}x{W}x{C}, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(B, H, W, C).astype(np.float32)


def save_labels(path, corpus: Corpus) -> None:
    with open(path, "w") as f:
        f.write("index,label,textured\n")
        for i, tex in enumerate(corpus.textured):
            label = -1 if corpus.labels is None else int(corpus.labels[i])
            f.write(f"{i},{label},{' '.join(str(int(t)) for t in tex)}\n")


def load_labels(path) -> tuple[np.ndarray, list[np.ndarray]]:
    labels, textured = [], []
    with open(path) as f:
        header = f.readline().strip()
        if header != "index,label,textured":
            raise FormatError(f"{path}: unexpected label header {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            _, label, tex = line.split(",")
            labels.append(int(label))
            textured.append(np.array([int(t) for t in tex.split()], dtype=np.int64))
    return np.array(labels, dtype=np.int64), textured


def _pnm_tokens(raw: bytes):
    # header tokens: magic, width, height, maxval; '#' comments allowed
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def _pnm_scale(raw: bytes) -> float:
    tokens, _ = _pnm_tokens(raw)
    return float(int(tokens[3]))


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6) -> (H, W, C) integer array."""
    raw = Path(path).read_bytes()
    tokens, offset = _pnm_tokens(raw)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    n = width * height * channels
    body = raw[offset:offset + n * dtype.itemsize]
    if len(body) != n * dtype.itemsize:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=dtype).reshape(height, width, channels).astype(np.int64)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[..., 0]
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.clip(pixels, 0, 255).astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# batching


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays for one shuffled epoch (the last batch may be short)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
