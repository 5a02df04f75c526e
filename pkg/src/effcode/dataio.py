"""Data ingestion and preprocessing.

Arrays follow the scikit-learn convention: one example per row,
``(n_samples, n_features)``.
"""
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
LUMA = np.array([0.299, 0.587, 0.114])


class IngestError(IOError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class LabeledData:
    data: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.labels) != self.data.shape[0]:
            raise ValueError(
                f"{len(self.labels)} labels for {self.data.shape[0]} examples"
            )

    def __iter__(self):
        # allows ``X, y = load_cifar10(...)``
        return iter((self.data, self.labels))


def check_data(x, min_samples=1, name="x"):
    """Validate a data matrix: 2-D float64, finite, at least ``min_samples`` rows."""
    return check_array(
        x, dtype=np.float64, ensure_all_finite=True,
        ensure_min_samples=min_samples, input_name=name,
    )


# ---------------------------------------------------------------------------
# CIFAR-10


def _cifar_files(path, split):
    path = Path(path)
    if path.is_file():
        return [path]
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    for base in (path, path / "cifar-10-batches-bin"):
        files = [base / n for n in names]
        if all(f.is_file() for f in files):
            return files
    raise IngestError(f"no CIFAR-10 {split} batches under {path} (expected {names[0]}, ...)")


def _read_records(fname, count):
    nbytes = count * CIFAR_RECORD
    with open(fname, "rb") as fh:
        raw = fh.read(nbytes)
    if len(raw) % CIFAR_RECORD:
        full = len(raw) // CIFAR_RECORD
        raise IngestError(
            f"{fname}: truncated record {full} at byte offset {full * CIFAR_RECORD} "
            f"(file has {len(raw)} bytes, records are {CIFAR_RECORD} bytes)"
        )
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    bad = np.flatnonzero(recs[:, 0] > 9)
    if bad.size:
        i = int(bad[0])
        raise FormatError(
            f"{fname}: label byte {int(recs[i, 0])} > 9 at byte offset {i * CIFAR_RECORD}"
        )
    return recs


def block_mean(images, side, new_side):
    """Downsample square images (n, side*side) by averaging non-overlapping blocks."""
    if side % new_side:
        raise ValueError(f"cannot pool {side}x{side} down to {new_side}x{new_side}")
    f = side // new_side
    n = images.shape[0]
    pooled = images.reshape(n, new_side, f, new_side, f).mean(axis=(2, 4))
    return pooled.reshape(n, new_side * new_side)


def load_cifar10(path, max_images=None, grayscale=False, downsample=None, split="train"):
    """Load CIFAR-10 binary batches.

    ``path`` is a single ``.bin`` file or a directory holding
    ``data_batch_{1..5}.bin`` / ``test_batch.bin``. Pixels are scaled to
    [0, 1]; rows are channel-major (R plane, G plane, B plane), or a single
    luma plane when ``grayscale`` is set.
    """
    if max_images is not None and max_images < 0:
        raise ValueError("max_images must be >= 0")
    remaining = np.inf if max_images is None else int(max_images)
    chunks = []
    for fname in _cifar_files(path, split):
        if remaining <= 0:
            break
        size = os.path.getsize(fname)
        avail = -(-size // CIFAR_RECORD)
        take = int(min(avail, remaining))
        recs = _read_records(fname, take)
        chunks.append(recs)
        remaining -= len(recs)
    if max_images is not None and remaining > 0:
        raise IngestError(f"requested {max_images} images but only {max_images - remaining} available")

    recs = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = recs[:, 0].astype(np.int64)
    pix = recs[:, 1:].astype(np.float64) / 255.0
    planes = pix.reshape(len(recs), 3, CIFAR_SIDE * CIFAR_SIDE)
    if grayscale:
        planes = np.einsum("c,ncp->np", LUMA, planes)[:, None, :]
    if downsample is not None:
        n, c, _ = planes.shape
        pooled = block_mean(planes.reshape(n * c, -1), CIFAR_SIDE, downsample)
        planes = pooled.reshape(n, c, downsample * downsample)
    n, c, p = planes.shape
    return LabeledData(planes.reshape(n, c * p), labels)


def write_cifar10_records(fname, labels, pixels):
    """Write records in CIFAR-10 binary layout (used for fixtures and exports)."""
    labels = np.asarray(labels, dtype=np.uint8)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    recs = np.concatenate([labels[:, None], pixels], axis=1)
    Path(fname).write_bytes(recs.tobytes())


# ---------------------------------------------------------------------------
# ZCA whitening


@dataclass
class WhitenTransform:
    mean: np.ndarray
    projection: np.ndarray
    eps: float


def whiten_fit(x, eps=1e-5):
    """Fit a ZCA whitening transform ``E diag(1/sqrt(l + eps)) E^T``."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = check_data(x, min_samples=2)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None) + eps
    with np.errstate(divide="ignore"):
        scale = np.where(evals > 0, 1.0 / np.sqrt(evals), 0.0)
    projection = (evecs * scale) @ evecs.T
    return WhitenTransform(mean, projection, float(eps))


def whiten_apply(t, x):
    x = check_data(x, min_samples=0)
    if x.shape[1] != t.mean.shape[0]:
        raise ValueError(f"expected {t.mean.shape[0]} features, got {x.shape[1]}")
    # projection is symmetric, so (P (x - mu))^T == (x - mu)^T P
    return (x - t.mean) @ t.projection


class ZCAWhitener(TransformerMixin, BaseEstimator):
    """ZCA (symmetric) whitening as a scikit-learn transformer."""

    def __init__(self, eps=1e-5):
        self.eps = eps

    def fit(self, X, y=None):
        t = whiten_fit(X, self.eps)
        self.mean_ = t.mean
        self.projection_ = t.projection
        self.n_features_in_ = t.mean.shape[0]
        return self

    @property
    def transform_(self):
        check_is_fitted(self)
        return WhitenTransform(self.mean_, self.projection_, self.eps)

    def transform(self, X):
        return whiten_apply(self.transform_, X)


# ---------------------------------------------------------------------------
# Natural image patches and synthetic block images


# Photographs of natural scenes shipped inside scikit-image (no download needed).
NATURAL_IMAGES = ("camera", "astronaut", "coffee", "chelsea", "rocket", "grass",
                  "gravel", "brick", "clock", "horse")


def natural_images():
    """Grayscale [0, 1] natural photographs bundled with scikit-image."""
    from skimage import color, data, util

    out = []
    for name in NATURAL_IMAGES:
        im = util.img_as_float64(getattr(data, name)())
        if im.ndim == 3:
            im = color.rgb2gray(im[..., :3])
        out.append(im)
    return out


def random_crops(images, side, n, seed=0):
    """Crop ``n`` square ``side``-pixel patches from random images at random offsets.

    ``images`` is a list of 2-D arrays or an ``(N, s*s)`` matrix of square images.
    """
    if isinstance(images, np.ndarray) and images.ndim == 2:
        s = int(round(np.sqrt(images.shape[1])))
        images = images.reshape(-1, s, s)
    if len(images) == 0:
        raise ValueError("no source images")
    rng = np.random.default_rng(seed)
    which = rng.integers(len(images), size=n)
    out = np.empty((n, side * side))
    for i, j in enumerate(which):
        im = images[j]
        h, w = im.shape
        if h < side or w < side:
            raise ValueError(f"source image {j} ({h}x{w}) smaller than {side}")
        r = rng.integers(h - side + 1)
        c = rng.integers(w - side + 1)
        out[i] = im[r:r + side, c:c + side].ravel()
    return out


def natural_patches(side, n, seed=0):
    """``n`` random ``side x side`` grayscale crops of natural photographs."""
    return random_crops(natural_images(), side, n, seed)


@dataclass
class BlockSynthConfig:
    source: np.ndarray
    grid: int = 3
    block_px: int = 8
    n_images: int = 1000
    seed: int = 0

    @property
    def side(self):
        return self.grid * self.block_px


def synth_blocks(cfg):
    """Tile ``grid x grid`` blocks, each copied from an independent random source patch.

    Each tile picks a source patch uniformly and, if the patch is larger than
    the block, a uniform valid offset inside it. Returns ``(n_images, side**2)``.
    """
    src = check_data(cfg.source, min_samples=1, name="source")
    ps = int(round(np.sqrt(src.shape[1])))
    if ps * ps != src.shape[1]:
        raise ValueError("source patches must be square")
    g, b = cfg.grid, cfg.block_px
    if ps < b:
        raise ValueError(f"source patch side {ps} < block_px {b}")
    patches = src.reshape(-1, ps, ps)
    rng = np.random.default_rng(cfg.seed)
    n_tiles = cfg.n_images * g * g
    which = rng.integers(len(patches), size=n_tiles)
    rows = rng.integers(ps - b + 1, size=n_tiles)
    cols = rng.integers(ps - b + 1, size=n_tiles)
    ii = rows[:, None, None] + np.arange(b)[None, :, None]
    jj = cols[:, None, None] + np.arange(b)[None, None, :]
    tiles = patches[which[:, None, None], ii, jj]  # (n_tiles, b, b)
    tiles = tiles.reshape(cfg.n_images, g, g, b, b).transpose(0, 1, 3, 2, 4)
    return tiles.reshape(cfg.n_images, (g * b) ** 2)


def block_index(grid, block_px):
    """Block id of every pixel of a ``grid*block_px`` square image, row-major."""
    side = grid * block_px
    r, c = np.divmod(np.arange(side * side), side)
    return (r // block_px) * grid + (c // block_px)
