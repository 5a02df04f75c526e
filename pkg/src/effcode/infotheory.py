"""Nonparametric entropy and mutual-information estimation.

The core is the k-nearest-neighbour differential entropy estimator

    H = -psi(k) + psi(N) + log c_d + (d / N) * sum_i log eps_i

where ``eps_i`` is twice the Euclidean distance from example ``i`` to its
k-th neighbour and ``c_d`` is the volume of the unit-diameter d-ball.
Redundancy of a feature layer is measured by pushing every feature through
its own empirical CDF and estimating the entropy of the result: with
uniform marginals that entropy is minus the multi-information.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataio import check_data

DEFAULT_K = 5
JITTER_SCALE = 1e-10
_ASYMPTOTIC_FROM = 20.0


class DegenerateSampleError(ValueError):
    pass


def digamma(x):
    """Digamma function for positive arguments (scalar or array).

    Shifts the argument up with psi(x) = psi(x + 1) - 1/x and then uses the
    asymptotic expansion.
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise ValueError("digamma is only defined here for x > 0")
    x = arr.copy()
    acc = np.zeros_like(x)
    low = x < _ASYMPTOTIC_FROM
    while np.any(low):
        acc[low] -= 1.0 / x[low]
        x[low] += 1.0
        low = x < _ASYMPTOTIC_FROM
    inv2 = 1.0 / (x * x)
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 / 252))
    out = np.log(x) - 0.5 / x - series + acc
    return float(out) if out.ndim == 0 else out


def log_ball_volume(d):
    """log of the volume of a d-ball of unit diameter: pi^(d/2) / Gamma(1 + d/2) / 2^d."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return 0.5 * d * math.log(math.pi) - math.lgamma(1 + 0.5 * d) - d * math.log(2.0)


@dataclass(frozen=True)
class EntropyEstimate:
    value: float
    k: int
    n: int
    d: int
    jittered: bool = False

    def __float__(self):
        return self.value


# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(h):
    h = (h ^ (h >> np.uint64(30))) * _M1
    h = (h ^ (h >> np.uint64(27))) * _M2
    return h ^ (h >> np.uint64(31))


def _content_noise(x, seed):
    """Uniform [0, 1) noise that depends on each row's content, not its position.

    Identical rows are told apart by their occurrence count, so the multiset of
    jittered points (and hence the estimate) does not depend on row order.
    """
    with np.errstate(over="ignore"):
        h = np.full(x.shape[0], np.uint64(seed) * _GOLDEN + np.uint64(1), dtype=np.uint64)
        bits = np.ascontiguousarray(x).view(np.uint64)
        for j in range(x.shape[1]):
            h = _mix(h ^ bits[:, j])
        _, inverse = np.unique(h, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        grp = inverse[order]
        starts = np.r_[0, np.flatnonzero(np.diff(grp)) + 1]
        occurrence = np.empty(len(h), dtype=np.uint64)
        occurrence[order] = (np.arange(len(h)) - np.repeat(starts, np.diff(np.r_[starts, len(h)])))
        h = _mix(h + occurrence * _GOLDEN)
        cols = (np.arange(x.shape[1], dtype=np.uint64) + np.uint64(1)) * _GOLDEN
        u = _mix(h[:, None] ^ cols[None, :])
    return (u >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def jitter(x, seed=0, scale=JITTER_SCALE):
    """Add uniform noise of amplitude ``scale * range`` per feature."""
    span = x.max(axis=0) - x.min(axis=0)
    return x + scale * span * _content_noise(x, seed)


_default_workers = -1


def set_default_workers(n):
    """Cap the worker threads used by neighbour queries (``-1`` means all cores)."""
    global _default_workers
    if n is None or n == 0 or n < -1:
        raise ValueError("workers must be -1 or a positive count")
    _default_workers = int(n)


def kth_neighbor_distance(x, k, workers=None):
    """Euclidean distance from each row to its k-th nearest other row (exact, k-d tree)."""
    tree = cKDTree(x)
    if workers is None:
        workers = _default_workers
    dist, idx = tree.query(x, k=k + 1, workers=workers)
    # recompute from coordinates so the value is independent of tree internals
    diff = x - x[idx[:, k]]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff)), dist[:, k]


def knn_entropy(x, k=DEFAULT_K, seed=0, workers=None):
    """k-NN differential entropy estimate (nats) of the rows of ``x``.

    If some example has k exact duplicates its k-th neighbour distance is 0 and
    ``log eps`` is undefined; in that case a deterministic jitter of relative
    amplitude 1e-10 is added to every point before the tree is built.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    x = check_data(x, min_samples=1)
    n, d = x.shape
    if k < 1:
        raise ValueError("k must be >= 1")
    if n <= k:
        raise ValueError(f"need more than k={k} samples, got {n}")
    if np.all(x == x[0]):
        raise DegenerateSampleError("all sample points are identical")

    dist, _ = kth_neighbor_distance(x, k, workers)
    jittered = False
    if np.any(dist == 0):
        x = jitter(x, seed)
        dist, _ = kth_neighbor_distance(x, k, workers)
        jittered = True
        if np.any(dist == 0):
            raise DegenerateSampleError("duplicate points survive jitter")
    value = (-digamma(k) + digamma(n) + log_ball_volume(d)
             + d * np.mean(np.log(2.0 * dist)))
    return EntropyEstimate(float(value), k, n, d, jittered)


# ---------------------------------------------------------------------------
# Empirical CDF transform


@dataclass
class CdfTransform:
    """Per-feature sorted fitting samples plus the rank-based knots they imply."""

    sorted_values: np.ndarray  # (n, d), each column non-decreasing
    knots: list
    levels: list

    @property
    def n_samples(self):
        return self.sorted_values.shape[0]


def cdf_fit(u):
    u = check_data(u, min_samples=2, name="u")
    n = u.shape[0]
    srt = np.sort(u, axis=0)
    knots, levels = [], []
    for col in srt.T:
        vals, first, counts = np.unique(col, return_index=True, return_counts=True)
        # average of the 1-based ranks first+1 .. first+count
        mean_rank = first + 0.5 * (counts + 1)
        knots.append(vals)
        levels.append((mean_rank - 0.5) / n)
    return CdfTransform(srt, knots, levels)


def cdf_apply(t, u):
    """Map every feature through its fitted empirical CDF.

    In-sample values get ``(average rank - 0.5) / N``; other values are
    interpolated linearly between neighbouring sample values and clamped to
    the extreme levels.
    """
    u = check_data(u, min_samples=0, name="u")
    if u.shape[1] != len(t.knots):
        raise ValueError(f"expected {len(t.knots)} features, got {u.shape[1]}")
    out = np.empty_like(u)
    for j, (xs, ys) in enumerate(zip(t.knots, t.levels)):
        out[:, j] = np.interp(u[:, j], xs, ys)
    return out


class CdfTransformer(TransformerMixin, BaseEstimator):
    """Feature-wise empirical CDF as a scikit-learn transformer."""

    def fit(self, X, y=None):
        self.cdf_ = cdf_fit(X)
        self.n_features_in_ = self.cdf_.sorted_values.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        return cdf_apply(self.cdf_, X)


def subsample_features(u, n_features, seed=0):
    """Seeded random subset of at most ``n_features`` columns (kept in original order)."""
    if n_features is None or u.shape[1] <= n_features:
        return u
    rng = np.random.default_rng(seed)
    cols = np.sort(rng.choice(u.shape[1], size=n_features, replace=False))
    return u[:, cols]


def rank_transform(u, ties="random", seed=0):
    """Empirical CDF of every column evaluated on its own sample: ``(rank - 0.5) / N``.

    ``ties="average"`` gives tied values their mean rank (same as
    ``cdf_apply(cdf_fit(u), u)``). ``ties="random"`` breaks ties with a
    per-feature key derived from each row's content, so the outputs of every
    feature are exactly the uniform grid while the result still does not
    depend on row order.
    """
    u = check_data(u, min_samples=2, name="u")
    if ties == "average":
        return cdf_apply(cdf_fit(u), u)
    if ties != "random":
        raise ValueError(f"unknown tie rule {ties!r}")
    n = u.shape[0]
    keys = _content_noise(u, seed)
    z = np.empty_like(u)
    grid = (np.arange(1, n + 1) - 0.5) / n
    for j in range(u.shape[1]):
        order = np.lexsort((keys[:, j], u[:, j]))
        z[order, j] = grid
    return z


def multi_information(u, k=DEFAULT_K, n_features=None, seed=0, ties="random", workers=None):
    """Entropy of the CDF-transformed features, an estimate of minus the multi-information.

    Values closer to zero mean less redundancy among the features. Sparse
    codes contain many exact zeros; with ``ties="random"`` those point masses
    are spread uniformly over their CDF interval instead of collapsing onto a
    single value (see :func:`rank_transform`).
    """
    u = check_data(u, min_samples=2, name="u")
    u = subsample_features(u, n_features, seed)
    z = rank_transform(u, ties, seed)
    return knn_entropy(z, k, seed=seed, workers=workers)


def pairwise_mi(a, b, k=DEFAULT_K, seed=0, workers=None):
    """I(a; b) = H(a) + H(b) - H(a, b) from three k-NN entropy estimates, clamped at 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 1)
    if a.shape != b.shape:
        raise ValueError("a and b must have equal length")
    ha = knn_entropy(a, k, seed, workers).value
    hb = knn_entropy(b, k, seed, workers).value
    hab = knn_entropy(np.hstack([a, b]), k, seed, workers).value
    return max(0.0, (ha + hb) - hab)


@dataclass
class MiProfile:
    distances: np.ndarray
    mi: np.ndarray
    n_pairs: int

    def rows(self):
        return [(float(d), float(m), int(self.n_pairs)) for d, m in zip(self.distances, self.mi)]


def _offset_vectors(delta):
    r = int(math.ceil(delta + 0.5))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    dist = np.hypot(dy, dx)
    keep = (dist >= delta - 0.5) & (dist <= delta + 0.5) & (dist > 0)
    return np.stack([dy[keep], dx[keep]], axis=1)


def spatial_mi_profile(images, side, offsets, n_pairs=5000, k=DEFAULT_K, seed=0, workers=None):
    """Pixel-pair mutual information as a function of spatial distance.

    For each offset, ``n_pairs`` samples are drawn, each a random image and a
    random pair of locations whose distance lies within half a pixel of the
    offset; the two pixel values form one joint sample.
    """
    images = check_data(images, min_samples=1, name="images")
    if images.shape[1] != side * side:
        raise ValueError(f"images have {images.shape[1]} pixels, expected {side}x{side}")
    offsets = [float(o) for o in offsets]
    if any(o < 1 for o in offsets):
        raise ValueError("offsets must be >= 1")
    if any(o >= side for o in offsets):
        raise ValueError(f"offsets must be < image side {side}")
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise ValueError("offsets must be strictly increasing")

    grid = images.reshape(-1, side, side)
    ss = np.random.SeedSequence(seed)
    mi = []
    for delta, child in zip(offsets, ss.spawn(len(offsets))):
        rng = np.random.default_rng(child)
        vecs = _offset_vectors(delta)
        img = rng.integers(grid.shape[0], size=n_pairs)
        p = np.empty((n_pairs, 2), dtype=np.int64)
        q = np.empty((n_pairs, 2), dtype=np.int64)
        todo = np.arange(n_pairs)
        while todo.size:
            p[todo] = rng.integers(side, size=(todo.size, 2))
            q[todo] = p[todo] + vecs[rng.integers(len(vecs), size=todo.size)]
            ok = np.all((q[todo] >= 0) & (q[todo] < side), axis=1)
            todo = todo[~ok]
        a = grid[img, p[:, 0], p[:, 1]]
        b = grid[img, q[:, 0], q[:, 1]]
        mi.append(pairwise_mi(a, b, k, seed=int(child.generate_state(1)[0]), workers=workers))
    return MiProfile(np.asarray(offsets), np.asarray(mi), int(n_pairs))
