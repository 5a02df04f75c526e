"""Global sparse coding: shrinkage operators, FISTA inference, dictionary learning.

Shapes: data ``X`` is ``(n_samples, d)``; a dictionary ``D`` is
``(n_atoms, d)`` with one atom per row; codes ``A`` are ``(n_samples, n_atoms)``
and reconstruct the data as ``A @ D``. Each example solves

    min_u  0.5 * ||x - D^T u||^2 + lam * Omega(u)

with ``Omega`` the l1 norm, or the sum of l2 norms over consecutive groups of
``group_size`` atoms.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataio import check_data

log = logging.getLogger(__name__)

ATOM_NORM_TOL = 1e-9


def shrink_l1(u, lam):
    """Soft thresholding ``sign(u) * max(|u| - lam, 0)``."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    u = np.asarray(u, dtype=np.float64)
    return np.sign(u) * np.maximum(np.abs(u) - lam, 0.0)


def _group_view(u, group_size):
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] % group_size:
        raise ValueError(f"length {u.shape[-1]} not divisible by group size {group_size}")
    return u.reshape(u.shape[:-1] + (u.shape[-1] // group_size, group_size))


def group_norms(u, group_size):
    g = _group_view(u, group_size)
    return np.sqrt(np.einsum("...i,...i->...", g, g))


def shrink_group(u, group_size, lam):
    """Block soft thresholding: every group is scaled by ``max(1 - lam/||u_g||, 0)``."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    g = _group_view(u, group_size)
    norms = np.sqrt(np.einsum("...i,...i->...", g, g))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norms > 0, np.maximum(1.0 - lam / norms, 0.0), 0.0)
    return (g * scale[..., None]).reshape(np.shape(u))


def shrink(u, lam, group_size=None):
    if group_size is None:
        return shrink_l1(u, lam)
    return shrink_group(u, group_size, lam)


def penalty(codes, group_size=None):
    """Per-example regulariser value (l1 or group l2,1)."""
    if group_size is None:
        return np.abs(codes).sum(axis=-1)
    return group_norms(codes, group_size).sum(axis=-1)


def check_dictionary(d):
    d = check_data(d, min_samples=1, name="dictionary")
    norms = np.linalg.norm(d, axis=1)
    if np.any(norms > 1 + ATOM_NORM_TOL):
        raise ValueError(f"atom norms must be <= 1 (max {norms.max():.6g})")
    return d


def lipschitz_estimate(d, tol=1e-6, max_iter=10000, safety=1.01, seed=0):
    """Largest eigenvalue of ``D D^T`` by power iteration, times ``safety``."""
    d = check_data(d, min_samples=1, name="dictionary")
    gram = d @ d.T if d.shape[0] <= d.shape[1] else d.T @ d
    v = np.random.default_rng(seed).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = gram @ v
        new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        if abs(new - lam) <= tol * abs(new):
            lam = new
            break
        lam = new
    return safety * lam


@dataclass
class CodingConfig:
    lam: float = 0.1
    max_iter: int = 300
    tol: float = 1e-5
    group_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.group_size is not None and self.group_size < 1:
            raise ValueError("group_size must be >= 1")


def objective(d, x, codes, lam, group_size=None):
    """Per-example lasso objective ``0.5 ||x - A D||^2 + lam * Omega(A)``."""
    r = codes @ d - x
    return 0.5 * np.einsum("ij,ij->i", r, r) + lam * penalty(codes, group_size)


def fista_encode(d, x, cfg, init=None, lipschitz=None):
    """Sparse codes of the rows of ``x`` by FISTA with function-value restart.

    Step size is ``1/L`` with ``L`` from :func:`lipschitz_estimate`. Whenever a
    momentum step would raise an example's objective, that example takes a
    plain proximal-gradient step from its previous iterate instead and its
    momentum is reset, so every per-example objective is non-increasing.
    Examples stop individually once the relative objective change is below
    ``cfg.tol``.
    """
    d = check_data(d, min_samples=1, name="dictionary")
    x = check_data(x, min_samples=0)
    if x.shape[1] != d.shape[1]:
        raise ValueError(f"data has {x.shape[1]} features, dictionary expects {d.shape[1]}")
    gs = cfg.group_size
    if gs is not None and d.shape[0] % gs:
        raise ValueError(f"{d.shape[0]} atoms not divisible by group size {gs}")
    n, m = x.shape[0], d.shape[0]
    codes = np.zeros((n, m)) if init is None else np.array(init, dtype=np.float64)
    if n == 0:
        return codes
    L = lipschitz_estimate(d) if lipschitz is None else lipschitz
    if L == 0:
        return np.zeros((n, m))
    gram = d @ d.T
    dx = x @ d.T  # correlations D x, (n, m)
    thr = cfg.lam / L

    def prox_step(z, rows):
        return shrink(z - (z @ gram - dx[rows]) / L, thr, gs)

    def obj(a, rows):
        # 0.5||x||^2 omitted (constant per example)
        return (0.5 * np.einsum("ij,ij->i", a @ gram, a) - np.einsum("ij,ij->i", a, dx[rows])
                + cfg.lam * penalty(a, gs))

    xx = 0.5 * np.einsum("ij,ij->i", x, x)
    f = obj(codes, slice(None))
    y = codes.copy()
    t = np.ones(n)
    active = np.arange(n)
    for _ in range(cfg.max_iter):
        a_prev = codes[active]
        f_prev = f[active]
        a_new = prox_step(y[active], active)
        f_new = obj(a_new, active)
        bad = f_new > f_prev
        if np.any(bad):
            rows = active[bad]
            a_new[bad] = prox_step(a_prev[bad], rows)
            f_new[bad] = obj(a_new[bad], rows)
            t[rows] = 1.0
        t_prev = t[active]
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_prev ** 2))
        mom = (t_prev - 1.0) / t_next
        mom[bad] = 0.0
        y[active] = a_new + mom[:, None] * (a_new - a_prev)
        t[active] = t_next
        codes[active] = a_new
        f[active] = f_new
        before = f_prev + xx[active]
        done = np.abs(before - (f_new + xx[active])) <= cfg.tol * np.abs(before)
        active = active[~done]
        if active.size == 0:
            break
    return codes


def auto_lambda(d, x, scale=0.1):
    """``scale`` times the mean over examples of ``max_i |(D x)_i|``.

    ``max_i |(D x)_i|`` is the smallest penalty that zeroes an example's l1 code.
    """
    return scale * float(np.mean(np.max(np.abs(x @ d.T), axis=1)))


def project_atoms(d):
    """Scale every atom with norm above 1 back onto the unit sphere."""
    norms = np.linalg.norm(d, axis=1)
    over = norms > 1.0
    if np.any(over):
        d = d.copy()
        d[over] /= norms[over, None]
    return d


def _recon_loss(d, ata, atx, xx):
    # 0.5 ||X - A D||_F^2 expanded in sufficient statistics
    return 0.5 * np.sum((ata @ d) * d) - np.sum(atx * d) + xx


def _dict_step(d, ata, atx, xx, step, max_halvings=20):
    f0 = _recon_loss(d, ata, atx, xx)
    grad = ata @ d - atx
    for _ in range(max_halvings + 1):
        cand = project_atoms(d - step * grad)
        f1 = _recon_loss(cand, ata, atx, xx)
        if f1 <= f0:
            return cand, step, f1
        step *= 0.5
    return d, step, f0


def dict_update(d, x, codes, step=None, max_halvings=20):
    """One projected-gradient step on ``0.5 ||X - A D||_F^2`` with respect to ``D``.

    The default step is ``1 / ||A||_2^2``. If the loss would increase, the step
    is halved (up to ``max_halvings`` times); failing that, ``D`` is returned
    unchanged.
    """
    d = check_data(d, min_samples=1, name="dictionary")
    x = check_data(x, min_samples=1)
    codes = check_data(codes, min_samples=1, name="codes")
    if codes.shape != (x.shape[0], d.shape[0]) or x.shape[1] != d.shape[1]:
        raise ValueError("inconsistent shapes for dictionary, data and codes")
    ata = codes.T @ codes
    atx = codes.T @ x
    if step is None:
        top = float(np.linalg.eigvalsh(ata)[-1])
        step = 1.0 / top if top > 0 else 1.0
    new, _, _ = _dict_step(d, ata, atx, 0.5 * float(np.sum(x * x)), step, max_halvings)
    return new


def init_dictionary(x, n_atoms, seed=0):
    """Random data rows (seeded) scaled to unit norm."""
    rng = np.random.default_rng(seed)
    rows = rng.choice(x.shape[0], size=n_atoms, replace=x.shape[0] < n_atoms)
    d = x[rows].copy()
    norms = np.linalg.norm(d, axis=1)
    zero = norms == 0
    if np.any(zero):
        d[zero] = rng.standard_normal((zero.sum(), x.shape[1]))
        norms[zero] = np.linalg.norm(d[zero], axis=1)
    return d / norms[:, None]


@dataclass
class LearnResult:
    dictionary: np.ndarray
    codes: np.ndarray
    lam: float
    history: list = field(default_factory=list)  # (epoch, objective, lam, sparsity)


def learn_dictionary(x, n_atoms, cfg, epochs=10, batch_size=256, dict_steps=20, lam=None):
    """Alternate FISTA coding and projected-gradient dictionary updates.

    Each epoch re-encodes every example (in minibatches, warm-started from the
    previous codes) and then takes ``dict_steps`` backtracking gradient steps
    on the dictionary using the full-data statistics. Both half-steps decrease
    the total objective, so the per-epoch objective is non-increasing.

    ``lam=None`` uses ``cfg.lam``; ``lam="auto"`` calibrates it with
    :func:`auto_lambda` on the initial dictionary.
    """
    x = check_data(x, min_samples=1)
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    d = init_dictionary(x, n_atoms, cfg.seed)
    if lam == "auto":
        lam = auto_lambda(d, x)
    elif lam is None:
        lam = cfg.lam
    ccfg = CodingConfig(lam=lam, max_iter=cfg.max_iter, tol=cfg.tol,
                        group_size=cfg.group_size, seed=cfg.seed)
    n = x.shape[0]
    codes = np.zeros((n, n_atoms))
    xx = 0.5 * float(np.sum(x * x))
    history = []
    step = None
    for epoch in range(1, epochs + 1):
        L = lipschitz_estimate(d)
        for lo in range(0, n, batch_size):
            sl = slice(lo, lo + batch_size)
            codes[sl] = fista_encode(d, x[sl], ccfg, init=codes[sl], lipschitz=L)
        ata = codes.T @ codes
        atx = codes.T @ x
        if ata.any():
            lmax = float(np.linalg.eigvalsh(ata)[-1])
            step = 1.0 / lmax
            for _ in range(dict_steps):
                d, step, _ = _dict_step(d, ata, atx, xx, step)
                step *= 2.0
        total = float(np.sum(objective(d, x, codes, lam, cfg.group_size)))
        sparsity = float(np.mean(codes == 0))
        history.append((epoch, total, lam, sparsity))
        log.info("epoch %d objective %.6g lambda %.4g sparsity %.3f", epoch, total, lam, sparsity)
    return LearnResult(d, codes, lam, history)


class DictionaryLearner(TransformerMixin, BaseEstimator):
    """Global (whole-input) sparse dictionary learning.

    ``transform`` returns FISTA codes against the learned ``components_``.
    """

    def __init__(self, n_atoms=256, lam="auto", group_size=None, epochs=10,
                 batch_size=256, max_iter=300, tol=1e-5, dict_steps=20, random_state=0):
        self.n_atoms = n_atoms
        self.lam = lam
        self.group_size = group_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.tol = tol
        self.dict_steps = dict_steps
        self.random_state = random_state

    def _coding_config(self, lam):
        return CodingConfig(lam=lam, max_iter=self.max_iter, tol=self.tol,
                            group_size=self.group_size, seed=self.random_state)

    def fit(self, X, y=None):
        self.fit_transform(X)
        return self

    def fit_transform(self, X, y=None):
        cfg = self._coding_config(1.0 if self.lam == "auto" else self.lam)
        res = learn_dictionary(X, self.n_atoms, cfg, epochs=self.epochs,
                               batch_size=self.batch_size, dict_steps=self.dict_steps,
                               lam="auto" if self.lam == "auto" else None)
        self.components_ = res.dictionary
        self.lam_ = res.lam
        self.history_ = res.history
        self.n_features_in_ = res.dictionary.shape[1]
        return res.codes

    def transform(self, X):
        check_is_fitted(self)
        return fista_encode(self.components_, X, self._coding_config(self.lam_))
