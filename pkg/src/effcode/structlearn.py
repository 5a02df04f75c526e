"""Layer-wise structure learning.

Each layer whitens its input, learns a sparse-coding dictionary on it, turns
the dictionary into a binary connection mask by keeping its largest-magnitude
entries, and scores the new codes by the entropy of their CDF transform.
Layers are added until the relative entropy gain falls below ``epsilon``
(or ``max_depth`` is reached).
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import container
from .dataio import WhitenTransform, check_data, whiten_apply, whiten_fit
from .infotheory import DEFAULT_K, EntropyEstimate, multi_information
from .sparsecode import CodingConfig, fista_encode, learn_dictionary

log = logging.getLogger(__name__)


class DegenerateDictionaryError(ValueError):
    pass


def threshold_mask(d, density):
    """Binary mask keeping the ``round(density * size)`` largest ``|D|`` entries.

    Ties are broken towards larger magnitude first and lower flat index second,
    so the achieved density is exact up to rounding.
    """
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    d = np.asarray(d, dtype=np.float64)
    if density == 1:
        return np.ones(d.shape, dtype=np.uint8)
    mag = np.abs(d).ravel()
    if not mag.any():
        raise DegenerateDictionaryError("cannot threshold an all-zero dictionary")
    keep = max(1, int(round(density * mag.size)))
    order = np.argsort(-mag, kind="stable")
    mask = np.zeros(mag.size, dtype=np.uint8)
    mask[order[:keep]] = 1
    return mask.reshape(d.shape)


def entropy_gain(prev, new):
    """Relative change ``|(new - prev) / prev|``; absolute change when ``|prev| < 1e-9``."""
    prev, new = float(prev), float(new)
    if not math.isfinite(prev):
        raise ValueError("previous entropy must be finite")
    if abs(prev) < 1e-9:
        return abs(new - prev)
    return abs((new - prev) / prev)


@dataclass
class StopCriterion:
    epsilon: float = 0.05
    max_depth: int = 4

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


@dataclass
class EntropyParams:
    k: int = DEFAULT_K
    n_features: int | None = 32
    seed: int = 0
    max_samples: int | None = None
    ties: str = "random"


@dataclass
class LayerStructure:
    dictionary: np.ndarray
    mask: np.ndarray
    entropy: EntropyEstimate
    lam: float
    whiten_mean: np.ndarray | None = None
    whiten_projection: np.ndarray | None = None


@dataclass
class StructureStack:
    layers: list
    entropy_trace: list  # H(Z_0), H(Z_1), ..., H(Z_K)
    epsilon: float
    density: float
    gains: list = field(default_factory=list)
    entropy_params: dict = field(default_factory=dict)
    stopped_by: str = "epsilon"

    @property
    def depth(self):
        return len(self.layers)

    def metadata(self):
        return {
            "depth": self.depth,
            "epsilon": self.epsilon,
            "density": self.density,
            "lambda": [layer.lam for layer in self.layers],
            "entropy_trace": [float(h) for h in self.entropy_trace],
            "gains": [float(g) for g in self.gains],
            "entropy_params": self.entropy_params,
            "stopped_by": self.stopped_by,
        }

    def trace_rows(self):
        """``(layer, entropy, gain, k, n, d)`` rows; layer 0 is the whitened input."""
        ep = self.entropy_params
        k, n, d = ep.get("k", DEFAULT_K), ep.get("n", ""), ep.get("d", "")
        rows = [(0, float(self.entropy_trace[0]), "", k, n, d)]
        for i, (h, g) in enumerate(zip(self.entropy_trace[1:], self.gains), start=1):
            rows.append((i, float(h), float(g), k, n, d))
        return rows

    def input_transform(self):
        """Whitening of the first layer, i.e. the network's input preprocessing."""
        first = self.layers[0]
        if first.whiten_mean is None:
            raise ValueError("structure carries no whitening transform")
        return WhitenTransform(first.whiten_mean, first.whiten_projection, 0.0)

    def save(self, path):
        tensors = {}
        for i, layer in enumerate(self.layers):
            tensors[f"D{i}"] = layer.dictionary
            tensors[f"M{i}"] = layer.mask.astype(np.uint8)
            if layer.whiten_mean is not None:
                tensors[f"whiten_mean{i}"] = layer.whiten_mean
                tensors[f"whiten_projection{i}"] = layer.whiten_projection
        container.save_container(path, tensors, self.metadata())

    @classmethod
    def load(cls, path):
        tensors, meta = container.load_container(path)
        ep = meta.get("entropy_params", {})
        layers = []
        for i in range(meta["depth"]):
            h = meta["entropy_trace"][i + 1]
            est = EntropyEstimate(h, ep.get("k", DEFAULT_K), ep.get("n", 0), ep.get("d", 0))
            layers.append(LayerStructure(tensors[f"D{i}"], tensors[f"M{i}"], est, meta["lambda"][i],
                                         tensors.get(f"whiten_mean{i}"),
                                         tensors.get(f"whiten_projection{i}")))
        return cls(layers, meta["entropy_trace"], meta["epsilon"], meta["density"],
                   meta.get("gains", []), ep, meta.get("stopped_by", "epsilon"))


def layer_seeds(seed, n):
    """Independent per-layer seeds derived from one master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def layer_entropy(u, params, seed):
    if params.max_samples is not None and u.shape[0] > params.max_samples:
        rows = np.random.default_rng(seed).choice(u.shape[0], params.max_samples, replace=False)
        u = u[np.sort(rows)]
    return multi_information(u, params.k, params.n_features, seed=seed, ties=params.ties)


def learn_structure(x, atoms_per_layer, cfg, stop, density=0.1, entropy=None,
                    lam="auto", epochs=20, batch_size=256, whiten_eps=1e-5,
                    drop_failed=False, seed=0):
    """Learn dictionaries, masks and depth layer by layer.

    ``atoms_per_layer`` gives the atom count of every potential layer (an int
    is repeated). ``lam="auto"`` calibrates the penalty per layer, a number
    fixes it, and ``None`` takes ``cfg.lam``. The entropy
    of the whitened input is computed the same way as every layer's, so the
    first gain is defined. The layer that fails the gain test is kept unless
    ``drop_failed``.
    """
    x = check_data(x, min_samples=2)
    entropy = entropy or EntropyParams()
    if isinstance(atoms_per_layer, int):
        atoms_per_layer = [atoms_per_layer] * stop.max_depth
    if len(atoms_per_layer) < stop.max_depth:
        raise ValueError(f"atoms_per_layer has {len(atoms_per_layer)} entries, max_depth is {stop.max_depth}")

    seeds = layer_seeds(seed, stop.max_depth)
    u = x
    w0 = whiten_fit(u, whiten_eps)
    h_prev = layer_entropy(whiten_apply(w0, u), entropy, entropy.seed)
    trace = [h_prev.value]
    gains = []
    layers = []
    stopped_by = "max_depth"
    for k in range(stop.max_depth):
        wt = whiten_fit(u, whiten_eps)
        uw = whiten_apply(wt, u)
        layer_lam = cfg.lam if lam is None or lam == "auto" else float(lam)
        lcfg = CodingConfig(lam=layer_lam, max_iter=cfg.max_iter, tol=cfg.tol,
                            group_size=cfg.group_size, seed=seeds[k])
        res = learn_dictionary(uw, atoms_per_layer[k], lcfg, epochs=epochs,
                               batch_size=batch_size, lam="auto" if lam == "auto" else None)
        if not res.codes.any():
            raise ValueError(
                f"layer {k}: every code is zero with lambda={res.lam:.4g}; lower lambda"
            )
        mask = threshold_mask(res.dictionary, density)
        h = layer_entropy(res.codes, entropy, entropy.seed)
        gain = entropy_gain(trace[-1], h.value)
        log.info("layer %d: H=%.4f gain=%.4f lambda=%.4g", k, h.value, gain, res.lam)
        layers.append(LayerStructure(res.dictionary, mask, h, res.lam, wt.mean, wt.projection))
        trace.append(h.value)
        gains.append(gain)
        u = res.codes
        if gain < stop.epsilon:
            stopped_by = "epsilon"
            if drop_failed and len(layers) > 1:
                layers.pop()
                trace.pop()
                gains.pop()
            break

    params = {"k": entropy.k, "n_features": entropy.n_features, "seed": entropy.seed,
              "max_samples": entropy.max_samples, "ties": entropy.ties,
              "n": h_prev.n, "d": h_prev.d}
    return StructureStack(layers, trace, stop.epsilon, density, gains, params, stopped_by)


def encode_stack(stack, x, cfg):
    """Sparse-coding features of ``x`` through every layer (whiten, then FISTA)."""
    u = check_data(x, min_samples=0)
    for layer in stack.layers:
        if layer.whiten_mean is None:
            raise ValueError("stack has no whitening transforms")
        uw = (u - layer.whiten_mean) @ layer.whiten_projection
        lcfg = CodingConfig(lam=layer.lam, max_iter=cfg.max_iter, tol=cfg.tol,
                            group_size=cfg.group_size)
        u = fista_encode(layer.dictionary, uw, lcfg)
    return u


class StructureLearner(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`learn_structure`.

    After ``fit``, ``stack_`` holds the learned layers and ``depth_`` the
    selected depth; ``transform`` returns the top-layer sparse codes.
    """

    def __init__(self, atoms_per_layer=256, lam="auto", group_size=None, density=0.1,
                 epsilon=0.05, max_depth=4, epochs=20, batch_size=256, max_iter=300,
                 tol=1e-5, entropy_k=DEFAULT_K, entropy_features=32, entropy_samples=None,
                 whiten_eps=1e-5, drop_failed=False, random_state=0):
        self.atoms_per_layer = atoms_per_layer
        self.lam = lam
        self.group_size = group_size
        self.density = density
        self.epsilon = epsilon
        self.max_depth = max_depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.tol = tol
        self.entropy_k = entropy_k
        self.entropy_features = entropy_features
        self.entropy_samples = entropy_samples
        self.whiten_eps = whiten_eps
        self.drop_failed = drop_failed
        self.random_state = random_state

    def _coding_config(self):
        lam = 1.0 if self.lam == "auto" else self.lam
        return CodingConfig(lam=lam, max_iter=self.max_iter, tol=self.tol,
                            group_size=self.group_size, seed=self.random_state)

    def fit(self, X, y=None):
        self.stack_ = learn_structure(
            X, self.atoms_per_layer, self._coding_config(),
            StopCriterion(self.epsilon, self.max_depth), density=self.density,
            entropy=EntropyParams(self.entropy_k, self.entropy_features, self.random_state,
                                  self.entropy_samples),
            lam=self.lam, epochs=self.epochs, batch_size=self.batch_size,
            whiten_eps=self.whiten_eps, drop_failed=self.drop_failed, seed=self.random_state,
        )
        self.depth_ = self.stack_.depth
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        return encode_stack(self.stack_, X, self._coding_config())
