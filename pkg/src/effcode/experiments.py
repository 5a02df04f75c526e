"""Experiment pipelines run by the command-line tool.

Every pipeline takes an :class:`ExperimentConfig` and returns a
:class:`RunResult`: CSV tables, a JSON-serialisable summary and optional
binary artifacts (containers, PGM images). Pipelines do no file I/O of their
own apart from reading inputs.
"""
import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from scipy.stats import spearmanr

from . import netprime
from .dataio import (
    IngestError, block_index, load_cifar10, natural_patches, random_crops,
    synth_blocks, BlockSynthConfig, whiten_apply, whiten_fit,
)
from .infotheory import DEFAULT_K, spatial_mi_profile
from .netprime import MODES, StructureInit, TrainConfig
from .sparsecode import CodingConfig, auto_lambda, learn_dictionary, shrink
from .structlearn import (
    EntropyParams, StopCriterion, StructureStack, layer_entropy, learn_structure, threshold_mask,
)

CIFAR_ENV = "EFFCODE_CIFAR10_DIR"
DATA_KINDS = ("cifar10", "digits", "natural", "noise")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    """Where examples come from.

    ``cifar10`` reads the binary batches from ``path`` (or the directory named
    by ``$EFFCODE_CIFAR10_DIR``); ``digits`` is scikit-learn's 8x8 digit set,
    a small labelled stand-in; ``natural`` crops the photographs bundled with
    scikit-image; ``noise`` is iid uniform pixels. The last two are unlabelled.
    """

    kind: str = "cifar10"
    path: str | None = None
    n_train: int = 5000
    n_test: int = 2000
    grayscale: bool = True
    downsample: int | None = 16
    side: int = 16  # image side for natural / noise

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}")
        if self.n_train < 2 or self.n_test < 0:
            raise ConfigError("need n_train >= 2 and n_test >= 0")


@dataclass
class CodingParams:
    atoms: int | list = 256
    lam: float | str = "auto"
    group_size: int | None = None
    epochs: int = 20
    batch_size: int = 256
    max_iter: int = 300
    tol: float = 1e-5
    whiten_eps: float = 1e-5

    def __post_init__(self):
        if isinstance(self.lam, str) and self.lam != "auto":
            raise ConfigError('coding.lam must be a number or "auto"')


@dataclass
class StructureParams:
    density: float = 0.1
    epsilon: float = 0.05
    max_depth: int = 3
    entropy_k: int = DEFAULT_K
    entropy_features: int | None = 32
    entropy_samples: int | None = None
    ties: str = "random"
    drop_failed: bool = False


@dataclass
class TrainParams:
    """Network training. ``lam`` is ``"auto"`` (recalibrate every layer on the
    network's own activations), ``"inherit"`` (coding thresholds) or a number."""

    mode: str = "Weight+Mask+BP"
    gamma: float = 0.001
    epochs: int = 20
    batch_size: int = 128
    momentum: float = 0.0
    weight_decay: float = 0.0
    lam: float | str = "auto"
    lam_scale: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}")
        if isinstance(self.lam, str) and self.lam not in ("auto", "inherit"):
            raise ConfigError('train.lam must be a number, "auto" or "inherit"')


@dataclass
class EntropyAccuracyParams:
    n_structures: int = 20
    densities: list = field(default_factory=lambda: [0.01, 0.1, 0.3])


@dataclass
class MiDecayParams:
    offsets: list = field(default_factory=lambda: [1, 2, 4, 8, 12])
    n_pairs: int = 5000
    k: int = DEFAULT_K
    whiten: bool = True
    whiten_eps: float = 1e-3
    patch: int = 4
    atoms: int = 16
    n_patches: int = 20000
    epochs: int = 20


@dataclass
class DensityParams:
    densities: list = field(default_factory=lambda: [0.005, 0.01, 0.1, 0.3, 0.7])
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class MaskRoleParams:
    modes: list = field(default_factory=lambda: list(MODES))
    depths: list = field(default_factory=lambda: [1, 2])
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class DepthParams:
    depths: list = field(default_factory=lambda: [1, 2, 3])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    use_stopping: bool = False


@dataclass
class BlocksParams:
    grid: int = 3
    block_px: int = 8
    n_images: int = 5000
    atoms: int = 64
    epochs: int = 60
    n_sources: int = 5000
    source_side: int = 32
    source_whiten_eps: float = 1e-3
    n_patches: int = 20000
    whiten_eps: float = 1e-5


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    coding: CodingParams = field(default_factory=CodingParams)
    structure: StructureParams = field(default_factory=StructureParams)
    train: TrainParams = field(default_factory=TrainParams)
    entropy_accuracy: EntropyAccuracyParams = field(default_factory=EntropyAccuracyParams)
    mi_decay: MiDecayParams = field(default_factory=MiDecayParams)
    density: DensityParams = field(default_factory=DensityParams)
    mask_role: MaskRoleParams = field(default_factory=MaskRoleParams)
    depth: DepthParams = field(default_factory=DepthParams)
    blocks: BlocksParams = field(default_factory=BlocksParams)
    seed: int = 0
    structure_path: str | None = None
    model_path: str | None = None


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = known[name]
        if dataclasses.is_dataclass(f.type):
            value = _build(f.type, value, f"{where}.{name}" if where else name)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(doc):
    """Build an :class:`ExperimentConfig`; unknown keys at any level are rejected."""
    return _build(ExperimentConfig, doc, "")


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


# ---------------------------------------------------------------------------
# results


@dataclass
class Table:
    header: tuple
    rows: list


@dataclass
class RunResult:
    tables: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)  # file name -> callable(path)


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray | None
    x_test: np.ndarray | None
    y_test: np.ndarray | None
    side: int | None

    @property
    def labelled(self):
        return self.y_train is not None

    @property
    def n_classes(self):
        ys = [y for y in (self.y_train, self.y_test) if y is not None and len(y)]
        return int(max(int(y.max()) for y in ys)) + 1


def cifar_dir(cfg):
    path = cfg.path or os.environ.get(CIFAR_ENV)
    if not path:
        raise IngestError(f"CIFAR-10 location unknown: set data.path or ${CIFAR_ENV}")
    return path


def load_dataset(cfg, seed=0):
    n, m = cfg.n_train, cfg.n_test
    if cfg.kind == "cifar10":
        path = cifar_dir(cfg)
        tr = load_cifar10(path, n, cfg.grayscale, cfg.downsample, "train")
        te = load_cifar10(path, m, cfg.grayscale, cfg.downsample, "test") if m else None
        side = (cfg.downsample or 32) if cfg.grayscale else None
        return Dataset(tr.data, tr.labels, te.data if te else None, te.labels if te else None, side)
    if cfg.kind == "digits":
        from sklearn.datasets import load_digits

        x, y = load_digits(return_X_y=True)
        if n + m > len(y):
            raise ConfigError(f"digits has {len(y)} examples; asked for {n} + {m}")
        order = np.random.default_rng(seed).permutation(len(y))
        x, y = x[order] / 16.0, y[order].astype(np.int64)
        return Dataset(x[:n], y[:n], x[n:n + m] if m else None, y[n:n + m] if m else None, 8)
    if cfg.kind == "natural":
        x = natural_patches(cfg.side, n + m, seed)
    else:
        x = np.random.default_rng(seed).random((n + m, cfg.side * cfg.side))
    return Dataset(x[:n], None, x[n:] if m else None, None, cfg.side)


def _need_labels(data):
    if not data.labelled:
        raise ConfigError("this experiment needs labelled data (cifar10 or digits)")


def _eval_split(data):
    if data.x_test is not None and len(data.x_test):
        return data.x_test, data.y_test, "test"
    return data.x_train, data.y_train, "train"


# ---------------------------------------------------------------------------
# shared building blocks


def _coding_config(cfg, seed):
    c = cfg.coding
    lam = 1.0 if c.lam == "auto" else float(c.lam)
    return CodingConfig(lam=lam, max_iter=c.max_iter, tol=c.tol, group_size=c.group_size, seed=seed)


def structure_for(x, cfg, seed, max_depth=None, forced=False):
    """Run structure learning; ``forced`` disables the entropy-gain stop."""
    s = cfg.structure
    depth = max_depth or s.max_depth
    eps = np.finfo(float).tiny if forced else s.epsilon
    return learn_structure(
        x, cfg.coding.atoms, _coding_config(cfg, seed), StopCriterion(eps, depth),
        density=s.density,
        entropy=EntropyParams(s.entropy_k, s.entropy_features, seed, s.entropy_samples, s.ties),
        lam="auto" if cfg.coding.lam == "auto" else None,
        epochs=cfg.coding.epochs, batch_size=cfg.coding.batch_size,
        whiten_eps=cfg.coding.whiten_eps, drop_failed=s.drop_failed and not forced, seed=seed,
    )


def build_network(layers, mode, n_classes, z, tp, seed):
    if tp.lam == "auto":
        kw = {"lam": "auto", "calibration": z, "lam_scale": tp.lam_scale}
    elif tp.lam == "inherit":
        kw = {}
    else:
        kw = {"lam": float(tp.lam)}
    group = layers[0].group_size if hasattr(layers[0], "group_size") else None
    return netprime.init_from_structure(layers, mode, n_classes, seed=seed, group_size=group, **kw)


def _train_config(tp, seed):
    return TrainConfig(tp.gamma, tp.epochs, tp.batch_size, seed, tp.weight_decay, tp.momentum)


def fit_and_score(layers, mode, data, z_train, z_eval, y_eval, tp, seed):
    model = build_network(layers, mode, data.n_classes, z_train, tp, seed)
    model, history = netprime.train(model, z_train, data.y_train, _train_config(tp, seed))
    return model, history, netprime.evaluate(model, z_eval, y_eval)


def random_mask(shape, density, rng):
    """Mask with exactly ``round(density * size)`` (at least 1) ones at random positions."""
    size = int(np.prod(shape))
    keep = size if density >= 1 else max(1, int(round(density * size)))
    mask = np.zeros(size, dtype=bool)
    mask[rng.choice(size, keep, replace=False)] = True
    return mask.reshape(shape)


def spearman_or_none(a, b):
    """Spearman rank correlation, or ``None`` when it is undefined (constant input)."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    rho = spearmanr(a, b).statistic
    return None if not np.isfinite(rho) else float(rho)


def _mean_sd(values):
    v = np.asarray(values, float)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def _seed_list(seeds):
    return ";".join(str(s) for s in seeds)


# ---------------------------------------------------------------------------
# pipelines


def run_learn_structure(cfg):
    data = load_dataset(cfg.data, cfg.seed)
    stack = structure_for(data.x_train, cfg, cfg.seed)
    return RunResult(
        {"entropy_trace": Table(("layer", "entropy", "gain", "k", "n", "d"), stack.trace_rows())},
        stack.metadata(),
        {"structure.nslf": stack.save},
    )


def _load_stack(cfg):
    if not cfg.structure_path:
        raise ConfigError("structure_path is required")
    return StructureStack.load(cfg.structure_path)


def run_train(cfg):
    stack = _load_stack(cfg)
    data = load_dataset(cfg.data, cfg.seed)
    _need_labels(data)
    pre = stack.input_transform()
    z = whiten_apply(pre, data.x_train)
    tp = cfg.train
    model = build_network(stack.layers, tp.mode, data.n_classes, z, tp, cfg.seed)
    model.input_transform = pre
    finetune = StructureInit(tp.mode).finetune
    model, history = netprime.train(model, z, data.y_train, _train_config(tp, cfg.seed), finetune)
    summary = {"mode": tp.mode, "finetune_hidden": finetune,
               "lambda": [l.lam for l in model.layers],
               "train_accuracy": history[-1][2], "train_loss": history[-1][1]}
    if data.x_test is not None:
        summary["test_accuracy"] = netprime.evaluate(model, whiten_apply(pre, data.x_test), data.y_test)
    return RunResult(
        {"history": Table(("epoch", "loss", "train_acc"), history)},
        summary,
        {"model.nslf": lambda path: netprime.save_model(model, path)},
    )


def run_eval(cfg):
    if not cfg.model_path:
        raise ConfigError("model_path is required")
    model = netprime.load_model(cfg.model_path)
    data = load_dataset(cfg.data, cfg.seed)
    _need_labels(data)
    rows = []
    for split, x, y in (("train", data.x_train, data.y_train), ("test", data.x_test, data.y_test)):
        if x is None or not len(x):
            continue
        if model.input_transform is not None:
            x = whiten_apply(model.input_transform, x)
        loss, acc = netprime.loss_and_accuracy(model, x, y)
        rows.append((split, len(y), loss, acc))
    return RunResult({"eval": Table(("split", "n", "loss", "accuracy"), rows)},
                     {"mode": model.mode, "accuracy": {r[0]: r[3] for r in rows}})


def run_entropy_accuracy(cfg):
    """Random structures: entropy of their features vs. training accuracy of a softmax head.

    A random structure is one layer of ``atoms`` units whose connections form a
    random mask at a density drawn from ``densities``, with weights uniform in
    ``+-1/sqrt(fan_in)`` and a threshold set by the auto rule.
    """
    p = cfg.entropy_accuracy
    data = load_dataset(cfg.data, cfg.seed)
    _need_labels(data)
    z = whiten_apply(whiten_fit(data.x_train, cfg.coding.whiten_eps), data.x_train)
    atoms = cfg.coding.atoms if isinstance(cfg.coding.atoms, int) else cfg.coding.atoms[0]
    s = cfg.structure
    tp = cfg.train
    rows = []
    children = np.random.SeedSequence(cfg.seed).spawn(p.n_structures)
    for r, child in enumerate(children):
        rng = np.random.default_rng(child)
        density = float(p.densities[rng.integers(len(p.densities))])
        mask = random_mask((atoms, z.shape[1]), density, rng)
        fan_in = np.maximum(mask.sum(axis=1, keepdims=True), 1)
        w = np.where(mask, rng.uniform(-1, 1, mask.shape) / np.sqrt(fan_in), 0.0)
        lam = auto_lambda(w, z, tp.lam_scale)
        feats = shrink(z @ w.T, lam, cfg.coding.group_size)
        seed_r = int(child.generate_state(1)[0])
        ent = layer_entropy(feats, EntropyParams(s.entropy_k, s.entropy_features, seed_r,
                                                 s.entropy_samples, s.ties), seed_r)
        layer = netprime.MaskedLayer(w, mask, lam, cfg.coding.group_size)
        head = rng.uniform(-1, 1, (data.n_classes, atoms)) / np.sqrt(atoms)
        model = netprime.NetworkModel([layer], head, np.zeros(data.n_classes), "Weight")
        model, _ = netprime.train(model, z, data.y_train, _train_config(tp, seed_r), finetune=False)
        acc = netprime.evaluate(model, z, data.y_train)
        rows.append((r, density, ent.value, acc))
    rho = spearman_or_none([r[2] for r in rows], [r[3] for r in rows])
    summary = {
        "spearman_rho": rho,
        "accuracy_split": "train",
        "structure_family": "one layer, random mask at density drawn from "
                            f"{p.densities}, weights uniform +-1/sqrt(fan_in), auto threshold",
        "atoms": atoms,
    }
    return RunResult(
        {"entropy_accuracy": Table(("structure_id", "density", "entropy", "train_accuracy"), rows)},
        summary,
    )


def response_maps(images, side, atoms, patch):
    """Absolute filter responses ``|<atom, patch>|`` at every valid location.

    Returns ``(n_images * n_atoms, s * s)`` with ``s = side - patch + 1``:
    one map per image and atom, laid out like images.
    """
    grid = images.reshape(-1, side, side)
    win = np.lib.stride_tricks.sliding_window_view(grid, (patch, patch), axis=(1, 2))
    s = side - patch + 1
    win = win.reshape(grid.shape[0], s * s, patch * patch)
    resp = np.abs(np.einsum("nlp,ap->nal", win, atoms))
    return resp.reshape(-1, s * s), s


def run_mi_decay(cfg):
    p = cfg.mi_decay
    data = load_dataset(cfg.data, cfg.seed)
    side = data.side
    if side is None:
        raise ConfigError("spatial MI needs single-channel square images (grayscale)")
    x = data.x_train
    if p.whiten:
        x = whiten_apply(whiten_fit(x, p.whiten_eps), x)
    ss = np.random.SeedSequence(cfg.seed).spawn(3)
    seeds = [int(c.generate_state(1)[0]) for c in ss]
    pix = spatial_mi_profile(x, side, p.offsets, p.n_pairs, p.k, seeds[0])

    patches = random_crops(x, p.patch, p.n_patches, seeds[1])
    res = learn_dictionary(patches, p.atoms, CodingConfig(max_iter=cfg.coding.max_iter,
                                                          tol=cfg.coding.tol, seed=seeds[1]),
                           epochs=p.epochs, batch_size=cfg.coding.batch_size, lam="auto")
    maps, s = response_maps(x, side, res.dictionary, p.patch)
    offsets = [o for o in p.offsets if o < s]
    feat = spatial_mi_profile(maps, s, offsets, p.n_pairs, p.k, seeds[2])
    rows = [("pixel",) + r for r in pix.rows()] + [("feature",) + r for r in feat.rows()]
    summary = {
        "pixel_mi": dict(zip(map(str, pix.distances.tolist()), pix.mi.tolist())),
        "feature_mi": dict(zip(map(str, feat.distances.tolist()), feat.mi.tolist())),
        "feature_patch": p.patch, "feature_atoms": p.atoms, "feature_lambda": res.lam,
        "feature_offsets_dropped": [o for o in p.offsets if o >= s],
    }
    return RunResult({"mi_profile": Table(("representation", "offset", "mi", "n_pairs"), rows)},
                     summary)


def run_density(cfg):
    """Thresholded dictionary mask vs. random mask at matched density.

    Both networks start from ``M o D`` with the same one-layer dictionary and
    are trained with the mask as a constraint; only the mask positions differ.
    """
    p = cfg.density
    data = load_dataset(cfg.data, cfg.seed)
    _need_labels(data)
    runs = []
    for seed in p.seeds:
        stack = structure_for(data.x_train, cfg, seed, max_depth=1, forced=True)
        pre = stack.input_transform()
        z = whiten_apply(pre, data.x_train)
        xe, ye, split = _eval_split(data)
        ze = whiten_apply(pre, xe)
        d = stack.layers[0].dictionary
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        for density in p.densities:
            masks = {"random": random_mask(d.shape, density, rng),
                     "sparse_coding": threshold_mask(d, density).astype(bool)}
            for source, mask in masks.items():
                layer = SimpleNamespace(dictionary=d, mask=mask, lam=stack.layers[0].lam)
                _, _, acc = fit_and_score([layer], "Weight+Mask+BP", data, z, ze, ye, cfg.train, seed)
                runs.append((source, float(density), seed, acc))
    rows = []
    for source in ("random", "sparse_coding"):
        for density in p.densities:
            accs = [r[3] for r in runs if r[0] == source and r[1] == float(density)]
            mean, sd = _mean_sd(accs)
            rows.append((source, float(density), mean, sd, _seed_list(p.seeds)))
    summary = {"eval_split": _eval_split(data)[2], "mode": "Weight+Mask+BP",
               "seeds": list(p.seeds)}
    return RunResult({
        "density": Table(("mask_source", "density", "accuracy", "accuracy_sd", "seeds"), rows),
        "density_runs": Table(("mask_source", "density", "seed", "accuracy"), runs),
    }, summary)


def run_mask_role(cfg):
    p = cfg.mask_role
    for mode in p.modes:
        StructureInit(mode)
    data = load_dataset(cfg.data, cfg.seed)
    _need_labels(data)
    runs = []
    for seed in p.seeds:
        stack = structure_for(data.x_train, cfg, seed, max_depth=max(p.depths), forced=True)
        pre = stack.input_transform()
        z = whiten_apply(pre, data.x_train)
        xe, ye, _ = _eval_split(data)
        ze = whiten_apply(pre, xe)
        for depth in p.depths:
            for mode in p.modes:
                _, _, acc = fit_and_score(stack.layers[:depth], mode, data, z, ze, ye, cfg.train, seed)
                runs.append((mode, depth, seed, acc))
    rows = []
    for depth in p.depths:
        for mode in p.modes:
            mean, sd = _mean_sd([r[3] for r in runs if r[0] == mode and r[1] == depth])
            rows.append((mode, depth, mean, sd, _seed_list(p.seeds)))
    return RunResult({
        "mask_role": Table(("mode", "depth", "accuracy", "accuracy_sd", "seeds"), rows),
        "mask_role_runs": Table(("mode", "depth", "seed", "accuracy"), runs),
    }, {"eval_split": _eval_split(data)[2], "seeds": list(p.seeds)})


def run_depth(cfg):
    p = cfg.depth
    data = load_dataset(cfg.data, cfg.seed)
    _need_labels(data)
    runs = []
    selected = []
    for seed in p.seeds:
        if p.use_stopping:
            stack = structure_for(data.x_train, cfg, seed)
            depths = list(range(1, stack.depth + 1))
            selected.append(stack.depth)
        else:
            stack = structure_for(data.x_train, cfg, seed, max_depth=max(p.depths), forced=True)
            depths = list(p.depths)
        pre = stack.input_transform()
        z = whiten_apply(pre, data.x_train)
        xe, ye, _ = _eval_split(data)
        ze = whiten_apply(pre, xe)
        for depth in depths:
            _, _, acc = fit_and_score(stack.layers[:depth], cfg.train.mode, data, z, ze, ye,
                                      cfg.train, seed)
            runs.append((depth, seed, acc, float(stack.entropy_trace[depth])))
    rows = []
    prev = None
    for depth in sorted({r[0] for r in runs}):
        sel = [r for r in runs if r[0] == depth]
        acc, sd = _mean_sd([r[2] for r in sel])
        ent = float(np.mean([r[3] for r in sel]))
        rows.append((depth, acc, sd, ent, "" if prev is None else acc - prev,
                     _seed_list(r[1] for r in sel)))
        prev = acc
    summary = {"mode": cfg.train.mode, "eval_split": _eval_split(data)[2],
               "use_stopping": p.use_stopping}
    if p.use_stopping:
        summary["selected_depths"] = selected
    return RunResult({
        "depth": Table(("depth", "accuracy", "accuracy_sd", "entropy", "accuracy_gain", "seeds"), rows),
        "depth_runs": Table(("depth", "seed", "accuracy", "entropy"), runs),
    }, summary)


def localization(d, grid, block_px):
    """Fraction of every atom's squared norm that falls in each block: ``(atoms, grid**2)``."""
    d = np.asarray(d, dtype=np.float64)
    idx = block_index(grid, block_px)
    if d.shape[1] != idx.size:
        raise ValueError(f"atoms have {d.shape[1]} pixels, blocks cover {idx.size}")
    energy = np.zeros((d.shape[0], grid * grid))
    np.add.at(energy.T, idx, (d * d).T)
    total = energy.sum(axis=1, keepdims=True)
    return np.divide(energy, total, out=np.zeros_like(energy), where=total > 0)


def localization_stats(d, grid, block_px):
    peak = localization(d, grid, block_px).max(axis=1)
    return {"mean_max_fraction": float(peak.mean()),
            "frac_atoms_ge_0.8": float(np.mean(peak >= 0.8)),
            "frac_atoms_ge_0.9": float(np.mean(peak >= 0.9))}


def atom_grid_pgm(d, side, cols=None, pad=1):
    """8-bit binary PGM (P5) tiling every atom, each scaled to its own max |value|."""
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    cols = cols or int(math.ceil(math.sqrt(n)))
    rows = int(math.ceil(n / cols))
    h = rows * (side + pad) + pad
    w = cols * (side + pad) + pad
    canvas = np.full((h, w), 128.0)
    for i, atom in enumerate(d):
        peak = np.abs(atom).max()
        tile = 128.0 + 127.0 * atom / peak if peak > 0 else np.full(atom.shape, 128.0)
        r, c = divmod(i, cols)
        y0, x0 = pad + r * (side + pad), pad + c * (side + pad)
        canvas[y0:y0 + side, x0:x0 + side] = tile.reshape(side, side)
    pix = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes()


def block_sources(cfg, seed):
    """Whitened ``block_px``-side patches of natural images."""
    p = cfg.blocks
    if cfg.data.kind == "cifar10":
        src = load_cifar10(cifar_dir(cfg.data), p.n_sources, grayscale=True).data
        side = 32
    else:
        src = natural_patches(p.source_side, p.n_sources, seed)
        side = p.source_side
    src = whiten_apply(whiten_fit(src, p.source_whiten_eps), src)
    return random_crops(src.reshape(-1, side, side), p.block_px, p.n_patches, seed + 1)


def run_blocks(cfg):
    p = cfg.blocks
    seed = cfg.seed
    patches = block_sources(cfg, seed)
    images = synth_blocks(BlockSynthConfig(patches, p.grid, p.block_px, p.n_images, seed + 2))
    x = whiten_apply(whiten_fit(images, p.whiten_eps), images)
    res = learn_dictionary(x, p.atoms, _coding_config(cfg, seed), epochs=p.epochs,
                           batch_size=cfg.coding.batch_size, lam="auto")
    frac = localization(res.dictionary, p.grid, p.block_px)
    baseline = np.random.default_rng(np.random.SeedSequence([seed, 3])).standard_normal(res.dictionary.shape)
    trained = localization_stats(res.dictionary, p.grid, p.block_px)
    untrained = localization_stats(baseline, p.grid, p.block_px)
    atom_rows = [(i, float(f.max()), int(f.argmax())) for i, f in enumerate(frac)]
    summary_rows = [("trained",) + tuple(trained.values()), ("untrained_gaussian",) + tuple(untrained.values())]
    pgm = atom_grid_pgm(res.dictionary, p.grid * p.block_px)
    side = p.grid * p.block_px
    return RunResult({
        "localization": Table(("dictionary", "mean_max_fraction", "frac_atoms_ge_0.8",
                               "frac_atoms_ge_0.9"), summary_rows),
        "atoms": Table(("atom", "max_fraction", "block"), atom_rows),
    }, {"trained": trained, "untrained_gaussian": untrained, "lambda": res.lam,
        "image_side": side, "source": cfg.data.kind if cfg.data.kind == "cifar10" else "natural"},
        {"atoms.pgm": lambda path: Path(path).write_bytes(pgm)})


COMMANDS = {
    "learn-structure": run_learn_structure,
    "train": run_train,
    "eval": run_eval,
    "exp-entropy-accuracy": run_entropy_accuracy,
    "exp-mi-decay": run_mi_decay,
    "exp-density": run_density,
    "exp-mask-role": run_mask_role,
    "exp-depth": run_depth,
    "exp-blocks": run_blocks,
}
