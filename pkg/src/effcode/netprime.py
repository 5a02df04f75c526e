"""Feed-forward networks primed by a learned structure.

Hidden layer ``k`` computes ``U_{k+1} = shrink(U_k @ W_k.T, lam_k)``, a single
ISTA step, with ``W_k`` shaped like the dictionary it was initialised from
(``out x in``). The binary mask ``M_k`` fixes which connections exist:
masked weights start at zero and their gradients are multiplied by the mask,
so they stay exactly zero. A softmax layer with bias sits on top.
"""
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import container
from .dataio import WhitenTransform, check_data, whiten_apply
from .sparsecode import auto_lambda, group_norms, shrink

MODES = ("BP", "Weight", "Weight+BP", "Mask+BP", "Weight+Mask+BP")


@dataclass(frozen=True)
class StructureInit:
    """Which parts of the learned structure a network uses."""

    mode: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")

    @property
    def weights_from_dictionary(self):
        return self.mode.startswith("Weight")

    @property
    def uses_mask(self):
        return "Mask" in self.mode

    @property
    def finetune(self):
        return self.mode.endswith("BP")


@dataclass
class MaskedLayer:
    weights: np.ndarray
    mask: np.ndarray
    lam: float
    group_size: int | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.mask = np.asarray(self.mask).astype(bool)
        if self.weights.shape != self.mask.shape:
            raise ValueError("weights and mask shapes differ")
        self.weights = np.where(self.mask, self.weights, 0.0)


@dataclass
class NetworkModel:
    layers: list
    head_w: np.ndarray
    head_b: np.ndarray
    mode: str = "Weight+Mask+BP"
    version: int = 0
    # preprocessing callers apply before forward(); stored with the model
    input_transform: WhitenTransform | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one hidden layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weights.shape[0] != b.weights.shape[1]:
                raise ValueError("layer dimensions do not chain")
        top = self.layers[-1].weights.shape[0]
        if self.head_w.shape[1] != top:
            raise ValueError("head input dimension does not match top layer")

    @property
    def n_classes(self):
        return self.head_w.shape[0]

    @property
    def input_dim(self):
        return self.layers[0].weights.shape[1]

    def copy(self):
        layers = [MaskedLayer(l.weights.copy(), l.mask.copy(), l.lam, l.group_size)
                  for l in self.layers]
        return NetworkModel(layers, self.head_w.copy(), self.head_b.copy(), self.mode,
                            self.version, self.input_transform)


@dataclass
class TrainConfig:
    gamma: float = 0.001
    epochs: int = 10
    batch_size: int = 128
    seed: int = 0
    weight_decay: float = 0.0
    momentum: float = 0.0

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def save_model(model, path):
    """Persist a network as ``W0, M0, ..., head_w, head_b`` plus JSON metadata."""
    tensors = {}
    for i, layer in enumerate(model.layers):
        tensors[f"W{i}"] = layer.weights
        tensors[f"M{i}"] = layer.mask.astype(np.uint8)
    tensors["head_w"] = model.head_w
    tensors["head_b"] = model.head_b
    if model.input_transform is not None:
        tensors["input_mean"] = model.input_transform.mean
        tensors["input_projection"] = model.input_transform.projection
    meta = {"lambda": [l.lam for l in model.layers],
            "group_size": model.layers[0].group_size,
            "mode": model.mode, "depth": len(model.layers)}
    container.save_container(path, tensors, meta)


def load_model(path):
    tensors, meta = container.load_container(path)
    layers = [MaskedLayer(tensors[f"W{i}"], tensors[f"M{i}"], meta["lambda"][i], meta["group_size"])
              for i in range(meta["depth"])]
    pre = None
    if "input_mean" in tensors:
        pre = WhitenTransform(tensors["input_mean"], tensors["input_projection"], 0.0)
    return NetworkModel(layers, tensors["head_w"], tensors["head_b"], meta["mode"],
                        input_transform=pre)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_from_structure(layers, mode, n_classes, seed=0, group_size=None, lam=None,
                        calibration=None, lam_scale=0.1):
    """Build a network from learned ``(dictionary, mask, lam)`` layers.

    Weight modes start from ``M o D``; Mask+BP starts from ``M o R`` with ``R``
    uniform in ``+-1/sqrt(fan_in)``; BP starts from unmasked ``R``. Only the
    Mask modes keep the mask as a training constraint. The head is random.

    ``layers`` is a :class:`~effcode.structlearn.StructureStack` or a list of
    objects with ``dictionary``, ``mask`` and ``lam`` attributes. ``lam``
    overrides the per-layer shrinkage thresholds (scalar or list). With
    ``lam="auto"`` every threshold is set by the rule used for dictionary
    learning, ``lam_scale * mean max |W u|``, on the activations that
    ``calibration`` data produces at that layer.
    """
    init = mode if isinstance(mode, StructureInit) else StructureInit(mode)
    layers = getattr(layers, "layers", layers)
    if not layers:
        raise ValueError("structure has no layers")
    rng = np.random.default_rng(seed)
    auto = isinstance(lam, str)
    if auto:
        if lam != "auto":
            raise ValueError(f"unknown lam setting {lam!r}")
        if calibration is None:
            raise ValueError('lam="auto" needs calibration data')
        u = check_data(calibration)
        lams = [None] * len(layers)
    elif lam is None:
        lams = [l.lam for l in layers]
    else:
        lams = list(lam) if np.ndim(lam) else [float(lam)] * len(layers)
        if len(lams) != len(layers):
            raise ValueError("one lam per layer required")
    out = []
    for src, lk in zip(layers, lams):
        d = np.asarray(src.dictionary, dtype=np.float64)
        learned = np.asarray(src.mask).astype(bool)
        if init.weights_from_dictionary:
            w = np.where(learned, d, 0.0)
        else:
            w = None
        # the mask constrains training only in the Mask modes
        mask = learned if init.uses_mask else np.ones(d.shape, bool)
        if w is None:
            # fan-in of a unit is its number of incoming connections
            fan_in = np.maximum(mask.sum(axis=1, keepdims=True), 1)
            w = _uniform(rng, d.shape, fan_in)
        w = np.where(mask, w, 0.0)
        if auto:
            lk = auto_lambda(w, u, lam_scale)
            u = shrink(u @ w.T, lk, group_size)
        out.append(MaskedLayer(w, mask, float(lk), group_size))
    top = out[-1].weights.shape[0]
    head_w = _uniform(rng, (n_classes, top), top)
    head_b = np.zeros(n_classes)
    return NetworkModel(out, head_w, head_b, init.mode)


@dataclass
class ForwardCache:
    inputs: list  # input of every hidden layer
    pre: list
    post: list
    version: int


def forward(model, x):
    """Logits and the activations needed by :func:`backward`."""
    x = check_data(x, min_samples=0)
    if x.shape[1] != model.input_dim:
        raise ValueError(f"input has {x.shape[1]} features, network expects {model.input_dim}")
    inputs, pre, post = [], [], []
    u = x
    for layer in model.layers:
        inputs.append(u)
        a = u @ layer.weights.T
        u = shrink(a, layer.lam, layer.group_size)
        pre.append(a)
        post.append(u)
    logits = u @ model.head_w.T + model.head_b
    return logits, ForwardCache(inputs, pre, post, model.version)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy (nats) and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per row of logits required")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = np.exp(z - logsum[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _shrink_backward(layer, a, u, du):
    if layer.group_size is None:
        # derivative of soft thresholding is 1 outside the dead zone, 0 inside
        return np.where(u != 0, du, 0.0)
    g = layer.group_size
    a_g = a.reshape(a.shape[0], -1, g)
    du_g = du.reshape(du.shape[0], -1, g)
    r = group_norms(a, g)
    live = r > layer.lam
    safe = np.where(live, r, 1.0)
    scale = np.where(live, 1.0 - layer.lam / safe, 0.0)
    proj = np.einsum("ngi,ngi->ng", a_g, du_g)
    coef = np.where(live, layer.lam / safe ** 3, 0.0)
    da = scale[..., None] * du_g + (coef * proj)[..., None] * a_g
    return da.reshape(du.shape)


@dataclass
class Gradients:
    weights: list
    head_w: np.ndarray
    head_b: np.ndarray
    extra: dict = field(default_factory=dict)


def backward(model, cache, dlogits):
    """Back-propagate ``dlogits`` through the head and the masked layers.

    Hidden-layer weight gradients are multiplied by their masks; the head is
    unmasked.
    """
    if cache.version != model.version:
        raise ValueError("stale forward cache: the model changed after forward()")
    feats = cache.post[-1]
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != (feats.shape[0], model.n_classes):
        raise ValueError(f"dlogits shape {dlogits.shape} does not match the cached batch")
    g_head_w = dlogits.T @ feats
    g_head_b = dlogits.sum(axis=0)
    du = dlogits @ model.head_w
    grads = [None] * len(model.layers)
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        da = _shrink_backward(layer, cache.pre[k], cache.post[k], du)
        grads[k] = (da.T @ cache.inputs[k]) * layer.mask
        if k:
            du = da @ layer.weights
    return Gradients(grads, g_head_w, g_head_b)


def sgd_step(model, grads, cfg, train_hidden=True, velocity=None):
    """In-place update ``W <- W - gamma * (M o dW)``; masked entries stay exactly zero."""
    def update(key, param, grad, mask=None):
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * param
        if mask is not None:
            grad = np.where(mask, grad, 0.0)
        if cfg.momentum and velocity is not None:
            v = velocity.get(key)
            v = grad if v is None else cfg.momentum * v + grad
            velocity[key] = v
            grad = v
        param -= cfg.gamma * grad
        if mask is not None:
            param[~mask] = 0.0

    if train_hidden:
        for k, (layer, g) in enumerate(zip(model.layers, grads.weights)):
            if g.shape != layer.weights.shape:
                raise ValueError(f"gradient shape {g.shape} != weight shape {layer.weights.shape}")
            update(("W", k), layer.weights, g, layer.mask)
    update("head_w", model.head_w, grads.head_w)
    update("head_b", model.head_b, grads.head_b)
    model.version += 1
    return model


def predict(model, x):
    logits, _ = forward(model, x)
    return np.argmax(logits, axis=1)


def evaluate(model, x, labels):
    """Accuracy of argmax-logit predictions (ties go to the lowest class id)."""
    return float(np.mean(predict(model, x) == np.asarray(labels)))


def loss_and_accuracy(model, x, labels):
    logits, _ = forward(model, x)
    loss, _ = softmax_xent(logits, labels)
    return loss, float(np.mean(np.argmax(logits, axis=1) == labels))


def train(model, x, labels, cfg, finetune=None):
    """Minibatch SGD over seeded shuffles.

    ``finetune`` (default: taken from the model's mode) controls whether the
    hidden layers are updated; the softmax head is always trained. Returns
    ``(model, history)`` with one ``(epoch, loss, train_acc)`` row per epoch,
    evaluated on the full training set after the epoch.
    """
    x = check_data(x, min_samples=1)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != x.shape[0]:
        raise ValueError("labels and data differ in length")
    if finetune is None:
        finetune = StructureInit(model.mode).finetune
    rng = np.random.default_rng(cfg.seed)
    velocity = {} if cfg.momentum else None
    history = []
    n = x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            logits, cache = forward(model, x[idx])
            _, dlogits = softmax_xent(logits, labels[idx])
            grads = backward(model, cache, dlogits)
            sgd_step(model, grads, cfg, train_hidden=finetune, velocity=velocity)
        loss, acc = loss_and_accuracy(model, x, labels)
        history.append((epoch, loss, acc))
    return model, history


class PrimedNetworkClassifier(ClassifierMixin, BaseEstimator):
    """Classifier whose hidden layers come from a learned structure.

    ``structure`` is a fitted :class:`~effcode.structlearn.StructureStack`
    (or list of layers). ``mode`` selects which parts of it are used, as in
    :data:`MODES`. Inputs are whitened with the structure's first-layer
    transform when it has one. ``lam="auto"`` sets every layer's threshold
    from the training data (``lam_scale`` times the mean peak response);
    ``None`` keeps the structure's sparse-coding penalties.
    """

    def __init__(self, structure=None, mode="Weight+Mask+BP", gamma=0.001, epochs=10,
                 batch_size=128, weight_decay=0.0, momentum=0.0, lam="auto", lam_scale=0.1,
                 group_size=None, random_state=0):
        self.structure = structure
        self.mode = mode
        self.gamma = gamma
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.lam = lam
        self.lam_scale = lam_scale
        self.group_size = group_size
        self.random_state = random_state

    def _input_transform(self):
        layers = getattr(self.structure, "layers", None)
        if layers and getattr(layers[0], "whiten_mean", None) is not None:
            return self.structure.input_transform()
        return None

    def fit(self, X, y):
        if self.structure is None:
            raise ValueError("a learned structure is required")
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        pre = self._input_transform()
        z = X if pre is None else whiten_apply(pre, X)
        layers = getattr(self.structure, "layers", self.structure)
        self.model_ = init_from_structure(layers, self.mode, len(self.classes_),
                                          seed=self.random_state, group_size=self.group_size,
                                          lam=self.lam, calibration=z, lam_scale=self.lam_scale)
        self.model_.input_transform = pre
        cfg = TrainConfig(self.gamma, self.epochs, self.batch_size, self.random_state,
                          self.weight_decay, self.momentum)
        self.model_, self.history_ = train(self.model_, z, codes, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if self.model_.input_transform is not None:
            X = whiten_apply(self.model_.input_transform, X)
        logits, _ = forward(self.model_, X)
        return logits

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
