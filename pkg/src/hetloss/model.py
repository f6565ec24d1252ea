"""Small fully-connected classifier trained on the heterogeneity loss.

The extractor is a stack of dense layers with a smooth activation whose last
layer emits the feature vector the center terms act on; a linear head turns
features into class logits. Adam and the two-stage schedule (high learning
rate to a best checkpoint, then a low-rate fine-tune resumed from it) live here
as well.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import Dataset, MiniBatch
from .loss import CenterStore, LossBreakdown, LossWeights, heterogeneity_loss
from .metrics import weighted_f1
from .sampler import minibatch_iter

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z, a: 1.0 / (1.0 + np.exp(-z))),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


@dataclass
class ModelParams:
    """Extractor layers ``(weights[i], biases[i])`` plus the linear head ``(W, b)``.

    Layer weights are ``(out, in)``; the last extractor layer has width ``d``,
    the feature dimension shared with the center store.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    W: np.ndarray
    b: np.ndarray
    activation: str = "tanh"
    feature_activation: bool = False

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        """Named views of every parameter array (mutating them mutates the model)."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{i}.W"] = w
            out[f"layer{i}.b"] = b
        out["head.W"] = self.W
        out["head.b"] = self.b
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           self.W.copy(), self.b.copy(), self.activation, self.feature_activation)


def init_params(input_dim: int, hidden: tuple[int, ...], feature_dim: int, n_classes: int,
                seed: int, activation: str = "tanh", feature_activation: bool = False) -> ModelParams:
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, feature_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    W = rng.standard_normal((n_classes, feature_dim)) / math.sqrt(feature_dim)
    return ModelParams(weights, biases, W, np.zeros(n_classes), activation, feature_activation)


@dataclass
class Forward:
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    cache: list = field(default_factory=list, repr=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ModelParams, inputs) -> Forward:
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ValueError(f"expected inputs of shape (m, {params.input_dim}), got {X.shape}")
    act, _ = _ACTIVATIONS[params.activation]
    cache = []
    h = X
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        a = act(z) if (i < last or params.feature_activation) else z
        cache.append((h, z, a))
        h = a
    logits = h @ params.W.T + params.b
    return Forward(h, logits, softmax(logits), cache)


def backward(params: ModelParams, fwd: Forward, batch: MiniBatch, centers: CenterStore,
             weights: LossWeights, subject_class) -> tuple[dict[str, np.ndarray], LossBreakdown]:
    """Gradients of the heterogeneity loss for every model parameter and both center sets.

    ``fwd`` must come from :func:`forward` on the rows of ``batch``.
    """
    br = heterogeneity_loss(batch, fwd.features, (params.W, params.b), centers, weights,
                            subject_class=subject_class)
    g = br.gradients
    grads = {"head.W": g["W"], "head.b": g["b"]}
    _, dact = _ACTIVATIONS[params.activation]
    delta = g["features"]
    last = len(params.weights) - 1
    for i in range(last, -1, -1):
        h_in, z, a = fwd.cache[i]
        if i < last or params.feature_activation:
            delta = delta * dact(z, a)
        grads[f"layer{i}.W"] = delta.T @ h_in
        grads[f"layer{i}.b"] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params.weights[i]
    grads["centers.class"] = g["class_centers"]
    grads["centers.subject"] = g["subject_centers"]
    return grads, br


def trainable(params: ModelParams, centers: CenterStore) -> dict[str, np.ndarray]:
    out = params.arrays()
    out["centers.class"] = centers.class_centers
    out["centers.subject"] = centers.subject_centers
    return out


# -- optimizer --------------------------------------------------------------

class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray], **hyper) -> "OptimState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, **hyper)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState,
              lr: float) -> tuple[dict[str, np.ndarray], OptimState]:
    """In-place bias-corrected Adam update.

    Raises :class:`NonFiniteGradient` (leaving params and state untouched) if
    any gradient entry is NaN or infinite.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {', '.join(bad)}")
    for k in params:
        if state.m[k].shape != params[k].shape:
            raise ValueError(f"optimizer state for {k} has shape {state.m[k].shape}, expected {params[k].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    stage1_lr: float = 1e-3
    stage2_lr: float = 1e-5
    batch_size: int = 16
    lambda1: float = 0.05
    lambda2: float = 0.05
    lambda3: float = 0.005
    stage1_epochs: int = 60
    stage2_epochs: int = 20
    patience: int = 10
    seed: int = 0
    hidden: tuple[int, ...] = (32, 32)
    feature_dim: int = 16
    activation: str = "tanh"
    feature_activation: bool = False
    grad_clip: float = 10.0
    center_init_scale: float = 0.01

    def __post_init__(self):
        if not (self.stage1_lr > 0 and self.stage2_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        LossWeights(self.lambda1, self.lambda2, self.lambda3)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Checkpoint:
    params: ModelParams
    centers: CenterStore
    config: TrainConfig
    stage: int = 0
    epoch: int = 0
    val_f1: float = float("nan")

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.params.copy(), self.centers.copy(), self.config,
                          self.stage, self.epoch, self.val_f1)


@dataclass
class EpochRecord:
    step: int
    stage: int
    epoch: int
    ce: float
    class_center: float
    subject_center: float
    subject_class: float
    total: float
    val_f1: float
    val_accuracy: float

    def loss_row(self):
        return (self.step, self.ce, self.class_center, self.subject_center, self.subject_class, self.total)


@dataclass
class TrainResult:
    best: Checkpoint
    stage1_best: Checkpoint
    history: list[EpochRecord]
    aborted: list[str] = field(default_factory=list)


def _evaluate(params: ModelParams, ds: Dataset, idx: np.ndarray) -> tuple[float, float]:
    pred = np.argmax(forward(params, ds.features[idx]).logits, axis=1)
    res = weighted_f1(pred, ds.classes[idx], n_classes=ds.n_classes)
    return res.weighted_f1, res.accuracy


def _run_stage(ckpt: Checkpoint, ds: Dataset, train_idx, val_idx, cfg: TrainConfig, stage: int,
               lr: float, max_epochs: int, history: list[EpochRecord], aborted: list[str]) -> Checkpoint:
    params = ckpt.params.copy()
    centers = ckpt.centers.copy()
    weights = cfg.loss_weights
    arrays = trainable(params, centers)
    state = OptimState.zeros_like(arrays)
    best = Checkpoint(params.copy(), centers.copy(), cfg, stage, 0, ckpt.val_f1)
    since_best = 0
    for epoch in range(1, max_epochs + 1):
        sums = np.zeros(5)
        n_batches = 0
        failed = None
        for batch in minibatch_iter(ds, train_idx, cfg.batch_size, seed=cfg.seed + 7919 * stage, epoch=epoch):
            fwd = forward(params, ds.features[batch.indices])
            grads, br = backward(params, fwd, batch, centers, weights, ds.subject_class)
            if not np.isfinite(br.total):
                failed = f"stage {stage} epoch {epoch}: non-finite loss"
                break
            clip_global_norm(grads, cfg.grad_clip)
            try:
                adam_step(arrays, grads, state, lr)
            except NonFiniteGradient as exc:
                failed = f"stage {stage} epoch {epoch}: {exc}"
                break
            sums += br.row()
            n_batches += 1
        if failed:
            log.warning("%s; keeping last good checkpoint", failed)
            aborted.append(failed)
            break
        means = sums / max(n_batches, 1)
        f1, acc = _evaluate(params, ds, val_idx)
        history.append(EpochRecord(len(history) + 1, stage, epoch, *means.tolist(), f1, acc))
        log.debug("stage %d epoch %d total %.4f val_f1 %.4f", stage, epoch, means[-1], f1)
        if not f1 <= best.val_f1:  # strict improvement, and handles the NaN start
            best = Checkpoint(params.copy(), centers.copy(), cfg, stage, epoch, f1)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    return best


def train_two_stage(config: TrainConfig, ds: Dataset, train_idx, val_idx,
                    weights: LossWeights | None = None) -> TrainResult:
    """Stage 1 at ``stage1_lr`` with early stopping on validation weighted-F1,
    then stage 2 at ``stage2_lr`` resumed from the stage-1 best checkpoint.

    Both stages start a fresh Adam state. The returned ``best`` is the
    checkpoint with the highest validation weighted-F1 over both stages.
    """
    if weights is not None:
        config = replace(config, lambda1=weights.lambda1, lambda2=weights.lambda2, lambda3=weights.lambda3)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if np.intersect1d(train_idx, val_idx).size:
        raise ValueError("train and validation sets overlap")
    params = init_params(ds.dim, config.hidden, config.feature_dim, ds.n_classes, config.seed,
                         config.activation, config.feature_activation)
    centers = CenterStore.init(ds.n_classes, ds.n_subjects, config.feature_dim,
                               seed=config.seed + 1, scale=config.center_init_scale)
    start = Checkpoint(params, centers, config, 0, 0, float("nan"))
    history: list[EpochRecord] = []
    aborted: list[str] = []
    best1 = _run_stage(start, ds, train_idx, val_idx, config, 1, config.stage1_lr,
                       config.stage1_epochs, history, aborted)
    best2 = _run_stage(best1, ds, train_idx, val_idx, config, 2, config.stage2_lr,
                       config.stage2_epochs, history, aborted)
    best = best2 if best2.val_f1 > best1.val_f1 else best1
    return TrainResult(best, best1, history, aborted)


def predict_proba(params: ModelParams, inputs, views: int = 1, jitter: float = 0.0, seed: int = 0) -> np.ndarray:
    """Average softmax confidences over ``views`` copies of each input.

    View 0 is the clean input; views 1.. add seeded N(0, jitter^2) noise.
    ``views=1`` or ``jitter=0`` is the plain forward pass.
    """
    if views < 1:
        raise ValueError("views must be >= 1")
    X = np.asarray(inputs, dtype=np.float64)
    probs = forward(params, X).probs
    if views == 1 or jitter == 0:
        return probs
    rng = np.random.default_rng(seed)
    total = probs.copy()
    for _ in range(views - 1):
        total += forward(params, X + rng.standard_normal(X.shape) * jitter).probs
    out = total / views
    return out / out.sum(axis=1, keepdims=True)


# -- checkpoint files -------------------------------------------------------

def _pack(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.reshape(-1)]}


def _unpack(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    arrays = trainable(ckpt.params, ckpt.centers)
    return {
        "format": "hetloss-checkpoint",
        "version": CHECKPOINT_VERSION,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "val_f1": None if math.isnan(ckpt.val_f1) else ckpt.val_f1,
        "activation": ckpt.params.activation,
        "feature_activation": ckpt.params.feature_activation,
        "n_layers": len(ckpt.params.weights),
        "config": ckpt.config.to_dict(),
        "arrays": {k: _pack(v) for k, v in arrays.items()},
    }


def checkpoint_from_dict(data: dict) -> Checkpoint:
    if data.get("format") != "hetloss-checkpoint" or data.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a supported checkpoint")
    arrays = {k: _unpack(v) for k, v in data["arrays"].items()}
    n = int(data["n_layers"])
    params = ModelParams(
        [arrays[f"layer{i}.W"] for i in range(n)],
        [arrays[f"layer{i}.b"] for i in range(n)],
        arrays["head.W"], arrays["head.b"],
        data["activation"], bool(data["feature_activation"]),
    )
    centers = CenterStore(arrays["centers.class"], arrays["centers.subject"])
    cfg = data["config"]
    cfg = dict(cfg, hidden=tuple(cfg["hidden"]))
    val = data["val_f1"]
    return Checkpoint(params, centers, TrainConfig.from_dict(cfg), int(data["stage"]), int(data["epoch"]),
                      float("nan") if val is None else float(val))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_to_dict(ckpt), sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_dict(json.loads(Path(path).read_text()))
