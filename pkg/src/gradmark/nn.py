"""Small classifiers (MLP / stride-1 CNN) and the watermark-aware training loop."""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import TYPE_CHECKING, Callable

import numpy as np

from . import autodiff as ad
from .data import Dataset

if TYPE_CHECKING:
    from .watermark import WatermarkKey

log = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "dense", "relu", "sigmoid", "flatten", "softmax")


class ModelConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    """Architecture description.

    ``layers`` is an ordered list of dicts, e.g. ``{"type": "conv", "k": 3,
    "filters": 32, "padding": "same"}``, ``{"type": "dense", "units": 10}``,
    ``{"type": "relu"}``, ``{"type": "flatten"}``; the last one must be
    ``{"type": "softmax"}``.
    """

    input_shape: tuple[int, int, int]
    layers: list[dict]
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.layers = [dict(layer) for layer in self.layers]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [dict(layer) for layer in self.layers],
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(tuple(d["input_shape"]), list(d["layers"]), int(d["num_classes"]), int(d.get("seed", 0)))

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))


def mlp_config(input_shape=(28, 28, 1), hidden=(128,), num_classes=10, seed=0, activation="relu") -> ModelConfig:
    layers: list[dict] = [{"type": "flatten"}]
    for units in hidden:
        layers += [{"type": "dense", "units": units}, {"type": activation}]
    layers += [{"type": "dense", "units": num_classes}, {"type": "softmax"}]
    return ModelConfig(tuple(input_shape), layers, num_classes, seed)


def svhn_preset(width: float = 1.0, input_shape=(32, 32, 3), num_classes=10, seed=0) -> ModelConfig:
    """Six 3x3 conv+ReLU layers (32, 32, 64, 64, 128, 128 filters) then dense 512 + softmax, scaled by ``width``."""
    layers: list[dict] = []
    for filters in (32, 32, 64, 64, 128, 128):
        layers += [{"type": "conv", "k": 3, "filters": max(1, int(round(filters * width))), "padding": "same"}, {"type": "relu"}]
    layers += [
        {"type": "flatten"},
        {"type": "dense", "units": max(1, int(round(512 * width)))},
        {"type": "relu"},
        {"type": "dense", "units": num_classes},
        {"type": "softmax"},
    ]
    return ModelConfig(tuple(input_shape), layers, num_classes, seed)


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, validating the layer stack."""
    if not config.layers or config.layers[-1].get("type") != "softmax":
        raise ModelConfigError("last layer must be softmax")
    h, w, c = config.input_shape
    shape: tuple[int, ...] = (h, w, c)
    out = []
    for i, layer in enumerate(config.layers):
        kind = layer.get("type")
        if kind not in LAYER_KINDS:
            raise ModelConfigError(f"layer {i}: unknown type {kind!r}")
        if kind == "conv":
            if len(shape) != 3:
                raise ModelConfigError(f"layer {i}: conv needs spatial input, got {shape}")
            k, f = int(layer["k"]), int(layer["filters"])
            padding = layer.get("padding", "valid")
            if padding not in ("valid", "same"):
                raise ModelConfigError(f"layer {i}: padding must be valid or same")
            if padding == "same":
                if k % 2 == 0:
                    raise ModelConfigError(f"layer {i}: same padding needs an odd kernel")
                ho, wo = shape[0], shape[1]
            else:
                ho, wo = shape[0] - k + 1, shape[1] - k + 1
            if ho <= 0 or wo <= 0:
                raise ModelConfigError(f"layer {i}: kernel {k} too large for {shape}")
            out.append((f"conv{i}.kernel", (k, k, shape[2], f), k * k * shape[2]))
            out.append((f"conv{i}.bias", (f,), 0))
            shape = (ho, wo, f)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1:
                raise ModelConfigError(f"layer {i}: dense needs flat input, add a flatten layer")
            units = int(layer["units"])
            out.append((f"dense{i}.weight", (shape[0], units), shape[0]))
            out.append((f"dense{i}.bias", (units,), 0))
            shape = (units,)
        elif kind == "softmax":
            if i != len(config.layers) - 1:
                raise ModelConfigError("softmax must be the last layer")
            if shape != (config.num_classes,):
                raise ModelConfigError(f"softmax input {shape} != ({config.num_classes},)")
    return out


class Model:
    """Parameters plus the architecture that consumes them."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.metadata: dict = {}
        # 0/1 arrays for pruned weights; training keeps masked entries at zero
        self.masks: dict[str, np.ndarray] | None = None

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.config.input_shape

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Model":
        clone = Model(copy.deepcopy(self.config), {k: v.copy() for k, v in self.params.items()})
        clone.metadata = copy.deepcopy(self.metadata)
        if self.masks is not None:
            clone.masks = {k: v.copy() for k, v in self.masks.items()}
        return clone

    def logits(self, x, params: dict | None = None) -> ad.Tensor:
        """Pre-softmax outputs for a batch; ``params`` may map names to tensors."""
        params = self.params if params is None else params
        h = ad.as_tensor(x)
        if h.shape[1:] != self.config.input_shape:
            raise ValueError(f"batch shape {h.shape} does not match input shape {self.config.input_shape}")
        for i, layer in enumerate(self.config.layers):
            kind = layer["type"]
            if kind == "conv":
                h = ad.conv2d(h, params[f"conv{i}.kernel"], params[f"conv{i}.bias"], layer.get("padding", "valid"))
            elif kind == "dense":
                h = ad.add(ad.matmul(h, params[f"dense{i}.weight"]), params[f"dense{i}.bias"])
            elif kind == "relu":
                h = ad.relu(h)
            elif kind == "sigmoid":
                h = ad.sigmoid(h)
            elif kind == "flatten":
                h = ad.reshape(h, (h.shape[0], -1))
        return h

    def predict(self, batch) -> np.ndarray:
        """Class probabilities, one row per sample."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.shape == self.config.input_shape:
            batch = batch[None]
        with ad.no_record():
            z = self.logits(batch).data
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def accuracy(self, dataset: Dataset, batch_size: int = 1000) -> float:
        if len(dataset) == 0:
            return float("nan")
        correct = 0
        for start in range(0, len(dataset), batch_size):
            p = self.predict(dataset.images[start:start + batch_size])
            correct += int((p.argmax(1) == dataset.labels[start:start + batch_size]).sum())
        return correct / len(dataset)


def build_model(config: ModelConfig) -> Model:
    """Initialise weights U(-sqrt(6/fan_in), sqrt(6/fan_in)) from ``config.seed``; biases start at zero."""
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, fan_in in _param_shapes(config):
        if fan_in:
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return Model(config, params)


def cross_entropy(probs, labels) -> float:
    """Mean negative log-probability of the labels; probabilities are clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(len(labels)), labels]
    if np.any(picked < 1e-12):
        warnings.warn("zero probability at label clamped to 1e-12", RuntimeWarning, stacklevel=2)
        picked = np.maximum(picked, 1e-12)
    return float(np.mean(-np.log(picked)))


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.05
    optimizer: str = "sgd-momentum"
    momentum: float = 0.9
    lam: float = 0.0
    wm_batch_size: int = 64
    seed: int = 0
    # epochs after which the learning rate is multiplied by ``lr_decay``
    lr_milestones: list[int] = field(default_factory=list)
    lr_decay: float = 0.1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("sgd", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.wm_batch_size < 1:
            raise ValueError("epochs, batch_size and wm_batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.learning_rate * self.lr_decay ** passed


@dataclass
class TrainMetrics:
    history: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.history[-1] if self.history else {}


def input_gradient(model: Model, x: ad.Tensor, label: int, params: dict | None = None, create_graph: bool = False) -> ad.Tensor:
    """Mean over the batch of d(cross-entropy)/d(input), flattened to (input_dim,)."""
    labels = np.full(x.shape[0], label, dtype=np.int64)
    loss = ad.softmax_cross_entropy(model.logits(x, params), labels, reduction="mean")
    (gx,) = ad.grad(loss, [x], create_graph=create_graph)
    # per-sample gradients are scaled by 1/m through the mean, so summing over
    # the batch gives their average
    return ad.sum(ad.reshape(gx, (x.shape[0], -1)), axis=0)


def embedding_objective(model: Model, params: dict, samples: np.ndarray, key: "WatermarkKey") -> tuple[ad.Tensor, ad.Tensor]:
    """(embedding loss, carrier gradient G) on a target-class batch, differentiable in ``params``."""
    from .watermark import embedding_loss

    x = ad.Tensor(samples, requires_grad=True)
    g_full = input_gradient(model, x, key.target, params, create_graph=True)
    g = ad.take(g_full, key.carriers, axis=0)
    return embedding_loss(g, key), g


def _loss_and_grads(model, params, xb, yb, key, wm_x, lam):
    logits = model.logits(xb, params)
    ce = ad.softmax_cross_entropy(logits, yb)
    total = ce
    emb_value = float("nan")
    if key is not None:
        emb, _ = embedding_objective(model, params, wm_x, key)
        emb_value = emb.item()
        total = ad.add(ce, ad.mul(emb, lam))
    names = list(params)
    grads = ad.grad(total, [params[n] for n in names])
    return ce.item(), emb_value, dict(zip(names, (g.data for g in grads)))


def train(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    key: "WatermarkKey | None" = None,
    *,
    val: Dataset | None = None,
    early_stopping: int | None = None,
    batch_transform: Callable | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Model, TrainMetrics]:
    """Minimise cross-entropy (+ ``cfg.lam`` times the embedding loss when ``key`` is given).

    The watermark term is computed on a fresh batch of ``cfg.wm_batch_size``
    target-class samples each step, drawn from a generator separate from the
    shuffling one so that ``lam == 0`` reproduces unmarked training exactly.

    Pruning masks on the model keep pruned weights at zero. With
    ``early_stopping=patience`` and a validation set, the parameters with the
    best validation accuracy are returned. ``batch_transform(model, x, y)``
    may replace each minibatch (adversarial mixing).
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    model = model.copy()
    masks = model.masks
    rng = np.random.default_rng(cfg.seed)
    wm_rng = np.random.default_rng([cfg.seed, 1])
    wm_pool = None
    if key is not None:
        wm_pool = dataset.images[dataset.labels == key.target]
        if len(wm_pool) == 0:
            raise ValueError(f"no samples of target class {key.target} in training set")
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    metrics = TrainMetrics()
    best = (-1.0, None)
    stale = 0
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        ce_sum, emb_sum, steps = 0.0, 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = dataset.images[idx], dataset.labels[idx]
            if batch_transform is not None:
                xb, yb = batch_transform(model, xb, yb)
            params = {k: ad.Tensor(v, requires_grad=True) for k, v in model.params.items()}
            wm_x = None
            if wm_pool is not None:
                pick = wm_rng.choice(len(wm_pool), size=min(cfg.wm_batch_size, len(wm_pool)), replace=False)
                wm_x = wm_pool[pick]
            try:
                ce, emb, grads = _loss_and_grads(model, params, xb, yb, key, wm_x, cfg.lam)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch} step {steps}: {exc}") from exc
            if not np.isfinite(ce):
                raise TrainingDiverged(f"epoch {epoch} step {steps}: loss is {ce}")
            for name, g in grads.items():
                if masks is not None and name in masks:
                    g = g * masks[name]
                if cfg.optimizer == "sgd-momentum":
                    velocity[name] = cfg.momentum * velocity[name] + g
                    step = velocity[name]
                else:
                    step = g
                model.params[name] = model.params[name] - lr * step
                if masks is not None and name in masks:
                    model.params[name] = model.params[name] * masks[name]
            ce_sum += ce
            emb_sum += emb if key is not None else 0.0
            steps += 1
        record = {
            "epoch": epoch + 1,
            "lr": lr,
            "ce": ce_sum / steps,
            "train_acc": model.accuracy(dataset),
        }
        if key is not None:
            record["embedding_loss"] = emb_sum / steps
            record["besr"] = training_besr(model, dataset, key)
        if val is not None:
            record["val_acc"] = model.accuracy(val)
        metrics.history.append(record)
        log.debug("epoch %s", record)
        if on_epoch is not None:
            on_epoch(record)
        if early_stopping is not None and val is not None:
            if record["val_acc"] > best[0]:
                best = (record["val_acc"], {k: v.copy() for k, v in model.params.items()})
                stale = 0
            else:
                stale += 1
                if stale >= early_stopping:
                    break
    model.metadata = {
        "epochs_run": len(metrics.history),
        "final_train_acc": metrics.final.get("train_acc"),
        "final_val_acc": metrics.final.get("val_acc"),
    }
    if early_stopping is not None and best[1] is not None:
        model.params = best[1]
        model.metadata["best_val_acc"] = best[0]
    return model, metrics


def training_besr(model: Model, dataset: Dataset, key: "WatermarkKey") -> float:
    """Fraction of bits decoded correctly from the white-box G over all target-class training samples."""
    from .watermark import ber, decode

    pool = dataset.images[dataset.labels == key.target]
    g = whitebox_gradient(model, pool, key.target)[key.carriers]
    return 1.0 - ber(decode(g, key), key.bits)


def whitebox_gradient(model: Model, samples: np.ndarray, label: int, chunk: int = 500) -> np.ndarray:
    """Mean input gradient of the cross-entropy over ``samples`` (flattened, all coordinates)."""
    total = np.zeros(model.config.input_dim)
    for start in range(0, len(samples), chunk):
        part = samples[start:start + chunk]
        x = ad.Tensor(part, requires_grad=True)
        g = input_gradient(model, x, label)
        total += g.data * len(part)
    return total / len(samples)


# the trade-off grid extends below 0.01: at desk scale the larger values cost
# several accuracy points while much smaller ones already embed every bit
LAMBDA_GRID = (1.0, 0.5, 0.1, 0.05, 0.01, 0.005, 0.002, 0.001)


@dataclass
class LambdaSelection:
    lam: float | None
    model: Model | None
    metrics: TrainMetrics | None
    trials: list[dict] = field(default_factory=list)


def select_lambda(model: Model, dataset: Dataset, cfg: TrainConfig, key: "WatermarkKey", grid=LAMBDA_GRID) -> LambdaSelection:
    """Train with each lambda from smallest to largest; keep the first that decodes every bit.

    Returns ``lam=None`` (and the last attempt's trials) when no value in the
    grid reaches BESR 1.0.
    """
    trials = []
    for lam in sorted(set(float(v) for v in grid)):
        marked, metrics = train(model, dataset, replace(cfg, lam=lam), key)
        score = training_besr(marked, dataset, key)
        trials.append({"lambda": lam, "besr": score, "train_acc": metrics.final.get("train_acc")})
        log.info("lambda trial %s", trials[-1])
        if score == 1.0:
            marked.metadata["lambda"] = lam
            return LambdaSelection(lam, marked, metrics, trials)
    return LambdaSelection(None, None, None, trials)
