"""Expected input-gradient extraction: backpropagation or difference quotients against an oracle."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn import Model, whitebox_gradient
from .watermark import VerificationPolicy, VerificationReport, WatermarkKey, decode, verify

PROB_FLOOR = 1e-12


class OracleError(RuntimeError):
    pass


class ExtractionError(RuntimeError):
    def __init__(self, message: str, queries: int = 0):
        super().__init__(message)
        self.queries = queries


class PredictionOracle:
    """Black-box access to a classifier: input in, class probabilities out.

    ``queries`` counts inputs answered by the underlying model. Tampering
    wrappers forward the count of the oracle they wrap.
    """

    num_classes: int
    input_shape: tuple[int, ...]

    def __init__(self, num_classes: int, input_shape):
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self._count = 0
        self._lock = threading.Lock()

    @property
    def queries(self) -> int:
        return self._count

    def _tick(self, n: int = 1) -> None:
        with self._lock:
            self._count += n

    def query(self, x) -> np.ndarray:
        return self.query_batch(np.asarray(x, dtype=np.float64)[None])[0]

    def query_batch(self, xs) -> np.ndarray:
        raise NotImplementedError


class ModelOracle(PredictionOracle):
    """In-process oracle; each input is evaluated as its own one-row batch so answers don't depend on batching."""

    def __init__(self, model: Model):
        super().__init__(model.num_classes, model.input_shape)
        self.model = model

    def query_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64).reshape((-1,) + self.input_shape)
        out = np.stack([self.model.predict(x[None])[0] for x in xs])
        self._tick(len(xs))
        return out


class FunctionOracle(PredictionOracle):
    """Oracle around a plain ``x -> probabilities`` callable (test doubles, analytic oracles)."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], num_classes: int, input_shape):
        super().__init__(num_classes, input_shape)
        self.fn = fn

    def query_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64).reshape((-1,) + self.input_shape)
        out = np.stack([np.asarray(self.fn(x), dtype=np.float64) for x in xs])
        self._tick(len(xs))
        return out


class OracleWrapper(PredictionOracle):
    """Base for oracles that transform another oracle's inputs or outputs."""

    def __init__(self, inner: PredictionOracle):
        self.inner = inner
        self.num_classes = inner.num_classes
        self.input_shape = inner.input_shape
        self._lock = threading.Lock()

    @property
    def queries(self) -> int:
        return self.inner.queries


@dataclass
class GradientEstimate:
    values: np.ndarray
    mode: str
    samples: int
    h: float | None = None
    query_count: int = 0
    meta: dict = field(default_factory=dict)

    def extraction_meta(self) -> dict:
        return {"mode": self.mode, "s": self.samples, "h": self.h, "query_count": self.query_count}


def _check_samples(samples, labels, key: WatermarkKey) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        raise ExtractionError("no key samples")
    if labels is not None and np.any(np.asarray(labels) != key.target):
        raise ExtractionError(f"key samples must all belong to the target class {key.target}")
    return samples


def whitebox_expected_gradient(model: Model, key: WatermarkKey, samples, labels=None) -> GradientEstimate:
    """Exact mean input gradient over the carriers by backpropagation."""
    samples = _check_samples(samples, labels, key)
    if model.config.input_dim != key.input_dim:
        raise ExtractionError(f"key is for input_dim {key.input_dim}, model has {model.config.input_dim}")
    g = whitebox_gradient(model, samples, key.target)[key.carriers]
    return GradientEstimate(g, "exact", len(samples), None, 0)


def blackbox_estimate_gradient(oracle: PredictionOracle, key: WatermarkKey, samples, h: float = 1e-4, labels=None) -> GradientEstimate:
    """Forward-difference estimate of the mean carrier gradient of -log p_T.

    Per sample one query at ``x`` and one at ``x + h e_c`` for every carrier,
    ``s * (|C| + 1)`` queries in total. Perturbed inputs are not clipped; the
    carriers pushed above 1 are counted in ``meta["boundary"]``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    samples = _check_samples(samples, labels, key)
    if int(np.prod(samples.shape[1:])) != key.input_dim:
        raise ExtractionError(f"samples have {np.prod(samples.shape[1:])} inputs, key expects {key.input_dim}")
    flat_shape = samples.shape[1:]
    total = np.zeros(key.carrier_size)
    issued = 0
    boundary = 0
    rows = np.arange(key.carrier_size)
    for x in samples:
        flat = x.reshape(-1)
        batch = np.tile(flat, (key.carrier_size + 1, 1))
        batch[rows + 1, key.carriers] += h
        boundary += int(np.count_nonzero(flat[key.carriers] + h > 1.0))
        try:
            probs = np.asarray(oracle.query_batch(batch.reshape((-1,) + flat_shape)))
        except Exception as exc:
            raise ExtractionError(f"oracle failed after {issued} queries: {exc}", issued) from exc
        issued += len(batch)
        if probs.shape != (len(batch), oracle.num_classes):
            raise ExtractionError(f"oracle returned shape {probs.shape}", issued)
        p = probs[:, key.target]
        if not np.all(np.isfinite(p)):
            raise ExtractionError("oracle returned non-finite probabilities", issued)
        j = -np.log(np.maximum(p, PROB_FLOOR))
        total += (j[1:] - j[0]) / h
    return GradientEstimate(total / len(samples), "zeroth_order", len(samples), h, issued, {"boundary": boundary})


def extract_watermark(estimate: GradientEstimate, key: WatermarkKey) -> np.ndarray:
    if len(estimate.values) != key.carrier_size:
        raise ExtractionError(f"estimate has {len(estimate.values)} carriers, key has {key.carrier_size}")
    return decode(estimate.values, key)


def verify_estimate(estimate: GradientEstimate, key: WatermarkKey, policy: VerificationPolicy | None = None) -> VerificationReport:
    if len(estimate.values) != key.carrier_size:
        raise ExtractionError(f"estimate has {len(estimate.values)} carriers, key has {key.carrier_size}")
    return verify(estimate.values, key, policy, estimate.extraction_meta())


def select_key_samples(dataset, key: WatermarkKey, count: int, seed: int = 0) -> np.ndarray:
    """``count`` target-class samples in a seeded order (all of them if fewer exist)."""
    pool = dataset.images[dataset.labels == key.target]
    if len(pool) == 0:
        raise ExtractionError(f"dataset has no samples of target class {key.target}")
    order = np.random.default_rng(seed).permutation(len(pool))
    return pool[order[:count]]


def oracle_accuracy(oracle: PredictionOracle, dataset) -> float:
    """Top-1 accuracy of the answers an oracle gives on ``dataset``."""
    probs = oracle.query_batch(dataset.images)
    return float(np.mean(np.argmax(probs, axis=1) == dataset.labels))
