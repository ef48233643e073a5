"""Counter-watermark attacks: model, input and output tampering, and forging."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset, split, subsample_per_class
from .extraction import OracleWrapper, PredictionOracle, whitebox_expected_gradient
from .nn import Model, TrainConfig, train, training_besr
from .watermark import VerificationPolicy, WatermarkKey, besr, decode, verify

log = logging.getLogger(__name__)

PRUNING_RATES = tuple(round(0.1 * i, 1) for i in range(10))


# model tampering -------------------------------------------------------------

def _is_weight(name: str) -> bool:
    return not name.endswith(".bias")


def prune(model: Model, rate: float) -> Model:
    """Zero the ``floor(rate * #weights)`` smallest-magnitude weights across all layers.

    Biases are exempt. The returned model carries 0/1 masks that keep the
    pruned weights at zero during later training.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("pruning rate must be in [0, 1)")
    model = model.copy()
    names = [n for n in model.params if _is_weight(n)]
    flat = np.concatenate([np.abs(model.params[n]).reshape(-1) for n in names])
    k = int(np.floor(rate * flat.size))
    keep = np.ones(flat.size, dtype=bool)
    if k:
        # stable sort: ties broken by position, so pruning is deterministic
        keep[np.argsort(flat, kind="stable")[:k]] = False
    masks = dict(model.masks or {})
    offset = 0
    for n in names:
        size = model.params[n].size
        mask = keep[offset:offset + size].reshape(model.params[n].shape).astype(np.float64)
        if n in masks:
            mask = mask * masks[n]
        masks[n] = mask
        model.params[n] = model.params[n] * mask
        offset += size
    model.masks = masks
    return model


@dataclass
class FineTuneConfig:
    epochs: int = 10
    learning_rate: float = 0.0005
    batch_size: int = 64
    optimizer: str = "sgd-momentum"
    early_stopping: bool = True
    patience: int = 3
    train_fraction: float = 0.7
    seed: int = 0


def fine_tune(model: Model, adversary: Dataset, cfg: FineTuneConfig | None = None) -> Model:
    """Cross-entropy retraining on 70% of the adversary's data, keeping the weights with the best accuracy on the other 30%."""
    cfg = cfg or FineTuneConfig()
    tr, va = split(adversary, [cfg.train_fraction, 1.0 - cfg.train_fraction], seed=cfg.seed)
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("adversary split is empty")
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, optimizer=cfg.optimizer, seed=cfg.seed)
    tuned, _ = train(model, tr, tc, val=va, early_stopping=cfg.patience if cfg.early_stopping else None)
    return tuned


def quantize(model: Model, bits: int = 8) -> Model:
    """Per-tensor symmetric fixed point: w -> round(w / s) * s with s = max|w| / (2^(bits-1) - 1)."""
    if not 2 <= bits <= 16:
        raise ValueError("bits must be in [2, 16]")
    model = model.copy()
    levels = 2 ** (bits - 1) - 1
    for name, w in model.params.items():
        peak = np.max(np.abs(w)) if w.size else 0.0
        if peak == 0.0:
            continue
        scale = peak / levels
        model.params[name] = np.round(w / scale) * scale
    model.metadata = dict(model.metadata, quantized_bits=bits)
    return model


def fgsm(model: Model, x, y, eps: float) -> np.ndarray:
    """clip(x + eps * sign(d CE / dx), 0, 1), per sample."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if eps == 0:
        return x.copy()
    xt = ad.Tensor(x, requires_grad=True)
    loss = ad.softmax_cross_entropy(model.logits(xt), y, reduction="sum")
    (gx,) = ad.grad(loss, [xt])
    return np.clip(x + eps * np.sign(gx.data), 0.0, 1.0)


def adversarial_fine_tune(
    model: Model,
    dataset: Dataset,
    epochs: int = 5,
    eps: float = 0.1,
    learning_rate: float = 0.0005,
    batch_size: int = 64,
    seed: int = 0,
) -> Model:
    """Fine-tune on batches that pair every clean sample with its FGSM counterpart (correct labels)."""

    def mix(current: Model, xb, yb):
        adv = fgsm(current, xb, yb, eps)
        return np.concatenate([xb, adv]), np.concatenate([yb, yb])

    tc = TrainConfig(epochs=epochs, batch_size=batch_size, learning_rate=learning_rate, seed=seed)
    tuned, _ = train(model, dataset, tc, batch_transform=mix)
    return tuned


# input / output tampering oracles ----------------------------------------------

class NoisyOracle(OracleWrapper):
    """Adds N(0, sigma^2) noise to every pixel of every query, then clips to [0, 1]."""

    def __init__(self, inner: PredictionOracle, sigma: float, seed: int = 0):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        super().__init__(inner)
        self.sigma = sigma
        self.rng = np.random.default_rng(seed)

    def query_batch(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if self.sigma > 0:
            with self._lock:
                noise = self.rng.normal(0.0, self.sigma, size=xs.shape)
            xs = np.clip(xs + noise, 0.0, 1.0)
        return self.inner.query_batch(xs)


def round_half_away(p, decimals: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    scale = 10.0 ** decimals
    return np.sign(p) * np.floor(np.abs(p) * scale + 0.5) / scale


class RoundingOracle(OracleWrapper):
    """Reports probabilities rounded (half away from zero) to ``decimals`` places, without renormalising."""

    def __init__(self, inner: PredictionOracle, decimals: int):
        if decimals < 0:
            raise ValueError("decimals must be non-negative")
        super().__init__(inner)
        self.decimals = decimals

    def query_batch(self, xs) -> np.ndarray:
        return round_half_away(self.inner.query_batch(xs), self.decimals)


def perturb_scores(p: np.ndarray, m: int, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Move phi ~ U(0, tau] of probability mass from the top-1 class to the least likely one.

    tau = min(p_top1 - p_top2, p_topM - p_last) - eps keeps the order of the
    top ``m`` labels; when tau <= 0 the scores are returned unchanged.
    """
    p = np.array(p, dtype=np.float64)
    if len(p) < m + 1:
        raise ValueError(f"need at least {m + 1} classes")
    order = np.argsort(-p, kind="stable")
    top, last = order[0], order[-1]
    tau = min(p[order[0]] - p[order[1]], p[order[m - 1]] - p[last]) - eps
    if tau <= 0:
        return p
    phi = tau - rng.uniform(0.0, tau)  # (0, tau]
    p[top] -= phi
    p[last] += phi
    return p


class PerturbationOracle(OracleWrapper):
    def __init__(self, inner: PredictionOracle, m: int = 3, eps: float = 1e-5, seed: int = 0):
        if inner.num_classes < m + 1:
            raise ValueError(f"score perturbation with M={m} needs at least {m + 1} classes")
        super().__init__(inner)
        self.m = m
        self.eps = eps
        self.rng = np.random.default_rng(seed)

    def query_batch(self, xs) -> np.ndarray:
        probs = self.inner.query_batch(xs)
        with self._lock:
            return np.stack([perturb_scores(p, self.m, self.eps, self.rng) for p in probs])


def noisy_oracle(inner: PredictionOracle, sigma: float, seed: int = 0) -> NoisyOracle:
    return NoisyOracle(inner, sigma, seed)


def rounding_oracle(inner: PredictionOracle, decimals: int) -> RoundingOracle:
    return RoundingOracle(inner, decimals)


def perturbation_oracle(inner: PredictionOracle, m: int = 3, eps: float = 1e-5, seed: int = 0) -> PerturbationOracle:
    return PerturbationOracle(inner, m, eps, seed)


def parse_wrapper(spec: str) -> dict:
    """``noise:0.01`` | ``round:1`` | ``perturb:3,1e-5,7`` -> dict description."""
    kind, _, arg = spec.partition(":")
    if kind == "noise":
        sigma, _, seed = arg.partition(",")
        return {"kind": "noise", "sigma": float(sigma), "seed": int(seed or 0)}
    if kind == "round":
        return {"kind": "round", "decimals": int(arg)}
    if kind == "perturb":
        parts = [p for p in arg.split(",") if p]
        m = int(parts[0]) if parts else 3
        eps = float(parts[1]) if len(parts) > 1 else 1e-5
        seed = int(parts[2]) if len(parts) > 2 else 0
        return {"kind": "perturb", "m": m, "eps": eps, "seed": seed}
    raise ValueError(f"unknown wrapper {spec!r}; expected noise:σ, round:d or perturb:M,ε,seed")


def stack_oracles(base: PredictionOracle, wrappers: list[dict]) -> PredictionOracle:
    """Apply wrapper descriptions in order; the first wraps the base model."""
    oracle = base
    for w in wrappers:
        if w["kind"] == "noise":
            oracle = NoisyOracle(oracle, w["sigma"], w.get("seed", 0))
        elif w["kind"] == "round":
            oracle = RoundingOracle(oracle, w["decimals"])
        elif w["kind"] == "perturb":
            oracle = PerturbationOracle(oracle, w.get("m", 3), w.get("eps", 1e-5), w.get("seed", 0))
        else:
            raise ValueError(f"unknown wrapper kind {w['kind']!r}")
    return oracle


# forging ------------------------------------------------------------------------

@dataclass
class ForgeResult:
    besr: float
    accuracy_delta: float
    trials: list[dict] = field(default_factory=list)


def forge(
    pretrained: Model,
    counterfeit: WatermarkKey,
    sub_dataset: Dataset,
    test: Dataset,
    probe: np.ndarray,
    train_cfg: TrainConfig,
    lambdas,
    epochs: int = 80,
) -> ForgeResult:
    """Retrain a stolen model to carry ``counterfeit`` and report the best BESR over the lambda trials.

    BESR is measured on ``probe``: target-class samples the forger did not
    train on, i.e. what a third-party verifier would use.
    """
    if not np.any(sub_dataset.labels == counterfeit.target):
        raise ValueError(f"no samples of counterfeit target class {counterfeit.target}")
    base_acc = pretrained.accuracy(test)
    trials = []
    for lam in lambdas:
        cfg = TrainConfig(**{**asdict(train_cfg), "epochs": epochs, "lam": float(lam)})
        forged, _ = train(pretrained, sub_dataset, cfg, counterfeit)
        est = whitebox_expected_gradient(forged, counterfeit, probe)
        trials.append(
            {
                "lambda": float(lam),
                "besr": besr(decode(est.values, counterfeit), counterfeit.bits),
                "train_besr": training_besr(forged, sub_dataset, counterfeit),
                "test_acc": forged.accuracy(test),
                "accuracy_delta": forged.accuracy(test) - base_acc,
            }
        )
        log.info("forge trial %s", trials[-1])
    best = max(trials, key=lambda t: (t["besr"], t["accuracy_delta"]))
    return ForgeResult(best["besr"], best["accuracy_delta"], trials)


def forging_lambdas(lam: float) -> list[float]:
    return [min(1.0, v) for v in (lam / 2, lam, lam * 2)]


# robustness sweep ----------------------------------------------------------------

def retains_accuracy(acc: float, baseline: float, tolerance: float = 0.10) -> bool:
    """An attack only counts if accuracy stays above (1 - tolerance) of the baseline."""
    return acc >= (1.0 - tolerance) * baseline


@dataclass
class RobustnessReport:
    baseline_acc: float
    cells: list[dict]
    tolerance: float = 0.10

    @property
    def retained(self) -> list[dict]:
        return [c for c in self.cells if c["retained"]]

    def min_watermark_accuracy(self, attack: str | None = None) -> float:
        cells = [c for c in self.retained if attack is None or c["attack"] == attack]
        return min((c["watermark_acc"] for c in cells), default=float("nan"))

    def all_retained_verified(self, attack: str | None = None) -> bool:
        return all(c["verified"] for c in self.retained if attack is None or c["attack"] == attack)

    def to_dict(self) -> dict:
        return {"baseline_acc": self.baseline_acc, "tolerance": self.tolerance, "cells": self.cells}


def robustness_sweep(
    marked: Model,
    key: WatermarkKey,
    key_samples: np.ndarray,
    adversary_pool: Dataset,
    test: Dataset,
    sizes=(64, 256, 1024),
    rates=PRUNING_RATES,
    ft_cfg: FineTuneConfig | None = None,
    policy: VerificationPolicy | None = None,
    seed: int = 0,
    tolerance: float = 0.10,
) -> RobustnessReport:
    """Prune at every rate, fine-tune on adversary subsets of each size, and verify (white-box).

    Requested sizes above the pool's smallest class are capped to it; the
    cell records both numbers.
    """
    ft_cfg = ft_cfg or FineTuneConfig(seed=seed)
    baseline = marked.accuracy(test)
    per_class = int(adversary_pool.class_counts().min())
    cells = []
    for size in sizes:
        used = min(size, per_class)
        adversary = subsample_per_class(adversary_pool, used, seed=seed + size)
        for rate in rates:
            attacked = fine_tune(prune(marked, rate), adversary, ft_cfg)
            acc = attacked.accuracy(test)
            est = whitebox_expected_gradient(attacked, key, key_samples)
            rep = verify(est.values, key, policy, est.extraction_meta())
            cells.append(
                {
                    "attack": "prune+finetune",
                    "rate": rate,
                    "size": size,
                    "size_used": used,
                    "test_acc": acc,
                    "watermark_acc": rep.watermark_accuracy,
                    "n_error": rep.n_error,
                    "verified": rep.verified,
                    "retained": retains_accuracy(acc, baseline, tolerance),
                }
            )
            log.info("sweep cell %s", cells[-1])
    return RobustnessReport(baseline, cells, tolerance)
