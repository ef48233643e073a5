"""Watermark keys, the embedding regularizer, decoding and the binomial verifier."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad

KEY_FORMAT_VERSION = 1
DEFAULT_TAU = 3e-3
DIGEST_ALGORITHM = "sha256-ctr"


class KeyMaterialError(ValueError):
    """Invalid key material or key/model mismatch."""


@dataclass(eq=False)
class WatermarkKey:
    """The owner's secret: bits ``b``, carrier coordinates ``C``, embedding matrix ``K`` and target class ``T``."""

    bits: np.ndarray
    carriers: np.ndarray
    matrix: np.ndarray
    target: int
    input_dim: int
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int64)
        self.carriers = np.asarray(self.carriers, dtype=np.int64)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        n, c = len(self.bits), len(self.carriers)
        if n < 1 or not np.all((self.bits == 0) | (self.bits == 1)):
            raise KeyMaterialError("bits must be a non-empty 0/1 vector")
        if self.matrix.shape != (n, c):
            raise KeyMaterialError(f"embedding matrix is {self.matrix.shape}, expected {(n, c)}")
        if np.any(np.abs(self.matrix) > 1.0):
            raise KeyMaterialError("embedding matrix entries must lie in [-1, 1]")
        if c and (np.any(np.diff(self.carriers) <= 0) or self.carriers[0] < 0 or self.carriers[-1] >= self.input_dim):
            raise KeyMaterialError("carriers must be sorted, distinct and below input_dim")
        if not 0 <= self.target < self.num_classes:
            raise KeyMaterialError(f"target class {self.target} outside [0, {self.num_classes})")

    @property
    def n_bits(self) -> int:
        return len(self.bits)

    @property
    def carrier_size(self) -> int:
        return len(self.carriers)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WatermarkKey):
            return NotImplemented
        return (
            np.array_equal(self.bits, other.bits)
            and np.array_equal(self.carriers, other.carriers)
            and np.array_equal(self.matrix, other.matrix)
            and (self.target, self.input_dim, self.num_classes) == (other.target, other.input_dim, other.num_classes)
        )

    def to_dict(self) -> dict:
        return {
            "format_version": KEY_FORMAT_VERSION,
            "N": self.n_bits,
            "T": int(self.target),
            "input_dim": int(self.input_dim),
            "num_classes": int(self.num_classes),
            "carrier_indices": [int(c) for c in self.carriers],
            "K": [float(v) for v in self.matrix.reshape(-1)],
            "b": "".join(str(int(v)) for v in self.bits),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkKey":
        if d.get("format_version") != KEY_FORMAT_VERSION:
            raise KeyMaterialError(f"unsupported key format version {d.get('format_version')}")
        n = int(d["N"])
        bits = np.array([int(ch) for ch in d["b"]], dtype=np.int64)
        if len(bits) != n:
            raise KeyMaterialError("bit string length does not match N")
        carriers = np.asarray(d["carrier_indices"], dtype=np.int64)
        matrix = np.asarray(d["K"], dtype=np.float64).reshape(n, len(carriers))
        return cls(bits, carriers, matrix, int(d["T"]), int(d["input_dim"]), int(d["num_classes"]), d.get("provenance", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "WatermarkKey":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_sizes(n_bits: int, carrier_size: int, input_dim: int, num_classes: int) -> None:
    if n_bits < 1:
        raise KeyMaterialError("need at least one watermark bit")
    if carrier_size < 1 or carrier_size > input_dim:
        raise KeyMaterialError(f"carrier size {carrier_size} must be in [1, input_dim={input_dim}]")
    if num_classes < 2:
        raise KeyMaterialError("need at least two classes")


def generate_key_random(n_bits: int, carrier_size: int, input_dim: int, num_classes: int, seed: int) -> WatermarkKey:
    _check_sizes(n_bits, carrier_size, input_dim, num_classes)
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=n_bits)
    carriers = np.sort(rng.choice(input_dim, size=carrier_size, replace=False))
    matrix = rng.uniform(-1.0, 1.0, size=(n_bits, carrier_size))
    target = int(rng.integers(num_classes))
    return WatermarkKey(bits, carriers, matrix, target, input_dim, num_classes, {"kind": "random", "seed": int(seed)})


class HashStream:
    """Deterministic byte stream: SHA-256(digest || counter) blocks."""

    def __init__(self, digest: bytes):
        self.digest = digest
        self.counter = 0
        self.buffer = b""

    def read(self, n: int) -> bytes:
        while len(self.buffer) < n:
            block = hashlib.sha256(self.digest + self.counter.to_bytes(8, "big")).digest()
            self.buffer += block
            self.counter += 1
        out, self.buffer = self.buffer[:n], self.buffer[n:]
        return out

    def uint64(self) -> int:
        return int.from_bytes(self.read(8), "big")

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection sampling."""
        limit = (1 << 64) - (1 << 64) % bound
        while True:
            v = self.uint64()
            if v < limit:
                return v % bound

    def unit(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.uint64() >> 11) * 2.0 ** -53


def generate_key_from_message(message: bytes | str, n_bits: int, carrier_size: int, input_dim: int, num_classes: int) -> WatermarkKey:
    """Derive every key component from a digest of an identifying message."""
    if isinstance(message, str):
        message = message.encode("utf-8")
    if not message:
        raise KeyMaterialError("message must be non-empty")
    _check_sizes(n_bits, carrier_size, input_dim, num_classes)
    digest = hashlib.sha256(message).digest()
    stream = HashStream(digest)
    bits = np.array([stream.below(2) for _ in range(n_bits)], dtype=np.int64)
    # partial Fisher-Yates shuffle picks the carriers
    pool = list(range(input_dim))
    for i in range(carrier_size):
        j = i + stream.below(input_dim - i)
        pool[i], pool[j] = pool[j], pool[i]
    carriers = np.sort(np.array(pool[:carrier_size], dtype=np.int64))
    matrix = np.array([2.0 * stream.unit() - 1.0 for _ in range(n_bits * carrier_size)]).reshape(n_bits, carrier_size)
    target = stream.below(num_classes)
    provenance = {
        "kind": "message",
        "digest_alg": DIGEST_ALGORITHM,
        "digest": digest.hex(),
        "message": message.decode("utf-8", errors="backslashreplace"),
        "message_hex": message.hex(),
    }
    return WatermarkKey(bits, carriers, matrix, target, input_dim, num_classes, provenance)


def audit_key(key: WatermarkKey) -> bool:
    """Re-derive a message-bound key from its recorded message and compare."""
    prov = key.provenance
    if prov.get("kind") != "message" or prov.get("digest_alg") != DIGEST_ALGORITHM:
        return False
    message = bytes.fromhex(prov["message_hex"])
    if hashlib.sha256(message).hexdigest() != prov.get("digest"):
        return False
    again = generate_key_from_message(message, key.n_bits, key.carrier_size, key.input_dim, key.num_classes)
    return again == key


_CLAMP = 1e-12


def embedding_loss(g, key: WatermarkKey) -> ad.Tensor:
    """Binary cross-entropy between sigmoid(K G) and the watermark bits, summed over bits.

    ``g`` is the expected gradient over the carrier coordinates (tensor or
    array); the result is differentiable with respect to it.
    """
    g = ad.as_tensor(g)
    if g.shape != (key.carrier_size,):
        raise KeyMaterialError(f"gradient has shape {g.shape}, key expects ({key.carrier_size},)")
    z = ad.matmul(ad.Tensor(key.matrix), ad.reshape(g, (key.carrier_size, 1)))
    z = ad.reshape(z, (key.n_bits,))
    y = ad.clip(ad.sigmoid(z), _CLAMP, 1.0 - _CLAMP)
    b = ad.Tensor(key.bits.astype(np.float64))
    terms = ad.add(ad.mul(b, ad.log(y)), ad.mul(ad.sub(1.0, b), ad.log(ad.sub(1.0, y))))
    return ad.neg(ad.sum(terms))


def margins(g_hat, key: WatermarkKey) -> np.ndarray:
    g_hat = np.asarray(g_hat, dtype=np.float64)
    if g_hat.shape != (key.carrier_size,):
        raise KeyMaterialError(f"gradient has shape {g_hat.shape}, key expects ({key.carrier_size},)")
    return key.matrix @ g_hat


def decode(g_hat, key: WatermarkKey) -> np.ndarray:
    """Bit j is 1 iff <K_j, G> >= 0."""
    return (margins(g_hat, key) >= 0.0).astype(np.int64)


def ber(decoded, bits) -> float:
    decoded, bits = np.asarray(decoded), np.asarray(bits)
    if decoded.shape != bits.shape:
        raise ValueError(f"length mismatch: {decoded.shape} vs {bits.shape}")
    return float(np.count_nonzero(decoded != bits)) / len(bits)


def besr(decoded, bits) -> float:
    return 1.0 - ber(decoded, bits)


def null_tail(n_bits: int, errors: int) -> Fraction:
    """P(n_error <= errors) for a null model (each bit right with probability 1/2), exactly."""
    if errors < 0:
        return Fraction(0)
    top = min(errors, n_bits)
    return Fraction(sum(math.comb(n_bits, k) for k in range(top + 1)), 2 ** n_bits)


def error_threshold(n_bits: int, tau: float = DEFAULT_TAU) -> int:
    """Largest eta with P(n_error <= eta | null) < tau; -1 if even a perfect match is not significant."""
    if n_bits < 1:
        raise ValueError("n_bits must be positive")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must be in (0, 1)")
    bound = Fraction(tau) * 2 ** n_bits
    cumulative = 0
    eta = -1
    for k in range(n_bits + 1):
        cumulative += math.comb(n_bits, k)
        if cumulative < bound:
            eta = k
        else:
            break
    return eta


@dataclass(frozen=True)
class VerificationPolicy:
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be in (0, 1)")


@dataclass
class VerificationReport:
    decoded: np.ndarray
    n_error: int
    n_bits: int
    eta: int
    tau: float
    p_value: float
    verified: bool
    extraction: dict = field(default_factory=dict)

    @property
    def ber(self) -> float:
        return self.n_error / self.n_bits

    @property
    def watermark_accuracy(self) -> float:
        return 1.0 - self.ber

    @property
    def min_correct(self) -> int:
        return self.n_bits - self.eta

    def to_dict(self) -> dict:
        return {
            "decoded": "".join(str(int(v)) for v in self.decoded),
            "n_error": self.n_error,
            "n_bits": self.n_bits,
            "ber": self.ber,
            "eta": self.eta,
            "min_correct": self.min_correct,
            "tau": self.tau,
            "p_value": self.p_value,
            "verified": self.verified,
            "extraction": self.extraction,
        }


def verify(g_hat, key: WatermarkKey, policy: VerificationPolicy | None = None, extraction: dict | None = None) -> VerificationReport:
    policy = policy or VerificationPolicy()
    decoded = decode(g_hat, key)
    n_error = int(np.count_nonzero(decoded != key.bits))
    eta = error_threshold(key.n_bits, policy.tau)
    p_value = float(null_tail(key.n_bits, n_error))
    return VerificationReport(
        decoded=decoded,
        n_error=n_error,
        n_bits=key.n_bits,
        eta=eta,
        tau=policy.tau,
        p_value=p_value,
        verified=n_error <= eta,
        extraction=dict(extraction or {}),
    )


@dataclass
class NullRateEstimate:
    n_bits: int
    trials: int
    hits: int
    exact: float
    ci_low: float
    ci_high: float

    @property
    def rate(self) -> float:
        return self.hits / self.trials


def null_false_positive_rate(n_bits: int, trials: int, seed: int = 0, carrier_size: int = 32,
                             tau: float = DEFAULT_TAU, chunk: int = 10_000) -> NullRateEstimate:
    """Monte Carlo rate at which a random key verifies against an unrelated random gradient.

    Each trial draws fresh bits, a fresh projection matrix and a Gaussian
    gradient. The interval is the exact (Clopper-Pearson) 95% binomial one.
    """
    from scipy.stats import binomtest

    rng = np.random.default_rng(seed)
    eta = error_threshold(n_bits, tau)
    hits = 0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        bits = rng.integers(0, 2, size=(m, n_bits))
        matrix = rng.uniform(-1.0, 1.0, size=(m, n_bits, carrier_size))
        g = rng.standard_normal((m, carrier_size))
        decoded = (np.einsum("tnc,tc->tn", matrix, g) >= 0.0).astype(np.int64)
        hits += int(np.count_nonzero((decoded != bits).sum(axis=1) <= eta))
        done += m
    ci = binomtest(hits, trials).proportion_ci(0.95, method="exact")
    return NullRateEstimate(n_bits, trials, hits, float(null_tail(n_bits, eta)), ci.low, ci.high)
