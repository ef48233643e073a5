"""End-to-end evaluation: train, embed, extract, attack, and write a CSV/JSON report bundle.

An experiment is described by a JSON document (``ExperimentSpec``). Every
random choice is derived from the master seed, so re-running a spec
reproduces its CSV files byte for byte. Stage failures are recorded in the
manifest and the remaining stages still run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import (
    PRUNING_RATES,
    FineTuneConfig,
    adversarial_fine_tune,
    forge,
    forging_lambdas,
    quantize,
    retains_accuracy,
    robustness_sweep,
    stack_oracles,
)
from .data import Dataset, load_desk, load_idx, make_synthetic, split, subsample_per_class
from .extraction import (
    ModelOracle,
    blackbox_estimate_gradient,
    oracle_accuracy,
    select_key_samples,
    verify_estimate,
    whitebox_expected_gradient,
)
from .nn import LAMBDA_GRID, Model, ModelConfig, TrainConfig, build_model, mlp_config, select_lambda, train
from .watermark import (
    VerificationPolicy,
    WatermarkKey,
    error_threshold,
    generate_key_from_message,
    generate_key_random,
    null_false_positive_rate,
)

log = logging.getLogger(__name__)

# desk-benchmark defaults (digits, one hidden layer of 256 units)
DESK_HIDDEN = (256,)
DESK_TRAIN = {"epochs": 20, "batch_size": 64, "learning_rate": 0.05, "optimizer": "sgd-momentum",
              "momentum": 0.9, "wm_batch_size": 64, "lr_milestones": [10, 15], "lr_decay": 0.1}
DESK_CARRIERS = {16: 128, 32: 256, 64: 384}


def load_dataset(spec: dict) -> tuple[Dataset, Dataset]:
    """(train, test) from a dataset description.

    ``{"kind": "desk", "path": DIR}``,
    ``{"kind": "idx", "train": [IMAGES, LABELS], "test": [IMAGES, LABELS]}`` or
    ``{"kind": "synthetic", "classes": K, "per_class": N, "dims": [H, W, C], "seed": S, "test_fraction": F}``.
    """
    kind = spec.get("kind")
    if kind == "desk":
        return load_desk(spec["path"])
    if kind == "idx":
        train = load_idx(*spec["train"], name="train")
        test = load_idx(*spec["test"], name="test", class_count=train.class_count)
        return train, test
    if kind == "synthetic":
        full = make_synthetic(int(spec.get("classes", 4)), int(spec.get("per_class", 100)),
                              tuple(spec.get("dims", (8, 8, 1))), int(spec.get("seed", 0)))
        frac = float(spec.get("test_fraction", 0.2))
        train, test = split(full, [1.0 - frac, frac], seed=int(spec.get("seed", 0)))
        return train, test
    raise ValueError(f"unknown dataset kind {kind!r}")


def parse_dataset_arg(text: str) -> dict:
    """CLI form: ``desk:DIR`` | ``idx:TRAIN_IMG,TRAIN_LAB,TEST_IMG,TEST_LAB`` | ``synthetic:K,N[,HxWxC[,SEED]]``."""
    kind, _, arg = text.partition(":")
    if kind == "desk":
        return {"kind": "desk", "path": arg or "desk-data"}
    if kind == "idx":
        parts = arg.split(",")
        if len(parts) != 4:
            raise ValueError("idx dataset needs four comma-separated paths")
        return {"kind": "idx", "train": parts[:2], "test": parts[2:]}
    if kind == "synthetic":
        parts = arg.split(",")
        spec = {"kind": "synthetic", "classes": int(parts[0]), "per_class": int(parts[1])}
        if len(parts) > 2:
            spec["dims"] = [int(v) for v in parts[2].split("x")]
        if len(parts) > 3:
            spec["seed"] = int(parts[3])
        return spec
    raise ValueError(f"unknown dataset {text!r}; expected desk:DIR, idx:... or synthetic:K,N[,HxWxC[,SEED]]")


def _default_attacks() -> dict:
    return {
        "sweep_bits": [64],
        "pruning_rates": list(PRUNING_RATES),
        "adversary_sizes": [64, 256, 1024],
        "fine_tune": asdict(FineTuneConfig()),
        "quantize_bits": 8,
        "adversarial": {"epochs": 5, "eps": 0.1, "learning_rate": 0.0005},
        "noise_sigmas": [0.0, 0.001, 0.005, 0.01, 0.02, 0.05, 0.1],
        "noise_h": 0.1,
        "rounding_decimals": [1, 2, 3],
        "rounding_h": [1e-4, 1e-3, 1e-2, 0.1],
        "perturbation": {"m": 3, "eps": 1e-5, "h": 0.1, "attempts": 50},
        "forge": {"bits": 32, "per_class": 40, "epochs": 80, "lr_milestones": [40, 60]},
        "tolerance": 0.10,
    }


@dataclass
class ExperimentSpec:
    dataset: dict
    out: str
    seed: int = 0
    model: dict = field(default_factory=lambda: {"hidden": list(DESK_HIDDEN)})
    watermark: dict = field(default_factory=lambda: {
        "bits": [16, 32, 64], "carriers": {str(k): v for k, v in DESK_CARRIERS.items()}, "provenance": "random"})
    train: dict = field(default_factory=lambda: dict(DESK_TRAIN))
    lambdas: list[float] = field(default_factory=lambda: list(LAMBDA_GRID))
    policy: dict = field(default_factory=lambda: {"tau": 3e-3})
    extraction: dict = field(default_factory=lambda: {"samples": 50, "h": 1e-4})
    attacks: dict = field(default_factory=_default_attacks)
    null_models: int = 20
    null_trials: int = 100_000
    stages: list[str] | None = None

    def __post_init__(self):
        if not isinstance(self.seed, int):
            raise ValueError("seed must be an integer")
        self.attacks = {**_default_attacks(), **self.attacks}
        VerificationPolicy(**self.policy)
        TrainConfig.from_dict(self.train)
        for n in self.watermark["bits"]:
            if str(n) not in self.watermark["carriers"]:
                raise ValueError(f"no carrier size for {n}-bit watermark")
        if self.watermark.get("provenance", "random") not in ("random", "message"):
            raise ValueError("provenance must be 'random' or 'message'")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, input_shape, num_classes: int, seed: int) -> ModelConfig:
        if "layers" in self.model:
            return ModelConfig(tuple(input_shape), list(self.model["layers"]), num_classes, seed)
        return mlp_config(input_shape, tuple(self.model.get("hidden", DESK_HIDDEN)), num_classes, seed)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": seed, "lam": 0.0})


STAGES = ("capacity", "extraction", "quantization", "adversarial", "pruning", "noise",
          "rounding", "perturbation", "forging", "null")


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    columns = list(rows[0])
    for row in rows[1:]:
        columns += [c for c in row if c not in columns]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


class _Run:
    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.out = Path(spec.out)
        self.policy = VerificationPolicy(**spec.policy)
        self.train_set, self.test_set = load_dataset(spec.dataset)
        self.input_shape = self.train_set.input_shape
        self.num_classes = self.train_set.class_count
        self.keys: dict[int, WatermarkKey] = {}
        self.marked: dict[int, Model] = {}
        self.lambdas: dict[int, float] = {}
        self.baseline: Model | None = None
        self.baseline_acc = float("nan")

    # helpers -------------------------------------------------------------------

    def key_for(self, n_bits: int) -> WatermarkKey:
        wm = self.spec.watermark
        carrier = int(wm["carriers"][str(n_bits)])
        dim = int(np.prod(self.input_shape))
        if wm.get("provenance", "random") == "message":
            return generate_key_from_message(f"{wm['message']}/{n_bits}", n_bits, carrier, dim, self.num_classes)
        return generate_key_random(n_bits, carrier, dim, self.num_classes, seed=self.spec.seed * 1000 + n_bits)

    def samples_for(self, key: WatermarkKey) -> np.ndarray:
        return select_key_samples(self.train_set, key, int(self.spec.extraction["samples"]), seed=self.spec.seed)

    def whitebox(self, model: Model, key: WatermarkKey):
        est = whitebox_expected_gradient(model, key, self.samples_for(key))
        return verify_estimate(est, key, self.policy)

    def blackbox(self, oracle, key: WatermarkKey, h: float):
        est = blackbox_estimate_gradient(oracle, key, self.samples_for(key), h)
        return verify_estimate(est, key, self.policy)

    # stages -------------------------------------------------------------------

    def capacity(self) -> dict[str, list[dict]]:
        seed = self.spec.seed
        cfg = self.spec.train_config(seed)
        init = build_model(self.spec.model_config(self.input_shape, self.num_classes, seed))
        self.baseline, _ = train(init, self.train_set, cfg)
        self.baseline_acc = self.baseline.accuracy(self.test_set)
        rows, thresholds = [], []
        for n_bits in self.spec.watermark["bits"]:
            key = self.key_for(n_bits)
            self.keys[n_bits] = key
            sel = select_lambda(init, self.train_set, cfg, key, self.spec.lambdas)
            eta = error_threshold(n_bits, self.policy.tau)
            thresholds.append({"n_bits": n_bits, "tau": self.policy.tau, "eta": eta, "min_correct": n_bits - eta})
            row = {"n_bits": n_bits, "carrier_size": key.carrier_size, "target": key.target,
                   "lambda": sel.lam, "baseline_acc": self.baseline_acc}
            if sel.model is None:
                row.update({"marked_acc": None, "acc_drop_points": None, "besr": max(t["besr"] for t in sel.trials)})
            else:
                self.marked[n_bits] = sel.model
                self.lambdas[n_bits] = sel.lam
                acc = sel.model.accuracy(self.test_set)
                rep = self.whitebox(sel.model, key)
                row.update({"marked_acc": acc, "acc_drop_points": 100.0 * (self.baseline_acc - acc),
                            "besr": rep.watermark_accuracy, "verified": rep.verified})
            row["lambda_trials"] = len(sel.trials)
            rows.append(row)
        return {"table2_capacity": rows, "thresholds": thresholds}

    def extraction(self):
        rows = []
        h = float(self.spec.extraction["h"])
        for n_bits, model in self.marked.items():
            key = self.keys[n_bits]
            wb = self.whitebox(model, key)
            oracle = ModelOracle(model)
            bb = self.blackbox(oracle, key, h)
            s = int(self.spec.extraction["samples"])
            rows.append({"n_bits": n_bits, "carrier_size": key.carrier_size, "samples": s, "h": h,
                         "queries": oracle.queries, "expected_queries": s * (key.carrier_size + 1),
                         "queries_per_bit": oracle.queries / n_bits,
                         "whitebox_errors": wb.n_error, "blackbox_errors": bb.n_error,
                         "bits_identical": bool(np.array_equal(wb.decoded, bb.decoded)),
                         "verified": bb.verified})
        return {"table6_efficiency": rows}

    def quantization(self):
        bits = int(self.spec.attacks["quantize_bits"])
        rows = []
        for n_bits, model in self.marked.items():
            q = quantize(model, bits)
            rep = self.whitebox(q, self.keys[n_bits])
            rows.append({"n_bits": n_bits, "quant_bits": bits, "acc_before": model.accuracy(self.test_set),
                         "acc_after": q.accuracy(self.test_set), "n_error": rep.n_error, "eta": rep.eta,
                         "verified": rep.verified})
        return {"table3_quantization": rows}

    def adversarial(self):
        adv = self.spec.attacks["adversarial"]
        rows = []
        for n_bits, model in self.marked.items():
            tuned = adversarial_fine_tune(model, self.train_set, int(adv["epochs"]), float(adv["eps"]),
                                          float(adv["learning_rate"]), seed=self.spec.seed)
            rep = self.whitebox(tuned, self.keys[n_bits])
            rows.append({"n_bits": n_bits, "epochs": adv["epochs"], "eps": adv["eps"],
                         "acc_before": model.accuracy(self.test_set), "acc_after": tuned.accuracy(self.test_set),
                         "n_error": rep.n_error, "eta": rep.eta, "verified": rep.verified})
        return {"table4_adversarial": rows}

    def pruning(self):
        a = self.spec.attacks
        rows = []
        for n_bits in a["sweep_bits"]:
            if n_bits not in self.marked:
                continue
            key = self.keys[n_bits]
            report = robustness_sweep(
                self.marked[n_bits], key, self.samples_for(key), self.train_set, self.test_set,
                sizes=a["adversary_sizes"], rates=a["pruning_rates"],
                ft_cfg=FineTuneConfig(**{**a["fine_tune"], "seed": self.spec.seed}),
                policy=self.policy, seed=self.spec.seed, tolerance=a["tolerance"])
            rows += [{"n_bits": n_bits, **cell} for cell in report.cells]
        return {"fig2_pruning": rows}

    def _largest(self) -> int:
        return max(self.marked)

    def noise(self):
        a = self.spec.attacks
        n_bits = self._largest()
        model, key = self.marked[n_bits], self.keys[n_bits]
        base = model.accuracy(self.test_set)
        rows = []
        for i, sigma in enumerate(a["noise_sigmas"]):
            wrap = [{"kind": "noise", "sigma": float(sigma), "seed": self.spec.seed + i}]
            acc = oracle_accuracy(stack_oracles(ModelOracle(model), wrap), self.test_set)
            rep = self.blackbox(stack_oracles(ModelOracle(model), wrap), key, float(a["noise_h"]))
            rows.append({"n_bits": n_bits, "sigma": float(sigma), "h": float(a["noise_h"]), "test_acc": acc,
                         "retained": retains_accuracy(acc, base, a["tolerance"]),
                         "watermark_acc": rep.watermark_accuracy, "n_error": rep.n_error, "verified": rep.verified})
        return {"fig3_noise": rows}

    def rounding(self):
        a = self.spec.attacks
        n_bits = self._largest()
        model, key = self.marked[n_bits], self.keys[n_bits]
        rows = []
        for d in a["rounding_decimals"]:
            for h in a["rounding_h"]:
                oracle = stack_oracles(ModelOracle(model), [{"kind": "round", "decimals": int(d)}])
                rep = self.blackbox(oracle, key, float(h))
                rows.append({"n_bits": n_bits, "decimals": int(d), "h": float(h),
                             "watermark_acc": rep.watermark_accuracy, "n_error": rep.n_error, "verified": rep.verified})
        return {"fig4_rounding": rows}

    def perturbation(self):
        p = self.spec.attacks["perturbation"]
        n_bits = self._largest()
        model, key = self.marked[n_bits], self.keys[n_bits]
        rows = []
        for attempt in range(int(p["attempts"])):
            wrap = [{"kind": "perturb", "m": int(p["m"]), "eps": float(p["eps"]),
                     "seed": self.spec.seed * 100_000 + attempt}]
            rep = self.blackbox(stack_oracles(ModelOracle(model), wrap), key, float(p["h"]))
            rows.append({"n_bits": n_bits, "attempt": attempt, "m": p["m"], "eps": p["eps"], "h": p["h"],
                         "watermark_acc": rep.watermark_accuracy, "n_error": rep.n_error, "verified": rep.verified})
        return {"fig5_perturbation": rows}

    def forging(self):
        f = self.spec.attacks["forge"]
        n_bits = self._largest()
        vendor_key = self.keys[n_bits]
        dim = int(np.prod(self.input_shape))
        carrier = int(self.spec.watermark["carriers"].get(str(f["bits"]), min(dim, 256)))
        counterfeit = generate_key_random(int(f["bits"]), carrier, dim, self.num_classes,
                                          seed=self.spec.seed * 1000 + 999)
        sub = subsample_per_class(self.train_set, int(f["per_class"]), seed=self.spec.seed + 7)
        probe = self.test_set.images[self.test_set.labels == counterfeit.target]
        cfg = TrainConfig.from_dict({**self.spec.train, "seed": self.spec.seed + 7, "lam": 0.0,
                                     "lr_milestones": list(f.get("lr_milestones", []))})
        result = forge(self.marked[n_bits], counterfeit, sub, self.test_set, probe, cfg,
                       forging_lambdas(self.lambdas[n_bits]), epochs=int(f["epochs"]))
        per_class_total = int(self.train_set.class_counts().min())
        rows = [{"vendor_bits": n_bits, "counterfeit_bits": counterfeit.n_bits,
                 "vendor_target": vendor_key.target, "counterfeit_target": counterfeit.target,
                 "target_collision": vendor_key.target == counterfeit.target,
                 "per_class": int(f["per_class"]), "data_fraction": int(f["per_class"]) / per_class_total, **t}
                for t in result.trials]
        return {"table5_forging": rows}

    def null(self):
        rows = []
        for i in range(int(self.spec.null_models)):
            seed = self.spec.seed * 1000 + 500 + i
            init = build_model(self.spec.model_config(self.input_shape, self.num_classes, seed))
            model, _ = train(init, self.train_set, self.spec.train_config(seed))
            for n_bits, key in self.keys.items():
                rep = self.whitebox(model, key)
                rows.append({"model_seed": seed, "n_bits": n_bits, "ber": rep.ber, "n_error": rep.n_error,
                             "eta": rep.eta, "verified": rep.verified})
        mc = []
        for n_bits in self.spec.watermark["bits"]:
            est = null_false_positive_rate(n_bits, int(self.spec.null_trials), seed=self.spec.seed * 1000 + n_bits,
                                           tau=self.policy.tau)
            mc.append({"n_bits": n_bits, "trials": est.trials, "hits": est.hits, "rate": est.rate,
                       "exact": est.exact, "ci_low": est.ci_low, "ci_high": est.ci_high})
        return {"null_models": rows, "null_fpr": mc}


def run_experiment(spec: ExperimentSpec) -> dict:
    """Run every stage and write ``<name>.csv`` files plus ``manifest.json`` into ``spec.out``."""
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(spec)
    wanted = spec.stages or list(STAGES)
    unknown = set(wanted) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)}")
    stages = {}
    files = {}
    for name in STAGES:
        if name not in wanted and name != "capacity":
            continue
        start = time.perf_counter()
        try:
            if name != "capacity" and not run.marked:
                raise RuntimeError("no marked model available")
            tables = getattr(run, name)()
            for table, rows in tables.items():
                path = out / f"{table}.csv"
                _write_csv(path, rows)
                files[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()
            stages[name] = {"status": "ok"}
        except Exception as exc:  # a failed stage must not lose the others
            log.exception("stage %s failed", name)
            stages[name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                            "traceback": traceback.format_exc()}
        stages[name]["seconds"] = round(time.perf_counter() - start, 3)
    manifest = {
        "spec": spec.to_dict(),
        "partial": any(s["status"] != "ok" for s in stages.values()),
        "stages": stages,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
