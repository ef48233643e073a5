"""Command-line interface.

Every subcommand prints JSON on stdout. Failures print
``{"error": <kind>, "message": <text>}`` on stderr and exit with status 2;
``verify`` exits 1 when the watermark is not verified.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import threading
from pathlib import Path

from .attacks import FineTuneConfig, adversarial_fine_tune, fine_tune, parse_wrapper, prune, quantize, stack_oracles
from .checkpoint import load_checkpoint, save_checkpoint
from .data import build_desk_archive, subsample_per_class
from .experiment import DESK_HIDDEN, DESK_TRAIN, ExperimentSpec, load_dataset, parse_dataset_arg, run_experiment
from .extraction import (
    ModelOracle,
    blackbox_estimate_gradient,
    select_key_samples,
    verify_estimate,
    whitebox_expected_gradient,
)
from .nn import LAMBDA_GRID, TrainConfig, build_model, mlp_config, select_lambda, train
from .server import RemoteOracle, ServerConfig, serve
from .watermark import VerificationPolicy, WatermarkKey, generate_key_from_message, generate_key_random

EXIT_NOT_VERIFIED = 1
EXIT_ERROR = 2


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _dataset(args):
    if not args.dataset:
        raise CliError("invalid-flag", "--dataset is required")
    try:
        return load_dataset(parse_dataset_arg(args.dataset))
    except (OSError, ValueError) as exc:
        raise CliError("dataset", str(exc)) from exc


def _model(args):
    if not args.checkpoint:
        raise CliError("invalid-flag", "--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise CliError("missing-file", f"checkpoint {args.checkpoint} not found")
    return load_checkpoint(args.checkpoint)


def _key(args) -> WatermarkKey:
    if not args.key:
        raise CliError("invalid-flag", "--key is required")
    if not Path(args.key).exists():
        raise CliError("missing-file", f"key {args.key} not found")
    return WatermarkKey.load(args.key)


def _train_config(args, lam: float = 0.0) -> TrainConfig:
    base = dict(DESK_TRAIN)
    if args.epochs is not None:
        base["epochs"] = args.epochs
        base["lr_milestones"] = [m for m in base["lr_milestones"] if m < args.epochs]
    if args.lr is not None:
        base["learning_rate"] = args.lr
    return TrainConfig.from_dict({**base, "seed": args.seed, "lam": lam})


def cmd_fetch_desk(args):
    out = build_desk_archive(args.out or "desk-data")
    _emit({"dataset": f"desk:{out}"})


def cmd_keygen(args):
    if args.checkpoint:
        model = _model(args)
        input_dim, classes = model.config.input_dim, model.num_classes
    else:
        input_dim, classes = args.input_dim, args.classes
    if args.message is not None:
        key = generate_key_from_message(args.message, args.bits, args.carrier, input_dim, classes)
    else:
        key = generate_key_random(args.bits, args.carrier, input_dim, classes, args.seed)
    if not args.out:
        raise CliError("invalid-flag", "--out is required")
    key.save(args.out)
    _emit({"key": args.out, "n_bits": key.n_bits, "carrier_size": key.carrier_size, "target": key.target})


def _fresh_model(args, train_set):
    hidden = tuple(args.hidden) if args.hidden else DESK_HIDDEN
    return build_model(mlp_config(train_set.input_shape, hidden, train_set.class_count, args.seed))


def cmd_train(args):
    train_set, test_set = _dataset(args)
    model, metrics = train(_fresh_model(args, train_set), train_set, _train_config(args))
    _save(args, model)
    _emit({"checkpoint": args.out, "test_acc": model.accuracy(test_set), "history": metrics.history})


def cmd_embed(args):
    train_set, test_set = _dataset(args)
    key = _key(args)
    if key.input_dim != train_set.input_dim or key.num_classes != train_set.class_count:
        raise CliError("dimension-mismatch", "key does not match the dataset's input size or class count")
    init = _fresh_model(args, train_set)
    grid = [args.lam] if args.lam is not None else LAMBDA_GRID
    sel = select_lambda(init, train_set, _train_config(args), key, grid)
    if sel.model is None:
        raise CliError("embedding-failed", f"no lambda in {list(grid)} embedded every bit: {sel.trials}")
    _save(args, sel.model)
    _emit({"checkpoint": args.out, "lambda": sel.lam, "test_acc": sel.model.accuracy(test_set), "trials": sel.trials})


def _save(args, model):
    if not args.out:
        raise CliError("invalid-flag", "--out is required")
    save_checkpoint(model, args.out)


def _estimate(args):
    key = _key(args)
    train_set, _ = _dataset(args)
    if key.input_dim != train_set.input_dim:
        raise CliError("dimension-mismatch", f"key expects {key.input_dim} inputs, dataset has {train_set.input_dim}")
    samples = select_key_samples(train_set, key, args.samples, seed=args.seed)
    wrappers = [parse_wrapper(w) for w in args.wrap]
    if args.remote:
        oracle = RemoteOracle(args.remote, key.num_classes, train_set.input_shape)
        try:
            est = blackbox_estimate_gradient(stack_oracles(oracle, wrappers), key, samples, args.h)
        finally:
            oracle.close()
        return key, est
    model = _model(args)
    if model.config.input_dim != key.input_dim or model.num_classes != key.num_classes:
        raise CliError("dimension-mismatch", "key does not match the checkpoint's input size or class count")
    if args.whitebox:
        if wrappers:
            raise CliError("invalid-flag", "--wrap applies to black-box extraction only")
        return key, whitebox_expected_gradient(model, key, samples)
    return key, blackbox_estimate_gradient(stack_oracles(ModelOracle(model), wrappers), key, samples, args.h)


def cmd_extract(args):
    key, est = _estimate(args)
    report = verify_estimate(est, key, VerificationPolicy(args.tau))
    out = {"decoded": report.to_dict()["decoded"], "extraction": est.extraction_meta(),
           "gradient": est.values.tolist()}
    if args.out:
        Path(args.out).write_text(json.dumps(out))
    _emit({k: v for k, v in out.items() if k != "gradient"})


def cmd_verify(args):
    key, est = _estimate(args)
    report = verify_estimate(est, key, VerificationPolicy(args.tau))
    _emit(report.to_dict())
    return 0 if report.verified else EXIT_NOT_VERIFIED


def cmd_attack(args):
    model = _model(args)
    if args.kind == "prune":
        attacked = prune(model, args.rate)
        if args.size:
            train_set, _ = _dataset(args)
            attacked = fine_tune(attacked, subsample_per_class(train_set, args.size, args.seed), FineTuneConfig(seed=args.seed))
    elif args.kind == "finetune":
        train_set, _ = _dataset(args)
        adversary = subsample_per_class(train_set, args.size, args.seed) if args.size else train_set
        attacked = fine_tune(model, adversary, FineTuneConfig(seed=args.seed))
    elif args.kind == "quantize":
        attacked = quantize(model, args.quant_bits)
    else:
        train_set, _ = _dataset(args)
        attacked = adversarial_fine_tune(model, train_set, epochs=args.epochs or 5, eps=args.eps, seed=args.seed)
    _save(args, attacked)
    summary = {"checkpoint": args.out, "attack": args.kind}
    if args.dataset:
        summary["test_acc"] = attacked.accuracy(_dataset(args)[1])
    _emit(summary)


def cmd_serve(args):
    config = ServerConfig(host=args.host, port=args.port, checkpoint=args.checkpoint,
                          wrappers=[parse_wrapper(w) for w in args.wrap],
                          max_connections=args.max_connections, query_limit=args.query_limit)
    _model(args)
    server = serve(config, background=True)
    host, port = server.address
    print(json.dumps({"listening": f"{host}:{port}"}), flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.stop()


def cmd_experiment(args):
    if not args.spec:
        raise CliError("invalid-flag", "--spec is required")
    spec = ExperimentSpec.load(args.spec)
    if args.out:
        spec.out = args.out
    manifest = run_experiment(spec)
    _emit({"out": spec.out, "partial": manifest["partial"],
           "stages": {k: v["status"] for k, v in manifest["stages"].items()}})
    return EXIT_ERROR if manifest["partial"] else 0


def cmd_report(args):
    bundle = Path(args.bundle)
    manifest_path = bundle / "manifest.json"
    if not manifest_path.exists():
        raise CliError("missing-file", f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    tables = {}
    for name in sorted(manifest["files"]):
        with (bundle / name).open() as fh:
            tables[name] = list(csv.DictReader(fh))
    _emit({"partial": manifest["partial"],
           "stages": {k: v["status"] for k, v in manifest["stages"].items()},
           "tables": tables})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradmark", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
        return p

    p = add("fetch-desk", cmd_fetch_desk, "write the desk digit benchmark as IDX files")

    p = add("keygen", cmd_keygen, "generate a watermark key")
    p.add_argument("--bits", type=int, default=64)
    p.add_argument("--carrier", type=int, default=128)
    p.add_argument("--message", help="derive the key from this message instead of --seed")
    p.add_argument("--checkpoint", help="take input size and class count from this model")
    p.add_argument("--input-dim", type=int, default=784)
    p.add_argument("--classes", type=int, default=10)

    for name, fn, help in (("train", cmd_train, "train an unmarked model"),
                           ("embed", cmd_embed, "train a watermarked model")):
        p = add(name, fn, help)
        p.add_argument("--dataset")
        p.add_argument("--hidden", type=int, nargs="+")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        if name == "embed":
            p.add_argument("--key")
            p.add_argument("--lambda", dest="lam", type=float, help="fixed trade-off; default sweeps a grid")

    for name, fn, help in (("extract", cmd_extract, "estimate the carrier gradient and decode the bits"),
                           ("verify", cmd_verify, "decide ownership; exit 0 iff verified")):
        p = add(name, fn, help)
        p.add_argument("--checkpoint")
        p.add_argument("--remote", metavar="HOST:PORT")
        p.add_argument("--key")
        p.add_argument("--dataset")
        p.add_argument("--samples", type=int, default=50)
        p.add_argument("--h", type=float, default=1e-4)
        p.add_argument("--tau", type=float, default=3e-3)
        p.add_argument("--wrap", action="append", default=[], metavar="noise:σ|round:d|perturb:M,ε,seed")
        p.add_argument("--whitebox", action="store_true", help="backpropagate instead of querying")

    p = add("attack", cmd_attack, "apply a model-tampering attack")
    p.add_argument("--kind", choices=("prune", "finetune", "quantize", "adv-finetune"), required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--rate", type=float, default=0.5)
    p.add_argument("--size", type=int, help="adversary samples per class")
    p.add_argument("--quant-bits", type=int, default=8)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--epochs", type=int)

    p = add("serve", cmd_serve, "serve a checkpoint over the prediction protocol")
    p.add_argument("--checkpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--wrap", action="append", default=[])
    p.add_argument("--max-connections", type=int, default=16)
    p.add_argument("--query-limit", type=int)

    p = add("experiment", cmd_experiment, "run an experiment spec and write a report bundle")
    p.add_argument("--spec")

    p = add("report", cmd_report, "summarise a report bundle")
    p.add_argument("--bundle", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        code = args.fn(args)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
