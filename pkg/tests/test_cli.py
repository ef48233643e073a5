import json

import pytest

from gradmark.checkpoint import save_checkpoint
from gradmark.cli import main
from gradmark.server import ServerConfig, serve

DATASET = "synthetic:4,80,6x6x1,2"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["keygen", "--message", "ACME", "--bits", "16", "--carrier", "24", "--input-dim", "36",
                 "--classes", "4", "--out", str(d / "key.json")]) == 0
    assert main(["embed", "--dataset", DATASET, "--key", str(d / "key.json"), "--hidden", "16", "--epochs", "6",
                 "--out", str(d / "marked.gsck")]) == 0
    assert main(["train", "--dataset", DATASET, "--hidden", "16", "--epochs", "6", "--seed", "9",
                 "--out", str(d / "plain.gsck")]) == 0
    return d


def run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_keygen_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["keygen", "--message", "ACME", "--bits", "64", "--carrier", "128",
                     "--out", str(tmp_path / f"{name}.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_verify_marked_exits_zero(workdir, capsys):
    code, out, _ = run(capsys, ["verify", "--dataset", DATASET, "--key", str(workdir / "key.json"),
                                "--checkpoint", str(workdir / "marked.gsck"), "--samples", "20"])
    report = json.loads(out)
    assert code == 0 and report["verified"] and report["extraction"]["query_count"] == 20 * 25


def test_verify_unmarked_exits_nonzero(workdir, capsys):
    code, out, _ = run(capsys, ["verify", "--dataset", DATASET, "--key", str(workdir / "key.json"),
                                "--checkpoint", str(workdir / "plain.gsck"), "--samples", "20", "--whitebox"])
    report = json.loads(out)
    assert code == 1 and not report["verified"]
    assert 0.2 <= report["ber"] <= 0.8


def test_extract_writes_estimate(workdir, capsys, tmp_path):
    code, out, _ = run(capsys, ["extract", "--dataset", DATASET, "--key", str(workdir / "key.json"),
                                "--checkpoint", str(workdir / "marked.gsck"), "--samples", "5",
                                "--out", str(tmp_path / "est.json")])
    assert code == 0
    saved = json.loads((tmp_path / "est.json").read_text())
    assert len(saved["gradient"]) == 24 and len(saved["decoded"]) == 16


def test_remote_verification_against_rounding_server(workdir, capsys):
    from gradmark.checkpoint import load_checkpoint

    srv = serve(ServerConfig(wrappers=[{"kind": "round", "decimals": 1}]), load_checkpoint(workdir / "marked.gsck"))
    try:
        host, port = srv.address
        code, out, _ = run(capsys, ["verify", "--dataset", DATASET, "--key", str(workdir / "key.json"),
                                    "--remote", f"{host}:{port}", "--samples", "20", "--h", "0.1"])
    finally:
        srv.stop()
    assert code == 0 and json.loads(out)["verified"]


def test_missing_file_is_machine_readable(capsys, tmp_path):
    code, _, err = run(capsys, ["verify", "--dataset", DATASET, "--key", str(tmp_path / "nope.json"),
                                "--checkpoint", str(tmp_path / "x.gsck")])
    assert code == 2 and json.loads(err)["error"] == "missing-file"


def test_dimension_mismatch(workdir, capsys, tmp_path):
    main(["keygen", "--bits", "16", "--carrier", "8", "--input-dim", "784", "--out", str(tmp_path / "big.json")])
    capsys.readouterr()
    code, _, err = run(capsys, ["verify", "--dataset", DATASET, "--key", str(tmp_path / "big.json"),
                                "--checkpoint", str(workdir / "marked.gsck")])
    assert code == 2 and json.loads(err)["error"] == "dimension-mismatch"


def test_bad_wrapper_flag(workdir, capsys):
    code, _, err = run(capsys, ["verify", "--dataset", DATASET, "--key", str(workdir / "key.json"),
                                "--checkpoint", str(workdir / "marked.gsck"), "--wrap", "blur:2"])
    assert code == 2 and "blur" in json.loads(err)["message"]


@pytest.mark.parametrize("kind,extra", [("prune", ["--rate", "0.3"]), ("quantize", []),
                                        ("finetune", ["--size", "10"]), ("adv-finetune", ["--epochs", "1"])])
def test_attacks_write_checkpoints(workdir, capsys, tmp_path, kind, extra):
    out = tmp_path / f"{kind}.gsck"
    code, stdout, _ = run(capsys, ["attack", "--kind", kind, "--checkpoint", str(workdir / "marked.gsck"),
                                   "--dataset", DATASET, "--out", str(out), *extra])
    assert code == 0 and out.exists() and json.loads(stdout)["test_acc"] > 0.5


def test_experiment_and_report(capsys, tmp_path):
    spec = {
        "dataset": {"kind": "synthetic", "classes": 4, "per_class": 60, "dims": [6, 6, 1], "seed": 1},
        "out": str(tmp_path / "bundle"), "seed": 1, "model": {"hidden": [16]},
        "watermark": {"bits": [16], "carriers": {"16": 24}},
        "train": {"epochs": 4, "batch_size": 32, "learning_rate": 0.05, "wm_batch_size": 16},
        "stages": ["capacity", "extraction"], "extraction": {"samples": 5, "h": 1e-4},
    }
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    code, out, _ = run(capsys, ["experiment", "--spec", str(tmp_path / "spec.json")])
    assert code == 0 and json.loads(out)["stages"] == {"capacity": "ok", "extraction": "ok"}
    code, out, _ = run(capsys, ["report", "--bundle", str(tmp_path / "bundle")])
    tables = json.loads(out)["tables"]
    assert code == 0 and {"table2_capacity.csv", "thresholds.csv", "table6_efficiency.csv"} <= set(tables)
