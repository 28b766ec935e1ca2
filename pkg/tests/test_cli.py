import csv
import json
import subprocess
import sys

import pytest

from coral import cli

TINY = {"task": "dynamics", "inr": {"d_z": 6, "width": 12, "depth": 2},
        "inr_train": {"lr": 1e-3, "epochs": 2, "batch_size": 8},
        "processor": {"node_width": 12, "node_depth": 2},
        "processor_train": {"lr": 1e-3, "epochs": 2, "batch_size": 4},
        "data": {"n_train": 3, "n_test": 2, "grid_res": 8}}


@pytest.fixture(scope="module")
def dyn_ckpt(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    ck = d / "ck"
    assert cli.main(["fit-inr", "--config", str(cfg), "--ckpt", str(ck)]) == 0
    assert cli.main(["fit-processor", "--ckpt", str(ck)]) == 0
    return ck


def test_generate_is_byte_identical(tmp_path):
    args = ["generate", "--task", "dynamics", "--pde", "heat2d", "--seed", "7", "--n", "3", "--grid-res", "8"]
    assert cli.main(args + ["--out", str(tmp_path / "a.bin")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b.bin")]) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert cli.main(args[:6] + ["8"] + args[7:] + ["--out", str(tmp_path / "c.bin")]) == 0
    assert (tmp_path / "c.bin").read_bytes() != (tmp_path / "a.bin").read_bytes()


def test_distinct_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({"task": "dynamics", "inr": {"width": -1}}))
    codes = {
        "flag": cli.main(["eval", "--ckpt", str(tmp_path), "--bogus"]),
        "unreadable": cli.main(["fit-inr", "--config", str(bad), "--ckpt", str(tmp_path / "x")]),
        "schema": cli.main(["fit-inr", "--config", str(schema), "--ckpt", str(tmp_path / "x")]),
        "missing": cli.main(["eval", "--ckpt", str(tmp_path / "nowhere")]),
    }
    assert codes == {"flag": cli.EXIT_USAGE, "unreadable": cli.EXIT_UNREADABLE,
                     "schema": cli.EXIT_SCHEMA, "missing": cli.EXIT_MISSING}
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE


def test_eval_without_checkpoint_names_path(tmp_path, capsys):
    (tmp_path / "ck").mkdir()
    assert cli.main(["eval", "--ckpt", str(tmp_path / "ck")]) == cli.EXIT_MISSING
    assert str(tmp_path / "ck" / "run.json") in capsys.readouterr().err


def test_forecast_rows_and_report(dyn_ckpt, tmp_path):
    out = tmp_path / "f.csv"
    assert cli.main(["forecast", "--ckpt", str(dyn_ckpt), "--horizon", "39", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 39 and [int(r["t"]) for r in rows] == list(range(1, 40))
    assert cli.main(["forecast", "--ckpt", str(dyn_ckpt), "--horizon", "40"]) == cli.EXIT_USAGE
    assert cli.main(["forecast", "--ckpt", str(dyn_ckpt)]) == 0
    assert cli.main(["eval", "--ckpt", str(dyn_ckpt)]) == 0
    rep = tmp_path / "rep"
    assert cli.main(["report", "--ckpt", str(dyn_ckpt), "--out-dir", str(rep)]) == 0
    names = {p.name for p in rep.iterdir()}
    assert {"metrics.csv", "curves.gp", "forecast.dat", "inr_trace.dat", "processor_trace.dat"} <= names
    lines = (rep / "forecast.dat").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 40
    header = (rep / "metrics.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["grid", "in_t", "out_t", "t0"]


def test_config_dataset_paths(tmp_path):
    for split, seed in (("train", "0"), ("test", "1")):
        assert cli.main(["generate", "--task", "ivp", "--seed", seed, "--n", "3", "--grid-res", "6",
                         "--out", str(tmp_path / f"{split}.bin")]) == 0
    cfg = {"task": "ivp", "inr": TINY["inr"], "inr_train": TINY["inr_train"],
           "processor": {"hidden": 8, "blocks": 1}, "processor_train": TINY["processor_train"],
           "data": {"train_path": str(tmp_path / "train.bin"), "test_path": str(tmp_path / "test.bin")}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    ck = str(tmp_path / "ck")
    assert cli.main(["fit-inr", "--config", str(tmp_path / "c.json"), "--ckpt", ck]) == 0
    assert cli.main(["fit-processor", "--ckpt", ck]) == 0
    assert cli.main(["eval", "--ckpt", ck]) == 0
    cfg["data"]["test_path"] = str(tmp_path / "gone.bin")
    (tmp_path / "c2.json").write_text(json.dumps(cfg))
    assert cli.main(["fit-inr", "--config", str(tmp_path / "c2.json"), "--ckpt", ck]) == cli.EXIT_MISSING


def test_console_script_entry():
    res = subprocess.run([sys.executable, "-m", "coral.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("generate", "fit-inr", "fit-processor", "eval", "forecast", "design", "report"):
        assert cmd in res.stdout


def test_design_command(tmp_path):
    cfg = {"task": "geometry", "inr": TINY["inr"], "inr_train": TINY["inr_train"],
           "processor": {"hidden": 8, "blocks": 1}, "processor_train": TINY["processor_train"],
           "data": {"n_train": 3, "n_test": 2, "prior": {"res": 5, "n_boundary": 256}}}
    (tmp_path / "g.json").write_text(json.dumps(cfg))
    ck = str(tmp_path / "ck")
    assert cli.main(["fit-inr", "--config", str(tmp_path / "g.json"), "--ckpt", ck]) == 0
    assert cli.main(["design", "--ckpt", ck, "--target", "0.5"]) == cli.EXIT_MISSING
    assert cli.main(["fit-processor", "--ckpt", ck]) == 0
    out = tmp_path / "d.csv"
    assert cli.main(["design", "--ckpt", ck, "--target", "0.5", "--steps", "4", "--out", str(out)]) == 0
    assert len(list(csv.DictReader(out.open()))) == 4
    assert len(json.loads(out.with_suffix(".params.json").read_text())) == 2
    assert cli.main(["forecast", "--ckpt", ck]) == cli.EXIT_RUNTIME
