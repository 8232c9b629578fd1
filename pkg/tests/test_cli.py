import csv
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import jsonschema
import numpy as np
import pytest

import gatedmtl.cli as cli
from gatedmtl.cli import RunConfig, main
from gatedmtl.model import build_encoder, save_checkpoint
from gatedmtl.prune import EquivalenceReport, extract_pattern
from gatedmtl.report import load_schema, nice_ticks, pareto_svg

from conftest import TASKS3, tiny_conv

HERE = Path(__file__).parent
SWEEP_HEADER = ("lambda_s,tau,seed,flops,params,delta_mtl,"
                "quadrant.accuracy,mass.l1_error,parity.accuracy")

TINY = {
    "dataset": {"train_size": 64, "test_size": 32, "seed": 1},
    "model": {"stem_channels": 4, "widths": [4, 4], "pool_after": [1]},
    "optimizer": {"epochs": 1, "batch_size": 32},
    "sparsity": {"lambda_s": 0.05, "tau": [0.0, 0.0, 0.0]},
    "sweep": {"lambdas": [0.05, 0.1], "taus": [[0.0, 0.0, 0.0]], "epochs": 1, "baseline_epochs": 1},
}


def validate(doc, schema):
    jsonschema.validate(doc, load_schema(schema))


def write_cfg(tmp_path, **over):
    doc = json.loads(json.dumps(TINY))
    doc.update(over)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    doc = json.loads(err.strip().splitlines()[-1])
    validate(doc, "error")
    return doc


class TestConfig:
    def test_defaults_materialized(self, tmp_path):
        cfg = RunConfig.from_dict({})
        res = cfg.resolved()
        validate(res, "run_config")
        assert res["sparsity"]["tau"] == [0.5, 0.5, 0.5] and res["optimizer"]["epochs"] == 30
        assert RunConfig.from_dict(json.loads(json.dumps(res))).resolved() == res

    @pytest.mark.parametrize("doc", [{"bogus": 1}, {"model": {"widthz": [1]}}, {"optimizer": {"main": {"lrr": 1}}},
                                     {"sparsity": {"lambda_s": 0.1, "tau": [0.5]}}, {"dataset": {"train_size": 0}},
                                     {"tasks": "x"}, {"model": {"image_size": 8}}])
    def test_rejected(self, doc, tmp_path, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(doc))
        code, _, err = run(["train", p, "--mtl-uniform"], capsys)
        assert code == 2 and error_of(err)["error"] == "bad_config"

    def test_missing_and_malformed(self, tmp_path, capsys):
        code, _, err = run(["train", tmp_path / "nope.json", "--stl", "0"], capsys)
        assert code == 2 and error_of(err)["error"] == "missing_config"
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        code, _, err = run(["gen-data", bad], capsys)
        assert code == 2 and error_of(err)["error"] == "bad_config"


class TestGenData:
    def test_outputs(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        code, _, _ = run(["gen-data", cfg, "--output", tmp_path / "d"], capsys)
        assert code == 0
        info = json.loads((tmp_path / "d" / "dataset.json").read_text())
        validate(info, "dataset")
        with np.load(tmp_path / "d" / "train.npz") as z:
            assert z["x"].shape == (64, 1, 16, 16) and set(z.files) >= {"y0", "y1", "y2", "latents"}


class TestTrain:
    def test_stl_and_determinism(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        outs = []
        for rep in ("a", "b"):
            code, _, _ = run(["train", cfg, "--stl", "0", "--seed", "1", "--output", tmp_path / rep], capsys)
            assert code == 0
            outs.append((tmp_path / rep / "stl-task0-seed1.metrics.json").read_bytes())
        assert outs[0] == outs[1]
        d = tmp_path / "a"
        assert (d / "stl-task0-seed1.ckpt.json").exists()
        validate(json.loads(outs[0]), "metrics")
        validate(json.loads((d / "stl-task0-seed1.ckpt.json").read_text()), "checkpoint")
        validate(json.loads((d / "config.json").read_text()), "run_config")
        for line in (d / "stl-task0-seed1.history.jsonl").read_text().splitlines():
            validate(json.loads(line), "history_record")

    def test_bad_task_index(self, tmp_path, capsys):
        code, _, err = run(["train", write_cfg(tmp_path), "--stl", "5", "--output", tmp_path], capsys)
        assert code == 2 and error_of(err)["error"] == "bad_task"

    def test_missing_stl_checkpoints(self, tmp_path, capsys):
        code, _, err = run(["train", write_cfg(tmp_path), "--interrogate", "--init", "from-stl",
                            "--output", tmp_path / "o"], capsys)
        assert code == 2 and error_of(err)["error"] == "missing_stl_checkpoint"

    def test_from_stl_pipeline(self, tmp_path, capsys):
        cfg, out = write_cfg(tmp_path), tmp_path / "o"
        for t in range(3):
            assert run(["train", cfg, "--stl", t, "--seed", "2", "--output", out], capsys)[0] == 0
        code, _, _ = run(["train", cfg, "--interrogate", "--init", "from-stl", "--seed", "2", "--output", out],
                         capsys)
        assert code == 0
        doc = json.loads((out / "gated-seed2.metrics.json").read_text())
        validate(doc, "metrics")
        assert doc["init"] == "from_single_task" and doc["flops"] <= doc["gated_flops"]

    def test_divergence_exit_code(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, optimizer={"epochs": 1, "main": {"lr": 1e300}})
        with np.errstate(all="ignore"):
            code, _, err = run(["train", cfg, "--mtl-uniform", "--output", tmp_path / "o"], capsys)
        assert code == 3 and error_of(err)["error"] == "training_diverged"


class TestPrune:
    def _ckpt(self, tmp_path, gates=None):
        enc = build_encoder(tiny_conv(), TASKS3, seed=0)
        if gates is not None:
            enc.bank.set_all(gates)
        else:
            rng = np.random.default_rng(0)
            enc.bank.alpha.data = rng.normal(size=enc.bank.alpha.shape)
        return enc, save_checkpoint(enc, tmp_path / "m.ckpt.json")

    def test_outputs_and_conservation(self, tmp_path, capsys):
        enc, path = self._ckpt(tmp_path)
        code, out, _ = run(["prune", path, "--verify"], capsys)
        assert code == 0 and json.loads(out)["equivalence"]["passed"]
        ledger = json.loads((tmp_path / "m.flops.json").read_text())
        validate(ledger, "flops_ledger")
        p = ledger["params"]
        assert p["after"] + p["pruned"] == p["before"] == enc.network_param_count()
        gates = json.loads((tmp_path / "m.gates.json").read_text())
        validate(gates, "gate_pattern")
        validate(json.loads((tmp_path / "m.pruned.json").read_text()), "pruned")

    def test_all_shared_has_no_task_flops(self, tmp_path, capsys):
        _, path = self._ckpt(tmp_path, gates=-30.0)
        assert run(["prune", path], capsys)[0] == 0
        after = json.loads((tmp_path / "m.flops.json").read_text())["after"]
        assert sum(e["flops"] for e in after["entries"] if e["branch"].startswith("task")) == 0

    def test_equivalence_failure_exit_code(self, tmp_path, capsys, monkeypatch):
        _, path = self._ckpt(tmp_path)
        monkeypatch.setattr(cli, "verify_equivalence", lambda *a: EquivalenceReport([1.0], [0.5]))
        code, _, err = run(["prune", path, "--verify"], capsys)
        assert code == 4 and error_of(err)["error"] == "equivalence_failed"

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(["prune", tmp_path / "none.json"], capsys)
        assert code == 2 and error_of(err)["error"] == "missing_checkpoint"


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweep")
    cfg = tmp / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["sweep", str(cfg), "--output", str(tmp / "s")]) == 0
    return tmp / "s"


class TestSweep:
    def test_csv_golden_header_and_rows(self, swept):
        lines = (swept / "sweep.csv").read_text().splitlines()
        assert lines[0] == SWEEP_HEADER
        rows = list(csv.DictReader(lines))
        assert len(rows) == 2 and [r["lambda_s"] for r in rows] == ["0.05", "0.1"]
        assert (swept / "pareto.csv").read_text().splitlines()[0] == SWEEP_HEADER
        assert len(list((swept / "cells").iterdir())) == 2

    def test_json_schema(self, swept):
        validate(json.loads((swept / "sweep.json").read_text()), "sweep")
        for rec in (swept / "cells").glob("*/record.json"):
            assert json.loads(rec.read_text())["status"] == "ok"

    def test_svg_is_well_formed(self, swept):
        root = ET.fromstring((swept / "pareto.svg").read_bytes())
        assert root.tag.endswith("svg") and root.get("version") == "1.1"
        assert root.get("width") == "800" and root.get("height") == "600"

    def test_report_over_sweep_and_runs(self, swept, tmp_path, capsys):
        code, out, _ = run(["report", swept, "--output", tmp_path / "r"], capsys)
        assert code == 0
        rows = list(csv.DictReader((tmp_path / "r" / "results.csv").read_text().splitlines()))
        names = [r["method"] for r in rows]
        assert names[0] == "STL" and any("mtl-uniform" in n for n in names)
        assert sum("gated[" in n for n in names) == 2
        validate(json.loads((tmp_path / "r" / "gate_stats.json").read_text()), "gate_report")


class TestReport:
    def test_published_fixture(self, tmp_path, capsys):
        code, out, _ = run(["report", "--table", HERE / "fixtures" / "nyud_reference.json",
                            "--output", tmp_path], capsys)
        assert code == 0
        rows = {r["method"]: r for r in csv.DictReader((tmp_path / "results.csv").read_text().splitlines())}
        assert abs(float(rows["MTL (Uni.)"]["delta_mtl"]) + 6.86) <= 0.05
        assert abs(float(rows["gated (published)"]["delta_mtl"]) - 2.06) <= 0.05
        assert "+2.06" in (tmp_path / "results.txt").read_text()

    def test_single_method_rank(self, tmp_path, capsys):
        fx = tmp_path / "one.json"
        fx.write_text(json.dumps({"tasks": ["a", "b"], "directions": [0, 1], "rows": {"STL": [1.0, 2.0]}}))
        run(["report", "--table", fx, "--output", tmp_path / "o"], capsys)
        rows = list(csv.DictReader((tmp_path / "o" / "results.csv").read_text().splitlines()))
        assert [float(r["mean_rank"]) for r in rows] == [1.0]

    def test_order_invariant(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, optimizer={"epochs": 0})
        dirs = []
        for name, flag in (("stl0", ["--stl", "0"]), ("stl1", ["--stl", "1"]), ("stl2", ["--stl", "2"]),
                           ("mtl", ["--mtl-uniform"]), ("gated", ["--interrogate"])):
            d = tmp_path / name
            assert run(["train", cfg, *flag, "--output", d], capsys)[0] == 0
            dirs.append(d)
        run(["report", *dirs, "--output", tmp_path / "r1"], capsys)
        run(["report", *reversed(dirs), "--output", tmp_path / "r2"], capsys)
        for f in ("results.csv", "results.txt", "gate_stats.json"):
            assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()

    def test_no_inputs(self, capsys):
        code, _, err = run(["report"], capsys)
        assert code == 2 and error_of(err)["error"] == "no_runs"


class TestGoldens:
    def test_gate_pattern_schema_frozen(self):
        golden = json.loads((HERE / "golden" / "gate_pattern.schema.json").read_text())
        assert load_schema("gate_pattern") == golden

    def test_gate_pattern_document_frozen(self):
        enc = build_encoder(tiny_conv(), TASKS3, seed=0)
        a = enc.bank.alpha.data
        enc.bank.alpha.data = np.arange(a.size, dtype=float).reshape(a.shape) % 3 - 1.0
        doc = extract_pattern(enc).to_dict()
        golden = json.loads((HERE / "golden" / "gate_pattern.json").read_text())
        assert doc == golden
        validate(golden, "gate_pattern")

    def test_svg_helpers(self):
        ticks = nice_ticks(0.0, 1.0)
        assert ticks[0] <= 0.0 and ticks[-1] >= 1.0
        svg = pareto_svg([(1.0, 0.5)], [(1.0, 0.5)], [("ref", 0.0)])
        root = ET.fromstring(svg.encode())
        assert root.get("version") == "1.1"
