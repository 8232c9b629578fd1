"""Command-line entry points: gen-data, train, sweep, prune, report.

Failures print one JSON object on stderr and exit with
2 (bad config or missing input), 3 (training diverged) or 4 (a collapsed
model failed the equivalence check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SyntheticTaskset, default_tasks, generate_dataset
from .gates import SparsityConfig, gate_statistics
from .metrics import ScoreTable, count_flops
from .model import ArchConfig, TaskSpec, load_checkpoint, save_checkpoint
from .prune import collapse, extract_pattern, save_pruned, verify_equivalence
from .report import (aligned_text, fmt_tau, pareto_svg, results_rows, sweep_header, sweep_rows, to_csv)
from .tensor import ContractError
from .train import (Baselines, OptimizerConfig, SweepPlan, TrainingDiverged, build_gated, metric_keys,
                    run_sparsity_ablation, run_sweep, train_baselines, train_interrogate, train_mtl_uniform,
                    train_single_task)

log = logging.getLogger("gatedmtl")

METRICS_FORMAT = "interrogate-metrics-v1"
REPORT_FORMAT = "interrogate-gate-report-v1"
EXIT_CONFIG, EXIT_DIVERGED, EXIT_EQUIVALENCE = 2, 3, 4


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code, self.exit_code = code, exit_code


# ---------------------------------------------------------------------------
# run configuration


def _build(cls, doc, where: str, nested: dict | None = None, exclude: Sequence[str] = ()):
    if not isinstance(doc, dict):
        raise CliError("bad_config", f"{where} must be a JSON object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise CliError("bad_config", f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = dict(doc)
    for key, sub in (nested or {}).items():
        if key in kwargs:
            kwargs[key] = _build(sub, kwargs[key], f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (ContractError, TypeError, ValueError) as exc:
        raise CliError("bad_config", f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    dataset: SyntheticTaskset = field(default_factory=SyntheticTaskset)
    model: ArchConfig = field(default_factory=ArchConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sparsity: SparsityConfig = field(default_factory=lambda: SparsityConfig(0.05, [0.5] * 3))
    sweep: SweepPlan | None = None
    output_dir: str = "runs"

    @property
    def tasks(self) -> list[TaskSpec]:
        return self.dataset.tasks

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        from .train import GateOptimizer, MainOptimizer, Schedule

        if not isinstance(doc, dict):
            raise CliError("bad_config", "config must be a JSON object")
        unknown = sorted(set(doc) - {"dataset", "model", "tasks", "optimizer", "sparsity", "sweep", "output_dir"})
        if unknown:
            raise CliError("bad_config", f"unknown top-level key(s): {', '.join(unknown)}")
        tasks_doc = doc.get("tasks")
        if tasks_doc is None:
            tasks = default_tasks()
        elif not isinstance(tasks_doc, list):
            raise CliError("bad_config", "tasks must be a list")
        else:
            tasks = [_build(TaskSpec, t, f"tasks[{i}]") for i, t in enumerate(tasks_doc)]
        ds = _build(SyntheticTaskset, dict(doc.get("dataset", {}), tasks=tasks), "dataset")
        model = _build(ArchConfig, doc.get("model", {}), "model")
        opt = _build(OptimizerConfig, doc.get("optimizer", {}), "optimizer",
                     nested={"main": MainOptimizer, "gate": GateOptimizer, "lr_schedule": Schedule})
        sp_doc = dict(doc.get("sparsity", {"lambda_s": 0.05}))
        if sp_doc.get("variant", "hinge") == "hinge":
            sp_doc.setdefault("tau", [0.5] * len(tasks))
        sparsity = _build(SparsityConfig, sp_doc, "sparsity")
        if sparsity.tau is not None and len(sparsity.tau) != len(tasks):
            raise CliError("bad_config", f"sparsity.tau needs {len(tasks)} entries")
        sweep = None if doc.get("sweep") is None else _build(SweepPlan, doc["sweep"], "sweep")
        out = doc.get("output_dir", "runs")
        if not isinstance(out, str):
            raise CliError("bad_config", "output_dir must be a string")
        if model.in_channels != 1 or model.image_size != ds.image_size:
            raise CliError("bad_config", "model input must match the dataset's 1-channel images")
        return cls(ds, model, opt, sparsity, sweep, out)

    def resolved(self) -> dict:
        dataset = asdict(self.dataset)
        tasks = dataset.pop("tasks")
        doc = {"dataset": dataset, "model": asdict(self.model), "tasks": tasks,
               "optimizer": asdict(self.optimizer), "sparsity": asdict(self.sparsity),
               "sweep": asdict(self.sweep) if self.sweep is not None else None,
               "output_dir": self.output_dir}
        return json.loads(json.dumps(doc))  # tuples become lists


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliError("missing_config", f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError("bad_config", f"config is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# file helpers


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(obj))


def _output_dir(args, cfg: RunConfig | None = None) -> Path:
    out = Path(args.output if args.output else (cfg.output_dir if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = _output_dir(args, cfg)
    train, test = generate_dataset(cfg.dataset)
    info = {"generator": cfg.dataset.generator, "seed": cfg.dataset.seed, "splits": {}}
    for name, ds in (("train", train), ("test", test)):
        arrays = {"x": ds.x, "latents": ds.latents}
        arrays.update({f"y{t}": y for t, y in enumerate(ds.labels)})
        np.savez(out / f"{name}.npz", **arrays)
        info["splits"][name] = {"size": len(ds), "x_sha256": _digest(ds.x)}
    write_json(out / "dataset.json", info)
    write_json(out / "config.json", cfg.resolved())
    print(dump_json(info), end="")
    return 0


def run_name(family: str, seed: int, task: int | None = None) -> str:
    if family == "stl":
        return f"stl-task{task}-seed{seed}"
    return f"{family}-seed{seed}"


def _summary(enc, family: str, name: str, seed: int, metrics: dict, task: int | None,
             sparsity: SparsityConfig | None, init: str | None) -> dict:
    pm = collapse(enc, extract_pattern(enc))
    stats = gate_statistics(enc.bank, enc.mixer, [t.name for t in enc.tasks])
    return {
        "format": METRICS_FORMAT, "run": name, "family": family, "seed": seed, "task": task,
        "tasks": [t.name for t in enc.tasks], "directions": [t.direction for t in enc.tasks],
        "metrics": metrics, "flops": count_flops(pm).encoder_flops(), "params": pm.param_count(),
        "gated_flops": count_flops(enc).encoder_flops(), "gates": stats.to_dict(),
        "sparsity": asdict(sparsity) if sparsity is not None else None, "init": init,
    }


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _output_dir(args, cfg)
    seed = args.seed if args.seed is not None else cfg.optimizer.seed
    opt = OptimizerConfig(**{**asdict(cfg.optimizer), "seed": seed})
    train, test = generate_dataset(cfg.dataset)
    tasks = cfg.tasks
    sparsity, init = None, None
    try:
        if args.stl is not None:
            if not 0 <= args.stl < len(tasks):
                raise CliError("bad_task", f"--stl expects a task index in [0, {len(tasks) - 1}]")
            family, task = "stl", args.stl
            enc, history = train_single_task(task, cfg.model, tasks, train, opt, test=test)
        elif args.mtl_uniform:
            family, task = "mtl-uniform", None
            enc, history = train_mtl_uniform(cfg.model, tasks, train, opt, test=test)
        else:
            family, task = "gated", None
            init = "from_single_task" if args.init == "from-stl" else "scratch"
            sparsity = cfg.sparsity
            stl = None
            if init == "from_single_task":
                stl_dir = Path(args.stl_dir) if args.stl_dir else out
                paths = [stl_dir / f"{run_name('stl', seed, t)}.ckpt.json" for t in range(len(tasks))]
                missing = [str(p) for p in paths if not p.exists()]
                if missing:
                    raise CliError("missing_stl_checkpoint", f"single-task checkpoints not found: {missing}")
                stl = [load_checkpoint(p)[0] for p in paths]
            enc = build_gated(cfg.model, tasks, opt)
            try:
                enc, history = train_interrogate(enc, train, opt, sparsity, init=init, stl=stl, test=test)
            except ContractError as exc:
                raise CliError("incompatible_stl_checkpoint", str(exc)) from exc
    except TrainingDiverged as exc:
        raise CliError("training_diverged", str(exc), EXIT_DIVERGED) from exc

    name = run_name(family, seed, task)
    save_checkpoint(enc, out / f"{name}.ckpt.json", meta={"run": name, "family": family, "seed": seed})
    (out / f"{name}.history.jsonl").write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in history))
    write_json(out / "config.json", cfg.resolved())
    summary = _summary(enc, family, name, seed, history[-1]["test_metrics"], task, sparsity, init)
    write_json(out / f"{name}.metrics.json", summary)
    print(dump_json({"run": name, "metrics": summary["metrics"], "flops": summary["flops"]}), end="")
    return 0


def _write_records(out: Path, header: list[str], rows: list[list[str]], name: str) -> None:
    (out / name).write_text(to_csv(header, rows))


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = _output_dir(args, cfg)
    plan = cfg.sweep or SweepPlan()
    train, test = generate_dataset(cfg.dataset)
    tasks = cfg.tasks
    keys = metric_keys(tasks)
    write_json(out / "config.json", cfg.resolved())

    if args.sparsity_ablation:
        seed = plan.seeds[0]
        b = train_baselines(cfg.model, tasks, train, test, cfg.optimizer, seed, plan.baseline_epochs)
        tau = cfg.sparsity.tau or [1.0] * len(tasks)
        rows = run_sparsity_ablation(cfg.sparsity.lambda_s, tau, cfg.model, tasks, train, test,
                                     cfg.optimizer, plan, b)
        header = ["variant"] + sweep_header(keys)
        csv_rows = [[r["variant"]] + row for r, row in zip(rows, sweep_rows(rows, keys))]
        _write_records(out, header, csv_rows, "ablation.csv")
        write_json(out / "ablation.json", {"records": rows, "metric_keys": keys, "stl": b.stl_metrics})
        print(aligned_text(header, csv_rows, formats={}), end="")
        return 0 if any(r["status"] == "ok" for r in rows) else EXIT_DIVERGED

    cells = plan.cells(len(tasks))
    index = {(lam, tuple(tau), seed): i for i, (lam, tau, seed) in enumerate(cells)}

    def collect(rec):
        i = index[(rec["lambda_s"], tuple(rec["tau"]), rec["seed"])]
        write_json(out / "cells" / f"cell-{i:03d}" / "record.json", rec)
        log.info("cell %d/%d lambda_s=%s tau=%s: %s", i + 1, len(cells), rec["lambda_s"],
                 fmt_tau(rec["tau"]), rec["status"])

    report = run_sweep(plan, cfg.model, tasks, train, test, cfg.optimizer, jobs=args.jobs, on_record=collect)
    _write_records(out, sweep_header(keys), sweep_rows(report.records, keys), "sweep.csv")
    _write_records(out, sweep_header(keys), sweep_rows(report.pareto, keys), "pareto.csv")
    write_json(out / "sweep.json", report.to_dict())
    ok = [r for r in report.records if r["status"] == "ok"]
    points = [(r["flops"] / 1e9, r["delta_mtl"]) for r in ok]
    front = [(r["flops"] / 1e9, r["delta_mtl"]) for r in report.pareto]
    refs = [("uniform MTL", s["mtl_uniform_delta"]) for s in report.baselines.values()][:1]
    (out / "pareto.svg").write_text(pareto_svg(points, front, [("single-task", 0.0)] + refs))
    print(f"{len(ok)}/{len(report.records)} cells succeeded; pareto front has {len(report.pareto)} points")
    if not ok:
        raise CliError("all_cells_failed", "no sweep cell succeeded", EXIT_DIVERGED)
    return 0


def cmd_prune(args) -> int:
    path = Path(args.checkpoint)
    try:
        enc, meta = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError("missing_checkpoint", f"checkpoint not found: {path}") from exc
    except (ContractError, KeyError, json.JSONDecodeError) as exc:
        raise CliError("bad_checkpoint", str(exc)) from exc
    out = Path(args.output) if args.output else path.parent
    out.mkdir(parents=True, exist_ok=True)
    stem = path.name.removesuffix(".json").removesuffix(".ckpt")

    pattern = extract_pattern(enc)
    pm = collapse(enc, pattern)
    before, after = count_flops(enc), count_flops(pm)
    save_pruned(pm, out / f"{stem}.pruned.json")
    write_json(out / f"{stem}.flops.json", {
        "convention": "flops = 2 * macs", "before": before.to_dict(), "after": after.to_dict(),
        "params": {"before": enc.network_param_count(), "after": pm.param_count(),
                   "pruned": enc.network_param_count() - pm.param_count()},
    })
    stats = gate_statistics(enc.bank, enc.mixer, [t.name for t in enc.tasks])
    write_json(out / f"{stem}.gates.json", dict(pattern.to_dict(), statistics=stats.to_dict()))
    result = {"run": stem, "flops_before": before.encoder_flops(), "flops_after": after.encoder_flops()}
    if args.verify:
        rng = np.random.default_rng(args.seed)
        x = rng.normal(size=(args.batch,) + tuple(enc.arch.input_shape))
        eq = verify_equivalence(enc, pm, x)
        result["equivalence"] = eq.to_dict()
        if not eq.passed:
            raise CliError("equivalence_failed",
                           f"collapsed model deviates by {max(eq.max_rel):.3e} (tolerance {eq.tolerance:g})",
                           EXIT_EQUIVALENCE)
    print(dump_json(result), end="")
    return 0


# ---------------------------------------------------------------------------
# report


@dataclass
class _Collected:
    tasks: list[str] | None = None
    directions: list[int] | None = None
    stl: dict[int, list[float]] = field(default_factory=dict)
    rows: dict[str, list[float]] = field(default_factory=dict)
    flops: dict[str, int] = field(default_factory=dict)
    gates: dict[str, dict] = field(default_factory=dict)

    def set_tasks(self, tasks, directions, where):
        if self.tasks is None:
            self.tasks, self.directions = list(tasks), list(directions)
        elif (self.tasks, self.directions) != (list(tasks), list(directions)):
            raise CliError("mismatched_runs", f"{where} covers different tasks than earlier runs")

    def add_row(self, name, values, flops, where):
        if name in self.rows:
            raise CliError("duplicate_run", f"two runs are both named {name!r} ({where})")
        self.rows[name] = values
        self.flops[name] = flops


def _collect(run_dirs: Sequence[str]) -> _Collected:
    c = _Collected()
    for d in sorted(run_dirs, key=lambda p: str(Path(p).resolve())):
        d = Path(d)
        if not d.is_dir():
            raise CliError("missing_run_dir", f"not a directory: {d}")
        tag = d.resolve().name
        for mpath in sorted(d.glob("*.metrics.json")):
            doc = json.loads(mpath.read_text())
            vals = [doc["metrics"][k] for k in sorted(doc["metrics"])]
            if doc["family"] == "stl":
                c.stl.setdefault(doc["task"], []).append(vals[0])
                continue
            keys = [f"{n}." for n in doc["tasks"]]
            ordered = [next(doc["metrics"][k] for k in doc["metrics"] if k.startswith(p)) for p in keys]
            c.set_tasks(doc["tasks"], doc["directions"], mpath)
            name = f"{tag}/{doc['run']}"
            c.add_row(name, ordered, doc["flops"], mpath)
            c.gates[name] = doc["gates"]
        sweep_path = d / "sweep.json"
        if sweep_path.exists():
            doc = json.loads(sweep_path.read_text())
            keys = doc["metric_keys"]
            names = [k.split(".")[0] for k in keys]
            cfg = RunConfig.from_dict(json.loads((d / "config.json").read_text()))
            c.set_tasks(names, [t.direction for t in cfg.tasks], sweep_path)
            for seed, base in sorted(doc["baselines"].items()):
                for t, k in enumerate(keys):
                    c.stl.setdefault(t, []).append(base["stl"][k])
                c.add_row(f"{tag}/mtl-uniform-seed{seed}", [base["mtl_uniform"][k] for k in keys], None, sweep_path)
            for r in doc["records"]:
                if r["status"] != "ok":
                    continue
                name = f"{tag}/gated[lambda_s={r['lambda_s']:g},tau={fmt_tau(r['tau'])},seed={r['seed']}]"
                c.add_row(name, [r["metrics"][k] for k in keys], r["flops"], sweep_path)
    return c


def _table_from_fixture(path) -> tuple[ScoreTable, dict]:
    doc = json.loads(Path(path).read_text())
    unknown = sorted(set(doc) - {"tasks", "directions", "rows", "baseline", "flops"})
    if unknown:
        raise CliError("bad_fixture", f"unknown key(s) in score fixture: {', '.join(unknown)}")
    try:
        table = ScoreTable(doc["tasks"], doc["directions"], baseline=doc.get("baseline", "STL"))
        for name in sorted(doc["rows"], key=lambda n: (n != table.baseline, n)):
            table.add(name, doc["rows"][name])
    except (KeyError, ContractError) as exc:
        raise CliError("bad_fixture", str(exc)) from exc
    return table, doc.get("flops", {})


def cmd_report(args) -> int:
    gates = {}
    if args.table:
        table, flops = _table_from_fixture(args.table)
    else:
        if not args.run_dirs:
            raise CliError("no_runs", "give run directories or --table")
        c = _collect(args.run_dirs)
        if c.tasks is None:
            if not c.stl:
                raise CliError("no_runs", "no metrics found in the given directories")
            n = max(c.stl) + 1
            c.tasks, c.directions = [f"task{t}" for t in range(n)], [0] * n
        table = ScoreTable(c.tasks, c.directions)
        flops = {}
        if c.stl:
            if sorted(c.stl) != list(range(len(c.tasks))):
                raise CliError("incomplete_baseline", "single-task runs do not cover every task")
            table.add("STL", [float(np.mean(c.stl[t])) for t in range(len(c.tasks))])
        for name in sorted(c.rows):
            table.add(name, c.rows[name])
            flops[name] = c.flops[name]
        gates = {k: c.gates[k] for k in sorted(c.gates)}
    header, rows = results_rows(table, flops)
    out = Path(args.output or "report")
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(to_csv(header, [["" if v is None else repr(v) if isinstance(v, float)
                                                      else str(v) for v in r] for r in rows]))
    text = aligned_text(header, rows)
    (out / "results.txt").write_text(text)
    write_json(out / "gate_stats.json", {"format": REPORT_FORMAT, "runs": gates})
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gatedmtl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="materialize the synthetic train/test splits")
    g.add_argument("config")
    g.add_argument("--output")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a single-task, hard-sharing or gated model")
    t.add_argument("config")
    mode = t.add_mutually_exclusive_group(required=True)
    mode.add_argument("--stl", type=int, metavar="TASK")
    mode.add_argument("--mtl-uniform", action="store_true")
    mode.add_argument("--interrogate", action="store_true")
    t.add_argument("--init", choices=["scratch", "from-stl"], default="scratch")
    t.add_argument("--stl-dir", help="where single-task checkpoints live (default: output dir)")
    t.add_argument("--seed", type=int)
    t.add_argument("--output")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="sparsity-weight x target sweep with pareto front")
    s.add_argument("config")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--sparsity-ablation", action="store_true",
                   help="compare none / hinge / l1 at the configured sparsity weight instead")
    s.add_argument("--output")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("prune", help="collapse a gated checkpoint into a static network")
    r.add_argument("checkpoint")
    r.add_argument("--verify", action="store_true")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--batch", type=int, default=32)
    r.add_argument("--output")
    r.set_defaults(func=cmd_prune)

    q = sub.add_parser("report", help="score table with relative delta and mean rank")
    q.add_argument("run_dirs", nargs="*")
    q.add_argument("--table", help="JSON score fixture instead of run directories")
    q.add_argument("--output")
    q.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc), "exit_code": exc.exit_code}),
              file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
