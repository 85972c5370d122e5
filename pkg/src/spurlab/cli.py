"""Command-line entry point.

Subcommands::

    spurlab generate  --config cfg.json --out dir    scenario files + manifest
    spurlab train     --config cfg.json --out dir    run records over seeds x grid
    spurlab localspur --config cfg.json --out dir    gap reports
    spurlab analyze   --config cfg.json --out dir    feature reports
    spurlab report    --run-dir dir --out dir        aggregated CSV + SVG plots

The config file is the source of truth; ``--seeds``, ``--per-epoch`` and
``--out`` override it. Exit codes: 0 ok, 1 config error, 2 IO/format
error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import features, metrics, nn, persist, scenario as scen, training
from .config import ConfigError, RunConfig, apply_cell, load_run_config, run_id_for
from .persist import ManifestError
from .scenario import FormatError, build_class_incremental_scenario, build_scenario

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_RUNTIME = 3


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, FormatError, FileNotFoundError, OSError) as e:
        print(f"io/format error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # noqa: BLE001
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spurlab")
    parser.set_defaults(command=None)
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seeds", default=None, help="comma-separated seed list override")
        p.add_argument("--per-epoch", action="store_true", help="also evaluate after every epoch")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("generate", help="materialize a scenario to SPFV files + manifest")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the continual trainer over seeds x grid")
    common(p)
    p.add_argument("--workers", type=int, default=1, help="parallel runs (process pool)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("localspur", help="run the multi-head vs single-head gap protocol")
    common(p)
    p.set_defaults(func=cmd_localspur)

    p = sub.add_parser("analyze", help="classify the generator's injected features")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="aggregate run records into CSV + SVG plots")
    p.add_argument("--run-dir", required=True, help="directory produced by `train`")
    p.add_argument("--out", default=None, help="output directory (default: <run-dir>/report)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def _load(args) -> tuple[RunConfig, Path]:
    cfg = load_run_config(args.config)
    if args.seeds:
        try:
            cfg.seeds = [int(s) for s in args.seeds.split(",") if s]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}")
        if not cfg.seeds:
            raise ConfigError("--seeds resolved to an empty list")
    if getattr(args, "per_epoch", False):
        cfg.per_epoch = True
    out = args.out or cfg.out
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _scenario_for(cfg: RunConfig, run_seed: int | None = None):
    spec = cfg.scenario_spec
    if run_seed is not None and not cfg.scenario_fixed:
        # derive a per-run scenario seed so seed-averaging also averages
        # over generator draws
        mixed = int(np.random.SeedSequence((spec.seed, run_seed)).generate_state(1)[0])
        spec = replace(spec, seed=mixed, colors=None)
    return build_scenario(spec)


def cmd_generate(args) -> int:
    cfg, out = _load(args)
    scenario = _scenario_for(cfg)
    persist.save_manifest(scenario.spec if scenario.spec else cfg.scenario_spec, out / "manifest.json")
    for task in scenario.tasks:
        persist.save_spfv(task.train, out / f"task_{task.task_id:02d}_train.spfv")
        persist.save_spfv(task.eval_spurious, out / f"task_{task.task_id:02d}_eval.spfv")
    persist.save_spfv(scenario.clean_test, out / "clean_test.spfv")
    _say(args, f"wrote {len(scenario.tasks)} tasks + clean test + manifest under {out}")
    return EXIT_OK


def _one_training_run(cfg: RunConfig, cell: dict, seed: int, out: Path) -> dict:
    trainer, spec = apply_cell(cfg.trainer, cfg.scenario_spec, cell, seed)
    sub = replace(cfg, scenario_spec=spec, trainer=trainer)
    scenario = _scenario_for(sub, run_seed=seed)
    run_id = run_id_for(cell, seed)
    record, model = training.run_scenario(scenario, trainer, run_id=run_id, per_epoch_eval=cfg.per_epoch)
    run_dir = out / "runs" / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "record.csv").write_text(record.to_csv())
    omega = metrics.omega(record.post_task_accuracies("clean_test"))
    summary = {
        "run_id": run_id,
        "seed": seed,
        "method": trainer.method,
        "correlation_p": spec.correlation_p,
        "support_s": spec.support_s,
        "n_tasks": spec.n_tasks,
        "penalty_weight": trainer.penalty_weight,
        "ib_weight": trainer.ib_weight,
        "dro_eta": trainer.dro_eta,
        "lr": trainer.lr,
        "buffer_per_class": trainer.buffer_per_class,
        "omega_clean": omega,
        "final_clean_accuracy": record.post_task_accuracies("clean_test")[-1],
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    # timestamps live only in the sidecar, never in record/summary
    (run_dir / "meta.json").write_text(json.dumps({"finished_unix": time.time()}) + "\n")
    return summary


def cmd_train(args) -> int:
    cfg, out = _load(args)
    cells = cfg.grid_cells()
    jobs = [(cell, seed) for cell in cells for seed in cfg.seeds]
    _say(args, f"grid: {len(cells)} cells x {len(cfg.seeds)} seeds = {len(jobs)} runs")
    workers = max(1, getattr(args, "workers", 1))
    summaries = []
    if workers == 1:
        for cell, seed in jobs:
            summary = _one_training_run(cfg, cell, seed, out)
            _say(args, f"  {summary['run_id']}: omega={summary['omega_clean']:.3f}")
            summaries.append(summary)
    else:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_one_training_run, cfg, cell, seed, out) for cell, seed in jobs]
            for fut in futures:
                summary = fut.result()
                _say(args, f"  {summary['run_id']}: omega={summary['omega_clean']:.3f}")
                summaries.append(summary)
    summaries.sort(key=lambda s: s["run_id"])
    (out / "summaries.json").write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_localspur(args) -> int:
    cfg, out = _load(args)
    proto = cfg.protocol
    n_tasks = proto.get("n_tasks", 5)
    classes_per_task = proto.get("classes_per_task", 2)
    latent_dim = proto.get("latent_dim", 64)
    trunk_kind = proto.get("trunk", "random_projection")
    spfv_dir = proto.get("scenario_spfv_dir")
    reports = []
    for seed in cfg.seeds:
        if spfv_dir is not None:
            ci = persist.load_scenario_dir(spfv_dir)
        else:
            sspec = cfg.scenario_spec.synth or scen.SynthSpec()
            ci = build_class_incremental_scenario(sspec, n_tasks, seed, classes_per_task)
        if trunk_kind == "random_projection":
            trunk = metrics.make_random_projection_trunk(ci.input_dim, latent_dim, seed)
        elif trunk_kind == "identity":
            trunk = []  # imported features are used as the latents directly
        elif isinstance(trunk_kind, str):
            trunk = persist.load_checkpoint(trunk_kind).trunk
        else:
            raise ConfigError(f"field 'eval.protocol.trunk': unknown trunk {trunk_kind!r}")
        pcfg = metrics.ProtocolConfig(
            epochs_per_task=proto.get("epochs_per_task", 15),
            batch_size=proto.get("batch_size", 32),
            lr=proto.get("lr", 0.1),
            momentum=proto.get("momentum", 0.9),
            seed=seed,
        )
        report = metrics.local_spurious_protocol(ci, trunk, pcfg)
        reports.append(report)
        _say(args, "  seed %d: gaps %s" % (
            seed, {k: round(v.gap, 3) for k, v in report.heads.items()}))
    (out / "gap_reports.json").write_text(
        json.dumps([r.to_json_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    rows = [["head_kind", "seed", "task_idx", "mask_mode", "accuracy"]]
    for r in reports:
        for kind, hg in r.heads.items():
            for t, (al, ag) in enumerate(zip(hg.per_task_local, hg.per_task_global)):
                rows.append([kind, r.seed, t, "per_task", f"{al!r}"])
                rows.append([kind, r.seed, t, "all_classes", f"{ag!r}"])
    _write_csv(out / "gap_breakdown.csv", rows)
    _gap_svg(reports, out / "gap_bars.svg")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg, out = _load(args)
    scenario = _scenario_for(cfg)
    reports = features.analyze_scenario(scenario)
    (out / "feature_reports.json").write_text(
        json.dumps([r.to_json_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    _say(args, f"wrote {len(reports)} feature reports under {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    out = Path(args.out) if args.out else run_dir / "report"
    summaries_path = run_dir / "summaries.json"
    runs_dir = run_dir / "runs"
    if not summaries_path.exists() and not runs_dir.exists():
        raise FileNotFoundError(f"no runs found under {run_dir}")
    out.mkdir(parents=True, exist_ok=True)
    if summaries_path.exists():
        summaries = json.loads(summaries_path.read_text())
    else:
        summaries = []
        for sf in sorted(runs_dir.glob("*/summary.json")):
            summaries.append(json.loads(sf.read_text()))
    if not summaries:
        raise FileNotFoundError(f"no runs found under {run_dir}")

    rows = [["run_id", "method", "correlation_p", "seed", "omega_clean", "final_clean_accuracy"]]
    for s in summaries:
        rows.append([s["run_id"], s["method"], s["correlation_p"], s["seed"],
                     f"{s['omega_clean']!r}", f"{s['final_clean_accuracy']!r}"])
    _write_csv(out / "aggregated.csv", rows)

    # omega vs correlation (mean +- std over seeds, one line per method)
    cells: dict[tuple[str, float], list[float]] = {}
    for s in summaries:
        cells.setdefault((s["method"], float(s["correlation_p"])), []).append(s["omega_clean"])
    rows = [["method", "correlation_p", "omega_mean", "omega_std", "n_seeds"]]
    for (method, p), vals in sorted(cells.items()):
        rows.append([method, p, f"{float(np.mean(vals))!r}", f"{float(np.std(vals))!r}", len(vals)])
    _write_csv(out / "omega_vs_correlation.csv", rows)
    _omega_svg(cells, out / "omega_vs_correlation.svg")

    # per-epoch / per-task accuracy traces
    trace_rows = [["run_id", "task_idx", "epoch", "split", "metric", "value"]]
    for rec_path in sorted(runs_dir.glob("*/record.csv")):
        record = metrics.RunRecord.from_csv(rec_path.read_text())
        for e in record.entries:
            if e.metric in ("accuracy", "epoch_accuracy") and e.split == "clean_test":
                trace_rows.append([record.run_id, e.task_idx, e.epoch, e.split, e.metric, f"{e.value!r}"])
    _write_csv(out / "clean_test_traces.csv", trace_rows)
    _trace_svg(runs_dir, out / "clean_test_traces.svg")

    # gap bars, when a localspur pass left its reports in the run dir
    gaps_path = run_dir / "gap_reports.json"
    if gaps_path.exists():
        docs = json.loads(gaps_path.read_text())
        rows = [["head_kind", "seed", "a_local", "a_global", "gap"]]
        for d in docs:
            for kind, h in sorted(d["heads"].items()):
                rows.append([kind, d["seed"], f"{h['a_local']!r}", f"{h['a_global']!r}", f"{h['gap']!r}"])
        _write_csv(out / "gap_summary.csv", rows)
        _gap_svg_from_docs(docs, out / "gap_bars.svg")
    if not args.quiet:
        print(f"report written under {out}")
    return EXIT_OK


def _write_csv(path: Path, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def _mpl():
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "spurlab"
    import matplotlib.pyplot as plt
    return plt


def _save_svg(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def _omega_svg(cells: dict, path: Path) -> None:
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = sorted({m for m, _ in cells})
    for method in methods:
        ps = sorted(p for m, p in cells if m == method)
        means = [float(np.mean(cells[(method, p)])) for p in ps]
        stds = [float(np.std(cells[(method, p)])) for p in ps]
        ax.errorbar(ps, means, yerr=stds, marker="o", capsize=3, label=method)
    ax.set_xlabel("shortcut correlation p")
    ax.set_ylabel("averaged clean-test accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def _trace_svg(runs_dir: Path, path: Path) -> None:
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(7, 4))
    for rec_path in sorted(runs_dir.glob("*/record.csv")):
        record = metrics.RunRecord.from_csv(rec_path.read_text())
        per_epoch = [(e.task_idx, e.epoch, e.value) for e in record.entries
                     if e.split == "clean_test" and e.metric == "epoch_accuracy"]
        if per_epoch:
            ys = [v for _, _, v in per_epoch]
        else:
            ys = record.post_task_accuracies("clean_test")
        ax.plot(range(len(ys)), ys, alpha=0.7, label=record.run_id)
    ax.set_xlabel("evaluation step")
    ax.set_ylabel("clean-test accuracy")
    ax.set_ylim(0, 1)
    if len(ax.lines) <= 12:
        ax.legend(fontsize=6)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def _gap_svg(reports, path: Path) -> None:
    _gap_svg_from_docs([r.to_json_dict() for r in reports], path)


def _gap_svg_from_docs(docs, path: Path) -> None:
    plt = _mpl()
    fig, ax = plt.subplots(figsize=(6, 4))
    kinds = [nn.LINEAR, nn.WEIGHTNORM, nn.MEANLAYER]
    x = np.arange(len(kinds))
    locals_ = [float(np.mean([d["heads"][k]["a_local"] for d in docs])) for k in kinds]
    globals_ = [float(np.mean([d["heads"][k]["a_global"] for d in docs])) for k in kinds]
    width = 0.35
    ax.bar(x - width / 2, locals_, width, label="per-task mask")
    ax.bar(x + width / 2, globals_, width, label="all classes")
    ax.set_xticks(x, kinds)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


if __name__ == "__main__":
    sys.exit(main())
