"""Command-line interface.

Subcommands::

    ldpbandit run CONFIG.json --out-dir DIR [--seed N] [--threads K] [--zero-noise]
    ldpbandit selftest [--out-dir DIR] [--seed N] [--n-draws N]
    ldpbandit report DIR [DIR ...] --out-dir DIR

Exit codes: 0 success, 1 invalid config/usage, 2 selftest gate failure.

``run`` executes one experiment described by a JSON config and writes
results.csv/summary.json (plus per-period traces for regret experiments)
under --out-dir.  ``selftest`` runs the built-in mechanism battery and
privacy certificates.  ``report`` merges previously written summaries into a
comparison table and renders the corresponding figures as PNG files next to
it.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .runner import ConfigError, ExperimentConfig, GateFailure, run_experiment

__all__ = ["main", "build_parser"]


class _Parser(argparse.ArgumentParser):
    """Argument errors are config errors: exit 1, not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ldpbandit",
                     description="Locally private contextual bandit "
                                 "experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one experiment config",
                           parents=[], add_help=True)
    run_p.add_argument("config", type=Path, help="JSON experiment config")
    run_p.add_argument("--out-dir", type=Path, required=True)
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    run_p.add_argument("--threads", type=int, default=1,
                       help="worker threads for replications")
    run_p.add_argument("--zero-noise", action="store_true",
                       help="diagnostic mode: disable privacy noise "
                            "(refused unless the config allows it)")

    self_p = sub.add_parser("selftest",
                            help="noise-moment battery and privacy "
                                 "certificates")
    self_p.add_argument("--out-dir", type=Path, default=None)
    self_p.add_argument("--seed", type=int, default=0)
    self_p.add_argument("--n-draws", type=int, default=100_000)

    rep_p = sub.add_parser("report",
                           help="merge summaries and render figures")
    rep_p.add_argument("dirs", type=Path, nargs="+",
                       help="output directories containing summary.json")
    rep_p.add_argument("--out-dir", type=Path, required=True)
    return parser


def _load_config(path: Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _print_gates(summary: dict) -> None:
    for name, ok in summary["gates"].items():
        print(f"  gate {name}: {'PASS' if ok else 'FAIL'}")


def _cmd_run(args) -> int:
    raw = _load_config(args.config)
    if args.seed is not None:
        raw = dict(raw)
        raw["seed"] = args.seed
    config = ExperimentConfig.from_dict(raw)
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    summary = run_experiment(config, args.out_dir,
                             zero_noise=args.zero_noise,
                             threads=args.threads)
    print(f"{config.kind} [{config.label}] hash={summary['config_hash']} "
          f"-> {args.out_dir}")
    _print_gates(summary)
    return 0


def _cmd_selftest(args) -> int:
    raw = {"experiment": "mechanism_selftest", "seed": args.seed,
           "n_draws": args.n_draws, "label": "selftest"}
    out_dir = args.out_dir if args.out_dir is not None \
        else Path("selftest_out")
    summary = run_experiment(raw, out_dir)
    _print_gates(summary)
    if not summary["gates_passed"]:
        failed = [k for k, ok in summary["gates"].items() if not ok]
        raise GateFailure(f"selftest gates failed: {', '.join(failed)}")
    print("selftest passed")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _load_summaries(dirs) -> list[tuple[Path, dict]]:
    out = []
    for d in dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise ConfigError(f"no summary.json under {d}")
        with open(path) as fh:
            out.append((Path(d), json.load(fh)))
    return out


def _curve_figure(ax, grid, series: dict[str, list[float]], xlabel, ylabel):
    for name, ys in sorted(series.items()):
        ys = np.asarray(ys, dtype=float)
        if np.all(ys > 0.0):
            ax.loglog(grid, ys, marker="o", label=name)
        else:
            ax.plot(grid, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)


def _render_figures(src: Path, summary: dict, out_dir: Path) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made: list[str] = []
    kind = summary["experiment"]
    label = summary["label"]
    body = summary["results"]
    if kind in ("mad_curve", "mse_lower_bound"):
        key = "mean_mad" if kind == "mad_curve" else "minimax_dmse"
        series = {name: entry[key]
                  for name, entry in body["estimators"].items()}
        fig, ax = plt.subplots(figsize=(5.5, 4))
        _curve_figure(ax, body["grid"], series, "samples n",
                      "error" if kind == "mad_curve" else "directional MSE")
        slopes = ", ".join(
            f"{n}: {e['slope']:.3f}" for n, e in
            sorted(body["estimators"].items()) if e.get("slope") is not None)
        ax.set_title(f"{label} ({slopes})", fontsize=9)
        fig.tight_layout()
        name = f"{label}_curve.png"
        fig.savefig(out_dir / name, dpi=120)
        plt.close(fig)
        made.append(name)
    elif kind == "regret_curve":
        series = {name: entry["mean_final_regret"]
                  for name, entry in body["policies"].items()}
        fig, ax = plt.subplots(figsize=(5.5, 4))
        _curve_figure(ax, body["grid"], series, "horizon T",
                      "cumulative regret")
        ax.set_title(label, fontsize=9)
        fig.tight_layout()
        name = f"{label}_regret.png"
        fig.savefig(out_dir / name, dpi=120)
        plt.close(fig)
        made.append(name)
        trace_dir = src / "traces"
        if trace_dir.is_dir():
            T_max = max(body["grid"])
            fig, ax = plt.subplots(figsize=(5.5, 4))
            drew = False
            for pol in sorted(body["policies"]):
                path = trace_dir / f"trace_{pol}_T{T_max}.csv"
                if path.exists():
                    data = np.genfromtxt(path, delimiter=",", names=True)
                    ax.plot(data["t"], data["cum_regret"], label=pol)
                    drew = True
            if drew:
                ax.set_xlabel("period t")
                ax.set_ylabel("cumulative regret")
                ax.grid(True, alpha=0.3)
                ax.legend(fontsize=8)
                ax.set_title(f"{label} traces, T={T_max}", fontsize=9)
                fig.tight_layout()
                name = f"{label}_traces.png"
                fig.savefig(out_dir / name, dpi=120)
                made.append(name)
            plt.close(fig)
    elif kind == "coverage_audit":
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.bar(["coverage"], [body["coverage_rate"]])
        ax.axhline(summary["config"]["gates"].get("min_coverage", 0.9),
                   color="red", linestyle="--", linewidth=1)
        ax.set_ylim(0, 1.05)
        ax.set_title(f"{label}: coverage {body['coverage_rate']:.3f}",
                     fontsize=9)
        fig.tight_layout()
        name = f"{label}_coverage.png"
        fig.savefig(out_dir / name, dpi=120)
        plt.close(fig)
        made.append(name)
    return made


def _cmd_report(args) -> int:
    summaries = _load_summaries(args.dirs)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    figures: list[str] = []
    for src, summary in summaries:
        gates = summary.get("gates", {})
        gate_text = ";".join(f"{k}={'pass' if v else 'fail'}"
                             for k, v in sorted(gates.items())) or "none"
        rows.append((summary["label"], summary["experiment"],
                     summary["config_hash"],
                     "pass" if summary.get("gates_passed", True) else "fail",
                     gate_text))
        figures.extend(_render_figures(src, summary, out_dir))
    with open(out_dir / "report.csv", "w") as fh:
        fh.write("label,experiment,config_hash,gates_passed,gate_detail\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    print(f"report: {len(rows)} summaries -> {out_dir / 'report.csv'}")
    for name in figures:
        print(f"  figure {out_dir / name}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "selftest":
            return _cmd_selftest(args)
        return _cmd_report(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except GateFailure as exc:
        print(f"selftest FAILED: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
