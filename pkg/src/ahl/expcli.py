"""Command-line front door: dataset generation, training, evaluation,
run comparison, and static SVG plots of width/reward trajectories.

Exit codes: 0 success, 1 validation/configuration, 2 runtime/numerical,
3 I/O or file format. ``--config FILE`` merges a flat JSON document with
the flags (flags win); the AHL_SEED environment variable overrides the
seed from either source.
"""

from __future__ import annotations

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import AhlError, ConfigurationError, FormatError, NumericalError
from .laoml import MODES, TrainConfig, evaluate_state, run_training
from .learner import load_learner
from .synthdata import gen_dataset, load_dataset, save_dataset

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd",
           "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigurationError(message)


def _parse_float_list(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigurationError(f"expected comma-separated numbers, got {text!r}") from exc
    if not values:
        raise ConfigurationError(f"expected at least one number, got {text!r}")
    return values


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in _parse_float_list(text))


def _ensure_clobberable(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ConfigurationError(
            f"refusing to overwrite {', '.join(existing)} (pass --force)")


def _nonempty_dir(path: Path) -> bool:
    return path.is_dir() and any(path.iterdir())


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if _nonempty_dir(out) and not args.force:
        raise ConfigurationError(f"refusing to write into non-empty {out} (pass --force)")
    split = gen_dataset(args.n, args.size, args.size, args.landmarks, args.seed)
    save_dataset(out, split)
    print(f"dataset: n={args.n} size={args.size}x{args.size} landmarks={args.landmarks} "
          f"seed={args.seed} split={len(split.train)}/{len(split.validation)}"
          f"/{len(split.test)} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_FLAG_TO_FIELD = {
    "mode": "mode", "epochs": "total_epochs", "warmup": "warmup",
    "t_prime": "t_prime", "k": "k_samples", "sigma_init": "sigma_init",
    "sigma_min": "sigma_min", "sigma_max": "sigma_max", "reward_c": "reward_c",
    "early_stop": "early_stop", "early_stop_window": "early_stop_window",
    "early_stop_threshold": "early_stop_threshold",
    "early_stop_start": "early_stop_start", "lr": "learner_lr",
    "controller_lr": "controller_lr", "batch": "batch", "threads": "threads",
    "augment": "augment", "sigma_broadcast": "sigma_broadcast",
    "pck": "pck_thresholds", "widths": "widths", "resolution": "resolution",
}


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file {p} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{p}: invalid JSON at char {exc.pos}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{p}: config must be a JSON object")
    return doc


def _merge_train_config(args) -> tuple[dict, list[int], str | None]:
    doc = _load_config_file(args.config)
    merged = {k: v for k, v in doc.items()}
    for flag, fieldname in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            merged[fieldname] = value
    seeds: list[int]
    if os.environ.get("AHL_SEED"):
        try:
            seeds = [int(os.environ["AHL_SEED"])]
        except ValueError as exc:
            raise ConfigurationError(
                f"AHL_SEED must be an integer, got {os.environ['AHL_SEED']!r}") from exc
    elif args.seeds is not None:
        seeds = list(args.seeds)
    elif args.seed is not None:
        seeds = [args.seed]
    elif "seed" in merged:
        seeds = [int(merged["seed"])]
    else:
        seeds = [0]
    data_path = args.data if args.data is not None else merged.get("data")
    return merged, seeds, data_path


def cmd_train(args) -> int:
    merged, seeds, data_path = _merge_train_config(args)
    if data_path is None:
        raise ConfigurationError("no dataset given (use --data or a config file)")
    out = Path(args.out)
    if len(seeds) == 1:
        run_dirs = [out]
    else:
        run_dirs = [out / f"seed{s}" for s in seeds]
    for d in run_dirs:
        if _nonempty_dir(d) and not args.force:
            raise ConfigurationError(f"refusing to write into non-empty {d} (pass --force)")
    data = load_dataset(data_path)
    for seed, run_dir in zip(seeds, run_dirs):
        cfg = TrainConfig.from_dict({**merged, "seed": seed})
        run_training(cfg, data, out_dir=run_dir, progress=print,
                     extra_echo={"data": str(data_path)})
        print(f"run complete: mode={cfg.mode} seed={seed} -> {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    run_dir = Path(args.run)
    ckpt = run_dir / "learner.ckpt"
    if not ckpt.exists():
        raise FormatError(f"{ckpt}: checkpoint missing")
    echo_path = run_dir / "config.echo.json"
    echo = json.loads(echo_path.read_text()) if echo_path.exists() else {}
    thresholds = args.pck if args.pck is not None else tuple(
        echo.get("pck_thresholds", (2.0, 3.0, 5.0)))
    if any(t <= 0 for t in thresholds):
        raise ConfigurationError("pck thresholds must be positive")
    resolution = float(echo.get("resolution", 1.0))
    decode = "soft" if echo.get("mode") == "coordreg" else "argmax"
    data = load_dataset(args.data)
    samples = getattr(data, args.split)
    state = load_learner(ckpt)
    summary, table = evaluate_state(state, samples, resolution, thresholds, decode=decode)
    summary["split"] = args.split

    out_json = run_dir / "evaluation.json"
    _ensure_clobberable([out_json], args.force)
    out_json.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"split={args.split} n={summary['n_images']}")
    for i, v in enumerate(summary["per_landmark_mre"]):
        print(f"L{i + 1} mre={v:.4f}")
    print(f"mean_mre={summary['mean_mre']:.4f} sd={summary['sd_mre']:.4f}")
    for t in thresholds:
        print(f"pck[{t:g}]={summary['pck'][str(t)]:.2f}%")
    return 0


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------

def _read_csv_rows(path: Path) -> list[dict]:
    if not path.exists():
        raise FormatError(f"{path}: missing run CSV")
    with open(path, newline="") as fh:
        try:
            return list(csv.DictReader(fh))
        except csv.Error as exc:
            raise FormatError(f"{path}: malformed CSV: {exc}") from exc


def _series_by_landmark(rows: list[dict], xkey: str, ykey: str, path: Path,
                        ) -> dict[int, tuple[list[float], list[float]]]:
    series: dict[int, tuple[list[float], list[float]]] = {}
    agg: dict[tuple[int, int], list[float]] = {}
    for row in rows:
        try:
            lm = int(row["landmark"])
            x = int(row[xkey])
            y = float(row[ykey])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed row {row!r}") from exc
        agg.setdefault((lm, x), []).append(y)
    for (lm, x), ys in sorted(agg.items()):
        xs, vals = series.setdefault(lm, ([], []))
        xs.append(float(x))
        vals.append(sum(ys) / len(ys))
    return series


def _svg_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def render_line_chart(path: Path, title: str, xlabel: str, ylabel: str,
                      traces: list[dict]) -> None:
    """Write a self-contained SVG line chart.

    Each trace dict: label, xs, ys, color, dash ('' for solid), run (int),
    landmark (int). Traces become ``<g class="trace" data-run data-landmark>``
    groups so downstream tooling can inspect the structure.
    """
    width, height = 860, 500
    ml, mr, mt, mb = 70, 180, 50, 60
    plot_w, plot_h = width - ml - mr, height - mt - mb
    all_x = [x for t in traces for x in t["xs"]]
    all_y = [y for t in traces for y in t["ys"]]
    x_lo, x_hi = (min(all_x), max(all_x)) if all_x else (0.0, 1.0)
    y_lo, y_hi = (min(all_y), max(all_y)) if all_y else (0.0, 1.0)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(x: float) -> float:
        return ml + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return mt + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml + plot_w / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{title}</text>',
        f'<rect x="{ml}" y="{mt}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#333"/>',
    ]
    for tx in _svg_ticks(x_lo, x_hi):
        px = sx(tx)
        parts.append(f'<line x1="{px:.1f}" y1="{mt + plot_h}" x2="{px:.1f}" '
                     f'y2="{mt + plot_h + 5}" stroke="#333"/>')
        parts.append(f'<text x="{px:.1f}" y="{mt + plot_h + 20}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{tx:g}</text>')
    for ty in _svg_ticks(y_lo, y_hi):
        py = sy(ty)
        parts.append(f'<line x1="{ml - 5}" y1="{py:.1f}" x2="{ml}" y2="{py:.1f}" '
                     f'stroke="#333"/>')
        parts.append(f'<text x="{ml - 8}" y="{py + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{ty:.3g}</text>')
    parts.append(f'<text x="{ml + plot_w / 2:.1f}" y="{height - 15}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13">{xlabel}</text>')
    parts.append(f'<text x="20" y="{mt + plot_h / 2:.1f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 20 {mt + plot_h / 2:.1f})">{ylabel}</text>')
    for trace in traces:
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(trace["xs"], trace["ys"]))
        dash = f' stroke-dasharray="{trace["dash"]}"' if trace["dash"] else ""
        parts.append(
            f'<g class="trace" data-run="{trace["run"]}" '
            f'data-landmark="{trace["landmark"]}">'
            f'<polyline fill="none" stroke="{trace["color"]}" stroke-width="1.5"{dash} '
            f'points="{pts}"/></g>'
        )
    legend_y = mt + 10
    for trace in traces:
        lx = ml + plot_w + 12
        dash = f' stroke-dasharray="{trace["dash"]}"' if trace["dash"] else ""
        parts.append(f'<line x1="{lx}" y1="{legend_y}" x2="{lx + 24}" y2="{legend_y}" '
                     f'stroke="{trace["color"]}" stroke-width="1.5"{dash}/>')
        parts.append(f'<text x="{lx + 30}" y="{legend_y + 4}" font-family="sans-serif" '
                     f'font-size="11">{trace["label"]}</text>')
        legend_y += 18
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def cmd_plot(args) -> int:
    run_dirs = [Path(r) for r in args.runs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sigma_path = out / "sigma_curves.svg"
    reward_path = out / "reward_curves.svg"
    _ensure_clobberable([sigma_path, reward_path], args.force)
    dashes = ("", "6,4")
    sigma_traces = []
    reward_traces = []
    for run_idx, run_dir in enumerate(run_dirs):
        tag = f" [{run_dir.name}]" if len(run_dirs) > 1 else ""
        sigma_rows = _read_csv_rows(run_dir / "sigma.csv")
        for lm, (xs, ys) in _series_by_landmark(sigma_rows, "iteration", "sigma",
                                                run_dir / "sigma.csv").items():
            sigma_traces.append({
                "label": f"L{lm + 1}-sigma{tag}", "xs": xs, "ys": ys,
                "color": PALETTE[lm % len(PALETTE)],
                "dash": dashes[run_idx % len(dashes)],
                "run": run_idx, "landmark": lm,
            })
        reward_rows = _read_csv_rows(run_dir / "reward.csv")
        for lm, (xs, ys) in _series_by_landmark(reward_rows, "iteration", "reward",
                                                run_dir / "reward.csv").items():
            reward_traces.append({
                "label": f"reward_{lm + 1}{tag}", "xs": xs, "ys": ys,
                "color": PALETTE[lm % len(PALETTE)],
                "dash": dashes[run_idx % len(dashes)],
                "run": run_idx, "landmark": lm,
            })
    render_line_chart(sigma_path, "Target width trajectories", "iteration",
                      "sigma (pixels)", sigma_traces)
    render_line_chart(reward_path, "Per-landmark reward", "iteration",
                      "reward (mean over samples)", reward_traces)
    print(f"wrote {sigma_path} and {reward_path}")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def cmd_compare(args) -> int:
    run_dirs = [Path(r) for r in args.runs]
    if len(run_dirs) < 2:
        raise ConfigurationError("compare needs at least two run directories")
    out_csv = Path(args.out)
    _ensure_clobberable([out_csv], args.force)
    rows = []
    n_lm = None
    for run_dir in run_dirs:
        summary_path = run_dir / "summary.json"
        if not summary_path.exists():
            raise FormatError(f"{summary_path}: missing run summary")
        summary = json.loads(summary_path.read_text())
        per_lm = summary["per_landmark_mre"]
        if n_lm is None:
            n_lm = len(per_lm)
        elif len(per_lm) != n_lm:
            raise ConfigurationError(
                f"{run_dir}: landmark count {len(per_lm)} differs from {n_lm}")
        rows.append({
            "run": run_dir.name, "mode": summary.get("mode", "?"),
            "seed": summary.get("seed", "?"), "per_lm": [float(v) for v in per_lm],
            "mean": float(summary["mean_mre"]), "sd": float(summary["sd_mre"]),
        })
    by_mode: dict[str, list[dict]] = {}
    for row in rows:
        by_mode.setdefault(row["mode"], []).append(row)
    for mode, group in by_mode.items():
        if len(group) > 1:
            per = np.mean([g["per_lm"] for g in group], axis=0)
            rows.append({
                "run": f"{mode}-mean", "mode": mode, "seed": "-",
                "per_lm": [float(v) for v in per],
                "mean": float(np.mean([g["mean"] for g in group])),
                "sd": float(np.mean([g["sd"] for g in group])),
            })
    best_lm = [min(r["per_lm"][j] for r in rows) for j in range(n_lm)]
    best_mean = min(r["mean"] for r in rows)
    header = ["run", "mode", "seed"] + [f"L{j + 1}" for j in range(n_lm)] + ["mean", "sd"]
    print("  ".join(f"{h:>12}" for h in header))
    for row in rows:
        cells = [f"{row['run']:>12}", f"{row['mode']:>12}", f"{str(row['seed']):>12}"]
        for j, v in enumerate(row["per_lm"]):
            mark = "*" if v == best_lm[j] else " "
            cells.append(f"{v:>11.4f}{mark}")
        mark = "*" if row["mean"] == best_mean else " "
        cells.append(f"{row['mean']:>11.4f}{mark}")
        cells.append(f"{row['sd']:>12.4f}")
        print("  ".join(cells))
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row["run"], row["mode"], row["seed"],
                             *[repr(v) for v in row["per_lm"]],
                             repr(row["mean"]), repr(row["sd"])])
    print(f"wrote {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ahl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic landmark dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--landmarks", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train in one of the four modes")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat JSON config; flags take precedence")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=_parse_int_list, help="comma-separated seed list")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--t-prime", dest="t_prime", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--sigma", "--sigma-init", dest="sigma_init", type=float)
    p.add_argument("--sigma-min", dest="sigma_min", type=float)
    p.add_argument("--sigma-max", dest="sigma_max", type=float)
    p.add_argument("--reward-c", dest="reward_c", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--controller-lr", dest="controller_lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--early-stop", dest="early_stop",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--early-stop-window", dest="early_stop_window", type=int)
    p.add_argument("--early-stop-threshold", dest="early_stop_threshold", type=float)
    p.add_argument("--early-stop-start", dest="early_stop_start", type=int)
    p.add_argument("--pck", type=_parse_float_list)
    p.add_argument("--sigma-broadcast", dest="sigma_broadcast",
                   choices=("per_landmark", "global"))
    p.add_argument("--widths", type=_parse_int_list)
    p.add_argument("--resolution", type=float)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a run checkpoint on a dataset split")
    p.add_argument("run")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--pck", type=_parse_float_list)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="emit sigma/reward SVG charts for one or two runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("compare", help="tabulate run summaries side by side")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", default="compare.csv")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except AhlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
