"""Command-line entry point: ``python -m offline_pretrain <subcommand>``.

Exit codes: 0 success, 2 property failure, 3 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import VisitMode, content_hash, save_jsonl
from .envs import (BehaviorKind, BehaviorPolicySpec, generate_dataset, pointmass_env,
                   random_tabular_mdp, score_anchors)
from .harness import (ExperimentConfig, evaluate_policy, normalized_score, run_experiment,
                      train_seed, windowed_scores, write_metrics)
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .tabular import (InitStrategy, contraction_iteration_bound, fqi_init_sweep,
                      solve_optimal_tabular, table1_expected, table1_grid)

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG = 0, 2, 3


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _echo(name: str, cfg: dict) -> None:
    print(f"[{name}] config: {json.dumps(cfg, sort_keys=True, default=str)}")


def _load_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _out_dir(path: Optional[str], default: str) -> Path:
    out = Path(path or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- gen-data ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = {"dim": 2, "sparse": False, "quality": 0.5, "episodes": 200,
           "behavior": BehaviorKind.SCRIPTED_PROPORTIONAL.value, "noise_scale": 1.0, "seed": 0}
    cfg.update(_load_json(args.config))
    for key in ("dim", "quality", "episodes", "behavior"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if args.sparse:
        cfg["sparse"] = True
    if args.seed is not None:
        cfg["seed"] = args.seed
    _echo("gen-data", cfg)
    env = pointmass_env(int(cfg["dim"]), bool(cfg["sparse"]))
    spec = BehaviorPolicySpec(BehaviorKind(cfg["behavior"]), float(cfg["quality"]),
                              float(cfg["noise_scale"]), int(cfg["seed"]))
    ds = generate_dataset(env, spec, int(cfg["episodes"]), int(cfg["seed"]))
    out = _out_dir(args.out, "data")
    path = save_jsonl(ds, out / f"{ds.dataset_id}.jsonl")
    manifest = {
        "env": {"name": env.name, "dim": env.dim, "sparse": env.sparse,
                "timeout_limit": env.timeout_limit},
        "policy": {"kind": spec.kind.value, "quality": spec.quality,
                   "noise_scale": spec.noise_scale},
        "seed": spec.seed, "episodes": int(cfg["episodes"]),
        "anchors": score_anchors(env), "content_hash": content_hash(ds),
    }
    (out / f"{ds.dataset_id}.manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {path} ({len(ds)} transitions)")
    return EXIT_OK


# --- table1 ----------------------------------------------------------------------


def _fmt_cell(v: float) -> str:
    return f"{v:+g}" if v != 0 else "0"


def cmd_table1(args) -> int:
    visit = VisitMode.FIRST_VISIT if args.visit_mode == "first" else VisitMode.EVERY_VISIT
    _echo("table1", {"visit_mode": visit.value, "lr": args.lr, "gamma": 1.0})
    t0 = time.perf_counter()
    zero, mc, _, _ = table1_grid(visit, lr=args.lr)
    cols = ["Q(0,R)", "Q(1,L)", "Q(1,R)", "Q(2,R)"]
    print("epoch | zero init: " + " ".join(f"{c:>7}" for c in cols)
          + " | MC init: " + " ".join(f"{c:>7}" for c in cols))
    for k in range(zero.shape[0]):
        print(f"{k:5d} |            " + " ".join(f"{_fmt_cell(v):>7}" for v in zero[k])
              + " |          " + " ".join(f"{_fmt_cell(v):>7}" for v in mc[k]))
    if args.lr != 1.0:
        print("non-reference setting (lr != 1); no comparison against the reference table")
        return EXIT_OK
    ez, em = table1_expected(visit)
    for name, got, exp in (("zero", zero, ez), ("MC", mc, em)):
        diff = np.argwhere(got != exp)
        if diff.size:
            k, c = diff[0]
            print(f"FAIL: {name} init epoch {k} {cols[c]} = {got[k, c]:g}, expected {exp[k, c]:g}")
            return EXIT_PROPERTY
    print(f"PASS: all {zero.size + mc.size} cells match ({time.perf_counter() - t0:.3f}s)")
    return EXIT_OK


# --- fqi-study ---------------------------------------------------------------------


def fqi_study(n_states: int, n_actions: int, seeds: Sequence[int], betas: Sequence[float],
              delta: float, noise: float, gamma: float) -> list[dict]:
    rows = []
    for seed in seeds:
        mdp = random_tabular_mdp(n_states, n_actions, seed)
        q_star = solve_optimal_tabular(mdp, gamma, tol=1e-13)
        inits = [InitStrategy.interpolated(b, q_star) for b in betas]
        for rep in fqi_init_sweep(mdp, gamma, inits, delta, noise_scale=noise, seed=seed):
            bound = rep.bound(gamma)
            rows.append({
                "seed": seed, "beta": rep.beta, "iterations": rep.iterations,
                "init_error": rep.init_error, "final_error": rep.final_error,
                "noise_free_bound": contraction_iteration_bound(rep.init_error, delta, gamma),
                "bound_holds": all(e <= b + 1e-12 for e, b in zip(rep.errors, bound)),
                "converged": rep.converged,
            })
    return rows


def median_iterations(rows: Sequence[dict], betas: Sequence[float]) -> list[float]:
    return [float(np.median([r["iterations"] for r in rows if r["beta"] == b])) for b in betas]


def cmd_fqi_study(args) -> int:
    cfg = {"n_states": 10, "n_actions": 4, "seeds": 20, "betas": [0.0, 0.25, 0.5, 0.75, 1.0],
           "delta": 1e-3, "noise": 0.0, "gamma": 0.9}
    cfg.update(_load_json(args.config))
    for key in ("n_states", "n_actions", "seeds", "betas", "delta", "noise", "gamma"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    seeds = list(range(args.seed or 0, (args.seed or 0) + int(cfg["seeds"])))
    betas = sorted(float(b) for b in cfg["betas"])
    if not betas or not seeds:
        raise ConfigError("betas and seeds must be non-empty")
    if any(not 0.0 <= b <= 1.0 for b in betas):
        raise ConfigError("betas must lie in [0, 1]")
    _echo("fqi-study", cfg)
    t0 = time.perf_counter()
    rows = fqi_study(int(cfg["n_states"]), int(cfg["n_actions"]), seeds, betas,
                     float(cfg["delta"]), float(cfg["noise"]), float(cfg["gamma"]))
    out = _out_dir(args.out, "fqi")
    path = out / "fqi_study.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    med = median_iterations(rows, betas)
    monotone = all(a >= b for a, b in zip(med, med[1:]))
    bounds = all(r["bound_holds"] for r in rows)
    print("median iterations by beta: "
          + ", ".join(f"{b:g}:{m:g}" for b, m in zip(betas, med)))
    print(f"wrote {path} ({len(rows)} rows, {time.perf_counter() - t0:.2f}s)")
    if not (monotone and bounds):
        print(f"FAIL: monotone={monotone} error_bound_holds={bounds}")
        return EXIT_PROPERTY
    print("PASS: median iterations non-increasing in beta; error bound holds")
    return EXIT_OK


# --- train / evaluate -------------------------------------------------------------


def _experiment_config(args) -> ExperimentConfig:
    raw = _load_json(args.config)
    try:
        cfg = ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    elif cfg.output_dir is None:
        cfg = replace(cfg, output_dir="runs")
    return cfg


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    _echo("train", cfg.to_dict())
    out = _out_dir(cfg.output_dir, "runs")
    env = cfg.make_env()
    ds = cfg.dataset.load(env)
    anchors = score_anchors(env)
    failed = []
    for seed in cfg.seeds:
        try:
            records, ac = train_seed(cfg, seed, ds, anchors)
        except Exception as exc:  # noqa: BLE001  (report and continue with other seeds)
            print(f"seed {seed} failed: {exc}")
            failed.append(seed)
            continue
        write_metrics(records, out / f"{cfg.name}_seed{seed}.csv")
        save_checkpoint(out / f"{cfg.name}_seed{seed}_actor.json", ac.actor_cfg, ac.actor)
        score = float(np.mean(windowed_scores(records, cfg.window_fraction)))
        print(f"seed {seed}: windowed normalized score {score:.4f}")
    return EXIT_PROPERTY if failed and len(failed) == len(cfg.seeds) else EXIT_OK


def cmd_evaluate(args) -> int:
    raw = _load_json(args.config)
    env_cfg = raw.get("env", {"dim": 2, "sparse": False})
    _echo("evaluate", {"env": env_cfg, "checkpoint": args.checkpoint,
                       "episodes": args.episodes, "seed": args.seed or 0})
    try:
        cfg, params, _ = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}") from exc
    env = pointmass_env(**env_cfg)
    if cfg.input_dim != env.obs_dim:
        raise ConfigError(f"checkpoint expects {cfg.input_dim} inputs, env has {env.obs_dim}")

    from .nn.mlp import Network

    net = Network(cfg, params)

    def policy(obs, rng=None):
        return np.tanh(net(obs)[..., : env.act_dim])

    raw_ret = evaluate_policy(env, policy, args.episodes, args.seed or 0)
    anchors = score_anchors(env)
    print(f"mean return {raw_ret:.4f}; normalized score "
          f"{normalized_score(raw_ret, anchors['random'], anchors['expert']):.4f}")
    return EXIT_OK


# --- sweep -------------------------------------------------------------------------


def _set_path(d: dict, path: str, value) -> None:
    keys = path.split(".")
    for k in keys[:-1]:
        if d.get(k) is None:
            d[k] = {}
        d = d[k]
    d[keys[-1]] = value


def expand_grid(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("sweep grid must be non-empty")
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _sweep_task(task):
    point_id, point, cfg_dict, seed, out = task
    try:
        cfg = ExperimentConfig.from_dict(cfg_dict)
        cfg = replace(cfg, seeds=(seed,), output_dir=str(out), name=f"point{point_id}")
        res = run_experiment(cfg)
        if res.report.failures:
            return point_id, point, seed, None, res.report.failures[seed].splitlines()[0]
        return point_id, point, seed, res.report.per_seed[seed], ""
    except Exception as exc:  # noqa: BLE001
        return point_id, point, seed, None, f"{type(exc).__name__}: {exc}"


def cmd_sweep(args) -> int:
    raw = _load_json(args.config)
    if "grid" not in raw:
        raise ConfigError("sweep config needs a 'grid' mapping")
    base = raw.get("base", {})
    points = expand_grid(raw["grid"])
    seeds = [args.seed] if args.seed is not None else list(base.get("seeds", [0]))
    _echo("sweep", {"base": base, "grid": raw["grid"], "seeds": seeds, "jobs": args.jobs})
    out = _out_dir(args.out, "sweep")
    tasks = []
    for i, point in enumerate(points):
        cfg_dict = json.loads(json.dumps(base))
        for path, value in point.items():
            _set_path(cfg_dict, path, value)
        try:
            ExperimentConfig.from_dict(cfg_dict)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"grid point {point}: {exc}") from exc
        pdir = out / f"point{i}"
        pdir.mkdir(exist_ok=True)
        tasks += [(i, point, cfg_dict, s, pdir) for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_task, tasks))
    else:
        results = [_sweep_task(t) for t in tasks]
    keys = sorted(raw["grid"])
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["point", *keys, "seed", "windowed_score", "error"])
        for pid, point, seed, score, err in sorted(results, key=lambda r: (r[0], r[2])):
            w.writerow([pid, *[json.dumps(point[k]) for k in keys], seed,
                        "" if score is None else format(score, ".9g"), err])
    n_fail = sum(r[3] is None for r in results)
    print(f"wrote {out / 'aggregate.csv'} ({len(results)} runs, {n_fail} failed)")
    return EXIT_OK if n_fail < len(results) else EXIT_PROPERTY


# --- plot ------------------------------------------------------------------------


@dataclass(frozen=True)
class PlotSpec:
    inputs: tuple
    x: str = "step"
    y: str = "normalized_score"
    group_by: str = "file"
    smoothing: int = 1
    out: str = "plot.svg"
    title: str = ""


def _read_columns(path, needed: Sequence[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in needed if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path} is missing column(s): {', '.join(missing)}")
        return list(reader)


def plot_series(spec: PlotSpec) -> dict:
    """Group -> (xs, mean, std) after per-series trailing smoothing.

    A series is one (file, seed) curve; groups are files (``group_by='file'``) or
    values of the ``group_by`` column.
    """
    if spec.smoothing < 1:
        raise ConfigError("smoothing window must be >= 1")
    needed = [spec.x, spec.y] + ([] if spec.group_by == "file" else [spec.group_by])
    series: dict = {}
    for path in spec.inputs:
        rows = _read_columns(path, needed)
        for row in rows:
            if row[spec.y] == "" or row[spec.x] == "":
                continue
            group = Path(path).stem if spec.group_by == "file" else row[spec.group_by]
            key = (path, row.get("seed", ""))
            series.setdefault(group, {}).setdefault(key, []).append(
                (float(row[spec.x]), float(row[spec.y])))
    out = {}
    for group, curves in series.items():
        by_x: dict = {}
        for pts in curves.values():
            pts.sort()
            ys = np.array([p[1] for p in pts])
            csum = np.cumsum(np.insert(ys, 0, 0.0))
            w = spec.smoothing
            smooth = [(csum[i + 1] - csum[max(0, i + 1 - w)]) / min(w, i + 1)
                      for i in range(len(ys))]
            for (x, _), v in zip(pts, smooth):
                by_x.setdefault(x, []).append(v)
        xs = sorted(by_x)
        out[group] = (np.array(xs), np.array([np.mean(by_x[x]) for x in xs]),
                      np.array([np.std(by_x[x]) for x in xs]))
    return out


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def render_svg(data: dict, spec: PlotSpec, width: int = 640, height: int = 400) -> str:
    if not data:
        raise ConfigError("nothing to plot")
    left, right, top, bottom = 60, 150, 30, 45
    xs = np.concatenate([d[0] for d in data.values()])
    lo = np.concatenate([d[1] - d[2] for d in data.values()])
    hi = np.concatenate([d[1] + d[2] for d in data.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(lo.min()), float(hi.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for i in range(5):
        yv = y0 + i * (y1 - y0) / 4
        xv = x0 + i * (x1 - x0) / 4
        parts.append(f'<text x="{left - 6}" y="{py(yv) + 4:.1f}" font-size="11" '
                     f'text-anchor="end">{yv:.3g}</text>')
        parts.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" font-size="11" '
                     f'text-anchor="middle">{xv:.3g}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 8}" font-size="12" '
                 f'text-anchor="middle">{spec.x}</text>')
    parts.append(f'<text x="14" y="{top + ph / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2})">{spec.y}</text>')
    if spec.title:
        parts.append(f'<text x="{left + pw / 2}" y="18" font-size="13" '
                     f'text-anchor="middle">{spec.title}</text>')
    for i, (group, (gx, mean, std)) in enumerate(sorted(data.items())):
        color = _COLORS[i % len(_COLORS)]
        upper = [f"{px(x):.2f},{py(m + s):.2f}" for x, m, s in zip(gx, mean, std)]
        lower = [f"{px(x):.2f},{py(m - s):.2f}" for x, m, s in zip(gx, mean, std)][::-1]
        parts.append(f'<polygon class="band" data-group="{group}" points="{" ".join(upper + lower)}" '
                     f'fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{px(x):.2f},{py(m):.2f}" for x, m in zip(gx, mean))
        parts.append(f'<polyline class="mean" data-group="{group}" points="{line}" fill="none" '
                     f'stroke="{color}" stroke-width="1.8"/>')
        ly = top + 14 + 16 * i
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 28}" '
                     f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 32}" y="{ly}" font-size="11">{group}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    raw = _load_json(args.config)
    inputs = tuple(args.inputs or raw.get("inputs", ()))
    if not inputs:
        raise ConfigError("plot needs at least one input CSV")
    for p in inputs:
        if not Path(p).exists():
            raise ConfigError(f"input {p} does not exist")
    out = Path(args.out) if args.out else Path(raw.get("out", "plot.svg"))
    if out.suffix != ".svg":
        out = out / "plot.svg"
    spec = PlotSpec(inputs, args.x or raw.get("x", "step"),
                    args.y or raw.get("y", "normalized_score"),
                    args.group_by or raw.get("group_by", "file"),
                    args.smoothing or int(raw.get("smoothing", 1)), str(out),
                    raw.get("title", ""))
    _echo("plot", spec.__dict__)
    svg = render_svg(plot_series(spec), spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    print(f"wrote {out}")
    return EXIT_OK


# --- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="offline_pretrain", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, jobs: bool = False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (or file for plot)")
        if jobs:
            p.add_argument("--jobs", type=int, default=1)
        return p

    p = common(sub.add_parser("gen-data", help="generate a point-mass dataset"))
    p.add_argument("--dim", type=int)
    p.add_argument("--sparse", action="store_true")
    p.add_argument("--quality", type=float)
    p.add_argument("--episodes", type=int)
    p.add_argument("--behavior", choices=[k.value for k in BehaviorKind])
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("table1", help="reproduce the tabular Q-learning table"))
    p.add_argument("--visit-mode", choices=("every", "first"), default="every")
    p.add_argument("--lr", type=float, default=1.0)
    p.set_defaults(func=cmd_table1)

    p = common(sub.add_parser("fqi-study", help="fitted Q-iteration initialisation sweep"))
    p.add_argument("--n-states", dest="n_states", type=int)
    p.add_argument("--n-actions", dest="n_actions", type=int)
    p.add_argument("--seeds", type=int, help="number of random MDPs")
    p.add_argument("--betas", type=lambda s: [float(v) for v in s.split(",")])
    p.add_argument("--delta", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=cmd_fqi_study)

    p = common(sub.add_parser("train", help="run an experiment config"))
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("evaluate", help="evaluate an actor checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("sweep", help="grid x seeds sweep"), jobs=True)
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("plot", help="SVG mean +/- std chart from metric CSVs"))
    p.add_argument("inputs", nargs="*")
    p.add_argument("--x")
    p.add_argument("--y")
    p.add_argument("--group-by", dest="group_by")
    p.add_argument("--smoothing", type=int)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
