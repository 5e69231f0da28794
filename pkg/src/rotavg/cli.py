"""Command-line driver: generate environments, run and benchmark the
averaging algorithms, import edge lists, evaluate stored estimates.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
inconsistent inputs), 3 internal error.  Every command is deterministic
given its flags; rerunning overwrites its outputs byte-identically.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io as envio
from . import metrics
from .averaging import OptimizerConfig, run_averaging
from .envgraph import ConnectivityFailure, GeneratorConfig, generate_uniform_env

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

# CLI algorithm tokens (used in flags and filenames) -> library names
ALGO_TOKENS = {"so3": "so3", "quat": "quaternion", "mrp": "mrp"}

# Convergence milestones as fractions of the iteration budget; at the
# 300K budget these are the familiar 30K/70K/100K/150K/300K columns.
MILESTONE_FRACTIONS = (0.1, 7.0 / 30.0, 1.0 / 3.0, 0.5, 1.0)

# An MRP clamp this large never fires on sane problems; warn instead of
# silently running unclamped.
_INERT_ETA = 100.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_checkpoint_every(iters: int) -> int:
    # dense logging for short budgets, coarser for long synthetic runs
    return 1000 if iters >= 100_000 else 200


def _parse_gen_spec(spec: str) -> GeneratorConfig:
    body = spec[len("gen:"):]
    fields = {"n": 100, "k": 3, "seed": 0, "mode": "knn", "epsilon": 0.0}
    if body:
        for part in body.split(","):
            if "=" not in part:
                raise UsageError(f"bad gen spec field {part!r} (want key=value)")
            key, value = part.split("=", 1)
            if key not in fields:
                raise UsageError(f"unknown gen spec key {key!r}")
            if key == "mode":
                fields[key] = value
            elif key == "epsilon":
                fields[key] = float(value)
            else:
                fields[key] = int(value)
    return GeneratorConfig(
        n_nodes=fields["n"],
        k_neighbors=fields["k"],
        seed=fields["seed"],
        neighborhood_mode=fields["mode"],
        epsilon=fields["epsilon"],
    )


def _load_env_source(source: str):
    if source.startswith("gen:"):
        cfg = _parse_gen_spec(source)
        try:
            cfg.validate()
        except ValueError as exc:
            raise UsageError(str(exc))
        return generate_uniform_env(cfg)
    return envio.load_env(source)


def _env_stem(source: str) -> str:
    if source.startswith("gen:"):
        return re.sub(r"[^A-Za-z0-9_.-]+", "_", source).strip("_")
    return Path(source).stem


def _build_config(algo_token: str, args_like: dict) -> OptimizerConfig:
    cfg = OptimizerConfig(
        algorithm=ALGO_TOKENS[algo_token],
        gamma=args_like["gamma"],
        eta=args_like["eta"],
        batch_size=args_like["batch"],
        max_iters=args_like["iters"],
        seed=args_like["seed"],
        checkpoint_every=args_like["checkpoint_every"]
        or _default_checkpoint_every(args_like["iters"]),
        init=args_like["init"],
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    return cfg


def _summary_row(env_label, algo_token, cfg, trace) -> envio.SummaryRow:
    summ = metrics.summarize(trace)
    last = trace[-1]
    return envio.SummaryRow(
        env=env_label,
        algorithm=algo_token,
        seed=cfg.seed,
        nauc=summ.nauc,
        steps_to_5deg=summ.steps_to_5deg,
        final_ape_mean_deg=last.ape_mean_deg,
        final_ape_median_deg=last.ape_median_deg,
        final_rel_mean_deg=last.rel_mean_deg,
        final_rel_median_deg=last.rel_median_deg,
        final_abs_mean_deg=last.abs_mean_deg,
        final_abs_median_deg=last.abs_median_deg,
    )


def cmd_gen(args) -> int:
    if args.n < 2:
        raise UsageError("--n must be >= 2")
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    failures = 0
    for seed in range(args.seed, args.seed + args.count):
        cfg = GeneratorConfig(
            n_nodes=args.n,
            k_neighbors=args.k,
            seed=seed,
            neighborhood_mode=args.mode,
            epsilon=args.epsilon,
        )
        try:
            cfg.validate()
        except ValueError as exc:
            raise UsageError(str(exc))
        try:
            env = generate_uniform_env(cfg)
        except ConnectivityFailure as exc:
            print(f"env seed={seed}: {exc}", file=sys.stderr)
            failures += 1
            continue
        path = Path(args.out) / f"env_{seed}.txt"
        envio.save_env(env, path)
        print(f"wrote {path} ({env.n_nodes} nodes, {env.n_edges} edges)")
    return EXIT_DATA if failures else EXIT_OK


def cmd_run(args) -> int:
    cfg = _build_config(args.algo, vars(args))
    if args.algo == "mrp" and args.eta >= _INERT_ETA:
        print(f"warning: eta={args.eta:g} is so large the MRP gradient "
              "clamp will never fire", file=sys.stderr)
    env = _load_env_source(args.env)
    os.makedirs(args.out, exist_ok=True)

    estimates, trace = run_averaging(env, cfg)

    trace_path = Path(args.out) / f"trace_{args.algo}_{args.seed}.csv"
    envio.export_trace(trace, trace_path)
    row = _summary_row(args.env, args.algo, cfg, trace)
    envio.export_summary([row], Path(args.out) / "summary.csv")
    if args.save_estimates:
        envio.save_estimates(
            estimates, Path(args.out) / f"estimates_{args.algo}_{args.seed}.txt"
        )

    if row.steps_to_5deg is not None:
        print(f"converged below 5 deg at step {row.steps_to_5deg}")
    elif row.final_ape_mean_deg is not None:
        print(f"not converged; final mean pairwise error "
              f"{row.final_ape_mean_deg:.3f} deg")
    else:
        print(f"finished; final mean relative error "
              f"{row.final_rel_mean_deg:.3f} deg (no ground truth)")
    return EXIT_OK


def _bench_cell(env_source, stem, algo_token, seed, params, out_dir):
    """One benchmark grid cell; runs in a worker process."""
    params = dict(params)
    params["seed"] = seed
    cfg = _build_config(algo_token, params)
    env = _load_env_source(env_source)
    cell_dir = Path(out_dir) / stem
    os.makedirs(cell_dir, exist_ok=True)

    _, trace = run_averaging(env, cfg)
    envio.export_trace(trace, cell_dir / f"trace_{algo_token}_{seed}.csv")
    return _summary_row(env_source, algo_token, cfg, trace)


def _unique_stems(envs):
    """Per-source output directory names; suffixed when basenames repeat."""
    stems = {}
    seen = {}
    for env in envs:
        base = _env_stem(env)
        count = seen.get(base, 0)
        seen[base] = count + 1
        stems[env] = base if count == 0 else f"{base}__{count + 1}"
    return stems


def _parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def aggregate_rows(rows, max_iters: int):
    """Per-algorithm aggregate statistics from summary rows.

    Pure function of the rows, so the aggregate files can be recomputed
    offline from summary.csv.  The steps mean counts never-converged runs
    at the full budget (censored mean); the max renders as NotConverged
    when any run failed to cross the threshold; the min is over converged
    runs.  Returns (milestones, per-algorithm dicts).
    """
    milestones = sorted({max(1, round(f * max_iters)) for f in MILESTONE_FRACTIONS})
    order = [t for t in ALGO_TOKENS if any(r.algorithm == t for r in rows)]
    order += sorted({r.algorithm for r in rows} - set(order))
    out = []
    for algo in order:
        algo_rows = [r for r in rows if r.algorithm == algo]
        n = len(algo_rows)
        steps = [r.steps_to_5deg for r in algo_rows if r.steps_to_5deg is not None]
        censored = [
            max_iters if r.steps_to_5deg is None else r.steps_to_5deg
            for r in algo_rows
        ]
        conv = {
            m: 100.0 * sum(1 for s in steps if s <= m) / n for m in milestones
        }
        naucs = [r.nauc for r in algo_rows if r.nauc is not None]
        finals = [
            r.final_ape_mean_deg
            for r in algo_rows
            if r.final_ape_mean_deg is not None
        ]
        out.append(
            {
                "algorithm": algo,
                "runs": n,
                "converged": len(steps),
                "conv_pct": conv,
                "steps_mean": float(np.mean(censored)) if censored else None,
                "steps_max": max(steps) if len(steps) == n and steps else None,
                "steps_min": min(steps) if steps else None,
                "nauc_mean": float(np.mean(naucs)) if naucs else None,
                "nauc_max": float(np.max(naucs)) if naucs else None,
                "nauc_min": float(np.min(naucs)) if naucs else None,
                "final_mean": float(np.mean(finals)) if finals else None,
                "final_median": float(np.median(finals)) if finals else None,
            }
        )
    return milestones, out


def _fmt_cell(value, kind="f"):
    if value is None:
        return envio.NOT_CONVERGED if kind == "steps" else ""
    if kind == "steps":
        return str(int(value))
    return f"{value:.4g}"


def render_aggregate(milestones, stats, max_iters: int):
    """Human-readable and CSV forms of the aggregate table."""
    headers = (
        ["algorithm", "runs"]
        + [f"conv%@{m}" for m in milestones]
        + ["steps_mean", "steps_max", "steps_min",
           "nauc_mean", "nauc_max", "nauc_min",
           "final_mean_deg", "final_median_deg"]
    )
    table = []
    for s in stats:
        table.append(
            [s["algorithm"], str(s["runs"])]
            + [f"{s['conv_pct'][m]:.0f}%" for m in milestones]
            + [
                _fmt_cell(s["steps_mean"]),
                _fmt_cell(s["steps_max"], "steps"),
                _fmt_cell(s["steps_min"], "steps"),
                _fmt_cell(s["nauc_mean"]),
                _fmt_cell(s["nauc_max"]),
                _fmt_cell(s["nauc_min"]),
                _fmt_cell(s["final_mean"]),
                _fmt_cell(s["final_median"]),
            ]
        )
    widths = [
        max(len(headers[c]), *(len(row[c]) for row in table)) if table else len(headers[c])
        for c in range(len(headers))
    ]
    lines = [f"# aggregate over {sum(s['runs'] for s in stats)} runs, "
             f"budget {max_iters} steps"]
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    for row in table:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    text = "\n".join(lines) + "\n"

    csv_lines = [",".join(headers)]
    for row in table:
        csv_lines.append(",".join(cell.rstrip("%") for cell in row))
    return text, "\n".join(csv_lines) + "\n"


def _write_aggregate(rows, max_iters, out_dir) -> None:
    milestones, stats = aggregate_rows(rows, max_iters)
    text, csv_text = render_aggregate(milestones, stats, max_iters)
    (Path(out_dir) / "aggregate.txt").write_text(text, encoding="utf-8")
    (Path(out_dir) / "aggregate.csv").write_text(csv_text, encoding="utf-8")
    print(text, end="")


def cmd_bench(args) -> int:
    params = {
        "gamma": args.gamma,
        "eta": args.eta,
        "batch": args.batch,
        "iters": args.iters,
        "checkpoint_every": args.checkpoint_every,
        "init": args.init,
        "seed": 0,
    }
    envs = list(args.envs or [])
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    seeds = _parse_seeds(args.seeds)
    out_dir = args.out

    if args.plan:
        with open(args.plan, "r", encoding="utf-8") as fh:
            plan = json.load(fh)
        envs = plan.get("envs", envs)
        algos = plan.get("algos", algos)
        seeds = plan.get("seeds", seeds)
        out_dir = plan.get("out", out_dir)
        for key in ("gamma", "eta", "batch", "iters", "checkpoint_every", "init"):
            if key in plan:
                params[key] = plan[key]

    if not envs:
        raise UsageError("no environments given (use --envs or a plan file)")
    if not algos:
        raise UsageError("empty algorithm list")
    for algo in algos:
        if algo not in ALGO_TOKENS:
            raise UsageError(f"unknown algorithm {algo!r} (want so3, quat, or mrp)")
    if not out_dir:
        raise UsageError("no output directory given")
    os.makedirs(out_dir, exist_ok=True)

    jobs = args.jobs or int(os.environ.get("ROTAVG_JOBS", "1"))
    stems = _unique_stems(envs)
    cells = [(env, algo, seed) for env in envs for algo in algos for seed in seeds]

    results = {}
    failures = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(
                    _bench_cell, env, stems[env], algo, seed, params, out_dir
                ): (env, algo, seed)
                for env, algo, seed in cells
            }
            for future, cell in futures.items():
                try:
                    results[cell] = future.result()
                except Exception as exc:  # record and continue the grid
                    failures.append((cell, f"{type(exc).__name__}: {exc}"))
    else:
        for env, algo, seed in cells:
            try:
                results[(env, algo, seed)] = _bench_cell(
                    env, stems[env], algo, seed, params, out_dir
                )
            except Exception as exc:
                failures.append(((env, algo, seed), f"{type(exc).__name__}: {exc}"))

    rows = [results[c] for c in cells if c in results]
    envio.export_summary(rows, Path(out_dir) / "summary.csv")
    if failures:
        failure_lines = [
            f"{env} {algo} seed={seed}: {msg}" for (env, algo, seed), msg in failures
        ]
        (Path(out_dir) / "failures.txt").write_text(
            "\n".join(failure_lines) + "\n", encoding="utf-8"
        )
        for line in failure_lines:
            print(f"failed: {line}", file=sys.stderr)
    if rows:
        _write_aggregate(rows, params["iters"], out_dir)
    return EXIT_DATA if failures else EXIT_OK


def cmd_aggregate(args) -> int:
    rows = envio.load_summary(args.summary)
    os.makedirs(args.out, exist_ok=True)
    _write_aggregate(rows, args.iters, args.out)
    return EXIT_OK


def cmd_import(args) -> int:
    env, report = envio.import_1dsfm(args.infile, gt_path=args.gt, strict=args.strict)
    out = Path(args.out)
    os.makedirs(out.parent, exist_ok=True)
    envio.save_env(env, out)
    for line in report.lines():
        print(line)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    env = envio.load_env(args.env)
    estimates = envio.load_estimates(args.estimates)
    if estimates.n_nodes != env.n_nodes:
        raise UsageError(
            f"estimate count {estimates.n_nodes} does not match "
            f"environment node count {env.n_nodes}"
        )
    rec = metrics.evaluate(estimates, env, 0)
    lines = [
        f"rel_mean_deg {envio._fmt(rec.rel_mean_deg)}",
        f"rel_median_deg {envio._fmt(rec.rel_median_deg)}",
    ]
    if rec.ape_mean_deg is not None:
        lines += [
            f"ape_mean_deg {envio._fmt(rec.ape_mean_deg)}",
            f"ape_median_deg {envio._fmt(rec.ape_median_deg)}",
            f"abs_mean_deg {envio._fmt(rec.abs_mean_deg)}",
            f"abs_median_deg {envio._fmt(rec.abs_median_deg)}",
        ]
    report = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
    print(report, end="")
    return EXIT_OK


def _add_run_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=float, default=0.5, help="learning rate")
    p.add_argument("--eta", type=float, default=0.1, help="max MRP gradient norm")
    p.add_argument("--batch", type=int, default=8, help="batch size")
    p.add_argument("--iters", type=int, default=300_000, help="batch steps to run")
    p.add_argument("--checkpoint-every", type=int, default=None,
                   dest="checkpoint_every",
                   help="metric cadence (default: 1000 for budgets >= 100K, else 200)")
    p.add_argument("--init", choices=("haar", "identity"), default="haar",
                   help="initial estimates")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rotavg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic environments")
    p.add_argument("--n", type=int, default=100, help="nodes per environment")
    p.add_argument("--k", type=int, default=3, help="nearest neighbors")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--count", type=int, default=1, help="number of environments")
    p.add_argument("--mode", choices=("knn", "epsilon"), default="knn")
    p.add_argument("--epsilon", type=float, default=0.0,
                   help="neighborhood radius in radians (epsilon mode)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run one optimization")
    p.add_argument("--env", required=True,
                   help="environment file or gen:n=...,k=...,seed=... spec")
    p.add_argument("--algo", required=True, choices=tuple(ALGO_TOKENS))
    p.add_argument("--seed", type=int, default=0, help="run seed")
    _add_run_params(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--save-estimates", action="store_true", dest="save_estimates")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run a benchmark grid")
    p.add_argument("--envs", nargs="+", help="environment files or gen: specs")
    p.add_argument("--algos", default="so3,quat,mrp",
                   help="comma-separated algorithms")
    p.add_argument("--seeds", default="0", help="seed list, e.g. 0,1,2 or 0-9")
    _add_run_params(p)
    p.add_argument("--plan", help="JSON plan file (overrides the flags above)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel runs (default: ROTAVG_JOBS or 1)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("aggregate", help="recompute aggregate tables from a summary")
    p.add_argument("--summary", required=True, help="summary.csv path")
    p.add_argument("--iters", type=int, required=True,
                   help="iteration budget the summary was produced with")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("import", help="import a 1DSfM-style edge list")
    p.add_argument("--in", dest="infile", required=True, help="edge-list file")
    p.add_argument("--gt", default=None, help="ground-truth rotations file")
    p.add_argument("--strict", action="store_true",
                   help="reject rows with unknown trailing columns")
    p.add_argument("--out", required=True, help="canonical environment file to write")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("eval", help="evaluate stored estimates on an environment")
    p.add_argument("--env", required=True, help="environment file")
    p.add_argument("--estimates", required=True, help="estimate-set file")
    p.add_argument("--out", default=None, help="optional report file")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (envio.ParseError, envio.ChecksumMismatch, envio.EmptyGraph,
            ConnectivityFailure, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - invariant violations
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
