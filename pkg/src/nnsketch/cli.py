"""Command-line surface: ``nnsk`` with build, query, eval, gen, and stats.

The tool is aimed at scripts and CI rather than humans:

1. ``build`` sketches a ``.npts`` point file into a ``.nnsk`` blob.
2. ``query-ann`` and ``query-dist`` answer from a blob alone.
3. ``gen`` emits random point sets or the planted hard instance.
4. ``eval`` runs seeded end-to-end trials against the brute-force oracle
   and writes a text report plus a CSV with the frozen column schema
   ``trial, success, bits_total, bits_tree, bits_hashes, bits_dist,
   t_build_ms, t_query_us``.
5. ``stats`` prints the per-section bit accounting of a blob.

Trials are independent and may run in worker processes; ``NNSK_THREADS``
caps the pool. Every trial derives its own seed as ``seed + trial``, so
reports are reproducible regardless of parallelism.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nnsketch.codec import DecodeError, encode, load_sketch, save_sketch
from nnsketch.distsketch import attach_distances, jl_preprocess
from nnsketch.geometry import (
    Params,
    PointSet,
    load_npts,
    load_npts_array,
    save_npts,
    save_npts_array,
)
from nnsketch.hierarchy import build_tree
from nnsketch.oracle import (
    exact_all_distances,
    exact_nn,
    gen_hard_instance,
    gen_random,
    load_key,
    save_key,
)
from nnsketch.quadtree import build_quadtree
from nnsketch.query import CapabilityError, query_all_distances, query_ann, query_distance

CSV_COLUMNS = (
    "trial",
    "success",
    "bits_total",
    "bits_tree",
    "bits_hashes",
    "bits_dist",
    "t_build_ms",
    "t_query_us",
)


def _build_sketch(points: PointSet, params: Params, seed: int, engine: str,
                  distances: bool, jl: bool, *, validate: bool = True):
    """Shared construction path for build and eval; enforces capability rules."""
    if distances and engine == "quadtree":
        raise CapabilityError("the quadtree engine does not carry distance payloads")
    if jl and engine == "exact":
        raise CapabilityError(
            "projected sketches are answerable only by the quadtree engine"
        )
    jl_info = None
    if jl:
        points, params, jl_info = jl_preprocess(points, params, seed)
    if engine == "exact":
        sketch = build_tree(points, params, seed, validate=validate and not jl)
        if distances:
            attach_distances(sketch)
    else:
        sketch = build_quadtree(points, params, seed, validate=validate and not jl)
    if jl_info is not None:
        sketch.jl = jl_info
    return sketch


def _cmd_build(args) -> int:
    points = load_npts(args.input)
    params = Params(eps=args.eps, delta=args.delta, q=args.q, phi=points.phi)
    if not args.jl:
        params.validate_for(points.n, points.d)
    sketch = _build_sketch(
        points, params, args.seed, args.engine, args.distances, args.jl
    )
    blob = save_sketch(args.output, sketch)
    print(f"wrote {args.output}: {len(blob.data)} bytes ({blob.bits_total} bits)")
    return 0


def _write_lines(path: str | None, lines: list[str]) -> None:
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _cmd_query_ann(args) -> int:
    sketch = load_sketch(args.sketch)
    ys, _ = load_npts_array(args.queries)
    lines = [str(query_ann(sketch, y)[0]) for y in ys]
    _write_lines(args.out, lines)
    return 0


def _cmd_query_dist(args) -> int:
    sketch = load_sketch(args.sketch)
    ys, _ = load_npts_array(args.queries)
    lines = []
    for y in ys:
        if args.target is not None:
            lines.append(f"{query_distance(sketch, args.target, y):.6g}")
        else:
            est = query_all_distances(sketch, y)
            lines.append(" ".join(f"{v:.6g}" for v in est))
    _write_lines(args.out, lines)
    return 0


def _cmd_gen(args) -> int:
    if args.hard:
        inst = gen_hard_instance(args.n, args.eps, args.seed, phi=args.phi)
        prefix = Path(args.output)
        pts_path = prefix.with_suffix(".npts")
        qry_path = prefix.parent / (prefix.stem + "-queries.npts")
        key_path = prefix.with_suffix(".key")
        save_npts(pts_path, inst.points)
        save_npts_array(qry_path, inst.queries, inst.points.phi)
        save_key(key_path, inst)
        print(f"wrote {pts_path} ({inst.points.n} points, d={inst.d})")
        print(f"wrote {qry_path} ({inst.queries.shape[0]} queries)")
        print(f"wrote {key_path}")
        return 0
    points = gen_random(
        args.n,
        args.d,
        args.phi,
        dist=args.dist,
        seed=args.seed,
        clusters=args.clusters,
        spread=args.spread,
        sep_level=args.sep_level,
        sep_eps=args.sep_eps,
    )
    save_npts(args.output, points)
    print(f"wrote {args.output} ({points.n} points, d={points.d}, phi={points.phi})")
    return 0


def _cmd_stats(args) -> int:
    sketch = load_sketch(args.sketch)
    blob = encode(sketch)
    print(blob.breakdown())
    print(f"bits/point: {blob.bits_total / sketch.n:.1f} (n={sketch.n})")
    return 0


@dataclass
class EvalReport:
    """Outcome of a batch of seeded end-to-end trials."""

    problem: str
    engine: str
    c: int
    params: dict[str, object]
    rows: list[dict[str, object]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def trials(self) -> int:
        return len(self.rows)

    @property
    def rate(self) -> float:
        return sum(r["success"] for r in self.rows) / max(1, self.trials)

    def _mean(self, key: str) -> float:
        return sum(r[key] for r in self.rows) / max(1, self.trials)

    def to_text(self) -> str:
        p = " ".join(f"{k}={v}" for k, v in self.params.items())
        lines = [
            f"problem: {self.problem}",
            f"engine: {self.engine} (approximation constant c = {self.c})",
            f"params: {p}",
            f"trials: {self.trials}",
            f"success rate: {self.rate:.4f}",
            "bits/sketch mean: "
            f"{self._mean('bits_total'):.0f} (tree {self._mean('bits_tree'):.0f}, "
            f"hashes {self._mean('bits_hashes'):.0f}, dist {self._mean('bits_dist'):.0f})",
            f"bits/point mean: {self._mean('bits_total') / float(self.params['n']):.1f}",
            f"build ms mean: {self._mean('t_build_ms'):.2f}",
            f"query us mean: {self._mean('t_query_us'):.1f}",
        ]
        lines.extend(self.notes)
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in sorted(self.rows, key=lambda r: r["trial"]):
                writer.writerow(row)


def _blob_row(trial: int, success: int, blob, t_build_ms: float, t_query_us: float) -> dict:
    return {
        "trial": trial,
        "success": success,
        "bits_total": blob.bits_total,
        "bits_tree": blob.bits_tree,
        "bits_hashes": blob.bits["hashes"],
        "bits_dist": blob.bits["dist"],
        "t_build_ms": round(t_build_ms, 3),
        "t_query_us": round(t_query_us, 3),
    }


def _run_trial(cfg: tuple) -> dict:
    """One seeded dataset, one sketch, q oracle-checked queries."""
    (problem, trial, seed, n, d, phi, eps, delta, q, engine, jl, c) = cfg
    trial_seed = seed + trial
    points = gen_random(n, d, phi, seed=trial_seed)
    params = Params(eps=eps, delta=delta, q=q, phi=phi)
    t0 = time.perf_counter()
    sketch = _build_sketch(points, params, trial_seed, engine, problem == "dist", jl)
    blob = encode(sketch)
    t_build_ms = (time.perf_counter() - t0) * 1e3

    rng = np.random.default_rng((trial_seed, 0xA5))
    ys = rng.integers(-phi, phi + 1, size=(q, d), dtype=np.int64)
    t1 = time.perf_counter()
    if problem == "ann":
        answers = [query_ann(sketch, y)[0] for y in ys]
    else:
        answers = [query_all_distances(sketch, y) for y in ys]
    t_query_us = (time.perf_counter() - t1) / q * 1e6

    ok = True
    if problem == "ann":
        for y, k in zip(ys, answers):
            _, opt = exact_nn(points, y)
            got = float(np.linalg.norm((points.x[k] - y).astype(np.float64)))
            if got > (1.0 + c * eps) * opt:
                ok = False
                break
    else:
        truth = exact_all_distances(points, ys)
        for j, est in enumerate(answers):
            if np.any(np.abs(est - truth[j]) > c * eps * truth[j] + 1e-12):
                ok = False
                break
    return _blob_row(trial, int(ok), blob, t_build_ms, t_query_us)


def _worker_cap(trials: int) -> int:
    cap = os.cpu_count() or 1
    env = os.environ.get("NNSK_THREADS")
    if env is not None:
        cap = max(1, int(env))
    return max(1, min(cap, trials))


def _eval_hard(args) -> EvalReport:
    if not (args.points and args.queries and args.key):
        raise ValueError("--problem hard needs --points, --queries, and --key")
    points = load_npts(args.points)
    ys, _ = load_npts_array(args.queries)
    n, k, rows = load_key(args.key)
    if rows.shape[0] != ys.shape[0]:
        raise ValueError("query file and key disagree on the number of queries")
    if args.engine == "exact" and points.d > 16:
        raise ValueError(
            "exact-engine query cost grows exponentially with d; "
            "use --engine quadtree for the hard instance"
        )
    params = Params(eps=args.eps, delta=args.delta, q=max(1, ys.shape[0]), phi=points.phi)
    t0 = time.perf_counter()
    sketch = _build_sketch(
        points, params, args.seed, args.engine, False, args.jl, validate=False
    )
    blob = encode(sketch)
    t_build_ms = (time.perf_counter() - t0) * 1e3
    t1 = time.perf_counter()
    hits = sum(
        int(query_ann(sketch, y)[0] == expected) for y, expected in zip(ys, rows[:, 2])
    )
    t_query_us = (time.perf_counter() - t1) / ys.shape[0] * 1e6
    rate = hits / ys.shape[0]
    report = EvalReport(
        problem="hard",
        engine=args.engine,
        c=args.c,
        params={"n": points.n, "k": k, "d": points.d, "phi": points.phi,
                "eps": args.eps, "delta": args.delta},
    )
    report.rows.append(
        _blob_row(0, int(rate >= 0.99), blob, t_build_ms, t_query_us)
    )
    report.notes.append(f"bit-recovery rate: {rate:.4f} ({hits}/{ys.shape[0]})")
    return report


def _cmd_eval(args) -> int:
    if args.problem == "hard":
        report = _eval_hard(args)
    else:
        cfgs = [
            (args.problem, t, args.seed, args.n, args.d, args.phi, args.eps,
             args.delta, args.q, args.engine, args.jl, args.c)
            for t in range(args.trials)
        ]
        report = EvalReport(
            problem=args.problem,
            engine=args.engine,
            c=args.c,
            params={"n": args.n, "d": args.d, "phi": args.phi, "eps": args.eps,
                    "delta": args.delta, "q": args.q, "seed": args.seed},
        )
        workers = _worker_cap(args.trials)
        if workers == 1:
            report.rows = [_run_trial(cfg) for cfg in cfgs]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                report.rows = list(pool.map(_run_trial, cfgs))
    text = report.to_text()
    print(text)
    if args.out is not None:
        report.write_csv(f"{args.out}.csv")
        Path(f"{args.out}.txt").write_text(text + "\n")
        print(f"wrote {args.out}.csv and {args.out}.txt")
    return 0


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")
    return value == "on"


def _add_sketch_flags(sub: argparse.ArgumentParser, *, q_default: int = 16) -> None:
    sub.add_argument("--eps", type=float, default=0.25)
    sub.add_argument("--delta", type=float, default=0.1)
    sub.add_argument("--q", type=int, default=q_default)
    sub.add_argument("--engine", choices=("exact", "quadtree"), default="exact")
    sub.add_argument("--distances", type=_onoff, default=False, metavar="on|off")
    sub.add_argument("--jl", type=_onoff, default=False, metavar="on|off")
    sub.add_argument("--seed", type=int, default=0)


def _make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nnsk",
        description="One-way sketches for nearest-neighbor and distance queries "
        "over bounded integer point sets.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    b = subs.add_parser("build", help="sketch a .npts file into a .nnsk blob")
    b.add_argument("input")
    b.add_argument("output")
    _add_sketch_flags(b)
    b.set_defaults(fn=_cmd_build)

    qa = subs.add_parser("query-ann", help="answer nearest-neighbor queries from a blob")
    qa.add_argument("sketch")
    qa.add_argument("queries", help=".npts file of query points")
    qa.add_argument("--out", default=None, help="output path (default stdout)")
    qa.set_defaults(fn=_cmd_query_ann)

    qd = subs.add_parser("query-dist", help="answer distance queries from a blob")
    qd.add_argument("sketch")
    qd.add_argument("queries")
    qd.add_argument("--target", type=int, default=None,
                    help="point index; omit for all-points estimates per query")
    qd.add_argument("--out", default=None)
    qd.set_defaults(fn=_cmd_query_dist)

    g = subs.add_parser("gen", help="generate point sets or the hard instance")
    g.add_argument("output", help=".npts path, or a prefix with --hard")
    g.add_argument("--hard", action="store_true",
                   help="emit the planted-support instance (.npts/-queries.npts/.key)")
    g.add_argument("--n", type=int, default=256)
    g.add_argument("--d", type=int, default=6)
    g.add_argument("--phi", type=int, default=1024)
    g.add_argument("--eps", type=float, default=0.25, help="hard instance accuracy")
    g.add_argument("--dist", choices=("uniform", "clusters", "two-cluster"),
                   default="uniform")
    g.add_argument("--clusters", type=int, default=4)
    g.add_argument("--spread", type=float, default=None)
    g.add_argument("--sep-level", type=int, default=None)
    g.add_argument("--sep-eps", type=float, default=0.25)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_gen)

    e = subs.add_parser("eval", help="oracle-checked Monte Carlo trials")
    e.add_argument("--problem", choices=("ann", "dist", "hard"), default="ann")
    e.add_argument("--n", type=int, default=256)
    e.add_argument("--d", type=int, default=6)
    e.add_argument("--phi", type=int, default=1024)
    e.add_argument("--trials", type=int, default=50)
    e.add_argument("--c", type=int, default=16,
                   help="approximation constant in the success event (1 + c*eps)")
    e.add_argument("--points", default=None, help="hard mode: .npts from gen --hard")
    e.add_argument("--queries", default=None, help="hard mode: -queries.npts file")
    e.add_argument("--key", default=None, help="hard mode: .key answer file")
    e.add_argument("--out", default=None, help="report prefix; writes .csv and .txt")
    _add_sketch_flags(e)
    e.set_defaults(fn=_cmd_eval)

    s = subs.add_parser("stats", help="print the bit breakdown of a blob")
    s.add_argument("sketch")
    s.set_defaults(fn=_cmd_stats)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, DecodeError, CapabilityError, OSError) as exc:
        print(f"nnsk: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
