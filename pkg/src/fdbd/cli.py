"""Command-line entry point: ``fdbd <command> [options]``.

Exit codes:
    0  success, all requested verifications passed
    1  a verification ran but failed (oracle, synth, bench gates)
    2  usage error (bad flags, missing prerequisite such as stats)
    3  invalid input data (format, dimensions, preconditions)
    4  I/O error
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import (
    ColumnMismatch,
    FdbdError,
    MissingRole,
    MissingStats,
    PreconditionError,
    UsageError,
)
from .geometry import LinearHead, verify_distance_bound
from .metrics import (
    EvalResult,
    bench_scaling,
    eval_rows_to_csv,
    evaluate,
    latency_ratio,
    rank_histograms,
    reports_to_json,
)
from .scoring import (
    DEFAULT_PERCENTILE,
    METHODS,
    ScoreTable,
    ShapingConfig,
    fit_stats,
    load_stats,
    required_stats,
    save_stats,
    score_batch,
)
from .synthetic import build_etf, synth_ood_experiment, verify_prop1, verify_prop2
from .tensorio import load_float64, load_labels, load_manifest, write_array

logger = logging.getLogger("fdbd")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3, 4


def _csv_list(text: str, cast=str) -> list:
    return [cast(v.strip()) for v in text.split(",") if v.strip()]


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_head(man) -> LinearHead:
    return LinearHead(load_float64(man.head_weights), load_float64(man.head_bias))


# --- commands --------------------------------------------------------------


def cmd_fit(args: argparse.Namespace) -> int:
    man = load_manifest(args.manifest)
    if man.train_labels is None:
        raise MissingRole(f"{man.path}: 'fit' needs a 'train_labels' role in the manifest")
    X = load_float64(man.train_features)
    y = load_labels(man.train_labels, man.n_classes)
    stats = fit_stats(X, y, react_percentile=args.react_percentile, n_classes=man.n_classes)
    out = save_stats(stats, args.out)
    logger.info("wrote stats bundle to %s", out)
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    man = load_manifest(args.manifest)
    methods = _csv_list(args.methods)
    bad = [m for m in methods if m not in METHODS]
    if not methods or bad:
        raise UsageError(f"--methods must list some of {', '.join(METHODS)} (got {args.methods!r})")
    try:
        shaping = ShapingConfig.parse(args.shaping)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    need = required_stats(methods, shaping)
    stats_path = args.stats or man.precomputed_stats
    if need and stats_path is None:
        raise UsageError(
            f"{', '.join(need)} need training statistics: pass --stats (run 'fdbd fit' first) "
            "or set 'precomputed_stats' in the manifest"
        )
    stats = load_stats(stats_path) if stats_path is not None else None
    if stats is not None and stats.dim != man.dim:
        raise UsageError(f"stats dimension {stats.dim} does not match head dimension {man.dim}")
    head = _load_head(man)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sidecar: dict[str, dict[str, list[int]]] = {}
    for name, path in man.feature_sets().items():
        try:
            table = score_batch(
                load_float64(path), head, stats, methods, shaping, knn_k=args.knn_k, topk=args.topk
            )
        except MissingStats as exc:
            raise UsageError(str(exc)) from exc
        table.meta = {"set": name, **table.meta}
        table.write_csv(out / f"scores_{name}.csv")
        sidecar[name] = table.flagged
    _write_json(out / "flagged.json", {"flagged": sidecar})
    return EXIT_OK


def _parse_ood_arg(item: str) -> tuple[str, Path]:
    name, sep, path = item.partition("=")
    if not sep:
        p = Path(item)
        stem = p.stem
        return (stem[len("scores_"):] if stem.startswith("scores_") else stem), p
    return name, Path(path)


def cmd_eval(args: argparse.Namespace) -> int:
    id_table = ScoreTable.read_csv(args.id)
    if not args.ood:
        raise UsageError("eval needs at least one --ood score CSV")
    rows: list[EvalResult] = []
    sets: list[str] = []
    per_method: dict[str, list[EvalResult]] = {}
    for item in args.ood:
        name, path = _parse_ood_arg(item)
        table = ScoreTable.read_csv(path)
        if table.methods != id_table.methods:
            raise ColumnMismatch(
                f"{path}: method columns {table.methods} differ from ID columns {id_table.methods}"
            )
        for m in id_table.methods:
            res = evaluate(m, id_table.columns[m], table.columns[m])
            rows.append(res)
            sets.append(name)
            per_method.setdefault(m, []).append(res)
    for m, res in per_method.items():
        rows.append(
            EvalResult(
                m,
                float(np.mean([r.auroc for r in res])),
                float(np.mean([r.fpr95 for r in res])),
                res[0].n_id,
                int(sum(r.n_ood for r in res)),
            )
        )
        sets.append("Average")
    text = eval_rows_to_csv(rows, sets)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    rep = verify_distance_bound(
        args.trials, args.classes, args.dim, args.seed, features_per_head=args.features_per_head
    )
    payload = rep.to_dict()
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(
        f"max lower-bound violation {rep.max_lower_bound_violation:.3e} "
        f"(tol {rep.lower_bound_tol:g}); max nearest-class relative gap "
        f"{rep.max_nearest_relative_gap:.3e} (tol {rep.tightness_tol:g}); "
        f"{rep.n_pairs} pairs, {rep.region_empty} empty regions"
    )
    return EXIT_OK if rep.passed else EXIT_FAILED


def cmd_synth(args: argparse.Namespace) -> int:
    grid = _csv_list(args.r_grid, float)
    if not grid:
        raise UsageError("--r-grid must list at least one radius")
    lo, hi = args.sigma, 5 * args.sigma
    for r in grid:
        if not lo < r < hi:
            raise PreconditionError(
                f"radius {r} violates sigma < r < 5*sigma, i.e. {lo:g} < r < {hi:g}"
            )
    mix = build_etf(args.classes, args.dim, args.sigma, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    grid = sorted(grid)
    prop1 = [verify_prop1(mix, a, b, args.samples, args.seed).to_dict() for a, b in zip(grid, grid[1:])]
    prop2 = [verify_prop2(mix, r, args.region_samples, args.seed).to_dict() for r in grid]
    _write_json(out / "radius_ordering.json", {"reports": prop1})
    _write_json(out / "dense_region.json", {"reports": prop2})

    C = args.classes
    ks = tuple(sorted({1, -(-(C - 1) // 2), C - 1}))
    experiments = {}
    for kind in ("radial_shift", "isotropic"):
        exp = synth_ood_experiment(mix, args.exp_samples, kind, args.seed, topk_ks=ks)
        experiments[kind] = exp.to_dict()
        (out / f"buckets_{kind}.csv").write_text(exp.buckets_csv(), encoding="utf-8")
        (out / f"scores_{kind}.csv").write_text(exp.scores_csv(), encoding="utf-8")
    _write_json(out / "experiments.json", experiments)

    ok = all(r["passed"] for r in prop1 + prop2)
    for r in prop1:
        print(f"radius ordering r0={r['r0']:g} r1={r['r1']:g}: ratio={r['ratio']:.6f} z={r['z_stat']:.1f} pass={r['passed']}")
    for r in prop2:
        print(
            f"dense region r={r['r']:g}: dense={r['mean_id_region']:.4f} outside={r['mean_ood_region']:.4f} "
            f"z={r['z_stat']:.1f} pass={r['passed']}"
        )
    for kind, e in experiments.items():
        aur = ", ".join(f"{k}={v['auroc']:.4f}" for k, v in e["results"].items())
        print(f"experiment {kind}: AUROC {aur}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_bench(args: argparse.Namespace) -> int:
    methods = _csv_list(args.methods)
    if not methods:
        raise UsageError("--methods is empty")
    sweeps = {
        "P": _csv_list(args.sweep_p, int),
        "C": _csv_list(args.sweep_c, int),
        "N": _csv_list(args.sweep_n, int),
    }
    used = {"N"} if "knn" in methods else set()
    if any(m != "knn" for m in methods):
        used |= {"P", "C"}
    for axis in sorted(used):
        if len(sweeps[axis]) < 2:
            raise UsageError(f"sweep over {axis} needs at least 2 points, got {sweeps[axis]}")
    reports = []
    flags: dict[str, dict] = {}
    for m in methods:
        axes = ("N",) if m == "knn" else ("P", "C")
        for axis in axes:
            rep = bench_scaling(
                m,
                axis,
                sweeps[axis],
                n_classes=args.classes,
                dim=args.dim,
                n_train=args.train_size,
                n_samples=args.samples,
                seed=args.seed,
            )
            reports.append(rep)
            key = f"{m}:{axis}"
            if m == "knn":
                flags[key] = {"growth": rep.growth, "super_constant_growth": rep.growth >= 2.0}
            else:
                flags[key] = {"r2": rep.r2, "linear_r2_ok": rep.r2 >= 0.9}
            print(f"{key}: medians(us)={[round(t, 2) for t in rep.median_us]} r2={rep.r2:.3f} growth={rep.growth:.2f}")
    extra: dict = {"flags": flags}
    # Only the fdbd linearity gate counts as a verification; other flags are informational.
    ok = all(f["linear_r2_ok"] for k, f in flags.items() if k.startswith("fdbd:"))
    if "fdbd" in methods and "msp" in methods:
        ratio = latency_ratio("fdbd", "msp", n_classes=10, dim=512, n_samples=args.samples, seed=args.seed)
        ratio["ratio_ok"] = ratio["ratio"] <= 2.0
        ok = ok and ratio["ratio_ok"]
        extra["fdbd_vs_msp"] = ratio
        print(f"fdbd/msp median ratio at |C|=10, P=512: {ratio['ratio']:.3f}")
    text = reports_to_json(reports, extra)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_hist(args: argparse.Namespace) -> int:
    man = load_manifest(args.manifest)
    head = _load_head(man)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, path in man.feature_sets().items():
        write_array(out / f"rank_dists_{name}.npy", rank_histograms(head, load_float64(path)))
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fdbd",
        description="Decision-boundary OOD scoring, evaluation and verification.",
        epilog="Exit codes: 0 ok, 1 verification failed, 2 usage error, 3 invalid input, 4 I/O error.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit training statistics into a stats bundle")
    f.add_argument("--manifest", required=True, help="manifest JSON with train_features and train_labels")
    f.add_argument("--out", required=True, help="output bundle directory")
    f.add_argument(
        "--react-percentile",
        type=float,
        default=DEFAULT_PERCENTILE["react"],
        help="percentile of training activations used as the ReAct clip (default %(default)s)",
    )
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("score", help="score every feature set in a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--stats", help="stats bundle directory from 'fdbd fit'")
    s.add_argument("--methods", default="fdbd", help=f"comma list from {','.join(METHODS)} (default fdbd)")
    s.add_argument("--shaping", default="none", help="none | react[:p] | ash_s[:p] | scale[:p]")
    s.add_argument("--knn-k", type=int, default=50, help="neighbour rank for knn (default 50)")
    s.add_argument("--topk", type=int, default=None, help="k for topk (default |C|-1)")
    s.add_argument("--out", required=True, help="output directory for scores_<set>.csv")
    s.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="AUROC / FPR95 from score CSVs")
    e.add_argument("--id", required=True, help="ID score CSV")
    e.add_argument("--ood", action="append", default=[], help="OOD score CSV as [NAME=]PATH; repeatable")
    e.add_argument("--out", help="metrics CSV path (default stdout)")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="check closed-form distances against exact projections")
    o.add_argument("--trials", type=int, default=100)
    o.add_argument("--classes", type=int, default=5)
    o.add_argument("--dim", type=int, default=8)
    o.add_argument("--features-per-head", type=int, default=10)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", help="write the JSON report here")
    o.set_defaults(func=cmd_oracle)

    y = sub.add_parser("synth", help="ETF Gaussian-mixture geometry checks and experiments")
    y.add_argument("--classes", type=int, default=10)
    y.add_argument("--dim", type=int, default=16)
    y.add_argument("--sigma", type=float, default=0.3)
    y.add_argument("--r-grid", default="0.6,0.8,1.0", help="comma list of radii (default %(default)s)")
    y.add_argument("--samples", type=int, default=20000, help="sphere samples for radius ordering")
    y.add_argument("--region-samples", type=int, default=50000, help="sphere samples for region comparison")
    y.add_argument("--exp-samples", type=int, default=5000, help="ID/OOD samples per experiment")
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)

    b = sub.add_parser("bench", help="per-sample scoring latency sweeps")
    b.add_argument("--methods", default="fdbd,msp")
    b.add_argument("--sweep-p", default="256,512,1024,2048")
    b.add_argument("--sweep-c", default="10,100,1000")
    b.add_argument("--sweep-n", default="1000,10000", help="training-bank sizes (knn only)")
    b.add_argument("--classes", type=int, default=100, help="|C| held fixed in P/N sweeps")
    b.add_argument("--dim", type=int, default=512, help="P held fixed in C/N sweeps")
    b.add_argument("--train-size", type=int, default=1000, help="N held fixed outside N sweeps")
    b.add_argument("--samples", type=int, default=1000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="write the LatencyReport JSON here")
    b.set_defaults(func=cmd_bench)

    h = sub.add_parser("hist", help="per-rank boundary distances as NPY per feature set")
    h.add_argument("--manifest", required=True)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_hist)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fdbd {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FdbdError as exc:
        print(f"fdbd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"fdbd {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
