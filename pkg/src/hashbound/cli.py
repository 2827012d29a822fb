"""Command-line entry point: subcommands, seeded runs, and JSON/CSV reports.

Every subcommand resolves its flags into a config dict that is echoed inside
the emitted JSON report together with the seed and the package version, so a
report documents exactly how to reproduce itself; re-running with the same
config reproduces every numeric field bit for bit (only the timestamp moves).
Domain failures exit 1 with a structured JSON error on standard error; usage
errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .bounds import class_stats, verify_remark_bounds
from .centers import CenterSet, hadamard_centers, random_maxmin_centers
from .codes import BitCode, pack_sign_matrix, read_hbc1, write_hbc1
from .errors import (
    EmptyBallError,
    HadamardNotApplicableError,
    HashboundError,
    InvalidConfigError,
    InvalidInputError,
    UndefinedMetricError,
)
from .mvb import SurrogateModel, estimation_demo
from .nn import save_checkpoint
from .ranking import (
    RankList,
    average_precision,
    build_rank_list,
    knn_predict,
    pr_points,
    precision_at_k,
    precision_in_hamming_ball,
)
from .train import ToyHashModel, make_synthetic_dataset, train_supervised

EVAL_METRICS = ("ap", "pk", "pr", "ph2", "knn")


def _jsonable(value):
    """Recursively convert to JSON-safe types; non-finite floats to strings."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


def _config_of(args: argparse.Namespace, threads: int | None = None) -> dict:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    if threads is not None:
        config["threads"] = threads
    return config


def _report_text(payload: dict, config: dict, seed) -> str:
    report = {
        "config": config,
        "seed": seed,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "version": __version__,
        **payload,
    }
    return json.dumps(_jsonable(report), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _emit(payload: dict, config: dict, seed, out_path) -> None:
    with open(out_path, "w") as f:
        f.write(_report_text(payload, config, seed))
    print(f"wrote {out_path}")


def _resolve_threads(flag: int | None) -> int:
    if flag is not None:
        value = flag
    else:
        env = os.environ.get("HASHBOUND_THREADS")
        value = int(env) if env else 1
    if value < 1:
        raise InvalidConfigError(f"thread count must be >= 1, got {value}")
    return value


def read_labels_csv(path, expected: int) -> list[frozenset]:
    """Rows of `id,label[;label...]`, one per code record, in record order.

    A leading `id,label` header row is skipped. Numeric labels parse as ints.
    """
    rows = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or (not rows and row[0].strip().lower() == "id"):
                continue
            if len(row) < 2:
                raise InvalidInputError(f"labels row needs id and label: {row!r}")
            tokens = [t.strip() for t in row[1].split(";") if t.strip()]
            if not tokens:
                raise InvalidInputError(f"sample {row[0]} has no labels")
            labels = frozenset(
                int(t) if t.lstrip("+-").isdigit() else t for t in tokens
            )
            rows.append(labels)
    if len(rows) != expected:
        raise InvalidInputError(
            f"{path} holds {len(rows)} label rows for {expected} codes"
        )
    return rows


def _grouping_labels(label_sets: list[frozenset]) -> list:
    """Hashable per-sample class keys: bare label if single, sorted tuple else."""
    return [
        next(iter(s)) if len(s) == 1 else tuple(sorted(s, key=str))
        for s in label_sets
    ]


def _query_record(
    qi: int,
    query: BitCode,
    q_set: frozenset,
    base_codes: list[BitCode],
    base_sets: list[frozenset],
    r: int | None,
    metrics: list[str],
    k: int,
    knn_k: int,
):
    relevance = [bool(q_set & s) for s in base_sets]
    full = build_rank_list(query, list(zip(base_codes, relevance)), query_id=qi)
    ranked = full if r is None else RankList(qi, full.entries[: min(r, len(full))])
    total_relevant = sum(relevance)
    record: dict = {"query": qi}
    try:
        record["ap"] = average_precision(ranked)
    except UndefinedMetricError:
        record["ap"] = None
    record["tp_count"] = sum(1 for e in ranked.entries if e.relevant)
    record["fp_count"] = len(ranked) - record["tp_count"]
    if "pk" in metrics:
        kk = min(k, len(ranked))
        record["precision_at_k"] = [[kk, precision_at_k(ranked, kk)]]
    if "pr" in metrics:
        record["pr_points"] = (
            [list(p) for p in pr_points(ranked, total_relevant)]
            if total_relevant
            else []
        )
    if "ph2" in metrics:
        try:
            record["precision_at_h2"] = precision_in_hamming_ball(
                query, list(zip(base_codes, relevance)), radius=2
            )
        except EmptyBallError:
            record["precision_at_h2"] = None
    if "knn" in metrics:
        grouped = _grouping_labels(base_sets)
        predicted = knn_predict(query, list(zip(base_codes, grouped)), k=knn_k)
        hit = bool(
            q_set & (set(predicted) if isinstance(predicted, tuple) else {predicted})
        )
        record["knn_label"] = predicted
        record["knn_hit"] = hit
    return record


def cmd_eval(args) -> int:
    threads = _resolve_threads(args.threads)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in EVAL_METRICS]
    if unknown:
        raise InvalidConfigError(
            f"unknown metrics {unknown}; choose from {', '.join(EVAL_METRICS)}"
        )
    if args.r is not None and args.r < 1:
        raise InvalidInputError("--r must be >= 1")
    base_codes = read_hbc1(args.base)
    query_codes = read_hbc1(args.query)
    base_sets = read_labels_csv(args.base_labels, len(base_codes))
    query_sets = read_labels_csv(args.query_labels, len(query_codes))
    knn_k = min(args.knn_k, len(base_codes))

    def worker(qi: int):
        return _query_record(
            qi, query_codes[qi], query_sets[qi], base_codes, base_sets,
            args.r, metrics, args.k, knn_k,
        )

    indices = range(len(query_codes))
    if threads == 1:
        records = [worker(qi) for qi in indices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(worker, indices))

    kept = [rec["ap"] for rec in records if rec["ap"] is not None]
    if not kept:
        raise UndefinedMetricError("every query had zero relevant base samples")
    payload = {
        "map": sum(kept) / len(kept),
        "num_queries": len(kept),
        "num_skipped": len(records) - len(kept),
        "per_query": records,
    }
    if "knn" in metrics:
        hits = [rec["knn_hit"] for rec in records]
        payload["knn_accuracy"] = sum(hits) / len(hits)
    _emit(payload, _config_of(args, threads), args.seed, args.out)
    return 0


def cmd_bound(args) -> int:
    codes = read_hbc1(args.codes)
    label_sets = read_labels_csv(args.labels, len(codes))
    stats = class_stats(codes, _grouping_labels(label_sets), percentile=args.percentile)
    payload = {
        "num_classes": len(stats.centers),
        "num_samples": len(codes),
        "bits": codes[0].length,
        "percentile": stats.percentile,
        "ratio": stats.ratio,
        "min_inter": int(stats.d_inter.min()),
        "max_intra": int(stats.d_intra.max()),
        "d_inter": stats.d_inter,
        "d_intra_mean": float(stats.d_intra.mean()),
        "centers": {str(label): str(code) for label, code in stats.centers.items()},
    }
    _emit(payload, _config_of(args), args.seed, args.out)
    return 0


def cmd_verify_bound(args) -> int:
    if args.trials < 1:
        raise InvalidInputError("--trials must be >= 1")
    children = np.random.SeedSequence(args.seed).spawn(args.trials)
    total_steps = 0
    violations = 0
    for child in children:
        rng = np.random.default_rng(child)
        signs = np.where(rng.random((args.samples, args.bits)) < 0.5, -1, 1)
        base_codes = pack_sign_matrix(signs.astype(np.int8))
        relevance = rng.random(args.samples) < 0.5
        query = pack_sign_matrix(
            np.where(rng.random((1, args.bits)) < 0.5, -1, 1).astype(np.int8)
        )[0]
        report = verify_remark_bounds(
            list(zip(base_codes, relevance.tolist())),
            query,
            seed=int(rng.integers(1 << 31)),
            max_steps=args.max_steps,
        )
        total_steps += report.steps_checked
        violations += report.violations
    payload = {
        "trials": args.trials,
        "total_steps": total_steps,
        "violations": violations,
    }
    _emit(payload, _config_of(args), args.seed, args.out)
    return 0


def _centers_for(classes: int, bits: int, method: str, seed) -> CenterSet:
    if method == "hadamard":
        return hadamard_centers(classes, bits)
    if method == "random":
        return random_maxmin_centers(classes, bits, seed=seed)
    try:
        return hadamard_centers(classes, bits)
    except HadamardNotApplicableError:
        return random_maxmin_centers(classes, bits, seed=seed)


def cmd_centers(args) -> int:
    center_set = _centers_for(args.classes, args.bits, args.method, args.seed)
    write_hbc1(args.out, list(center_set.centers))
    payload = {
        "classes": center_set.num_classes,
        "bits": args.bits,
        "method": center_set.method,
        "min_pairwise": center_set.min_pairwise,
        "codes_file": args.out,
    }
    _emit(payload, _config_of(args), args.seed, args.out + ".json")
    return 0


def cmd_mvb_demo(args) -> int:
    demo = estimation_demo(
        args.bits,
        train_samples=args.train_samples,
        eval_samples=args.eval_samples,
        seed=args.seed,
        epochs=args.epochs,
    )
    payload = {
        "bits": demo.h,
        "surrogate_kl": demo.surrogate_kl,
        "naive_kl": demo.naive_kl,
        "truth": demo.truth.probs,
        "train_samples": demo.train_samples,
        "eval_samples": demo.eval_samples,
        "epochs": demo.epochs,
    }
    _emit(payload, _config_of(args), args.seed, args.out)
    return 0


def cmd_train_toy(args) -> int:
    root = np.random.SeedSequence(args.seed)
    data_seed, model_seed, surr_seed, train_seed = root.spawn(4)
    data = make_synthetic_dataset(
        args.classes, args.per_class, args.dim, args.separation, seed=data_seed
    )
    model = ToyHashModel(args.dim, args.bits, seed=model_seed)
    surrogate = SurrogateModel(args.bits, u=args.u, seed=surr_seed)
    centers = _centers_for(args.classes, args.bits, "auto", args.seed)
    model, trace = train_supervised(
        model, surrogate, centers, data,
        epochs=args.epochs, eta1=args.eta1, eta2=args.eta2,
        batch=args.batch, seed=train_seed,
    )
    with open(args.trace, "w") as f:
        f.write("\n".join(trace.csv_lines()) + "\n")
    save_checkpoint(
        args.out,
        model.net.params(),
        header={
            "kind": "toy-hash-model",
            "dim": args.dim,
            "bits": args.bits,
            "hidden": 64,
            "classes": args.classes,
        },
    )
    final = trace.records[-1] if trace.records else None
    payload = {
        "trace_file": args.trace,
        "checkpoint_file": args.out,
        "centers_method": centers.method,
        "centers_min_pairwise": centers.min_pairwise,
        "epochs_run": len(trace.records),
        "final_map": final.map if final else None,
        "final_ratio": final.ratio if final else None,
        "final_loss_pi": final.loss_pi if final else None,
        "final_loss_theta": final.loss_theta if final else None,
    }
    sys.stdout.write(_report_text(payload, _config_of(args), args.seed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hashbound",
        description="Binary hash code metrics, center bounds, and joint-table estimation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="retrieval metrics for queries against a base")
    p.add_argument("--base", required=True, help="HBC1 file of base codes")
    p.add_argument("--base-labels", required=True, help="CSV id,label[;label...]")
    p.add_argument("--query", required=True, help="HBC1 file of query codes")
    p.add_argument("--query-labels", required=True)
    p.add_argument("--r", type=int, default=None, help="rank-list cutoff (default: full)")
    p.add_argument(
        "--metrics", default="ap",
        help=f"comma list from {{{','.join(EVAL_METRICS)}}} (default: ap)",
    )
    p.add_argument("--k", type=int, default=10, help="k for the pk metric")
    p.add_argument(
        "--knn-k", type=int, default=100,
        help="neighbours for the knn metric (clamped to the base size)",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: HASHBOUND_THREADS or 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bound", help="class centers and the bound-ratio statistics")
    p.add_argument("--codes", required=True, help="HBC1 file")
    p.add_argument("--labels", required=True, help="CSV id,label[;label...]")
    p.add_argument("--percentile", type=float, default=99.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser(
        "verify-bound",
        help="randomized directional checks of the mis-rank/ratio relation",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--samples", type=int, default=30, help="base size per trial")
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--max-steps", type=int, default=200, help="perturbations per trial")
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(func=cmd_verify_bound)

    p = sub.add_parser("centers", help="generate separated class centers")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--method", choices=("auto", "hadamard", "random"), default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True,
                   help="HBC1 output path; a .json sidecar report is written too")
    p.set_defaults(func=cmd_centers)

    p = sub.add_parser("mvb-demo", help="joint-table estimation demo (surrogate vs naive)")
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--train-samples", type=int, default=10_000)
    p.add_argument("--eval-samples", type=int, default=100)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(func=cmd_mvb_demo)

    p = sub.add_parser("train-toy", help="supervised toy run on Gaussian blobs")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--bits", type=int, default=16)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--eta1", type=float, default=1e-3)
    p.add_argument("--eta2", type=float, default=1e-3)
    p.add_argument("--u", type=int, default=None, help="surrogate block count")
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--trace", required=True, help="per-epoch CSV path")
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.set_defaults(func=cmd_train_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except HashboundError as exc:
        json.dump(
            {"error": type(exc).__name__, "message": str(exc)},
            sys.stderr,
            sort_keys=True,
        )
        sys.stderr.write("\n")
        return 1
    except OSError as exc:
        json.dump(
            {"error": type(exc).__name__, "message": str(exc)},
            sys.stderr,
            sort_keys=True,
        )
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
