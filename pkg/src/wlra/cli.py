"""``wlra`` command-line interface.

stdout carries the primary JSON report; logs and machine-readable errors go to
stderr. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import plotting
from . import toytask
from .errors import EmptyFilterError, InputError, UsageError, WlraError
from .importance import phi_metric, row_reduce, uniform_importance
from .linalg import read_matrix, svd_full, svd_tail, write_matrix
from .objective import WeightedProblem, as_factors, residual_losses
from .planner import LinearLayerSpec, load_manifest, params_factorized, plan_uniform_ratio, rank_for_ratio
from .solvers import SolverConfig, solve

log = logging.getLogger("wlra")

DEFAULT_SEED = 42
WEIGHTED_METHODS = ("fwsvd", "tfwsvd", "tvd")
FACTORIZE_METHODS = ("svd", "fwsvd", "tfwsvd", "tvd", "als", "sgd", "adam", "adam_sgd")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error(UsageError(message))
        sys.exit(2)


def _emit_error(err):
    sys.stderr.write(json.dumps(err.to_dict(), sort_keys=True, default=str) + "\n")


def _print_json(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])


def _float_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {v}")
    return v


# ---------------------------------------------------------------------------
# factorize / analyze / plan


def _resolve_rank(args, shape):
    if args.rank is not None:
        return args.rank
    return rank_for_ratio(args.ratio, LinearLayerSpec("input", *shape))


def cmd_factorize(args):
    if args.method in WEIGHTED_METHODS and args.weights is None:
        raise UsageError(f"--weights is required for --method {args.method}", method=args.method)
    w = read_matrix(args.input)
    imp = read_matrix(args.weights) if args.weights else uniform_importance(*w.shape)
    rank = _resolve_rank(args, w.shape)
    problem = WeightedProblem(w, imp, rank, args.lam)
    solver_method = "adam_sgd" if args.method in ("tfwsvd", "tvd") else args.method
    cfg = SolverConfig(
        method=solver_method,
        eta=args.eta,
        max_steps=args.max_steps,
        seed=args.seed,
        init=args.init,
    )
    trace = solve(problem, cfg)
    f = trace.final
    write_matrix(f.a, args.out_a)
    write_matrix(f.b, args.out_b)
    if args.trace:
        with open(args.trace, "w") as fh:
            trace.to_jsonl(fh)
    weighted, unweighted = residual_losses(problem, f)
    n, m = w.shape
    _print_json(
        {
            "command": "factorize",
            "method": args.method,
            "solver": solver_method,
            "rank": rank,
            "dims": [n, m],
            "weighted_loss": weighted,
            "unweighted_error": unweighted,
            "objective": trace.final_loss,
            "params_after": params_factorized(n, m, rank),
            "steps": trace.n_updates,
            "stop_reason": trace.stop_reason,
            "switch_step": trace.switch_step,
            "seed": args.seed,
        }
    )


def cmd_analyze(args):
    w = read_matrix(args.input)
    imp = read_matrix(args.weights)
    if imp.shape != w.shape:
        raise InputError(
            f"weights shape {imp.shape} does not match input {w.shape}",
            expected=list(w.shape),
            got=list(imp.shape),
        )
    rep = phi_metric(imp, args.p, args.epsilon)
    rows = row_reduce(imp).values
    out = {
        "command": "analyze",
        "phi": rep.phi,
        "p": rep.p,
        "epsilon": rep.epsilon,
        "dims": list(w.shape),
        "row_importance_summary": {
            "min": float(rows.min()),
            "max": float(rows.max()),
            "mean": float(rows.mean()),
        },
    }
    if (args.factor_a is None) != (args.factor_b is None):
        raise UsageError("--factor-a and --factor-b go together")
    if args.factor_a is not None:
        f = as_factors(read_matrix(args.factor_a), read_matrix(args.factor_b))
        problem = WeightedProblem(w, imp, f.rank)
        weighted, unweighted = residual_losses(problem, f)
        optimal = svd_tail(svd_full(w), f.rank)
        out["factors"] = {
            "rank": f.rank,
            "weighted_loss": weighted,
            "unweighted_error": unweighted,
            "svd_optimal_error": optimal,
            "params_after": params_factorized(*w.shape, f.rank),
        }
    _print_json(out)


def cmd_plan(args):
    try:
        layers, uncompressed, _ = load_manifest(args.manifest)
    except InputError as exc:
        raise UsageError(f"malformed manifest: {exc.message}", **exc.context) from None
    plan = plan_uniform_ratio(layers, args.budget, uncompressed)
    out = plan.to_dict()
    out["command"] = "plan"
    _print_json(out)


# ---------------------------------------------------------------------------
# toy


def _toy_model(args):
    return toytask.load_model(args.model_w, args.model_bias)


def _toy_data_for(model, args):
    """Dataset whose class count defaults to the model's output width."""
    return toytask.load_dataset(args.data, args.classes or model.w.shape[1])


def cmd_toy_generate(args):
    data = toytask.generate_task(args.seed, args.examples, args.in_dim, args.classes, args.heterogeneity)
    toytask.save_dataset(data, args.out)
    _print_json(
        {
            "command": "toy generate",
            "seed": args.seed,
            "examples": args.examples,
            "in_dim": args.in_dim,
            "classes": args.classes,
            "heterogeneity": args.heterogeneity,
            "out": args.out,
        }
    )


def cmd_toy_train(args):
    data = toytask.load_dataset(args.data, args.classes)
    start = toytask.ToyModel(np.zeros((data.in_dim, data.classes)), np.zeros(data.classes))
    _, loss0 = toytask.evaluate(start.logits(data.features), data.labels)
    model = toytask.train(data, args.epochs, args.lr)
    acc, loss = toytask.evaluate(model.logits(data.features), data.labels)
    toytask.save_model(model, args.out_w, args.out_bias)
    _print_json(
        {
            "command": "toy train",
            "epochs": args.epochs,
            "lr": args.lr,
            "initial_loss": loss0,
            "final_loss": loss,
            "accuracy": acc,
            "seed": args.seed,
        }
    )


FILTER_NAMES = {"all": "all", "correct": "correct_only", "incorrect": "incorrect_only"}


def cmd_toy_fisher(args):
    model = _toy_model(args)
    data = _toy_data_for(model, args)
    used = FILTER_NAMES[args.filter]
    if args.kind == "taylor":
        if args.filter != "all":
            raise UsageError("--kind taylor always uses all examples")
        imp = toytask.taylor_weights(model, data)
        count = data.size
    else:
        try:
            grads = toytask.per_example_grads(model, data, used)
        except EmptyFilterError:
            log.warning("filter %r matched no examples; falling back to all", args.filter)
            used = "all"
            grads = toytask.per_example_grads(model, data, used)
        count = len(grads)
        imp = np.mean(grads * grads, axis=0)
    write_matrix(imp, args.out)
    _print_json(
        {
            "command": "toy fisher",
            "kind": args.kind,
            "filter_requested": FILTER_NAMES[args.filter],
            "filter_used": used,
            "count": count,
            "mean_importance": float(imp.mean()),
            "phi": phi_metric(imp).phi,
            "out": args.out,
            "seed": args.seed,
        }
    )


def cmd_toy_compress_eval(args):
    if (args.model_w is None) != (args.model_bias is None):
        raise UsageError("--model-w and --model-bias go together")
    if args.model_w is not None and args.data is None:
        raise UsageError("--model-w needs --data")
    runs = []
    if args.data is not None:
        if args.model_w:
            model = _toy_model(args)
            data = _toy_data_for(model, args)
        else:
            data = toytask.load_dataset(args.data, args.classes)
            model = toytask.train(data, args.epochs, args.lr)
        runs.append((args.seed, data, model))
    else:
        classes = args.classes or toytask.DEFAULT_CLASSES
        for seed in range(args.seed, args.seed + args.seeds):
            data = toytask.generate_task(seed, args.examples, args.in_dim, classes, args.heterogeneity)
            runs.append((seed, data, toytask.train(data, args.epochs, args.lr)))
    reports = [
        toytask.run_compression_experiment(
            model,
            data,
            methods=args.methods,
            rank_ratios=args.ratios,
            fine_tune_epochs=args.fine_tune_epochs,
            seed=seed,
        )
        for seed, data, model in runs
    ]
    summary = []
    for ratio in args.ratios:
        for method in args.methods:
            cells = [r.cell(method, ratio) for r in reports]
            ok = [c for c in cells if c.error is None]
            ft = [c.accuracy_ft for c in ok if c.accuracy_ft is not None]
            summary.append(
                {
                    "method": method,
                    "rank_ratio": ratio,
                    "rank": cells[0].rank,
                    "params_after": cells[0].params_after,
                    "ok_runs": len(ok),
                    "mean_accuracy_no_ft": float(np.mean([c.accuracy_no_ft for c in ok])) if ok else None,
                    "mean_accuracy_ft": float(np.mean(ft)) if ft else None,
                }
            )
    out = {
        "command": "toy compress-eval",
        "seed": args.seed,
        "heterogeneity": args.heterogeneity if args.data is None else None,
        "fine_tune_epochs": args.fine_tune_epochs,
        "runs": [r.to_dict() for r in reports],
        "summary": summary,
    }
    if args.out:
        _write_json(out, args.out)
    if args.csv:
        rows = [[r.seed] + row for r in reports for row in toytask.report_rows(r)]
        _write_csv(args.csv, ("seed",) + toytask.REPORT_COLUMNS, rows)
    _print_json(out)


def cmd_toy_phi_suite(args):
    from scipy.stats import spearmanr

    os.makedirs(args.out, exist_ok=True)
    seeds = list(range(args.seed, args.seed + args.seeds))
    rows = toytask.phi_vs_svd_drop_suite(
        seeds, args.levels, args.ratio, args.examples, args.in_dim, args.classes, args.epochs, args.lr
    )
    rho = float(spearmanr([r["phi"] for r in rows], [r["svd_accuracy_drop"] for r in rows])[0])
    out = {
        "command": "toy phi-suite",
        "seed": args.seed,
        "seeds": seeds,
        "levels": list(args.levels),
        "rank_ratio": args.ratio,
        "rows": rows,
        "spearman": rho,
    }
    _write_json(out, os.path.join(args.out, "phi_suite.json"))
    cols = ("seed", "heterogeneity", "phi", "svd_accuracy_drop")
    _write_csv(os.path.join(args.out, "phi_suite.csv"), cols, [[r[c] for c in cols] for r in rows])
    plotting.write_columns(
        os.path.join(args.out, "phi_vs_drop.dat"),
        [r["phi"] for r in rows],
        [r["svd_accuracy_drop"] for r in rows],
        ("phi", "svd_accuracy_drop"),
    )
    plotting.phi_vs_drop(rows, os.path.join(args.out, "phi_vs_drop.png"))
    _print_json(out)


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args):
    os.makedirs(args.out, exist_ok=True)
    seeds = list(range(args.seed, args.seed + args.seeds))
    rep = bench_mod.run_bench(args.size, args.rank, seeds, args.budget_steps, args.eta)
    out = rep.to_dict()
    out["command"] = "bench"
    out["seed"] = args.seed
    _write_json(out, os.path.join(args.out, "bench.json"))
    _write_csv(
        os.path.join(args.out, "bench.csv"),
        bench_mod.CSV_COLUMNS,
        [[getattr(c, k) for k in bench_mod.CSV_COLUMNS] for c in rep.cells],
    )
    # wall times are not reproducible, so they live apart from the report
    _write_csv(
        os.path.join(args.out, "timings.csv"),
        ("seed", "method", "wall_time"),
        [[c.seed, c.method, c.wall_time] for c in rep.cells],
    )
    for c in rep.cells:
        log.info("seed=%d method=%s wall_time=%.3fs", c.seed, c.method, c.wall_time)

    first = seeds[0]
    curves = {}
    for m in bench_mod.BENCH_METHODS:
        c = rep.cell(first, m)
        if c.curve is not None:
            curves[m] = c.curve
            idx = plotting.thin(c.curve.size)
            plotting.write_columns(
                os.path.join(args.out, f"curve_{m}.dat"), idx.tolist(), c.curve[idx].tolist(), ("step", "loss")
            )
    refs = {m: rep.cell(first, m).weighted_error for m in ("svd", "fwsvd") if rep.cell(first, m).status == "ok"}
    plotting.loss_curves(curves, os.path.join(args.out, "loss_curves.png"), f"seed {first}", refs)
    _print_json(out)


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="wlra", description="Importance-weighted low-rank factorization toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("factorize", help="factorize one matrix")
    f.add_argument("--input", required=True)
    f.add_argument("--method", choices=FACTORIZE_METHODS, default="tfwsvd")
    g = f.add_mutually_exclusive_group(required=True)
    g.add_argument("--rank", type=_positive_int)
    g.add_argument("--ratio", type=float)
    f.add_argument("--weights")
    f.add_argument("--lambda", dest="lam", type=float, default=0.0)
    f.add_argument("--seed", type=int, default=DEFAULT_SEED)
    f.add_argument("--max-steps", type=_positive_int, default=50_000)
    f.add_argument("--eta", type=float, default=1e-3)
    f.add_argument("--init", choices=("svd_warm", "fwsvd_warm", "random"), default="svd_warm")
    f.add_argument("--out-a", required=True)
    f.add_argument("--out-b", required=True)
    f.add_argument("--trace")
    f.set_defaults(func=cmd_factorize)

    a = sub.add_parser("analyze", help="phi and row-importance summary of a weights file")
    a.add_argument("--input", required=True)
    a.add_argument("--weights", required=True)
    a.add_argument("--p", type=float, default=2.0)
    a.add_argument("--epsilon", type=float, default=1e-12)
    a.add_argument("--factor-a")
    a.add_argument("--factor-b")
    a.set_defaults(func=cmd_analyze)

    pl = sub.add_parser("plan", help="uniform rank ratio for a parameter budget")
    pl.add_argument("--manifest", required=True)
    pl.add_argument("--budget", type=int, required=True)
    pl.set_defaults(func=cmd_plan)

    toy = sub.add_parser("toy", help="softmax-regression toy task")
    tsub = toy.add_subparsers(dest="toy_command", required=True, parser_class=_Parser)

    def shared(sp, data=False, model=False, task=False, training=False):
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
        sp.add_argument("--classes", type=_positive_int, default=None if data else toytask.DEFAULT_CLASSES)
        if data:
            sp.add_argument("--data", required=True)
        if model:
            sp.add_argument("--model-w", required=True)
            sp.add_argument("--model-bias", required=True)
        if task:
            sp.add_argument("--examples", type=_positive_int, default=2000)
            sp.add_argument("--in-dim", type=_positive_int, default=64)
        if training:
            sp.add_argument("--epochs", type=int, default=300)
            sp.add_argument("--lr", type=float, default=0.5)

    tg = tsub.add_parser("generate")
    shared(tg, task=True)
    tg.add_argument("--heterogeneity", type=float, default=0.5)
    tg.add_argument("--out", required=True)
    tg.set_defaults(func=cmd_toy_generate)

    tt = tsub.add_parser("train")
    shared(tt, data=True, training=True)
    tt.add_argument("--out-w", required=True)
    tt.add_argument("--out-bias", required=True)
    tt.set_defaults(func=cmd_toy_train)

    tf = tsub.add_parser("fisher")
    shared(tf, data=True, model=True)
    tf.add_argument("--filter", choices=tuple(FILTER_NAMES), default="all")
    tf.add_argument("--kind", choices=("fisher", "taylor"), default="fisher")
    tf.add_argument("--out", required=True)
    tf.set_defaults(func=cmd_toy_fisher)

    tc = tsub.add_parser("compress-eval")
    shared(tc, task=True, training=True)
    # with --data the class count comes from the model or the labels
    tc.set_defaults(classes=None)
    tc.add_argument("--data")
    tc.add_argument("--model-w")
    tc.add_argument("--model-bias")
    tc.add_argument("--seeds", type=_positive_int, default=1)
    tc.add_argument("--heterogeneity", type=float, default=0.5)
    tc.add_argument("--ratios", type=_float_list, default=[0.2])
    tc.add_argument(
        "--methods",
        type=lambda s: [m for m in s.split(",") if m],
        default=list(toytask.METHODS),
    )
    tc.add_argument("--fine-tune-epochs", type=int, default=100)
    tc.add_argument("--out")
    tc.add_argument("--csv")
    tc.set_defaults(func=cmd_toy_compress_eval)

    tp = tsub.add_parser("phi-suite")
    shared(tp, task=True, training=True)
    tp.add_argument("--seeds", type=_positive_int, default=4)
    tp.add_argument("--levels", type=_float_list, default=[0.0, 0.2, 0.4, 0.6, 0.8])
    tp.add_argument("--ratio", type=float, default=0.25)
    tp.add_argument("--out", required=True)
    tp.set_defaults(func=cmd_toy_phi_suite)

    b = sub.add_parser("bench", help="optimizer benchmark on heterogeneous problems")
    b.add_argument("--size", type=_positive_int, default=64)
    b.add_argument("--rank", type=_positive_int, default=8)
    b.add_argument("--seeds", type=_positive_int, default=10)
    b.add_argument("--budget-steps", type=_positive_int, default=50_000)
    b.add_argument("--eta", type=float, default=bench_mod.DEFAULT_ETA)
    b.add_argument("--seed", type=int, default=DEFAULT_SEED, help="first seed of the run")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def _validate(args):
    if getattr(args, "toy_command", None) == "compress-eval":
        bad = [m for m in args.methods if m not in toytask.METHODS]
        if bad or not args.methods:
            raise UsageError(f"unknown methods {bad}", choices=list(toytask.METHODS))
    if args.command == "factorize" and args.ratio is not None and not 0 < args.ratio <= 1:
        raise UsageError(f"--ratio must be in (0, 1], got {args.ratio}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _validate(args)
        args.func(args)
    except WlraError as err:
        _emit_error(err)
        return err.exit_code
    except OSError as exc:
        _emit_error(InputError(f"{exc.strerror or exc}", path=str(exc.filename)))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
