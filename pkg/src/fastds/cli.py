"""Command-line entry point: ``fastds {aggregate,simulate,online,sweep,multilabel,plot}``.

Exit codes: 0 success, 2 input error, 3 non-convergence under ``--strict``,
64 usage error.  Log verbosity comes from ``FASTDS_LOG_LEVEL``.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from fastds import __version__
from fastds import benchlab
from fastds.aggregators import ALGORITHMS, AggregationConfig, ConvergenceWarning, result_to_dict
from fastds.dataset import (
    DatasetError,
    dumps_csv,
    dumps_gold,
    filter_min_annotators,
    head_questions,
    load_dataset,
    load_gold,
    remove_class,
    subsample_annotators,
    write_atomic,
)
from fastds.multilabel import aggregate_multilabel, dumps_decisions, load_multi, multilabel_subsets, subsample_multi
from fastds.online import init_online

logger = logging.getLogger("fastds")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_USAGE = 0, 2, 3, 64

# flags that change how a run executes but never what it outputs
_EXECUTION_ONLY = {"workers", "command", "handler"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest(args, inputs, outputs):
    config = {k: v for k, v in sorted(vars(args).items()) if k not in _EXECUTION_ONLY}
    return {
        "tool": "fastds",
        "version": __version__,
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _digest(p) for p in inputs if p},
        "outputs": {k: str(v) for k, v in outputs.items() if v},
    }


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def dumps(obj):
    return json.dumps(obj, indent=1, default=_json_default, allow_nan=False) + "\n"


def _emit(text, path):
    if path:
        write_atomic(path, text)
    else:
        sys.stdout.write(text)


def _config(args, algorithm=None):
    return AggregationConfig(
        algorithm=algorithm or args.algorithm,
        marginal_tolerance=args.tol,
        hybrid_gamma=args.gamma,
        max_iterations=args.max_iters,
        seed=args.seed,
        smoothing=args.alpha,
    )


def _prepare(args):
    d = load_dataset(args.input, format=args.format)
    if getattr(args, "drop_class", None) is not None:
        d = remove_class(d, d.option_index(args.drop_class))
    if getattr(args, "min_annotators", None):
        d = filter_min_annotators(d, args.min_annotators)
    if getattr(args, "subsample", None):
        if not getattr(args, "min_annotators", None):
            d = filter_min_annotators(d, args.subsample)
        d = subsample_annotators(d, args.subsample, args.seed)
    return d


# -- commands -----------------------------------------------------------------


def cmd_aggregate(args):
    d = _prepare(args)
    gold = load_gold(args.gold) if args.gold else None
    cfg = _config(args)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        result, elapsed = benchlab.timed_aggregate(d, cfg, workers=args.workers)
    report = {"manifest": manifest(args, [args.input, args.gold], {"output": args.output})}
    report.update(result_to_dict(d, result, cfg, gold))
    if args.timing:
        report["seconds"] = elapsed
    _emit(dumps(report), args.output)
    if not result.converged:
        logger.warning("%s did not converge in %d iterations", cfg.algorithm, result.iterations)
        if args.strict:
            return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_simulate(args):
    if args.accuracy_spread:
        conf = benchlab.diagonal_confusion(
            benchlab.spread_accuracies(args.accuracy, args.accuracy_spread, args.annotators, args.seed),
            args.options,
        )
    else:
        conf = args.accuracy
    prior = tuple(float(x) for x in args.prior.split(",")) if args.prior else None
    sim = benchlab.SimulationConfig(
        questions=args.questions,
        annotators=args.annotators,
        options=args.options,
        votes_per_question=args.votes_per_question,
        confusion=conf,
        prior=prior,
        seed=args.seed,
    )
    d, gold = benchlab.simulate(sim)
    _emit(dumps_csv(d), args.out)
    if args.gold_out:
        write_atomic(args.gold_out, dumps_gold(gold))
    return EXIT_OK


def cmd_online(args):
    full = load_dataset(args.input, format=args.format)
    if not 1 <= args.initial < full.num_questions:
        raise DatasetError(
            f"--initial must lie in [1, {full.num_questions - 1}] for {full.num_questions} questions"
        )
    initial = head_questions(full, args.initial)
    cfg = _config(args, algorithm="fds")
    gold = load_gold(args.gold) if args.gold else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        state = init_online(initial, cfg)
    lines = [dumps_line({"manifest": manifest(args, [args.input, args.gold], {"output": args.output})})]
    for q in range(args.initial, full.num_questions):
        qid = full.question_ids[q]
        votes = [(full.annotator_ids[a], o) for a, o in full.votes_of(q)]
        choice = state.ingest(qid, votes)
        lines.append(dumps_line({"question": qid, "choice": full.option_ids[choice]}))
    summary = {
        "initial_questions": args.initial,
        "streamed_questions": state.questions_ingested,
        "new_annotators": state.new_annotators,
        "initial_fds_iterations": state.initial_result.iterations,
        "initial_fds_converged": state.initial_result.converged,
        "class_marginals": [float(x) for x in state.parameters.class_marginals],
    }
    if gold is not None:
        acc_d = state.dataset
        labels = np.asarray(state.labels)
        summary["accuracy"] = benchlab.accuracy(acc_d, labels, gold)
        qs, ls = gold.align(acc_d)
        streamed = qs >= args.initial
        summary["streamed_accuracy"] = float(np.mean(labels[qs[streamed]] == ls[streamed])) if streamed.any() else None
    lines.append(dumps_line({"summary": summary}))
    _emit("".join(lines), args.output)
    return EXIT_OK


def dumps_line(obj):
    return json.dumps(obj, default=_json_default, allow_nan=False) + "\n"


def cmd_sweep(args):
    d = load_dataset(args.input, format=args.format)
    if args.drop_class is not None:
        d = remove_class(d, d.option_index(args.drop_class))
    d = filter_min_annotators(d, args.min_annotators or args.k_max)
    gold = load_gold(args.gold)
    algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    cfg = _config(args, algorithm="fds")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        sweep = benchlab.sweep_annotators(
            d, gold, algorithms, cfg, args.k_max, repeats=args.repeats, timing=args.timing, workers=args.workers
        )
    if args.external:
        sweep = benchlab.merge_external(sweep, args.external)
    outputs = {"csv": args.out, "json": args.json, "plot": args.plot}
    report = {"manifest": manifest(args, [args.input, args.gold, args.external], outputs)}
    report.update(sweep.to_dict())
    speedups = {}
    for base, target in (("ds", "fds"), ("ds", "hybrid")):
        if base in algorithms and target in algorithms:
            t, i = benchlab.speedup_report(sweep, base, target)
            speedups[f"{target}_over_{base}"] = {"time": t, "iterations": i}
    report["speedup"] = speedups
    csv_text = f"# manifest-sha256={hashlib.sha256(dumps(report['manifest']).encode()).hexdigest()}\n"
    csv_text += sweep.to_csv()
    _emit(csv_text, args.out)
    if args.json:
        write_atomic(args.json, dumps(report))
    if args.plot:
        benchlab.plot_sweep(sweep, args.plot, title=Path(args.input).stem)
    return EXIT_OK


def cmd_multilabel(args):
    full = load_multi(args.input)
    md = subsample_multi(full, args.subsample, args.seed) if args.subsample else full
    cfg = _config(args)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        res = aggregate_multilabel(md, cfg, workers=args.workers)
    _emit(dumps_decisions(md, res), args.output)
    if args.report:
        report = {"manifest": manifest(args, [args.input, args.gold], {"output": args.output, "report": args.report})}
        binary = res.binary
        report["convergence"] = {
            "converged": binary.converged,
            "iterations": binary.iterations,
            "switch_iteration": binary.switch_iteration,
        }
        report["binary_questions"] = int(res.decisions.size)
        nll = binary.neg_log_likelihood
        report["neg_log_likelihood"] = nll if np.isfinite(nll) else None
        if args.gold:
            gold = _load_multi_gold(args.gold, md)
            report["pair_accuracy"] = float(np.mean(res.decisions == gold))
            if args.subsample:
                # averaged over seeded annotator subsets, seeds seed..seed+N-1
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", ConvergenceWarning)
                    report["subsets"] = multilabel_subsets(
                        full, _load_multi_gold(args.gold, full), [cfg.algorithm], cfg, args.subsample,
                        subsets=args.subsets, workers=args.workers,
                    )[cfg.algorithm]
        write_atomic(args.report, dumps(report))
    return EXIT_OK


def _load_multi_gold(path, md):
    """Gold CSV ``question,option,selected``; missing pairs count as 0."""
    lookup = {q: i for i, q in enumerate(md.question_ids)}
    gold = np.zeros((md.num_questions, md.num_options), dtype=bool)
    with open(path, newline="", encoding="utf-8") as fh:
        for line_no, rec in enumerate(csv.DictReader(fh), start=2):
            try:
                q = lookup.get(rec["question"])
                c, sel = int(rec["option"]), int(rec["selected"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"bad gold row: {exc}", line=line_no) from None
            if q is not None and sel:
                if not 0 <= c < md.num_options:
                    raise DatasetError(f"option {c} out of range", line=line_no)
                gold[q, c] = True
    return gold


def cmd_plot(args):
    sweep = load_sweep_csv(args.sweep)
    written = benchlab.plot_sweep(sweep, args.out, title=args.title)
    for p in written:
        logger.info("wrote %s", p)
    return EXIT_OK


def load_sweep_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append(
            benchlab.SweepRow(
                k=int(rec["k"]),
                algorithm=rec["algorithm"],
                repeat=int(rec["repeat"] or 0),
                accuracy=float(rec["accuracy"]),
                nll=float(rec["nll"]) if rec["nll"] else None,
                iterations=int(rec["iterations"]),
                seconds=float(rec["seconds"]) if rec["seconds"] else None,
                converged=rec["converged"] == "true",
            )
        )
    return benchlab.SweepReport(tuple(rows), {})


# -- parser -------------------------------------------------------------------


def _add_em_flags(p, algorithm=True):
    if algorithm:
        p.add_argument("--algorithm", choices=ALGORITHMS, required=True)
    p.add_argument("--tol", type=float, default=1e-4, help="L1 class-marginal tolerance")
    p.add_argument("--gamma", type=float, default=0.005, help="hybrid switch threshold")
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.0, help="additive smoothing for error rates")
    p.add_argument("--workers", type=int, default=1, help="threads for per-question kernels")


def build_parser():
    parser = _Parser(prog="fastds", description="Crowdsourced vote aggregation (MV, DS, FDS, Hybrid).")
    parser.add_argument("--version", action="version", version=f"fastds {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("aggregate", help="aggregate a votes file")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("csv", "json"))
    _add_em_flags(p)
    p.add_argument("--gold")
    p.add_argument("--min-annotators", type=int)
    p.add_argument("--subsample", type=int, metavar="K")
    p.add_argument("--drop-class", type=int, metavar="ID")
    p.add_argument("--output")
    p.add_argument("--strict", action="store_true", help="exit 3 when the run does not converge")
    p.add_argument("--timing", action="store_true", help="record wall time (makes reports non-reproducible)")
    p.set_defaults(handler=cmd_aggregate)

    p = sub.add_parser("simulate", help="write planted-truth votes and gold")
    p.add_argument("--questions", type=int, required=True)
    p.add_argument("--annotators", type=int, required=True)
    p.add_argument("--options", type=int, required=True)
    p.add_argument("--votes-per-question", type=int, required=True)
    p.add_argument("--accuracy", type=float, required=True)
    p.add_argument("--accuracy-spread", type=float, default=0.0, help="per-annotator accuracy drawn from accuracy +/- spread")
    p.add_argument("--prior", help="comma-separated class prior")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--gold-out")
    p.add_argument("--workers", type=int, default=1, help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("online", help="replay a votes file through the online update")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--initial", type=int, required=True, help="questions aggregated in batch before streaming")
    p.add_argument("--gold")
    p.add_argument("--output")
    _add_em_flags(p, algorithm=False)
    p.set_defaults(handler=cmd_online)

    p = sub.add_parser("sweep", help="annotator-count sweep over several algorithms")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--gold", required=True)
    p.add_argument("--algorithms", default="mv,ds,fds,hybrid")
    p.add_argument("--k-max", type=int, required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--min-annotators", type=int)
    p.add_argument("--drop-class", type=int, metavar="ID")
    p.add_argument("--external", help="CSV of external baseline results to merge")
    p.add_argument("--out")
    p.add_argument("--json")
    p.add_argument("--plot", metavar="DIR")
    p.add_argument("--timing", action="store_true")
    _add_em_flags(p, algorithm=False)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("multilabel", help="aggregate multi-label votes")
    p.add_argument("--input", required=True)
    p.add_argument("--gold", help="CSV question,option,selected")
    p.add_argument("--output")
    p.add_argument("--report")
    p.add_argument("--subsample", type=int, metavar="K", help="keep K random answers per question")
    p.add_argument("--subsets", type=int, default=5, help="subsets averaged in the report when --subsample is set")
    _add_em_flags(p)
    p.set_defaults(handler=cmd_multilabel)

    p = sub.add_parser("plot", help="plot a sweep CSV")
    p.add_argument("--sweep", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title")
    p.set_defaults(handler=cmd_plot)
    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("FASTDS_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.handler(args)
    except (DatasetError, ValueError, OSError) as exc:
        print(f"fastds {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
