"""Planted-truth simulation, evaluation metrics and annotator sweeps."""

import csv
import io
import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from fastds._rng import substream
from fastds.aggregators import ALGORITHMS, aggregate
from fastds.dataset import Dataset, GoldLabels, subsample_annotators

SWEEP_COLUMNS = ("k", "algorithm", "accuracy", "nll", "iterations", "seconds", "converged", "repeat")


@dataclass(frozen=True)
class SimulationConfig:
    """Parameters of the planted-truth generator.

    ``confusion`` is either a scalar diagonal accuracy (off-diagonal mass
    spread evenly) or an explicit A x C x C array.  ``prior`` defaults to
    uniform.
    """

    questions: int
    annotators: int
    options: int
    votes_per_question: int
    confusion: object = 0.8
    prior: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if min(self.questions, self.annotators) < 1 or self.options < 2:
            raise ValueError("need questions >= 1, annotators >= 1, options >= 2")
        if not 1 <= self.votes_per_question <= self.annotators:
            raise ValueError("votes_per_question must lie in [1, annotators]")
        prior = self.prior_array()
        if prior.shape != (self.options,) or np.any(prior < 0) or abs(prior.sum() - 1) > 1e-9:
            raise ValueError("prior must be a probability vector of length options")
        conf = self.confusion_array()
        if conf.shape != (self.annotators, self.options, self.options):
            raise ValueError("confusion tables must be annotators x options x options")
        if np.any(conf < 0) or np.any(np.abs(conf.sum(-1) - 1) > 1e-9):
            raise ValueError("confusion rows must be probability vectors")

    def prior_array(self):
        if self.prior is None:
            return np.full(self.options, 1.0 / self.options)
        return np.asarray(self.prior, dtype=np.float64)

    def confusion_array(self):
        C, A = self.options, self.annotators
        if np.ndim(self.confusion) == 0:
            acc = float(self.confusion)
            if not 0 <= acc <= 1:
                raise ValueError("accuracy must lie in [0, 1]")
            table = np.full((C, C), (1 - acc) / (C - 1))
            np.fill_diagonal(table, acc)
            return np.broadcast_to(table, (A, C, C)).copy()
        return np.asarray(self.confusion, dtype=np.float64)


def diagonal_confusion(accuracies, options):
    """A x C x C tables with per-annotator diagonal ``accuracies``.

    Off-diagonal mass in each row is spread evenly.
    """
    acc = np.asarray(accuracies, dtype=np.float64)
    if np.any(acc < 0) or np.any(acc > 1):
        raise ValueError("accuracies must lie in [0, 1]")
    tables = np.repeat(((1 - acc) / (options - 1))[:, None, None], options, axis=1)
    tables = np.repeat(tables, options, axis=2)
    idx = np.arange(options)
    tables[:, idx, idx] = acc[:, None]
    return tables


def spread_accuracies(mean, spread, annotators, seed):
    """Per-annotator accuracies drawn uniformly from ``mean +/- spread``."""
    rng = substream(seed, "accuracies")
    return np.clip(rng.uniform(mean - spread, mean + spread, annotators), 0.0, 1.0)


def _draw_rows(rng, rows):
    """One categorical draw per row of the probability matrix ``rows``."""
    cdf = np.cumsum(rows, axis=1)
    u = rng.random(len(rows)) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), rows.shape[1] - 1)


def simulate(cfg):
    """Generate ``(Dataset, GoldLabels)`` from ``cfg``; deterministic per seed.

    Gold labels come from the prior, each question is answered by
    ``votes_per_question`` distinct annotators, and each vote is drawn from
    the answering annotator's confusion row for the gold class.
    """
    rng = substream(cfg.seed, "simulate")
    Q, A, C, k = cfg.questions, cfg.annotators, cfg.options, cfg.votes_per_question
    gold = _draw_rows(rng, np.broadcast_to(cfg.prior_array(), (Q, C)))
    who = np.argsort(rng.random((Q, A)), axis=1)[:, :k]
    conf = cfg.confusion_array()
    annot = who.ravel()
    question = np.repeat(np.arange(Q), k)
    votes = _draw_rows(rng, conf[annot, gold[question]])
    d = _canonical(question, annot, votes, Q, A, C)
    return d, GoldLabels({f"q{q}": int(gold[q]) for q in range(Q)})


def _canonical(question, annot, votes, Q, A, C):
    """Dataset with ids ``q<i>``/``w<j>``, annotators densified canonically."""
    _, first = np.unique(annot, return_index=True)
    used = annot[np.sort(first)]
    remap = np.full(A, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Dataset(
        question=question,
        annotator=remap[annot],
        option=votes,
        question_ids=tuple(f"q{q}" for q in range(Q)),
        annotator_ids=tuple(f"w{a}" for a in used),
        option_ids=tuple(range(C)),
    )


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    neg_log_likelihood: Optional[float]
    iterations: int
    seconds: Optional[float]
    converged: bool

    def to_dict(self):
        return asdict(self)


def accuracy(d, labels, gold):
    qs, ls = gold.align(d)
    if len(qs) == 0:
        raise ValueError("no gold labels cover this dataset")
    return float(np.mean(np.asarray(labels)[qs] == ls))


def evaluate(result, gold, elapsed=None, d=None):
    """Metrics for ``result``.

    ``gold`` may be a :class:`GoldLabels` (requires the dataset ``d``) or an
    array of dense gold labels aligned with the result's questions.
    """
    if isinstance(gold, GoldLabels):
        if d is None:
            raise ValueError("evaluating against GoldLabels needs the dataset")
        acc = accuracy(d, result.labels, gold)
    else:
        gold = np.asarray(gold)
        if gold.size == 0:
            raise ValueError("empty gold")
        acc = float(np.mean(result.labels == gold))
    nll = result.neg_log_likelihood
    return Metrics(
        accuracy=acc,
        neg_log_likelihood=nll if math.isfinite(nll) else None,
        iterations=result.iterations,
        seconds=elapsed,
        converged=result.converged,
    )


def timed_aggregate(d, cfg, workers=1):
    start = time.perf_counter()
    result = aggregate(d, cfg, workers=workers)
    return result, time.perf_counter() - start


@dataclass(frozen=True)
class SweepRow:
    k: int
    algorithm: str
    repeat: int
    accuracy: float
    nll: Optional[float]
    iterations: int
    seconds: Optional[float]
    converged: bool


@dataclass(frozen=True)
class SweepReport:
    rows: tuple
    config: dict

    def algorithms(self):
        return sorted({r.algorithm for r in self.rows}, key=_algo_order)

    def cells(self, algorithm):
        """Per-k mean of every metric for ``algorithm`` (over repeats)."""
        by_k = {}
        for r in self.rows:
            if r.algorithm == algorithm:
                by_k.setdefault(r.k, []).append(r)
        out = {}
        for k in sorted(by_k):
            rs = by_k[k]
            out[k] = {
                "accuracy": _mean([r.accuracy for r in rs]),
                "accuracy_std": _std([r.accuracy for r in rs]),
                "nll": _mean([r.nll for r in rs]),
                "iterations": _mean([r.iterations for r in rs]),
                "iterations_std": _std([r.iterations for r in rs]),
                "seconds": _mean([r.seconds for r in rs]),
                "seconds_std": _std([r.seconds for r in rs]),
                "converged": all(r.converged for r in rs),
            }
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in SWEEP_COLUMNS])
        return buf.getvalue()

    def to_dict(self):
        summary = {a: {str(k): v for k, v in self.cells(a).items()} for a in self.algorithms()}
        return {"config": self.config, "rows": [asdict(r) for r in self.rows], "summary": summary}


def _algo_order(name):
    return (ALGORITHMS.index(name) if name in ALGORITHMS else len(ALGORITHMS), name)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return math.fsum(xs) / len(xs) if xs else None


def _std(xs):
    xs = [x for x in xs if x is not None]
    return statistics.pstdev(xs) if len(xs) > 1 else (0.0 if xs else None)


def sweep_annotators(d, gold, algorithms, cfg, k_max, repeats=1, timing=False, workers=1):
    """Run every algorithm on seeded annotator subsets of size 1..k_max.

    For each ``(k, repeat)`` one subsample is drawn and shared by every
    algorithm, and all algorithms use the same ``cfg.seed`` for majority-vote
    ties.  Cells are independent and may run on ``workers`` threads; rows
    are always ordered by ``(k, repeat, algorithm)``.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    for a in algorithms:
        if a not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {a!r}")
    if d.votes_per_question.min() < k_max:
        raise ValueError(f"some question has fewer than k_max={k_max} votes; filter first")
    algorithms = sorted(set(algorithms), key=_algo_order)

    jobs = []
    for k in range(1, k_max + 1):
        for rep in range(repeats):
            sub = subsample_annotators(d, k, _cell_seed(cfg.seed, rep))
            for a in algorithms:
                jobs.append((k, rep, a, sub))

    def run(job):
        k, rep, a, sub = job
        result, elapsed = timed_aggregate(sub, replace(cfg, algorithm=a))
        m = evaluate(result, gold, elapsed if timing else None, d=sub)
        return SweepRow(k, a, rep, m.accuracy, m.neg_log_likelihood, m.iterations, m.seconds, m.converged)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(j) for j in jobs]
    config = dict(cfg.to_dict(), algorithms=algorithms, k_max=k_max, repeats=repeats, timing=timing)
    config.pop("algorithm")
    return SweepReport(tuple(rows), config)


def _cell_seed(seed, repeat):
    # repeat 0 uses the user seed itself so single-repeat sweeps match
    # a plain subsample with that seed
    return seed if repeat == 0 else int(substream(seed, "repeat", repeat).integers(2**63))


def speedup_report(sweep, baseline, target):
    """Mean over k of baseline/target time and iteration ratios.

    The time ratio is None when the sweep was run without timing.
    """
    present = set(sweep.algorithms())
    for a in (baseline, target):
        if a not in present:
            raise ValueError(f"algorithm {a!r} not in sweep")
    base, tgt = sweep.cells(baseline), sweep.cells(target)
    iter_ratios, time_ratios = [], []
    for k in sorted(base):
        iter_ratios.append(base[k]["iterations"] / tgt[k]["iterations"])
        if base[k]["seconds"] is not None and tgt[k]["seconds"]:
            time_ratios.append(base[k]["seconds"] / tgt[k]["seconds"])
    time_ratio = _mean(time_ratios) if len(time_ratios) == len(iter_ratios) else None
    return time_ratio, _mean(iter_ratios)


def merge_external(sweep, path):
    """Append rows from a CSV of externally computed baselines (e.g. IWMV, GLAD).

    The file uses the sweep CSV columns; ``repeat``, ``nll`` and
    ``seconds`` may be left empty.
    """
    rows = list(sweep.rows)
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                SweepRow(
                    k=int(rec["k"]),
                    algorithm=rec["algorithm"],
                    repeat=int(rec.get("repeat") or 0),
                    accuracy=float(rec["accuracy"]),
                    nll=float(rec["nll"]) if rec.get("nll") else None,
                    iterations=int(float(rec["iterations"])) if rec.get("iterations") else 0,
                    seconds=float(rec["seconds"]) if rec.get("seconds") else None,
                    converged=(rec.get("converged", "true").strip().lower() in ("1", "true", "yes")),
                )
            )
    rows.sort(key=lambda r: (r.k, r.repeat, _algo_order(r.algorithm)))
    return SweepReport(tuple(rows), sweep.config)


def plot_sweep(sweep, out_dir, title=None):
    """Write accuracy / seconds / iterations vs k panels as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in ("accuracy", "seconds", "iterations"):
        fig, ax = plt.subplots(figsize=(4, 3))
        drawn = False
        for a in sweep.algorithms():
            cells = sweep.cells(a)
            ks = [k for k in cells if cells[k][metric] is not None]
            if ks:
                ax.plot(ks, [cells[k][metric] for k in ks], marker="o", label=a)
                drawn = True
        if not drawn:
            plt.close(fig)
            continue
        ax.set_xlabel("annotators per question")
        ax.set_ylabel(metric)
        if title:
            ax.set_title(title)
        ax.grid(True, linestyle="--", alpha=0.5)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


def sweep_json(sweep):
    return json.dumps(sweep.to_dict(), indent=1, sort_keys=True) + "\n"
