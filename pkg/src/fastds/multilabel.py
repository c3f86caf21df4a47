"""Questions with several correct options, via per-(question, option) binarisation.

Every (question, option) pair becomes a binary question whose label is 1
when the option is correct.  All Q*C binary questions are pooled into one
two-option task and aggregated with any of the single-choice algorithms.
"""

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from fastds._rng import substream
from fastds.aggregators import aggregate
from fastds.dataset import Dataset, DatasetError, EmptyDatasetError, _as_int, _parse_options_directive, _read_table

MULTI_COLUMNS = ("question", "annotator", "option", "selected")


@dataclass(frozen=True, eq=False)
class MultiDataset:
    """Selections per (question, annotator) answer event.

    ``answers`` is a tuple of ``(question, annotator, frozenset_of_options)``
    in canonical order: grouped by question, file order within a question.
    An empty set means the annotator answered and declined every option.
    """

    answers: tuple
    question_ids: tuple
    annotator_ids: tuple
    num_options: int

    def __post_init__(self):
        Q, A, C = self.num_questions, self.num_annotators, self.num_options
        if Q == 0 or not self.answers:
            raise EmptyDatasetError("no answers")
        if C < 1:
            raise DatasetError("need at least one option")
        seen = set()
        last_q = -1
        covered = set()
        for q, a, chosen in self.answers:
            if not (0 <= q < Q and 0 <= a < A):
                raise DatasetError("question or annotator id out of range")
            if q < last_q:
                raise DatasetError("answers must be grouped by question")
            if (q, a) in seen:
                raise DatasetError("duplicate (question, annotator) answer")
            if any(not 0 <= c < C for c in chosen):
                raise DatasetError("selected option out of range")
            seen.add((q, a))
            covered.add(q)
            last_q = q
        if len(covered) != Q:
            raise DatasetError("every question needs at least one answer")

    @property
    def num_questions(self):
        return len(self.question_ids)

    @property
    def num_annotators(self):
        return len(self.annotator_ids)

    def selections(self):
        """``{(question, annotator): frozenset}`` view of the answers."""
        return {(q, a): chosen for q, a, chosen in self.answers}

    def __eq__(self, other):
        if not isinstance(other, MultiDataset):
            return NotImplemented
        return (
            self.answers == other.answers
            and self.question_ids == other.question_ids
            and self.annotator_ids == other.annotator_ids
            and self.num_options == other.num_options
        )

    __hash__ = None


def multi_from_records(records, num_options=None):
    """Build a MultiDataset from ``(question, annotator, option, selected)`` rows."""
    q_index, a_index = {}, {}
    chosen = {}
    order = []
    top = -1
    for q, a, o, sel in records:
        qi = q_index.setdefault(str(q), len(q_index))
        key = (qi, str(a))
        if key not in chosen:
            chosen[key] = set()
            order.append(key)
        if sel:
            chosen[key].add(int(o))
        top = max(top, int(o))
    if not order:
        raise EmptyDatasetError("no answers")
    C = top + 1 if num_options is None else num_options
    order.sort(key=lambda key: key[0])
    answers = []
    for qi, a in order:
        ai = a_index.setdefault(a, len(a_index))
        answers.append((qi, ai, frozenset(chosen[(qi, a)])))
    return MultiDataset(tuple(answers), tuple(q_index), tuple(a_index), C)


def load_multi(path, columns=None, delimiter=","):
    """Load a ``question,annotator,option,selected`` CSV.

    An answer event is any (question, annotator) pair with at least one row;
    its selection set is the options with ``selected=1``.
    """
    text = Path(path).read_text(encoding="utf-8")
    directives, rows = _read_table(text, MULTI_COLUMNS, columns, delimiter)
    num_options = None
    for d in directives:
        declared = _parse_options_directive(d)
        if declared is not None:
            if declared != tuple(range(len(declared))):
                raise DatasetError("multi-label files need options 0..C-1")
            num_options = len(declared)
    seen = set()
    records = []
    for line_no, row in rows:
        o = _as_int(row["option"], "option", line_no)
        sel = _as_int(row["selected"], "selected", line_no)
        if sel not in (0, 1):
            raise DatasetError(f"selected must be 0 or 1, got {sel}", line=line_no)
        if o < 0 or (num_options is not None and o >= num_options):
            raise DatasetError(f"option {o} out of range", line=line_no)
        key = (row["question"], row["annotator"], o)
        if key in seen:
            raise DatasetError("duplicate (question, annotator, option) row", line=line_no)
        seen.add(key)
        records.append((row["question"], row["annotator"], o, sel))
    return multi_from_records(records, num_options)


def dumps_multi(md):
    buf = io.StringIO()
    buf.write(f"# num_options={md.num_options}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MULTI_COLUMNS)
    for q, a, chosen in md.answers:
        for c in range(md.num_options):
            w.writerow((md.question_ids[q], md.annotator_ids[a], c, int(c in chosen)))
    return buf.getvalue()


def binarize(md):
    """Pooled binary Dataset with one question per (question, option) pair.

    Binary question ``q * C + c`` gets a vote from every annotator who
    answered ``q``: 1 if they selected ``c``, else 0.  Annotator ids are
    preserved.
    """
    C = md.num_options
    by_q = [[] for _ in range(md.num_questions)]
    for q, a, chosen in md.answers:
        by_q[q].append((a, chosen))
    question, annotator, option = [], [], []
    for q, events in enumerate(by_q):
        for c in range(C):
            for a, chosen in events:
                question.append(q * C + c)
                annotator.append(a)
                option.append(1 if c in chosen else 0)
    return Dataset(
        question=question,
        annotator=annotator,
        option=option,
        question_ids=tuple(f"{qid}#{c}" for qid in md.question_ids for c in range(C)),
        annotator_ids=md.annotator_ids,
        option_ids=(0, 1),
    )


def regroup(bd, md_like):
    """Inverse of :func:`binarize`: rebuild selection sets from binary votes.

    ``md_like`` supplies question ids, annotator ids and C.
    """
    C = md_like.num_options
    chosen = {}
    order = []
    for bq, a, o in zip(bd.question.tolist(), bd.annotator.tolist(), bd.option.tolist()):
        q, c = divmod(bq, C)
        key = (q, a)
        if key not in chosen:
            chosen[key] = set()
            order.append(key)
        if bd.option_ids[o] == 1:
            chosen[key].add(c)
    order.sort(key=lambda key: key[0])
    answers = tuple((q, a, frozenset(chosen[(q, a)])) for q, a in order)
    return MultiDataset(answers, md_like.question_ids, md_like.annotator_ids, C)


@dataclass(frozen=True, eq=False)
class MultiLabelResult:
    decisions: np.ndarray
    binary: object

    def selected_sets(self):
        return [frozenset(np.flatnonzero(row).tolist()) for row in self.decisions]


def aggregate_multilabel(md, cfg, workers=1):
    """Binarise, aggregate the pooled binary task, map labels back to Q x C."""
    bd = binarize(md)
    result = aggregate(bd, cfg, workers=workers)
    decisions = (result.labels == 1).reshape(md.num_questions, md.num_options)
    return MultiLabelResult(decisions, result)


def subsample_multi(md, k, seed):
    """Keep ``k`` random answer events per question (file order preserved).

    Questions with fewer than ``k`` answers are an error; filter first.
    """
    by_q = [[] for _ in range(md.num_questions)]
    for i, (q, _, _) in enumerate(md.answers):
        by_q[q].append(i)
    if min(len(idx) for idx in by_q) < k:
        raise DatasetError(f"some question has fewer than k={k} answers")
    rng = substream(seed, "multi-subsample", k)
    keep = []
    for idx in by_q:
        picked = np.sort(rng.permutation(len(idx))[:k])
        keep.extend(idx[j] for j in picked)
    records = []
    for i in keep:
        q, a, chosen = md.answers[i]
        records += [(md.question_ids[q], md.annotator_ids[a], c, c in chosen) for c in range(md.num_options)]
    return multi_from_records(records, md.num_options)


def multilabel_subsets(md, gold, algorithms, cfg, k, subsets=5, workers=1):
    """Mean per-pair accuracy over ``subsets`` seeded annotator subsamples.

    ``gold`` is a Q x C boolean array aligned with ``md``.  Subset ``i``
    draws its annotators with seed ``cfg.seed + i``; every algorithm sees the
    same subsets.
    """
    gold = np.asarray(gold, dtype=bool)
    out = {}
    for a in algorithms:
        accs = []
        for i in range(subsets):
            sub = subsample_multi(md, k, cfg.seed + i)
            rows = [md.question_ids.index(qid) for qid in sub.question_ids]
            res = aggregate_multilabel(sub, replace(cfg, algorithm=a), workers=workers)
            accs.append(float(np.mean(res.decisions == gold[rows])))
        out[a] = {"pair_accuracy": accs, "mean": float(np.mean(accs))}
    return out


def dumps_decisions(md, res):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("question", "option", "selected"))
    for q, qid in enumerate(md.question_ids):
        for c in range(md.num_options):
            w.writerow((qid, c, int(res.decisions[q, c])))
    return buf.getvalue()


def simulate_multilabel(questions, annotators, options, votes_per_question, flip=0.2, positive_rate=0.3, seed=0):
    """Planted multi-label data: Bernoulli gold per pair, each decision flipped w.p. ``flip``.

    Returns ``(MultiDataset, gold)`` with ``gold`` a Q x C boolean array.
    """
    if not 1 <= votes_per_question <= annotators:
        raise ValueError("votes_per_question must lie in [1, annotators]")
    rng = substream(seed, "simulate-multilabel")
    Q, A, C, k = questions, annotators, options, votes_per_question
    gold = rng.random((Q, C)) < positive_rate
    who = np.argsort(rng.random((Q, A)), axis=1)[:, :k]
    flips = rng.random((Q, k, C)) < flip
    picked = gold[:, None, :] ^ flips
    records = []
    for q in range(Q):
        for j in range(k):
            for c in range(C):
                records.append((f"q{q}", f"w{who[q, j]}", c, bool(picked[q, j, c])))
    return multi_from_records(records, C), gold
