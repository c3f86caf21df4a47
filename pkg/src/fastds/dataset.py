"""Vote tables: loading, validation and the preprocessing used by the sweeps.

A :class:`Dataset` stores one row per vote in three parallel integer arrays
(question, annotator, option), grouped by question.  Question ids are dense
in order of first appearance in the file, annotator ids are dense in order of
first appearance in the question-grouped vote sequence, and the original
string ids are kept alongside for reporting.  Within a question, votes keep
their file order; every downstream reduction walks votes in this order.

Votes CSV::

    # options=0,1,2          (optional; or "# num_options=3")
    question,annotator,option
    q0,w17,1
    ...

Gold CSV::

    question,label
    q0,1
"""

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from fastds._rng import substream

logger = logging.getLogger(__name__)

VOTE_COLUMNS = ("question", "annotator", "option")
GOLD_COLUMNS = ("question", "label")


class DatasetError(ValueError):
    """Raised for malformed or inconsistent vote data."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyDatasetError(DatasetError):
    pass


def _frozen(values, dtype=np.int64):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable single-choice vote table.

    Attributes
    ----------
    question, annotator, option : ndarray of int
        One entry per vote, sorted by question (stable w.r.t. file order).
    question_ids, annotator_ids : tuple of str
        Original ids, indexed by dense id.
    option_ids : tuple of int
        Original option id of each dense option; ``len(option_ids) == C``.
    history : tuple of dict
        Preprocessing events applied since loading (filters, removals).
    """

    question: np.ndarray
    annotator: np.ndarray
    option: np.ndarray
    question_ids: tuple
    annotator_ids: tuple
    option_ids: tuple
    history: tuple = field(default=())

    def __post_init__(self):
        for name in ("question", "annotator", "option"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "question_ids", tuple(str(q) for q in self.question_ids))
        object.__setattr__(self, "annotator_ids", tuple(str(a) for a in self.annotator_ids))
        object.__setattr__(self, "option_ids", tuple(int(c) for c in self.option_ids))
        self._validate()

    def _validate(self):
        q, a, o = self.question, self.annotator, self.option
        if not (len(q) == len(a) == len(o)):
            raise DatasetError("vote arrays differ in length")
        Q, A, C = self.num_questions, self.num_annotators, self.num_options
        if Q == 0 or len(q) == 0:
            raise EmptyDatasetError("dataset has no questions")
        if C < 1:
            raise DatasetError("dataset needs at least one option")
        if len(set(self.option_ids)) != C:
            raise DatasetError("option ids are not unique")
        if q.min() < 0 or q.max() >= Q or np.any(np.diff(q) < 0):
            raise DatasetError("question ids must be dense and grouped")
        if a.min() < 0 or a.max() >= A:
            raise DatasetError("annotator id out of range")
        if o.min() < 0 or o.max() >= C:
            raise DatasetError("option id out of range")
        per_question = np.bincount(q, minlength=Q)
        if np.any(per_question == 0):
            raise DatasetError("every question needs at least one vote")
        pairs = q * A + a
        if len(np.unique(pairs)) != len(pairs):
            raise DatasetError("duplicate (question, annotator) vote")

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.question_ids == other.question_ids
            and self.annotator_ids == other.annotator_ids
            and self.option_ids == other.option_ids
            and np.array_equal(self.question, other.question)
            and np.array_equal(self.annotator, other.annotator)
            and np.array_equal(self.option, other.option)
        )

    __hash__ = None

    @property
    def num_questions(self):
        return len(self.question_ids)

    @property
    def num_annotators(self):
        return len(self.annotator_ids)

    @property
    def num_options(self):
        return len(self.option_ids)

    @property
    def num_votes(self):
        return len(self.question)

    @cached_property
    def offsets(self):
        """Start index of each question's votes, plus a trailing ``num_votes``."""
        starts = np.searchsorted(self.question, np.arange(self.num_questions + 1))
        starts.setflags(write=False)
        return starts

    @cached_property
    def votes_per_question(self):
        return np.diff(self.offsets)

    @cached_property
    def vote_counts(self):
        """Q x C matrix of how many votes each option received."""
        C = self.num_options
        flat = np.bincount(self.question * C + self.option, minlength=self.num_questions * C)
        return flat.reshape(self.num_questions, C)

    def votes_of(self, q):
        """List of ``(annotator, option)`` pairs for question ``q`` in file order."""
        lo, hi = self.offsets[q], self.offsets[q + 1]
        return list(zip(self.annotator[lo:hi].tolist(), self.option[lo:hi].tolist()))

    def option_index(self, original):
        try:
            return self.option_ids.index(int(original))
        except ValueError:
            raise DatasetError(f"unknown option id {original!r}") from None

    def summary(self):
        return {
            "questions": self.num_questions,
            "annotators": self.num_annotators,
            "options": self.num_options,
            "votes": self.num_votes,
            "history": list(self.history),
        }


def from_records(records, option_ids=None, history=()):
    """Build a Dataset from ``(question, annotator, option)`` records.

    ``option`` values are integer option ids.  If ``option_ids`` is None the
    option set is ``range(max + 1)``; otherwise it is the declared sequence
    and every vote must use one of its members.
    """
    records = list(records)
    if not records:
        raise EmptyDatasetError("no votes")
    q_index = {}
    rows = []
    for q, a, o in records:
        qi = q_index.setdefault(str(q), len(q_index))
        rows.append((qi, str(a), int(o)))
    if option_ids is None:
        top = max(o for _, _, o in rows)
        if min(o for _, _, o in rows) < 0:
            raise DatasetError("option ids must be non-negative")
        option_ids = tuple(range(top + 1))
    opt_index = {c: i for i, c in enumerate(option_ids)}
    order = sorted(range(len(rows)), key=lambda i: rows[i][0])
    a_index = {}
    qs, ans, opts = [], [], []
    for i in order:
        qi, a, o = rows[i]
        if o not in opt_index:
            raise DatasetError(f"option {o} not among the declared options")
        qs.append(qi)
        ans.append(a_index.setdefault(a, len(a_index)))
        opts.append(opt_index[o])
    return Dataset(
        question=qs,
        annotator=ans,
        option=opts,
        question_ids=tuple(q_index),
        annotator_ids=tuple(a_index),
        option_ids=tuple(option_ids),
        history=tuple(history),
    )


def _parse_options_directive(line):
    body = line.lstrip("#").strip()
    key, _, value = body.partition("=")
    key = key.strip()
    try:
        if key == "num_options":
            return tuple(range(int(value)))
        if key == "options":
            return tuple(int(v) for v in value.split(","))
    except ValueError:
        raise DatasetError(f"bad options directive {line.strip()!r}", line=1) from None
    return None


def _read_table(text, required, columns=None, delimiter=","):
    """Yield ``(line_number, row_dict)`` from delimited text.

    Leading ``#`` lines are returned separately as directives.
    ``columns`` maps canonical column names to the names used in the file.
    """
    lines = text.splitlines()
    directives = []
    start = 0
    while start < len(lines) and lines[start].startswith("#"):
        directives.append(lines[start])
        start += 1
    reader = csv.reader(lines[start:], delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError("missing header", line=start + 1) from None
    header = [h.strip() for h in header]
    columns = dict(columns or {})
    positions = {}
    for name in required:
        source = columns.get(name, name)
        if source not in header:
            raise DatasetError(f"missing column {source!r}", line=start + 1)
        positions[name] = header.index(source)
    rows = []
    for offset, row in enumerate(reader):
        line_no = start + 2 + offset
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) < len(header):
            raise DatasetError(f"expected {len(header)} fields, got {len(row)}", line=line_no)
        rows.append((line_no, {name: row[pos].strip() for name, pos in positions.items()}))
    return directives, rows


def _as_int(value, what, line):
    try:
        return int(value)
    except (TypeError, ValueError):
        raise DatasetError(f"{what} must be an integer, got {value!r}", line=line) from None


def load_dataset(path, format=None, columns=None, delimiter=","):
    """Load a single-choice vote file into a :class:`Dataset`.

    Parameters
    ----------
    path : str or Path
    format : {"csv", "json"}, optional
        Inferred from the file suffix when omitted (``.json`` -> json,
        anything else -> delimited text).
    columns : dict, optional
        Map from ``question``/``annotator``/``option`` to the file's own
        column names, for foreign layouts such as tab-separated benchmark
        dumps.
    delimiter : str
        Field separator for delimited text.
    """
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    text = path.read_text(encoding="utf-8")
    if format == "json":
        return _load_json(text)
    if format != "csv":
        raise DatasetError(f"unknown format {format!r}")
    return loads_csv(text, columns=columns, delimiter=delimiter)


def loads_csv(text, columns=None, delimiter=","):
    directives, rows = _read_table(text, VOTE_COLUMNS, columns, delimiter)
    option_ids = None
    for d in directives:
        option_ids = _parse_options_directive(d) or option_ids
    declared = set(option_ids) if option_ids is not None else None
    seen = {}
    records = []
    for line_no, row in rows:
        o = _as_int(row["option"], "option", line_no)
        if o < 0:
            raise DatasetError(f"negative option id {o}", line=line_no)
        if declared is not None and o not in declared:
            raise DatasetError(f"option {o} outside declared options", line=line_no)
        key = (row["question"], row["annotator"])
        if key in seen:
            raise DatasetError(
                f"duplicate vote by annotator {key[1]!r} on question {key[0]!r} "
                f"(first at line {seen[key]})",
                line=line_no,
            )
        seen[key] = line_no
        records.append((row["question"], row["annotator"], o))
    if not records:
        raise EmptyDatasetError("no votes")
    return from_records(records, option_ids=option_ids)


def _load_json(text):
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(exc.msg, line=exc.lineno) from None
    option_ids = None
    if isinstance(payload, dict):
        if "options" in payload:
            option_ids = tuple(int(c) for c in payload["options"])
        elif "num_options" in payload:
            option_ids = tuple(range(int(payload["num_options"])))
        payload = payload.get("votes", [])
    seen = set()
    records = []
    for i, obj in enumerate(payload):
        try:
            q, a, o = str(obj["question"]), str(obj["annotator"]), int(obj["option"])
        except (KeyError, TypeError, ValueError):
            raise DatasetError(f"vote #{i} is malformed: {obj!r}") from None
        if (q, a) in seen:
            raise DatasetError(f"duplicate vote by annotator {a!r} on question {q!r} (vote #{i})")
        if option_ids is not None and o not in option_ids:
            raise DatasetError(f"option {o} outside declared options (vote #{i})")
        seen.add((q, a))
        records.append((q, a, o))
    return from_records(records, option_ids=option_ids)


def dumps_csv(d):
    buf = io.StringIO()
    buf.write("# options=" + ",".join(str(c) for c in d.option_ids) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(VOTE_COLUMNS)
    for q, a, o in zip(d.question.tolist(), d.annotator.tolist(), d.option.tolist()):
        w.writerow((d.question_ids[q], d.annotator_ids[a], d.option_ids[o]))
    return buf.getvalue()


def dumps_json(d):
    votes = [
        {"question": d.question_ids[q], "annotator": d.annotator_ids[a], "option": d.option_ids[o]}
        for q, a, o in zip(d.question.tolist(), d.annotator.tolist(), d.option.tolist())
    ]
    return json.dumps({"options": list(d.option_ids), "votes": votes}, indent=1) + "\n"


def write_atomic(path, text):
    """Write ``text`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_dataset(d, path, format=None):
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    write_atomic(path, dumps_json(d) if format == "json" else dumps_csv(d))


# -- gold labels --------------------------------------------------------------


@dataclass(frozen=True)
class GoldLabels:
    """True option per question, keyed by original question id.

    Labels are original option ids; use :meth:`align` to get dense indices
    for a particular Dataset.  Gold is only ever used for evaluation.
    """

    labels: dict

    def __len__(self):
        return len(self.labels)

    def align(self, d):
        """Return ``(question_index, option_index)`` arrays for questions of ``d``.

        Gold entries for questions absent from ``d`` (e.g. removed by a
        filter) or labelled with a class dropped by :func:`remove_class` are
        skipped; any other label outside ``d``'s options is an error.
        """
        lookup = {qid: i for i, qid in enumerate(d.question_ids)}
        removed = {e["option"] for e in d.history if e.get("op") == "remove_class"}
        qs, ls = [], []
        for qid, label in self.labels.items():
            i = lookup.get(qid)
            if i is None or label in removed:
                continue
            qs.append(i)
            ls.append(d.option_index(label))
        order = np.argsort(qs, kind="stable")
        return np.asarray(qs, dtype=np.int64)[order], np.asarray(ls, dtype=np.int64)[order]

    def restrict(self, d):
        qids = set(d.question_ids)
        return GoldLabels({q: l for q, l in self.labels.items() if q in qids})


def load_gold(path, columns=None, delimiter=","):
    text = Path(path).read_text(encoding="utf-8")
    _, rows = _read_table(text, GOLD_COLUMNS, columns, delimiter)
    labels = {}
    for line_no, row in rows:
        if row["question"] in labels:
            raise DatasetError(f"duplicate gold for question {row['question']!r}", line=line_no)
        labels[row["question"]] = _as_int(row["label"], "label", line_no)
    return GoldLabels(labels)


def dumps_gold(gold):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GOLD_COLUMNS)
    for q, label in gold.labels.items():
        w.writerow((q, label))
    return buf.getvalue()


# -- preprocessing ------------------------------------------------------------


def _select_votes(d, keep, option_ids=None, option_map=None, event=None):
    """Rebuild ``d`` from the votes flagged in ``keep``, re-densifying ids."""
    keep = np.asarray(keep, dtype=bool)
    q = d.question[keep]
    a = d.annotator[keep]
    o = d.option[keep]
    if option_map is not None:
        o = option_map[o]
    if len(q) == 0:
        raise EmptyDatasetError("no votes left after preprocessing")
    # questions are already grouped, so first appearance == ascending order
    q_used, q_new = np.unique(q, return_inverse=True)
    _, first = np.unique(a, return_index=True)
    a_used = a[np.sort(first)]
    a_map = np.full(d.num_annotators, -1, dtype=np.int64)
    a_map[a_used] = np.arange(len(a_used))
    history = d.history + ((event,) if event else ())
    return Dataset(
        question=q_new,
        annotator=a_map[a],
        option=o,
        question_ids=tuple(d.question_ids[i] for i in q_used),
        annotator_ids=tuple(d.annotator_ids[i] for i in a_used),
        option_ids=d.option_ids if option_ids is None else option_ids,
        history=history,
    )


def head_questions(d, n):
    """The first ``n`` questions of ``d`` (in dense id order)."""
    if not 1 <= n <= d.num_questions:
        raise DatasetError(f"n must lie in [1, {d.num_questions}]")
    if n == d.num_questions:
        return d
    return _select_votes(d, d.question < n)


def filter_min_annotators(d, threshold):
    """Keep only questions answered by at least ``threshold`` annotators."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    counts = d.votes_per_question
    keep_q = counts >= threshold
    if keep_q.all():
        return d
    if not keep_q.any():
        raise EmptyDatasetError(f"no question has >= {threshold} votes")
    event = {
        "op": "filter_min_annotators",
        "threshold": int(threshold),
        "questions_dropped": int((~keep_q).sum()),
    }
    return _select_votes(d, keep_q[d.question], event=event)


def subsample_annotators(d, k, seed):
    """Keep exactly ``k`` uniformly chosen votes per question.

    Every question must already have at least ``k`` votes.  Kept votes stay
    in file order.  The draw is a pure function of ``(d, k, seed)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = d.votes_per_question
    if counts.min() < k:
        short = int(np.argmin(counts))
        raise DatasetError(
            f"question {d.question_ids[short]!r} has {int(counts[short])} votes, fewer than k={k}"
        )
    if counts.max() == k:
        return d
    rng = substream(seed, "subsample", k)
    keys = rng.random(d.num_votes)
    # rank of each vote's key within its question; keep the k smallest
    order = np.lexsort((keys, d.question))
    rank = np.empty(d.num_votes, dtype=np.int64)
    rank[order] = np.arange(d.num_votes) - np.repeat(d.offsets[:-1], counts)
    event = {"op": "subsample_annotators", "k": int(k), "seed": int(seed)}
    return _select_votes(d, rank < k, event=event)


def remove_class(d, dead_option):
    """Drop every vote for ``dead_option`` (a dense option index).

    Questions left without votes are dropped and counted in ``history``.
    Remaining options are re-densified and C shrinks by one.
    """
    C = d.num_options
    if not 0 <= dead_option < C:
        raise DatasetError(f"option index {dead_option} out of range [0, {C})")
    if C == 1:
        raise DatasetError("cannot remove the only option")
    keep = d.option != dead_option
    option_map = np.arange(C) - (np.arange(C) > dead_option)
    option_ids = d.option_ids[:dead_option] + d.option_ids[dead_option + 1 :]
    before = d.num_questions
    remaining = np.unique(d.question[keep]).size
    event = {
        "op": "remove_class",
        "option": d.option_ids[dead_option],
        "votes_dropped": int((~keep).sum()),
        "questions_dropped": before - remaining,
    }
    if event["questions_dropped"]:
        logger.info("remove_class dropped %d questions", event["questions_dropped"])
    return _select_votes(d, keep, option_ids=option_ids, option_map=option_map, event=event)
