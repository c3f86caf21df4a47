"""Streaming aggregation on top of a batch FDS solution.

Each incoming question gets a fixed four-phase update: majority vote for the
new question, an M-step over everything seen so far, an E/C-step for the new
question only, and a final M-step.  Earlier labels are never revisited.

Hard-label M-steps only need integer count tensors, so the state keeps them
up to date incrementally; :func:`fastds.estimation.params_from_counts` turns
them into parameters exactly as a full recomputation would.
"""

import numpy as np

from fastds import estimation as est
from fastds._rng import substream
from fastds.aggregators import run_fds
from fastds.dataset import Dataset


class OnlineState:
    """Accumulated votes, hard answer key and parameters of an online run.

    Not thread-safe for writers: calls to :meth:`ingest` must be serialised.
    """

    def __init__(self, d, result, cfg):
        self.cfg = cfg
        self.option_ids = d.option_ids
        self._question_ids = list(d.question_ids)
        self._seen_questions = set(self._question_ids)
        self._annotator_ids = list(d.annotator_ids)
        self._annotator_index = {a: i for i, a in enumerate(d.annotator_ids)}
        self._question = [d.question]
        self._annotator = [d.annotator]
        self._option = [d.option]
        self.labels = list(result.labels.tolist())
        C = d.num_options
        self._class_counts, self._confusion = est.hard_counts(d, result.labels)
        self._confusion = self._grow(self._confusion, d.num_annotators)
        self._rng = substream(cfg.seed, "online-mv-ties")
        self._num_options = C
        # one trailing M-step so parameters always match the stored labels
        self.parameters = self._params()
        self.initial_result = result
        self.questions_ingested = 0
        self.new_annotators = 0

    @property
    def num_questions(self):
        return len(self._question_ids)

    @property
    def num_annotators(self):
        return len(self._annotator_ids)

    def _grow(self, confusion, A):
        cap = max(A, 1)
        if confusion.shape[0] >= cap:
            return confusion
        C = confusion.shape[1]
        bigger = np.zeros((max(cap, 2 * confusion.shape[0]), C, C), dtype=confusion.dtype)
        bigger[: confusion.shape[0]] = confusion
        return bigger

    def _params(self):
        A = self.num_annotators
        return est.params_from_counts(self._class_counts, self._confusion[:A], alpha=self.cfg.smoothing)

    def _add(self, annotators, options, label, sign):
        self._class_counts[label] += sign
        np.add.at(self._confusion, (annotators, label, options), sign)

    def ingest(self, question_id, votes):
        """Add one question; return its aggregated option (dense index).

        ``votes`` is a sequence of ``(annotator, option)`` with original
        annotator ids (new ones are registered) and dense option indices.
        """
        votes = list(votes)
        if not votes:
            raise ValueError("a streamed question needs at least one vote")
        question_id = str(question_id)
        if question_id in self._seen_questions:
            raise ValueError(f"question {question_id!r} was already aggregated")
        C = self._num_options
        names = [str(a) for a, _ in votes]
        options = [int(o) for _, o in votes]
        if len(set(names)) != len(names):
            raise ValueError("an annotator voted twice on the streamed question")
        if min(options) < 0 or max(options) >= C:
            raise ValueError(f"option index out of range [0, {C})")
        for a in names:
            if a not in self._annotator_index:
                self._annotator_index[a] = len(self._annotator_ids)
                self._annotator_ids.append(a)
                self.new_annotators += 1
        annotators = [self._annotator_index[a] for a in names]
        annotators = np.asarray(annotators, dtype=np.int64)
        options = np.asarray(options, dtype=np.int64)
        self._confusion = self._grow(self._confusion, self.num_annotators)

        counts = np.bincount(options, minlength=C)[None, :]
        mv = int(est.majority_labels(counts, self._rng)[0])
        self._add(annotators, options, mv, +1)
        params = self._params()

        with np.errstate(divide="ignore"):
            row = np.log(params.class_marginals) + np.log(params.error_rates[annotators, :, options]).sum(axis=0)
        choice = int(np.argmax(row)) if np.isfinite(row).any() else mv

        self._add(annotators, options, mv, -1)
        self._add(annotators, options, choice, +1)
        self.parameters = self._params()

        q = self.num_questions
        self._question_ids.append(question_id)
        self._seen_questions.add(question_id)
        self._question.append(np.full(len(annotators), q, dtype=np.int64))
        self._annotator.append(annotators)
        self._option.append(options)
        self.labels.append(choice)
        self.questions_ingested += 1
        return choice

    @property
    def dataset(self):
        """The accumulated votes as a :class:`Dataset`."""
        return Dataset(
            question=np.concatenate(self._question),
            annotator=np.concatenate(self._annotator),
            option=np.concatenate(self._option),
            question_ids=tuple(self._question_ids),
            annotator_ids=tuple(self._annotator_ids),
            option_ids=self.option_ids,
        )

    @property
    def assignment(self):
        return est.Assignment.from_labels(self.labels, self._num_options)


def init_online(d, cfg):
    """Start an online run from the batch FDS solution on ``d``."""
    return OnlineState(d, run_fds(d, cfg), cfg)


def ingest_question(state, votes, question_id=None):
    """Functional wrapper around :meth:`OnlineState.ingest`.

    Returns ``(choice, state)``; ``state`` is updated in place.
    """
    if question_id is None:
        question_id = f"stream-{state.questions_ingested}"
    return state.ingest(question_id, votes), state
