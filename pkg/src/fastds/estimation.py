"""Numerical kernels shared by every aggregator.

Notation: ``Q`` questions, ``A`` annotators, ``C`` options.  Parameters hold
the class marginals ``p`` (length C) and per-annotator confusion tables
``pi`` (A x C x C) with ``pi[a, c, l]`` the probability that annotator ``a``
answers ``l`` when ``c`` is true.  All products over votes are taken in log
space.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from fastds._rng import substream


@dataclass(frozen=True, eq=False)
class Parameters:
    class_marginals: np.ndarray
    error_rates: np.ndarray

    @property
    def num_options(self):
        return len(self.class_marginals)

    @property
    def num_annotators(self):
        return self.error_rates.shape[0]

    def check(self, atol=1e-9):
        p, pi = self.class_marginals, self.error_rates
        assert abs(p.sum() - 1.0) <= atol, p.sum()
        assert np.all(np.abs(pi.sum(axis=-1) - 1.0) <= atol)
        assert np.all((p >= 0) & (p <= 1)) and np.all((pi >= 0) & (pi <= 1))


@dataclass(frozen=True, eq=False)
class Assignment:
    """Per-question label belief, a Q x C row-stochastic matrix.

    ``hard`` rows are one-hot.  ``degenerate_rows`` counts rows that an
    E-step had to reset to uniform because every class had zero mass.
    """

    matrix: np.ndarray
    hard: bool
    degenerate_rows: int = 0

    @property
    def labels(self):
        return np.argmax(self.matrix, axis=1)

    @classmethod
    def from_labels(cls, labels, num_options):
        labels = np.asarray(labels, dtype=np.int64)
        matrix = np.zeros((len(labels), num_options))
        matrix[np.arange(len(labels)), labels] = 1.0
        return cls(matrix, hard=True)


def majority_vote(d, seed):
    """Hard assignment to the most-voted option; ties broken by a seeded draw.

    Tied questions draw, in ascending question order, one uniform index
    from the ``mv-ties`` stream, so equal seeds give equal labels.
    """
    return Assignment.from_labels(majority_labels(d.vote_counts, substream(seed, "mv-ties")), d.num_options)


def majority_labels(counts, rng):
    counts = np.asarray(counts)
    top = counts.max(axis=1, keepdims=True)
    is_top = counts == top
    labels = np.argmax(counts, axis=1)
    n_top = is_top.sum(axis=1)
    for q in np.flatnonzero(n_top > 1):
        tied = np.flatnonzero(is_top[q])
        labels[q] = tied[rng.integers(len(tied))]
    return labels


def params_from_counts(class_counts, confusion_counts, alpha=0.0):
    """Maximum-likelihood parameters from (possibly fractional) counts.

    ``confusion_counts[a, c, l]`` is the weight of votes ``l`` by ``a`` on
    questions of class ``c``.  Rows with zero total become uniform;
    ``alpha`` adds a pseudo-count to every cell first.
    """
    class_counts = np.asarray(class_counts, dtype=np.float64)
    p = class_counts / class_counts.sum()
    num = np.asarray(confusion_counts, dtype=np.float64)
    if alpha:
        num = num + alpha
    den = num.sum(axis=-1, keepdims=True)
    C = num.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0 / C)
    return Parameters(p, pi)


def hard_counts(d, labels, num_annotators=None):
    """Integer class and confusion counts for a hard labelling."""
    C = d.num_options
    A = d.num_annotators if num_annotators is None else num_annotators
    labels = np.asarray(labels, dtype=np.int64)
    class_counts = np.bincount(labels, minlength=C)
    idx = (d.annotator * C + labels[d.question]) * C + d.option
    confusion = np.bincount(idx, minlength=A * C * C).reshape(A, C, C)
    return class_counts, confusion


def m_step(d, t, alpha=0.0):
    """Re-estimate parameters from assignment ``t``.

    Hard assignments are counted in integers, so division is the only
    rounding.  Soft assignments accumulate weights vote by vote in
    ascending question order.
    """
    Q, C = t.matrix.shape
    if Q != d.num_questions or C != d.num_options:
        raise ValueError(f"assignment is {Q}x{C}, dataset is {d.num_questions}x{d.num_options}")
    if t.hard:
        return params_from_counts(*hard_counts(d, t.labels), alpha=alpha)
    A = d.num_annotators
    weights = t.matrix[d.question]
    idx = d.annotator * C + d.option
    confusion = np.empty((A, C, C))
    for c in range(C):
        confusion[:, c, :] = np.bincount(idx, weights=weights[:, c], minlength=A * C).reshape(A, C)
    class_counts = np.array([math.fsum(t.matrix[:, c]) for c in range(C)])
    return params_from_counts(class_counts, confusion, alpha=alpha)


def _log_joint_block(d, log_p, log_pi, lo, hi):
    vlo, vhi = d.offsets[lo], d.offsets[hi]
    per_vote = log_pi[d.annotator[vlo:vhi], :, d.option[vlo:vhi]]
    starts = d.offsets[lo:hi] - vlo
    return log_p + np.add.reduceat(per_vote, starts, axis=0)


def log_joint(d, params, workers=1):
    """Q x C matrix of ``log p[c] + sum over votes of log pi[a, c, l]``.

    Questions are independent, so ``workers > 1`` splits them into
    contiguous blocks evaluated on threads; the result is bit-identical to
    the single-worker evaluation.
    """
    with np.errstate(divide="ignore"):
        log_p = np.log(params.class_marginals)
        log_pi = np.log(params.error_rates)
    Q = d.num_questions
    if workers <= 1 or Q < 2 * workers:
        return _log_joint_block(d, log_p, log_pi, 0, Q)
    bounds = np.linspace(0, Q, workers + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        blocks = pool.map(lambda i: _log_joint_block(d, log_p, log_pi, bounds[i], bounds[i + 1]), range(workers))
        return np.concatenate(list(blocks), axis=0)


def row_logsumexp(x):
    """Stable ``log(sum(exp(x)))`` along the last axis; -inf for all -inf rows."""
    top = np.max(x, axis=-1)
    finite = np.isfinite(top)
    safe_top = np.where(finite, top, 0.0)
    with np.errstate(divide="ignore"):
        out = safe_top + np.log(np.sum(np.exp(x - safe_top[..., None]), axis=-1))
    return np.where(finite, out, top)


def posterior_from_log_joint(lj):
    norm = row_logsumexp(lj)
    dead = ~np.isfinite(norm)
    with np.errstate(invalid="ignore"):
        post = np.exp(lj - norm[:, None])
    if dead.any():
        post[dead] = 1.0 / lj.shape[1]
    # renormalise away the last ulp so rows sum to one
    post /= post.sum(axis=1, keepdims=True)
    return Assignment(post, hard=False, degenerate_rows=int(dead.sum()))


def e_step_soft(d, params, workers=1):
    """Posterior class probabilities for every question under ``params``."""
    return posterior_from_log_joint(log_joint(d, params, workers))


def c_step(t):
    """Harden each row to its argmax; exact ties go to the lowest option."""
    return Assignment.from_labels(np.argmax(t.matrix, axis=1), t.matrix.shape[1])


def log_likelihood_from_log_joint(lj):
    return math.fsum(row_logsumexp(lj).tolist())


def log_likelihood(d, params, workers=1):
    """Observed-data log-likelihood (natural log), marginalised over classes.

    Returns -inf when some question has zero mass under every class.
    """
    return log_likelihood_from_log_joint(log_joint(d, params, workers))


def cml_from_log_joint(lj, labels):
    return math.fsum(lj[np.arange(len(labels)), labels].tolist())


def cml_criterion(d, t, params, workers=1):
    """Classification log-likelihood of the hard partition ``t``.

    Sum over questions of ``log p[c_q] + sum over votes log pi[a, c_q, l]``
    where ``c_q`` is the class assigned to question ``q``.
    """
    if not t.hard:
        raise ValueError("cml_criterion needs a hard assignment")
    return cml_from_log_joint(log_joint(d, params, workers), t.labels)
