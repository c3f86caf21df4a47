"""MV, DS, FDS and Hybrid drivers with convergence control and tracing."""

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from fastds import estimation as est

logger = logging.getLogger(__name__)

ALGORITHMS = ("mv", "ds", "fds", "hybrid")


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AggregationConfig:
    algorithm: str = "fds"
    marginal_tolerance: float = 1e-4
    hybrid_gamma: float = 0.005
    max_iterations: int = 100
    seed: int = 0
    smoothing: float = 0.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not 0 < self.marginal_tolerance < 1:
            raise ValueError("marginal_tolerance must lie in (0, 1)")
        if not 0 < self.hybrid_gamma <= 1:
            raise ValueError("hybrid_gamma must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.smoothing < 0:
            raise ValueError("smoothing must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    marginal_delta: Optional[float]
    error_rate_delta: Optional[float]
    neg_log_likelihood: float
    cml: Optional[float]
    hard: bool

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class AggregationResult:
    """Outcome of one aggregation run.

    ``final_assignment`` is always hard.  For DS (and the DS phase of a
    Hybrid run that never switched) ``posteriors`` keeps the soft rows the
    labels were hardened from.
    """

    algorithm: str
    final_assignment: est.Assignment
    parameters: est.Parameters
    iterations: int
    converged: bool
    trace: tuple
    log_likelihood: float
    switch_iteration: Optional[int] = None
    posteriors: Optional[est.Assignment] = None
    warnings: tuple = field(default=())

    @property
    def labels(self):
        return self.final_assignment.labels

    @property
    def neg_log_likelihood(self):
        return -self.log_likelihood


def check_convergence(p_prev, p_cur, tol):
    """True when the L1 distance between consecutive marginals is below ``tol``."""
    return marginal_delta(p_prev, p_cur) < tol


def marginal_delta(p_prev, p_cur):
    p_prev = np.asarray(p_prev, dtype=np.float64)
    p_cur = np.asarray(p_cur, dtype=np.float64)
    if p_prev.shape != p_cur.shape:
        raise ValueError(f"marginal lengths differ: {p_prev.shape} vs {p_cur.shape}")
    return math.fsum(np.abs(p_cur - p_prev).tolist())


def _pi_delta(prev, cur):
    if prev is None:
        return None
    return float(np.max(np.abs(cur.error_rates - prev.error_rates)))


def _finish(cfg, result_kwargs, converged):
    notes = []
    if not converged:
        msg = f"{cfg.algorithm} did not converge within {cfg.max_iterations} iterations"
        warnings.warn(msg, ConvergenceWarning, stacklevel=3)
        notes.append(msg)
    result_kwargs.setdefault("warnings", ())
    result_kwargs["warnings"] = tuple(result_kwargs["warnings"]) + tuple(notes)
    return AggregationResult(algorithm=cfg.algorithm, converged=converged, **result_kwargs)


def run_mv(d, cfg, workers=1):
    """Majority vote, with one M-step so the result carries parameters."""
    t = est.majority_vote(d, cfg.seed)
    params = est.m_step(d, t, cfg.smoothing)
    lj = est.log_joint(d, params, workers)
    ll = est.log_likelihood_from_log_joint(lj)
    rec = TraceRecord(1, None, None, -ll, est.cml_from_log_joint(lj, t.labels), True)
    return AggregationResult(
        algorithm="mv",
        final_assignment=t,
        parameters=params,
        iterations=1,
        converged=True,
        trace=(rec,),
        log_likelihood=ll,
    )


def _iterate(d, cfg, hard_from, workers):
    """Shared EM loop.

    ``hard_from`` decides, per iteration and marginal delta, whether the
    E-step output is hardened by a C-step: always for FDS, never for DS,
    and from the switch onward for Hybrid.  Returns result kwargs.
    """
    t = est.majority_vote(d, cfg.seed)
    p_prev = params_prev = None
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        params = est.m_step(d, t, cfg.smoothing)
        delta = None if p_prev is None else marginal_delta(p_prev, params.class_marginals)
        lj = est.log_joint(d, params, workers)
        post = est.posterior_from_log_joint(lj)
        hard = hard_from(it, delta)
        if hard:
            t_new = est.c_step(post)
            cml = est.cml_from_log_joint(lj, t_new.labels)
        else:
            t_new, cml = post, None
        ll = est.log_likelihood_from_log_joint(lj)
        trace.append(TraceRecord(it, delta, _pi_delta(params_prev, params), -ll, cml, hard))
        if post.degenerate_rows:
            logger.debug("iteration %d: %d degenerate posterior rows", it, post.degenerate_rows)
        stable = hard and np.array_equal(t_new.labels, t.labels)
        done = (delta is not None and delta < cfg.marginal_tolerance) or stable
        t, p_prev, params_prev = t_new, params.class_marginals, params
        if done:
            converged = True
            break
    return dict(
        final_assignment=t if t.hard else est.c_step(t),
        parameters=params_prev,
        iterations=it,
        trace=tuple(trace),
        log_likelihood=-trace[-1].neg_log_likelihood,
        posteriors=None if t.hard else t,
    ), converged


def run_fds(d, cfg, workers=1):
    """Fast Dawid-Skene: hard EM started from majority vote.

    Each iteration is M-step, E-step, C-step.  Stops when the L1 change of
    the class marginals drops below ``cfg.marginal_tolerance`` or the hard
    labels repeat, whichever comes first.
    """
    kwargs, converged = _iterate(d, cfg, lambda it, delta: True, workers)
    return _finish(cfg, kwargs, converged)


def run_ds(d, cfg, workers=1):
    """Dawid-Skene soft EM from the majority-vote labelling.

    Stops on the marginal tolerance only; final labels come from one C-step
    over the last posteriors.
    """
    kwargs, converged = _iterate(d, cfg, lambda it, delta: False, workers)
    return _finish(cfg, kwargs, converged)


def run_hybrid(d, cfg, workers=1):
    """DS iterations until the marginal change drops below ``hybrid_gamma``,
    then FDS iterations until convergence.

    The switch test needs a previous marginal, so it is first evaluated at
    iteration 2.  When it fires at iteration ``t`` the E-step of ``t`` is
    hardened and ``switch_iteration`` is ``t - 1``, the number of soft
    iterations performed.
    """
    state = {"switch": None}

    def hard_from(it, delta):
        if state["switch"] is None and delta is not None and delta < cfg.hybrid_gamma:
            state["switch"] = it - 1
        return state["switch"] is not None

    kwargs, converged = _iterate(d, cfg, hard_from, workers)
    notes = []
    switch = state["switch"]
    if switch is None:
        if converged:
            notes.append("converged during the DS phase before the switch threshold was met")
        else:
            switch = kwargs["iterations"]
            notes.append("DS phase reached max_iterations; switch forced at the last iteration")
            logger.warning(notes[-1])
    if switch is not None:
        logger.info("hybrid switched after %d of %d iterations", switch, kwargs["iterations"])
    kwargs["switch_iteration"] = switch
    kwargs["warnings"] = tuple(notes)
    return _finish(cfg, kwargs, converged)


RUNNERS = {"mv": run_mv, "ds": run_ds, "fds": run_fds, "hybrid": run_hybrid}


def aggregate(d, cfg, workers=1):
    return RUNNERS[cfg.algorithm](d, cfg, workers=workers)


def _clean(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def result_to_dict(d, result, cfg, gold=None, labels_keyed=True):
    """JSON-ready run report (manifest is added by the caller)."""
    option_ids = d.option_ids
    labels = result.labels.tolist()
    report = {
        "config": cfg.to_dict(),
        "dataset": d.summary(),
        "likelihood_definition": "observed-data marginal, natural log",
        "convergence": {
            "converged": result.converged,
            "iterations": result.iterations,
            "switch_iteration": result.switch_iteration,
            "warnings": list(result.warnings),
        },
        "neg_log_likelihood": _clean(result.neg_log_likelihood),
        "neg_log_likelihood_finite": math.isfinite(result.neg_log_likelihood),
        "class_marginals": {str(option_ids[c]): float(v) for c, v in enumerate(result.parameters.class_marginals)},
        "trace": [
            {k: (_clean(v) if isinstance(v, float) else v) for k, v in rec.to_dict().items()}
            for rec in result.trace
        ],
    }
    if labels_keyed:
        report["labels"] = {d.question_ids[q]: option_ids[c] for q, c in enumerate(labels)}
    if gold is not None:
        qs, ls = gold.align(d)
        report["accuracy"] = float(np.mean(result.labels[qs] == ls)) if len(qs) else None
        report["gold_questions"] = int(len(qs))
    return report
