"""Crowdsourced vote aggregation: majority vote, Dawid-Skene, Fast Dawid-Skene and Hybrid."""

__version__ = "0.1.0"

from fastds.aggregators import (  # noqa: E402
    AggregationConfig,
    AggregationResult,
    ConvergenceWarning,
    aggregate,
    check_convergence,
    run_ds,
    run_fds,
    run_hybrid,
    run_mv,
)
from fastds.dataset import (  # noqa: E402
    Dataset,
    DatasetError,
    GoldLabels,
    filter_min_annotators,
    load_dataset,
    load_gold,
    remove_class,
    subsample_annotators,
)
from fastds.estimation import (  # noqa: E402
    Assignment,
    Parameters,
    c_step,
    cml_criterion,
    e_step_soft,
    log_likelihood,
    m_step,
    majority_vote,
)

__all__ = [
    "AggregationConfig",
    "AggregationResult",
    "Assignment",
    "ConvergenceWarning",
    "Dataset",
    "DatasetError",
    "GoldLabels",
    "Parameters",
    "aggregate",
    "c_step",
    "check_convergence",
    "cml_criterion",
    "e_step_soft",
    "filter_min_annotators",
    "load_dataset",
    "load_gold",
    "log_likelihood",
    "m_step",
    "majority_vote",
    "remove_class",
    "run_ds",
    "run_fds",
    "run_hybrid",
    "run_mv",
    "subsample_annotators",
]
