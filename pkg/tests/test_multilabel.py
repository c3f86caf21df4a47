import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastds.aggregators import AggregationConfig
from fastds.dataset import DatasetError
from fastds.multilabel import (
    MultiDataset,
    aggregate_multilabel,
    binarize,
    dumps_decisions,
    dumps_multi,
    load_multi,
    multi_from_records,
    multilabel_subsets,
    regroup,
    simulate_multilabel,
    subsample_multi,
)


@st.composite
def multi_datasets(draw):
    C = draw(st.integers(1, 4))
    A = draw(st.integers(1, 4))
    Q = draw(st.integers(1, 5))
    records = []
    for q in range(Q):
        for a in draw(st.lists(st.integers(0, A - 1), min_size=1, max_size=A, unique=True)):
            chosen = draw(st.sets(st.integers(0, C - 1)))
            records += [(f"q{q}", f"a{a}", c, c in chosen) for c in range(C)]
    return multi_from_records(records, C)


def test_binarize_shape_and_mapping():
    md = multi_from_records([("x", "u", c, c in (0, 2)) for c in range(3)] +
                            [("y", "u", c, False) for c in range(3)], 3)
    bd = binarize(md)
    assert bd.num_questions == 6 and bd.num_options == 2
    assert bd.question_ids[:3] == ("x#0", "x#1", "x#2")
    assert [bd.option_ids[o] for o in bd.option[:3]] == [1, 0, 1]
    assert [bd.option_ids[o] for o in bd.option[3:]] == [0, 0, 0]


def test_single_pair():
    bd = binarize(multi_from_records([("q", "a", 0, True)], 1))
    assert bd.num_questions == 1
    assert bd.option_ids[bd.option[0]] == 1


@settings(max_examples=100, deadline=None)
@given(multi_datasets())
def test_round_trip_and_vote_mass(md):
    bd = binarize(md)
    assert bd.num_votes == md.num_options * len(md.answers)
    assert regroup(bd, md) == md
    assert bd.annotator_ids == md.annotator_ids


@settings(max_examples=40, deadline=None)
@given(md=multi_datasets())
def test_csv_round_trip(tmp_path_factory, md):
    path = tmp_path_factory.mktemp("ml") / "m.csv"
    path.write_text(dumps_multi(md))
    assert load_multi(path) == md


def test_identical_selections_are_reproduced():
    sets = [{0, 2}, set(), {1}, {0, 1, 2}]
    records = [(f"q{q}", f"a{a}", c, c in s) for q, s in enumerate(sets) for a in range(3) for c in range(3)]
    md = multi_from_records(records, 3)
    for algorithm in ("mv", "ds", "fds", "hybrid"):
        res = aggregate_multilabel(md, AggregationConfig(algorithm=algorithm))
        assert res.decisions.shape == (4, 3)
        assert res.selected_sets() == [frozenset(s) for s in sets]


def test_decisions_csv():
    md = multi_from_records([("q", "a", 0, True), ("q", "a", 1, False)], 2)
    res = aggregate_multilabel(md, AggregationConfig())
    assert dumps_decisions(md, res) == "question,option,selected\nq,0,1\nq,1,0\n"


def test_load_errors(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("question,annotator,option,selected\nq,a,0,2\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_multi(path)
    path.write_text("question,annotator,option,selected\nq,a,0,1\nq,a,0,0\n")
    with pytest.raises(DatasetError, match="duplicate"):
        load_multi(path)


def test_invalid_multidataset():
    with pytest.raises(DatasetError):
        MultiDataset(((0, 0, frozenset({3})),), ("q",), ("a",), 2)


def test_simulated_gold_shape_and_determinism():
    md, gold = simulate_multilabel(30, 6, 4, 3, seed=5)
    md2, gold2 = simulate_multilabel(30, 6, 4, 3, seed=5)
    assert md == md2
    np.testing.assert_array_equal(gold, gold2)
    assert gold.shape == (30, 4)
    assert all(len([1 for q, _, _ in md.answers if q == i]) == 3 for i in range(30))


def test_subsample_multi():
    md, gold = simulate_multilabel(30, 8, 3, 6, seed=2)
    sub = subsample_multi(md, 4, seed=1)
    assert sub == subsample_multi(md, 4, seed=1)
    assert all(sum(1 for q, _, _ in sub.answers if q == i) == 4 for i in range(sub.num_questions))
    full = md.selections()
    for (q, a), chosen in sub.selections().items():
        orig_q = md.question_ids.index(sub.question_ids[q])
        orig_a = md.annotator_ids.index(sub.annotator_ids[a])
        assert full[(orig_q, orig_a)] == chosen
    with pytest.raises(DatasetError):
        subsample_multi(md, 7, seed=0)


def test_subset_protocol_averages():
    md, gold = simulate_multilabel(40, 8, 3, 6, seed=3)
    out = multilabel_subsets(md, gold, ["mv", "fds"], AggregationConfig(seed=4), k=5, subsets=5)
    assert len(out["fds"]["pair_accuracy"]) == 5
    assert out["fds"]["mean"] == pytest.approx(np.mean(out["fds"]["pair_accuracy"]))
    again = multilabel_subsets(md, gold, ["fds"], AggregationConfig(seed=4), k=5, subsets=5)
    assert again["fds"] == out["fds"]
