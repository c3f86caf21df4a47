import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import datasets, make
from fastds.dataset import (
    DatasetError,
    EmptyDatasetError,
    GoldLabels,
    dumps_csv,
    filter_min_annotators,
    head_questions,
    load_dataset,
    load_gold,
    loads_csv,
    remove_class,
    subsample_annotators,
    write_dataset,
)


def test_load_three_row_csv(tmp_path):
    path = tmp_path / "v.csv"
    path.write_text("question,annotator,option\nq0,a0,1\nq0,a1,1\nq1,a0,0\n")
    d = load_dataset(path)
    assert (d.num_questions, d.num_annotators, d.num_options) == (2, 2, 2)
    assert d.question_ids == ("q0", "q1")
    assert d.votes_of(0) == [(0, 1), (1, 1)]


def test_duplicate_vote_reports_line():
    with pytest.raises(DatasetError, match="line 3.*duplicate"):
        loads_csv("question,annotator,option\nq0,a0,1\nq0,a0,2\n")


def test_parse_error_has_line_number():
    with pytest.raises(DatasetError, match="line 3"):
        loads_csv("question,annotator,option\nq0,a0,1\nq1,a0,x\n")
    with pytest.raises(DatasetError, match="missing column"):
        loads_csv("question,worker,option\nq0,a0,1\n")


def test_declared_options_override_and_range_check():
    d = loads_csv("# num_options=4\nquestion,annotator,option\nq0,a0,1\n")
    assert d.num_options == 4
    with pytest.raises(DatasetError, match="line 3.*outside declared"):
        loads_csv("# num_options=2\nquestion,annotator,option\nq0,a0,2\n")


def test_interleaved_questions_keep_file_order_within_question():
    d = loads_csv("question,annotator,option\nq0,a0,0\nq1,a1,1\nq0,a2,1\n")
    assert d.votes_of(0) == [(0, 0), (1, 1)]
    assert d.annotator_ids == ("a0", "a2", "a1")


def test_json_mirror(tmp_path):
    path = tmp_path / "v.json"
    path.write_text(json.dumps([
        {"question": "x", "annotator": "u", "option": 2},
        {"question": "y", "annotator": "u", "option": 0},
    ]))
    d = load_dataset(path)
    assert (d.num_questions, d.num_annotators, d.num_options) == (2, 1, 3)


def test_foreign_layout_via_column_map(tmp_path):
    path = tmp_path / "rte.tsv"
    path.write_text("!amt_worker_ids\torig_id\tresponse\tgold\nw1\t5\t1\t1\nw2\t5\t0\t1\n")
    d = load_dataset(path, columns={"question": "orig_id", "annotator": "!amt_worker_ids", "option": "response"},
                     delimiter="\t")
    assert (d.num_questions, d.num_annotators, d.num_options) == (1, 2, 2)


@settings(max_examples=60, deadline=None)
@given(datasets(max_q=8, max_a=5, max_c=4))
def test_csv_round_trip(d):
    assert loads_csv(dumps_csv(d)) == d


def test_round_trip_after_class_removal(tmp_path):
    d = make([(0, 0, 0), (0, 1, 3), (1, 0, 2), (1, 2, 1)])
    d2 = remove_class(d, 1)
    write_dataset(d2, tmp_path / "v.csv")
    write_dataset(d2, tmp_path / "v.json")
    assert load_dataset(tmp_path / "v.csv") == d2
    assert load_dataset(tmp_path / "v.json") == d2


def _counts_dataset():
    # vote counts per question: 3, 5, 2
    votes = [(0, a, 0) for a in range(3)] + [(1, a, 1) for a in range(5)] + [(2, a, 0) for a in (5, 6)]
    return make(votes)


def test_filter_min_annotators():
    d = _counts_dataset()
    f = filter_min_annotators(d, 3)
    assert f.num_questions == 2
    assert f.question_ids == ("q0", "q1")
    assert filter_min_annotators(d, 1) == d
    with pytest.raises(EmptyDatasetError):
        filter_min_annotators(d, 6)


def test_filter_drops_orphaned_annotators():
    f = filter_min_annotators(_counts_dataset(), 3)
    assert f.num_annotators == 5
    assert f.history[-1]["questions_dropped"] == 1


@settings(max_examples=40, deadline=None)
@given(datasets(max_q=8, max_a=5))
def test_filter_idempotent(d):
    t = int(np.median(d.votes_per_question))
    once = filter_min_annotators(d, t)
    assert filter_min_annotators(once, t) == once


def test_subsample_identity_and_determinism():
    d = _counts_dataset()
    d3 = filter_min_annotators(d, 3)
    same = subsample_annotators(make([(0, a, a % 2) for a in range(4)]), 4, seed=1)
    assert same.num_votes == 4
    assert subsample_annotators(d3, 1, 42) == subsample_annotators(d3, 1, 42)
    s = subsample_annotators(d3, 2, 7)
    assert np.all(s.votes_per_question == 2)
    with pytest.raises(DatasetError, match="fewer than k"):
        subsample_annotators(d, 3, 0)


def test_subsample_reaches_every_pair():
    # oracle: enumerate the seeded sampler over 1000 seeds
    d = make([(0, 0, 0), (0, 1, 1), (0, 2, 0)])
    seen = set()
    for seed in range(1000):
        s = subsample_annotators(d, 2, seed)
        seen.add(tuple(sorted(s.annotator_ids)))
    assert seen == {tuple(sorted(p)) for p in itertools.combinations(("a0", "a1", "a2"), 2)}


def test_subsample_keeps_file_order():
    d = make([(0, a, a % 3) for a in range(6)])
    s = subsample_annotators(d, 3, 11)
    kept = [int(x[1:]) for x in s.annotator_ids]
    assert kept == sorted(kept)


def test_remove_class():
    d = make([(0, 0, 3), (0, 1, 1), (1, 0, 2), (1, 1, 0), (2, 0, 3)], options=4)
    r = remove_class(d, 3)
    assert r.num_options == 3
    assert r.option_ids == (0, 1, 2)
    assert r.num_questions == 2
    assert r.history[-1]["questions_dropped"] == 1
    assert r.history[-1]["votes_dropped"] == 2


def test_remove_class_without_votes():
    d = make([(0, 0, 0), (1, 0, 1)], options=4)
    r = remove_class(d, 2)
    assert r.num_options == 3
    assert r.option_ids == (0, 1, 3)
    np.testing.assert_array_equal(r.option, d.option)
    with pytest.raises(DatasetError):
        remove_class(make([(0, 0, 0)], options=1), 0)


def test_remove_unknown_class_before_aggregation():
    # the 'unknown' option (original id 9) is dropped, others keep their ids
    d = loads_csv("# options=0,1,9\nquestion,annotator,option\nq0,a,9\nq0,b,1\nq1,a,0\n")
    r = remove_class(d, d.option_index(9))
    assert r.option_ids == (0, 1)
    assert 9 not in [r.option_ids[o] for o in r.option]


def test_gold_alignment(tmp_path):
    path = tmp_path / "g.csv"
    path.write_text("question,label\nq1,0\nq0,1\nq9,1\n")
    gold = load_gold(path)
    d = make([(0, 0, 1), (1, 0, 0)])
    qs, ls = gold.align(d)
    np.testing.assert_array_equal(qs, [0, 1])
    np.testing.assert_array_equal(ls, [1, 0])
    assert len(gold.restrict(d)) == 2
    with pytest.raises(DatasetError):
        GoldLabels({"q0": 5}).align(d)


def test_head_questions():
    d = _counts_dataset()
    h = head_questions(d, 2)
    assert h.question_ids == ("q0", "q1")
    assert h.num_votes == 8


def test_dataset_is_immutable():
    d = make([(0, 0, 1)])
    with pytest.raises(ValueError):
        d.option[0] = 0


def test_gold_skips_removed_class():
    d = make([(0, 0, 0), (1, 0, 2), (2, 0, 1)], options=3)
    gold = GoldLabels({"q0": 0, "q1": 2, "q2": 1})
    r = remove_class(d, 2)
    qs, ls = gold.align(r)
    np.testing.assert_array_equal(qs, [0, 1])
    np.testing.assert_array_equal(ls, [0, 1])
    with pytest.raises(DatasetError):
        GoldLabels({"q0": 5}).align(r)
