import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sselab.errors import NestedOp, OutOfBounds
from sselab.tracing import (PageStore, RegionPlan, metrics_from_ranges,
                            summarize)


def make_store(page_size=4, num_pages=8):
    return PageStore(page_size, num_pages)


def test_touching_ranges_merge():
    s = make_store()
    op = s.begin_op("t")
    s.read_range(0, 10)
    s.read_range(10, 5)
    m = s.end_op(op)
    assert m.locality == 1
    assert m.read_words == 15


def test_disjoint_ranges_count():
    s = make_store()
    op = s.begin_op("t")
    s.read_range(0, 4)
    s.read_range(8, 4)
    m = s.end_op(op)
    assert m.locality == 2


def test_page_pattern_floor_rule():
    # page_size 4, words [2, 6) -> pages {0, 1}
    s = make_store(page_size=4)
    op = s.begin_op("t")
    s.read_range(2, 4)
    m = s.end_op(op)
    assert m.page_pattern == frozenset({0, 1})
    assert m.pages_touched == 2


def test_write_then_read_roundtrip():
    s = make_store()
    op = s.begin_op("t")
    s.write_range(3, [7, 8, 9])
    assert s.read_range(3, 3).tolist() == [7, 8, 9]
    s.end_op(op)


def test_zero_length_access_not_traced():
    s = make_store()
    op = s.begin_op("t")
    assert s.read_range(0, 0).tolist() == []
    m = s.end_op(op)
    assert m.read_words == 0 and m.locality == 0
    assert s.trace == []


def test_page_boundary_write():
    s = make_store(page_size=4)
    op = s.begin_op("t")
    s.write_range(2, [1, 2, 3, 4])  # words 2..5 straddle pages 0 and 1
    m = s.end_op(op)
    assert m.page_pattern == frozenset({0, 1})


def test_nested_op_rejected():
    s = make_store()
    s.begin_op("a")
    with pytest.raises(NestedOp):
        s.begin_op("b")


def test_end_without_begin():
    s = make_store()
    with pytest.raises(NestedOp):
        s.end_op(0)


def test_out_of_bounds():
    s = make_store(4, 2)
    op = s.begin_op("t")
    with pytest.raises(OutOfBounds):
        s.read_range(7, 2)
    s.end_op(op)


def test_access_outside_op():
    s = make_store()
    with pytest.raises(NestedOp):
        s.read_range(0, 1)


def test_metrics_pure_replay():
    s = make_store()
    op = s.begin_op("t")
    s.read_range(0, 5)
    s.write_range(12, [1])
    s.read_range(20, 3)
    m = s.end_op(op)
    ranges = [(start, ln, kind) for _, _, start, ln, kind in s.trace]
    again = metrics_from_ranges(m.op_id, m.label, ranges, s.page_size)
    assert again == m


@given(st.lists(st.tuples(st.integers(0, 27), st.integers(1, 5)), min_size=1, max_size=20))
@settings(max_examples=60, deadline=None)
def test_locality_invariant_under_splitting(ranges):
    # splitting any range into adjacent sub-ranges leaves locality unchanged
    s1, s2 = make_store(), make_store()
    op1, op2 = s1.begin_op("a"), s2.begin_op("a")
    for start, ln in ranges:
        s1.read_range(start, ln)
        mid = ln // 2
        if mid:
            s2.read_range(start, mid)
            s2.read_range(start + mid, ln - mid)
        else:
            s2.read_range(start, ln)
    m1, m2 = s1.end_op(op1), s2.end_op(op2)
    assert m1.locality == m2.locality
    assert m1.page_pattern == m2.page_pattern


def test_blob_roundtrip():
    s = make_store()
    op = s.begin_op("t")
    s.write_blob(4, b"hello world")
    assert s.read_blob(4, 11) == b"hello world"
    s.end_op(op)


def test_region_plan_alignment():
    plan = RegionPlan(page_size=4)
    a = plan.add("a", 5)
    b = plan.add("b", 3)
    assert a.start == 0
    assert b.start == 8  # aligned up to the next page
    store = plan.build_store()
    assert store.words >= plan.total_words


def test_summarize_exact_answer():
    s = make_store(page_size=4, num_pages=4)
    op = s.begin_op("search")
    s.read_range(0, 8)
    m = s.end_op(op)
    rep = summarize([m], [8], 4, store_words_in_use=16, plaintext_words=8)
    assert rep.max_read_efficiency == 1.0
    assert rep.max_page_efficiency == 1.0  # 2 pages / ceil(8/4)
    assert rep.storage_efficiency == 2.0


def test_summarize_single_page_answer():
    # answer of one page, op touching 4 pages -> page efficiency 4
    s = make_store(page_size=4, num_pages=8)
    op = s.begin_op("search")
    for page in range(4):
        s.read_range(page * 4, 1)
    m = s.end_op(op)
    rep = summarize([m], [4], 4, 32, 4)
    assert rep.max_page_efficiency == 4.0


def test_summarize_max_over_ops():
    s = make_store(page_size=4, num_pages=8)
    metrics = []
    for spread in (1, 3, 2):
        op = s.begin_op("search")
        for page in range(spread):
            s.read_range(page * 4, 2)
        metrics.append(s.end_op(op))
    rep = summarize(metrics, [2, 2, 2], 4, 32, 6)
    # independent fold
    assert rep.max_locality == 3
    assert rep.max_page_efficiency == 3.0
    assert rep.max_read_efficiency == 3.0


def test_csv_dumps(tmp_path):
    s = make_store()
    op = s.begin_op("q")
    s.read_range(0, 2)
    s.end_op(op)
    s.dump_trace_csv(tmp_path / "trace.csv")
    s.dump_metrics_csv(tmp_path / "metrics.csv", {0: 2})
    trace = (tmp_path / "trace.csv").read_text().splitlines()
    assert trace[0] == "op_id,label,kind,start,len"
    assert trace[1] == "0,q,read,0,2"
    metrics = (tmp_path / "metrics.csv").read_text().splitlines()
    assert metrics[1] == "0,q,1,2,1,2"
