import numpy as np
import pytest
from hypothesis import given, strategies as st

from gimbalsim.workload import (
    DistributionShape,
    Request,
    TraceError,
    TraceRecord,
    allocate_counts,
    bucket_edges,
    bucket_index,
    gen_arrivals,
    load_trace,
    shape_distribution,
    shape_weights,
    synthetic_trace,
    write_trace,
)


@pytest.fixture(scope="module")
def trace():
    return synthetic_trace(3000, seed=5)


def _hist(records, source):
    edges = bucket_edges(source)
    return np.bincount(bucket_index(np.array([r.prefill_tokens for r in records]), edges), minlength=10)


def test_load_trace_two_rows(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("prefill_tokens,output_tokens,user_id\n100,50,\n3000,200,alice\n")
    recs = load_trace(p)
    assert [(r.prefill_tokens, r.output_tokens) for r in recs] == [(100, 50), (3000, 200)]
    assert recs[0].user_id is None and recs[1].user_id == "alice"


def test_load_trace_header_only(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("prefill_tokens,output_tokens,user_id\n")
    assert load_trace(p) == []


def test_load_trace_zero_tokens_names_line(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("prefill_tokens,output_tokens,user_id\n10,5,\n0,50,\n")
    with pytest.raises(TraceError, match=r"\.csv:3:"):
        load_trace(p)


def test_load_trace_malformed_row(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("prefill_tokens,output_tokens\nabc,1\n")
    with pytest.raises(TraceError, match=r"\.csv:2:"):
        load_trace(p)


def test_load_trace_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_trace(tmp_path / "nope.csv")


def test_trace_roundtrip(tmp_path, trace):
    p = tmp_path / "t.csv"
    write_trace(p, trace[:50])
    assert load_trace(p) == trace[:50]


def test_average_shape_is_exactly_flat(trace):
    out = shape_distribution(trace, DistributionShape.AVERAGE, 1000, seed=0)
    assert _hist(out, trace).tolist() == [100] * 10


def test_descending_histogram_non_increasing(trace):
    out = shape_distribution(trace, "Descending", 1000, seed=0)
    h = _hist(out, trace)
    assert (np.diff(h) <= 0).all()


def test_central_and_twoend_shapes(trace):
    h = _hist(shape_distribution(trace, "Central", 1000, 1), trace)
    assert h[4] + h[5] > h[0] + h[9]
    h = _hist(shape_distribution(trace, "TwoEnd", 1000, 1), trace)
    assert h[0] == h[9] == 400


def test_shape_distribution_deterministic(trace):
    a = shape_distribution(trace, "Random", 500, seed=3)
    assert a == shape_distribution(trace, "Random", 500, seed=3)
    assert a != shape_distribution(trace, "Random", 500, seed=4)


def test_shape_distribution_errors(trace):
    with pytest.raises(ValueError):
        shape_distribution([], "Average", 10, 0)
    # only short prompts plus one long one: middle buckets have no candidates
    recs = [TraceRecord(1, 1)] * 5 + [TraceRecord(1000, 1)]
    with pytest.raises(ValueError, match="bucket"):
        shape_distribution(recs, "Average", 10, 0)


@given(st.sampled_from(list(DistributionShape)), st.integers(1, 400), st.integers(0, 2**16))
def test_shape_output_length(shape, n, seed):
    recs = synthetic_trace(300, seed=1)
    assert len(shape_distribution(recs, shape, n, seed)) == n


def test_shape_weights_normalized():
    for s in DistributionShape:
        w = shape_weights(s, rng=np.random.default_rng(0))
        assert w.shape == (10,) and np.isclose(w.sum(), 1.0) and (w >= 0).all()


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=12).filter(lambda w: sum(w) > 0), st.integers(0, 5000))
def test_allocate_counts_exact(w, n):
    c = allocate_counts(np.array(w) / sum(w), n)
    assert c.sum() == n and (c >= 0).all()


def test_gen_arrivals_rate(trace):
    reqs = gen_arrivals(trace[:1000], 1.4, seed=0)
    t = np.array([r.arrival_time for r in reqs])
    assert (np.diff(t) > 0).all()
    assert abs(t[-1] - 1000 / 1.4) <= 0.1 * 1000 / 1.4
    assert [r.prefill_tokens for r in reqs] == [r.prefill_tokens for r in trace[:1000]]


def test_gen_arrivals_single_and_determinism(trace):
    one = gen_arrivals(trace[:1], 1.0, seed=2)
    assert len(one) == 1 and one[0].arrival_time >= 0
    assert gen_arrivals(trace, 1.2, 9) == gen_arrivals(trace, 1.2, 9)


@pytest.mark.parametrize("rps", [0, -1.0])
def test_gen_arrivals_rejects_bad_rate(trace, rps):
    with pytest.raises(ValueError):
        gen_arrivals(trace, rps, 0)


@given(st.integers(1, 200), st.floats(0.01, 50.0), st.integers(0, 1000))
def test_arrivals_strictly_increasing(n, rps, seed):
    recs = [TraceRecord(10, 10)] * n
    t = [r.arrival_time for r in gen_arrivals(recs, rps, seed)]
    assert t[0] >= 0 and all(b > a for a, b in zip(t, t[1:]))


def test_request_validation():
    with pytest.raises(ValueError):
        Request(0, 0.0, 0, 5)
    with pytest.raises(ValueError):
        TraceRecord(5, 0)


def test_shape_parse_aliases():
    assert DistributionShape.parse("two_end") is DistributionShape.TWO_END
    assert DistributionShape.parse("average") is DistributionShape.AVERAGE
    with pytest.raises(ValueError):
        DistributionShape.parse("bimodal")
