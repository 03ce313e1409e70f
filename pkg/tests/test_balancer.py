import threading

import pytest
from hypothesis import given, strategies as st

from gimbalsim.balancer import (
    AFFINITY,
    KV_RELIEF,
    LOAD_BALANCE,
    ROUND_ROBIN,
    BalancerConfig,
    EngineMetrics,
    LoadBalancer,
)
from gimbalsim.workload import Request


def req(i=0, user=None):
    return Request(i, 0.0, 10, 10, user)


def lb_with(kv, load=None, **cfg):
    load = load or [0.0] * len(kv)
    lb = LoadBalancer(BalancerConfig(n_engines=len(kv), **cfg))
    for i, (k, l) in enumerate(zip(kv, load)):
        lb.update_metrics(EngineMetrics(i, k, l, 0.0))
    return lb


def test_round_robin_without_metrics():
    lb = LoadBalancer(BalancerConfig(n_engines=3))
    assert [lb.select_engine(req(i), i) for i in range(3)] == [0, 1, 2]


def test_kv_relief():
    lb = lb_with([0.95, 0.50])
    d = lb.decide(req(), 1.0)
    assert (d.engine_id, d.source) == (1, KV_RELIEF)


def test_load_balance_when_kv_spread_small():
    lb = lb_with([0.95, 0.90], [8000, 2000])
    d = lb.decide(req(), 1.0)
    assert (d.engine_id, d.source) == (1, LOAD_BALANCE)


def test_affinity_hit_and_expiry():
    lb = lb_with([0.3, 0.4], affinity_ttl=60)
    lb.user_engine_map["u1"] = (0, 95.0)
    lb.cursor = 1
    d = lb.decide(req(user="u1"), 100.0)
    assert (d.engine_id, d.source) == (0, AFFINITY)

    lb = lb_with([0.3, 0.4], affinity_ttl=60)
    lb.user_engine_map["u1"] = (0, 0.0)
    lb.cursor = 1
    d = lb.decide(req(user="u1"), 120.0)
    assert (d.engine_id, d.source) == (1, ROUND_ROBIN)
    assert lb.user_engine_map["u1"] == (1, 120.0)


def test_partial_metrics_fall_back_to_round_robin():
    lb = LoadBalancer(BalancerConfig(n_engines=2))
    lb.update_metrics(EngineMetrics(0, 0.99, 0, 0.0))
    assert [lb.select_engine(req(i), 0) for i in range(2)] == [0, 1]


def test_stale_report_ignored():
    lb = lb_with([0.2, 0.2])
    lb.update_metrics(EngineMetrics(0, 0.5, 0, 5.0))
    lb.update_metrics(EngineMetrics(0, 0.9, 0, 1.0))
    assert lb.metrics[0].kv_usage == 0.5


def test_unknown_engine_rejected():
    lb = LoadBalancer(BalancerConfig(n_engines=2))
    with pytest.raises(ValueError):
        lb.update_metrics(EngineMetrics(2, 0.1, 0, 0.0))


@pytest.mark.parametrize("bad", [dict(theta_kv=0), dict(theta_kv=1.5), dict(theta_diff=-0.1),
                                 dict(theta_load=-1), dict(affinity_ttl=0), dict(n_engines=0)])
def test_bad_config(bad):
    with pytest.raises(ValueError):
        BalancerConfig(**bad)


def test_metrics_validation():
    with pytest.raises(ValueError):
        EngineMetrics(0, 1.2, 0, 0)
    with pytest.raises(ValueError):
        EngineMetrics(0, 0.5, -1, 0)


metric_state = st.integers(2, 5).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0, 1), min_size=n, max_size=n),
    st.lists(st.floats(0, 20000), min_size=n, max_size=n),
))


@given(metric_state, st.integers(0, 10), st.sampled_from([None, "a", "b"]),
       st.one_of(st.none(), st.tuples(st.integers(0, 1), st.floats(0, 1000))))
def test_invariants(state, cursor, user, mapping):
    kv, load = state
    n = len(kv)
    lb = lb_with(kv, load)
    lb.cursor = cursor
    if user and mapping:
        lb.user_engine_map[user] = mapping
    now = 500.0
    d = lb.decide(req(user=user), now)
    assert 0 <= d.engine_id < n
    if max(kv) >= 0.9 and max(kv) - min(kv) >= 0.1:
        assert d.engine_id == kv.index(min(kv))
    if d.source == AFFINITY:
        assert max(kv) < 0.9
    if user is not None:
        assert lb.user_engine_map[user] == (d.engine_id, now)
    assert lb.cursor == (cursor + 1) % n


def test_disabled_metrics_is_pure_round_robin():
    lb = lb_with([0.99, 0.0, 0.5], [9000, 0, 0], use_metrics=False, use_affinity=False)
    got = [lb.select_engine(req(i, user="u"), float(i)) for i in range(9)]
    assert got == [i % 3 for i in range(9)]
    assert lb.user_engine_map == {}


def test_concurrent_updates_and_selections():
    lb = LoadBalancer(BalancerConfig(n_engines=4))
    out = []

    def worker(k):
        for t in range(200):
            lb.update_metrics(EngineMetrics(k, (t % 10) / 10, t, float(t)))
            out.append(lb.select_engine(req(t, user=f"u{k}"), float(t)))

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert len(out) == 800 and all(0 <= e < 4 for e in out)
    assert lb.cursor == 800 % 4
