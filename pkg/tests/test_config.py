import pytest

from gimbalsim.config import POLICIES, SimConfig, dump_config, env_overrides, load_config, resolve_policy


def test_defaults_match_documented_values():
    c = SimConfig()
    assert (c.balancer.theta_kv, c.balancer.theta_diff, c.balancer.theta_load) == (0.9, 0.10, 3000)
    assert c.sjf.theta_age == 5.0 and c.placement.tau == 3000
    assert c.cost.prefill_rate == 8000 and c.cost.decode_time_per_token == 0.025 and c.kv_capacity == 400_000
    assert c.metric_interval == 0.1 and c.delivery_delay == 0.1


def test_policy_aliases():
    assert resolve_policy("vLLM") == "baseline_rr_fcfs"
    assert resolve_policy("EDR") == "edr_only"
    assert set(POLICIES) == {"gimbal", "baseline_rr_fcfs", "dplb_only", "sjfs_only", "edr_only"}
    with pytest.raises(ValueError):
        SimConfig(policy="random")


def test_balancer_engine_count_follows():
    assert SimConfig(n_engines=4).balancer.n_engines == 4


def test_roundtrip(tmp_path):
    c = SimConfig(policy="dplb", kv_capacity=1234, moe=None)
    assert SimConfig.from_dict(c.to_dict()) == c
    path = tmp_path / "c.yaml"
    dump_config(c, path)
    assert load_config(path, environ={}) == c


def test_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("kv_capacity: 1000\nbalancer:\n  theta_kv: 0.8\nseed: 3\n")
    env = {"GIMBALSIM_KV_CAPACITY": "2000", "GIMBALSIM_BALANCER__THETA_DIFF": "0.2", "GIMBALSIM_RPS": "9"}
    c = load_config(path, overrides={"kv_capacity": 3000}, environ=env)
    assert c.kv_capacity == 3000
    assert c.balancer.theta_kv == 0.8 and c.balancer.theta_diff == 0.2 and c.seed == 3
    assert load_config(path, environ=env).kv_capacity == 2000
    assert load_config(path, environ={}).kv_capacity == 1000


def test_env_parsing_skips_foreign_keys():
    env = {"GIMBALSIM_MOE": "null", "GIMBALSIM_SHAPE": "Random", "OTHER": "1"}
    assert env_overrides(env) == {"moe": None}
    assert load_config(environ=env).moe is None


@pytest.mark.parametrize("text", ["kv_capacityy: 5\n", "balancer: 3\n", "- 1\n- 2\n", "sjf:\n  theta_age: 0\n",
                                  "balancer: null\n"])
def test_bad_config_files(tmp_path, text):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises((ValueError, TypeError)):
        load_config(path, environ={})


def test_validation():
    with pytest.raises(ValueError):
        SimConfig(metric_interval=0)
    with pytest.raises(ValueError):
        SimConfig(n_engines=0)
    with pytest.raises(ValueError):
        SimConfig(kv_capacity=0)
    with pytest.raises(ValueError):
        SimConfig(metric_delay=-1)
