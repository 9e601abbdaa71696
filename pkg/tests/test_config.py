from pathlib import Path

import pytest

from faasmoe.config import (ConfigError, PlannerConfig, PlatformProfile, TunerConfig,
                            WorkloadConfig, canonical_model, canonical_profile, config_hash,
                            load_model, load_profile, load_workload)

CONFIGS = Path(__file__).parents[1] / "configs"


def test_shipped_configs_match_defaults():
    assert load_profile(CONFIGS / "profile.yaml") == canonical_profile()
    assert load_model(CONFIGS / "model.yaml") == canonical_model()
    assert load_workload(CONFIGS / "workload.yaml") == (WorkloadConfig(), TunerConfig(), PlannerConfig())


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        load_profile({"platform": {"storage_bandwidth": 1.0, "colour": "red"}})


def test_missing_file():
    with pytest.raises(ConfigError):
        load_profile("/nonexistent/profile.yaml")


@pytest.mark.parametrize("change", [dict(storage_bandwidth=0.0), dict(payload_limit=-1.0),
                                    dict(max_replicas=0), dict(memory_options=(768, 128))])
def test_profile_validation(change):
    p = canonical_profile()
    kw = dict(storage_bandwidth=p.storage_bandwidth, function_bandwidth=p.function_bandwidth,
              warm_start_time=p.warm_start_time, storage_access_delay=p.storage_access_delay,
              payload_limit=p.payload_limit, memory_options=p.memory_options,
              unit_compute_time=p.unit_compute_time, max_replicas=p.max_replicas)
    kw.update(change)
    if "memory_options" in change:
        kw["unit_compute_time"] = (0.01, 0.02)
    with pytest.raises(ConfigError):
        PlatformProfile(**kw)


def test_latency_limit_must_cover_fixed_stages():
    with pytest.raises(ConfigError):
        canonical_model(latency_limit=1.0)


def test_hash_is_stable_and_sensitive():
    a = config_hash(canonical_profile(), canonical_model())
    assert a == config_hash(canonical_profile(), canonical_model())
    assert a != config_hash(canonical_profile(), canonical_model(latency_limit=121.0))
