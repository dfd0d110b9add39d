import numpy as np
import pytest
from pydantic import ValidationError

from kvtrim.exceptions import ConfigException
from kvtrim.workload import (
    Generator,
    ReportConfig,
    RunConfig,
    WorkloadConfig,
    generate_head,
    load_run_config,
)

SMALL_CACHE = {"seq_len": 16, "head_dim": 8, "obs_window": 4, "residual_len": 4}


def _config(**fields) -> RunConfig:
    return RunConfig.parse_obj(dict({"cache": SMALL_CACHE}, **fields))


class TestWorkloadConfig:
    def test_lowrank_shorthand(self):
        workload = WorkloadConfig(generator="lowrank(4)")
        assert (workload.generator, workload.rank) == (Generator.LOWRANK, 4)

    def test_plain_generator(self):
        assert WorkloadConfig(generator="gaussian").generator == Generator.GAUSSIAN

    @pytest.mark.parametrize(
        "fields", [{"seed": -1}, {"decode_steps": -2}, {"rank": 0}, {"generator": "lowrank(x)"}]
    )
    def test_invalid(self, fields):
        with pytest.raises(ValidationError):
            WorkloadConfig(**fields)


class TestReportConfig:
    @pytest.mark.parametrize(
        "fields",
        [
            {"sweep": []},
            {"sweep": [1.0]},
            {"recent": -1},
            {"batch_sizes": [0]},
            {"total_gpu_bytes": 10, "weight_bytes": 10},
        ],
    )
    def test_invalid(self, fields):
        with pytest.raises(ValidationError):
            ReportConfig(**fields)


class TestRunConfig:
    def test_prefill_len_filled_from_cache(self):
        assert _config().workload.prefill_len == 16

    def test_prefill_len_mismatch(self):
        with pytest.raises(ValidationError):
            _config(workload={"prefill_len": 12})

    def test_budget_from_policy(self):
        config = _config(policy={"kind": "h2o", "kv_budget": 10, "obs_window": 4})
        assert config.cache.kv_budget == 10
        assert config.cache.retained_tokens == 10

    def test_budget_without_policy(self):
        with pytest.raises(ValidationError):
            _config(cache=dict(SMALL_CACHE, kv_budget=8))

    def test_conflicting_budgets(self):
        with pytest.raises(ValidationError):
            _config(
                cache=dict(SMALL_CACHE, kv_budget=8),
                policy={"kind": "snapkv", "kv_budget": 10, "obs_window": 4},
            )

    def test_sweep_must_keep_a_key_channel(self):
        with pytest.raises(ValidationError):
            _config(report={"sweep": [0.0, 0.9]})
        assert _config(report={"sweep": [0.875]}).report.sweep == [0.875]

    def test_total_len(self):
        assert _config(workload={"decode_steps": 5}).total_len == 21


class TestLoadRunConfig:
    def test_seed_override(self, write_config):
        path = write_config({"cache": SMALL_CACHE, "workload": {"seed": 3}})
        assert load_run_config(path).workload.seed == 3
        assert load_run_config(path, seed=9).workload.seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigException):
            load_run_config(str(tmp_path / "missing.json"))

    def test_not_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{cache:")
        with pytest.raises(ConfigException):
            load_run_config(str(path))

    def test_not_an_object(self, write_config):
        with pytest.raises(ConfigException):
            load_run_config(write_config([1, 2]))

    def test_validation_error(self, write_config):
        with pytest.raises(ConfigException):
            load_run_config(write_config({"cache": dict(SMALL_CACHE, head_dim=0)}))


class TestGenerateHead:
    def test_shapes(self):
        config = _config(workload={"decode_steps": 4}, cache=dict(SMALL_CACHE, query_group_size=2))
        tensors = generate_head(config, 0, 0, 0)
        assert len(tensors.queries) == 2
        assert tensors.queries[0].shape == tensors.keys.shape == tensors.values.shape == (20, 8)

    def test_deterministic_per_head(self):
        config = _config()
        first, again = generate_head(config, 0, 1, 2), generate_head(config, 0, 1, 2)
        np.testing.assert_array_equal(first.keys, again.keys)
        assert not np.array_equal(first.keys, generate_head(config, 0, 1, 3).keys)

    def test_seed_changes_draws(self):
        first = generate_head(_config(workload={"seed": 1}), 0, 0, 0)
        second = generate_head(_config(workload={"seed": 2}), 0, 0, 0)
        assert not np.array_equal(first.values, second.values)

    @pytest.mark.parametrize("rank", [1, 3])
    def test_lowrank(self, rank):
        tensors = generate_head(_config(workload={"generator": f"lowrank({rank})"}), 0, 0, 0)
        assert np.linalg.matrix_rank(tensors.keys) == rank
        assert np.linalg.matrix_rank(tensors.values) == rank
        assert len(np.unique(tensors.queries[0], axis=0)) == rank
