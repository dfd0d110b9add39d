import json
from pathlib import Path

import pytest
from typer.testing import CliRunner

from kvtrim.__main__ import app
from kvtrim.analysis import parse_energy_csv
from kvtrim.cache import decode_snapshot

runner = CliRunner()

CACHE = {
    "batch": 1,
    "seq_len": 16,
    "layers": 1,
    "heads": 2,
    "head_dim": 8,
    "obs_window": 4,
    "residual_len": 4,
}


def _config(**fields) -> dict:
    config = {"cache": dict(CACHE), "workload": {"seed": 7, "decode_steps": 6}}
    config.update(fields)
    return config


def _invoke(*args):
    return runner.invoke(app, [str(arg) for arg in args])


@pytest.mark.usefixtures("single_thread")
class TestRun:
    def test_uncompressed_run_matches_dense(self, write_config, tmp_path):
        result = _invoke("run", write_config(_config()), "--out", tmp_path / "out")
        assert result.exit_code == 0, result.output
        run_report = json.loads((tmp_path / "out" / "run_report.json").read_text())
        assert run_report["max_deviation"] <= 1e-12
        assert run_report["memory_report"]["reduction_fraction"] == 0.0
        assert len(run_report["per_step_max_deviation"]) == 6
        assert run_report["retained_tokens"] == 16

    def test_compressed_run(self, write_config, tmp_path):
        config = _config(
            cache=dict(CACHE, key_prune_ratio=0.5, value_prune_ratio=0.25),
            policy={"kind": "snapkv", "kv_budget": 12, "obs_window": 4, "pool_kernel": 3},
            criterion="value",
            quantization={"bits_k": 2, "bits_v": 4, "group_size": 4},
        )
        result = _invoke("run", write_config(config), "--out", tmp_path)
        assert result.exit_code == 0, result.output
        run_report = json.loads((tmp_path / "run_report.json").read_text())
        assert run_report["constructed_bytes"] == (
            run_report["memory_report"]["key_bytes"]
            + run_report["memory_report"]["value_bytes"]
            + run_report["memory_report"]["mask_bytes"]
            + run_report["memory_report"]["quant_overhead_bytes"]
        )
        assert run_report["memory_report"]["reduction_fraction"] > 0.0
        assert run_report["retained_tokens"] == 12
        assert run_report["flops"]["decode"] < run_report["flops"]["dense_decode"]

        snapshot = decode_snapshot((tmp_path / "cache.kvtr").read_bytes())
        assert (snapshot.heads, snapshot.head_dim, snapshot.key_channels) == (2, 8, 4)
        assert len(snapshot.entries) == 2

    def test_byte_identical_reruns(self, write_config, tmp_path):
        path = write_config(_config(cache=dict(CACHE, key_prune_ratio=0.4)))
        for name in ("first", "second"):
            assert _invoke("run", path, "--out", tmp_path / name).exit_code == 0
        for artifact in ("run_report.json", "cache.kvtr"):
            assert (tmp_path / "first" / artifact).read_bytes() == (
                tmp_path / "second" / artifact
            ).read_bytes()

    def test_seed_option(self, write_config, tmp_path):
        path = write_config(_config())
        assert _invoke("run", path, "--out", tmp_path / "a").exit_code == 0
        assert _invoke("run", path, "--out", tmp_path / "b", "--seed", 8).exit_code == 0
        assert (tmp_path / "a" / "cache.kvtr").read_bytes() != (tmp_path / "b" / "cache.kvtr").read_bytes()

    def test_output_dir_from_config(self, write_config, tmp_path):
        out = tmp_path / "from_config"
        assert _invoke("run", write_config(_config(output_dir=str(out)))).exit_code == 0
        assert Path(out, "run_report.json").exists()

    @pytest.mark.parametrize(
        "config",
        [
            {"workload": {}},
            _config(cache=dict(CACHE, key_prune_ratio=1.0)),
            _config(cache=dict(CACHE, kv_budget=8)),
            _config(workload={"prefill_len": 3}),
            _config(report={"sweep": []}),
            _config(report={"sweep": [0.4, 0.9]}),
        ],
    )
    def test_invalid_config(self, write_config, tmp_path, config):
        assert _invoke("run", write_config(config), "--out", tmp_path).exit_code == 2

    def test_missing_config(self, tmp_path):
        assert _invoke("run", tmp_path / "nope.json", "--out", tmp_path).exit_code == 2

    def test_unwritable_output(self, write_config, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert _invoke("run", write_config(_config()), "--out", blocker).exit_code == 2


def _pool_config() -> dict:
    return _config(
        cache=dict(CACHE, layers=2, key_prune_ratio=0.5),
        policy={"kind": "h2o", "kv_budget": 12, "obs_window": 4},
        quantization={"bits_k": 2, "bits_v": 4, "group_size": 4},
    )


class TestWorkerPool:
    def _inline(self, mocker, *args):
        mocker.patch.dict("os.environ", {"KVTRIM_THREADS": "1"})
        return _invoke(*args)

    @pytest.mark.usefixtures("worker_pool")
    def test_run_matches_inline(self, write_config, tmp_path, mocker):
        path = write_config(_pool_config())
        result = _invoke("run", path, "--out", tmp_path / "pool")
        assert result.exit_code == 0, result.output
        assert self._inline(mocker, "run", path, "--out", tmp_path / "inline").exit_code == 0
        for artifact in ("run_report.json", "cache.kvtr"):
            assert (tmp_path / "pool" / artifact).read_bytes() == (
                tmp_path / "inline" / artifact
            ).read_bytes()
        assert len(decode_snapshot((tmp_path / "pool" / "cache.kvtr").read_bytes()).entries) == 4

    @pytest.mark.usefixtures("worker_pool")
    def test_analyze_matches_inline(self, write_config, tmp_path, mocker):
        path = write_config(_pool_config())
        assert _invoke("analyze", path, "--out", tmp_path / "pool").exit_code == 0
        assert self._inline(mocker, "analyze", path, "--out", tmp_path / "inline").exit_code == 0
        pooled = sorted(child.name for child in (tmp_path / "pool").iterdir())
        assert pooled == sorted(child.name for child in (tmp_path / "inline").iterdir())
        assert len(pooled) == 17
        for name in pooled:
            assert (tmp_path / "pool" / name).read_bytes() == (tmp_path / "inline" / name).read_bytes()


@pytest.mark.usefixtures("single_thread")
class TestAnalyze:
    def test_rank_one_workload(self, write_config, tmp_path):
        config = _config(workload={"seed": 1, "generator": "lowrank(1)"}, causal_analysis=False)
        result = _invoke("analyze", write_config(config), "--out", tmp_path)
        assert result.exit_code == 0, result.output
        spectrum = parse_energy_csv((tmp_path / "energy.csv").read_text())
        assert spectrum.energy[0] == pytest.approx(1.0, abs=1e-9)
        for name in ("energy_l0_h1.csv", "keys_l0_h0.csv", "values_l0_h1.csv", "channels_l0_h1.csv"):
            assert (tmp_path / name).exists()

    def test_gaussian_workload(self, write_config, tmp_path):
        assert _invoke("analyze", write_config(_config()), "--out", tmp_path).exit_code == 0
        spectrum = parse_energy_csv((tmp_path / "energy.csv").read_text())
        assert len(spectrum) == 16
        assert spectrum.cumulative[-1] == pytest.approx(1.0, abs=1e-9)
        assert (tmp_path / "energy.csv").read_bytes() == (tmp_path / "energy_l0_h0.csv").read_bytes()
        keys = (tmp_path / "keys_l0_h0.csv").read_text().splitlines()
        assert len(keys) == 16
        assert len(keys[0].split(",")) == 8
        channels = (tmp_path / "channels_l0_h0.csv").read_text().splitlines()
        assert channels[0] == "channel,key,value"
        assert len(channels) == 9


@pytest.mark.usefixtures("single_thread")
class TestReport:
    def test_sweep(self, write_config, tmp_path):
        config = _config(
            cache=dict(CACHE, seq_len=64, head_dim=128),
            report={"sweep": [0.0, 0.5], "reference_budget": 32},
        )
        result = _invoke("report", write_config(config), "--out", tmp_path)
        assert result.exit_code == 0, result.output
        memory = json.loads((tmp_path / "memory_report.json").read_text())
        dense, pruned = (entry["report"] for entry in memory["sweep"])
        assert dense["reduction_fraction"] == 0.0
        assert dense["equal_memory_kv_budget"] == 32
        assert pruned["reduction_fraction"] == pytest.approx(0.25, abs=1e-3)
        assert pruned["equal_memory_kv_budget"] > 0
        assert memory["batch_size_headroom"] is None

    def test_device_sizes(self, write_config, tmp_path):
        config = _config(
            report={"total_gpu_bytes": 10**6, "weight_bytes": 10**5, "batch_sizes": [1, 2]}
        )
        assert _invoke("report", write_config(config), "--out", tmp_path).exit_code == 0
        memory = json.loads((tmp_path / "memory_report.json").read_text())
        per_sequence = memory["report"]["key_bytes"] + memory["report"]["value_bytes"]
        assert memory["batch_size_headroom"] == (10**6 - 10**5) // per_sequence
        assert memory["tpot_ratio"] == 1.0
        assert [point["batch"] for point in memory["peak_memory_curve"]] == [1, 2]

    def test_weights_fill_device(self, write_config, tmp_path):
        config = _config(report={"total_gpu_bytes": 10, "weight_bytes": 20})
        assert _invoke("report", write_config(config), "--out", tmp_path).exit_code == 2


class TestEnvironment:
    @pytest.mark.parametrize(
        "env",
        [
            {"KVTRIM_THREADS": "0"},
            {"KVTRIM_THREADS": "many"},
            {"KVTRIM_LOG_LEVEL": "FOO"},
        ],
    )
    def test_invalid_settings(self, write_config, tmp_path, mocker, env):
        mocker.patch.dict("os.environ", env)
        result = _invoke("run", write_config(_config()), "--out", tmp_path)
        assert result.exit_code == 2
        assert result.exception is None or isinstance(result.exception, SystemExit)
        assert not (tmp_path / "run_report.json").exists()

    def test_lowercase_log_level(self, write_config, tmp_path, mocker):
        mocker.patch.dict("os.environ", {"KVTRIM_THREADS": "1", "KVTRIM_LOG_LEVEL": "debug"})
        assert _invoke("report", write_config(_config()), "--out", tmp_path).exit_code == 0
