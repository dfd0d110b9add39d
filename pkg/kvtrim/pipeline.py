"""
Per-head pipelines and the drivers behind the ``run``, ``analyze`` and ``report`` commands.

Every (batch, layer, head) is independent: it generates its own tensors from the run seed,
prefills, decodes and hands its caches back. Heads are fanned out over an aiomultiprocess
pool and gathered in submission order; the driver then writes all artifacts once.
"""
import asyncio
import logging
from typing import Any, Awaitable, Callable, Dict, List, Optional

import numpy as np
from aiomultiprocess import Pool
from pydantic import BaseModel

from kvtrim.analysis import HeadAnalysis, attention_energy
from kvtrim.attention import (
    append_kv,
    attend,
    decode_flops,
    dense_attention,
    prefill,
    scoring_flops,
)
from kvtrim.cache import SegmentedKeyCache, ValueCache, encode_snapshot, total_cache_bytes
from kvtrim.config import (
    KVTRIM_ENERGY_FILE_NAME,
    KVTRIM_MEMORY_REPORT_FILE_NAME,
    KVTRIM_RUN_REPORT_FILE_NAME,
    KVTRIM_SNAPSHOT_FILE_NAME,
    get_settings,
)
from kvtrim.exceptions import ConfigException, KVTrimException, NumericalException
from kvtrim.file_operations import write_artifacts, write_head_analyses
from kvtrim.memory import (
    MemoryReport,
    PeakMemoryPoint,
    batch_size_headroom,
    equal_memory_budget,
    peak_memory_curve,
    per_sequence_bytes,
    report,
    tpot_ratio,
)
from kvtrim.quant import DEFAULT_GROUP_SIZE
from kvtrim.workload import RunConfig, generate_head, load_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class HeadTask(BaseModel):
    config: RunConfig
    batch: int
    layer: int
    head: int


class HeadRun(BaseModel):
    batch: int
    layer: int
    head: int
    prefill_bytes: int
    retained_tokens: int
    step_deviations: List[float]
    step_compression_errors: List[float]
    scoring_flops: int
    decode_flops: int
    dense_decode_flops: int
    key_cache: SegmentedKeyCache
    value_cache: ValueCache

    class Config:
        arbitrary_types_allowed = True


class FlopCounts(BaseModel):
    scoring: int
    decode: int
    dense_decode: int


class RunReport(BaseModel):
    memory_report: MemoryReport
    constructed_bytes: int
    max_deviation: float
    per_step_max_deviation: List[float]
    max_compression_error: float
    retained_tokens: int
    flops: FlopCounts


class SweepEntry(BaseModel):
    key_prune_ratio: float
    report: MemoryReport


class MemoryReportFile(BaseModel):
    report: MemoryReport
    sweep: List[SweepEntry]
    batch_size_headroom: Optional[int] = None
    tpot_ratio: Optional[float] = None
    peak_memory_curve: Optional[List[PeakMemoryPoint]] = None


def head_tasks(config: RunConfig, batches: Optional[int] = None) -> List[HeadTask]:
    cache = config.cache
    return [
        HeadTask(config=config, batch=batch, layer=layer, head=head)
        for batch in range(cache.batch if batches is None else batches)
        for layer in range(cache.layers)
        for head in range(cache.heads)
    ]


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(a - b)))


async def run_head(task: HeadTask) -> HeadRun:
    """
    Prefill one head, then decode every remaining workload row. Each step is checked against
    dense attention over the zero-masked retained cache and measured against dense attention
    over every past token.
    """
    config, cache_cfg = task.config, task.config.cache
    seq_len, head_dim = cache_cfg.seq_len, cache_cfg.head_dim
    tensors = generate_head(config, task.batch, task.layer, task.head)

    prefilled = prefill(
        cache_cfg,
        [queries[:seq_len] for queries in tensors.queries],
        tensors.keys[:seq_len],
        tensors.values[:seq_len],
        config.policy,
        config.criterion,
        config.quantization,
    )
    key_cache, value_cache = prefilled.key_cache, prefilled.value_cache
    prefill_bytes = total_cache_bytes((key_cache, value_cache), cache_cfg)

    deviations, compression_errors = [], []
    decode, dense_decode = 0, 0
    for position in range(seq_len, config.total_len):
        masked_keys, masked_values = key_cache.dense_view(), value_cache.dense_view()
        past_keys, past_values = tensors.keys[:position], tensors.values[:position]
        deviation = compression_error = 0.0
        for queries in tensors.queries:
            query = queries[position: position + 1]
            step = attend(key_cache, value_cache, query, task.layer, task.head)
            masked = dense_attention(query, masked_keys, masked_values, causal=False)
            full = dense_attention(query, past_keys, past_values, causal=False)
            deviation = max(deviation, _max_abs(step.output, masked[0]))
            compression_error = max(compression_error, _max_abs(step.output, full[0]))
            decode += decode_flops(
                key_cache.pruned_len,
                key_cache.kept_count,
                key_cache.recent_len,
                value_cache.kept_count,
                head_dim,
            )
            dense_decode += decode_flops(0, head_dim, position, head_dim, head_dim)
        append_kv(
            key_cache,
            value_cache,
            tensors.keys[position],
            tensors.values[position],
            cache_cfg.residual_len,
        )
        deviations.append(deviation)
        compression_errors.append(compression_error)

    window_rows = cache_cfg.query_group_size * min(cache_cfg.obs_window, seq_len)
    logger.debug(
        "Head (%d, %d, %d) done, max deviation %.3g",
        task.batch,
        task.layer,
        task.head,
        max(deviations, default=0.0),
    )
    return HeadRun(
        batch=task.batch,
        layer=task.layer,
        head=task.head,
        prefill_bytes=prefill_bytes,
        retained_tokens=len(prefilled.retained),
        step_deviations=deviations,
        step_compression_errors=compression_errors,
        scoring_flops=scoring_flops(
            config.criterion,
            len(prefilled.retained),
            window_rows,
            head_dim,
            value_pruning=cache_cfg.value_prune_ratio > 0,
        ),
        decode_flops=decode,
        dense_decode_flops=dense_decode,
        key_cache=key_cache,
        value_cache=value_cache,
    )


async def analyze_head(task: HeadTask) -> HeadAnalysis:
    config, seq_len = task.config, task.config.cache.seq_len
    tensors = generate_head(config, task.batch, task.layer, task.head)
    keys, values = tensors.keys[:seq_len], tensors.values[:seq_len]
    spectrum = attention_energy(tensors.queries[0][:seq_len], keys, causal=config.causal_analysis)
    return HeadAnalysis(layer=task.layer, head=task.head, spectrum=spectrum, keys=keys, values=values)


async def run_pipelines(
    pipeline: Callable[[HeadTask], Awaitable[Any]], tasks: List[HeadTask], threads: int
) -> List[Any]:
    """
    Run ``pipeline`` over every task and return the results in task order. A single thread
    runs inline without starting worker processes.
    """
    if threads <= 1 or len(tasks) <= 1:
        return [await pipeline(task) for task in tasks]

    results = []
    async with Pool(processes=min(threads, len(tasks))) as pool:
        async for result in pool.map(pipeline, tasks):
            results.append(result)
    return results


def _quant_args(config: RunConfig) -> Dict[str, Any]:
    quantization = config.quantization
    if quantization is None:
        return {"bits_k": None, "bits_v": None, "group_size": DEFAULT_GROUP_SIZE}
    return {
        "bits_k": quantization.bits_k,
        "bits_v": quantization.bits_v,
        "group_size": quantization.group_size,
    }


async def _write(output_dir: str, artifacts: Dict[str, Any]) -> None:
    result = await write_artifacts(output_dir, artifacts)
    if result.status != "success":
        raise ConfigException(f"Could not write to {output_dir}: {result.message}")


def build_run_report(config: RunConfig, runs: List[HeadRun]) -> RunReport:
    cache = config.cache
    memory = report(
        cache, budget=cache.retained_tokens, recent=cache.recent_tokens, **_quant_args(config)
    )
    per_step = [
        max(run.step_deviations[step] for run in runs)
        for step in range(config.workload.decode_steps)
    ]
    return RunReport(
        memory_report=memory,
        constructed_bytes=sum(run.prefill_bytes for run in runs),
        max_deviation=max(per_step, default=0.0),
        per_step_max_deviation=per_step,
        max_compression_error=max(
            (error for run in runs for error in run.step_compression_errors), default=0.0
        ),
        retained_tokens=runs[0].retained_tokens,
        flops=FlopCounts(
            scoring=sum(run.scoring_flops for run in runs),
            decode=sum(run.decode_flops for run in runs),
            dense_decode=sum(run.dense_decode_flops for run in runs),
        ),
    )


async def execute_run(config: RunConfig, output_dir: str, threads: int) -> int:
    runs: List[HeadRun] = await run_pipelines(run_head, head_tasks(config), threads)
    run_report = build_run_report(config, runs)
    snapshot = encode_snapshot(config.cache, [(run.key_cache, run.value_cache) for run in runs])
    await _write(
        output_dir,
        {
            KVTRIM_RUN_REPORT_FILE_NAME: run_report.json(indent=2) + "\n",
            KVTRIM_SNAPSHOT_FILE_NAME: snapshot,
        },
    )

    failed = False
    if run_report.memory_report.total_bytes != run_report.constructed_bytes:
        logger.error(
            "Modeled cache bytes %d differ from the constructed %d",
            run_report.memory_report.total_bytes,
            run_report.constructed_bytes,
        )
        failed = True
    if run_report.max_deviation > config.tolerance:
        logger.error(
            "Segmented decode deviates by %.3g from the masked reference, tolerance %.3g",
            run_report.max_deviation,
            config.tolerance,
        )
        failed = True
    if failed:
        return EXIT_NUMERICAL
    logger.info(
        "Ran %d heads: %.4f of the dense cache saved, max deviation %.3g",
        len(runs),
        run_report.memory_report.reduction_fraction,
        run_report.max_deviation,
    )
    return EXIT_OK


async def execute_analyze(config: RunConfig, output_dir: str, threads: int) -> int:
    per_head: List[HeadAnalysis] = await run_pipelines(
        analyze_head, head_tasks(config, batches=1), threads
    )
    result = await write_head_analyses(output_dir, per_head, KVTRIM_ENERGY_FILE_NAME)
    if result.status != "success":
        raise ConfigException(f"Could not write to {output_dir}: {result.message}")
    logger.info("Wrote energy spectra, magnitude maps and channel profiles of %d heads", len(per_head))
    return EXIT_OK


def build_memory_report(config: RunConfig) -> MemoryReportFile:
    cache, report_cfg = config.cache, config.report
    compression = dict(_quant_args(config), budget=cache.retained_tokens, recent=report_cfg.recent)
    reference = report_cfg.reference_budget or cache.retained_tokens

    base = report(cache, **compression)
    base.equal_memory_kv_budget = equal_memory_budget(cache, cache.key_prune_ratio, reference)
    sweep = []
    for ratio in report_cfg.sweep:
        entry = report(cache, key_prune_ratio=ratio, **compression)
        entry.equal_memory_kv_budget = equal_memory_budget(cache, ratio, reference)
        sweep.append(SweepEntry(key_prune_ratio=ratio, report=entry))

    memory_file = MemoryReportFile(report=base, sweep=sweep)
    if report_cfg.weight_bytes is not None:
        memory_file.tpot_ratio = tpot_ratio(base, report_cfg.weight_bytes)
        if report_cfg.total_gpu_bytes is not None:
            memory_file.batch_size_headroom = batch_size_headroom(
                report_cfg.total_gpu_bytes, report_cfg.weight_bytes, per_sequence_bytes(cache, base)
            )
        if report_cfg.batch_sizes:
            memory_file.peak_memory_curve = peak_memory_curve(
                cache, report_cfg.weight_bytes, report_cfg.batch_sizes, **compression
            )
    return memory_file


async def execute_report(config: RunConfig, output_dir: str, threads: int) -> int:
    memory_file = build_memory_report(config)
    await _write(output_dir, {KVTRIM_MEMORY_REPORT_FILE_NAME: memory_file.json(indent=2) + "\n"})
    logger.info(
        "Dense cache of %d bytes, %d after compression",
        memory_file.report.dense_bytes,
        memory_file.report.total_bytes,
    )
    return EXIT_OK


def _command(
    execute: Callable[[RunConfig, str, int], Awaitable[int]],
    config_path: str,
    out: Optional[str],
    seed: Optional[int],
) -> int:
    try:
        settings = get_settings()
        config = load_run_config(config_path, seed)
        output_dir = out or config.output_dir or settings.output_dir
        return asyncio.run(execute(config, output_dir, settings.threads))
    except ConfigException as e:
        logger.error(" ".join(str(e).split()))
        return EXIT_CONFIG
    except NumericalException as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except KVTrimException as e:
        logger.error(f"Pipeline failure: {e}")
        return EXIT_NUMERICAL


def cmd_run(config_path: str, out: Optional[str] = None, seed: Optional[int] = None) -> int:
    return _command(execute_run, config_path, out, seed)


def cmd_analyze(config_path: str, out: Optional[str] = None, seed: Optional[int] = None) -> int:
    return _command(execute_analyze, config_path, out, seed)


def cmd_report(config_path: str, out: Optional[str] = None, seed: Optional[int] = None) -> int:
    return _command(execute_report, config_path, out, seed)
