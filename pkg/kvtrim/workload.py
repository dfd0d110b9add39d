"""
Run configuration and the seeded synthetic Q/K/V tensors every head pipeline works on.
"""
import json
import logging
import re
from enum import Enum
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ValidationError, root_validator, validator

from kvtrim.cache import CacheConfig, kept_channels
from kvtrim.eviction import EvictionKind, EvictionPolicy
from kvtrim.exceptions import ConfigException
from kvtrim.pruner import Criterion
from kvtrim.quant import QuantizationConfig
from kvtrim.tensor import Matrix

logger = logging.getLogger(__name__)

LOWRANK_PATTERN = re.compile(r"^lowrank\((\d+)\)$")


class Generator(str, Enum):
    GAUSSIAN = "gaussian"
    LOWRANK = "lowrank"


class WorkloadConfig(BaseModel):
    seed: int = 0
    prefill_len: Optional[int] = None
    decode_steps: int = 0
    generator: Generator = Generator.GAUSSIAN
    rank: int = 1

    @root_validator(pre=True)
    def parse_lowrank(cls, values):
        # "lowrank(4)" is shorthand for generator=lowrank, rank=4
        match = LOWRANK_PATTERN.match(str(values.get("generator", "")))
        if match:
            values = dict(values, generator=Generator.LOWRANK.value, rank=int(match.group(1)))
        return values

    @validator("seed", "decode_steps")
    def validate_non_negative(cls, v, field):
        if v < 0:
            raise ValueError(f"{field.name} must not be negative, got {v}")
        return v

    @validator("rank")
    def validate_rank(cls, v):
        if v < 1:
            raise ValueError(f"rank must be at least 1, got {v}")
        return v


class ReportConfig(BaseModel):
    sweep: List[float] = [0.0, 0.4, 0.5, 0.6]
    reference_budget: Optional[int] = None
    recent: int = 0
    total_gpu_bytes: Optional[int] = None
    weight_bytes: Optional[int] = None
    batch_sizes: List[int] = []

    @validator("sweep")
    def validate_sweep(cls, v):
        if not v:
            raise ValueError("The report sweep needs at least one pruning ratio")
        for ratio in v:
            if not 0.0 <= ratio < 1.0:
                raise ValueError(f"Sweep ratios must lie in [0, 1), got {ratio}")
        return v

    @validator("recent")
    def validate_recent(cls, v):
        if v < 0:
            raise ValueError(f"recent must not be negative, got {v}")
        return v

    @validator("reference_budget")
    def validate_reference_budget(cls, v):
        if v is not None and v < 1:
            raise ValueError(f"reference_budget must be positive, got {v}")
        return v

    @validator("batch_sizes", each_item=True)
    def validate_batch_size(cls, v):
        if v < 1:
            raise ValueError(f"Batch sizes must be positive, got {v}")
        return v

    @root_validator(skip_on_failure=True)
    def validate_gpu(cls, values):
        total, weights = values.get("total_gpu_bytes"), values.get("weight_bytes")
        if weights is not None and weights < 0:
            raise ValueError(f"weight_bytes must not be negative, got {weights}")
        if total is not None and weights is not None and weights >= total:
            raise ValueError(f"weight_bytes {weights} leave no room in total_gpu_bytes {total}")
        return values


class RunConfig(BaseModel):
    cache: CacheConfig
    policy: EvictionPolicy = EvictionPolicy()
    criterion: Criterion = Criterion.QUERY
    quantization: Optional[QuantizationConfig] = None
    workload: WorkloadConfig = WorkloadConfig()
    report: ReportConfig = ReportConfig()
    output_dir: Optional[str] = None
    causal_analysis: bool = True
    tolerance: float = 1e-10

    @validator("tolerance")
    def validate_tolerance(cls, v):
        if v < 0:
            raise ValueError(f"tolerance must not be negative, got {v}")
        return v

    @root_validator(skip_on_failure=True)
    def validate_run(cls, values):
        cache: CacheConfig = values["cache"]
        policy: EvictionPolicy = values["policy"]
        workload: WorkloadConfig = values["workload"]
        report: ReportConfig = values["report"]

        for ratio in report.sweep:
            if kept_channels(cache.head_dim, ratio) < 1:
                raise ValueError(
                    f"Sweep ratio {ratio} keeps no key channel of head_dim={cache.head_dim}"
                )

        if workload.prefill_len is None:
            values["workload"] = workload.copy(update={"prefill_len": cache.seq_len})
        elif workload.prefill_len != cache.seq_len:
            raise ValueError(
                f"workload.prefill_len {workload.prefill_len} differs from cache.seq_len {cache.seq_len}"
            )

        if policy.kind == EvictionKind.NONE:
            if cache.kv_budget is not None and cache.kv_budget < cache.seq_len:
                raise ValueError("A kv_budget below seq_len needs an eviction policy")
        else:
            if policy.kv_budget > cache.seq_len:
                raise ValueError(
                    f"policy.kv_budget {policy.kv_budget} exceeds seq_len {cache.seq_len}"
                )
            if cache.kv_budget is None:
                values["cache"] = cache.copy(update={"kv_budget": policy.kv_budget})
            elif cache.kv_budget != policy.kv_budget:
                raise ValueError(
                    f"cache.kv_budget {cache.kv_budget} differs from policy.kv_budget {policy.kv_budget}"
                )
        return values

    @property
    def total_len(self) -> int:
        return self.cache.seq_len + self.workload.decode_steps


def load_run_config(path: str, seed: Optional[int] = None) -> RunConfig:
    """
    Read and validate a JSON run configuration. ``seed`` replaces the workload seed.
    """
    try:
        raw = json.loads(Path(path).expanduser().read_text())
    except (OSError, ValueError) as e:
        raise ConfigException(f"Could not read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigException(f"Config {path} must hold a JSON object")
    if seed is not None:
        raw.setdefault("workload", {})
        raw["workload"] = dict(raw["workload"] or {}, seed=seed)
    try:
        return RunConfig.parse_obj(raw)
    except ValidationError as e:
        raise ConfigException(f"Invalid config {path}: {e}") from e


class HeadTensors(NamedTuple):
    queries: List[Matrix]
    keys: Matrix
    values: Matrix


def _gaussian(rng: np.random.Generator, rows: int, cols: int) -> Matrix:
    return rng.standard_normal((rows, cols))


def _lowrank(rng: np.random.Generator, rows: int, cols: int, rank: int) -> Matrix:
    return rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))


def _prototype_queries(rng: np.random.Generator, rows: int, cols: int, rank: int) -> Matrix:
    # row i copies prototype i mod rank, so q k^T has at most rank distinct rows
    prototypes = rng.standard_normal((rank, cols))
    return prototypes[np.arange(rows) % rank]


def generate_head(config: RunConfig, batch: int, layer: int, head: int) -> HeadTensors:
    """
    The tensors of one (batch, layer, KV head): one query matrix per member of its query
    group, with prompt and decode rows stacked. Every head draws from its own generator
    seeded by (seed, batch, layer, head), so the result does not depend on scheduling.
    """
    rng = np.random.default_rng([config.workload.seed, batch, layer, head])
    rows, cols = config.total_len, config.cache.head_dim
    if config.workload.generator == Generator.GAUSSIAN:
        queries = [_gaussian(rng, rows, cols) for _ in range(config.cache.query_group_size)]
        keys, values = _gaussian(rng, rows, cols), _gaussian(rng, rows, cols)
    else:
        rank = config.workload.rank
        queries = [
            _prototype_queries(rng, rows, cols, rank)
            for _ in range(config.cache.query_group_size)
        ]
        keys, values = _lowrank(rng, rows, cols, rank), _lowrank(rng, rows, cols, rank)
    return HeadTensors(queries, keys, values)
