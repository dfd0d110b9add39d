"""
Token eviction baselines that decide which prompt tokens stay in the cache.

Both policies rank prefix tokens by attention they received and always keep the trailing
window. H2O sums attention over every query row; SnapKV only over the observation window and
smooths the votes with a max pool so neighbouring tokens are kept together.
"""
import logging
from enum import Enum
from typing import List, Optional

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, root_validator

from kvtrim.exceptions import PreconditionException, ShapeException
from kvtrim.tensor import Matrix

logger = logging.getLogger(__name__)


class EvictionKind(str, Enum):
    NONE = "none"
    H2O = "h2o"
    SNAPKV = "snapkv"


class EvictionPolicy(BaseModel):
    kind: EvictionKind = EvictionKind.NONE
    kv_budget: Optional[int] = None
    obs_window: int = 32
    pool_kernel: int = 7

    @root_validator(skip_on_failure=True)
    def validate_policy(cls, values):
        if values["pool_kernel"] < 1 or values["pool_kernel"] % 2 == 0:
            raise ValueError(f"pool_kernel must be a positive odd number, got {values['pool_kernel']}")
        if values["obs_window"] < 1:
            raise ValueError(f"obs_window must be at least 1, got {values['obs_window']}")
        if values["kind"] != EvictionKind.NONE:
            budget = values.get("kv_budget")
            if budget is None:
                raise ValueError(f"The {values['kind'].value} policy needs a kv_budget")
            if budget < values["obs_window"]:
                raise ValueError(
                    f"kv_budget {budget} must be at least obs_window {values['obs_window']}"
                )
        return values


def _top_prefix(votes: NDArray[np.float64], count: int) -> NDArray[np.intp]:
    # stable sort on negated votes: ties go to the lower index
    order = np.argsort(-votes, kind="stable")
    return order[:count]


def evict_h2o(attn: Matrix, budget: int, recent: int) -> List[int]:
    """
    Keep the ``budget - recent`` prefix tokens with the largest column sums of ``attn`` plus
    the last ``recent`` tokens.
    """
    if attn.shape[0] != attn.shape[1]:
        raise ShapeException(f"H2O needs a square attention matrix, got {attn.shape}")
    if recent < 0 or budget < recent:
        raise PreconditionException(f"budget {budget} must be at least recent {recent} >= 0")

    seq_len = attn.shape[1]
    if budget >= seq_len:
        return list(range(seq_len))

    prefix_len = seq_len - recent
    votes = attn[:, :prefix_len].sum(axis=0)
    kept = _top_prefix(votes, budget - recent)
    retained = sorted(set(kept.tolist()) | set(range(prefix_len, seq_len)))
    logger.debug("H2O kept %d of %d tokens", len(retained), seq_len)
    return retained


def max_pool_1d(votes: NDArray[np.float64], kernel: int) -> NDArray[np.float64]:
    """
    Same-length sliding maximum; the window is clamped at both borders.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise PreconditionException(f"The pooling kernel must be a positive odd number, got {kernel}")
    half = kernel // 2
    padded = np.pad(votes, half, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel)
    return windows.max(axis=1)


def evict_snapkv(attn_obs: Matrix, budget: int, obs_window: int, pool_kernel: int) -> List[int]:
    if pool_kernel % 2 == 0:
        raise PreconditionException(f"The pooling kernel must be odd, got {pool_kernel}")
    if budget < obs_window:
        raise PreconditionException(f"budget {budget} must be at least obs_window {obs_window}")
    if attn_obs.shape[0] != obs_window:
        raise ShapeException(
            f"Expected {obs_window} observation rows, got {attn_obs.shape[0]}"
        )

    seq_len = attn_obs.shape[1]
    if budget >= seq_len:
        return list(range(seq_len))

    prefix_len = seq_len - obs_window
    votes = max_pool_1d(attn_obs[:, :prefix_len].sum(axis=0), pool_kernel)
    kept = _top_prefix(votes, budget - obs_window)
    retained = sorted(set(kept.tolist()) | set(range(prefix_len, seq_len)))
    logger.debug("SnapKV kept %d of %d tokens", len(retained), seq_len)
    return retained


def retained_indices(policy: EvictionPolicy, attn: Matrix) -> List[int]:
    """
    Apply ``policy`` to the full causal prefill attention matrix.
    """
    seq_len = attn.shape[1]
    if policy.kind == EvictionKind.NONE:
        return list(range(seq_len))
    window = min(policy.obs_window, seq_len)
    if policy.kind == EvictionKind.H2O:
        return evict_h2o(attn, min(policy.kv_budget, seq_len), window)
    return evict_snapkv(attn[-window:], min(policy.kv_budget, seq_len), window, policy.pool_kernel)
