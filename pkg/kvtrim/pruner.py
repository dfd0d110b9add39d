"""
Channel importance scores and Top-T channel selection.

The query-driven score of channel j is ||Q[-w:, j] K[:, j]^T||_F. The outer product has rank
one, so the score is the product of the two column norms and the window-by-sequence matrix is
never built.
"""
import logging
from enum import Enum
from itertools import combinations
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, validator

from kvtrim.cache import ChannelMask
from kvtrim.exceptions import GuardException, PreconditionException, ShapeException
from kvtrim.tensor import Matrix, frobenius_norm, matmul, row_softmax, transpose

logger = logging.getLogger(__name__)

ORACLE_MAX_DIM = 20


class Criterion(str, Enum):
    L1 = "l1"
    L2 = "l2"
    QUERY = "query"
    VALUE = "value"


class ScoreKind(str, Enum):
    L1 = "L1"
    L2 = "L2"
    QUERY_DRIVEN = "QueryDriven"
    VALUE_DRIVEN = "ValueDriven"


class ChannelScores(BaseModel):
    scores: np.ndarray
    kind: ScoreKind

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False

    @validator("scores")
    def validate_scores(cls, v):
        if v.ndim != 1:
            raise ValueError(f"Scores must be a vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("Scores must be finite and non-negative")
        return v

    @property
    def dim(self) -> int:
        return self.scores.size


def _window(queries: Matrix, obs_window: int) -> Matrix:
    if obs_window < 1:
        raise PreconditionException(f"The observation window must hold at least one query, got {obs_window}")
    if obs_window > queries.shape[0]:
        raise PreconditionException(
            f"Observation window {obs_window} is longer than the {queries.shape[0]} queries"
        )
    return queries[-obs_window:]


def group_query_window(queries: Sequence[Matrix], obs_window: int) -> Matrix:
    """
    Stack the last ``obs_window`` queries of every query head sharing one KV head.
    """
    return np.vstack([_window(member, obs_window) for member in queries])


def score_magnitude(keys: Matrix, p: int) -> ChannelScores:
    if keys.size == 0:
        raise PreconditionException("Magnitude scores need at least one token")
    if p == 1:
        return ChannelScores(scores=np.abs(keys).sum(axis=0), kind=ScoreKind.L1)
    if p == 2:
        return ChannelScores(scores=np.sqrt(np.square(keys).sum(axis=0)), kind=ScoreKind.L2)
    raise PreconditionException(f"Only the l1 and l2 norms are supported, got p={p}")


def score_query_driven(queries: Matrix, keys: Matrix, obs_window: int) -> ChannelScores:
    if queries.shape[1] != keys.shape[1]:
        raise ShapeException(f"Queries {queries.shape} and keys {keys.shape} differ in channels")
    window = _window(queries, obs_window)
    query_norms = np.sqrt(np.square(window).sum(axis=0))
    key_norms = np.sqrt(np.square(keys).sum(axis=0))
    return ChannelScores(scores=query_norms * key_norms, kind=ScoreKind.QUERY_DRIVEN)


def score_value_driven(
    queries: Matrix, keys: Matrix, values: Matrix, obs_window: int, scale: float
) -> ChannelScores:
    """
    Score value channel j by the norm of column j of softmax(Q[-w:] K^T / scale) V.
    """
    if queries.shape[1] != keys.shape[1] or keys.shape[0] != values.shape[0]:
        raise ShapeException(
            f"Inconsistent shapes: queries {queries.shape}, keys {keys.shape}, values {values.shape}"
        )
    window = _window(queries, obs_window)
    attention = row_softmax(matmul(window, transpose(keys)), scale)
    weighted = matmul(attention, values)
    return ChannelScores(
        scores=np.sqrt(np.square(weighted).sum(axis=0)), kind=ScoreKind.VALUE_DRIVEN
    )


def score_keys(criterion: Criterion, queries: Matrix, keys: Matrix, obs_window: int) -> ChannelScores:
    criterion = Criterion(criterion)
    if criterion == Criterion.L1:
        return score_magnitude(keys, 1)
    if criterion == Criterion.L2:
        return score_magnitude(keys, 2)
    return score_query_driven(queries, keys, obs_window)


def select_top_t(scores: ChannelScores, t: int) -> ChannelMask:
    """
    Keep the ``t`` highest scoring channels; equal scores go to the lower channel index.
    """
    if not 1 <= t <= scores.dim:
        raise PreconditionException(f"T must lie in [1, {scores.dim}], got {t}")
    order = np.argsort(-scores.scores, kind="stable")
    return ChannelMask.from_indices(scores.dim, np.sort(order[:t]))


def subset_loss(queries: Matrix, keys: Matrix, mask: ChannelMask) -> float:
    """
    ||Q K^T - Q S (K S)^T||_F for the selection S encoded by ``mask``, i.e. the norm of the
    logits carried by the dropped channels.
    """
    if queries.shape[1] != keys.shape[1] or mask.dim != keys.shape[1]:
        raise ShapeException(
            f"Queries {queries.shape}, keys {keys.shape} and a mask over {mask.dim} channels disagree"
        )
    dropped = ~mask.bits
    if not dropped.any():
        return 0.0
    return frobenius_norm(matmul(queries[:, dropped], transpose(keys[:, dropped])))


def _guard(dim: int, t: int) -> None:
    if dim > ORACLE_MAX_DIM:
        raise GuardException(
            f"Exhaustive search over {dim} channels is refused, the limit is {ORACLE_MAX_DIM}"
        )
    if not 1 <= t <= dim:
        raise PreconditionException(f"T must lie in [1, {dim}], got {t}")


def subset_losses(queries: Matrix, keys: Matrix, t: int) -> List[Tuple[Tuple[int, ...], float]]:
    """
    The loss of every T-channel subset in lexicographic order of the kept indices.
    """
    dim = keys.shape[1]
    _guard(dim, t)
    return [
        (kept, subset_loss(queries, keys, ChannelMask.from_indices(dim, kept)))
        for kept in combinations(range(dim), t)
    ]


class OracleResult(NamedTuple):
    mask: ChannelMask
    loss: float


def oracle_best_subset(queries: Matrix, keys: Matrix, t: int) -> OracleResult:
    best_kept, best_loss = None, np.inf
    # strict comparison keeps the lexicographically smallest subset among equal losses
    for kept, loss in subset_losses(queries, keys, t):
        if loss < best_loss:
            best_kept, best_loss = kept, loss
    logger.debug("Oracle kept %s with loss %.6g", best_kept, best_loss)
    return OracleResult(ChannelMask.from_indices(keys.shape[1], best_kept), float(best_loss))


def median_subset_loss(queries: Matrix, keys: Matrix, t: int) -> float:
    losses: NDArray[np.float64] = np.array([loss for _, loss in subset_losses(queries, keys, t)])
    return float(np.median(losses))
