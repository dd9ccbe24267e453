"""Aggregation of per-person representations into one group vector.

All functions take person features shaped ``(..., n, d)``: a single clip at
one timestep is ``(n, d)``, a batch is ``(B, n, d)``. Leading axes are carried
through untouched.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class PoolingScheme(str, enum.Enum):
    MAX = "max"
    AVG = "avg"
    GAP = "gap"
    HAP = "hap"
    SUBGROUP_GAP = "subgroup-gap"

    @property
    def attentive(self) -> bool:
        return self in (PoolingScheme.GAP, PoolingScheme.HAP, PoolingScheme.SUBGROUP_GAP)


@dataclass
class AttentionParams:
    """One-layer tanh MLP ``W (a x d)``, ``b (a,)`` and a learned context vector ``u (a,)``."""

    W: Tensor
    b: Tensor
    u: Tensor

    def __post_init__(self):
        self.W, self.b, self.u = map(ad.as_tensor, (self.W, self.b, self.u))
        a = self.W.shape[0]
        if self.W.ndim != 2 or self.b.shape != (a,) or self.u.shape != (a,):
            raise ShapeError("AttentionParams", self.W.shape, self.b.shape, self.u.shape)


@dataclass
class HapParams:
    person: list[AttentionParams]
    subgroup: AttentionParams

    def __post_init__(self):
        if not self.person:
            raise ValueError("HapParams needs at least one subgroup")


@dataclass
class SubgroupAssignment:
    ids: np.ndarray
    m: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.intp)
        if self.ids.ndim != 1 or self.m < 1:
            raise ValueError(f"bad subgroup assignment {self.ids.tolist()} (m={self.m})")
        if np.any(self.ids < 0) or np.any(self.ids >= self.m):
            raise ValueError(f"subgroup ids must lie in [0, {self.m}): {self.ids.tolist()}")
        counts = np.bincount(self.ids, minlength=self.m)
        if np.any(counts == 0):
            empty = [int(j) for j in np.flatnonzero(counts == 0)]
            raise ValueError(f"empty subgroup(s) {empty}")

    @classmethod
    def in_order(cls, n: int, m: int) -> "SubgroupAssignment":
        """Contiguous split of persons ``0..n-1`` into ``m`` nearly equal runs."""
        if not 1 <= m <= n:
            raise ValueError(f"cannot split {n} persons into {m} subgroups")
        return cls((np.arange(n) * m) // n, m)

    @property
    def n(self) -> int:
        return len(self.ids)

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.ids == j)


@dataclass
class AttentionTrace:
    """Attention weights at one timestep.

    ``person_weights`` is ``(..., n)`` in person order. For HAP and subgroup-GAP
    the person weights are normalised within each subgroup. ``subgroup_weights``
    is ``(..., m)`` and only set for HAP.
    """

    scheme: PoolingScheme
    person_weights: np.ndarray
    subgroup_weights: np.ndarray | None = None
    subgroups: np.ndarray | None = field(default=None, repr=False)


def _check_people(P: Tensor, op: str) -> None:
    if P.ndim < 2 or P.shape[-2] == 0:
        raise ShapeError(f"{op} (need at least one person)", P.shape)


def max_pool(P) -> Tensor:
    P = ad.as_tensor(P)
    _check_people(P, "max_pool")
    return ad.amax(P, axis=-2)


def avg_pool(P) -> Tensor:
    P = ad.as_tensor(P)
    _check_people(P, "avg_pool")
    return ad.mean(P, axis=-2)


def attention_weights(P, params: AttentionParams) -> Tensor:
    """Softmax over persons of ``u . tanh(W P_i + b)``."""
    hidden = ad.tanh(ad.linear(P, params.W, params.b))
    return ad.softmax(ad.dot(hidden, params.u), axis=-1)


def gap(P, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Global attentive pooling; returns the group vector and per-person weights."""
    P = ad.as_tensor(P)
    _check_people(P, "gap")
    if P.shape[-1] != params.W.shape[1]:
        raise ShapeError("gap", params.W.shape, P.shape)
    alpha = attention_weights(P, params)
    G = ad.tsum(P * ad.expand(alpha, -1), axis=-2)
    return G, alpha


def _per_subgroup(P: Tensor, assignment: SubgroupAssignment, params: list[AttentionParams]):
    if P.shape[-2] != assignment.n:
        raise ShapeError("subgroup assignment", P.shape, assignment.ids.shape)
    if len(params) != assignment.m:
        raise ValueError(f"{len(params)} person-level attention blocks for {assignment.m} subgroups")
    pooled, weights = [], np.zeros(P.shape[:-1])
    for j in range(assignment.m):
        idx = assignment.members(j)
        g, alpha = gap(ad.take(P, idx, axis=-2), params[j])
        pooled.append(g)
        weights[..., idx] = alpha.data
    return pooled, weights


def hap(P, assignment: SubgroupAssignment, params: HapParams) -> tuple[Tensor, AttentionTrace]:
    """Attentive pooling within each subgroup, then across subgroup vectors."""
    P = ad.as_tensor(P)
    _check_people(P, "hap")
    pooled, person_w = _per_subgroup(P, assignment, params.person)
    G, beta = gap(ad.stack(pooled, axis=-2), params.subgroup)
    trace = AttentionTrace(PoolingScheme.HAP, person_w, beta.data, assignment.ids)
    return G, trace


def subgroup_gap_concat(P, assignment: SubgroupAssignment,
                        params: list[AttentionParams]) -> tuple[Tensor, AttentionTrace]:
    """GAP within each subgroup; subgroup vectors concatenated in id order."""
    P = ad.as_tensor(P)
    _check_people(P, "subgroup_gap_concat")
    pooled, person_w = _per_subgroup(P, assignment, params)
    G = ad.concat(pooled, axis=-1)
    return G, AttentionTrace(PoolingScheme.SUBGROUP_GAP, person_w, None, assignment.ids)
