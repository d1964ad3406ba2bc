"""KL-divergence based selection of branch-specific and shared experts.

A layer with ``n`` experts and ``m`` branches (scenarios or tasks) produces
one gate logit vector per branch. Stacking them gives an ``n x m`` matrix
whose rows are softmax-normalized; expert ``k`` is a good *specific* expert
for branch ``j`` when its row is close to the one-hot vector ``e_j`` and a
good *shared* expert when its row is close to uniform. Closeness is
``KL(reference || row)``.

Selection is discrete: indices carry no gradient. Everything here that is
batched takes arrays of shape ``(B, n, m)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DomainError, ShapeError
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class ReferenceDistributions:
    specific: np.ndarray  # one-hot at the branch index
    shared: np.ndarray  # uniform

    @classmethod
    def for_branch(cls, n_branches: int, branch: int) -> ReferenceDistributions:
        if not 0 <= branch < n_branches:
            raise ConfigError(f"branch {branch} outside [0, {n_branches})")
        p = np.zeros(n_branches)
        p[branch] = 1.0
        return cls(p, np.full(n_branches, 1.0 / n_branches))


@dataclass
class GatingMatrix:
    """Per-instance gate logits stacked by branch, shape ``(B, n_experts, n_branches)``."""

    raw: Tensor
    normalized: Tensor
    log_normalized: Tensor

    @classmethod
    def from_logits(cls, branch_logits: list[Tensor]) -> GatingMatrix:
        raw = T.stack(branch_logits, axis=2)
        return cls(raw, T.softmax(raw, axis=2), T.log_softmax(raw, axis=2))

    @property
    def n_experts(self) -> int:
        return self.raw.shape[1]

    @property
    def n_branches(self) -> int:
        return self.raw.shape[2]


@dataclass
class SelectionResult:
    branch_index: int
    specific: tuple[int, ...]
    shared: tuple[int, ...]
    specific_scores: np.ndarray  # h^p_k = -KL(p_j || row_k)
    shared_scores: np.ndarray  # h^q_k = -KL(q || row_k)

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.specific) | set(self.shared)))


def kl_rows(reference: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``KL(reference || row)`` for every row along the last axis.

    ``reference`` broadcasts against ``rows``. Terms with zero reference mass
    contribute exactly 0. Terms are summed in sorted order so rows that are
    permutations of each other score bit-identically.
    """
    reference = np.asarray(reference, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    reference, rows = np.broadcast_arrays(reference, rows)
    support = reference > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(support, reference * (np.log(np.where(support, reference, 1.0)) - np.log(rows)), 0.0)
    if terms.shape[-1] > 2:
        terms = np.sort(terms, axis=-1)
    return terms.sum(axis=-1)


def kl_divergence(p, q) -> float:
    """``sum_i p_i ln(p_i / q_i)`` with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} must be equal vectors")
    if np.any((p > 0) & (q <= 0)):
        raise DomainError("kl_divergence: q is zero where p has mass")
    return float(kl_rows(p, q[None, :])[0])


def _check_k(k: int, n: int, what: str):
    if not 1 <= k <= n:
        raise ConfigError(f"{what}={k} must lie in [1, {n}]")


def select_batch(normalized: np.ndarray, branch: np.ndarray, k_specific: int, k_shared: int):
    """Vectorized selection for a batch.

    Returns ``(specific, shared, kl_specific, kl_shared)`` where the first two
    are ``(B, K)`` index arrays ordered best-first and the last two are the
    ``(B, n)`` divergences they were ranked by. Ties go to the lower index.
    """
    normalized = np.asarray(normalized, dtype=np.float64)
    if normalized.ndim != 3:
        raise ShapeError(f"select_batch expects (B, n, m), got {normalized.shape}")
    B, n, m = normalized.shape
    branch = np.broadcast_to(np.asarray(branch, dtype=np.int64), (B,))
    _check_k(k_specific, n, "k_specific")
    _check_k(k_shared, n, "k_shared")
    if np.any((branch < 0) | (branch >= m)):
        raise ConfigError(f"branch index outside [0, {m})")

    # same arithmetic as kl_rows, specialized to one-hot and uniform references
    with np.errstate(divide="ignore"):
        log_rows = np.log(normalized)
    kl_sp = 0.0 - log_rows[np.arange(B), :, branch]
    q = 1.0 / m
    terms = q * (np.log(q) - log_rows)
    if m > 2:
        terms = np.sort(terms, axis=-1)
    kl_sh = terms.sum(axis=-1)
    specific = np.argsort(kl_sp, axis=1, kind="stable")[:, :k_specific]
    shared = np.argsort(kl_sh, axis=1, kind="stable")[:, :k_shared]
    return specific, shared, kl_sp, kl_sh


def select_experts(normalized, branch_index: int, k_specific: int, k_shared: int) -> SelectionResult:
    """Select specific/shared experts for one row-normalized ``n x m`` gating matrix."""
    g = normalized.data if isinstance(normalized, Tensor) else np.asarray(normalized, dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError(f"select_experts expects an n x m matrix, got {g.shape}")
    sp, sh, kl_sp, kl_sh = select_batch(g[None], np.array([branch_index]), k_specific, k_shared)
    return SelectionResult(
        branch_index=int(branch_index),
        specific=tuple(int(i) for i in sp[0]),
        shared=tuple(int(i) for i in sh[0]),
        specific_scores=-kl_sp[0],
        shared_scores=-kl_sh[0],
    )


def active_mask(n: int, *index_sets: np.ndarray) -> np.ndarray:
    """Boolean ``(B, n)`` union of per-row index arrays of shape ``(B, K)``."""
    B = index_sets[0].shape[0]
    mask = np.zeros((B, n), dtype=bool)
    rows = np.arange(B)[:, None]
    for idx in index_sets:
        mask[rows, idx] = True
    return mask


def mask_gate(raw_gate: Tensor, active) -> Tensor:
    """Replace gate logits outside the active set by a large negative constant.

    ``active`` is either an iterable of indices (applied to every row) or a
    boolean mask with the same shape as ``raw_gate``.
    """
    n = raw_gate.shape[-1]
    if isinstance(active, np.ndarray) and active.dtype == bool:
        keep = active
    else:
        idx = sorted(set(int(i) for i in active))
        if not idx:
            raise ContractError("mask_gate: active set is empty")
        if idx[0] < 0 or idx[-1] >= n:
            raise ContractError(f"mask_gate: index outside [0, {n})")
        keep = np.zeros(raw_gate.shape, dtype=bool)
        keep[..., idx] = True
    if keep.shape != raw_gate.shape:
        raise ShapeError(f"mask_gate: mask {keep.shape} does not match gate {raw_gate.shape}")
    if not keep.any(axis=-1).all():
        raise ContractError("mask_gate: some row has an empty active set")
    return T.masked_fill(raw_gate, keep, MASK_VALUE)


def compute_gate(
    inputs: Tensor,
    branch_embedding: Tensor | None,
    weight: Tensor,
    bias: Tensor | None = None,
    noise_scale: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Gate logits for one branch: ``[inputs, branch_embedding] @ weight + bias + noise``.

    Exploration noise is Gaussian with standard deviation ``noise_scale * n``
    (``n`` = number of experts) and is only drawn when ``training``.
    """
    if noise_scale < 0:
        raise ConfigError(f"noise_scale must be non-negative, got {noise_scale}")
    x = inputs if branch_embedding is None else T.concat([inputs, branch_embedding], axis=1)
    logits = T.matmul(x, weight)
    if bias is not None:
        logits = logits + bias
    if training and noise_scale > 0:
        if rng is None:
            raise ConfigError("training with noise requires a random generator")
        n = weight.shape[1]
        logits = logits + Tensor(rng.normal(0.0, noise_scale * n, size=logits.shape))
    return logits
