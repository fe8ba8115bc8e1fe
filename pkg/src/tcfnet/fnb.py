"""Fuzzy neural block.

Each of K rules has a centroid; a shared, learnable per-dimension width
vector ``a`` sets the Gaussian memberships. A rule's firing strength is the
product of its per-dimension memberships and the block outputs the firing
strengths normalized to sum to one. The product is evaluated in log space,
which turns the normalization into a softmax and avoids underflow for large
input dimension.

Centroids are not trained by gradient descent. During a training epoch the
block's inputs are buffered; at the epoch boundary fuzzy c-means over the
buffer yields the centroids used during the next epoch. Before the first
boundary all centroids are zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, ShapeError, Tensor
from .layers import Layer, _param

log = logging.getLogger(__name__)


@dataclass
class FuzzyRuleSet:
    centroids: Parameter  # (K, d), not trainable
    log_a: Parameter  # (d,), trainable; a = exp(log_a) > 0

    @classmethod
    def init(cls, name: str, K: int, d: int) -> "FuzzyRuleSet":
        if K < 1 or d < 1:
            raise ValueError(f"need K >= 1 and d >= 1, got K={K}, d={d}")
        return cls(
            centroids=_param(f"{name}.centroids", np.zeros((K, d)), trainable=False),
            log_a=_param(f"{name}.log_a", np.zeros(d)),
        )

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]

    @property
    def scaling(self) -> np.ndarray:
        return np.exp(self.log_a.data)


def rule_scores(v, rules: FuzzyRuleSet) -> Tensor:
    """Log firing strengths: s_k = sum_j -(v_j - c_kj)^2 / (4 a_j^2), shape (B, K)."""
    v = ad.as_tensor(v)
    if v.ndim == 1:
        v = ad.reshape(v, (1, -1))
    if v.shape[-1] != rules.d:
        raise ShapeError(f"fnb: input dimension {v.shape[-1]} != rule dimension {rules.d}")
    B = v.shape[0]
    diff = ad.reshape(v, (B, 1, rules.d)) - rules.centroids.data
    inv_a2 = ad.exp(rules.log_a.tensor * -2.0)
    return ad.reduce_sum(diff * diff * inv_a2, axis=2) * -0.25


def fnb_forward(v, rules: FuzzyRuleSet) -> Tensor:
    """Normalized rule activations, shape (B, K), rows summing to one."""
    return ad.softmax(rule_scores(v, rules), axis=1)


def fnb_product_form(v: np.ndarray, centroids: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Direct product-then-normalize evaluation in float64 (reference only)."""
    v = np.atleast_2d(v)
    mu = np.exp(-0.25 * (v[:, None, :] - centroids[None]) ** 2 / a**2)
    o = mu.prod(axis=2)
    return o / o.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- buffering


@dataclass
class ActivationBuffer:
    """Uniform reservoir sample of the vectors seen during one training epoch."""

    capacity: int = 4096
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    store: list = field(default_factory=list)
    seen: int = 0

    def push(self, v: np.ndarray) -> None:
        if self.seen < self.capacity:
            self.store.append(np.array(v, dtype=float))
        else:
            j = int(self.rng.integers(0, self.seen + 1))
            if j < self.capacity:
                self.store[j] = np.array(v, dtype=float)
        self.seen += 1

    def clear(self) -> None:
        self.store = []
        self.seen = 0

    def as_array(self) -> np.ndarray:
        return np.stack(self.store) if self.store else np.zeros((0, 0))

    def __len__(self) -> int:
        return len(self.store)


def collect_activation(buffer: ActivationBuffer, v, training: bool = True) -> None:
    """Add one vector (or each row of a batch) to the buffer; no-op at inference."""
    if not training:
        return
    arr = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=float)
    for row in np.atleast_2d(arr):
        buffer.push(row)


# ---------------------------------------------------------------- clustering


@dataclass
class FCMResult:
    centroids: np.ndarray
    memberships: np.ndarray
    n_iter: int
    converged: bool


def fcm_memberships(D: np.ndarray, centroids: np.ndarray, m: float) -> np.ndarray:
    """u_ik proportional to (1 / ||v_i - c_k||^2)^(1/(m-1)), rows normalized.

    A point sitting exactly on one or more centroids shares membership
    equally among them.
    """
    d2 = ((D[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    zero = d2 <= 1e-300
    with np.errstate(divide="ignore"):
        # scale by the row minimum to keep the powers finite
        ratio = d2.min(axis=1, keepdims=True) / np.where(zero, 1.0, d2)
    u = ratio ** (1.0 / (m - 1.0))
    hit = zero.any(axis=1)
    if hit.any():
        u[hit] = zero[hit].astype(float)
    return u / u.sum(axis=1, keepdims=True)


def _seed_centroids(D: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding; coincident picks are separated by a seeded jitter."""
    n = len(D)
    idx = [int(rng.integers(n))]
    d2 = ((D - D[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            j = int(rng.integers(n))
        else:
            j = int(rng.choice(n, p=d2 / total))
        idx.append(j)
        d2 = np.minimum(d2, ((D - D[j]) ** 2).sum(axis=1))
    cents = D[idx].astype(float).copy()
    scale = max(float(np.abs(D).max(initial=0.0)), 1.0) * 1e-6
    for k in range(1, K):
        while any(np.array_equal(cents[k], cents[q]) for q in range(k)):
            cents[k] = cents[k] + rng.standard_normal(cents.shape[1]) * scale
    return cents


def fuzzy_cluster(
    D,
    K: int,
    m: float = 2.0,
    tol: float = 1e-5,
    max_iter: int = 100,
    rng: np.random.Generator | None = None,
    on_iter: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> FCMResult:
    """Fuzzy c-means. Stops when no centroid moves more than ``tol``."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if len(D) < K:
        raise ValueError(f"fuzzy_cluster: need at least K={K} points, got {len(D)}")
    if m <= 1.0:
        raise ValueError(f"fuzzifier m must exceed 1, got {m}")
    rng = np.random.default_rng(0) if rng is None else rng
    cents = _seed_centroids(D, K, rng)
    u = fcm_memberships(D, cents, m)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = u**m
        mass = w.sum(axis=0)
        new = cents.copy()
        live = mass > 1e-300  # a cluster owning no mass keeps its centroid
        new[live] = (w.T[live] @ D) / mass[live, None]
        shift = np.sqrt(((new - cents) ** 2).sum(axis=1)).max()
        cents = new
        u = fcm_memberships(D, cents, m)
        if on_iter is not None:
            on_iter(it, cents, u)
        if shift < tol:
            converged = True
            break
    return FCMResult(cents, u, it, converged)


# ---------------------------------------------------------------- the block


class FNB(Layer):
    """Buffers inputs while training and produces (B, K) normalized rule activations."""

    def __init__(
        self,
        name: str,
        d: int,
        K: int = 4,
        rng: np.random.Generator | None = None,
        capacity: int = 4096,
        m: float = 2.0,
        tol: float = 1e-5,
        max_iter: int = 100,
        grad_to_input: bool = True,
    ):
        self.name = name
        self.rules = FuzzyRuleSet.init(name, K, d)
        rng = np.random.default_rng(0) if rng is None else rng
        buf_rng, self.cluster_rng = rng.spawn(2)
        self.buffer = ActivationBuffer(capacity, buf_rng)
        self.m, self.tol, self.max_iter = m, tol, max_iter
        self.grad_to_input = grad_to_input
        self.updates = 0

    def params(self):
        return [self.rules.log_a, self.rules.centroids]

    def __call__(self, v, training=False):
        v = ad.as_tensor(v)
        collect_activation(self.buffer, v, training)
        if not self.grad_to_input:
            v = v.detach()
        return fnb_forward(v, self.rules)

    def epoch_end(self) -> bool:
        return epoch_end_update(self)


def epoch_end_update(block: FNB) -> bool:
    """Recluster centroids from the buffer and clear it. Returns False if the buffer was empty."""
    if len(block.buffer) == 0:
        log.warning("fnb %s: empty activation buffer at epoch end; centroids unchanged", block.name)
        return False
    data = block.buffer.as_array()
    K = block.rules.K
    if len(data) < K:
        log.warning("fnb %s: %d buffered vectors < K=%d; centroids unchanged", block.name, len(data), K)
        block.buffer.clear()
        return False
    res = fuzzy_cluster(data, K, block.m, block.tol, block.max_iter, block.cluster_rng)
    block.rules.centroids.tensor.data = res.centroids
    block.buffer.clear()
    block.updates += 1
    return True
