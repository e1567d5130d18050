"""Patch refiner: cluster tokens, classify each group, keep the riskiest group.

Clustering runs on detached token values, so gradients reach the backbone
only through the group means and the image head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, TokenGrid
from .nn import Linear, Module
from .tensor import Tensor

INFERENCE_SEED = 0
MAX_ITER = 50
N_INIT = 10


@dataclass
class ClusterAssignment:
    assignment: np.ndarray
    centroids: np.ndarray
    k: int
    sse_history: list = field(default_factory=list)
    iterations: int = 0

    @property
    def sse(self) -> float:
        return float(self.sse_history[-1]) if self.sse_history else 0.0


@dataclass
class GroupPredictions:
    logits: Tensor
    probs: Tensor


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    m = x.shape[0]
    idx = [int(rng.integers(m))]
    d2 = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            nxt = int(rng.integers(m))
        else:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            nxt = min(nxt, m - 1)
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def _repair_empty(x, assign, centroids, k):
    """Give every empty cluster the token farthest from its own centroid."""
    while True:
        counts = np.bincount(assign, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return assign
        donors = counts[assign] > 1
        dist = ((x - centroids[assign]) ** 2).sum(1)
        dist = np.where(donors, dist, -1.0)
        j = int(np.argmax(dist))
        assign = assign.copy()
        assign[j] = empty[0]
        centroids[empty[0]] = x[j]


def _sse(x, assign, centroids) -> float:
    return float(((x - centroids[assign]) ** 2).sum())


def _lloyd(x, k, rng, max_iter) -> ClusterAssignment:
    centroids = _kmeanspp(x, k, rng)
    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        new = np.argmin(_sq_dists(x, centroids), axis=1)
        new = _repair_empty(x, new, centroids, k)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            centroids[c] = x[assign == c].mean(axis=0)
        history.append(_sse(x, assign, centroids))
    return ClusterAssignment(assign, centroids, k, history, it)


def kmeans(points: np.ndarray, k: int, seed: int = INFERENCE_SEED, max_iter: int = MAX_ITER,
           n_init: int = N_INIT) -> ClusterAssignment:
    """Lloyd iterations from k-means++ seeds until the assignment stops changing.

    Runs ``n_init`` restarts from one seeded generator and keeps the lowest
    SSE (earliest restart on ties).
    """
    x = np.asarray(points, dtype=np.float64)
    m = x.shape[0]
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if m < k:
        raise ValueError(f"cannot form {k} clusters from {m} tokens")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        run = _lloyd(x, k, rng, max_iter)
        if best is None or run.sse < best.sse:
            best = run
    return best


def cluster_tokens(tokens, k: int, seed: int = INFERENCE_SEED) -> ClusterAssignment:
    """k-means over the (detached) tokens of one image."""
    if k < 2:
        raise ValueError(f"cluster_tokens needs k >= 2, got {k}")
    t = tokens.tokens if isinstance(tokens, TokenGrid) else tokens
    t = t.data if isinstance(t, Tensor) else np.asarray(t)
    return kmeans(t, k, seed)


def pooling_matrix(assignment: np.ndarray, k: int) -> np.ndarray:
    """[k, m] matrix whose product with tokens gives per-group means."""
    m = len(assignment)
    P = np.zeros((k, m))
    P[assignment, np.arange(m)] = 1.0
    return P / P.sum(axis=1, keepdims=True)


def group_pool_and_head(tokens, assign, head: Linear) -> GroupPredictions:
    """Average-pool each group and apply the image head.

    ``assign`` is one :class:`ClusterAssignment` (tokens ``[m, L]``) or a list
    of them (tokens ``[B, m, L]``).
    """
    t = tokens.tokens if isinstance(tokens, TokenGrid) else tokens
    batched = isinstance(assign, (list, tuple))
    assigns = list(assign) if batched else [assign]
    P = np.stack([pooling_matrix(a.assignment, a.k) for a in assigns])
    x = t if batched else t.reshape(1, *t.shape)
    pooled = T.matmul(Tensor(P, dtype=t.dtype), x)
    logits = head(pooled)
    if not batched:
        logits = logits.reshape(logits.shape[1:])
    return GroupPredictions(logits, T.softmax_rows(logits))


def select_group(preds, normal_class: int = 0):
    """Group with the smallest normal-class probability (lowest index on ties).

    Returns ``(index, probs)`` for one image or arrays of both for a batch.
    """
    probs = getattr(preds, "probs", preds)
    probs = np.asarray(getattr(probs, "data", probs))
    idx = np.argmin(probs[..., normal_class], axis=-1)
    if probs.ndim == 2:
        return int(idx), probs[idx]
    return idx, probs[np.arange(probs.shape[0]), idx]


def selected_logits(preds: GroupPredictions, index) -> Tensor:
    """Logits of the selected group(s); gradient flows only through that group."""
    logits = preds.logits
    k = logits.shape[-2]
    onehot = np.zeros(np.shape(index) + (1, k))
    if np.ndim(index) == 0:
        onehot[0, int(index)] = 1.0
    else:
        onehot[np.arange(len(index)), 0, index] = 1.0
    out = T.matmul(Tensor(onehot, dtype=logits.dtype), logits)
    return out.reshape(*np.shape(index), logits.shape[-1]) if np.ndim(index) else out.reshape(logits.shape[-1])


def image_loss(sel_logits: Tensor, image_label) -> Tensor:
    labels = np.asarray(image_label).reshape(-1)
    x = sel_logits if sel_logits.ndim == 2 else sel_logits.reshape(1, -1)
    return T.cross_entropy(x, labels)


def total_loss(image_l: Tensor, patch_l: Tensor | None, patch_weight: float = 1.0) -> Tensor:
    """Image loss plus patch loss; the image loss alone when no patch was kept."""
    if patch_l is None:
        return image_l
    if patch_weight == 1.0:
        return image_l + patch_l
    return image_l + patch_l * patch_weight


class PatchRefiner(Module):
    """Image-level branch. ``k == 1`` degenerates to global average pooling."""

    def __init__(self, token_dim: int, num_classes: int, k: int, rng, normal_class: int = 0,
                 seed: int = INFERENCE_SEED):
        super().__init__()
        self.k = k
        self.normal_class = normal_class
        self.seed = seed
        self.head = Linear(token_dim, num_classes, rng)

    def cluster(self, tokens: Tensor) -> list[ClusterAssignment]:
        t = tokens.data
        if t.ndim == 2:
            t = t[None]
        m = t.shape[1]
        if self.k == 1:
            whole = np.zeros(m, dtype=np.int64)
            return [ClusterAssignment(whole, t[i].mean(0, keepdims=True).astype(np.float64), 1) for i in range(len(t))]
        return [cluster_tokens(t[i], self.k, self.seed) for i in range(len(t))]

    def forward(self, grid: TokenGrid):
        """Returns group predictions, selected indices and selected logits ([B, C])."""
        tokens = grid.tokens if isinstance(grid, TokenGrid) else grid
        if tokens.ndim == 2:
            tokens = tokens.reshape(1, *tokens.shape)
        preds = group_pool_and_head(tokens, self.cluster(tokens), self.head)
        idx, _ = select_group(preds, self.normal_class)
        return preds, idx, selected_logits(preds, idx)


@dataclass
class Inference:
    predicted: np.ndarray
    probs: np.ndarray
    distress_score: np.ndarray


def infer(backbone: Backbone, refiner: PatchRefiner, images, batch_size: int = 64) -> Inference:
    """Image-level prediction through backbone and refiner only."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    probs = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            grid = backbone(images[s:s + batch_size])
            _, _, logits = refiner(grid)
            probs.append(T.softmax_rows(logits).data.astype(np.float64))
    p = np.concatenate(probs) if probs else np.zeros((0, refiner.head.d_out))
    return Inference(p.argmax(axis=1), p, 1.0 - p[:, refiner.normal_class])
