"""Embedding recommender backbone: inner-product scoring, BPR loss with
hand-derived gradients, Adam, and an optional linear graph propagation.

Triples are ``(n, 3)`` integer arrays of ``(user, positive, negative)`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit


@dataclass
class EmbeddingTable:
    user: np.ndarray
    item: np.ndarray

    @property
    def dim(self) -> int:
        return self.user.shape[1]

    @property
    def num_users(self) -> int:
        return self.user.shape[0]

    @property
    def num_items(self) -> int:
        return self.item.shape[0]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user.copy(), self.item.copy())

    def params(self) -> list[np.ndarray]:
        return [self.user, self.item]


def init_embeddings(num_users: int, num_items: int, dim: int = 64, seed: int = 0,
                    dtype=np.float32) -> EmbeddingTable:
    """Gaussian init with standard deviation ``0.1 / sqrt(dim)``."""
    if min(num_users, num_items, dim) <= 0:
        raise ValueError("num_users, num_items and dim must be positive")
    rng = np.random.default_rng(seed)
    scale = 0.1 / np.sqrt(dim)
    user = rng.normal(0.0, scale, size=(num_users, dim)).astype(dtype)
    item = rng.normal(0.0, scale, size=(num_items, dim)).astype(dtype)
    return EmbeddingTable(user, item)


def score(E: EmbeddingTable, u: int, v: int) -> float:
    return float(E.user[u] @ E.item[v])


def score_matrix(E: EmbeddingTable, users: np.ndarray | None = None) -> np.ndarray:
    U = E.user if users is None else E.user[users]
    return U @ E.item.T


def softplus(x: np.ndarray) -> np.ndarray:
    """``ln(1 + e^x)`` without overflow; equals ``-ln sigmoid(-x)``."""
    return np.logaddexp(0, x)


def bpr_loss(E: EmbeddingTable, triples: np.ndarray) -> float:
    """Summed ``-ln sigmoid(r_ui - r_uj)`` over the batch."""
    triples = np.asarray(triples)
    if len(triples) == 0:
        raise ValueError("empty batch")
    u, i, j = triples.T
    eu = E.user[u]
    diff = np.einsum("nd,nd->n", eu, E.item[i] - E.item[j])
    return float(softplus(-diff).sum())


def bpr_gradients(E: EmbeddingTable, triples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`bpr_loss` w.r.t. user and item tables.

    Dense arrays shaped like the tables; rows outside the batch stay zero.
    """
    triples = np.asarray(triples)
    if len(triples) == 0:
        raise ValueError("empty batch")
    u, i, j = triples.T
    eu = E.user[u]
    delta_item = E.item[i] - E.item[j]
    s = np.einsum("nd,nd->n", eu, delta_item)
    coef = (-expit(-s))[:, None]  # d/ds of softplus(-s) = -(1 - sigmoid(s))
    g_user = np.zeros_like(E.user)
    g_item = np.zeros_like(E.item)
    np.add.at(g_user, u, coef * delta_item)
    np.add.at(g_item, i, coef * eu)
    np.add.at(g_item, j, -coef * eu)
    return g_user, g_item


class Adam:
    """Adam with bias correction over a fixed list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(self.m):
            raise ValueError("parameter list does not match optimizer state")
        for p, g, m in zip(params, grads, self.m):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
            if not np.isfinite(g).all():
                raise FloatingPointError("non-finite gradient passed to Adam")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def normalized_adjacency(train: np.ndarray, num_users: int, num_items: int,
                         dtype=np.float32) -> sp.csr_matrix:
    """Symmetric bipartite adjacency scaled by ``1/sqrt(deg_u * deg_i)``.

    Node order is users ``0..M-1`` followed by items ``M..M+N-1``.
    """
    train = np.unique(np.asarray(train, dtype=np.int64).reshape(-1, 2), axis=0)
    u, i = train[:, 0], train[:, 1]
    du = np.bincount(u, minlength=num_users).astype(np.float64)
    di = np.bincount(i, minlength=num_items).astype(np.float64)
    w = 1.0 / np.sqrt(du[u] * di[i])
    n = num_users + num_items
    rows = np.concatenate([u, i + num_users])
    cols = np.concatenate([i + num_users, u])
    adj = sp.coo_matrix((np.concatenate([w, w]).astype(dtype), (rows, cols)), shape=(n, n))
    return adj.tocsr()


class GraphPropagation:
    """Linear propagation ``h_l = A h_{l-1}`` with sum or concat layer combination.

    ``A`` is symmetric, so the backward pass reuses it.
    """

    def __init__(self, train: np.ndarray, num_users: int, num_items: int,
                 layers: int = 1, combine: str = "sum", dtype=np.float32):
        if layers < 0:
            raise ValueError("layers must be >= 0")
        if combine not in ("sum", "concat"):
            raise ValueError(f"unknown combine mode {combine!r}")
        self.layers = layers
        self.combine = combine
        self.num_users = num_users
        self.adj = normalized_adjacency(train, num_users, num_items, dtype)

    def out_dim(self, dim: int) -> int:
        return dim * (self.layers + 1) if self.combine == "concat" else dim

    def forward(self, E: EmbeddingTable) -> EmbeddingTable:
        if self.layers == 0:
            return E.copy()
        h = np.vstack([E.user, E.item])
        outs = [h]
        for _ in range(self.layers):
            h = self.adj @ h
            outs.append(h)
        full = np.hstack(outs) if self.combine == "concat" else np.sum(outs, axis=0)
        full = np.asarray(full, dtype=E.user.dtype)
        return EmbeddingTable(full[:self.num_users].copy(), full[self.num_users:].copy())

    def backward(self, g_user: np.ndarray, g_item: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = np.vstack([g_user, g_item])
        if self.layers == 0:
            base = g
        elif self.combine == "sum":
            # d/dE of sum_l A^l E is sum_l A^l G (A symmetric): Horner form
            base = g
            for _ in range(self.layers):
                base = g + self.adj @ base
        else:
            d = g.shape[1] // (self.layers + 1)
            blocks = [g[:, k * d:(k + 1) * d] for k in range(self.layers + 1)]
            base = blocks[-1]
            for blk in reversed(blocks[:-1]):
                base = blk + self.adj @ base
        base = np.asarray(base, dtype=g_user.dtype)
        return base[:self.num_users].copy(), base[self.num_users:].copy()


def propagate_graph(E: EmbeddingTable, train: np.ndarray, layers: int = 1,
                    combine: str = "sum") -> EmbeddingTable:
    return GraphPropagation(train, E.num_users, E.num_items, layers, combine,
                            dtype=E.user.dtype).forward(E)
