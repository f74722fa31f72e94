"""Fake-interaction generation across the two user groups.

A quadruple pairs one real triple from each group, ``<u0, i0, j0>`` with
``u0`` in group 0 and ``<u1, i1, j1>`` with ``u1`` in group 1. From it the
fake records are built:

* positive side: ``<u1, i0~, j1>`` and ``<u0, i1~, j0>``
* negative side: ``<u1, i1, j0~>`` and ``<u0, i0, j1~>``

where ``v~`` is item ``v`` with its embedding shifted by a bounded per-item
noise vector ``delta_v`` (``|delta_v[k]| <= eps`` in every coordinate).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .backbone import Adam, EmbeddingTable, softplus
from .sampling import TrainIndex


@dataclass
class QuadrupleBatch:
    u0: np.ndarray
    i0: np.ndarray
    j0: np.ndarray
    u1: np.ndarray
    i1: np.ndarray
    j1: np.ndarray

    FIELDS = ("u0", "i0", "j0", "u1", "i1", "j1")

    def __len__(self) -> int:
        return len(self.u0)

    def __getitem__(self, idx) -> "QuadrupleBatch":
        return QuadrupleBatch(*(getattr(self, f)[idx] for f in self.FIELDS))

    @classmethod
    def from_rows(cls, rows) -> "QuadrupleBatch":
        arr = np.asarray(rows, dtype=np.int64).reshape(-1, 6)
        return cls(*arr.T.copy())

    def as_array(self) -> np.ndarray:
        return np.column_stack([getattr(self, f) for f in self.FIELDS])

    def real_triples(self) -> np.ndarray:
        """The two real triples of every quadruple, group-0 rows first."""
        return np.vstack([
            np.column_stack([self.u0, self.i0, self.j0]),
            np.column_stack([self.u1, self.i1, self.j1]),
        ])

    def check(self, index: TrainIndex) -> None:
        """Raise ``ValueError`` if any quadruple breaks the group or membership rules."""
        g = index.groups
        if (g[self.u0] != 0).any() or (g[self.u1] != 1).any():
            raise ValueError("quadruple users are not in their required groups")
        if not index.contains(self.u0, self.i0).all() or not index.contains(self.u1, self.i1).all():
            raise ValueError("quadruple positive is not a train interaction")
        if index.contains(self.u0, self.j0).any() or index.contains(self.u1, self.j1).any():
            raise ValueError("quadruple negative is a train interaction")


def trainable_users(index: TrainIndex, group: int) -> np.ndarray:
    return np.flatnonzero((index.groups == group) & (index.counts > 0))


def sample_quadruples(index: TrainIndex, n: int, rng: np.random.Generator) -> QuadrupleBatch:
    """Draw ``n`` quadruples, the two group sides independently.

    Per side: user uniform among the group's users with train positives,
    positive uniform over that user's items, negative uniform over the rest.
    """
    sides = []
    for g in (0, 1):
        pool = trainable_users(index, g)
        if len(pool) == 0:
            raise ValueError(f"group {g} has no user with train interactions")
        users = pool[rng.integers(0, len(pool), size=n)]
        pos = index.sample_positives(users, rng)
        neg = index.sample_negatives(users, rng)
        sides.append((users, pos, neg))
    (u0, i0, j0), (u1, i1, j1) = sides
    return QuadrupleBatch(u0, i0, j0, u1, i1, j1)


@dataclass
class Perturbations:
    delta: np.ndarray
    epsilon: float

    def project(self) -> None:
        np.clip(self.delta, -self.epsilon, self.epsilon, out=self.delta)


def init_perturbations(num_items: int, dim: int, epsilon: float = 0.05, seed: int = 0,
                       dtype=np.float32) -> Perturbations:
    """Uniform noise on ``[-epsilon, epsilon]`` for every item coordinate."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    rng = np.random.default_rng(seed)
    delta = rng.uniform(-epsilon, epsilon, size=(num_items, dim)).astype(dtype)
    pert = Perturbations(delta, float(epsilon))
    pert.project()  # float32 rounding can land a hair outside the bound
    return pert


def fake_scores(E: EmbeddingTable, delta: np.ndarray, q: QuadrupleBatch):
    """Scores of the four fake interactions of each quadruple.

    Returns ``(r[u1, i0~], r[u0, i1~], r[u1, j0~], r[u0, j1~])``.
    """
    eu0, eu1 = E.user[q.u0], E.user[q.u1]

    def dot(a, b):
        return np.einsum("nd,nd->n", a, b)

    return (
        dot(eu1, E.item[q.i0] + delta[q.i0]),
        dot(eu0, E.item[q.i1] + delta[q.i1]),
        dot(eu1, E.item[q.j0] + delta[q.j0]),
        dot(eu0, E.item[q.j1] + delta[q.j1]),
    )


@dataclass
class Contrast:
    """One ``-ln sigmoid(s)`` term per row with ``s = e_u . sum_k w_k (e_{v_k} + c_k delta_{v_k})``.

    ``w`` carries the sign (+ for the preferred side, - for the other) and any
    mask mixing; ``c`` is the weight on the item's noise vector.
    """

    users: np.ndarray
    items: list[np.ndarray]
    weights: list[np.ndarray]
    noise: list[np.ndarray]

    def item_vectors(self, E: EmbeddingTable, delta: np.ndarray | None) -> np.ndarray:
        acc = 0.0
        for v, w, c in zip(self.items, self.weights, self.noise):
            vec = E.item[v]
            if delta is not None and np.any(c):
                vec = vec + c[:, None] * delta[v]
            acc = acc + w[:, None] * vec
        return acc

    def margins(self, E: EmbeddingTable, delta: np.ndarray | None) -> np.ndarray:
        return np.einsum("nd,nd->n", E.user[self.users], self.item_vectors(E, delta))


def _ones(n, dtype):
    return np.ones(n, dtype=dtype)


def contrast_loss(E: EmbeddingTable, delta, contrasts: list[Contrast]) -> float:
    return float(sum(softplus(-c.margins(E, delta)).sum() for c in contrasts))


def contrast_gradients(E: EmbeddingTable, delta, contrasts: list[Contrast], wrt_embeddings=True,
                       wrt_delta=True):
    """Loss and gradients ``(loss, g_user, g_item, g_delta)``; unrequested gradients are None."""
    loss = 0.0
    g_user = np.zeros_like(E.user) if wrt_embeddings else None
    g_item = np.zeros_like(E.item) if wrt_embeddings else None
    g_delta = np.zeros_like(delta) if wrt_delta else None
    for c in contrasts:
        eu = E.user[c.users]
        vecs = c.item_vectors(E, delta)
        s = np.einsum("nd,nd->n", eu, vecs)
        loss += float(softplus(-s).sum())
        coef = (-expit(-s))[:, None]
        ceu = coef * eu
        if wrt_embeddings:
            np.add.at(g_user, c.users, coef * vecs)
        for v, w, nz in zip(c.items, c.weights, c.noise):
            if wrt_embeddings:
                np.add.at(g_item, v, w[:, None] * ceu)
            if wrt_delta and np.any(nz):
                np.add.at(g_delta, v, (w * nz)[:, None] * ceu)
    return loss, g_user, g_item, g_delta


def inner_contrasts(q: QuadrupleBatch, hypotheses=(True, True), dtype=np.float32) -> list[Contrast]:
    """The four fake-record contrasts, restricted to the enabled hypotheses.

    Positive-side (first hypothesis): ``i0~ >_{u1} j1`` and ``i1~ >_{u0} j0``.
    Negative-side (second hypothesis): ``i1 >_{u1} j0~`` and ``i0 >_{u0} j1~``.
    """
    n = len(q)
    one, zero = _ones(n, dtype), np.zeros(n, dtype=dtype)
    out = []
    if hypotheses[0]:
        out.append(Contrast(q.u0, [q.i1, q.j0], [one, -one], [one, zero]))
        out.append(Contrast(q.u1, [q.i0, q.j1], [one, -one], [one, zero]))
    if hypotheses[1]:
        out.append(Contrast(q.u0, [q.i0, q.j1], [one, -one], [zero, one]))
        out.append(Contrast(q.u1, [q.i1, q.j0], [one, -one], [zero, one]))
    return out


def inner_loss(E: EmbeddingTable, delta: np.ndarray, q: QuadrupleBatch, hypotheses=(True, True)) -> float:
    if len(q) == 0:
        raise ValueError("empty batch")
    return contrast_loss(E, delta, inner_contrasts(q, hypotheses, E.user.dtype))


def inner_gradient(E: EmbeddingTable, delta: np.ndarray, q: QuadrupleBatch, hypotheses=(True, True)) -> np.ndarray:
    """Gradient of :func:`inner_loss` w.r.t. the noise table (embeddings held fixed)."""
    return contrast_gradients(E, delta, inner_contrasts(q, hypotheses, E.user.dtype),
                              wrt_embeddings=False)[3]


def inner_step(E: EmbeddingTable, pert: Perturbations, q: QuadrupleBatch, opt: Adam,
               hypotheses=(True, True)) -> float:
    """One projected Adam step on the noise table; returns the pre-step loss."""
    if len(q) == 0:
        raise ValueError("empty batch")
    loss, _, _, grad = contrast_gradients(E, pert.delta, inner_contrasts(q, hypotheses, E.user.dtype),
                                          wrt_embeddings=False)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite inner loss")
    opt.step([pert.delta], [grad])
    pert.project()
    return loss


@dataclass
class MaskVector:
    m: np.ndarray
    capacity: int

    @property
    def selected(self) -> int:
        return int(self.m.sum())


def sample_mask(num_items: int, ratio: float, rng: np.random.Generator) -> MaskVector:
    """Select exactly ``floor(ratio * N)`` items uniformly without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    cap = int(np.floor(ratio * num_items))
    m = np.zeros(num_items, dtype=bool)
    if cap:
        m[rng.choice(num_items, size=cap, replace=False)] = True
    return MaskVector(m, cap)
