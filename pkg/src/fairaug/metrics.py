"""Top-K retrieval, accuracy (HR, NDCG) and group-fairness (DP, EO, JS) measures."""

from __future__ import annotations

import numpy as np

from .backbone import EmbeddingTable
from .dataset import InteractionDataset

DEFAULT_KS = (10, 20, 30, 40, 50)


def topk_from_scores(scores: np.ndarray, exclude: list[np.ndarray], k: int) -> np.ndarray:
    """Row-wise top-``k`` item indices after masking excluded items to -inf.

    Ties go to the lower item index (stable sort of negated scores).
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    for row, items in enumerate(exclude):
        if len(items):
            scores[row, items] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def evaluated_users(dataset: InteractionDataset, split: str = "test") -> np.ndarray:
    """Users with at least one interaction in ``split``."""
    return np.unique(getattr(dataset, split)[:, 0])


def topk(E: EmbeddingTable, dataset: InteractionDataset, k: int, users: np.ndarray | None = None,
         chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` lists for ``users`` (default: test users) excluding their train items.

    Returns ``(users, lists)`` with ``lists`` shaped ``(len(users), k)``.
    """
    if users is None:
        users = evaluated_users(dataset)
    indptr, items = dataset.train_csr()
    max_train = int(np.diff(indptr)[users].max()) if len(users) else 0
    if k > dataset.num_items - max_train:
        raise ValueError(f"K={k} exceeds the number of rankable items for some user")
    out = np.empty((len(users), k), dtype=np.int64)
    for start in range(0, len(users), chunk):
        batch = users[start:start + chunk]
        scores = E.user[batch] @ E.item.T
        exclude = [items[indptr[u]:indptr[u + 1]] for u in batch]
        out[start:start + chunk] = topk_from_scores(scores, exclude, k)
    return users, out


def _split_sets(dataset: InteractionDataset, users: np.ndarray, split: str) -> list[set]:
    per_user = dataset.user_items(split)
    return [set(per_user[u].tolist()) for u in users]


def hit_matrix(lists: np.ndarray, truth: list[set]) -> np.ndarray:
    return np.array([[v in t for v in row] for row, t in zip(lists.tolist(), truth)], dtype=bool).reshape(lists.shape)


def hr_at_k(lists: np.ndarray, truth: list[set]) -> float:
    """Mean per-user recall ``|TopK_u & Test_u| / |Test_u|`` over users with test items."""
    hits = hit_matrix(lists, truth)
    sizes = np.array([len(t) for t in truth], dtype=np.float64)
    keep = sizes > 0
    if not keep.any():
        raise ValueError("no user has a non-empty test set")
    return float(np.mean(hits.sum(axis=1)[keep] / sizes[keep]))


def ndcg_at_k(lists: np.ndarray, truth: list[set]) -> float:
    """Mean binary-relevance NDCG with ``1/log2(rank + 1)`` discounts."""
    k = lists.shape[1]
    hits = hit_matrix(lists, truth)
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = (hits * disc).sum(axis=1)
    sizes = np.array([len(t) for t in truth])
    keep = sizes > 0
    if not keep.any():
        raise ValueError("no user has a non-empty test set")
    idcg = np.cumsum(disc)[np.minimum(sizes, k) - 1]
    return float(np.mean(dcg[keep] / idcg[keep]))


def _parity(counts0: np.ndarray, counts1: np.ndarray, num_items: int) -> float:
    total = counts0 + counts1
    diff = np.abs(counts0 - counts1).astype(np.float64)
    terms = np.divide(diff, total, out=np.zeros_like(diff), where=total > 0)
    return float(terms.sum() / num_items)


def _group_counts(lists: np.ndarray, groups: np.ndarray, num_items: int, keep: np.ndarray | None = None):
    if (groups == 0).sum() == 0 or (groups == 1).sum() == 0:
        raise ValueError("both groups need at least one evaluated user")
    counts = []
    for g in (0, 1):
        sel = lists[groups == g]
        if keep is not None:
            sel = sel[keep[groups == g]]
        counts.append(np.bincount(sel.ravel(), minlength=num_items))
    return counts


def dp_at_k(lists: np.ndarray, groups: np.ndarray, num_items: int) -> float:
    """Item-averaged ``|c0 - c1| / (c0 + c1)`` of top-K exposure counts; 0/0 items add 0.

    ``groups`` holds the label of each row of ``lists``.
    """
    c0, c1 = _group_counts(lists, groups, num_items)
    return _parity(c0, c1, num_items)


def eo_at_k(lists: np.ndarray, truth: list[set], groups: np.ndarray, num_items: int) -> float:
    """As :func:`dp_at_k` but counting only top-K items that are also test items."""
    hits = hit_matrix(lists, truth)
    c0, c1 = _group_counts(lists, groups, num_items, keep=hits)
    return _parity(c0, c1, num_items)


def js_divergence(p: np.ndarray, q: np.ndarray, base: float = 2.0) -> float:
    """Jensen-Shannon divergence; ``0 log 0 = 0``; bounded by 1 in base 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for name, x in (("p", p), ("q", q)):
        if (x < 0).any() or not np.isclose(x.sum(), 1.0, rtol=0, atol=1e-9):
            raise ValueError(f"{name} is not a normalized distribution")
    m = 0.5 * (p + q)

    def kl(a):
        s = a > 0
        return float(np.sum(a[s] * np.log(a[s] / m[s])))

    # clamp round-off into the theoretical range [0, ln 2]
    return min(max(0.0, 0.5 * kl(p) + 0.5 * kl(q)), np.log(2.0)) / np.log(base)


def group_click_distribution(items: np.ndarray, item_groups: np.ndarray, num_items: int):
    """Normalized per-item event counts for each group.

    ``items`` and ``item_groups`` are parallel arrays: the item of each event
    and the group label of the user who produced it.
    """
    items = np.asarray(items, dtype=np.int64).ravel()
    item_groups = np.asarray(item_groups).ravel()
    out = []
    for g in (0, 1):
        counts = np.bincount(items[item_groups == g], minlength=num_items).astype(np.float64)
        if counts.sum() == 0:
            raise ValueError(f"group {g} has no events")
        out.append(counts / counts.sum())
    return tuple(out)


def training_js(dataset: InteractionDataset, base: float = 2.0) -> float:
    p, q = group_click_distribution(dataset.train[:, 1], dataset.groups[dataset.train[:, 0]], dataset.num_items)
    return js_divergence(p, q, base)


def topk_js(lists: np.ndarray, groups: np.ndarray, num_items: int, truth: list[set] | None = None,
            base: float = 2.0) -> float:
    """JS divergence between the groups' top-K items, or top-K hits when ``truth`` is given."""
    row_groups = np.repeat(groups, lists.shape[1]).reshape(lists.shape)
    if truth is None:
        return js_divergence(*group_click_distribution(lists, row_groups, num_items), base)
    hits = hit_matrix(lists, truth)
    return js_divergence(*group_click_distribution(lists[hits], row_groups[hits], num_items), base)


def evaluate(E: EmbeddingTable, dataset: InteractionDataset, ks=DEFAULT_KS, split: str = "test") -> dict:
    """All four measures per K on ``split``; returns ``{K: {"hr", "ndcg", "dp", "eo"}}``."""
    users = evaluated_users(dataset, split)
    truth = _split_sets(dataset, users, split)
    groups = dataset.groups[users]
    _, full = topk(E, dataset, max(ks), users)
    out = {}
    for k in ks:
        lists = full[:, :k]
        out[k] = {
            "hr": hr_at_k(lists, truth),
            "ndcg": ndcg_at_k(lists, truth),
            "dp": dp_at_k(lists, groups, dataset.num_items),
            "eo": eo_at_k(lists, truth, groups, dataset.num_items),
        }
    return out


def js_report(E: EmbeddingTable, dataset: InteractionDataset, ks=(20, 50), split: str = "test",
              base: float = 2.0) -> dict:
    """Training, top-K and top-K-hit JS divergences.

    A K at which one group has no top-K hits has no hit distribution; it is
    reported as ``None``.
    """
    users = evaluated_users(dataset, split)
    truth = _split_sets(dataset, users, split)
    groups = dataset.groups[users]
    _, full = topk(E, dataset, max(ks), users)
    report = {"log_base": base, "training": training_js(dataset, base), "topk": {}, "topk_hit": {}}
    for k in ks:
        report["topk"][str(k)] = topk_js(full[:, :k], groups, dataset.num_items, base=base)
        try:
            report["topk_hit"][str(k)] = topk_js(full[:, :k], groups, dataset.num_items, truth, base=base)
        except ValueError:
            report["topk_hit"][str(k)] = None
    return report
