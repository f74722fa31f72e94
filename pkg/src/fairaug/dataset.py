"""Rating-log ingestion, implicit-feedback binarization, k-core filtering,
train/validation/test splitting and sensitive-group labelling.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FORMATS = ("movielens_dat", "tsv")
SPLIT_STRATEGIES = {
    "ratio_80_20": (0.8, 0.0, 0.2),
    "ratio_70_10_20": (0.7, 0.1, 0.2),
}


class DatasetError(ValueError):
    """Raised for malformed inputs or violated dataset invariants."""


@dataclass(frozen=True)
class RawRating:
    user_id: str
    item_id: str
    rating: float
    timestamp: int | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DatasetError("user_id and item_id must be non-empty")
        if not math.isfinite(self.rating):
            raise DatasetError(f"non-finite rating {self.rating!r}")


def _split_line(line: str, fmt: str) -> list[str]:
    if fmt == "movielens_dat":
        return line.split("::")
    # generic tsv; whitespace fallback keeps hand-written fixtures readable
    parts = line.split("\t")
    return parts if len(parts) > 1 else line.split()


def load_ratings(path: str | os.PathLike, format: str = "tsv") -> list[RawRating]:
    """Read ``user, item, rating[, timestamp]`` records in file order.

    ``movielens_dat`` expects the ``::``-delimited ML-1M layout; ``tsv`` is
    tab-separated (whitespace is accepted when no tab is present).
    """
    if format not in FORMATS:
        raise DatasetError(f"unknown ratings format {format!r}; expected one of {FORMATS}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = _split_line(line, format)
            if len(parts) not in (3, 4):
                raise DatasetError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
            try:
                rating = float(parts[2])
                ts = int(float(parts[3])) if len(parts) == 4 else None
                records.append(RawRating(parts[0].strip(), parts[1].strip(), rating, ts))
            except (ValueError, DatasetError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return records


def load_attributes(path: str | os.PathLike, format: str = "tsv", column: int = 1) -> dict[str, str]:
    """Read a user profile file into ``{user_id: attribute}``.

    For ``movielens_dat`` (``UserID::Gender::Age::...``) the gender column is 1.
    """
    if format not in FORMATS:
        raise DatasetError(f"unknown attribute format {format!r}; expected one of {FORMATS}")
    profiles = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = _split_line(line, format)
            if len(parts) <= column:
                raise DatasetError(f"{path}:{lineno}: missing attribute column {column}")
            profiles[parts[0].strip()] = parts[column].strip()
    return profiles


def binarize(raw: Iterable[RawRating], threshold: float = 3.0) -> list[tuple[str, str]]:
    """Keep pairs whose rating is strictly above ``threshold``; first occurrence wins."""
    if not math.isfinite(threshold):
        raise DatasetError("threshold must be finite")
    seen = set()
    pairs = []
    for r in raw:
        if r.rating > threshold:
            key = (r.user_id, r.item_id)
            if key not in seen:
                seen.add(key)
                pairs.append(key)
    return pairs


def kcore_filter(pairs: Iterable[tuple], k: int) -> list[tuple]:
    """Iteratively drop users and items with fewer than ``k`` interactions.

    The k-core is unique, so the result does not depend on removal order.
    Input order is preserved among survivors.
    """
    if k < 1:
        raise DatasetError("k must be >= 1")
    pairs = list(dict.fromkeys(pairs))
    while True:
        ucount = defaultdict(int)
        icount = defaultdict(int)
        for u, v in pairs:
            ucount[u] += 1
            icount[v] += 1
        kept = [(u, v) for u, v in pairs if ucount[u] >= k and icount[v] >= k]
        if len(kept) == len(pairs):
            return kept
        pairs = kept


@dataclass
class Partition:
    """Raw-id pairs after splitting, before dense indexing."""

    train: list[tuple[str, str]]
    validation: list[tuple[str, str]]
    test: list[tuple[str, str]]


def _id_key(raw_id: str):
    # numeric ids sort numerically, everything else lexicographically after them
    try:
        return (0, int(raw_id), "")
    except ValueError:
        return (1, 0, raw_id)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(
    pairs: Sequence[tuple[str, str]],
    strategy: str = "ratio_80_20",
    seed: int = 0,
    scope: str = "per_user",
) -> Partition:
    """Randomly partition interactions into train/validation/test.

    With ``scope="per_user"`` every user's records are split at the ratio
    (rounded half-up); records that cannot fill the held-out splits stay in
    train. ``scope="global"`` shuffles all records together instead. Held-out
    records of users missing from train are dropped and logged.
    """
    if strategy not in SPLIT_STRATEGIES:
        raise DatasetError(f"unknown split strategy {strategy!r}")
    if not pairs:
        raise DatasetError("cannot split an empty interaction list")
    _, val_ratio, test_ratio = SPLIT_STRATEGIES[strategy]
    rng = np.random.default_rng(seed)
    pairs = list(dict.fromkeys(pairs))
    train, val, test = [], [], []

    if scope == "per_user":
        by_user = defaultdict(list)
        for u, v in pairs:
            by_user[u].append(v)
        for u in sorted(by_user, key=_id_key):
            items = sorted(by_user[u], key=_id_key)
            order = rng.permutation(len(items))
            n = len(items)
            n_test = _round_half_up(test_ratio * n)
            n_val = _round_half_up(val_ratio * n)
            if n_test + n_val >= n:
                n_test = n_val = 0
            shuffled = [items[i] for i in order]
            test += [(u, v) for v in shuffled[:n_test]]
            val += [(u, v) for v in shuffled[n_test:n_test + n_val]]
            train += [(u, v) for v in shuffled[n_test + n_val:]]
    elif scope == "global":
        ordered = sorted(pairs, key=lambda p: (_id_key(p[0]), _id_key(p[1])))
        order = rng.permutation(len(ordered))
        n = len(ordered)
        n_test = _round_half_up(test_ratio * n)
        n_val = _round_half_up(val_ratio * n)
        shuffled = [ordered[i] for i in order]
        test = shuffled[:n_test]
        val = shuffled[n_test:n_test + n_val]
        train = shuffled[n_test + n_val:]
    else:
        raise DatasetError(f"unknown split scope {scope!r}")

    train_users = {u for u, _ in train}
    for name, part in (("validation", val), ("test", test)):
        cold = [p for p in part if p[0] not in train_users]
        if cold:
            logger.info("dropping %d %s records of users absent from train", len(cold), name)
            part[:] = [p for p in part if p[0] in train_users]
    return Partition(train, val, test)


def assign_groups(
    profiles: Mapping[str, str],
    mapping: Mapping[str, int],
    users: Iterable[str] | None = None,
) -> dict[str, int]:
    """Map each user's attribute value to a group label in {0, 1}."""
    users = list(profiles) if users is None else list(users)
    labels = {}
    missing = []
    for u in users:
        attr = profiles.get(u)
        if attr is None or attr not in mapping:
            missing.append(u)
            continue
        g = int(mapping[attr])
        if g not in (0, 1):
            raise DatasetError(f"group mapping must target 0 or 1, got {g} for {attr!r}")
        labels[u] = g
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise DatasetError(f"{len(missing)} users without a mapped attribute: {shown}")
    present = set(labels.values())
    for g in (0, 1):
        if g not in present:
            raise DatasetError(f"group {g} empty")
    return labels


@dataclass
class InteractionDataset:
    """Densely indexed interactions with per-user group labels.

    Interaction arrays are ``(n, 2)`` int64 arrays of ``(user, item)`` rows.
    """

    num_users: int
    num_items: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    groups: np.ndarray
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64).reshape(-1, 2)
        self.validation = np.asarray(self.validation, dtype=np.int64).reshape(-1, 2)
        self.test = np.asarray(self.test, dtype=np.int64).reshape(-1, 2)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        self._train_csr = None

    def validate(self) -> None:
        M, N = self.num_users, self.num_items
        if M <= 0 or N <= 0:
            raise DatasetError("dataset must have at least one user and one item")
        for name in ("train", "validation", "test"):
            arr = getattr(self, name)
            if len(arr) and ((arr < 0).any() or (arr[:, 0] >= M).any() or (arr[:, 1] >= N).any()):
                raise DatasetError(f"{name} contains out-of-range indices")
        train_keys = set(self.pair_keys(self.train).tolist())
        for name in ("validation", "test"):
            keys = self.pair_keys(getattr(self, name))
            if train_keys.intersection(keys.tolist()):
                raise DatasetError(f"train and {name} overlap")
            users = set(getattr(self, name)[:, 0].tolist())
            if not users <= set(self.train[:, 0].tolist()):
                raise DatasetError(f"{name} has users absent from train")
        if self.groups.shape != (M,) or not np.isin(self.groups, (0, 1)).all():
            raise DatasetError("group labels must be a length-M vector over {0, 1}")
        for g in (0, 1):
            if not (self.groups == g).any():
                raise DatasetError(f"group {g} empty")

    def pair_keys(self, pairs: np.ndarray) -> np.ndarray:
        return pairs[:, 0] * self.num_items + pairs[:, 1]

    def train_csr(self) -> tuple[np.ndarray, np.ndarray]:
        """``(indptr, items)`` with each user's train items sorted ascending."""
        if self._train_csr is None:
            self._train_csr = _to_csr(self.train, self.num_users)
        return self._train_csr

    def user_items(self, split: str = "train") -> list[np.ndarray]:
        indptr, items = _to_csr(getattr(self, split), self.num_users)
        return [items[indptr[u]:indptr[u + 1]] for u in range(self.num_users)]

    @property
    def density(self) -> float:
        return len(self.train) / (self.num_users * self.num_items)


def _to_csr(pairs: np.ndarray, num_users: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    sorted_pairs = pairs[order]
    counts = np.bincount(sorted_pairs[:, 0], minlength=num_users)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return indptr, sorted_pairs[:, 1].copy()


def build_dataset(partition: Partition, labels: Mapping[str, int]) -> InteractionDataset:
    """Assign dense indices (sorted raw-id order) and assemble the dataset.

    Users come from the train split; items from all three splits.
    """
    users = sorted({u for u, _ in partition.train}, key=_id_key)
    items = sorted(
        {v for part in (partition.train, partition.validation, partition.test) for _, v in part},
        key=_id_key,
    )
    uidx = {u: k for k, u in enumerate(users)}
    iidx = {v: k for k, v in enumerate(items)}

    def index(part):
        return np.array([(uidx[u], iidx[v]) for u, v in part], dtype=np.int64).reshape(-1, 2)

    missing = [u for u in users if u not in labels]
    if missing:
        raise DatasetError(f"{len(missing)} users without a group label, e.g. {missing[:5]}")
    groups = np.array([labels[u] for u in users], dtype=np.int64)
    ds = InteractionDataset(
        num_users=len(users),
        num_items=len(items),
        train=index(partition.train),
        validation=index(partition.validation),
        test=index(partition.test),
        groups=groups,
        user_ids=users,
        item_ids=items,
    )
    ds.validate()
    return ds


def _write_pairs(path: Path, pairs: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, v in pairs.tolist():
            fh.write(f"{u} {v}\n")


def _read_pairs(path: Path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 'user item'")
            rows.append((int(parts[0]), int(parts[1])))
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def save_dataset(ds: InteractionDataset, out_dir: str | os.PathLike, manifest: Mapping | None = None) -> dict:
    """Write the prepared-dataset directory and return the manifest written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_pairs(out / "train.txt", ds.train)
    _write_pairs(out / "validation.txt", ds.validation)
    _write_pairs(out / "test.txt", ds.test)
    with open(out / "groups.txt", "w", encoding="utf-8", newline="\n") as fh:
        for u, g in enumerate(ds.groups.tolist()):
            fh.write(f"{u} {g}\n")
    with open(out / "user_ids.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{u}\n" for u in ds.user_ids)
    with open(out / "item_ids.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{v}\n" for v in ds.item_ids)
    info = dict(manifest or {})
    info.update(
        num_users=ds.num_users,
        num_items=ds.num_items,
        counts={"train": len(ds.train), "validation": len(ds.validation), "test": len(ds.test)},
        group_sizes={"0": int((ds.groups == 0).sum()), "1": int((ds.groups == 1).sum())},
    )
    (out / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return info


def load_dataset(data_dir: str | os.PathLike) -> tuple[InteractionDataset, dict]:
    d = Path(data_dir)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json in {d}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    groups = _read_pairs(d / "groups.txt")
    labels = np.zeros(manifest["num_users"], dtype=np.int64)
    labels[groups[:, 0]] = groups[:, 1]

    def ids(name):
        p = d / name
        return p.read_text(encoding="utf-8").splitlines() if p.exists() else []

    ds = InteractionDataset(
        num_users=manifest["num_users"],
        num_items=manifest["num_items"],
        train=_read_pairs(d / "train.txt"),
        validation=_read_pairs(d / "validation.txt"),
        test=_read_pairs(d / "test.txt"),
        groups=labels,
        user_ids=ids("user_ids.txt"),
        item_ids=ids("item_ids.txt"),
    )
    ds.validate()
    for name in ("train", "validation", "test"):
        if manifest["counts"][name] != len(getattr(ds, name)):
            raise DatasetError(f"{name} count disagrees with manifest")
    return ds, manifest
