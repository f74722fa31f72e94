"""Bi-level training: projected-Adam steps on the item noise table alternate
with Adam steps on the embeddings against the mask-mixed augmented loss.

Each outer summand covers one quadruple and four pairwise contrasts. A slot
whose item is selected by the mask swaps the real score for the fake one:

* ``u1`` positive slot: ``m[i0] * r[u1, i0~] + (1 - m[i0]) * r[u1, i1]`` vs ``r[u1, j1]``
* ``u0`` positive slot: ``m[i1] * r[u0, i1~] + (1 - m[i1]) * r[u0, i0]`` vs ``r[u0, j0]``
* ``u1`` negative slot: ``r[u1, i1]`` vs ``m[j0] * r[u1, j0~] + (1 - m[j0]) * r[u1, j1]``
* ``u0`` negative slot: ``r[u0, i0]`` vs ``m[j1] * r[u0, j1~] + (1 - m[j1]) * r[u0, j0]``

Epochs whose mask selects nothing (warmup, ``fda=False``, ratio 0) run
plain BPR over every train positive instead, since the masked objective
then only repeats the real triples.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .augment import (
    Contrast,
    MaskVector,
    Perturbations,
    QuadrupleBatch,
    contrast_gradients,
    init_perturbations,
    inner_step,
    sample_mask,
    sample_quadruples,
)
from .backbone import Adam, EmbeddingTable, GraphPropagation, bpr_gradients, bpr_loss, init_embeddings
from .dataset import InteractionDataset
from .metrics import evaluate
from .sampling import TrainIndex
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"non-finite {what} in epoch {epoch}")
        self.epoch = epoch


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 2048
    lr: float = 1e-3
    inner_lr: float = 1e-3
    inner_steps: int = 1
    mask_ratio: float = 0.3
    epsilon: float = 0.05
    warmup_epochs: int = 5
    seed: int = 0
    dim: int = 64
    backbone: str = "mf"
    graph_layers: int = 1
    graph_combine: str = "sum"
    weight_decay: float = 0.0
    fda: bool = True
    hypothesis1: bool = True
    hypothesis2: bool = True
    mask_schedule: str = "epoch"
    reinit_perturbations: bool = False
    quadruples_per_epoch: int | None = None
    eval_every: int = 10
    ks: tuple = (10, 20, 30, 40, 50)
    select_k: int = 20

    def errors(self) -> list[str]:
        errs = []
        for name in ("epochs", "batch_size", "inner_steps", "dim"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        for name in ("lr", "inner_lr"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be positive")
        if not 0 <= self.mask_ratio <= 1:
            errs.append("mask_ratio must lie in [0, 1]")
        if self.epsilon < 0:
            errs.append("epsilon must be non-negative")
        if not 0 <= self.warmup_epochs <= self.epochs:
            errs.append("warmup_epochs must lie in [0, epochs]")
        if self.backbone not in ("mf", "graph"):
            errs.append("backbone must be 'mf' or 'graph'")
        if self.graph_layers < 0:
            errs.append("graph_layers must be >= 0")
        if self.graph_combine not in ("sum", "concat"):
            errs.append("graph_combine must be 'sum' or 'concat'")
        if self.mask_schedule not in ("epoch", "batch"):
            errs.append("mask_schedule must be 'epoch' or 'batch'")
        if self.weight_decay < 0:
            errs.append("weight_decay must be non-negative")
        if self.eval_every < 0:
            errs.append("eval_every must be >= 0")
        if not self.ks or any(int(k) < 1 for k in self.ks):
            errs.append("ks must be a non-empty list of positive integers")
        if self.quadruples_per_epoch is not None and self.quadruples_per_epoch < 1:
            errs.append("quadruples_per_epoch must be >= 1")
        return errs

    def validate(self) -> None:
        errs = self.errors()
        if errs:
            raise ConfigError("invalid training config:\n  " + "\n  ".join(errs))

    @property
    def hypotheses(self) -> tuple[bool, bool]:
        return (self.hypothesis1, self.hypothesis2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ks"] = list(self.ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "ks" in d:
            d["ks"] = tuple(int(k) for k in d["ks"])
        return cls(**d)


@dataclass
class TrainLog:
    ks: tuple
    records: list[dict] = field(default_factory=list)

    def columns(self) -> list[str]:
        cols = ["epoch", "outer_loss", "inner_loss"]
        for k in self.ks:
            cols += [f"hr@{k}", f"ndcg@{k}", f"dp@{k}", f"eo@{k}"]
        return cols

    def append(self, record: dict) -> None:
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("log records must be appended in epoch order")
        self.records.append(record)

    def write_csv(self, path: str | os.PathLike) -> None:
        cols = self.columns()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for rec in self.records:
                w.writerow(["" if rec.get(c) is None else repr(rec[c]) for c in cols])

    @classmethod
    def read_csv(cls, path: str | os.PathLike, ks) -> "TrainLog":
        log = cls(tuple(ks))
        with open(path, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                rec = {}
                for c, val in row.items():
                    if val == "":
                        rec[c] = None
                    elif c == "epoch":
                        rec[c] = int(val)
                    else:
                        rec[c] = float(val)
                log.records.append(rec)
        return log


def outer_contrasts(q: QuadrupleBatch, mask: np.ndarray, hypotheses=(True, True),
                    dtype=np.float32) -> list[Contrast]:
    dtype = np.dtype(dtype).type
    n = len(q)
    one = np.ones(n, dtype=dtype)
    zero = np.zeros(n, dtype=dtype)
    on1 = dtype(1.0) if hypotheses[0] else dtype(0.0)
    on2 = dtype(1.0) if hypotheses[1] else dtype(0.0)
    m_i0 = mask[q.i0].astype(dtype) * on1
    m_i1 = mask[q.i1].astype(dtype) * on1
    m_j0 = mask[q.j0].astype(dtype) * on2
    m_j1 = mask[q.j1].astype(dtype) * on2
    return [
        Contrast(q.u1, [q.i0, q.i1, q.j1], [m_i0, one - m_i0, -one], [one, zero, zero]),
        Contrast(q.u0, [q.i1, q.i0, q.j0], [m_i1, one - m_i1, -one], [one, zero, zero]),
        Contrast(q.u1, [q.i1, q.j0, q.j1], [one, -m_j0, -(one - m_j0)], [zero, one, zero]),
        Contrast(q.u0, [q.i0, q.j1, q.j0], [one, -m_j1, -(one - m_j1)], [zero, one, zero]),
    ]


def outer_loss(E: EmbeddingTable, delta: np.ndarray, mask: np.ndarray, q: QuadrupleBatch,
               hypotheses=(True, True)) -> float:
    """Augmented objective summed over the batch."""
    if len(q) == 0:
        raise ValueError("empty batch")
    loss, *_ = contrast_gradients(E, delta, outer_contrasts(q, mask, hypotheses, E.user.dtype),
                                  wrt_embeddings=False, wrt_delta=False)
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite outer loss")
    return loss


def outer_gradients(E: EmbeddingTable, delta: np.ndarray, mask: np.ndarray, q: QuadrupleBatch,
                    hypotheses=(True, True)):
    """``(loss, g_user, g_item)`` with the noise held constant.

    Item gradients flow through both ``e_v`` and ``e_v + delta_v``.
    """
    loss, g_user, g_item, _ = contrast_gradients(
        E, delta, outer_contrasts(q, mask, hypotheses, E.user.dtype), wrt_delta=False)
    return loss, g_user, g_item


@dataclass
class TrainState:
    embeddings: EmbeddingTable
    perturbations: Perturbations
    mask: MaskVector
    outer_opt: Adam
    inner_opt: Adam
    log: TrainLog
    epoch: int = 0
    best_epoch: int | None = None
    best_score: float | None = None
    best_embeddings: EmbeddingTable | None = None


class Trainer:
    def __init__(self, dataset: InteractionDataset, config: TrainConfig):
        config.validate()
        dataset.validate()
        self.dataset = dataset
        self.config = config
        self.index = TrainIndex(dataset)
        self.graph = None
        if config.backbone == "graph":
            self.graph = GraphPropagation(dataset.train, dataset.num_users, dataset.num_items,
                                          config.graph_layers, config.graph_combine)
        if config.quadruples_per_epoch is None:
            self.quads_per_epoch = max(1, math.ceil(len(dataset.train) / 2))
        else:
            self.quads_per_epoch = config.quadruples_per_epoch

    @property
    def model_dim(self) -> int:
        return self.graph.out_dim(self.config.dim) if self.graph else self.config.dim

    def init_state(self) -> TrainState:
        cfg, ds = self.config, self.dataset
        E = init_embeddings(ds.num_users, ds.num_items, cfg.dim, derive_seed(cfg.seed, "embeddings"))
        pert = init_perturbations(ds.num_items, self.model_dim, cfg.epsilon,
                                  derive_seed(cfg.seed, "perturbations"))
        mask = MaskVector(np.zeros(ds.num_items, dtype=bool), 0)
        return TrainState(
            embeddings=E,
            perturbations=pert,
            mask=mask,
            outer_opt=Adam(E.params(), lr=cfg.lr, weight_decay=cfg.weight_decay),
            inner_opt=Adam([pert.delta], lr=cfg.inner_lr),
            log=TrainLog(tuple(cfg.ks)),
        )

    def model_embeddings(self, E: EmbeddingTable) -> EmbeddingTable:
        return self.graph.forward(E) if self.graph else E

    def _apply(self, state: TrainState, g_user, g_item) -> None:
        if self.graph:
            g_user, g_item = self.graph.backward(g_user, g_item)
        state.outer_opt.step(state.embeddings.params(), [g_user, g_item])

    def fda_active(self, epoch: int) -> bool:
        cfg = self.config
        return (cfg.fda and epoch >= cfg.warmup_epochs and cfg.mask_ratio > 0
                and any(cfg.hypotheses)
                and math.floor(cfg.mask_ratio * self.dataset.num_items) > 0)

    def _plain_epoch(self, state: TrainState, epoch: int) -> tuple[float, None]:
        cfg = self.config
        triples = self.index.epoch_triples(rng_for(cfg.seed, "triples", epoch))
        total = 0.0
        for start in range(0, len(triples), cfg.batch_size):
            batch = triples[start:start + cfg.batch_size]
            F = self.model_embeddings(state.embeddings)
            loss = bpr_loss(F, batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            self._apply(state, *bpr_gradients(F, batch))
            total += loss
        return total / len(triples), None

    def _fda_epoch(self, state: TrainState, epoch: int) -> tuple[float, float]:
        cfg, N = self.config, self.dataset.num_items
        quads = sample_quadruples(self.index, self.quads_per_epoch, rng_for(cfg.seed, "quadruples", epoch))
        if cfg.reinit_perturbations:
            state.perturbations = init_perturbations(N, self.model_dim, cfg.epsilon,
                                                     derive_seed(cfg.seed, "perturbations", epoch))
        if cfg.mask_schedule == "epoch":
            state.mask = sample_mask(N, cfg.mask_ratio, rng_for(cfg.seed, "mask", epoch))
        outer_total = inner_total = 0.0
        inner_count = 0
        for b, start in enumerate(range(0, len(quads), cfg.batch_size)):
            q = quads[start:start + cfg.batch_size]
            if cfg.mask_schedule == "batch":
                state.mask = sample_mask(N, cfg.mask_ratio, rng_for(cfg.seed, "mask", epoch, b))
            F = self.model_embeddings(state.embeddings)
            for _ in range(cfg.inner_steps):
                try:
                    inner_total += inner_step(F, state.perturbations, q, state.inner_opt, cfg.hypotheses)
                except FloatingPointError:
                    raise TrainingDiverged(epoch, "inner loss") from None
                inner_count += len(q)
            loss, g_user, g_item = outer_gradients(F, state.perturbations.delta, state.mask.m, q,
                                                   cfg.hypotheses)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch)
            self._apply(state, g_user, g_item)
            outer_total += loss
        return outer_total / len(quads), inner_total / max(inner_count, 1)

    def eval_split(self) -> str:
        return "validation" if len(self.dataset.validation) else "test"

    def run_epoch(self, state: TrainState) -> dict:
        epoch = state.epoch
        if self.fda_active(epoch):
            outer, inner = self._fda_epoch(state, epoch)
        else:
            state.mask = MaskVector(np.zeros(self.dataset.num_items, dtype=bool), 0)
            outer, inner = self._plain_epoch(state, epoch)
        record = {"epoch": epoch, "outer_loss": outer, "inner_loss": inner}
        cfg = self.config
        last = epoch + 1 == cfg.epochs
        if (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0) or last:
            split = self.eval_split()
            res = evaluate(self.model_embeddings(state.embeddings), self.dataset, cfg.ks, split)
            for k in cfg.ks:
                for name, val in res[k].items():
                    record[f"{name}@{k}"] = val
            if split == "validation":
                key = cfg.select_k if cfg.select_k in res else max(res)
                score = res[key]["ndcg"]
                if state.best_score is None or score > state.best_score:
                    state.best_score = score
                    state.best_epoch = epoch
                    state.best_embeddings = state.embeddings.copy()
        state.log.append(record)
        state.epoch = epoch + 1
        return record

    def selected_embeddings(self, state: TrainState) -> EmbeddingTable:
        base = state.best_embeddings if state.best_embeddings is not None else state.embeddings
        return self.model_embeddings(base)


def train(dataset: InteractionDataset, config: TrainConfig, checkpoint_dir: str | os.PathLike | None = None,
          resume: bool = False, stop_after: int | None = None, dataset_manifest: dict | None = None):
    """Train and return ``(embeddings, log)``.

    With ``checkpoint_dir`` the state is written after every epoch; ``resume``
    continues from it. ``stop_after`` ends the run early after that many
    completed epochs (the returned state is then the interrupted one).
    """
    trainer = Trainer(dataset, config)
    if resume:
        if checkpoint_dir is None:
            raise ValueError("resume requires a checkpoint directory")
        state = load_checkpoint(checkpoint_dir, trainer)
    else:
        state = trainer.init_state()
    end = config.epochs if stop_after is None else min(config.epochs, stop_after)
    while state.epoch < end:
        rec = trainer.run_epoch(state)
        logger.info("epoch %d outer %.5f inner %s", rec["epoch"], rec["outer_loss"], rec["inner_loss"])
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, trainer, state, dataset_manifest)
    return trainer.selected_embeddings(state), state.log


# --- checkpoint files -------------------------------------------------------

def write_array_file(path: Path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    """JSON header line, then each array as little-endian float32, row-major."""
    header = dict(header)
    header.update(byte_order="little-endian", dtype="float32",
                  arrays=[[name, list(arr.shape)] for name, arr in arrays])
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_array_file(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode("utf-8")) if nl >= 0 else None
    except (UnicodeDecodeError, json.JSONDecodeError):
        header = None
    if not isinstance(header, dict) or "arrays" not in header:
        raise CheckpointError(f"{path}: corrupted or missing header")
    if header.get("byte_order") != "little-endian" or header.get("dtype") != "float32":
        raise CheckpointError(f"{path}: unsupported byte order or scalar type")
    payload = raw[nl + 1:]
    expected = sum(4 * int(np.prod(shape)) for _, shape in header["arrays"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    arrays = {}
    offset = 0
    for name, shape in header["arrays"]:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * n
    return header, arrays


def save_checkpoint(checkpoint_dir, trainer: Trainer, state: TrainState, dataset_manifest: dict | None = None) -> None:
    out = Path(checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg, ds = trainer.config, trainer.dataset
    common = {"version": CHECKPOINT_VERSION, "M": ds.num_users, "N": ds.num_items, "d": cfg.dim,
              "epoch": state.epoch, "step": state.outer_opt.t, "backbone": cfg.backbone}
    E = state.embeddings
    write_array_file(out / "embeddings.bin", {**common, "kind": "embeddings"},
                     [("user", E.user), ("item", E.item)])
    pert = state.perturbations
    write_array_file(out / "perturbations.bin",
                     {**common, "kind": "perturbations", "epsilon": pert.epsilon, "capacity": state.mask.capacity},
                     [("delta", pert.delta), ("mask", state.mask.m.astype(np.float32))])
    oo, io = state.outer_opt, state.inner_opt
    write_array_file(out / "optimizer.bin",
                     {**common, "kind": "optimizer", "outer_t": oo.t, "inner_t": io.t},
                     [("outer_m_user", oo.m[0]), ("outer_m_item", oo.m[1]),
                      ("outer_v_user", oo.v[0]), ("outer_v_item", oo.v[1]),
                      ("inner_m_delta", io.m[0]), ("inner_v_delta", io.v[0])])
    if state.best_embeddings is not None:
        B = state.best_embeddings
        write_array_file(out / "best_embeddings.bin", {**common, "kind": "embeddings", "epoch": state.best_epoch},
                         [("user", B.user), ("item", B.item)])
    state.log.write_csv(out / "log.csv")
    manifest = {
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "config": cfg.to_dict(),
        "dataset": {"num_users": ds.num_users, "num_items": ds.num_items,
                    "counts": {"train": len(ds.train), "validation": len(ds.validation), "test": len(ds.test)}},
        "best_epoch": state.best_epoch,
        "best_score": state.best_score,
    }
    if dataset_manifest is not None:
        manifest["dataset"]["seed"] = dataset_manifest.get("seed")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(checkpoint_dir) -> dict:
    path = Path(checkpoint_dir) / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {path}: {exc}") from None


def check_compatible(manifest: dict, dataset: InteractionDataset) -> None:
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
    info = manifest.get("dataset", {})
    if (info.get("num_users"), info.get("num_items")) != (dataset.num_users, dataset.num_items):
        raise CheckpointError(
            f"checkpoint is for M={info.get('num_users')}, N={info.get('num_items')}; "
            f"dataset has M={dataset.num_users}, N={dataset.num_items}")
    counts = info.get("counts")
    if counts and counts.get("train") != len(dataset.train):
        raise CheckpointError("checkpoint train count disagrees with dataset")


def _check_header(header: dict, trainer: Trainer, path) -> None:
    ds, cfg = trainer.dataset, trainer.config
    want = {"M": ds.num_users, "N": ds.num_items, "d": cfg.dim, "backbone": cfg.backbone,
            "version": CHECKPOINT_VERSION}
    for key, val in want.items():
        if header.get(key) != val:
            raise CheckpointError(f"{path}: header {key}={header.get(key)!r}, expected {val!r}")


def load_checkpoint(checkpoint_dir, trainer: Trainer) -> TrainState:
    """Rebuild the full training state; every file is validated before anything is used."""
    d = Path(checkpoint_dir)
    manifest = read_manifest(d)
    check_compatible(manifest, trainer.dataset)
    loaded = {}
    for name in ("embeddings", "perturbations", "optimizer"):
        header, arrays = read_array_file(d / f"{name}.bin")
        _check_header(header, trainer, d / f"{name}.bin")
        loaded[name] = (header, arrays)
    best = None
    if (d / "best_embeddings.bin").exists():
        header, arrays = read_array_file(d / "best_embeddings.bin")
        _check_header(header, trainer, d / "best_embeddings.bin")
        best = EmbeddingTable(arrays["user"], arrays["item"])
    epochs = {h["epoch"] for h, _ in loaded.values()}
    if epochs != {manifest["epoch"]}:
        raise CheckpointError("checkpoint files come from different epochs")

    cfg = trainer.config
    eh, ea = loaded["embeddings"]
    E = EmbeddingTable(ea["user"], ea["item"])
    ph, pa = loaded["perturbations"]
    if pa["delta"].shape != (trainer.dataset.num_items, trainer.model_dim):
        raise CheckpointError("perturbation table has the wrong shape")
    pert = Perturbations(pa["delta"], float(ph["epsilon"]))
    mask = MaskVector(pa["mask"].astype(bool), int(ph["capacity"]))
    oh, oa = loaded["optimizer"]
    outer = Adam(E.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    outer.m = [oa["outer_m_user"], oa["outer_m_item"]]
    outer.v = [oa["outer_v_user"], oa["outer_v_item"]]
    outer.t = int(oh["outer_t"])
    inner = Adam([pert.delta], lr=cfg.inner_lr)
    inner.m = [oa["inner_m_delta"]]
    inner.v = [oa["inner_v_delta"]]
    inner.t = int(oh["inner_t"])
    log = TrainLog.read_csv(d / "log.csv", cfg.ks)
    if len(log.records) != manifest["epoch"]:
        raise CheckpointError("log.csv length disagrees with the checkpoint epoch")
    return TrainState(E, pert, mask, outer, inner, log, epoch=manifest["epoch"],
                      best_epoch=manifest.get("best_epoch"), best_score=manifest.get("best_score"),
                      best_embeddings=best)


def load_model(checkpoint_dir, dataset: InteractionDataset) -> EmbeddingTable:
    """Embeddings to evaluate: the validation-selected ones when present, else the latest."""
    d = Path(checkpoint_dir)
    manifest = read_manifest(d)
    check_compatible(manifest, dataset)
    config = TrainConfig.from_dict(manifest["config"])
    trainer = Trainer(dataset, config)
    name = "best_embeddings.bin" if (d / "best_embeddings.bin").exists() else "embeddings.bin"
    header, arrays = read_array_file(d / name)
    _check_header(header, trainer, d / name)
    return trainer.model_embeddings(EmbeddingTable(arrays["user"], arrays["item"]))
