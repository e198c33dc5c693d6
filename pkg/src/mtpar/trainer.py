"""Training engine: loss, AdamW, serial / MTL-base / MTL-par steps, evaluation.

The global objective of one step is the unweighted mean over ranks of the
per-rank batch losses. Every mode computes the gradient of that objective:

* serial: one process evaluates all per-rank batches in rank order.
* base: one global mean-allreduce over the concatenated shared+head gradient.
* taskpar: shared gradient mean-allreduced over the global group; head-g
  gradient mean-allreduced over sub-group g, then scaled by M / world so it is
  the head's gradient of the same global objective.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from mtpar import ContractError, data
from mtpar.model import (
    GradientBuffer,
    GraphBatch,
    ModelConfig,
    ModelPartition,
    Prediction,
    backward,
    forward,
    save_checkpoint,
)

log = logging.getLogger(__name__)

MODES = ("serial", "base", "taskpar")


@dataclass
class TrainConfig:
    mode: str = "serial"
    lr: float = 0.001
    batch_local: int = 128
    epochs: int = 10
    patience: int = 10
    w_energy: float = 1.0
    w_force: float = 1.0
    seed: int = 0
    precision: str = "float64"
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    layers: int = 2
    hidden: int = 32
    head_width: int = 32
    head_depth: int = 3
    cutoff: float = 5.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        if self.batch_local < 1:
            raise ContractError("batch_local must be >= 1")
        if self.w_energy < 0 or self.w_force < 0 or (self.w_energy == 0 and self.w_force == 0):
            raise ContractError("loss weights must be non-negative and not both zero")
        if self.precision not in ("float64", "float32"):
            raise ContractError("precision must be float64 or float32")

    def model_config(self, n_heads: int) -> ModelConfig:
        return ModelConfig(self.layers, self.hidden, self.head_width, self.head_depth, n_heads, self.cutoff)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Plain ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (t.strip() for t in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            kw[key] = {"int": int, "float": float}.get(types[key], str)(value)
        return cls(**kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


# -- loss -----------------------------------------------------------------------


def loss(pred: Prediction, batch: GraphBatch, w_energy: float = 1.0, w_force: float = 1.0):
    """Mean over graphs of ``w_E (E^ - E)^2 + w_F mean_i |F^_i - F_i|^2``.

    Returns (loss, d_energy, d_forces).
    """
    if pred.energy.shape != batch.energy.shape or pred.forces.shape != batch.forces.shape:
        raise ContractError("prediction and label shapes differ")
    G = batch.n_graphs
    n_of_node = batch.counts[batch.node_graph].astype(np.float64)
    de = pred.energy - batch.energy
    df = pred.forces - batch.forces
    per_node = np.sum(df * df, axis=1) / n_of_node
    force_term = np.bincount(batch.node_graph, weights=per_node, minlength=G)
    value = float(np.mean(w_energy * de * de + w_force * force_term))
    d_energy = 2.0 * w_energy * de / G
    d_forces = 2.0 * w_force * df / (n_of_node[:, None] * G)
    return value, d_energy, d_forces


class Phases:
    """Lap timer: each ``lap(name)`` charges the time since the previous lap to ``name``,
    so the phases tile the timed interval."""

    def __init__(self):
        self.seconds: dict[str, float] = {}
        self._last = time.perf_counter()

    def start(self) -> None:
        self._last = time.perf_counter()

    def lap(self, name: str) -> None:
        now = time.perf_counter()
        self.seconds[name] = self.seconds.get(name, 0.0) + now - self._last
        self._last = now


class _NullPhases(Phases):
    def lap(self, name: str) -> None:
        pass


_NO_PHASES = _NullPhases()


def loss_and_grad(part: ModelPartition, batch: GraphBatch, cfg: TrainConfig, phases: Phases = _NO_PHASES):
    pred, cache = forward(part, batch)
    value, de, df = loss(pred, batch, cfg.w_energy, cfg.w_force)
    phases.lap("forward")
    if not math.isfinite(value):
        raise FloatingPointError(
            f"non-finite loss {value} on a batch of {batch.n_graphs} graphs "
            f"(datasets {np.unique(batch.dataset_ids).tolist()}); max |param| {np.max(np.abs(part.flat()))}"
        )
    g = backward(part, cache, de, df)
    phases.lap("backward")
    return value, g


# -- optimizer ------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, p: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(p), np.zeros_like(p), 0)


def adamw_update(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One in-place AdamW step (decoupled weight decay, bias-corrected moments)."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ContractError("AdamW shapes differ")
    state.t += 1
    params *= 1.0 - lr * weight_decay
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


@dataclass
class Optimizer:
    """AdamW state for every block a rank holds."""

    cfg: TrainConfig
    shared: AdamState
    heads: dict[int, AdamState] = field(default_factory=dict)

    @classmethod
    def for_model(cls, part: ModelPartition, cfg: TrainConfig) -> "Optimizer":
        return cls(cfg, AdamState.zeros_like(part.shared), {k: AdamState.zeros_like(v) for k, v in part.heads.items()})

    def _step(self, p, g, st):
        c = self.cfg
        adamw_update(p, g, st, c.lr, c.beta1, c.beta2, c.eps, c.weight_decay)
        if c.precision == "float32":
            # float32 storage: arithmetic stays in double, stored weights are rounded
            p[...] = p.astype(np.float32)

    def step(self, part: ModelPartition, grads: GradientBuffer) -> None:
        self._step(part.shared, grads.shared, self.shared)
        for k, g in grads.heads.items():
            self._step(part.heads[k], g, self.heads[k])


# -- steps ----------------------------------------------------------------------


def serial_gradients(part: ModelPartition, batches: list[GraphBatch], cfg: TrainConfig, phases: Phases = _NO_PHASES):
    """Gradient of mean_r loss(batch_r), accumulated in rank order."""
    total, acc = 0.0, None
    for b in batches:
        value, g = loss_and_grad(part, b, cfg, phases)
        total += value
        if acc is None:
            acc = g
        else:
            acc.shared += g.shared
            for k in acc.heads:
                acc.heads[k] += g.heads[k]
    n = len(batches)
    acc.shared /= n
    for k in acc.heads:
        acc.heads[k] /= n
    return total / n, acc


def train_step_serial(
    part: ModelPartition, opt: Optimizer, batches: list[GraphBatch], cfg: TrainConfig, phases: Phases = _NO_PHASES
) -> float:
    value, g = serial_gradients(part, batches, cfg, phases)
    opt.step(part, g)
    phases.lap("optimizer")
    return value


def train_step_base(
    ctx, part: ModelPartition, opt: Optimizer, batch: GraphBatch, cfg: TrainConfig, phases: Phases = _NO_PHASES
) -> float:
    """Full replica per rank; one global mean-allreduce of every gradient."""
    if len(part.heads) != part.cfg.n_heads:
        raise ContractError("base mode needs every head on every rank")
    value, g = loss_and_grad(part, batch, cfg, phases)
    flat = ctx.world.allreduce_mean(g.flat(), category="encoder_sync")
    g = _unflatten(flat, part)
    phases.lap("backward")
    opt.step(part, g)
    phases.lap("optimizer")
    return value


def train_step_taskpar(
    ctx, part: ModelPartition, opt: Optimizer, batch: GraphBatch, cfg: TrainConfig, phases: Phases = _NO_PHASES
) -> float:
    """Shared block + head g on this rank; 2D gradient sync (global, then sub-group)."""
    g_id = ctx.group_id
    if list(part.heads) != [g_id]:
        raise ContractError(f"rank in group {g_id} must hold exactly head {g_id}")
    if np.any(batch.dataset_ids != g_id):
        raise ContractError(f"batch for group {g_id} contains dataset ids {np.unique(batch.dataset_ids).tolist()}")
    value, g = loss_and_grad(part, batch, cfg, phases)
    head = ctx.group.allreduce_mean(g.heads[g_id], category="head_sync")
    head *= ctx.mesh.replicas / ctx.mesh.world_size
    shared = ctx.world.allreduce_mean(g.shared, category="encoder_sync")
    phases.lap("backward")
    opt.step(part, GradientBuffer(shared, {g_id: head}))
    phases.lap("optimizer")
    return value


def local_partition(ctx, cfg: TrainConfig, mcfg: ModelConfig) -> ModelPartition:
    """The blocks this rank holds, initialised identically on every replica."""
    heads = [ctx.group_id] if cfg.mode == "taskpar" else None
    return ModelPartition.init(mcfg, cfg.seed, heads=heads)


def replay_steps(ctx, cfg: TrainConfig, mcfg: ModelConfig, steps: list[list[list]]) -> ModelPartition:
    """Train on a fixed assignment: ``steps[t][r]`` is rank r's sample list at step t."""
    part = local_partition(ctx, cfg, mcfg)
    opt = Optimizer.for_model(part, cfg)
    step_fn = train_step_taskpar if cfg.mode == "taskpar" else train_step_base
    for per_rank in steps:
        step_fn(ctx, part, opt, GraphBatch.from_samples(per_rank[ctx.rank], mcfg.cutoff), cfg)
    return part


def replay_serial(cfg: TrainConfig, mcfg: ModelConfig, steps: list[list[list]]) -> ModelPartition:
    """Single-process oracle for :func:`replay_steps`: mean of the per-rank losses."""
    part = ModelPartition.init(mcfg, cfg.seed)
    opt = Optimizer.for_model(part, cfg)
    for per_rank in steps:
        train_step_serial(part, opt, [GraphBatch.from_samples(s, mcfg.cutoff) for s in per_rank], cfg)
    return part


def _unflatten(flat: np.ndarray, part: ModelPartition) -> GradientBuffer:
    n = part.shared.size
    out = GradientBuffer(flat[:n].copy(), {})
    off = n
    for k in sorted(part.heads):
        sz = part.heads[k].size
        out.heads[k] = flat[off : off + sz].copy()
        off += sz
    return out


# -- evaluation / early stopping ------------------------------------------------


def early_stop(history: list[float], patience: int = 10, rel_tol: float = 1e-6) -> bool:
    """True once ``patience`` consecutive epochs failed to improve the best loss
    by at least ``rel_tol`` (relative)."""
    if not history:
        raise ContractError("early_stop needs a non-empty history")
    best = history[0]
    stale = 0
    for v in history[1:]:
        if v < best - rel_tol * abs(best):
            best = v
            stale = 0
        else:
            stale += 1
    return stale >= patience


@dataclass
class MAERow:
    dataset: int
    mae_energy: float
    mae_force: float
    n_graphs: int


def evaluate(part: ModelPartition, samples_by_dataset: dict, head_for=None, batch_size: int = 256) -> list[MAERow]:
    """MAE of energy-per-atom and force components for each dataset.

    ``head_for`` maps dataset -> head to use (default: the dataset's own head).
    """
    rows = []
    for d in sorted(samples_by_dataset):
        samples = samples_by_dataset[d]
        k = d if head_for is None else head_for(d)
        e_abs = f_abs = 0.0
        n_f = 0
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            b = GraphBatch.from_samples(chunk, part.cfg.cutoff)
            b = replace(b, dataset_ids=np.full_like(b.dataset_ids, k))
            pred, _ = forward(part, b)
            e_abs += float(np.sum(np.abs(pred.energy - b.energy)))
            f_abs += float(np.sum(np.abs(pred.forces - b.forces)))
            n_f += b.forces.size
        rows.append(MAERow(d, e_abs / max(len(samples), 1), f_abs / max(n_f, 1), len(samples)))
    return rows


def write_mae_csv(table: dict[str, list[MAERow]], path) -> None:
    """Rows are models, columns are datasets (energy and force MAE)."""
    datasets = sorted({r.dataset for rows in table.values() for r in rows})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model"] + [f"mae_energy_{d}" for d in datasets] + [f"mae_force_{d}" for d in datasets])
        for name, rows in table.items():
            by = {r.dataset: r for r in rows}
            w.writerow([name] + [by[d].mae_energy for d in datasets] + [by[d].mae_force for d in datasets])


def per_graph_errors(pred: Prediction, batch: GraphBatch, cfg: TrainConfig) -> np.ndarray:
    """Per graph: [loss, |E err|, sum |F err| over components, force components]."""
    de = pred.energy - batch.energy
    df = pred.forces - batch.forces
    G = batch.n_graphs
    counts = batch.counts.astype(np.float64)
    f_sq = np.bincount(batch.node_graph, weights=np.sum(df * df, axis=1), minlength=G) / counts
    f_abs = np.bincount(batch.node_graph, weights=np.sum(np.abs(df), axis=1), minlength=G)
    return np.stack([cfg.w_energy * de * de + cfg.w_force * f_sq, np.abs(de), f_abs, 3 * counts], axis=1)


# -- distributed run --------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: dict[int, float]
    val_mae_energy: dict[int, float]
    val_mae_force: dict[int, float]
    steps: int
    graphs: int  # graphs processed by this rank
    phases: dict[str, float]
    total: float  # seconds in the training steps (validation excluded)

    @property
    def val_total(self) -> float:
        return float(np.mean(list(self.val_loss.values())))


@dataclass
class RunResult:
    rank: int
    epochs: list[EpochRecord]
    file_opens_in_training: int
    params: np.ndarray | None = None  # flat parameters, rank 0 only
    stopped_early: bool = False


def split_indices(counts: dict[int, int], fraction: float, seed: int) -> tuple[dict, dict]:
    """Seeded per-dataset train/validation split (sorted index arrays)."""
    train, val = {}, {}
    for d, n in sorted(counts.items()):
        perm = np.random.default_rng([seed, d, 7]).permutation(n)
        n_val = int(round(fraction * n)) if n > 1 else 0
        val[d] = np.sort(perm[:n_val])
        train[d] = np.sort(perm[n_val:])
    return train, val


def _validate(ctx, part: ModelPartition, dpart, val_idx: dict, cfg: TrainConfig, datasets: list[int]) -> np.ndarray:
    """Globally summed [loss, |dE|, |dF|, n_force, n_graphs] per dataset, from local shards only."""
    from mtpar.data import decode_record

    acc = np.zeros((len(datasets), 5))
    for row, d in enumerate(datasets):
        if d not in dpart.shards:
            continue
        a, b = dpart.shards[d]
        # replicas of a base world hold every dataset's shard; count each sample once
        mine = [int(i) for i in val_idx[d] if a <= i < b]
        for lo in range(0, len(mine), 256):
            chunk = [decode_record(dpart.local_record(d, i))[0] for i in mine[lo : lo + 256]]
            batch = GraphBatch.from_samples(chunk, part.cfg.cutoff)
            pred, _ = forward(part, batch)
            e = per_graph_errors(pred, batch, cfg)
            acc[row, :4] += e.sum(axis=0)
            acc[row, 4] += len(chunk)
    return ctx.world.allreduce_sum(acc.ravel(), "control").reshape(acc.shape)


def _gather_full(ctx, part: ModelPartition) -> ModelPartition | None:
    """Assemble the complete model on rank 0 (taskpar ranks hold one head each)."""
    if len(part.heads) == part.cfg.n_heads:
        return part if ctx.rank == 0 else None
    (g,) = part.heads
    mine = (g, part.heads[g]) if ctx.slot == 0 else None
    got = ctx.world.gather_objects(mine, root=0)
    if ctx.rank != 0:
        return None
    return ModelPartition(part.cfg, part.shared.copy(), {k: v for k, v in (x for x in got if x is not None)})


def run_rank(ctx, files: list, cfg: TrainConfig, out=None, metrics=None, max_steps: int | None = None,
             return_params: bool = False, validate: bool = True) -> RunResult:
    """One rank's training run over the sharded in-memory corpus.

    ``out`` receives the checkpoint and ``metrics`` the per-epoch CSV (rank 0
    writes both). ``max_steps`` caps steps per epoch. With ``validate=False``
    epochs are pure training (no validation, no early stopping).
    """
    from mtpar.datastore import DataServer, Fetcher, load_shards, shuffle_epoch

    mode = "base" if cfg.mode == "serial" else cfg.mode
    if cfg.mode == "serial" and ctx.mesh.world_size != 1:
        raise ContractError("serial mode runs on a 1x1 mesh")
    dpart = load_shards(files, ctx.mesh, ctx.rank, mode)
    # in-process worlds share the counter, so every rank must be done loading
    ctx.world.barrier()
    opens_after_load = data.FILE_OPENS
    datasets = sorted(dpart.counts)
    mcfg = cfg.model_config(len(datasets))
    part = local_partition(ctx, replace(cfg, mode=mode), mcfg)
    opt = Optimizer.for_model(part, cfg)
    train_idx, val_idx = split_indices(dpart.counts, cfg.val_fraction, cfg.seed)
    server = DataServer(ctx, dpart)
    fetcher = Fetcher(ctx, dpart)
    records: list[EpochRecord] = []
    history: list[float] = []
    stopped = False
    writer = fh = None
    if metrics is not None and ctx.rank == 0:
        fh = open(metrics, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "train_loss", "val_loss"]
            + [f"val_loss_{d}" for d in datasets]
            + [f"mae_energy_{d}" for d in datasets]
            + [f"mae_force_{d}" for d in datasets]
        )
    try:
        for epoch in range(cfg.epochs):
            t_epoch = time.perf_counter()
            phases = Phases()
            phases.start()
            plan = shuffle_epoch(dpart, cfg.seed * 100_003 + epoch, cfg.batch_local, train_idx)
            steps = plan.steps if max_steps is None else min(plan.steps, max_steps)
            if steps == 0:
                raise ContractError(f"no complete batch of {cfg.batch_local} per rank in the training split")
            loss_sum, graphs = 0.0, 0
            for step in range(steps):
                samples = fetcher.fetch_batch(plan, step)
                batch = GraphBatch.from_samples(samples, mcfg.cutoff)
                phases.lap("data_load")
                if cfg.mode == "serial":
                    loss_sum += train_step_serial(part, opt, [batch], cfg, phases)
                elif mode == "taskpar":
                    loss_sum += train_step_taskpar(ctx, part, opt, batch, cfg, phases)
                else:
                    loss_sum += train_step_base(ctx, part, opt, batch, cfg, phases)
                graphs += batch.n_graphs
            train_seconds = time.perf_counter() - t_epoch
            train_loss = float(ctx.world.allreduce_mean(np.array([loss_sum / steps]), "control")[0])
            if validate:
                v = _validate(ctx, part, dpart, val_idx, cfg, datasets)
                phases.lap("validation")
            else:
                v = np.full((len(datasets), 5), np.nan)
            n = np.maximum(v[:, 4], 1)
            rec = EpochRecord(
                epoch,
                train_loss,
                {d: float(v[i, 0] / n[i]) for i, d in enumerate(datasets)},
                {d: float(v[i, 1] / n[i]) for i, d in enumerate(datasets)},
                {d: float(v[i, 2] / max(v[i, 3], 1)) for i, d in enumerate(datasets)},
                steps,
                graphs,
                dict(phases.seconds),
                train_seconds,
            )
            records.append(rec)
            history.append(rec.val_total)
            if writer is not None:
                writer.writerow(
                    [epoch, rec.train_loss, rec.val_total]
                    + [rec.val_loss[d] for d in datasets]
                    + [rec.val_mae_energy[d] for d in datasets]
                    + [rec.val_mae_force[d] for d in datasets]
                )
                fh.flush()
            log.info("rank %d epoch %d train %.6g val %.6g", ctx.rank, epoch, rec.train_loss, rec.val_total)
            if validate and early_stop(history, cfg.patience):
                stopped = True
                break
        ctx.world.barrier()
    finally:
        if fh is not None:
            fh.close()
    server.stop()
    opens = data.FILE_OPENS - opens_after_load
    full = _gather_full(ctx, part)
    if full is not None and out is not None:
        save_checkpoint(full, out)
    params = full.flat() if (full is not None and return_params) else None
    return RunResult(ctx.rank, records, opens, params, stopped)
