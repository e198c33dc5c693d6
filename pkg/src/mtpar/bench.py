"""Weak/strong scaling harness and communication-volume model.

Every configuration runs as one OS process per rank over localhost TCP. The
first epoch is a warm-up and is discarded; the remaining epochs are averaged.
Timings are machine-relative; byte and work counters are exact.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from mtpar import ContractError
from mtpar.data import read_header
from mtpar.mesh import CATEGORIES, CommStats, Mesh, spawn_world, tree_allreduce_bytes
from mtpar.model import PartitionSizes, Regime, classify_regime, head_layout, shared_layout
from mtpar.trainer import TrainConfig, run_rank

log = logging.getLogger(__name__)

PHASES = ("data_load", "forward", "backward", "optimizer")
SYNC = ("encoder_sync", "head_sync")


class CommModelMismatch(AssertionError):
    pass


@dataclass
class EpochTiming:
    epoch: int
    data_load: float
    forward: float
    backward: float  # includes gradient collectives
    optimizer: float
    total: float

    @property
    def phase_sum(self) -> float:
        return self.data_load + self.forward + self.backward + self.optimizer


@dataclass
class ScalingRun:
    mode: str
    mesh: Mesh
    b_local: int
    timings: list[EpochTiming]  # rank 0, measured epochs only
    stats: list[CommStats]  # per rank, whole run
    graphs_per_rank: list[int]  # per rank, per measured epoch
    steps_per_epoch: int
    total_steps: int  # including the warm-up epoch
    sizes: PartitionSizes
    note: str = ""

    @property
    def world(self) -> int:
        return self.mesh.world_size

    @property
    def b_eff(self) -> int:
        return self.b_local * self.world

    def mean(self, attr: str) -> float:
        return sum(getattr(t, attr) for t in self.timings) / len(self.timings)


@dataclass
class BenchSetup:
    files: list[str]
    cfg: TrainConfig = field(default_factory=lambda: TrainConfig(mode="base", hidden=16, head_width=16, layers=2))
    epochs: int = 3
    max_steps: int | None = None
    backend: str = "process"


def _bench_rank(ctx, files, cfg, epochs, max_steps):
    res = run_rank(ctx, files, cfg, max_steps=max_steps, validate=False)
    return res.epochs


def run_config(setup: BenchSetup, mode: str, mesh: Mesh, b_local: int) -> ScalingRun:
    """One measured configuration: warm-up epoch plus ``setup.epochs`` epochs."""
    n_datasets = len(setup.files)
    note = ""
    run_mode = mode
    if mode == "taskpar" and mesh.n_groups != n_datasets:
        if mesh.world_size != 1:
            raise ContractError(f"taskpar mesh {mesh} needs {n_datasets} sub-groups (one per dataset)")
        # one rank cannot split heads; it holds them all
        run_mode, note = "base", "single-rank baseline (all heads on one rank)"
    cfg = replace(setup.cfg, mode=run_mode, batch_local=b_local, epochs=setup.epochs + 1, patience=10**9)
    results = spawn_world(
        mesh.n_groups, mesh.replicas, _bench_rank, (setup.files, cfg, setup.epochs, setup.max_steps),
        backend=setup.backend, timeout=120,
    )
    per_rank = [r.value for r in results]
    measured = per_rank[0][1:]
    timings = [
        EpochTiming(e.epoch, *(e.phases.get(p, 0.0) for p in PHASES), e.total) for e in measured
    ]
    graphs = [recs[1].graphs for recs in per_rank]
    mcfg = cfg.model_config(n_datasets)
    sizes = PartitionSizes(shared_layout(mcfg).size, head_layout(mcfg).size, n_datasets)
    return ScalingRun(
        mode, mesh, b_local, timings, [r.stats for r in results], graphs,
        measured[0].steps, sum(e.steps for e in per_rank[0]), sizes, note,
    )


def _meshes_for(mode: str, worlds: list[int], n_datasets: int) -> list[Mesh]:
    out = []
    for w in worlds:
        if mode == "base" or w == 1:
            out.append(Mesh(1, w))
        elif w % n_datasets:
            raise ContractError(f"world {w} is not divisible by {n_datasets} datasets")
        else:
            out.append(Mesh(n_datasets, w // n_datasets))
    return out


def resolve_meshes(mode: str, mesh_list: list[str] | None, worlds: list[int] | None, n_datasets: int) -> list[Mesh]:
    if mesh_list:
        meshes = [Mesh.parse(m) for m in mesh_list]
        if mode == "base":
            meshes = [Mesh(1, m.world_size) for m in meshes]
        return meshes
    return _meshes_for(mode, worlds or [1, 2, 4, 8], n_datasets)


def run_weak_scaling(setup: BenchSetup, mode: str, meshes: list[Mesh], b_local: int) -> list[ScalingRun]:
    """Constant per-rank batch as the world grows."""
    return [run_config(setup, mode, m, b_local) for m in meshes]


def run_strong_scaling(setup: BenchSetup, mode: str, meshes: list[Mesh], b_eff: int) -> list[ScalingRun]:
    """Constant aggregate batch; per-rank batch is ``b_eff / world``."""
    for m in meshes:
        if b_eff % m.world_size:
            raise ContractError(f"B_eff={b_eff} is not divisible by world size {m.world_size}")
    return [run_config(setup, mode, m, b_eff // m.world_size) for m in meshes]


# -- communication model ------------------------------------------------------------


def predicted_sync_bytes(sizes: PartitionSizes, mesh: Mesh, mode: str, rank: int) -> int:
    """Reduction payload one rank sends per training step (tree reduce + broadcast)."""
    g, s = mesh.coords(rank)
    W = mesh.world_size
    if mode == "base":
        return tree_allreduce_bytes(rank, W, 8 * (sizes.p_shared + sizes.n_heads * sizes.p_head))
    return tree_allreduce_bytes(rank, W, 8 * sizes.p_shared) + tree_allreduce_bytes(s, mesh.replicas, 8 * sizes.p_head)


def mean_payload_per_rank(sizes: PartitionSizes, mesh: Mesh, mode: str) -> float:
    return sum(predicted_sync_bytes(sizes, mesh, mode, r) for r in range(mesh.world_size)) / mesh.world_size


def case2_advantage(sizes: PartitionSizes, mesh: Mesh) -> tuple[float, float]:
    """(taskpar, base) mean per-rank reduction payload per step; formulas only."""
    return mean_payload_per_rank(sizes, mesh, "taskpar"), mean_payload_per_rank(sizes, mesh, "base")


def assert_case2_advantage(sizes: PartitionSizes, mesh: Mesh) -> None:
    if classify_regime(sizes) is not Regime.CASE2:
        return
    if mesh.n_groups < 2:
        return  # one head: the two modes coincide
    tp, base = case2_advantage(sizes, mesh)
    if not tp < base:
        raise AssertionError(f"{sizes} on {mesh}: taskpar payload {tp} not below base {base}")


@dataclass
class CommRow:
    mode: str
    mesh: str
    rank: int
    group: int
    slot: int
    predicted: float
    measured: float
    head_sync_cross_group: int

    @property
    def rel_error(self) -> float:
        if self.predicted == 0:
            return 0.0 if self.measured == 0 else float("inf")
        return abs(self.measured - self.predicted) / self.predicted

    @property
    def ok(self) -> bool:
        return self.rel_error <= 0.01 and self.head_sync_cross_group == 0


def report_comm_model(run: ScalingRun) -> list[CommRow]:
    """Predicted vs measured per-step reduction bytes for every rank of ``run``."""
    mode = "base" if run.note else run.mode
    rows = []
    for st in run.stats:
        g, s = run.mesh.coords(st.rank)
        measured = sum(st.bytes_sent[c] for c in SYNC) / run.total_steps
        rows.append(CommRow(
            run.mode, str(run.mesh), st.rank, g, s,
            predicted_sync_bytes(run.sizes, run.mesh, mode, st.rank), measured, st.head_sync_cross_group,
        ))
    return rows


def check_comm_model(rows: list[CommRow]) -> None:
    bad = [r for r in rows if not r.ok]
    if bad:
        raise CommModelMismatch(f"{len(bad)} rank(s) off the communication model, first: {bad[0]}")


# -- output -------------------------------------------------------------------------


SCALING_COLUMNS = [
    "scaling", "mode", "world", "mesh", "b_local", "b_eff", "epochs", "epoch_time",
    *PHASES, "speedup", "ideal", "graphs_per_rank", "steps_per_epoch",
    *(f"{c}_bytes_per_step" for c in CATEGORIES), "note",
]


def scaling_rows(kind: str, runs: list[ScalingRun]) -> list[dict]:
    base_time = next((r.mean("total") for r in runs if r.world == 1), None)
    rows = []
    for r in runs:
        t = r.mean("total")
        row = {
            "scaling": kind, "mode": r.mode, "world": r.world, "mesh": str(r.mesh),
            "b_local": r.b_local, "b_eff": r.b_eff, "epochs": len(r.timings), "epoch_time": t,
            **{p: r.mean(p) for p in PHASES},
            "speedup": base_time / t if base_time is not None else "",
            "ideal": r.world, "graphs_per_rank": r.graphs_per_rank[0], "steps_per_epoch": r.steps_per_epoch,
            "note": r.note,
        }
        for c in CATEGORIES:
            row[f"{c}_bytes_per_step"] = sum(s.bytes_sent[c] for s in r.stats) / r.total_steps
        rows.append(row)
    return rows


def write_scaling_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, SCALING_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def write_comm_csv(rows: list[CommRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "mesh", "rank", "group", "slot", "predicted_bytes_per_step",
                    "measured_bytes_per_step", "rel_error", "head_sync_cross_group", "ok"])
        for r in rows:
            w.writerow([r.mode, r.mesh, r.rank, r.group, r.slot, r.predicted, r.measured,
                        r.rel_error, r.head_sync_cross_group, r.ok])


def write_svg(rows: list[dict], path, width: int = 480, height: int = 320) -> None:
    """Speedup vs world size, one line per mode, ideal as a dashed line."""
    pad = 40
    worlds = sorted({r["world"] for r in rows})
    top = max([float(r["speedup"] or 0) for r in rows] + worlds)

    def xy(w, s):
        x = pad + (width - 2 * pad) * (worlds.index(w) / max(len(worlds) - 1, 1))
        y = height - pad - (height - 2 * pad) * (s / top)
        return f"{x:.1f},{y:.1f}"

    colors = {"base": "#1f77b4", "taskpar": "#d62728"}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<polyline fill="none" stroke="black" stroke-dasharray="4,4" points="{" ".join(xy(w, w) for w in worlds)}"/>',
    ]
    for w in worlds:
        x = xy(w, 0).split(",")[0]
        parts.append(f'<text x="{x}" y="{height - pad + 16}" font-size="11" text-anchor="middle">{w}</text>')
    for i, mode in enumerate(sorted({r["mode"] for r in rows})):
        pts = [(r["world"], float(r["speedup"])) for r in rows if r["mode"] == mode and r["speedup"] != ""]
        color = colors.get(mode, "#2ca02c")
        parts.append(f'<polyline fill="none" stroke="{color}" points="{" ".join(xy(w, s) for w, s in sorted(pts))}"/>')
        parts.append(f'<text x="{width - pad - 60}" y="{pad + 14 * i}" font-size="11" fill="{color}">{mode}</text>')
    parts.append(f'<text x="{width / 2}" y="{height - 6}" font-size="11" text-anchor="middle">world size</text>')
    parts.append('<text x="10" y="20" font-size="11">speedup</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def run_benchmark(kind: str, modes: list[str], setup: BenchSetup, out_dir, b_local: int | None = None,
                  b_eff: int | None = None, mesh_list: list[str] | None = None, worlds: list[int] | None = None,
                  svg: bool = True) -> tuple[list[dict], list[CommRow]]:
    """Run every mode, write scaling.csv / comm.csv (/ scaling.svg) into ``out_dir``."""
    if kind not in ("weak", "strong"):
        raise ContractError("kind must be weak or strong")
    n_datasets = len({read_header(f).dataset_id for f in setup.files})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_rows, comm = [], []
    for mode in modes:
        meshes = resolve_meshes(mode, mesh_list, worlds, n_datasets)
        if kind == "weak":
            if b_local is None:
                raise ContractError("weak scaling needs B_local")
            runs = run_weak_scaling(setup, mode, meshes, b_local)
        else:
            if b_eff is None:
                raise ContractError("strong scaling needs B_eff")
            runs = run_strong_scaling(setup, mode, meshes, b_eff)
        for r in runs:
            assert_case2_advantage(r.sizes, r.mesh)
            comm += report_comm_model(r)
        all_rows += scaling_rows(kind, runs)
    write_scaling_csv(all_rows, out / "scaling.csv")
    write_comm_csv(comm, out / "comm.csv")
    if svg:
        write_svg(all_rows, out / "scaling.svg")
    check_comm_model(comm)
    return all_rows, comm
