"""Two-level hierarchical multi-task GNN.

Shared encoder (one parameter block of size P_s)::

    h0_i   = embed[z_i]
    m_ij   = silu(MLP_e([h_i, h_j, d_ij^2 / rc^2]))          # 2 linear layers
    h_i'   = h_i + MLP_h([h_i, sum_j m_ij])                   # 2 linear layers

One branch per dataset (a head block of size P_h each), split into an energy
head and a force head::

    E_graph = MLP_E(mean_i h_i)                               # per-atom energy
    s_ij    = MLP_F([h_i + h_j, d_ij / rc])                   # s_ij == s_ji
    F_i     = sum_j (x_i - x_j) * s_ij

The encoder sees positions only through pairwise distances, so it is invariant;
the force construction is rotation-equivariant, translation-invariant and sums
to zero over every graph.
"""
from __future__ import annotations

import enum
import functools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mtpar import ContractError
from mtpar.data import N_ELEMENTS, AtomisticSample
from mtpar.numcore import (
    activation_backward,
    activation_forward,
    linear_backward,
    linear_forward,
    segment_sum,
)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 32
    head_width: int = 32
    head_depth: int = 3
    n_heads: int = 5
    cutoff: float = 5.0
    n_species: int = N_ELEMENTS


# 4 message-passing layers of 866 units, heads of three 889-unit layers
PAPER_PRESET = ModelConfig(layers=4, hidden=866, head_width=889, head_depth=3, n_heads=5)


class ParamLayout:
    """Named views into one flat parameter vector."""

    def __init__(self, entries: list[tuple[str, tuple[int, ...]]]):
        self.entries = entries
        self.offsets = {}
        off = 0
        for name, shape in entries:
            n = math.prod(shape)
            self.offsets[name] = (off, off + n, shape)
            off += n
        self.size = off

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.size,):
            raise ContractError(f"flat block has shape {flat.shape}, layout expects ({self.size},)")
        return {name: flat[a:b].reshape(s) for name, (a, b, s) in self.offsets.items()}


def _mlp_entries(prefix: str, dims: list[int]) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for k in range(len(dims) - 1):
        out.append((f"{prefix}{k}.W", (dims[k], dims[k + 1])))
        out.append((f"{prefix}{k}.b", (dims[k + 1],)))
    return out


@functools.lru_cache(maxsize=None)
def shared_layout(cfg: ModelConfig) -> ParamLayout:
    H = cfg.hidden
    entries = [("embed", (cfg.n_species, H))]
    for l in range(cfg.layers):
        entries += _mlp_entries(f"l{l}.e", [2 * H + 1, H, H])
        entries += _mlp_entries(f"l{l}.n", [2 * H, H, H])
    return ParamLayout(entries)


@functools.lru_cache(maxsize=None)
def head_layout(cfg: ModelConfig) -> ParamLayout:
    hidden = [cfg.head_width] * cfg.head_depth
    return ParamLayout(
        _mlp_entries("E", [cfg.hidden] + hidden + [1]) + _mlp_entries("F", [cfg.hidden + 1] + hidden + [1])
    )


def _init_block(layout: ParamLayout, rng: np.random.Generator) -> np.ndarray:
    flat = np.zeros(layout.size)
    views = layout.views(flat)
    for name, (_, _, shape) in layout.offsets.items():
        if name == "embed":
            views[name][...] = rng.normal(size=shape)
        elif name.endswith(".W"):
            views[name][...] = rng.normal(size=shape) / np.sqrt(shape[0])
    return flat


@dataclass(frozen=True)
class PartitionSizes:
    p_shared: int
    p_head: int
    n_heads: int


@dataclass
class ModelPartition:
    """Parameters held by one rank: the shared block plus the heads it owns."""

    cfg: ModelConfig
    shared: np.ndarray
    heads: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, heads=None) -> "ModelPartition":
        """Seeded init; head k's values do not depend on which other heads exist."""
        heads = range(cfg.n_heads) if heads is None else heads
        shared = _init_block(shared_layout(cfg), np.random.default_rng([seed, 0]))
        hl = head_layout(cfg)
        return cls(cfg, shared, {k: _init_block(hl, np.random.default_rng([seed, 1, k])) for k in heads})

    @classmethod
    def allocate(cls, cfg: ModelConfig, heads=None) -> "ModelPartition":
        """Zero-filled storage (pages are not touched, so large presets are cheap)."""
        heads = range(cfg.n_heads) if heads is None else heads
        hs = head_layout(cfg).size
        return cls(cfg, np.zeros(shared_layout(cfg).size), {k: np.zeros(hs) for k in heads})

    def sizes(self) -> PartitionSizes:
        return PartitionSizes(shared_layout(self.cfg).size, head_layout(self.cfg).size, self.cfg.n_heads)

    def param_count(self) -> int:
        return int(self.shared.size + sum(h.size for h in self.heads.values()))

    def copy(self) -> "ModelPartition":
        return ModelPartition(self.cfg, self.shared.copy(), {k: v.copy() for k, v in self.heads.items()})

    def subset(self, heads) -> "ModelPartition":
        return ModelPartition(self.cfg, self.shared.copy(), {k: self.heads[k].copy() for k in heads})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.shared] + [self.heads[k] for k in sorted(self.heads)])


class Regime(enum.Enum):
    CASE1 = "Case1"  # shared-dominated: pipeline/tensor parallelism
    CASE2 = "Case2"  # head-dominated: multi-task parallelism
    CASE3 = "Case3"  # comparable: hybrid

    def __str__(self):
        return self.value


DOMINANCE = 10


def classify_regime(sizes: PartitionSizes) -> Regime:
    heads_total = sizes.n_heads * sizes.p_head
    if sizes.p_shared >= DOMINANCE * heads_total:
        return Regime.CASE1
    if heads_total >= DOMINANCE * sizes.p_shared:
        return Regime.CASE2
    return Regime.CASE3


def memory_footprint(sizes: PartitionSizes, mode: str) -> int:
    """Parameters resident per rank: all heads ("base") or one head ("taskpar")."""
    if mode == "base":
        return sizes.p_shared + sizes.n_heads * sizes.p_head
    if mode == "taskpar":
        return sizes.p_shared + sizes.p_head
    raise ContractError(f"unknown mode {mode!r}")


# -- graphs ---------------------------------------------------------------------


@dataclass
class GraphBatch:
    n_graphs: int
    node_offsets: np.ndarray  # [G + 1]
    node_graph: np.ndarray  # [N]
    positions: np.ndarray  # [N, 3]
    species: np.ndarray  # [N]
    edge_i: np.ndarray  # receiver
    edge_j: np.ndarray  # sender
    dataset_ids: np.ndarray  # [G]
    energy: np.ndarray  # labels [G]
    forces: np.ndarray  # labels [N, 3]

    @property
    def n_nodes(self) -> int:
        return int(self.positions.shape[0])

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.node_offsets)

    @classmethod
    def from_samples(cls, samples: list[AtomisticSample], cutoff: float = 5.0) -> "GraphBatch":
        if not samples:
            raise ContractError("empty batch")
        offsets = [0]
        ei, ej = [], []
        for s in samples:
            n = s.n_atoms
            if n == 0:
                raise ContractError("graph with zero atoms")
            d = np.linalg.norm(s.positions[:, None, :] - s.positions[None, :, :], axis=-1)
            mask = d < cutoff
            np.fill_diagonal(mask, False)
            i, j = np.nonzero(mask)  # row-major: sorted by receiver, then sender
            ei.append(i + offsets[-1])
            ej.append(j + offsets[-1])
            offsets.append(offsets[-1] + n)
        counts = np.diff(offsets)
        return cls(
            n_graphs=len(samples),
            node_offsets=np.asarray(offsets, dtype=np.int64),
            node_graph=np.repeat(np.arange(len(samples)), counts),
            positions=np.concatenate([s.positions for s in samples]).astype(np.float64),
            species=np.concatenate([s.species for s in samples]).astype(np.int64),
            edge_i=np.concatenate(ei).astype(np.int64),
            edge_j=np.concatenate(ej).astype(np.int64),
            dataset_ids=np.array([s.dataset_id for s in samples], dtype=np.int64),
            energy=np.array([s.energy_per_atom for s in samples]),
            forces=np.concatenate([s.forces for s in samples]).astype(np.float64),
        )


@dataclass
class Prediction:
    energy: np.ndarray  # [G] energy per atom
    forces: np.ndarray  # [N, 3]


@dataclass
class GradientBuffer:
    shared: np.ndarray
    heads: dict[int, np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.shared] + [self.heads[k] for k in sorted(self.heads)])


# -- forward / backward ---------------------------------------------------------


def _mlp_forward(P, prefix: str, n_linear: int, x: np.ndarray, final_act: bool):
    inputs, pre = [], []
    h = x
    for k in range(n_linear):
        inputs.append(h)
        a = linear_forward(h, P[f"{prefix}{k}.W"], P[f"{prefix}{k}.b"])
        pre.append(a)
        h = activation_forward(a) if (k < n_linear - 1 or final_act) else a
    return h, (inputs, pre, final_act)


def _mlp_backward(P, G, prefix: str, cache, upstream: np.ndarray) -> np.ndarray:
    inputs, pre, final_act = cache
    g = upstream
    n_linear = len(inputs)
    for k in reversed(range(n_linear)):
        if k < n_linear - 1 or final_act:
            g = activation_backward(pre[k], g)
        lg = linear_backward(inputs[k], P[f"{prefix}{k}.W"], g)
        G[f"{prefix}{k}.W"] += lg.param_grads["W"]
        G[f"{prefix}{k}.b"] += lg.param_grads["b"]
        g = lg.input_grad
    return g


def _geometry(batch: GraphBatch, cutoff: float):
    rel = batch.positions[batch.edge_i] - batch.positions[batch.edge_j]
    dist = np.sqrt(np.sum(rel * rel, axis=1))
    return rel, dist


def encoder_forward(batch: GraphBatch, shared: np.ndarray, cfg: ModelConfig):
    if batch.n_nodes == 0 or np.any(batch.counts == 0):
        raise ContractError("encoder_forward: empty graph")
    P = shared_layout(cfg).views(shared)
    rel, dist = _geometry(batch, cfg.cutoff)
    q = (dist * dist / cfg.cutoff**2)[:, None]
    ei, ej, N = batch.edge_i, batch.edge_j, batch.n_nodes
    h = P["embed"][batch.species]
    layer_caches = []
    for l in range(cfg.layers):
        m, ce = _mlp_forward(P, f"l{l}.e", 2, np.concatenate([h[ei], h[ej], q], axis=1), final_act=True)
        agg = segment_sum(m, ei, N)
        upd, cn = _mlp_forward(P, f"l{l}.n", 2, np.concatenate([h, agg], axis=1), final_act=False)
        layer_caches.append((ce, cn))
        h = h + upd
    return h, {"rel": rel, "dist": dist, "layers": layer_caches}


def _owned(batch: GraphBatch, heads) -> list[int]:
    present = np.unique(batch.dataset_ids).tolist()
    for k in present:
        if k not in heads:
            raise ContractError(f"dataset_id {k} has no head on this rank")
    return present


def heads_forward(h: np.ndarray, enc_cache, batch: GraphBatch, part: ModelPartition):
    cfg = part.cfg
    hl = head_layout(cfg)
    counts = batch.counts
    pooled = segment_sum(h, batch.node_graph, batch.n_graphs) / counts[:, None]
    rel, dist = enc_cache["rel"], enc_cache["dist"]
    edge_graph = batch.node_graph[batch.edge_i]
    energy = np.zeros(batch.n_graphs)
    s_all = np.zeros(batch.edge_i.shape[0])
    caches = {}
    n_lin = cfg.head_depth + 1
    for k in _owned(batch, part.heads):
        P = hl.views(part.heads[k])
        gsel = np.nonzero(batch.dataset_ids == k)[0]
        esel = np.nonzero(batch.dataset_ids[edge_graph] == k)[0]
        e_out, ce = _mlp_forward(P, "E", n_lin, pooled[gsel], final_act=False)
        energy[gsel] = e_out[:, 0]
        u = np.concatenate([h[batch.edge_i[esel]] + h[batch.edge_j[esel]], (dist[esel] / cfg.cutoff)[:, None]], axis=1)
        s_out, cf = _mlp_forward(P, "F", n_lin, u, final_act=False)
        s_all[esel] = s_out[:, 0]
        caches[k] = (gsel, esel, ce, cf)
    forces = segment_sum(rel * s_all[:, None], batch.edge_i, batch.n_nodes)
    return Prediction(energy, forces), {"heads": caches, "s": s_all}


def forward(part: ModelPartition, batch: GraphBatch):
    h, enc_cache = encoder_forward(batch, part.shared, part.cfg)
    pred, head_cache = heads_forward(h, enc_cache, batch, part)
    return pred, {"enc": enc_cache, "head": head_cache, "h": h, "batch": batch}


def backward(part: ModelPartition, cache, d_energy: np.ndarray, d_forces: np.ndarray) -> GradientBuffer:
    """Exact gradients of sum(d_energy * E) + sum(d_forces * F) w.r.t. every owned block.

    Heads that no graph in the batch routes to receive exactly zero gradient.
    """
    if cache is None or "enc" not in cache:
        raise ContractError("backward called without a forward cache")
    cfg = part.cfg
    batch: GraphBatch = cache["batch"]
    h = cache["h"]
    rel = cache["enc"]["rel"]
    ei, ej, N = batch.edge_i, batch.edge_j, batch.n_nodes
    H = cfg.hidden
    hl = head_layout(cfg)
    head_grads = {k: np.zeros(hl.size) for k in part.heads}

    ds = np.sum(d_forces[ei] * rel, axis=1)
    d_pooled = np.zeros((batch.n_graphs, H))
    d_h_edges = np.zeros((ei.shape[0], H))
    for k, (gsel, esel, ce, cf) in cache["head"]["heads"].items():
        P, G = hl.views(part.heads[k]), hl.views(head_grads[k])
        d_pooled[gsel] = _mlp_backward(P, G, "E", ce, d_energy[gsel][:, None])
        du = _mlp_backward(P, G, "F", cf, ds[esel][:, None])
        d_h_edges[esel] = du[:, :H]
    counts = batch.counts
    dh = (d_pooled / counts[:, None])[batch.node_graph]
    dh = dh + segment_sum(d_h_edges, ei, N) + segment_sum(d_h_edges, ej, N)

    sl = shared_layout(cfg)
    shared_grad = np.zeros(sl.size)
    P, G = sl.views(part.shared), sl.views(shared_grad)
    for l in reversed(range(cfg.layers)):
        ce, cn = cache["enc"]["layers"][l]
        d_in = _mlp_backward(P, G, f"l{l}.n", cn, dh)
        dh = dh + d_in[:, :H]
        dm = d_in[:, H:][ei]
        d_e = _mlp_backward(P, G, f"l{l}.e", ce, dm)
        dh = dh + segment_sum(d_e[:, :H], ei, N) + segment_sum(d_e[:, H : 2 * H], ej, N)
    G["embed"] += segment_sum(dh, batch.species, cfg.n_species)
    return GradientBuffer(shared_grad, head_grads)


# -- checkpoint -----------------------------------------------------------------

CKPT_MAGIC = b"HMTP"
CKPT_VERSION = 1
_HYPER = struct.Struct("<IIIIIId")


def save_checkpoint(part: ModelPartition, path) -> None:
    cfg = part.cfg
    missing = [k for k in range(cfg.n_heads) if k not in part.heads]
    if missing:
        raise ContractError(f"checkpoint needs every head; missing {missing}")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
        fh.write(_HYPER.pack(cfg.n_species, cfg.layers, cfg.hidden, cfg.head_width, cfg.head_depth, cfg.n_heads, cfg.cutoff))
        for block in [part.shared] + [part.heads[k] for k in range(cfg.n_heads)]:
            fh.write(struct.pack("<Q", block.size))
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelPartition:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    n_species, layers, hidden, width, depth, n_heads, cutoff = _HYPER.unpack_from(raw, 8)
    cfg = ModelConfig(layers, hidden, width, depth, n_heads, cutoff, n_species)
    off = 8 + _HYPER.size
    blocks = []
    for _ in range(n_heads + 1):
        (n,) = struct.unpack_from("<Q", raw, off)
        off += 8
        blocks.append(np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64))
        off += 8 * n
    part = ModelPartition(cfg, blocks[0], dict(enumerate(blocks[1:])))
    if part.shared.size != shared_layout(cfg).size or any(b.size != head_layout(cfg).size for b in blocks[1:]):
        raise ValueError(f"{path}: block sizes do not match hyperparameters")
    return part
