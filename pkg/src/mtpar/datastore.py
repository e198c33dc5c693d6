"""Distributed in-memory sample cache.

Every sample file is split into contiguous, balanced shards held in memory by
the ranks that serve that dataset (all ranks in base mode, sub-group ``d`` in
taskpar mode). After loading, batches are assembled from local memory plus
remote reads answered by each rank's service thread; the filesystem is never
touched again.

Remote reads are one request per owner per step::

    request  : response_tag u32 | count u32 | (dataset u32, index u64) * count
    response : the requested records, concatenated in request order
"""
from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from mtpar import ContractError
from mtpar.data import AtomisticSample, decode_record, read_header, read_raw_records, record_size
from mtpar.mesh import CommError, Mesh, RankContext

log = logging.getLogger(__name__)

FETCH_REQUEST_TAG = 0xFFFFFFE0
FETCH_STOP_TAG = 0xFFFFFFE1
_RESPONSE_BASE = 0x80000000
_REQ_HEAD = struct.Struct("<II")
_REQ_ITEM = struct.Struct("<IQ")
_N_ATOMS = struct.Struct("<I")


class ShardTooLarge(MemoryError):
    pass


def balanced_ranges(n: int, k: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into ``k`` contiguous pieces; the first ``n % k`` get one extra."""
    base, extra = divmod(n, k)
    out, start = [], 0
    for i in range(k):
        stop = start + base + (1 if i < extra else 0)
        out.append((start, stop))
        start = stop
    return out


@dataclass
class Partition:
    mode: str
    mesh: Mesh
    rank: int
    counts: dict[int, int]  # samples per dataset
    servers: dict[int, list[int]]  # dataset -> serving ranks, in shard order
    shards: dict[int, tuple[int, int]] = field(default_factory=dict)  # local [start, stop) per dataset
    records: dict[int, list[bytes]] = field(default_factory=dict)

    def shard_range(self, dataset: int, rank: int) -> tuple[int, int]:
        servers = self.servers[dataset]
        return balanced_ranges(self.counts[dataset], len(servers))[servers.index(rank)]

    def owner(self, dataset: int, index: int) -> int:
        if dataset not in self.counts or not 0 <= index < self.counts[dataset]:
            raise ContractError(f"unknown sample ({dataset}, {index})")
        for r in self.servers[dataset]:
            a, b = self.shard_range(dataset, r)
            if a <= index < b:
                return r
        raise AssertionError("shards do not cover the index range")

    def local_record(self, dataset: int, index: int) -> bytes:
        a, b = self.shards[dataset]
        if not a <= index < b:
            raise ContractError(f"sample ({dataset}, {index}) is not held by rank {self.rank}")
        return self.records[dataset][index - a]

    def local_bytes(self) -> int:
        return sum(len(r) for recs in self.records.values() for r in recs)


def plan_partition(headers: dict[int, int], mesh: Mesh, rank: int, mode: str) -> Partition:
    datasets = sorted(headers)
    if mode == "taskpar":
        if datasets != list(range(mesh.n_groups)):
            raise ContractError(f"taskpar needs datasets 0..{mesh.n_groups - 1} (one per sub-group), got {datasets}")
        servers = {d: mesh.group_ranks(d) for d in datasets}
    elif mode in ("base", "serial"):
        servers = {d: list(range(mesh.world_size)) for d in datasets}
    else:
        raise ContractError(f"unknown mode {mode!r}")
    return Partition(mode, mesh, rank, dict(headers), servers)


def load_shards(files, mesh: Mesh, rank: int, mode: str, memory_budget: int | None = None) -> Partition:
    """Read this rank's shards of every dataset it serves into memory."""
    paths = {}
    for p in files:
        h = read_header(p)
        if h.dataset_id in paths:
            raise ContractError(f"dataset {h.dataset_id} given twice")
        paths[h.dataset_id] = (p, h.count)
    part = plan_partition({d: c for d, (_, c) in paths.items()}, mesh, rank, mode)
    for d, (path, _) in sorted(paths.items()):
        if rank not in part.servers[d]:
            continue
        a, b = part.shard_range(d, rank)
        _, recs = read_raw_records(path, a, b)
        part.shards[d] = (a, b)
        part.records[d] = recs
        if memory_budget is not None and part.local_bytes() > memory_budget:
            raise ShardTooLarge(f"rank {rank}: shards exceed memory budget of {memory_budget} bytes")
    log.debug("rank %d holds %d bytes in %d shards", rank, part.local_bytes(), len(part.shards))
    return part


# -- epoch plans ----------------------------------------------------------------


@dataclass
class EpochPlan:
    seed: int
    batch_local: int
    steps: int
    assignments: list[list[tuple[int, int]]]  # per rank, steps * batch_local entries

    def batch(self, rank: int, step: int) -> list[tuple[int, int]]:
        if not 0 <= step < self.steps:
            raise ContractError(f"step {step} outside epoch of {self.steps}")
        b = self.batch_local
        return self.assignments[rank][step * b : (step + 1) * b]


def shuffle_epoch(part: Partition, seed: int, batch_local: int, indices: dict[int, np.ndarray] | None = None) -> EpochPlan:
    """Deterministic sampling without replacement; incomplete tail batches are dropped.

    ``indices`` restricts each dataset to a subset (e.g. the training split).
    """
    mesh = part.mesh
    W, M = mesh.world_size, mesh.replicas
    pool = {d: np.arange(n) if indices is None else np.asarray(indices[d]) for d, n in sorted(part.counts.items())}
    if part.mode == "taskpar":
        perms = {g: np.random.default_rng([seed, g]).permutation(pool[g]) for g in range(mesh.n_groups)}
        steps = min(len(p) // (batch_local * M) for p in perms.values())
        assignments = []
        for r in range(W):
            g, s = mesh.coords(r)
            chunk = []
            for t in range(steps):
                lo = t * batch_local * M + s * batch_local
                chunk += [(g, int(i)) for i in perms[g][lo : lo + batch_local]]
            assignments.append(chunk)
    else:
        mixed = [(d, int(i)) for d in pool for i in pool[d]]
        order = np.random.default_rng(seed).permutation(len(mixed))
        b_eff = batch_local * W
        steps = len(mixed) // b_eff
        assignments = [[] for _ in range(W)]
        for t in range(steps):
            for r in range(W):
                lo = t * b_eff + r * batch_local
                assignments[r] += [mixed[j] for j in order[lo : lo + batch_local]]
    return EpochPlan(seed, batch_local, steps, assignments)


# -- serving & fetching -----------------------------------------------------------


class DataServer:
    """Answers remote read requests from this rank's shards (read-only)."""

    def __init__(self, ctx: RankContext, part: Partition):
        self.ctx = ctx
        self.part = part
        self.served = 0
        self._thread = threading.Thread(target=self._loop, name=f"dataserver{ctx.rank}", daemon=True)
        self._thread.start()

    def _loop(self):
        ep = self.ctx.endpoint
        while True:
            try:
                src, payload = ep.recv_any(FETCH_REQUEST_TAG, timeout=3600.0)
            except CommError:
                return
            if src == self.ctx.rank and not payload:
                return
            tag, count = _REQ_HEAD.unpack_from(payload)
            recs = []
            for k in range(count):
                d, idx = _REQ_ITEM.unpack_from(payload, _REQ_HEAD.size + k * _REQ_ITEM.size)
                recs.append(self.part.local_record(d, idx))
            ep.send(src, b"".join(recs), tag, "data_fetch")
            self.served += count

    def stop(self):
        self.ctx.endpoint.send(self.ctx.rank, b"", FETCH_REQUEST_TAG, "control")
        self._thread.join(timeout=10)


class Fetcher:
    def __init__(self, ctx: RankContext, part: Partition):
        self.ctx = ctx
        self.part = part
        self._seq = 0

    def fetch_records(self, items: list[tuple[int, int]]) -> list[bytes]:
        """Encoded records for ``items`` in order; remote ones are requested from all
        owners before any response is awaited."""
        me = self.ctx.rank
        by_owner: dict[int, list[int]] = {}
        for pos, (d, i) in enumerate(items):
            by_owner.setdefault(self.part.owner(d, i), []).append(pos)
        out: list = [None] * len(items)
        pending = []
        for owner, positions in sorted(by_owner.items()):
            if owner == me:
                for pos in positions:
                    out[pos] = self.part.local_record(*items[pos])
                continue
            self._seq = (self._seq + 1) & 0x7FFFFFFF
            tag = _RESPONSE_BASE | self._seq
            req = _REQ_HEAD.pack(tag, len(positions)) + b"".join(_REQ_ITEM.pack(*items[p]) for p in positions)
            self.ctx.send(owner, req, FETCH_REQUEST_TAG, "data_fetch")
            pending.append((owner, tag, positions))
        for owner, tag, positions in pending:
            payload = self.ctx.recv(owner, tag)
            off = 0
            for pos in positions:
                if off + 4 > len(payload):
                    raise CommError(f"owner {owner} returned fewer records than the {len(positions)} requested")
                end = off + record_size(_N_ATOMS.unpack_from(payload, off)[0])
                out[pos] = payload[off:end]
                off = end
            if off != len(payload):
                raise CommError(f"owner {owner} returned more data than the {len(positions)} records requested")
        return out

    def fetch_samples(self, items: list[tuple[int, int]]) -> list[AtomisticSample]:
        return [decode_record(r)[0] for r in self.fetch_records(items)]

    def fetch_batch(self, plan: EpochPlan, step: int) -> list[AtomisticSample]:
        return self.fetch_samples(plan.batch(self.ctx.rank, step))
