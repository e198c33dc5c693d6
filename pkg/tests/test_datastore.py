import numpy as np
import pytest

from mtpar import ContractError, data
from mtpar.data import CorruptFileError, DatasetSpec, encode_record, generate_samples, read_samples, write_samples
from mtpar.datastore import (
    DataServer,
    Fetcher,
    ShardTooLarge,
    balanced_ranges,
    load_shards,
    plan_partition,
    shuffle_epoch,
)
from mtpar.mesh import Mesh, spawn_world


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    paths = []
    for d, n in enumerate([40, 37, 52]):
        spec = DatasetSpec(d, [0, 1, 2, 3], 2, 5, {0: -1.0 * d}, noise=0.01, n_samples=n)
        p = root / f"d{d}.hmtd"
        write_samples(p, d, generate_samples(spec, 100 + d))
        paths.append(p)
    return paths


def test_balanced_ranges():
    assert balanced_ranges(100, 4) == [(0, 25), (25, 50), (50, 75), (75, 100)]
    sizes = [b - a for a, b in balanced_ranges(103, 4)]
    assert sizes == [26, 26, 26, 25]
    assert balanced_ranges(5, 1) == [(0, 5)]


def test_single_rank_holds_everything(corpus):
    part = load_shards(corpus, Mesh(1, 1), 0, "base")
    assert part.shards == {0: (0, 40), 1: (0, 37), 2: (0, 52)}


def test_owner_map_total_and_disjoint():
    part = plan_partition({0: 103, 1: 9}, Mesh(1, 4), 0, "base")
    for d, n in part.counts.items():
        owners = [part.owner(d, i) for i in range(n)]
        assert sorted(set(owners)) == [0, 1, 2, 3]
        counts = np.bincount(owners)
        assert counts.max() - counts.min() <= 1
    with pytest.raises(ContractError):
        part.owner(0, 103)


def test_taskpar_shards_only_in_subgroup():
    part = plan_partition({0: 10, 1: 11, 2: 12}, Mesh(3, 2), 0, "taskpar")
    assert part.servers == {0: [0, 1], 1: [2, 3], 2: [4, 5]}
    assert {part.owner(2, i) for i in range(12)} == {4, 5}
    with pytest.raises(ContractError):
        plan_partition({0: 10, 1: 11}, Mesh(3, 1), 0, "taskpar")


def test_shuffle_deterministic_and_seed_sensitive():
    part = plan_partition({0: 50, 1: 50}, Mesh(1, 2), 0, "base")
    a, b = shuffle_epoch(part, 5, 8), shuffle_epoch(part, 5, 8)
    c = shuffle_epoch(part, 6, 8)
    assert a.assignments == b.assignments
    assert a.assignments != c.assignments


def test_base_plan_is_truncated_permutation():
    part = plan_partition({0: 50, 1: 33}, Mesh(1, 4), 0, "base")
    plan = shuffle_epoch(part, 1, 5)
    assert plan.steps == 83 // 20
    seen = [x for r in plan.assignments for x in r]
    assert len(seen) == len(set(seen)) == plan.steps * 20
    assert all(len(r) == plan.steps * 5 for r in plan.assignments)


def test_taskpar_plan_routes_by_group():
    part = plan_partition({0: 30, 1: 41, 2: 29}, Mesh(3, 2), 0, "taskpar")
    plan = shuffle_epoch(part, 3, 4)
    assert plan.steps == min(30, 41, 29) // 8
    for r in range(6):
        g = r // 2
        assert {d for d, _ in plan.assignments[r]} == {g}
    # no sample twice within a group
    for g in range(3):
        seen = plan.assignments[2 * g] + plan.assignments[2 * g + 1]
        assert len(seen) == len(set(seen))


def test_plan_restricted_to_indices():
    part = plan_partition({0: 20}, Mesh(1, 1), 0, "base")
    plan = shuffle_epoch(part, 0, 2, indices={0: np.arange(10, 20)})
    assert {i for _, i in plan.assignments[0]} == set(range(10, 20))


def _fetch_everything(ctx, files, mode, batch):
    part = load_shards(files, ctx.mesh, ctx.rank, mode)
    server = DataServer(ctx, part)
    ctx.world.barrier()
    opens_before = data.FILE_OPENS
    fetcher = Fetcher(ctx, part)
    got = []
    for epoch in range(2):
        plan = shuffle_epoch(part, epoch, batch)
        for step in range(plan.steps):
            items = plan.batch(ctx.rank, step)
            got += [(item, encode_record(s)) for item, s in zip(items, fetcher.fetch_batch(plan, step))]
    ctx.world.barrier()
    server.stop()
    return got, data.FILE_OPENS - opens_before


@pytest.mark.parametrize("mode,mesh", [("base", (1, 3)), ("taskpar", (3, 2)), ("base", (2, 2))])
def test_fetched_records_match_file(corpus, mode, mesh):
    res = spawn_world(*mesh, _fetch_everything, (corpus, mode, 3))
    truth = {d: [encode_record(s) for s in read_samples(p)[1]] for d, p in enumerate(corpus)}
    total = 0
    for r in res:
        got, opens = r.value
        assert opens == 0
        for (d, i), blob in got:
            assert blob == truth[d][i]
        total += len(got)
    assert total > 0


def test_all_local_plan_has_no_fetch_traffic(corpus):
    res = spawn_world(1, 1, _fetch_everything, (corpus, "base", 4))
    assert res[0].stats.bytes_received["data_fetch"] == 0


def test_all_remote_fetch_bytes_equal_record_sizes(corpus):
    def fn(ctx):
        part = load_shards(corpus, ctx.mesh, ctx.rank, "base")
        server = DataServer(ctx, part)
        ctx.world.barrier()
        out = None
        if ctx.rank == 0:
            other = [(d, i) for d in part.counts for i in range(part.counts[d]) if part.owner(d, i) == 1][:6]
            before = ctx.stats.snapshot().bytes_received["data_fetch"]
            samples = Fetcher(ctx, part).fetch_samples(other)
            after = ctx.stats.snapshot().bytes_received["data_fetch"]
            out = (after - before, sum(len(encode_record(s)) for s in samples))
        ctx.world.barrier()
        server.stop()
        return out

    measured, expected = spawn_world(1, 2, fn)[0].value
    assert measured == expected > 0


def test_corrupt_file_rejected(corpus, tmp_path):
    raw = bytearray(corpus[0].read_bytes())
    raw[-3] ^= 0x55
    bad = tmp_path / "bad.hmtd"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CorruptFileError):
        load_shards([bad], Mesh(1, 1), 0, "base")


def test_memory_budget(corpus):
    with pytest.raises(ShardTooLarge):
        load_shards(corpus, Mesh(1, 1), 0, "base", memory_budget=1000)


def test_step_out_of_range():
    part = plan_partition({0: 10}, Mesh(1, 1), 0, "base")
    plan = shuffle_epoch(part, 0, 5)
    with pytest.raises(ContractError):
        plan.batch(0, 2)
