"""Acceptance suite: one test group per criterion, summary printed at the end of the run.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

from helpers import fd_gradient, random_rotation, random_sample, transformed
from mtpar import data
from mtpar.bench import (
    BenchSetup,
    assert_case2_advantage,
    case2_advantage,
    check_comm_model,
    predicted_sync_bytes,
    report_comm_model,
    run_benchmark,
    run_config,
)
from mtpar.data import (
    default_specs,
    generate_dataset,
    generate_samples,
    read_raw_records,
    read_samples,
    write_samples,
)
from mtpar.datastore import DataServer, Fetcher, load_shards
from mtpar.mesh import Mesh, spawn_world, tree_allreduce_sends
from mtpar.model import (
    PAPER_PRESET,
    GraphBatch,
    ModelConfig,
    ModelPartition,
    PartitionSizes,
    Regime,
    backward,
    classify_regime,
    forward,
    head_layout,
    load_checkpoint,
    memory_footprint,
    shared_layout,
)
from mtpar.trainer import TrainConfig, evaluate, local_partition, loss, replay_serial, replay_steps, run_rank

MESHES = [(1, 1), (1, 2), (2, 2), (5, 1), (2, 4)]
STEPS = 10


def rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# -- 1 -------------------------------------------------------------------------------


@pytest.mark.criterion(1, "gradient exactness (analytic vs central differences, 100 graphs, rel < 1e-6, < 2 min)")
def test_gradient_exactness(note):
    cfg = ModelConfig(layers=2, hidden=4, head_width=4, head_depth=3, n_heads=2)
    part = ModelPartition.init(cfg, 2024)
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        s = random_sample(rng, int(rng.integers(1, 7)), dataset_id=int(rng.integers(0, 2)), box=3.0)
        b = GraphBatch.from_samples([s], cfg.cutoff)
        pred, cache = forward(part, b)
        _, de, df = loss(pred, b)
        analytic = backward(part, cache, de, df).flat()

        def value():
            return loss(forward(part, b)[0], b)[0]

        worst = max(worst, rel(analytic, fd_gradient(value, part)))
    elapsed = time.perf_counter() - t0
    note(f"worst relative error {worst:.2e} over 100 graphs, {part.param_count()} parameters, {elapsed:.1f}s")
    assert worst < 1e-6
    assert elapsed < 120


# -- 2 & 3 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pools():
    specs = [replace(s, n_samples=40, n_max=max(6, s.n_min)) for s in default_specs()]
    return {s.dataset_id: generate_samples(s, 50 + s.dataset_id) for s in specs}


def _mcfg(n_heads):
    return ModelConfig(layers=2, hidden=6, head_width=6, head_depth=2, n_heads=n_heads)


def _assignment(pools, n, m, mode, seed=0, b=3):
    """steps[t][r]: rank r's batch; taskpar ranks only see their group's dataset."""
    rng = np.random.default_rng(seed)
    mixed = [s for d in range(n) for s in pools[d]]
    steps = []
    for _ in range(STEPS):
        per_rank = []
        for r in range(n * m):
            src = pools[r // m] if mode == "taskpar" else mixed
            per_rank.append([src[i] for i in rng.choice(len(src), b, replace=False)])
        steps.append(per_rank)
    return steps


@pytest.mark.criterion(2, "distributed equivalence vs serial oracle, 10 steps, rel < 1e-10")
@pytest.mark.parametrize("mode", ["base", "taskpar"])
@pytest.mark.parametrize("n,m", MESHES)
def test_distributed_equivalence(pools, mode, n, m, note):
    cfg = TrainConfig(mode=mode, lr=0.01)
    mcfg = _mcfg(n)
    steps = _assignment(pools, n, m, mode)
    oracle = replay_serial(cfg, mcfg, steps)
    parts = [r.value for r in spawn_world(n, m, replay_steps, (cfg, mcfg, steps), backend="process")]
    errs = []
    for r, p in enumerate(parts):
        errs.append(rel(p.shared, oracle.shared))
        errs += [rel(p.heads[k], oracle.heads[k]) for k in p.heads]
    moved = rel(oracle.flat(), ModelPartition.init(mcfg, cfg.seed).flat())
    note(f"{mode:7s} {n}x{m}: max rel error {max(errs):.2e} (parameters moved {moved:.2e})")
    assert max(errs) < 1e-10
    assert moved > 1e-3


@pytest.mark.criterion(3, "mode equivalence (base vs taskpar on one assignment), 10 steps, rel < 1e-10")
@pytest.mark.parametrize("n,m", [(1, 2), (2, 2), (5, 1), (2, 4)])
def test_mode_equivalence(pools, n, m, note):
    mcfg = _mcfg(n)
    steps = _assignment(pools, n, m, "taskpar", seed=1)
    tp = [r.value for r in spawn_world(n, m, replay_steps, (TrainConfig(mode="taskpar", lr=0.01), mcfg, steps))]
    bs = [r.value for r in spawn_world(n, m, replay_steps, (TrainConfig(mode="base", lr=0.01), mcfg, steps))]
    errs = [rel(p.shared, bs[0].shared) for p in tp]
    errs += [rel(p.heads[r // m], bs[0].heads[r // m]) for r, p in enumerate(tp)]
    note(f"{n}x{m}: max rel difference {max(errs):.2e}")
    assert max(errs) < 1e-10


# -- 4 -------------------------------------------------------------------------------


def _census(ctx, cfg, mcfg):
    part = local_partition(ctx, cfg, mcfg)
    held = part.shared.size + sum(h.size for h in part.heads.values())
    return held, part.sizes()


def _hand_sizes(c: ModelConfig):
    H, W = c.hidden, c.head_width
    layer = (2 * H + 1) * H + H + H * H + H + 2 * H * H + H + H * H + H
    p_s = c.n_species * H + c.layers * layer

    def mlp(d_in):
        return d_in * W + W + (c.head_depth - 1) * (W * W + W) + W + 1

    return p_s, mlp(H) + mlp(H + 1)


@pytest.mark.criterion(4, "per-rank parameter census equals P_s + N_h*P_h (base) and P_s + P_h (taskpar)")
@pytest.mark.parametrize("cfg", [_mcfg(2), ModelConfig(layers=3, hidden=10, head_width=7, head_depth=4, n_heads=5), PAPER_PRESET],
                         ids=["small", "deep", "preset"])
def test_memory_census(cfg, note):
    p_s, p_h = _hand_sizes(cfg)
    assert (shared_layout(cfg).size, head_layout(cfg).size) == (p_s, p_h)
    n = cfg.n_heads
    for mode, mesh, expect in (("base", (1, 2), p_s + n * p_h), ("taskpar", (n, 1), p_s + p_h)):
        res = [r.value for r in spawn_world(*mesh, _census, (TrainConfig(mode=mode), cfg))]
        for held, sizes in res:
            assert held == expect == memory_footprint(sizes, mode)
        note(f"{cfg.layers}x{cfg.hidden} enc, {cfg.head_depth}x{cfg.head_width} heads, {mode:7s}: "
             f"{res[0][0]:,} params per rank (P_s={p_s:,}, P_h={p_h:,}, N_h={n})")
    if cfg is PAPER_PRESET:
        assert classify_regime(res[0][1]) is Regime.CASE3


# -- 5 -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpus_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    files = {}
    for s in default_specs():
        p = d / f"ds{s.dataset_id}.bin"
        generate_dataset(replace(s, n_samples=64, n_max=8), 7 + s.dataset_id, p)
        files[s.dataset_id] = str(p)
    return files


COMM_CFG = TrainConfig(mode="base", layers=1, hidden=8, head_width=24, head_depth=2)


@pytest.mark.criterion(5, "reduction bytes match the tree-schedule closed form (<= 1%), zero cross-group head_sync")
@pytest.mark.parametrize("mode,n,m", [("base", 1, 4), ("base", 1, 3), ("taskpar", 2, 2), ("taskpar", 2, 4), ("taskpar", 5, 1), ("taskpar", 3, 2)])
def test_comm_accounting(corpus_files, mode, n, m, note):
    files = [corpus_files[d] for d in range(n if mode == "taskpar" else 2)]
    setup = BenchSetup(files, COMM_CFG, epochs=1, backend="process")
    run = run_config(setup, mode, Mesh(n, m), 4)
    rows = report_comm_model(run)
    check_comm_model(rows)
    worst = max(r.rel_error for r in rows)
    cross = sum(s.head_sync_cross_group for s in run.stats)
    note(f"{mode:7s} {n}x{m}: {run.total_steps} steps, worst rel error {worst:.2e}, cross-group head_sync bytes {cross}")
    assert worst <= 0.01 and cross == 0
    # closed form: a slot sends (slot != 0) + children buffers per allreduce
    for st in run.stats:
        _, slot = run.mesh.coords(st.rank)
        if mode == "taskpar":
            assert st.bytes_sent["head_sync"] == run.total_steps * tree_allreduce_sends(slot, m) * 8 * run.sizes.p_head


# -- 6 -------------------------------------------------------------------------------


@pytest.mark.criterion(6, "energy invariance / force equivariance under 100 random motions (< 1e-9), sum of forces < 1e-9")
def test_equivariance(note):
    cfg = ModelConfig(layers=3, hidden=16, head_width=16, head_depth=3, n_heads=1)
    part = ModelPartition.init(cfg, 3)
    rng = np.random.default_rng(6)
    worst_e = worst_f = worst_sum = 0.0
    for _ in range(100):
        s = random_sample(rng, int(rng.integers(2, 13)), box=4.0)
        R, t, perm = random_rotation(rng), rng.normal(size=3) * 10, rng.permutation(s.n_atoms)
        p0 = forward(part, GraphBatch.from_samples([s], cfg.cutoff))[0]
        moved = transformed(s, R=R, t=t, perm=perm)
        p1 = forward(part, GraphBatch.from_samples([moved], cfg.cutoff))[0]
        worst_e = max(worst_e, abs(p1.energy[0] - p0.energy[0]))
        worst_f = max(worst_f, np.max(np.abs(p1.forces - p0.forces[perm] @ R.T)))
        worst_sum = max(worst_sum, np.max(np.abs(p0.forces.sum(axis=0))), np.max(np.abs(p1.forces.sum(axis=0))))
    note(f"max |dE| {worst_e:.1e}, max |dF| {worst_f:.1e}, max |sum F| {worst_sum:.1e}")
    assert worst_e < 1e-9 and worst_f < 1e-9 and worst_sum < 1e-9


# -- 7 -------------------------------------------------------------------------------


def _energy_mse(model, samples, head):
    b = GraphBatch.from_samples(samples, model.cfg.cutoff)
    b = replace(b, dataset_ids=np.full(b.n_graphs, head))
    return float(np.mean((forward(model, b)[0].energy - b.energy) ** 2))


@pytest.mark.criterion(7, "conflicting offsets: single head MSE >= 1.0, two heads < 0.1; MTL beats OOD specialists on >= 4/5")
def test_conflicting_offsets(tmp_path, note):
    c = 2.0
    spec = replace(default_specs()[0], n_samples=300, noise=0.0, n_max=10)
    shifted = replace(spec, dataset_id=1, offsets={e: v + c for e, v in spec.offsets.items()})
    a, b = generate_samples(spec, 11), generate_samples(shifted, 11)
    assert all(np.array_equal(x.positions, y.positions) for x, y in zip(a, b))
    write_samples(tmp_path / "a.bin", 0, a)
    write_samples(tmp_path / "b.bin", 1, b)
    write_samples(tmp_path / "merged.bin", 0, a + [replace(y, dataset_id=0) for y in b])
    cfg = TrainConfig(mode="serial", lr=0.005, batch_local=16, epochs=30, hidden=16, head_width=16)

    spawn_world(1, 1, run_rank, ([str(tmp_path / "merged.bin")], cfg, tmp_path / "one.ckpt"))
    one = load_checkpoint(tmp_path / "one.ckpt")
    mse_one = (_energy_mse(one, a, 0) + _energy_mse(one, b, 0)) / 2

    spawn_world(1, 1, run_rank, ([str(tmp_path / "a.bin"), str(tmp_path / "b.bin")], cfg, tmp_path / "two.ckpt"))
    two = load_checkpoint(tmp_path / "two.ckpt")
    mse_two = (_energy_mse(two, a, 0) + _energy_mse(two, b, 1)) / 2
    note(f"c={c}: single-head energy MSE {mse_one:.4f} (bound {c * c / 4}), two-head {mse_two:.4f} (bound {c * c / 40})")
    assert mse_one >= c * c / 4
    assert mse_two < c * c / 40


@pytest.mark.criterion(7, "conflicting offsets: single head MSE >= 1.0, two heads < 0.1; MTL beats OOD specialists on >= 4/5")
def test_mtl_beats_out_of_distribution_specialists(tmp_path, note):
    t0 = time.perf_counter()
    specs = [replace(s, n_samples=200, n_max=min(s.n_max, 20)) for s in default_specs()]
    files = [str(generate_dataset(s, 100 + s.dataset_id, tmp_path / f"ds{s.dataset_id}.bin")) for s in specs]
    test = {s.dataset_id: generate_samples(replace(s, n_samples=60), 900 + s.dataset_id) for s in specs}
    cfg = TrainConfig(mode="taskpar", lr=0.005, batch_local=16, epochs=15, hidden=16, head_width=16)

    spawn_world(5, 1, run_rank, (files, cfg, tmp_path / "mtl.ckpt"))
    mtl = {r.dataset: r.mae_energy for r in evaluate(load_checkpoint(tmp_path / "mtl.ckpt"), test)}

    specialist = {}
    for k, f in enumerate(files):
        _, samples = read_samples(f)
        own = tmp_path / f"only{k}.bin"
        write_samples(own, 0, [replace(s, dataset_id=0) for s in samples])
        spawn_world(1, 1, run_rank, ([str(own)], replace(cfg, mode="serial"), tmp_path / f"spec{k}.ckpt"))
        model = load_checkpoint(tmp_path / f"spec{k}.ckpt")
        specialist[k] = {r.dataset: r.mae_energy for r in evaluate(model, test, head_for=lambda _: 0)}

    wins = 0
    for d in range(5):
        best_ood = min(specialist[k][d] for k in range(5) if k != d)
        wins += mtl[d] <= best_ood
        note(f"dataset {d}: MTL {mtl[d]:.4f}  best OOD specialist {best_ood:.4f}  in-dist specialist {specialist[d][d]:.4f}")
    note(f"MTL wins on {wins}/5 datasets ({time.perf_counter() - t0:.0f}s)")
    assert wins >= 4


# -- 8 -------------------------------------------------------------------------------


def _fetch_everything(ctx, files, mode):
    part = load_shards(files, ctx.mesh, ctx.rank, mode)
    server = DataServer(ctx, part)
    items = [(d, i) for d in sorted(part.counts) for i in range(part.counts[d])]
    got = Fetcher(ctx, part).fetch_records(items)
    ctx.world.barrier()
    server.stop()
    return items, got


@pytest.mark.criterion(8, "data plane: no file reads while training, fetched bytes identical, alignment within 1e-8")
@pytest.mark.parametrize("mode,n,m,backend", [("base", 1, 4, "thread"), ("taskpar", 2, 2, "thread"), ("taskpar", 2, 2, "process")])
def test_no_file_reads_during_training(corpus_files, mode, n, m, backend, note):
    cfg = TrainConfig(mode=mode, batch_local=4, epochs=2, hidden=6, head_width=6)
    files = [corpus_files[0], corpus_files[1]]
    before = data.FILE_OPENS
    res = [r.value for r in spawn_world(n, m, run_rank, (files, cfg), backend=backend)]
    opens = [r.file_opens_in_training for r in res]
    note(f"{mode:7s} {n}x{m} ({backend}): file opens during training per rank {opens}")
    assert opens == [0] * (n * m)
    if backend == "thread":
        # the counter is live: shard loading did open the files
        assert data.FILE_OPENS > before


@pytest.mark.criterion(8, "data plane: no file reads while training, fetched bytes identical, alignment within 1e-8")
@pytest.mark.parametrize("mode,n,m", [("base", 1, 3), ("taskpar", 2, 2)])
def test_fetched_records_byte_identical(corpus_files, mode, n, m, note):
    files = [corpus_files[0], corpus_files[1]]
    stored = {d: read_raw_records(corpus_files[d])[1] for d in (0, 1)}
    res = [r.value for r in spawn_world(n, m, _fetch_everything, (files, mode), backend="process")]
    checked = 0
    for items, got in res:
        for (d, i), raw in zip(items, got):
            assert raw == stored[d][i]
            checked += 1
    note(f"{mode:7s} {n}x{m}: {checked} fetched records byte-identical to the files")


@pytest.mark.criterion(8, "data plane: no file reads while training, fetched bytes identical, alignment within 1e-8")
def test_alignment_recovers_planted_offsets(tmp_path, note):
    ref = replace(default_specs()[0], n_samples=80, noise=0.0, n_max=10)
    planted = {0: 0.7, 1: -1.3, 2: 2.1, 3: 0.4}
    other = replace(ref, dataset_id=1, offsets={e: v + planted[e] for e, v in ref.offsets.items()})
    paths = [generate_dataset(ref, 5, tmp_path / "ref.bin"), generate_dataset(other, 5, tmp_path / "other.bin")]
    fitted = data.align_energies(paths, ref_id=0)
    err = max(abs((fitted[1][e] - fitted[0][e]) - v) for e, v in planted.items())
    _, a = read_samples(paths[0])
    _, b = read_samples(paths[1])
    level = max(abs(x.energy_per_atom - y.energy_per_atom) for x, y in zip(a, b))
    note(f"planted offset recovery error {err:.1e}; aligned energy gap to reference {level:.1e}")
    assert err < 1e-8 and level < 1e-8


# -- 9 -------------------------------------------------------------------------------


BENCH_CFG = TrainConfig(mode="base", layers=1, hidden=8, head_width=48, head_depth=3)


@pytest.mark.criterion(9, "scaling CSVs for world 1,2,4,8 in both modes; strong-mode work halves; Case-2 advantage")
@pytest.mark.parametrize("kind", ["weak", "strong"])
def test_scaling_harness(tmp_path_factory, kind, note):
    d = tmp_path_factory.mktemp(f"scale_{kind}")
    files = [str(generate_dataset(replace(s, n_samples=128, n_max=6), 3, d / f"ds{s.dataset_id}.bin"))
             for s in default_specs()[:2]]
    setup = BenchSetup(files, BENCH_CFG, epochs=3, backend="process")
    out = d / "out"
    kw = {"b_local": 4} if kind == "weak" else {"b_eff": 32}
    rows, comm = run_benchmark(kind, ["base", "taskpar"], setup, out, worlds=[1, 2, 4, 8], **kw)
    assert (out / "scaling.csv").exists() and (out / "comm.csv").exists() and (out / "scaling.svg").exists()
    for mode in ("base", "taskpar"):
        mine = [r for r in rows if r["mode"] == mode]
        assert [r["world"] for r in mine] == [1, 2, 4, 8]
        g = [r["graphs_per_rank"] for r in mine]
        if kind == "strong":
            assert all(g[i] == 2 * g[i + 1] for i in range(3)), g
            assert mine[0]["speedup"] == 1.0
        else:
            assert all(r["b_local"] == 4 for r in mine)
        note(f"{kind} {mode:7s}: graphs/rank/epoch {g}, meshes {[r['mesh'] for r in mine]}")
    assert all(r.ok for r in comm)

    # Case-2 advantage from the formulas, for the benchmarked partition and the preset
    mcfg = BENCH_CFG.model_config(2)
    sizes = PartitionSizes(shared_layout(mcfg).size, head_layout(mcfg).size, 2)
    assert classify_regime(sizes) is Regime.CASE2
    checked = []
    for mesh in (Mesh(2, 1), Mesh(2, 2), Mesh(2, 4)):
        assert_case2_advantage(sizes, mesh)
        tp, base = case2_advantage(sizes, mesh)
        assert tp < base
        checked.append(f"{mesh}: {tp:.0f} < {base:.0f} B/rank/step")
    measured = {r["mode"]: r for r in rows if r["world"] == 8}
    sync = {m: measured[m]["encoder_sync_bytes_per_step"] + measured[m]["head_sync_bytes_per_step"] for m in measured}
    assert sync["taskpar"] < sync["base"]
    note(f"Case 2 ({sizes.p_shared} shared, {sizes.p_head} per head): " + "; ".join(checked))
    # formula check against the per-rank predictions used by the comm report
    for mesh in (Mesh(2, 2), Mesh(2, 4)):
        assert predicted_sync_bytes(sizes, mesh, "base", 0) > predicted_sync_bytes(sizes, mesh, "taskpar", 0)
