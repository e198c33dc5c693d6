"""Command-line entry point: ``mtpar <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from mtpar import ContractError


def _mesh(text):
    from mtpar.mesh import Mesh

    try:
        return Mesh.parse(text)
    except (ValueError, ContractError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _hostport(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def cmd_gen_data(args):
    from mtpar.data import generate_dataset, load_specs

    specs = load_specs(args.spec)
    out = Path(args.out)
    if len(specs) == 1 and out.suffix:
        generate_dataset(specs[0], args.seed, out)
        print(out)
        return
    out.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        # each dataset gets its own stream so adding a spec leaves the others unchanged
        print(generate_dataset(spec, args.seed + spec.dataset_id, out / f"dataset_{spec.dataset_id}.bin"))


def cmd_align(args):
    from mtpar.data import N_ELEMENTS, align_energies

    fitted = align_energies(args.files, args.ref, args.out_dir)
    print("dataset," + ",".join(f"mu_{e}" for e in range(N_ELEMENTS)))
    for d in sorted(fitted):
        print(f"{d}," + ",".join(f"{x:.10g}" for x in fitted[d]))


def cmd_stats(args):
    from mtpar.data import element_frequency, write_frequency_csv

    counts = element_frequency(args.files)
    write_frequency_csv(counts, sys.stdout if args.out == "-" else args.out)


def cmd_train(args):
    from mtpar.mesh import connect_rank, spawn_world
    from mtpar.trainer import TrainConfig, run_rank

    cfg = TrainConfig() if args.config is None else TrainConfig.from_file(args.config)
    cfg = TrainConfig(**{**vars(cfg), "mode": args.mode})
    mesh = args.mesh
    metrics = args.metrics or str(Path(args.out).with_suffix(".metrics.csv"))
    run_args = (args.data, cfg, args.out, metrics)
    if args.hosts:
        if args.rank is None:
            raise ContractError("--hosts needs --rank")
        ctx = connect_rank(args.rank, mesh, args.hosts)
        try:
            result = run_rank(ctx, *run_args)
            ctx.world.barrier()
        finally:
            ctx.endpoint.close()
        results = [result]
    else:
        results = [r.value for r in spawn_world(mesh.n_groups, mesh.replicas, run_rank, run_args, backend=args.backend)]
    last = results[0].epochs[-1]
    print(f"epochs={len(results[0].epochs)} train_loss={last.train_loss:.6g} val_loss={last.val_total:.6g}")
    if results[0].rank == 0:
        print(f"checkpoint: {args.out}\nmetrics: {metrics}")


def cmd_evaluate(args):
    from mtpar.data import read_samples
    from mtpar.model import load_checkpoint
    from mtpar.trainer import evaluate, write_mae_csv

    model = load_checkpoint(args.ckpt)
    data = {}
    for p in args.data:
        h, samples = read_samples(p)
        data[h.dataset_id] = samples
    head_for = None if args.head is None else (lambda d: args.head)
    rows = evaluate(model, data, head_for)
    write_mae_csv({args.name: rows}, args.out)
    for r in rows:
        print(f"dataset {r.dataset}: MAE energy {r.mae_energy:.6g}  MAE force {r.mae_force:.6g}  ({r.n_graphs} graphs)")


def cmd_bench(args):
    from mtpar.bench import BenchSetup, run_benchmark
    from mtpar.trainer import TrainConfig

    if args.kind == "weak" and args.blocal is None:
        raise ContractError("weak scaling needs --blocal")
    if args.kind == "strong" and args.beff is None:
        raise ContractError("strong scaling needs --beff")
    cfg = TrainConfig(mode="base") if args.config is None else TrainConfig.from_file(args.config)
    setup = BenchSetup(args.data, cfg, epochs=args.epochs, max_steps=args.max_steps, backend=args.backend)
    rows, _ = run_benchmark(
        args.kind, args.mode, setup, args.out, b_local=args.blocal, b_eff=args.beff,
        mesh_list=args.mesh_list, worlds=args.worlds, svg=not args.no_svg,
    )
    for r in rows:
        print(f"{r['mode']:8s} world={r['world']} mesh={r['mesh']} epoch={r['epoch_time']:.4f}s speedup={r['speedup']:.3f}")
    print(f"wrote {Path(args.out) / 'scaling.csv'} and comm.csv")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtpar", description="Multi-task parallel training of atomistic graph models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic sample files from a JSON spec")
    g.add_argument("--spec", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="file (single spec) or directory")
    g.set_defaults(fn=cmd_gen_data)

    a = sub.add_parser("align", help="shift energies onto a reference dataset's element offsets")
    a.add_argument("--ref", type=int, required=True)
    a.add_argument("--out-dir", help="write aligned copies here instead of rewriting in place")
    a.add_argument("files", nargs="+")
    a.set_defaults(fn=cmd_align)

    s = sub.add_parser("stats", help="element frequency per dataset (CSV)")
    s.add_argument("--out", default="-")
    s.add_argument("files", nargs="+")
    s.set_defaults(fn=cmd_stats)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--mode", choices=["serial", "base", "taskpar"], required=True)
    t.add_argument("--config", help="key = value run configuration")
    t.add_argument("--data", nargs="+", required=True)
    t.add_argument("--mesh", type=_mesh, default=_mesh("1x1"), help="NxM: N sub-groups of M ranks")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="per-epoch CSV (default: <out>.metrics.csv)")
    t.add_argument("--backend", choices=["process", "thread"], default="process")
    t.add_argument("--hosts", nargs="+", type=_hostport, help="host:port per rank, to run one rank of a multi-host world")
    t.add_argument("--rank", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="per-dataset MAE table of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", nargs="+", required=True)
    e.add_argument("--out", default="mae.csv")
    e.add_argument("--name", default="model", help="row label in the CSV")
    e.add_argument("--head", type=int, help="route every dataset through this head")
    e.set_defaults(fn=cmd_evaluate)

    b = sub.add_parser("bench", help="weak or strong scaling benchmark")
    b.add_argument("kind", choices=["weak", "strong"])
    b.add_argument("--mode", nargs="+", choices=["base", "taskpar"], default=["base"])
    b.add_argument("--mesh-list", nargs="+", help="explicit meshes, e.g. 1x1 2x1 2x2 2x4")
    b.add_argument("--worlds", nargs="+", type=int, help="world sizes (default 1 2 4 8)")
    b.add_argument("--blocal", type=int)
    b.add_argument("--beff", type=int)
    b.add_argument("--data", nargs="+", required=True)
    b.add_argument("--config")
    b.add_argument("--epochs", type=int, default=3, help="measured epochs after one warm-up")
    b.add_argument("--max-steps", type=int)
    b.add_argument("--backend", choices=["process", "thread"], default="process")
    b.add_argument("--no-svg", action="store_true")
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from mtpar.mesh import CommError, RankFailure

    try:
        args.fn(args)
    except (ContractError, OSError, ValueError, CommError, RankFailure) as exc:
        text = str(exc)
        print(f"mtpar: error: {text if args.verbose else text.splitlines()[0]}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
