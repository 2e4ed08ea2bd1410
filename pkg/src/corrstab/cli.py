"""``corrstab`` command line: datagen, train, simulate, analyze, corr, rdf.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage error,
3 simulation crashed (the partial dump is still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .correlation import dataset_corr_value
from .errors import CorrstabError
from .frame import composition_counts
from .io import atomic_write, read_dataset, write_dataset

log = logging.getLogger("corrstab")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CRASH = 0, 1, 2, 3
IRREP_ALIASES = {"0e": "only0e", "1o": "only1o", "both": "both-summed"}


def ratio_tag(ratio: str) -> str:
    return ratio.replace(":", "-")


# ---------------------------------------------------------------- commands

def cmd_datagen(cfg: RunConfig, args) -> int:
    from .md import generate_dataset, load_preset

    pot = load_preset(cfg.data.preset)
    ratios = [r.strip() for r in (args.ratios or ",".join(cfg.data.compositions)).split(",") if r.strip()]
    n_frames = args.frames if args.frames is not None else cfg.data.n_frames
    gen = cfg.data.generation.model_copy(update={"seed": cfg.seed})
    if args.temperature is not None:
        gen = gen.model_copy(update={"T_set": args.temperature})
    out = Path(cfg.out)
    ext = ".json" if cfg.data.format == "json-frames" else ".xyz"
    for ratio in ratios:
        counts = composition_counts(ratio, gen.n_atoms)
        ds = generate_dataset(pot, ratio, n_frames, gen)
        path = out / f"data_{ratio_tag(ratio)}{ext}"
        write_dataset(ds, path, cfg.data.format)
        label = ":".join(str(c) for c in counts)
        print(f"{ratio}\tcounts={label}\tframes={len(ds)}\t{path}")
    return EXIT_OK


def _train_config(cfg: RunConfig):
    from .training import TrainConfig

    sched = cfg.scheduler
    if not cfg.train.corr_enabled:
        sched = sched.model_copy(update={"c_min": 0.0, "c_max": 0.0})
    return TrainConfig(
        model=cfg.model,
        scheduler=sched,
        weights=cfg.weights,
        corr=cfg.corr,
        epochs=cfg.train.epochs,
        batch_size=cfg.train.batch_size,
        lr=cfg.train.lr,
        seed=cfg.seed,
        val_every=cfg.train.val_every,
        normalize_loss=cfg.train.normalize_loss,
    )


def cmd_train(cfg: RunConfig, args) -> int:
    from .plotting import plot_metrics
    from .training import evaluate_mae, train

    ds = read_dataset(args.data)
    n_val = cfg.train.n_val
    if len(ds) <= n_val:
        raise CorrstabError(f"dataset has {len(ds)} frames; need more than n_val={n_val}")
    ds_train, ds_val = ds.split(n_val)
    tcfg = _train_config(cfg)
    out = Path(cfg.out)
    state = train(ds_train, ds_val, tcfg, log_path=out / "metrics.csv", checkpoint_path=out / "checkpoint.json")
    best = state.best_params
    from .model import save_checkpoint

    save_checkpoint(out / "best.json", best, tcfg.model_dump(), {"best_epoch": state.best_epoch})
    fmae, emae = evaluate_mae(best, ds_val)
    corr = dataset_corr_value(best, ds_val, cfg.corr)
    report = {"FMAE": fmae, "EMAE": emae, "corr_value": corr.value, "best_epoch": state.best_epoch,
              "epochs": tcfg.epochs, "corr_enabled": cfg.train.corr_enabled}
    atomic_write(out / "train_report.json", json.dumps(report, indent=2) + "\n")
    if state.history:
        plot_metrics(state.history, out / "metrics.png")
    print(f"corr_value={corr.value:.4f}\tFMAE={fmae:.2f} meV/A\tEMAE={emae:.2f} meV/atom")
    return EXIT_OK


class _FaultInjector:
    """Wraps a force provider so its ``k``-th call (step ``k``) returns NaN forces."""

    def __init__(self, provider, at_step: int):
        self.provider, self.at_step, self.calls = provider, at_step, 0

    def __call__(self, positions):
        energy, forces = self.provider(positions)
        if self.calls == self.at_step:
            forces = np.full_like(forces, np.nan)
        self.calls += 1
        return energy, forces


def cmd_simulate(cfg: RunConfig, args) -> int:
    from .md import ModelForces, RefForces, initial_frame, load_preset, relax, run_md
    from .model import load_checkpoint

    pot = load_preset(cfg.data.preset)
    md = cfg.md
    rng = np.random.default_rng(cfg.seed)
    if args.init:
        frame = read_dataset(args.init)[args.frame]
        if not frame.masses:
            frame = frame.with_(masses=pot.masses)
    else:
        frame = initial_frame(pot, args.composition or pot.composition or "1", pot.n_atoms or 96, rng)
        frame = frame.with_(positions=relax(RefForces(pot, frame), frame.positions, frame.cell))
    if args.potential == "ref":
        provider = RefForces(pot, frame)
    else:
        if not args.checkpoint:
            raise CorrstabError("--checkpoint is required unless --potential ref")
        params, _, _ = load_checkpoint(args.checkpoint)
        provider = ModelForces(params, frame)
    if args.inject_nan_at is not None:
        provider = _FaultInjector(provider, args.inject_nan_at)
    dump = Path(cfg.out) / (args.dump or "traj.dump")
    result = run_md(provider, frame, md, dump_path=dump, rng=rng)
    print(f"status={result.status}\tsnapshots={result.record.num}\tdump={dump}")
    if result.crashed:
        print(f"crash_step={result.crash_step}\treason={result.reason}")
        return EXIT_CRASH
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args) -> int:
    from .md import load_preset
    from .plotting import plot_rdfs, plot_stability
    from .stability import rdf, stability_index
    from .trajectory import parse_dump
    from .graph import species_pairs

    masses = load_preset(cfg.data.preset).masses
    traj = parse_dump(args.dump, masses=masses)
    scfg = cfg.stability
    if scfg.n_species is None:
        scfg = scfg.model_copy(update={"n_species": len(masses)})
    report = stability_index(traj, scfg)
    out = Path(cfg.out)
    stem = Path(args.dump).stem
    report.write(out / f"{stem}_stability.json", out / f"{stem}_stability.csv")
    plot_stability(report, out / f"{stem}_stability.png")
    if args.rdf:
        ok = [s for s in traj.snapshots if s.is_finite()]
        for a, b in species_pairs(scfg.n_species):
            g = rdf(ok, (a, b), args.rdf_rmax, args.bins)
            atomic_write(out / f"{stem}_rdf_{a}-{b}.csv", g.to_csv())
            plot_rdfs([g], [f"{a}-{b}"], out / f"{stem}_rdf_{a}-{b}.png")
    print(f"s_index={report.s_index:.6f}\tcrashed={report.crashed}\tsnapshots={len(report.steps)}")
    return EXIT_OK


def cmd_corr(cfg: RunConfig, args) -> int:
    from .model import load_checkpoint
    from .plotting import plot_corr_matrix

    params, _, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    result = dataset_corr_value(params, ds, cfg.corr)
    out = Path(cfg.out)
    blob = {"corr_value": result.value, "config": cfg.corr.model_dump(), **result.to_dict()}
    atomic_write(out / "corr.json", json.dumps(blob, indent=2) + "\n")
    for k, m in enumerate(result.matrices):
        plot_corr_matrix(m.values, out / f"corr_{k}.png", title=f"layer {m.layer}, value {result.value:.4f}")
    print(f"corr_value={result.value:.6f}\tframes={result.n_frames}")
    return EXIT_OK


def cmd_rdf(cfg: RunConfig, args) -> int:
    from .md import load_preset
    from .plotting import plot_rdfs
    from .stability import rdf, rdf_table
    from .trajectory import parse_dump

    masses = load_preset(cfg.data.preset).masses
    labels = args.labels.split(",") if args.labels else [Path(d).stem for d in args.dumps]
    if len(labels) != len(args.dumps):
        raise CorrstabError("--labels must name every dump")
    pair = tuple(int(x) for x in args.pair.split("-"))
    curves = []
    for path in args.dumps:
        traj = parse_dump(path, masses=masses)
        curves.append(rdf([s for s in traj.snapshots if s.is_finite()], pair, args.rdf_rmax, args.bins))
    out = Path(cfg.out)
    tag = f"{pair[0]}-{pair[1]}"
    atomic_write(out / f"rdf_{tag}.csv", rdf_table(curves, labels))
    plot_rdfs(curves, labels, out / f"rdf_{tag}.png", title=f"g(r) {tag}")
    print(f"rdf\tpair={tag}\tcurves={len(curves)}\t{out / f'rdf_{tag}.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _globals(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=default, help="master random seed")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrstab", description=__doc__.splitlines()[0])
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _globals(common, suppress=True)

    p = sub.add_parser("datagen", parents=[common], help="generate labelled datasets")
    p.add_argument("--ratios", help='comma-separated compositions, e.g. "1:2,1:1.55,1:1.1"')
    p.add_argument("--frames", type=int, help="frames per composition")
    p.add_argument("--temperature", type=float, help="sampling temperature (K)")

    p = sub.add_parser("train", parents=[common], help="train a model (baseline or decorrelated)")
    p.add_argument("--data", required=True, help="dataset file; the last n_val frames validate")
    p.add_argument("--corr", choices=("on", "off"), help="off trains the baseline (c_max = 0)")
    p.add_argument("--scheduler", choices=("fixed", "linear", "cosine"))
    p.add_argument("--c-max", type=float, dest="c_max")
    p.add_argument("--epochs", type=int)
    p.add_argument("--features", choices=("edge", "node"))
    p.add_argument("--irreps", choices=("0e", "1o", "both", "only0e", "only1o", "both-mixed", "both-summed"))
    p.add_argument("--sampling", choices=("sqrt-f", "fixed"))

    p = sub.add_parser("simulate", parents=[common], help="run MD and write a LAMMPS dump")
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--potential", choices=("model", "ref"), default="model")
    p.add_argument("--init", help="dataset to take the initial frame from")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--composition", help="random initial configuration of this composition")
    p.add_argument("--steps", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--T-set", type=float, dest="T_set")
    p.add_argument("--thermostat", choices=("none", "langevin"))
    p.add_argument("--dump-interval", type=int, dest="dump_interval")
    p.add_argument("--dump", help="dump file name inside --out (default traj.dump)")
    p.add_argument("--inject-nan-at", type=int, dest="inject_nan_at", help=argparse.SUPPRESS)

    p = sub.add_parser("analyze", parents=[common], help="stability report for a dump")
    p.add_argument("dump")
    p.add_argument("--T-set", type=float, dest="T_set")
    p.add_argument("--mode", choices=("ratio", "literal"))
    p.add_argument("--rdf", action="store_true", help="also write g(r) per species pair")
    p.add_argument("--rdf-rmax", type=float, default=5.0, dest="rdf_rmax")
    p.add_argument("--bins", type=int, default=100)

    p = sub.add_parser("corr", parents=[common], help="dataset correlation value of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--features", choices=("edge", "node"))
    p.add_argument("--irreps", choices=("0e", "1o", "both", "only0e", "only1o", "both-mixed", "both-summed"))

    p = sub.add_parser("rdf", parents=[common], help="compare g(r) across dumps")
    p.add_argument("dumps", nargs="+")
    p.add_argument("--pair", default="1-2", help="species pair, e.g. 1-2")
    p.add_argument("--labels", help="comma-separated curve labels")
    p.add_argument("--rdf-rmax", type=float, default=5.0, dest="rdf_rmax")
    p.add_argument("--bins", type=int, default=100)
    return parser


def _overrides(args) -> dict:
    """Translate explicit flags into nested config overrides."""
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        o["out"] = args.out
    cmd = args.command
    if cmd == "train":
        if args.corr is not None:
            put("train", "corr_enabled", args.corr == "on")
        put("scheduler", "kind", args.scheduler)
        put("scheduler", "c_max", args.c_max)
        put("train", "epochs", args.epochs)
    if cmd in ("train", "corr"):
        put("corr", "source", args.features)
        if args.irreps is not None:
            put("corr", "irreps", IRREP_ALIASES.get(args.irreps, args.irreps))
    if cmd == "train":
        put("corr", "sampling", args.sampling)
    if cmd == "simulate":
        for key in ("steps", "dt", "T_set", "thermostat", "dump_interval"):
            put("md", key, getattr(args, key))
    if cmd == "analyze":
        put("stability", "T_set", args.T_set)
        put("stability", "mode", args.mode)
    return o


COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "corr": cmd_corr,
    "rdf": cmd_rdf,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args)).cross_check()
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        atomic_write(Path(cfg.out) / f"{args.command}_config.yaml", dump_config(cfg))
        return COMMANDS[args.command](cfg, args)
    except (CorrstabError, OSError, ValueError) as exc:
        print(f"corrstab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
