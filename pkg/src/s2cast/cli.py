"""Command-line entry point: ``s2cast <subcommand> ...``.

Exit codes: 0 success, 2 usage or config error, 3 data validation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ABLATIONS, ConfigError, TrainConfig
from .data import (Normalizer, fit_normalizer, load_dataset, save_dataset, split_bounds, stack_windows,
                   synth_generate, window_starts)
from .model import attention_maps, forward, load_checkpoint, save_checkpoint
from .numerics import NumericalError
from .partition import PartitionError
from .spatial_graph import DataValidationError, read_stations_csv
from .spherical_harmonics import harmonic_index
from .train_eval import (VARIANT_NAMES, TrainingDiverged, complexity_probe, evaluate, preprocess,
                         restore_prepared, train)

log = logging.getLogger("s2cast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_KNN = [8, 0.9]


class UsageError(Exception):
    pass


def _dump_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# config handling

_OVERRIDES = [
    ("--d-model", "d_model", int), ("--levels", "levels", int), ("--p0", "p0", int),
    ("--l-max", "l_max", int), ("--t-in", "t_in", int), ("--f-out", "f_out", int),
    ("--heads", "heads", int), ("--d-max", "d_max", int), ("--epsilon-km", "epsilon_km", float),
    ("--imbalance", "imbalance", float), ("--lr", "lr", float), ("--batch-size", "batch_size", int),
    ("--epochs", "epochs", int), ("--patience", "patience", int),
    ("--steps-per-epoch", "steps_per_epoch", int), ("--stride", "stride", int), ("--seed", "seed", int),
]


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags below override it")
    for flag, dest, typ in _OVERRIDES:
        p.add_argument(flag, dest=dest, type=typ)
    p.add_argument("--epsilon-knn", dest="epsilon_knn", type=float, nargs=2, metavar=("K", "Q"),
                   help="derive the edge radius from the Q-quantile of K-th neighbour distances")
    p.add_argument("--ablation", dest="ablations", action="append", choices=ABLATIONS)


def _config(args) -> TrainConfig:
    data = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for _, dest, _ in _OVERRIDES:
        val = getattr(args, dest, None)
        if val is not None:
            data[dest] = val
    if getattr(args, "epsilon_knn", None) is not None:
        data["epsilon_knn"] = args.epsilon_knn
    if getattr(args, "ablations", None):
        data["ablations"] = sorted(set(args.ablations))
    if data.get("epsilon_km") is None and data.get("epsilon_knn") is None:
        data["epsilon_knn"] = list(DEFAULT_KNN)
    return TrainConfig.from_dict(data)


def _load(args):
    return load_dataset(args.stations, args.series)


def _restore(args):
    params, header = load_checkpoint(args.checkpoint)
    ds = _load(args)
    if list(ds.stations.ids) != header["station_ids"]:
        raise DataValidationError("dataset stations differ from the checkpoint's stations")
    if ds.c != params.n_channels:
        raise DataValidationError(f"dataset has {ds.c} channels, checkpoint expects {params.n_channels}")
    prepared = restore_prepared(ds.stations, params.cfg, header["epsilon_km"], header["assignments"])
    return params, header, ds, prepared, Normalizer.from_json(header["normalizer"])


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    ds = synth_generate(args.n, args.steps, args.seed, args.length_scale, args.noise, n_channels=args.channels,
                        ar_coef=args.ar, cap_radius_deg=args.cap_radius)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / "stations.csv", out / "series.bin")
    log.info("wrote %s and %s", out / "stations.csv", out / "series.bin")
    return EXIT_OK


def _level_summaries(prepared) -> list[dict]:
    rows = []
    for i, lvl in enumerate(prepared.hierarchy.levels):
        part = lvl.partition
        rows.append({"level": i + 1, "p": part.p, "m": lvl.layout.m, "edge_cut": part.edge_cut(prepared.graph),
                     "sizes": part.sizes.tolist()})
    return rows


def cmd_partition(args) -> int:
    cfg = _config(args)
    stations = read_stations_csv(args.stations)
    t0 = time.perf_counter()
    prepared = preprocess(stations, cfg)
    wall = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for summary, lvl in zip(_level_summaries(prepared), prepared.hierarchy.levels):
        doc = dict(summary, assignment=lvl.partition.assignment.tolist(), station_ids=list(stations.ids))
        _dump_json(doc, out / f"partition_level{summary['level']}.json")
    print(json.dumps({"n": len(stations), "epsilon_km": prepared.epsilon_km, "edges": prepared.graph.num_edges,
                      "levels": [lvl.partition.p for lvl in prepared.hierarchy.levels],
                      "wall_seconds": round(wall, 3)}))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _config(args)
    stations = read_stations_csv(args.stations)
    t0 = time.perf_counter()
    prepared = preprocess(stations, cfg)
    wall = time.perf_counter() - t0
    report = {"n": len(stations), "epsilon_km": prepared.epsilon_km, "edges": prepared.graph.num_edges,
              "levels": _level_summaries(prepared), "seconds": prepared.seconds, "wall_seconds": wall}
    if args.dump_sh:
        names = [f"Y{l}_{m}" for l, m in harmonic_index(cfg.l_max)]
        with open(args.dump_sh, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", *names])
            for sid, row in zip(stations.ids, prepared.basis):
                w.writerow([sid, *(repr(float(v)) for v in row)])
    _dump_json(report, args.out)
    return EXIT_OK


def _checkpoint_extra(prepared, normalizer, dataset) -> dict:
    return {
        "epsilon_km": prepared.epsilon_km,
        "assignments": [lvl.partition.assignment.tolist() for lvl in prepared.hierarchy.levels],
        "normalizer": normalizer.to_json(),
        "station_ids": list(dataset.stations.ids),
        "channel_names": list(dataset.channel_names),
    }


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = ["full", *ABLATIONS] if args.ablations_table else ["full"]
    rows = []
    for name in variants:
        vcfg = cfg if name == "full" else cfg.with_overrides(ablations=sorted(set(cfg.ablations) | {name}))
        stem = "model" if name == "full" else f"model_{name}"
        t0 = time.perf_counter()
        prepared = preprocess(ds.stations, vcfg)
        try:
            params, report, normalizer, prepared = train(vcfg, ds, prepared)
        except TrainingDiverged as exc:
            extra = _checkpoint_extra(prepared, fit_normalizer(ds, vcfg.split), ds)
            save_checkpoint(out / f"{stem}.last_good.ckpt", exc.params, extra)
            raise
        log.info("%s: test MAE %.4f in %.1fs", name, report.mae, time.perf_counter() - t0)
        save_checkpoint(out / f"{stem}.ckpt", params, _checkpoint_extra(prepared, normalizer, ds))
        _dump_json(report.to_json(), out / ("metrics.json" if name == "full" else f"metrics_{name}.json"))
        rows.append((VARIANT_NAMES[name] or "full", report))
    if args.ablations_table:
        with open(out / "ablations.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "mae", "mse", "n_params", "score_entries_per_sample"])
            for name, rep in rows:
                w.writerow([name, repr(rep.mae), repr(rep.model["mse_overall"]), rep.n_params,
                            rep.score_entries_per_sample])
            w.writerow(["persistence", repr(rows[0][1].persistence["mae_overall"]),
                        repr(rows[0][1].persistence["mse_overall"]), 0, 0])
    return EXIT_OK


def cmd_eval(args) -> int:
    params, header, ds, prepared, normalizer = _restore(args)
    report = evaluate(params, prepared, ds, normalizer, args.split)
    doc = report.to_json()
    for key in ("train_loss", "val_mae", "best_epoch"):
        doc.pop(key)
    _dump_json(doc, args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    params, header, ds, prepared, normalizer = _restore(args)
    cfg = params.cfg
    start = ds.t_total - cfg.t_in if args.start is None else args.start
    if not 0 <= start <= ds.t_total - cfg.t_in:
        raise UsageError(f"--start must lie in [0, {ds.t_total - cfg.t_in}]")
    z = normalizer.apply(ds.series[:, start:start + cfg.t_in, :])
    pred = normalizer.invert(forward(params, prepared.plans, prepared.basis, z[None]).value[0])
    first = start + cfg.t_in
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "t", *ds.channel_names])
        for i, sid in enumerate(ds.stations.ids):
            for f in range(cfg.f_out):
                w.writerow([sid, first + f, *(repr(float(v)) for v in pred[i, f])])
    return EXIT_OK


def cmd_export_attn(args) -> int:
    params, header, ds, prepared, normalizer = _restore(args)
    cfg = params.cfg
    span = split_bounds(ds.t_total, cfg.split)[args.split]
    starts = window_starts(span, cfg.t_in, cfg.f_out, cfg.stride)[: args.samples]
    x, _ = stack_windows(normalizer.apply(ds.series), starts, cfg.t_in, cfg.f_out)
    maps = attention_maps(params, prepared.plans, prepared.basis, x)
    ids = np.asarray(ds.stations.ids, dtype=object)
    samples = []
    for b, s in enumerate(starts.tolist()):
        levels = []
        for li, (plan, lvl) in enumerate(zip(prepared.plans, maps)):
            blocks = []
            for p, members in enumerate(prepared.hierarchy.levels[li].partition.parts):
                block = {"part": p, "station_ids": ids[members].tolist()}
                if "intra" in lvl:
                    block["intra"] = lvl["intra"][b, p].tolist()
                blocks.append(block)
            entry = {"level": li + 1, "p": plan.p, "m": plan.m, "parts": blocks}
            if "inter" in lvl:
                entry["inter"] = lvl["inter"][b].tolist()
            levels.append(entry)
        samples.append({"window_start": s, "levels": levels})
    _dump_json({"split": args.split, "samples": samples}, args.out)
    return EXIT_OK


def cmd_probe(args) -> int:
    grid = [int(v) for v in args.p_grid.split(",") if v.strip()]
    res = complexity_probe(args.n, grid, levels=args.levels, seed=args.seed, measure=not args.analytic_only)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["P", "analytic_cost", "measured_entries"])
        for row in res["rows"]:
            w.writerow([row["P"], repr(row["analytic_cost"]), row.get("measured_entries", "")])
    print(json.dumps({"n": res["n"], "argmin_P": res["argmin_P"], "optimum_P": res["optimum_P"]}))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="s2cast", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic station dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length-scale", type=float, default=300.0, help="spatial correlation length (km)")
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--ar", type=float, default=0.99, help="AR(1) coefficient of the latent field")
    p.add_argument("--cap-radius", type=float, default=6.0, help="radius of the station cap (degrees)")
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--out", required=True, help="directory for stations.csv and series.bin")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("partition", help="build the nested partition hierarchy")
    p.add_argument("--stations", required=True)
    p.add_argument("--out", required=True, help="directory for partition_level<k>.json")
    _add_config_args(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("preprocess", help="graph, partitions, SPD tables and harmonic basis")
    p.add_argument("--stations", required=True)
    p.add_argument("--out", default="-", help="JSON summary (default stdout)")
    p.add_argument("--dump-sh", help="write the harmonic basis as CSV")
    _add_config_args(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train and write checkpoint plus test metrics")
    p.add_argument("--stations", required=True)
    p.add_argument("--series", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ablations-table", action="store_true",
                   help="also train every single-component ablation and write ablations.csv")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in [("eval", cmd_eval, "metrics JSON for a split"),
                                 ("predict", cmd_predict, "forecast CSV for one window"),
                                 ("export-attn", cmd_export_attn, "attention maps as JSON")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--stations", required=True)
        p.add_argument("--series", required=True)
        if name == "predict":
            p.add_argument("--start", type=int, help="first input step (default: the last T steps)")
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
            p.add_argument("--out", default="-")
        if name == "export-attn":
            p.add_argument("--samples", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("probe", help="attention cost curve over a grid of part counts")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p-grid", default="25,50,100,200,400")
    p.add_argument("--levels", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--analytic-only", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)
    return ap


def _thread_cap() -> int | None:
    raw = os.environ.get("S2CAST_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"S2CAST_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"S2CAST_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_thread_cap()):
            return args.func(args)
    except (UsageError, ConfigError, PartitionError) as exc:
        print(f"s2cast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, OSError, ValueError, KeyError) as exc:
        print(f"s2cast: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"s2cast: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
