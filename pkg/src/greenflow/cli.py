"""Command-line front end.

Subcommands: generate, simulate, iv, dataset build, train, benchmark, fom.
Every run writes its outputs plus a JSON manifest (resolved inputs, seeds,
artifact hashes, wall-clock timings). Exit codes: 0 success, 1 usage error,
2 numerical failure. Logs go to stderr; data only to files.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import neuralnet as nn
from . import pipeline as pl
from .device import (DeviceSpec, build_device, format_device_config,
                     load_device_config)
from .negf import NegfConfig
from .scf import ScfConfig, run_scf

log = logging.getLogger("greenflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        raise UsageError(message)


def _hash_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, subcommand, resolved, seeds, artifacts, timings):
    manifest = {
        "subcommand": subcommand,
        "resolved": resolved,
        "seeds": seeds,
        "artifacts": {os.path.basename(p): _hash_file(p) for p in artifacts},
        "timings": timings,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_spec(args) -> DeviceSpec:
    if getattr(args, "config", None):
        return load_device_config(args.config)
    return DeviceSpec()


def _scf_config(args) -> ScfConfig:
    negf = NegfConfig(n_energy=getattr(args, "energy_points", 400))
    return ScfConfig(mixing_alpha=getattr(args, "mixing", 0.3),
                     tol_potential=getattr(args, "tol", 1e-4),
                     max_iterations=getattr(args, "max_iterations", 200),
                     record_snapshots=True, negf=negf)


def _write_csv(path, columns, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in row])


def _read_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [dict(zip(header, r)) for r in reader]
    return header, rows


def _parse_sweep_values(text: str):
    text = text.strip()
    if ":" in text:
        start_s, step_s, stop_s = text.split(":")
        start, step, stop = float(start_s), float(step_s), float(stop_s)
        n = int(round((stop - start) / step)) + 1
        return tuple(round(start + k * step, 9) for k in range(n))
    return tuple(float(v) for v in text.split(","))


def _load_sweep(path):
    vg, vd = pl.DEFAULT_VG_SWEEP, pl.DEFAULT_VD_SWEEP
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key = key.strip()
            if key == "vg":
                vg = _parse_sweep_values(val)
            elif key == "vd":
                vd = _parse_sweep_values(val)
            else:
                raise UsageError(f"sweep file: unknown key {key!r}")
    return vg, vd


def _save_fields_bin(path, *fields):
    blob = np.concatenate([np.ascontiguousarray(f, dtype="<f8").ravel()
                           for f in fields])
    with open(path, "wb") as fh:
        fh.write(blob.tobytes())


def _load_models(model_dir):
    mv = nn.load_model(os.path.join(model_dir, "potential"))
    mn = nn.load_model(os.path.join(model_dir, "charge"))
    return mv, mn


# ---------------------------------------------------------------------------
# subcommands


def _cmd_generate(args):
    t0 = time.time()
    spec = load_device_config(args.config)
    grid = build_device(spec)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "spec": {k: getattr(spec, k) for k in spec.__dataclass_fields__},
        "nx": grid.nx, "ny": grid.ny, "spacing": grid.spacing,
        "region": grid.region.tolist(),
        "donor_density": grid.donor_density.tolist(),
        "permittivity": grid.permittivity.tolist(),
        "gate_mask": grid.gate_mask.astype(int).tolist(),
    }
    grid_path = os.path.join(out_dir, "grid.json")
    with open(grid_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")
    _write_manifest(out_dir, "generate",
                    {"config": format_device_config(spec)}, {},
                    [grid_path], {"wall_s": time.time() - t0})
    log.info("grid %dx%d written to %s", grid.nx, grid.ny, grid_path)
    return 0


def _cmd_simulate(args):
    t0 = time.time()
    spec = _load_spec(args)
    grid = build_device(spec)
    cfg = _scf_config(args)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)

    if args.warm_start:
        mv, mn = _load_models(args.warm_start)
        result, total_iters = pl.warm_start_run(grid, mv, mn, args.vg, args.vd, cfg)
        mode = "warm"
    else:
        result = run_scf(grid, args.vg, args.vd, cfg=cfg)
        total_iters, mode = result.iterations, "cold"

    fields_path = os.path.join(out_dir, "fields.bin")
    _save_fields_bin(fields_path, result.potential.values, result.density.values)
    summary = {
        "vg": args.vg, "vd": args.vd, "mode": mode,
        "converged": result.converged,
        "iterations": total_iters,
        "loop_iterations": result.iterations,
        "current_a": result.current,
        "residual_trace": result.residual_trace,
        "grid_shape": [grid.nx, grid.ny],
    }
    result_path = os.path.join(out_dir, "result.json")
    with open(result_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out_dir, "simulate",
                    {"config": format_device_config(spec), "vg": args.vg,
                     "vd": args.vd, "mode": mode}, {},
                    [fields_path, result_path], {"wall_s": time.time() - t0})
    log.info("%s run vg=%.3f vd=%.3f: %d iterations, I=%.4e A",
             mode, args.vg, args.vd, total_iters, result.current)
    return 0


def _cmd_iv(args):
    t0 = time.time()
    spec = _load_spec(args)
    grid = build_device(spec)
    cfg = _scf_config(args)
    vg_values = _parse_sweep_values(args.vg) if args.vg else pl.DEFAULT_VG_SWEEP
    rows = []
    for vg in vg_values:
        res = run_scf(grid, float(vg), args.vd, cfg=cfg)
        rows.append((float(vg), args.vd, res.current, res.iterations,
                     int(res.converged)))
        log.info("vg=%.3f: I=%.4e A (%d iterations)", vg, res.current,
                 res.iterations)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(args.out, ("vg", "vd", "current_a", "iterations", "converged"),
               rows)
    _write_manifest(out_dir, "iv",
                    {"config": format_device_config(spec), "vd": args.vd}, {},
                    [args.out], {"wall_s": time.time() - t0})
    return 0


def _cmd_dataset(args):
    if args.action != "build":
        raise UsageError("dataset supports only the 'build' action")
    t0 = time.time()
    spec = load_device_config(args.config)
    vg, vd = _load_sweep(args.sweep) if args.sweep else (
        pl.DEFAULT_VG_SWEEP, pl.DEFAULT_VD_SWEEP)
    ds = pl.build_dataset(spec, vg_values=vg, vd_values=vd, seed=args.seed,
                          workers=args.workers)
    pl.save_dataset(ds, args.out)
    artifacts = [os.path.join(args.out, p)
                 for p in sorted(os.listdir(args.out))]
    _write_manifest(args.out, "dataset-build",
                    {"config": format_device_config(spec),
                     "vg": list(vg), "vd": list(vd)},
                    {"split_seed": args.seed}, artifacts,
                    {"wall_s": time.time() - t0})
    log.info("dataset with %d samples written to %s", len(ds.samples), args.out)
    return 0


def _cmd_train(args):
    t0 = time.time()
    ds = pl.load_dataset(args.dataset)
    cfg = pl.TrainConfig(epochs=args.epochs, lr=args.lr,
                         batch_size=args.batch, seed=args.seed,
                         dropout_rate=args.dropout)
    model_v, model_n, history = pl.train(ds, cfg)
    os.makedirs(args.out, exist_ok=True)
    nn.save_model(model_v, os.path.join(args.out, "potential"))
    nn.save_model(model_n, os.path.join(args.out, "charge"))
    loss_path = os.path.join(args.out, "loss_history.csv")
    _write_csv(loss_path, ("model", "epoch", "train_mse", "heldout_mse"),
               history)
    artifacts = [loss_path]
    for sub in ("potential", "charge"):
        for f in (nn.MANIFEST_FILE, nn.WEIGHTS_FILE):
            artifacts.append(os.path.join(args.out, sub, f))
    _write_manifest(args.out, "train",
                    {"dataset": os.path.abspath(args.dataset),
                     "epochs": args.epochs, "lr": args.lr,
                     "batch": args.batch},
                    {"init_seed": args.seed}, artifacts,
                    {"wall_s": time.time() - t0})
    final = {m: [h for h in history if h[0] == m][-1] for m in
             ("potential", "charge")}
    log.info("training done; final held-out MSE: potential %.3e, charge %.3e",
             final["potential"][3], final["charge"][3])
    return 0


def _cmd_benchmark(args):
    t0 = time.time()
    spec = load_device_config(args.config)
    models = _load_models(args.model)
    cfg = _scf_config(args)
    vg_values = _parse_sweep_values(args.vg) if args.vg else \
        tuple(round(0.05 * k, 9) for k in range(17))
    vd_values = _parse_sweep_values(args.vd) if args.vd else (0.05, 0.7)
    rows = pl.benchmark(spec, models, vg_values, vd_values, cfg=cfg,
                        workers=args.workers)
    csv_rows = [tuple(r[c] for c in pl.BENCHMARK_COLUMNS) for r in rows]
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    os.makedirs(out_dir, exist_ok=True)
    _write_csv(args.out, pl.BENCHMARK_COLUMNS, csv_rows)
    _write_manifest(out_dir, "benchmark",
                    {"config": format_device_config(spec),
                     "model": os.path.abspath(args.model),
                     "vg": list(vg_values), "vd": list(vd_values)}, {},
                    [args.out], {"wall_s": time.time() - t0})
    log.info("mean iteration reduction: %.1f%%", pl.mean_reduction(rows))
    return 0


def _cmd_fom(args):
    _, rows = _read_csv(args.iv)
    if not rows:
        raise UsageError("empty I-V file")
    vd_groups = {}
    for r in rows:
        vd_groups.setdefault(r["vd"], []).append(r)
    spec = _load_spec(args)
    w_over_l = spec.width_nm / spec.channel_length
    lines = []
    for vd, grp in sorted(vd_groups.items(), key=lambda kv: float(kv[0])):
        vg = np.array([float(r["vg"]) for r in grp])
        cur = np.array([float(r["current_a"]) for r in grp])
        fom = pl.extract_fom(vg, cur, w_over_l)
        lines.append(f"vd={float(vd):g}: I_ON={fom['I_ON']:.6e} A  "
                     f"I_OFF={fom['I_OFF']:.6e} A  "
                     f"SS={fom['SS_mV_dec']:.2f} mV/dec  "
                     f"V_TH={fom['V_TH']:.4f} V")
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="greenflow",
                     description="Ballistic NEGF/Poisson nanosheet simulator "
                                 "with an autoencoder warm start")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate", help="discretize a device config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("simulate", help="one self-consistent bias point")
    p.add_argument("--vg", type=float, required=True)
    p.add_argument("--vd", type=float, required=True)
    p.add_argument("--config")
    p.add_argument("--warm-start", dest="warm_start",
                   help="model directory for a warm-started run")
    p.add_argument("--out", required=True)
    _add_scf_flags(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("iv", help="gate sweep at fixed drain bias")
    p.add_argument("--config")
    p.add_argument("--vd", type=float, required=True)
    p.add_argument("--vg", help="start:step:stop or comma list")
    p.add_argument("--out", required=True)
    _add_scf_flags(p)
    p.set_defaults(func=_cmd_iv)

    p = sub.add_parser("dataset", help="dataset operations")
    p.add_argument("action", choices=["build"])
    p.add_argument("--config", required=True)
    p.add_argument("--sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dataset)

    p = sub.add_parser("train", help="train the field predictors")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dropout", type=float, default=nn.DEFAULT_DROPOUT)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("benchmark", help="cold vs warm iteration counts")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--vg", help="start:step:stop or comma list")
    p.add_argument("--vd", help="comma list of drain biases")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_scf_flags(p)
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("fom", help="figures of merit from an I-V CSV")
    p.add_argument("--iv", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_fom)

    return parser


def _add_scf_flags(p):
    p.add_argument("--mixing", type=float, default=0.3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iterations", dest="max_iterations", type=int,
                   default=200)
    p.add_argument("--energy-points", dest="energy_points", type=int,
                   default=400)


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
