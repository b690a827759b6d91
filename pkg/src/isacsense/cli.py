"""Command-line harness: synth / run / sweep / verify."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .harness import ExperimentConfig, preset, run_cell, sweep
from .scene import synthesize_scene
from .grids import build_grids
from . import verify as verify_mod


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = preset(args.preset)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if getattr(args, "variant", None):
        overrides["variants"] = (args.variant,)
    if overrides:
        cfg = ExperimentConfig.from_dict({**json.loads(cfg.to_json()), **overrides})
    return cfg


def _add_common(p):
    p.add_argument("--config", help="experiment config JSON path")
    p.add_argument("--preset", choices=["paper", "desk"], default="desk")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory or file")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="isacsense",
        description="Simulate a MIMO-OFDM sensing link and run the joint "
                    "localization / channel estimators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="emit a ground-truth scene file")
    _add_common(p_synth)
    p_synth.add_argument("--snr", type=float, default=None)
    p_synth.add_argument("--overlap", type=int, default=None)

    p_run = sub.add_parser("run", help="single estimate; prints metrics JSON")
    _add_common(p_run)
    p_run.add_argument("--variant", default="mrf",
                       choices=["mrf", "iid", "genie", "non_relaxed", "omp"])
    p_run.add_argument("--snr", type=float, default=None)
    p_run.add_argument("--overlap", type=int, default=None)
    p_run.add_argument("--trial", type=int, default=0)

    p_sweep = sub.add_parser("sweep", help="full Monte Carlo grid to CSV")
    _add_common(p_sweep)

    p_verify = sub.add_parser("verify", help="oracle/property suite")
    _add_common(p_verify)

    args = parser.parse_args(argv)

    if args.command == "synth":
        cfg = _load_config(args)
        snr = args.snr if args.snr is not None else cfg.snr_db[0]
        overlap = args.overlap if args.overlap is not None else cfg.overlaps[0]
        _, ad_grid = build_grids(cfg.grid_config())
        scene = synthesize_scene(
            cfg.scene_config(snr, overlap),
            np.random.SeedSequence([cfg.seed, 101, overlap, 0]),
            ad_grid,
        )
        payload = json.dumps(scene.to_dict(), indent=1)
        if args.out:
            with open(args.out, "w") as f:
                f.write(payload)
            print(f"wrote scene to {args.out}")
        else:
            print(payload)
        return 0

    if args.command == "run":
        cfg = _load_config(args)
        snr = args.snr if args.snr is not None else cfg.snr_db[0]
        overlap = args.overlap if args.overlap is not None else cfg.overlaps[0]
        record = run_cell(cfg, args.variant, snr, overlap, args.trial)
        print(json.dumps(record.as_dict(), indent=1))
        return 0

    if args.command == "sweep":
        cfg = _load_config(args)
        done = []

        def progress(cell, record):
            done.append(cell)
            print(f"[{len(done)}] {cell} rmse_t={record.rmse_target:.3g} "
                  f"nmse_c={record.nmse_comm:.3g}", file=sys.stderr)

        out = sweep(cfg, progress=progress)
        print(f"results in {out}")
        return 0

    if args.command == "verify":
        ok = verify_mod.run_all(verbose=True)
        return 0 if ok else 1

    return 2


if __name__ == "__main__":
    sys.exit(main())
