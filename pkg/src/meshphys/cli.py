"""Command-line entry point: ``meshphys {synth,build,train,eval,ablate,gradcheck}``.

Exit codes: 0 success, 1 unexpected failure, 2 usage/configuration error,
3 data error (missing or inconsistent files), 4 numeric error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _cmd_synth(args) -> int:
    from .synth import MotionScript, SynthScenario, emit_dataset, emit_suite

    base = SynthScenario(target_faces=args.faces, fps=args.fps, duration=args.duration, f0=args.f0,
                         amplitude=args.amplitude, noise_sigma=args.noise,
                         illumination_drift=args.drift, motion=MotionScript(yaw=args.yaw),
                         seed=args.seed)
    if args.suite:
        counts = dict(zip(("train", "val", "test"), args.suite))
        path = emit_suite(base, args.out, counts, seed=args.seed)
        print(f"manifest {path}")
    else:
        entry = emit_dataset(base, args.out)
        print(json.dumps(entry, indent=2))
    return EXIT_OK


def _cmd_build(args) -> int:
    from .pipeline import DatasetManifest, build_video_graph, load_config, TrainConfig

    config = load_config(args.config) if args.config else TrainConfig()
    manifest = DatasetManifest.load(args.manifest)
    region = config.data.region_scheme()
    for entry in manifest.split(args.split):
        graph, valid = build_video_graph(entry, region, args.cache)
        print(f"built id={entry.id} shape={graph.shape} region={graph.region} "
              f"valid_frames={int(valid.sum())} occluded={graph.occlusion.mean():.3f}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .pipeline import DatasetManifest, TrainConfig, apply_overrides, load_config, train

    config = load_config(args.config) if args.config else TrainConfig()
    if args.set:
        config = apply_overrides(config, _parse_sets(args.set))
    result = train(config, DatasetManifest.load(args.manifest), args.out)
    print(f"checkpoint {result.checkpoint} best_epoch={result.best_epoch} "
          f"val_loss={result.best_val_loss:.6f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .pipeline import DatasetManifest, evaluate, format_report, load_config

    config = load_config(args.config) if args.config else None
    report = evaluate(args.checkpoint, DatasetManifest.load(args.manifest), config, args.split)
    print(format_report(report))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=2)
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .pipeline import DatasetManifest, TrainConfig, ablate, load_config, load_matrix

    config = load_config(args.config) if args.config else TrainConfig()
    rows = ablate(load_matrix(args.matrix), DatasetManifest.load(args.manifest), config, args.out,
                  seeds=tuple(args.seeds) if args.seeds else None)
    keys = list(rows[0])
    print("\t".join(keys))
    for r in rows:
        print("\t".join(f"{r[k]:.3f}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    worst = 0.0
    for name, err in run_suite(seeds=args.seeds):
        worst = max(worst, err)
        print(f"{name:32s} rel_err={err:.3e}")
    ok = worst < args.tol
    print(f"worst={worst:.3e} tol={args.tol:.0e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def _parse_sets(items) -> dict:
    import yaml

    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = yaml.safe_load(v)
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshphys", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-step loss breakdowns")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="emit a synthetic video (or a train/val/test suite)")
    s.add_argument("--out", required=True)
    s.add_argument("--faces", type=int, default=200)
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--duration", type=float, default=60.0)
    s.add_argument("--f0", type=float, default=1.2, help="pulse frequency in Hz")
    s.add_argument("--amplitude", type=float, default=0.02)
    s.add_argument("--noise", type=float, default=0.005)
    s.add_argument("--drift", type=float, default=0.01)
    s.add_argument("--yaw", type=float, default=20.0, help="yaw sweep amplitude in degrees")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--suite", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                   help="emit a suite with this many videos per split and a manifest")
    s.set_defaults(func=_cmd_synth)

    b = sub.add_parser("build", help="build STGraph caches for a manifest")
    b.add_argument("--manifest", required=True)
    b.add_argument("--cache", required=True)
    b.add_argument("--config")
    b.add_argument("--split")
    b.set_defaults(func=_cmd_build)

    t = sub.add_parser("train", help="train MeshPhys")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. --set data.edges=self_only")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--config")
    e.add_argument("--split", default="test")
    e.add_argument("--json", help="also write the full report here")
    e.set_defaults(func=_cmd_eval)

    a = sub.add_parser("ablate", help="train + evaluate every variant of a matrix file")
    a.add_argument("--matrix", required=True)
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, nargs="+")
    a.set_defaults(func=_cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .fileio import DataError
    from .mesh import TopologyError
    from .pipeline import NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except (DataError, TopologyError, FileNotFoundError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
