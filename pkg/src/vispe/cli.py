"""Command-line entry point: ``vispe <command> [flags]``.

Exit codes: 0 ok, 2 usage, 3 configuration, 4 numeric failure, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, evalsuite, trainer
from .dataio import DatasetFormatError
from .embedder import NumericError
from .trainer import MODES, ConfigError, TrainConfig

EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4, 5
GRID_SUBSAMPLE_SEED = 0

log = logging.getLogger("vispe")


def _floats(text: str) -> list[float]:
    return [float(s) for s in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(s) for s in text.replace(",", " ").split()]


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1))


def _load_config(args, mode=None) -> TrainConfig:
    overrides = {}
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if args.config:
        cfg = TrainConfig.from_file(args.config, mode)
        if overrides:
            cfg = TrainConfig(**{**cfg.__dict__, **overrides})
            cfg.validate()
        return cfg
    return TrainConfig.for_mode(mode or "vispe", **overrides)


def _seen_part(ds):
    train, seen_test, _ = dataio.split_seen_unseen(ds)
    return dataio.MultiviewDataset(
        sorted(train.objects + seen_test.objects, key=lambda o: o.object_id), ds.D, ds.seen_classes, ds.spec
    )


def cmd_gen(args) -> int:
    spec = dataio.parse_spec_file(args.spec)
    if args.seed is not None:
        spec = dataio.SyntheticSpec(**{**spec.__dict__, "seed": args.seed})
    ds = dataio.generate(spec)
    dataio.save(ds, args.out)
    print(f"wrote {len(ds)} objects, {ds.total_views} views to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args, args.mode)
    ds = dataio.load(args.data)
    train_part = dataio.split_seen_unseen(ds)[0]
    if len(train_part) < cfg.m:
        raise ConfigError(f"m={cfg.m} exceeds the {len(train_part)} training instances")
    state = trainer.init_state(cfg, train_part)
    trainer.run_epochs(state, train_part, cfg.epochs)
    trainer.checkpoint(state, args.out)
    last = state.history[-1]["mean_loss"] if state.history else float("nan")
    print(f"mode={cfg.mode} epochs={cfg.epochs} t={cfg.t} final mean loss {last:.4f} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ds = dataio.load(args.data)
    params = trainer.load_params(args.model)
    if params.arch.input_dim != ds.D:
        raise ConfigError(f"model expects D={params.arch.input_dim}, dataset has D={ds.D}")
    part = _seen_part(ds) if args.split == "seen" else dataio.split_seen_unseen(ds)[2]
    report = evalsuite.evaluate(params, part, args.split, seed=args.seed, trials=args.trials)
    out = report.to_dict()
    out["config"]["model"] = json.loads((Path(args.model) / "model.json").read_text())["config"]
    out["config"]["data"] = str(args.data)
    _write_json(args.report, out)
    print(f"{args.split}: knn={report.knn_accuracy:.4f} (k={report.k_used}) "
          f"R@1={report.recall_at[1]:.4f} nmi={report.nmi:.4f}")
    return 0


def _gradcheck_data(seed):
    spec = dataio.SyntheticSpec(n_classes=4, seen_classes=3, objects_per_class=4, views_min=2,
                                views_max=4, seed=seed)
    return dataio.split_seen_unseen(dataio.generate(spec))[0]


def cmd_gradcheck(args) -> int:
    modes = MODES if args.mode == "all" else (args.mode,)
    worst = 0.0
    for mode in modes:
        errs = []
        for s in range(args.seeds):
            seed = args.seed + s
            ds = _gradcheck_data(seed)
            cfg = TrainConfig.for_mode(mode, seed=seed, m=min(args.m, len(ds)))
            errs.append(trainer.check_mode_gradients(ds, cfg, args.eps, args.coords))
        err = max(errs)
        worst = max(worst, err)
        status = "ok" if err < args.tol else "FAIL"
        print(f"{mode:10s} max relative error {err:.3e}  [{status}]")
    if worst >= args.tol and args.strict:
        return EXIT_NUMERIC
    return 0


def _unseen_accuracy(cfg, train_part, unseen) -> float:
    params, _ = trainer.train(cfg, train_part)
    return evalsuite.knn_accuracy(params, unseen)


def run_threshold_ablation(ds, thresholds, n_seeds, base: TrainConfig) -> list[dict]:
    train_part, _, unseen = dataio.split_seen_unseen(ds)
    rows = []
    for t in sorted(thresholds):
        accs = []
        for s in range(n_seeds):
            cfg = TrainConfig(**{**base.__dict__, "mode": "mvspe", "alpha": 0.0, "t": t,
                                 "seed": base.seed + s})
            cfg.validate()
            accs.append(_unseen_accuracy(cfg, train_part, unseen))
            log.info("t=%g seed=%d acc=%.4f", t, cfg.seed, accs[-1])
        rows.append({"threshold": t, "mean": float(np.mean(accs)), "std": float(np.std(accs)),
                     "accuracies": accs, "seeds": [base.seed + s for s in range(n_seeds)]})
    return rows


def cmd_ablate_threshold(args) -> int:
    base = _load_config(args, "mvspe")
    ds = dataio.load(args.data)
    rows = run_threshold_ablation(ds, args.thresholds, args.seeds, base)
    _write_json(args.report, {"mode": "mvspe", "config": base.to_dict(), "rows": rows})
    for r in rows:
        print(f"t={r['threshold']:.3g}  unseen knn {r['mean']:.4f} +- {r['std']:.4f}")
    return 0


def run_grid(ds, objects, views, base: TrainConfig, subsample_seed: int = GRID_SUBSAMPLE_SEED):
    train_part, _, unseen = dataio.split_seen_unseen(ds)
    grid = []
    for n_obj in objects:
        row = []
        for n_view in views:
            sub = dataio.subsample(train_part, n_obj, n_view, subsample_seed)
            cfg = TrainConfig(**{**base.__dict__, "m": min(base.m, len(sub))})
            row.append(_unseen_accuracy(cfg, sub, unseen))
        grid.append(row)
    return grid


def _nondecreasing(seq) -> bool:
    return all(b >= a for a, b in zip(seq, seq[1:]))


def cmd_ablate_grid(args) -> int:
    base = _load_config(args, "vispe")
    ds = dataio.load(args.data)
    grid = run_grid(ds, args.objects, args.views, base)
    report = {
        "mode": base.mode,
        "config": base.to_dict(),
        "subsample_seed": GRID_SUBSAMPLE_SEED,
        "objects_per_class": args.objects,
        "views_per_object": args.views,
        "accuracy": grid,
        # reported, not enforced
        "monotone_in_objects": all(_nondecreasing([r[j] for r in grid]) for j in range(len(args.views))),
        "monotone_in_views": all(_nondecreasing(r) for r in grid),
    }
    _write_json(args.report, report)
    for n_obj, row in zip(args.objects, grid):
        print(f"objects={n_obj:<4d} " + " ".join(f"{a:.3f}" for a in row))
    return 0


def cmd_export(args) -> int:
    ds = dataio.load(args.data)
    params = trainer.load_params(args.model)
    if params.arch.input_dim != ds.D:
        raise ConfigError(f"model expects D={params.arch.input_dim}, dataset has D={ds.D}")
    evalsuite.export_embeddings(params, ds, args.out)
    print(f"exported {ds.total_views} embeddings to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vispe", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multiview dataset")
    p.add_argument("--spec", required=True, help="key = value dataset spec file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_u64)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train an embedding on the seen-class training objects")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=_u64)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="KNN / recall / NMI / few-shot report")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("seen", "unseen"), default="unseen")
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with central differences")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=_u64, default=0)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--mode", choices=MODES + ("all",), default="all")
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--m", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--no-strict", dest="strict", action="store_false",
                   help="report errors without failing (useful for large --eps)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate-threshold", help="unseen accuracy versus randomization threshold")
    p.add_argument("--thresholds", type=_floats, required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_ablate_threshold, seed=None)

    p = sub.add_parser("ablate-grid", help="unseen accuracy over objects-per-class x views-per-object")
    p.add_argument("--objects", type=_ints, required=True)
    p.add_argument("--views", type=_ints, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=_u64)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_ablate_grid)

    p = sub.add_parser("export", help="write view embeddings for external tools")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
