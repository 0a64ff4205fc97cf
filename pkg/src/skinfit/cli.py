"""Command-line entry point: ``skinfit <subcommand> ...``.

Exit codes: 0 success, 1 invalid input (bad flags, files or config), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .fileio import FormatError
from .rig import RigError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def worker_count() -> int:
    raw = os.environ.get("SKINFIT_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SKINFIT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("SKINFIT_THREADS must be >= 1")
    return n


def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the config)")
    p.add_argument("--config", type=Path, default=None, help="TOML training config")
    p.add_argument("--out", type=Path, default=None, help="output path")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="skinfit", description="Articulated template fitting with LBS self-supervision.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scan dataset")
    _common(p)
    p.add_argument("--spec", default="hand3", help="toy rig preset")
    p.add_argument("--sampler", default="uniform", choices=["uniform", "touching", "crossed"])
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--holdout", type=int, default=50)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--sigma", type=float, default=0.005)
    p.add_argument("--modality", action="append", default=None, metavar="THICKNESS,LENGTH",
                   help="template variant multipliers (repeatable)")

    p = sub.add_parser("pretrain-seg", help="pretrain the segmenter on uniform poses")
    _common(p)
    p.add_argument("--rig", type=Path, default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("train", help="joint training on a dataset")
    _common(p)
    p.add_argument("--rig", type=Path, default=None)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--segnet", type=Path, default=None, help="pretrained segmenter checkpoint (skips pretraining)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("fit", help="fit one cloud with a trained run")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--cloud", type=Path, required=True)

    p = sub.add_parser("eval", help="evaluate a trained run on a dataset split")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="holdout", choices=["holdout", "train", "all"])
    p.add_argument("--pairs", type=int, default=400)

    p = sub.add_parser("gradcheck", help="finite-difference gradient property suite")
    _common(p)
    p.add_argument("--instances", type=int, default=20)
    return ap


def _config(args):
    from .trainer import TrainConfig, load_config

    config, paths = (load_config(args.config) if args.config else (TrainConfig(), {}))
    doc = config.to_dict()
    if args.seed is not None:
        doc["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        doc["pretrain_steps" if args.command == "pretrain-seg" else "steps"] = args.steps
    doc["workers"] = worker_count()
    return TrainConfig.from_dict(doc), paths


def _need(value, flag: str) -> Path:
    if value is None:
        raise UsageError(f"missing required path {flag}")
    path = Path(value)
    if not path.exists():
        raise UsageError(f"{flag}: {path} does not exist")
    return path


def cmd_synth(args) -> int:
    from .synth import make_dataset

    if args.out is None:
        raise UsageError("missing required path --out")
    modalities = ((1.0, 1.0),)
    if args.modality:
        try:
            modalities = tuple(tuple(float(v) for v in m.split(",")) for m in args.modality)
        except ValueError:
            raise UsageError("--modality expects THICKNESS,LENGTH") from None
        if any(len(m) != 2 for m in modalities):
            raise UsageError("--modality expects THICKNESS,LENGTH")
    seed = 0 if args.seed is None else args.seed
    out = make_dataset(args.out, args.spec, args.sampler, args.count, seed, args.holdout,
                       args.points, modalities, args.sigma)
    print(f"wrote {args.count} scans to {out}")
    return EXIT_OK


def cmd_pretrain_seg(args) -> int:
    from . import autodiff as ad
    from .rig import load_rig
    from .trainer import pretrain_segmentation

    config, paths = _config(args)
    rig = load_rig(_need(args.rig or paths.get("rig"), "--rig"))
    out = args.out or Path(paths.get("out", "segnet.json"))
    seg, acc = pretrain_segmentation(rig, config, log_every=max(config.pretrain_steps // 10, 1), log=print)
    out = Path(out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "segnet.json"
    ad.save_params(out, seg.params, {"model": "segnet", "holdout_accuracy": acc})
    print(f"holdout accuracy {acc:.4f}; wrote {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import autodiff as ad
    from .rig import load_rig
    from .synth import load_dataset
    from .trainer import Models, Trainer, pretrain_segmentation

    config, paths = _config(args)
    rig_path = _need(args.rig or paths.get("rig"), "--rig")
    data_path = _need(args.data or paths.get("data"), "--data")
    out = args.out or paths.get("out")
    if out is None:
        raise UsageError("missing required path --out")
    rig = load_rig(rig_path)
    data = load_dataset(data_path)
    if data.rig.vertices.shape != rig.vertices.shape:
        raise UsageError("--data was generated for a different rig template")
    models = Models.create(rig, config)
    log = None if args.quiet else print
    if args.segnet is not None:
        params, _ = ad.load_params(_need(args.segnet, "--segnet"))
        models.segnet.load_state(params)
    elif config.lambda_s > 0 and config.pretrain_steps > 0:
        pretrain_segmentation(rig, config, models.segnet, log_every=max(config.pretrain_steps // 10, 1), log=log)
    clouds = [s.points for s in data.subset("train")]
    trainer = Trainer(rig, clouds, config, models, out_dir=out)
    trainer.run(log=log, log_every=max(config.steps // 20, 1))
    print(f"wrote run to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .trainer import fit, load_run

    models, rig, _ = load_run(_need(args.ckpt, "--ckpt"))
    cloud, _ = fileio.load_cloud(_need(args.cloud, "--cloud"))
    if len(cloud) == 0:
        raise UsageError("--cloud is empty")
    result = fit(models, rig, cloud)
    out = Path(args.out or "fit")
    out.mkdir(parents=True, exist_ok=True)
    (out / "pose.json").write_text(json.dumps({"theta": result.theta.tolist(),
                                               "translation": result.translation.tolist()}, indent=1))
    fileio.save_mesh(out / "u_d.obj", result.u_d, rig.faces)
    fileio.save_mesh(out / "v_d.obj", result.v_d, rig.faces)
    fileio.save_cloud(out / "labels.ply", cloud, result.labels)
    print(f"wrote fit to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .eval import evaluate
    from .synth import load_dataset
    from .trainer import load_run

    models, rig, _ = load_run(_need(args.ckpt, "--ckpt"))
    data = load_dataset(_need(args.data, "--data"))
    scans = data.scans if args.split == "all" else data.subset(args.split)
    if not scans:
        raise UsageError(f"--data has no {args.split} scans")
    sources = [data.modality_rig(i) for i in range(len(data.modalities))]
    seed = 0 if args.seed is None else args.seed
    report = evaluate(models, rig, scans, sources, n_pairs=args.pairs, seed=seed)
    out = Path(args.out or "report.json")
    report.save(out)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "per_scan"}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import COMPOSITE_CHECKS, op_suite

    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    results = op_suite(rng, args.instances)
    for name, check in COMPOSITE_CHECKS.items():
        results[name] = max(check(rng) for _ in range(args.instances))
    ok = True
    for name, err in results.items():
        flag = "ok" if err <= 1e-4 else "FAIL"
        ok &= err <= 1e-4
        print(f"{name:20s} max rel err {err:.3e}  {flag}")
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-seg": cmd_pretrain_seg,
    "train": cmd_train,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    from .trainer import ConfigError

    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    except (ConfigError, FormatError, RigError, FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        print(f"skinfit: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"skinfit: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
