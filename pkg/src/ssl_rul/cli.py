"""Command-line front end: generate -> pretrain -> finetune -> evaluate -> experiment."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, nn
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import build_dataset, load_dataset, save_dataset
from .evaluation import GridSpec, TestProtocolConfig, evaluate_rul, run_experiment_grid
from .fatigue import ConfigError, MaterialConfig
from .training import FINETUNE_DEFAULTS, PRETRAIN_DEFAULTS, FitError, TrainConfig, finetune, pretrain

log = logging.getLogger("ssl_rul")

ENV_OUT = "SSL_RUL_OUT"
ENV_JOBS = "SSL_RUL_JOBS"


class CLIError(Exception):
    pass


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CLIError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise CLIError(f"{path}: invalid JSON ({e})") from None


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args):
    out = args.out or os.environ.get(ENV_OUT)
    if not out:
        raise CLIError("no output directory: pass --out or set " + ENV_OUT)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(out: Path, argv, inputs=(), seeds=None, artifacts=(), started=None):
    man = {
        "command": ["ssl-rul", *argv],
        "tool_version": __version__,
        "inputs": {str(p): _sha256(p) for p in inputs if p and Path(p).is_file()},
        "seeds": seeds or {},
        "artifacts": sorted(str(a) for a in artifacts),
        "wall_seconds": None if started is None else round(time.perf_counter() - started, 3),
    }
    (out / "run.json").write_text(json.dumps(man, indent=2) + "\n")


def _train_config(path, defaults: TrainConfig, seed=None) -> TrainConfig:
    d = defaults.to_dict()
    if path:
        user = _read_json(path)
        user.pop("version", None)
        unknown = set(user) - set(d)
        if unknown:
            raise CLIError(f"{path}: unknown training config keys {sorted(unknown)}")
        d.update(user)
    if seed is not None:
        d["seed"] = seed
    return TrainConfig.from_dict(d)


def _write_epoch_log(out: Path, ckpt):
    with open(out / "train_log.jsonl", "w") as fh:
        for e in ckpt.training_log:
            fh.write(json.dumps(e) + "\n")


# -- subcommands ------------------------------------------------------------------

def cmd_generate(args, argv):
    started = time.perf_counter()
    cfg = MaterialConfig.from_dict(_read_json(args.config)) if args.config else MaterialConfig()
    d = args.d if args.kind == "unlabelled" else 1.0
    if args.kind == "labelled" and args.d not in (None, 1.0):
        raise CLIError("labelled datasets are complete sequences; --d must be 1")
    seed = cfg.rng_seed if args.seed is None else args.seed
    ds = build_dataset(cfg, args.n_structures, args.kind, d if d is not None else 1.0, seed=seed,
                       h=args.h, stream=args.stream)
    out = save_dataset(ds, _out_dir(args))
    artifacts = [out / "structures.jsonl", out / "manifest.json"]
    if not args.no_figures:
        from .plotting import plot_sequences
        artifacts.append(plot_sequences(ds.structures, out / "sequences.png", cfg.delta_k))
    _write_run_manifest(out, argv, [args.config], {"seed": seed}, artifacts, started)
    log.info("wrote %d %s structures to %s", len(ds), ds.kind, out)
    return 0


def cmd_pretrain(args, argv):
    started = time.perf_counter()
    data = load_dataset(args.data)
    cfg = _train_config(args.config, PRETRAIN_DEFAULTS, args.seed)
    ck = pretrain(args.task.upper(), data, cfg, q=args.q)
    out = save_checkpoint(ck, _out_dir(args))
    _write_epoch_log(out, ck)
    _write_run_manifest(out, argv, [args.config, Path(args.data) / "manifest.json"], {"train": cfg.seed},
                        [out / "manifest.json", out / "params.bin", out / "train_log.jsonl"], started)
    log.info("pre-trained %s model saved to %s", ck.pretext, out)
    return 0


def cmd_finetune(args, argv):
    started = time.perf_counter()
    data = load_dataset(args.data)
    cfg = _train_config(args.config, FINETUNE_DEFAULTS, args.seed)
    backbone = None if args.backbone.lower() == "none" else load_checkpoint(args.backbone)
    ck = finetune(backbone, data, cfg, freeze=args.freeze == "true", rul_scale=args.rul_scale)
    out = save_checkpoint(ck, _out_dir(args))
    _write_epoch_log(out, ck)
    _write_run_manifest(out, argv, [args.config, Path(args.data) / "manifest.json"], {"train": cfg.seed},
                        [out / "manifest.json", out / "params.bin", out / "train_log.jsonl"], started)
    print(f"trainable: {ck.trainable}")
    return 0


def cmd_evaluate(args, argv):
    started = time.perf_counter()
    ck = load_checkpoint(args.model)
    if ck.spec.kind != "FineTune":
        raise CLIError(f"{args.model} is a {ck.spec.kind} pretext model; evaluate a fine-tuned checkpoint")
    test = load_dataset(args.test)
    proto = TestProtocolConfig.from_dict(_read_json(args.protocol)) if args.protocol else TestProtocolConfig()
    res = evaluate_rul(ck, test, proto)
    print(f"MAPE: {res['mape']:.4f} % over {res['n']} test structures")
    if args.out:
        out = _out_dir(args)
        rows = ["id_index,true_rul,pred_rul"] + [f"{i},{t:.1f},{p!r}" for i, (t, p) in
                                                  enumerate(zip(res["true"], res["pred"]))]
        (out / "predictions.csv").write_text("\n".join(rows) + "\n")
        (out / "metrics.json").write_text(json.dumps({"mape": res["mape"], "n": res["n"]}, indent=2) + "\n")
        _write_run_manifest(out, argv, [args.protocol], {"protocol": proto.seed},
                            [out / "predictions.csv", out / "metrics.json"], started)
    return 0


def cmd_experiment(args, argv):
    started = time.perf_counter()
    grid = GridSpec.from_dict(_read_json(args.grid)) if args.grid else GridSpec()
    jobs = args.jobs or int(os.environ.get(ENV_JOBS, "1"))
    out = _out_dir(args)
    reports = run_experiment_grid(grid, out, jobs=jobs, figures=not args.no_figures)
    (out / "grid.json").write_text(json.dumps(grid.to_dict(), indent=2) + "\n")
    artifacts = [out / "results.csv", out / "summary.csv", out / "grid.json"]
    if not args.no_figures:
        artifacts.append(out / "mape_vs_nl.png")
    _write_run_manifest(out, argv, [args.grid], {"grid": grid.seed}, artifacts, started)
    for r in reports:
        print(f"{r.task:5s} N_U={r.N_U:<6d} d={r.d:<4g} q={r.q:<3d} freeze={str(r.freeze).lower():5s} "
              f"N_L={r.N_L:<4d} MAPE {r.mean:7.2f} +- {r.std:.2f}")
    return 0


def cmd_inspect(args, argv):
    if args.model:
        ck = load_checkpoint(args.model)
        print(f"kind: {ck.spec.kind}")
        print(f"pretext: {ck.pretext}")
        print(f"tensors: {len(ck.params)}")
        print(f"total: {nn.count_params(ck.params)}")
        print(f"trainable: {ck.trainable}")
        if ck.spec.kind != "FineTune":
            backbone = nn.backbone_names(ck.spec)
            print(f"backbone: {nn.count_params({n: ck.params[n] for n in backbone})}")
        print(f"epochs logged: {len(ck.training_log)}")
    if args.data:
        ds = load_dataset(args.data)
        lengths = [s.length for s in ds.structures]
        print(f"kind: {ds.kind}")
        print(f"d: {ds.d_ratio}")
        print(f"structures: {len(ds)}")
        print(f"measurements: {sum(lengths)} (mean {sum(lengths) / max(len(lengths), 1):.1f} per structure)")
        print(f"AE windows (h=30): {sum(max(L - 29, 0) for L in lengths)}")
    if not (args.model or args.data):
        raise CLIError("inspect needs --model and/or --data")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ssl-rul", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("generate", help="simulate a run-to-failure strain dataset")
    g.add_argument("--config", help="material/generation config JSON (defaults: built-in values)")
    g.add_argument("--n-structures", type=int, required=True)
    g.add_argument("--kind", choices=["unlabelled", "labelled"], required=True)
    g.add_argument("--d", type=float, default=None, help="kept lifetime ratio for unlabelled data")
    g.add_argument("--stream", choices=["unlabelled", "labelled", "test"], default=None,
                   help="seed stream (default: same as --kind); use 'test' for held-out sets")
    g.add_argument("--h", type=int, default=30)
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--no-figures", action="store_true")
    g.set_defaults(func=cmd_generate)

    pt = sub.add_parser("pretrain", help="self-supervised pre-training")
    pt.add_argument("--task", choices=["ae", "ar", "mspa"], required=True)
    pt.add_argument("--q", type=int, default=1, help="prediction horizon for mspa")
    pt.add_argument("--data", required=True)
    pt.add_argument("--config", help="training config JSON")
    pt.add_argument("--out")
    pt.add_argument("--seed", type=int)
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="fit the RUL head on labelled data")
    ft.add_argument("--backbone", required=True, help="pre-trained checkpoint directory or 'none'")
    ft.add_argument("--data", required=True)
    ft.add_argument("--freeze", choices=["true", "false"], required=True)
    ft.add_argument("--config", help="training config JSON")
    ft.add_argument("--rul-scale", type=float, default=1.0)
    ft.add_argument("--out")
    ft.add_argument("--seed", type=int)
    ft.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("evaluate", help="test-set MAPE at random truncation times")
    ev.add_argument("--model", required=True)
    ev.add_argument("--test", required=True)
    ev.add_argument("--protocol", help="protocol JSON (n_test_structures, t_star_range, seed)")
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_evaluate)

    ex = sub.add_parser("experiment", help="run an experiment grid with k-fold CV")
    ex.add_argument("--grid", help="grid JSON (default: desk-scale grid)")
    ex.add_argument("--out")
    ex.add_argument("--jobs", type=int, default=None)
    ex.add_argument("--no-figures", action="store_true")
    ex.set_defaults(func=cmd_experiment)

    ins = sub.add_parser("inspect", help="summarise a dataset or checkpoint")
    ins.add_argument("--model")
    ins.add_argument("--data")
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args, argv)
    except (CLIError, ConfigError, FitError, FileNotFoundError, ValueError, KeyError, TypeError) as e:
        print(f"ssl-rul {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
