"""Command line entry point: ``routenet <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 numeric failure (divergence,
gradient-check breach, dead gate).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, config, kernels
from .data import CifarFormatError, Dataset, SyntheticSpec, load_cifar, make_synthetic, standardize_pair, subset
from .gradcheck import TARGETS, NonFiniteError, check_module
from .introspect import (
    DeadGateError, GateAddress, gate_histograms, maximize_gate, trace_routes, weight_histograms, write_records,
)
from .model import ArchSpec, ConfigError, build
from .tensor import Rng, precision
from .train import (
    CheckpointError, DivergenceError, TrainConfig, build_from_checkpoint, evaluate, load_checkpoint, train,
)

log = logging.getLogger("routenet")

VALIDATION_ERRORS = (ConfigError, ValueError, KeyError, FileNotFoundError, CifarFormatError, CheckpointError)
NUMERIC_ERRORS = (DivergenceError, NonFiniteError, DeadGateError, FloatingPointError)


class NumericFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _run_dir(base, command) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    root = Path(base)
    d = root / f"{command}-{stamp}"
    k = 1
    while d.exists():
        d = root / f"{command}-{stamp}-{k}"
        k += 1
    d.mkdir(parents=True)
    return d


def _write_manifest(out: Path, args, argv, cfg: dict | None, seed=None):
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": cfg,
        "seed": seed,
        "versions": {"routenet": __version__, "numpy": np.__version__, "python": platform.python_version(),
                     "kernels": kernels.BACKEND},
        "created": _dt.datetime.now().isoformat(timespec="seconds"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_cfg(args) -> dict:
    cfg = config.load_file(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "arch", None):
        cfg["arch"] = config.load_file(args.arch)["arch"]
    return config.apply_overrides(cfg, getattr(args, "set", None))


def _data(cfg: dict, need_val=True):
    d = config.check_data_section(dict(cfg.get("data") or {}))
    src = d.get("source", "synthetic")
    if src == "synthetic":
        spec = SyntheticSpec.from_dict(d.get("synthetic") or {})
        tr = make_synthetic(spec)
        vspec = SyntheticSpec.from_dict({**(d.get("synthetic") or {}), "seed": spec.seed + 1, **(d.get("val_synthetic") or {})})
        va = make_synthetic(vspec, "val")
        if d.get("standardize", False):
            tr, va = standardize_pair(tr, va)
    else:
        tr, va = load_cifar(d.get("dir"), "c10" if src == "cifar10" else "c100", d.get("standardize", True))
    if d.get("per_class") is not None:
        tr = subset(tr, int(d["per_class"]), int(d.get("seed", 0)))
    if d.get("val_per_class") is not None:
        va = subset(va, int(d["val_per_class"]), int(d.get("seed", 0)) + 1)
    return tr, va


def _graph(args, cfg):
    if getattr(args, "checkpoint", None):
        return build_from_checkpoint(load_checkpoint(args.checkpoint))[0]
    if "arch" not in cfg:
        raise ConfigError("give --arch/--config with an arch section, or --checkpoint")
    return build(ArchSpec.from_dict(cfg["arch"]))


# ---------------------------------------------------------------------------
# subcommands


def cmd_params(args, out, cfg):
    spec = ArchSpec.from_dict(cfg["arch"]) if "arch" in cfg else None
    if spec is None:
        raise ConfigError("params needs --arch")
    g = build(spec)
    n = g.count_params()
    info = {"family": spec.family, "paths": spec.paths, "params": n, "params_m": round(n / 1e6, 2),
            "gate_params": g.gate_param_count(), "depth": g.depth()}
    print(f"{n:,} parameters ({n / 1e6:.2f}M); gate units {info['gate_params']:,}; depth {info['depth']}")
    (out / "params.json").write_text(json.dumps(info, indent=2) + "\n")
    return 0


def cmd_train(args, out, cfg):
    tcfg = TrainConfig.from_dict(cfg.get("train") or {})
    tr, va = _data(cfg)
    state = None
    if args.resume:
        graph, state = build_from_checkpoint(load_checkpoint(args.resume))
    else:
        with precision(tcfg.dtype):
            graph = build(ArchSpec.from_dict(cfg["arch"]))
    print(f"training {graph.count_params():,} parameters on {len(tr)} images ({len(va)} val), kernels={kernels.BACKEND}")

    def report(rec):
        extra = f" val_acc {rec['val_acc']:.4f}" if "val_acc" in rec else ""
        print(f"epoch {rec['epoch']:>3} lr {rec['lr']:.4g} loss {rec['train_loss']:.4f} acc {rec['train_acc']:.4f}{extra}", flush=True)

    graph, state = train(graph, tr, tcfg, va, state=state, log_path=out / "metrics.jsonl",
                         checkpoint_path=out / "checkpoint.rnet", on_epoch=report)
    return 0


def cmd_eval(args, out, cfg):
    graph = _graph(args, cfg)
    _, va = _data(cfg)
    acc, loss = evaluate(graph, va)
    print(f"accuracy {acc:.4f} loss {loss:.6f} on {len(va)} images")
    (out / "eval.json").write_text(json.dumps({"accuracy": acc, "loss": loss, "n": len(va)}, indent=2) + "\n")
    return 0


def cmd_gradcheck(args, out, cfg):
    targets = sorted(TARGETS) if args.target == "all" else [args.target]
    failed = False
    records = []
    for t in targets:
        rep = check_module(t, trials=args.trials, seed=args.seed, mask_gate_path=args.mask_gate_path,
                           sensitive=args.sensitive)
        print(rep.summary())
        failed |= not rep.passed
        records.append({"target": t, "passed": rep.passed, "max_rel": rep.max_rel, "threshold": rep.threshold,
                        "trials_passed": sum(rep.trial_passed), "trials": rep.trials,
                        "worst": {k: vars(e) for k, e in rep.errors.items()}})
    write_records(out / "gradcheck.jsonl", records)
    if failed:
        raise NumericFailure("gradient check failed")
    return 0


def cmd_trace(args, out, cfg):
    graph = _graph(args, cfg)
    _, va = _data(cfg)
    recs = []
    for k in range(min(args.samples, len(va))):
        recs.extend(trace_routes(graph, va.images[k], sample=k))
    path = out / f"traces.{'csv' if args.format == 'csv' else 'jsonl'}"
    write_records(path, recs, args.format)
    print(f"{len(recs)} routing traces -> {path}")
    return 0


def cmd_maximize(args, out, cfg):
    graph = _graph(args, cfg)
    addr = GateAddress.parse(args.gate)
    valid = None
    if cfg.get("data"):
        tr, _ = _data(cfg)
        valid = tr.valid_range
    res = maximize_gate(graph, addr, args.steps, args.step_size, args.l2, Rng(args.seed), valid)
    np.save(out / "image.npy", res.image)
    (out / "history.json").write_text(json.dumps({"address": str(addr), "history": res.history}) + "\n")
    print(f"a_ij {res.history[0]:.5g} -> {res.history[-1]:.5g} after {args.steps} steps")
    return 0


def cmd_histogram(args, out, cfg):
    graph = _graph(args, cfg)
    reps = []
    if args.gates:
        _, va = _data(cfg)
        reps += gate_histograms(graph, va, [GateAddress.parse(a) for a in args.gates])
    if args.weights or not args.gates:
        reps += weight_histograms(graph)
    path = out / f"histograms.{'csv' if args.format == 'csv' else 'jsonl'}"
    write_records(path, reps, args.format)
    print(f"{len(reps)} histograms -> {path}")
    return 0


def cmd_replay(args, out, cfg):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["argv"])
    if "--out" in argv:
        argv[argv.index("--out") + 1] = str(args.out)
    else:
        argv += ["--out", str(args.out)]
    return main(argv)


COMMANDS = {
    "params": cmd_params, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "trace": cmd_trace, "maximize": cmd_maximize, "histogram": cmd_histogram, "replay": cmd_replay,
}


def _parser():
    p = argparse.ArgumentParser(prog="routenet", description="Multi-path routing networks with manual backprop.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, arch=True, data=True, ckpt=False):
        sp.add_argument("--config", help="run config (YAML/JSON) with arch/train/data sections")
        if arch:
            sp.add_argument("--arch", help="architecture config file")
        if ckpt:
            sp.add_argument("--checkpoint", help="checkpoint to load instead of a fresh build")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, e.g. train.lr0=0.01")
        sp.add_argument("--out", default="runs", help="base output directory (a run-stamped subdirectory is created)")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("params", help="exact parameter count"))
    sp = sub.add_parser("train", help="train a network")
    common(sp)
    sp.add_argument("--resume", help="continue from a checkpoint")
    common(sub.add_parser("eval", help="evaluate a checkpoint"), ckpt=True)
    sp = sub.add_parser("gradcheck", help="finite-difference gradient certification")
    common(sp, arch=False)
    sp.add_argument("--target", default="all", choices=["all"] + sorted(TARGETS))
    sp.add_argument("--trials", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mask-gate-path", action="store_true", help="drop the gate-path gradient term (ablation)")
    sp.add_argument("--sensitive", action="store_true", help="use instances with strong gate sensitivity")
    sp = sub.add_parser("trace", help="routing traces for validation images")
    common(sp, ckpt=True)
    sp.add_argument("--samples", type=int, default=16)
    sp.add_argument("--format", choices=["csv", "structured"], default="structured")
    sp = sub.add_parser("maximize", help="synthesize an input maximizing one pre-softmax gate logit")
    common(sp, ckpt=True)
    sp.add_argument("--gate", required=True, help="layer:i:j, e.g. cc1:0:1")
    sp.add_argument("--steps", type=int, default=256)
    sp.add_argument("--step-size", type=float, default=0.05)
    sp.add_argument("--l2", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp = sub.add_parser("histogram", help="class-wise gate and per-path weight histograms")
    common(sp, ckpt=True)
    sp.add_argument("--gates", nargs="*", default=[], help="gate addresses layer:i:j")
    sp.add_argument("--weights", action="store_true")
    sp.add_argument("--format", choices=["csv", "structured"], default="structured")
    sp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", default="runs")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return cmd_replay(args, None, None)
        cfg = _load_cfg(args)
        out = _run_dir(args.out, args.command)
        seed = (cfg.get("train") or {}).get("seed", getattr(args, "seed", None))
        _write_manifest(out, args, argv, cfg, seed)
        return COMMANDS[args.command](args, out, cfg)
    except NumericFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
