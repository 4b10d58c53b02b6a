"""Command-line entry point: ``mgvos <subcommand> [options]``.

Settings come from an optional INI file (``--config``) with sections
``[network]``, ``[train]``, ``[synth]`` and ``[data]``, then from repeated
``--set section.key=value`` overrides, then from the explicit flags.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import flops as fl
from . import network as net
from . import train as tr
from .attention import CoAttentionConfig, MotionGuidanceConfig, co_attention, motion_guidance_cascade
from .gradcheck import PRIMITIVE_CHECKS, run_gradcheck
from .synth import SynthConfig, generate_dataset, save_dataset

log = logging.getLogger("mgvos")

DATA_DEFAULTS = dict(train_clips=48, eval_clips=12, train_seed=0, eval_seed=10_000, path=None, eval_path=None)


def parse_value(text: str):
    """INI scalar -> None / bool / int / float / tuple / str."""
    t = text.strip()
    if t.lower() in ("", "none", "null"):
        return None
    if t.lower() in ("true", "yes", "on"):
        return True
    if t.lower() in ("false", "no", "off"):
        return False
    if "," in t:
        return tuple(parse_value(p) for p in t.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def load_settings(config_path=None, overrides=()) -> dict:
    """Merge the INI file and ``section.key=value`` overrides into nested dicts."""
    settings = {"network": {}, "train": {}, "synth": {}, "data": {}}
    if config_path:
        cp = configparser.ConfigParser()
        if not cp.read(config_path):
            raise FileNotFoundError(f"config file not found: {config_path}")
        for section in cp.sections():
            if section not in settings:
                raise ValueError(f"{config_path}: unknown section [{section}]; expected {sorted(settings)}")
            settings[section].update({k: parse_value(v) for k, v in cp[section].items()})
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in settings:
            raise ValueError(f"override {item!r} must look like section.key=value with section in {sorted(settings)}")
        settings[section][name] = parse_value(value)
    return settings


def _build(cls, base, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return replace(base, **values)


def network_config(settings) -> net.NetworkConfig:
    return _build(net.NetworkConfig, tr.desk_network_config(), settings["network"])


def train_config(settings) -> tr.TrainConfig:
    return _build(tr.TrainConfig, tr.TrainConfig(), settings["train"])


def synth_config(settings) -> SynthConfig:
    return _build(SynthConfig, tr.desk_synth_config(), settings["synth"])


def data_settings(settings) -> dict:
    unknown = set(settings["data"]) - set(DATA_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown [data] keys: {sorted(unknown)}")
    return {**DATA_DEFAULTS, **settings["data"]}


def training_data(settings):
    d = data_settings(settings)
    if d["path"]:
        return d["path"]
    return replace(synth_config(settings), seed=d["train_seed"]), d["train_clips"]


def evaluation_data(settings):
    d = data_settings(settings)
    if d["eval_path"]:
        return d["eval_path"]
    return replace(synth_config(settings), seed=d["eval_seed"]), d["eval_clips"]


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2))


def _emit(rows, out_dir, stem):
    if out_dir:
        tr.write_table(rows, Path(out_dir), stem)
    print(json.dumps(rows, indent=2))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, settings) -> int:
    cfg = synth_config(settings)
    d = data_settings(settings)
    n = args.clips if args.clips is not None else d["train_clips"]
    seed = args.seed if args.seed is not None else cfg.seed
    clips = generate_dataset(replace(cfg, seed=seed), n, prefix=args.prefix)
    root = save_dataset(clips, args.out)
    print(f"wrote {len(clips)} clips to {root}")
    return 0


def cmd_train(args, settings) -> int:
    tcfg = train_config(settings)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    ncfg = network_config(settings)
    _, record = tr.train(tcfg, ncfg, training_data(settings), out_dir=args.out)
    if args.eval:
        params, _, _ = net.load_checkpoint(record.checkpoint)
        report = tr.evaluate(params, ncfg, evaluation_data(settings), out_dir=args.out, flip_average=args.flip)
        record.metrics = report.to_dict()
        _write_json(Path(args.out) / "run.json", record.to_dict())
    print(json.dumps(dict(initial_loss=record.initial_loss, final_loss=record.final_loss,
                          checkpoint=record.checkpoint, metrics=(record.metrics or {}).get("mean")), indent=2))
    return 0


def cmd_eval(args, settings) -> int:
    report = tr.evaluate_checkpoint(args.checkpoint, args.data or evaluation_data(settings), out_dir=args.out,
                                    flip_average=args.flip)
    rows = [asdict(s) for s in report.sequences] + [dict(name="mean", **report.mean())]
    _emit(rows, args.out, "metrics_table")
    return 0


def cmd_ablate(args, settings) -> int:
    rows = tr.ablation_grid(args.variants, args.ks, args.cascades, args.seeds)
    results = tr.ablate(rows, network_config(settings), train_config(settings),
                        training_data(settings), evaluation_data(settings), out_dir=args.out)
    summary = tr.summarize_ablation(results)
    _emit(summary, args.out, "ablation_summary")
    return 0


def cmd_gradcheck(args, settings) -> int:
    results = run_gradcheck(args.component, seeds=range(args.seed, args.seed + args.seeds))
    rows = [dict(name=r.name, max_rel_err=r.max_rel_err, tolerance=r.tolerance, passed=r.passed,
                 checked=r.checked, skipped=r.skipped) for r in results]
    if args.out:
        tr.write_table(rows, Path(args.out), "gradcheck")
    failed = [r for r in rows if not r["passed"]]
    by_name: dict = {}
    for r in rows:
        by_name[r["name"]] = max(by_name.get(r["name"], 0.0), r["max_rel_err"])
    for name, err in by_name.items():
        print(f"{name:40s} max rel err {err:.3e}")
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return 1 if failed else 0


def _bench_target(component, shape, settings, seed):
    rng = np.random.default_rng(seed)
    if component == "network":
        ncfg = network_config(settings)
        if shape:
            ncfg = replace(ncfg, input_size=tuple(shape[-2:]))
        params = net.init_params(ncfg, seed=seed)
        h, w = ncfg.input_size
        i_a = rng.random((1, 3, h, w), dtype=np.float32)
        i_m = rng.random((1, 3, h, w), dtype=np.float32)
        return lambda: net.forward(params, ncfg, i_a, i_m), dict(input_size=[h, w])
    n, c, h, w = shape or (1, 32, 32, 32)
    v_a = rng.standard_normal((n, c, h, w)).astype(np.float32)
    v_m = rng.standard_normal((n, c, h, w)).astype(np.float32)
    if component == "motion_guidance":
        ncfg = network_config(settings)
        cfg = MotionGuidanceConfig.random(c, k=ncfg.k, d=ncfg.d, cascade=ncfg.cascade, rng=rng)
        return lambda: motion_guidance_cascade(v_a, v_m, cfg), dict(shape=[n, c, h, w], k=cfg.k, d=cfg.d, cascade=cfg.cascade)
    if component == "co_attention":
        d = network_config(settings).d
        cfg = CoAttentionConfig.random(c, d=d, rng=rng)
        return lambda: co_attention(v_a, v_m, cfg), dict(shape=[n, c, h, w], d=d)
    raise ValueError(f"unknown bench component {component!r}")


def cmd_bench(args, settings) -> int:
    rows = []
    for component in args.component:
        fn, info = _bench_target(component, args.shape, settings, args.seed)
        stats = tr.bench(fn, warmup=args.warmup, rounds=args.rounds, drop=args.drop)
        rows.append(dict(component=component, **info, **asdict(stats)))
    _emit(rows, args.out, "bench")
    return 0


def cmd_flops(args, settings) -> int:
    ncfg = network_config(settings)
    k = args.k or ncfg.k
    d = args.d or ncfg.d
    cascade = args.cascade or 1
    rows = fl.reference_report(d=d, k=k, cascade=cascade)
    for h, w, c in args.shape or ():
        co = fl.flops_co_attention(h, w, c, d)
        mg = fl.flops_motion_guidance(h, w, c, d, k, cascade)
        rows.append(dict(config=f"{h}x{w}x{c}", reading="user", h=h, w=w, c=c, d=d, k=k, cascade=cascade,
                         co_macs=co.total_macs, mg_macs=mg.total_macs, ratio=co.total_macs / mg.total_macs))
    if args.breakdown:
        for r in rows:
            co = fl.flops_co_attention(r["h"], r["w"], r["c"], r["d"])
            mg = fl.flops_motion_guidance(r["h"], r["w"], r["c"], r["d"], r["k"], r["cascade"])
            r.update({f"co_{k_}": v for k_, v in co.as_dict().items()})
            r.update({f"mg_{k_}": v for k_, v in mg.as_dict().items()})
    _emit(rows, args.out, "flops")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _triple(text):
    parts = tuple(int(p) for p in text.lower().replace("x", ",").split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected HxWxC, got {text!r}")
    return parts


def _variants(text):
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in tr.ABLATION_VARIANTS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown variants {bad}; choose from {list(tr.ABLATION_VARIANTS)}")
    return names


def _shape(text):
    return tuple(int(p) for p in text.lower().replace("x", ",").split(","))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [network], [train], [synth], [data] sections")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one setting")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mgvos", description="Motion-guided two-stream video segmentation on synthetic clips.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="materialize a synthetic dataset on disk")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--prefix", default="clip")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train one model and write a checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--eval", action="store_true", help="evaluate on the held-out data afterwards")
    s.add_argument("--flip", action="store_true", help="flip-averaged inference for --eval")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--data", help="dataset directory (default: held-out synthetic clips)")
    s.add_argument("--out")
    s.add_argument("--flip", action="store_true", help="average predictions with the mirrored input")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train and evaluate a grid of variants")
    s.add_argument("--variants", type=_variants, default=list(tr.ABLATION_VARIANTS),
                   help="comma list, e.g. --variants=full,-FG-U (names start with '-', so use '=')")
    s.add_argument("--ks", nargs="+", type=int, default=[3])
    s.add_argument("--cascades", nargs="+", type=int, default=[3])
    s.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--component", default="all", choices=["all", "network", *PRIMITIVE_CHECKS])
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--seeds", type=int, default=20, help="number of seeds")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", parents=[common], help="latency with warm-up and trimmed mean")
    s.add_argument("--component", nargs="+", default=["motion_guidance", "co_attention"],
                   choices=["motion_guidance", "co_attention", "network"])
    s.add_argument("--shape", type=_shape, help="N,C,H,W for operators or H,W for the network")
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--rounds", type=int, default=60)
    s.add_argument("--drop", type=int, default=20, help="samples dropped from each end")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("flops", parents=[common], help="analytical MAC breakdowns")
    s.add_argument("--shape", type=_triple, action="append", help="extra HxWxC configuration (repeatable)")
    s.add_argument("--k", type=int)
    s.add_argument("--d", type=int)
    s.add_argument("--cascade", type=int)
    s.add_argument("--breakdown", action="store_true", help="include per-category counts")
    s.add_argument("--out")
    s.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        settings = load_settings(args.config, args.set)
        return args.func(args, settings)
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
