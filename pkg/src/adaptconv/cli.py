"""Command-line entry point.

Exit codes: 0 success, 1 a check or training run failed, 2 bad usage or config.
Every command writes ``resolved-config.json`` into its output directory;
running the same command with ``--config`` pointing at that file reproduces
its outputs.
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from adaptconv import gradcheck, train as T
from adaptconv.config import PRESETS, RunConfig
from adaptconv.data import ParseError, generate, load_dataset, save_dataset
from adaptconv.net import count_parameters, model_info
from adaptconv.tensor import ConfigError, ContractError, DimensionError, ParamStore

log = logging.getLogger("adaptconv")

CHECKPOINT = "checkpoint.acps"
RESOLVED = "resolved-config.json"

ABLATIONS = ("AdaptConv", "GraphConv", "AttentionPoint", "AttentionChannel", "Feature",
             "Normal", "InitialAttributes")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config plumbing


def resolve_config(args, default_preset="desk-cls"):
    if args.config:
        try:
            cfg = RunConfig.load(args.config)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config} is not valid JSON: {exc}")
    else:
        cfg = PRESETS[args.preset or default_preset]()
    cfg = cfg.override(args.set or [])
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    return cfg.validate()


def _out(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_resolved(out, cfg):
    cfg.save(os.path.join(out, RESOLVED))


def _load_checkpoint(args):
    """Config and trained net from a directory written by ``train``."""
    path = args.checkpoint
    ckpt = os.path.join(path, CHECKPOINT)
    cfg_path = os.path.join(path, RESOLVED)
    if not (os.path.isfile(ckpt) and os.path.isfile(cfg_path)):
        raise UsageError(f"no checkpoint in {path} (expected {CHECKPOINT} and {RESOLVED})")
    try:
        cfg = RunConfig.load(args.config or cfg_path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}")
    cfg = cfg.override(args.set or [])
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    dataset = _dataset(args, cfg)
    net = T.make_net(cfg, dataset)
    ParamStore.load(ckpt).load_into(net)
    return cfg, dataset, net


def _dataset(args, cfg):
    if getattr(args, "data", None):
        try:
            return load_dataset(args.data)
        except FileNotFoundError as exc:
            raise UsageError(f"dataset not found: {exc}")
    return generate(cfg.dataset)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    cfg = resolve_config(args)
    out = _out(args)
    _write_resolved(out, cfg)
    dataset = generate(cfg.dataset)
    save_dataset(dataset, os.path.join(out, "data"))
    print(f"wrote {len(dataset.train)} train / {len(dataset.test)} test clouds to "
          f"{os.path.join(out, 'data')}")
    return 0


def _train_into(out, cfg, dataset):
    result = T.train(cfg, dataset)
    result.net.param_store().save(os.path.join(out, CHECKPOINT))
    T.write_history(os.path.join(out, "train_log.csv"), result.history, cfg.task)
    _write_json(os.path.join(out, "metrics.json"), dataclasses.asdict(result.metrics))
    return result


def cmd_train(args):
    cfg = resolve_config(args)
    out = _out(args)
    _write_resolved(out, cfg)
    dataset = _dataset(args, cfg)
    result = _train_into(out, cfg, dataset)
    print(result.metrics.summary(), end="")
    return 0


def cmd_eval(args):
    cfg, dataset, net = _load_checkpoint(args)
    out = _out(args)
    _write_resolved(out, cfg)
    metrics = T.evaluate(net, dataset)
    _write_json(os.path.join(out, "metrics.json"), dataclasses.asdict(metrics))
    print(metrics.summary(), end="")
    return 0


def cmd_gradcheck(args):
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    faults = gradcheck.corrupt(args.inject_fault) if args.inject_fault else None
    results, report = gradcheck.main_report(cfg.seed, faults)
    print(report, end="")
    if args.out:
        out = _out(args)
        _write_resolved(out, cfg)
        with open(os.path.join(out, "gradcheck.txt"), "w") as fh:
            # the file omits the wall-clock line so reruns are byte-identical
            fh.write(gradcheck.format_report(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"gradient check failed: op {r.op}, parameter {r.param}, "
              f"relative error {r.worst:.3e}", file=sys.stderr)
    return 1 if failed else 0


def ablation_configs(cfg):
    """(method, config) pairs differing from the AdaptConv row in one setting."""
    base = dataclasses.replace(cfg, layer_kinds=cfg.resolved_kinds(), variant="spatial")
    kinds = base.layer_kinds

    def swap(kind):
        return [kind if k == "adapt" else k for k in kinds]
    return [
        ("AdaptConv", base),
        ("GraphConv", dataclasses.replace(base, layer_kinds=swap("graph"))),
        ("AttentionPoint", dataclasses.replace(base, layer_kinds=swap("attn_point"))),
        ("AttentionChannel", dataclasses.replace(base, layer_kinds=swap("attn_channel"))),
        ("Feature", dataclasses.replace(base, variant="feature")),
        ("Normal", dataclasses.replace(base, variant="normal")),
        ("InitialAttributes", dataclasses.replace(base, variant="initial")),
    ]


def run_ablation(cfg, out, dataset=None, progress=print):
    """Train every method for every seed; returns {method: [(mcIoU, mIoU), ...]}."""
    if cfg.task != "seg":
        raise ConfigError("ablation compares segmentation layers; set task to 'seg'")
    dataset = generate(cfg.dataset) if dataset is None else dataset
    os.makedirs(os.path.join(out, "configs"), exist_ok=True)
    table = {}
    for method, mcfg in ablation_configs(cfg):
        scores = []
        for seed in cfg.protocol.seeds:
            run_cfg = dataclasses.replace(mcfg, seed=int(seed)).validate()
            run_cfg.save(os.path.join(out, "configs", f"{method}-seed{seed}.json"))
            m = T.train(run_cfg, dataset).metrics
            scores.append((m.mean_class_iou, m.mean_instance_iou))
            if progress:
                progress(f"{method} seed {seed}: mcIoU {m.mean_class_iou:.4f} "
                         f"mIoU {m.mean_instance_iou:.4f}")
        table[method] = scores
    write_ablation(os.path.join(out, "ablation.csv"), table, cfg.protocol.seeds)
    return table


def write_ablation(path, table, seeds):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["method"]
        for s in seeds:
            header += [f"mcIoU_seed{s}", f"mIoU_seed{s}"]
        w.writerow(header + ["mcIoU_mean", "mIoU_mean"])
        for method, scores in table.items():
            row = [method]
            for mc, mi in scores:
                row += [repr(mc), repr(mi)]
            arr = np.array(scores)
            w.writerow(row + [repr(float(arr[:, 0].mean())), repr(float(arr[:, 1].mean()))])


def cmd_ablate(args):
    cfg = resolve_config(args, default_preset="desk-ablation")
    out = _out(args)
    _write_resolved(out, cfg)
    run_ablation(cfg, out, _dataset(args, cfg))
    with open(os.path.join(out, "ablation.csv")) as fh:
        print(fh.read(), end="")
    return 0


def cmd_robustness(args):
    cfg, dataset, net = _load_checkpoint(args)
    if cfg.task != "cls":
        raise ConfigError("robustness sweeps run on a classification checkpoint")
    out = _out(args)
    _write_resolved(out, cfg)
    modes = ("dropout", "noise") if args.mode == "both" else (args.mode,)
    for mode in modes:
        levels = cfg.protocol.dropout_levels if mode == "dropout" else cfg.protocol.noise_levels
        curve = T.robustness_sweep(net, dataset.test, mode, levels, cfg.seed)
        T.write_curve(os.path.join(out, f"robustness_{mode}.csv"), curve, mode)
        for level, oa in curve:
            print(f"{mode} {level}: OA {oa:.4f}")
    return 0


def cmd_featmap(args):
    cfg, dataset, net = _load_checkpoint(args)
    out = _out(args)
    _write_resolved(out, cfg)
    p = cfg.protocol
    if not 0 <= p.featmap_cloud < len(dataset.test):
        raise ConfigError(f"featmap_cloud {p.featmap_cloud} outside the {len(dataset.test)} "
                          f"test clouds")
    try:
        cloud = dataset.test[p.featmap_cloud]
        dist = T.feature_distance_map(net, cloud, p.featmap_layer, p.featmap_target)
    except ContractError as exc:
        raise ConfigError(str(exc))
    path = os.path.join(out, "featmap.csv")
    T.write_featmap(path, cloud, dist)
    print(f"wrote {path}")
    return 0


def cmd_model_info(args):
    cfg = resolve_config(args)
    out = _out(args)
    _write_resolved(out, cfg)
    if cfg.task == "cls":
        net = T.build_net(cfg, 3 if cfg.dataset.generator == "shapes3" else 4)
    else:
        ncls, ncat = (2, 1) if cfg.dataset.generator == "parts-adaptive" else (4, 2)
        net = T.build_net(cfg, ncls, ncat, 6)
    text = model_info(net)
    with open(os.path.join(out, "model_info.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    expected = net.expected_parameter_count()
    if expected != count_parameters(net):
        print(f"parameter count {count_parameters(net)} disagrees with closed form {expected}",
              file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "robustness": cmd_robustness,
    "featmap": cmd_featmap,
    "model-info": cmd_model_info,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="adaptconv",
                                     description="Adaptive graph convolution on point clouds.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, checkpoint=False, out_default=None):
        if config:
            p.add_argument("--config", help="JSON run config (default: a built-in preset)")
            p.add_argument("--preset", choices=sorted(PRESETS), help="built-in config to start from")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="directory written by 'train'")
            p.add_argument("--config", help="run config replacing the checkpoint's own")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry (dotted keys, JSON values); repeatable")
        p.add_argument("--out", default=out_default, required=out_default is None,
                       help="output directory")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p = sub.add_parser("train", help="train a network")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--data", help="dataset directory written by 'gen'")
    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p, config=False, checkpoint=True)
    p.add_argument("--data")
    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config", help="only its seed is used")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--inject-fault", metavar="OP",
                   help="scale OP's backward output by 1.01 to exercise the failure path")
    p = sub.add_parser("ablate", help="compare layer types and geometry variants")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--data")
    p = sub.add_parser("robustness", help="point dropout and noise sweeps")
    common(p, config=False, checkpoint=True)
    p.add_argument("--mode", choices=("dropout", "noise", "both"), default="both")
    p.add_argument("--data")
    p = sub.add_parser("featmap", help="feature-space distance map of one point")
    common(p, config=False, checkpoint=True)
    p.add_argument("--data")
    p = sub.add_parser("model-info", help="parameter table")
    common(p)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DimensionError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except T.TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
