"""agentsim command line.

Exit codes: 0 success, 1 claim verification failed, 2 configuration error,
3 infeasible simulation.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .agent import QTablePair, train_agent
from .config import FORMATS, MODES, BenchmarkConfig
from .exceptions import (
    ConfigError, GraphError, InfeasibleAssignment, LayerUntileable, MissingReport, TooManyLayers,
)
from .graph import TensorShape, build_resnet_like
from .platforms import load_platforms
from .quant import save_weights

EXIT_OK, EXIT_CLAIM, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2, 3


def _common(p, mode=True):
    p.add_argument("--config", help="benchmark config JSON (see emit-config)")
    p.add_argument("--model", help="model JSON path, or 'resnet_like' for the shipped graph")
    p.add_argument("--platforms", help="platform config path or built-in name (paper_calibrated, kv260)")
    p.add_argument("--seed", type=int, help="seed for the agent, weights and datasets")
    p.add_argument("--episodes", type=int, help="agent training episodes")
    if mode:
        p.add_argument("--mode", choices=MODES)


def _accuracy_flags(p):
    p.add_argument("--accuracy", action="store_true", help="also evaluate float vs int8 top-1")
    p.add_argument("--num-images", type=int, help="accuracy evaluation sample count")


def build_parser():
    parser = argparse.ArgumentParser(prog="agentsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a ResNet-like model JSON")
    p.add_argument("--num-blocks", type=int, default=4)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--input-shape", default="1,3,32,32", help="n,c,h,w")
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--weights-dir", help="also write the seeded desk-scale weights here")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the offload agent and save its Q-tables")
    _common(p, mode=False)
    p.add_argument("--save-qtable", help="Q-table output path")

    p = sub.add_parser("bench", help="run one benchmark mode and print its report")
    _common(p)
    _accuracy_flags(p)
    p.add_argument("--load-qtable", help="use a trained Q-table instead of training (fpga-agent)")
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--out", help="write the report here instead of stdout")

    p = sub.add_parser("verify", help="run cpu/gpu/fpga-agent and check the headline claims")
    _common(p, mode=False)
    _accuracy_flags(p)
    p.add_argument("--load-qtable")
    p.add_argument("--threshold", type=float, help="accuracy delta threshold (points)")

    p = sub.add_parser("export-timeline", help="write the simulated timeline as CSV")
    _common(p)
    p.add_argument("--load-qtable")
    p.add_argument("--out", required=True)

    p = sub.add_parser("emit-config", help="print the default (or given) config as JSON")
    p.add_argument("--config")
    p.add_argument("--out")
    return parser


def _resolve_config(args) -> BenchmarkConfig:
    cfg = BenchmarkConfig.load(args.config) if getattr(args, "config", None) else BenchmarkConfig()
    if getattr(args, "model", None):
        cfg.model = args.model
    if getattr(args, "platforms", None):
        cfg.platforms = args.platforms
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    if getattr(args, "seed", None) is not None:
        cfg.rng_seed = args.seed
        if cfg.agent is not None:
            cfg.agent = replace(cfg.agent, rng_seed=args.seed)
    if getattr(args, "episodes", None) is not None and cfg.agent is not None:
        if args.episodes < 1:
            raise ConfigError("--episodes must be >= 1", field="agent.episodes")
        cfg.agent = replace(cfg.agent, episodes=args.episodes)
    if getattr(args, "accuracy", False):
        cfg.accuracy.enabled = True
    if getattr(args, "num_images", None) is not None:
        cfg.num_images = args.num_images
    if getattr(args, "format", None):
        cfg.outputs.format = args.format
    if getattr(args, "threshold", None) is not None:
        cfg.accuracy.threshold_points = args.threshold
    cfg.validate(getattr(args, "config", None))
    return cfg


def _qtable(args, cfg):
    path = getattr(args, "load_qtable", None) or None
    return QTablePair.load(path) if path else None


def cmd_gen_model(args):
    try:
        shape = TensorShape(*(int(v) for v in args.input_shape.split(",")))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad --input-shape: {exc}", field="input_shape") from None
    graph = build_resnet_like(args.num_blocks, args.base_channels, shape, args.num_classes)
    graph.save(args.out)
    print(f"wrote {args.out}: {len(graph)} layers")
    if args.weights_dir:
        weights, biases = harness.desk_model_weights(graph, args.seed)
        save_weights(args.weights_dir, weights, biases)
        print(f"wrote weights to {args.weights_dir}")
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve_config(args)
    graph = harness.load_model(cfg)
    result = train_agent(graph, load_platforms(cfg.platforms), cfg.agent)
    out = args.save_qtable or cfg.outputs.qtable
    if out:
        result.q.save(out)
        print(f"wrote {out}")
    print(f"objective {result.objective * 1e3:.4f} ms, placement {result.best_assignment.summary()}")
    return EXIT_OK


def cmd_bench(args):
    cfg = _resolve_config(args)
    run = harness.run_mode(cfg, _qtable(args, cfg))
    out = args.out or cfg.outputs.report
    text = harness.emit_report(run.report, cfg.outputs.format, out)
    if out:
        print(f"wrote {out}")
    else:
        sys.stdout.write(text)
    if cfg.outputs.timeline:
        run.sim.timeline.to_csv(cfg.outputs.timeline)
    if cfg.outputs.qtable and run.qtable is not None:
        run.qtable.save(cfg.outputs.qtable)
    return EXIT_OK


def cmd_verify(args):
    cfg = _resolve_config(args)
    qtable = _qtable(args, cfg)
    accuracy = None
    if cfg.accuracy.enabled:
        accuracy = harness.evaluate_accuracy(harness.load_model(cfg), cfg)
    reports = {}
    for mode in ("cpu", "gpu", "fpga-agent"):
        reports[mode] = harness.run_mode(replace(cfg, mode=mode), qtable, accuracy).report
    sys.stdout.write(harness.format_table([reports[m] for m in ("cpu", "gpu", "fpga-agent")]))
    print()
    claims = harness.verify_claims(reports, cfg.accuracy.threshold_points, accuracy)
    for c in claims:
        print(c.line())
    return EXIT_OK if harness.claims_passed(claims) else EXIT_CLAIM


def cmd_export_timeline(args):
    cfg = _resolve_config(args)
    run = harness.run_mode(cfg, _qtable(args, cfg))
    run.sim.timeline.to_csv(args.out)
    print(f"wrote {args.out}: {len(run.sim.timeline.segments)} segments")
    return EXIT_OK


def cmd_emit_config(args):
    cfg = BenchmarkConfig.load(args.config) if args.config else BenchmarkConfig()
    text = cfg.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "gen-model": cmd_gen_model,
    "train": cmd_train,
    "bench": cmd_bench,
    "verify": cmd_verify,
    "export-timeline": cmd_export_timeline,
    "emit-config": cmd_emit_config,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, GraphError, TooManyLayers, MissingReport) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleAssignment, LayerUntileable) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
