"""Command-line entry point: train, compress, finetune, verify, report, count."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

from . import accounting, pipeline
from .pipeline import RunConfig


def _config_or_default(doc: dict) -> RunConfig:
    return RunConfig.from_dict(doc["config"]) if "config" in doc else RunConfig()


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    result = pipeline.run_train(config)
    pipeline.write_checkpoint(args.out_ckpt, pipeline.net_to_tensors(result.net))
    pipeline.save_plan(args.out_plan, result.plan, stage="train", config=asdict(config),
                       records=result.records, events=result.events)
    last = result.records[-1]
    print(f"epoch {last['epoch']}: loss {last['loss']:.4f} acc {last['acc']:.4f} "
          f"levels {last['levels']} sparsity {last['sparsity']:.4f}")
    return 0


def cmd_compress(args) -> int:
    tensors = pipeline.read_checkpoint(args.ckpt)
    if pipeline.is_compressed(tensors):
        print(f"error: {args.ckpt} is already compressed", file=sys.stderr)
        return 2
    plan, doc = pipeline.load_plan(args.plan)
    config = _config_or_default(doc)
    net = pipeline.tensors_to_net(tensors)
    cnet, cplan, metrics = pipeline.run_compress(net, plan, args.rate, config)
    pipeline.write_checkpoint(args.out_ckpt, pipeline.net_to_tensors(cnet))
    pipeline.save_plan(args.out_plan, cplan, stage="compress", config=asdict(config), metrics=metrics)
    print(f"levels {cplan.levels} threshold {cplan.threshold_used:.6g} "
          f"rate {cplan.achieved_rate:.4f} flag {cplan.flag}")
    print(json.dumps(metrics))
    return 0


def cmd_finetune(args) -> int:
    config = RunConfig.load(args.config)
    plan, _ = pipeline.load_plan(args.plan)
    cnet = pipeline.tensors_to_net(pipeline.read_checkpoint(args.ckpt), plan)
    net, new_plan, metrics = pipeline.run_finetune(cnet, plan, config)
    pipeline.write_checkpoint(args.out_ckpt, pipeline.net_to_tensors(net))
    if args.out_plan:
        pipeline.save_plan(args.out_plan, new_plan, stage="finetune", config=asdict(config),
                           metrics=metrics)
    print(f"mode {metrics['mode']} test_acc {metrics['test_acc']:.4f}")
    return 0


def cmd_verify(args) -> int:
    plan, doc = pipeline.load_plan(args.plan)
    norm = doc.get("config", {}).get("norm", "l1")
    checks = pipeline.verify(pipeline.read_checkpoint(args.ckpt), plan, norm=norm)
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
    return 0 if all(ok for _, ok, _ in checks) else 1


def cmd_report(args) -> int:
    plan, _ = pipeline.load_plan(args.plan)
    arch = accounting.load_arch(args.arch) if args.arch else None
    if args.ckpt:
        # the checkpoint must agree with the plan before its layers are reported
        names = pipeline.conv_names(pipeline.read_checkpoint(args.ckpt))
        if names != [lp.name for lp in plan.layers]:
            print("error: checkpoint layers do not match the plan", file=sys.stderr)
            return 2
    report = pipeline.run_report(plan, arch)
    for path in pipeline.write_report(report, args.out, args.format):
        print(path)
    return 0


def cmd_count(args) -> int:
    spec = accounting.load_arch(args.arch)
    if args.levels:
        levels = [int(x) for x in args.levels.split(",")]
        report = accounting.compression_report(spec, levels)
        report.pop("layers")
        print(json.dumps(report, indent=1))
    else:
        print(json.dumps({"name": spec.get("name", ""), "params": accounting.count_params(spec),
                          "flops": accounting.count_flops(spec)}, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupsparse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="sparsify a micronet with structured regularization")
    p.add_argument("--config", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--out-plan", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="convert to grouped convolutions at a target rate")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--out-plan", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("finetune", help="finetune a compressed checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--out-plan")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("verify", help="check a checkpoint against its plan (exit 1 on failure)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--plan", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="cardinality, confusion and params/FLOPs tables")
    p.add_argument("--plan", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--ckpt")
    src.add_argument("--arch")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("count", help="params and FLOPs of an architecture file or bundled name")
    p.add_argument("--arch", required=True)
    p.add_argument("--levels", help="comma-separated group level per convolution")
    p.set_defaults(func=cmd_count)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
