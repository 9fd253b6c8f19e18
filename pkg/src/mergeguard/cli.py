"""Command-line entry point: ``mergeguard <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import MergeGuardError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this CLI reserves 2 for runtime errors
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg):
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_file(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _dump(obj):
    print(json.dumps(obj, sort_keys=True, indent=2))


# -- subcommands -------------------------------------------------------------


def cmd_train_victim(args):
    from .checkpoint import save_checkpoint, save_dataset
    from .defense import Evaluation
    from .experiment import prepare_splits, train_victim

    cfg = _config(args)
    out = _out_dir(args, cfg)
    splits = prepare_splits(cfg)
    model = train_victim(cfg, splits)
    save_checkpoint(model, out / "victim.ckpt", cfg.seed, {"role": "trojaned"})
    save_dataset(splits.benign, out / "benign.mgds", {"role": "benign"})
    save_dataset(splits.test, out / "test.mgds", {"role": "test"})
    save_dataset(splits.asr, out / "asr.mgds", {"role": "asr", "target_label": cfg.attack.target_label})
    m = Evaluation(splits.test, splits.asr, cfg.attack.target_label).score(model)
    _dump({"model": str(out / "victim.ckpt"), "test_acc": m.test_acc, "asr": m.asr})


def _load_eval(data_dir):
    from .checkpoint import load_dataset, read_header
    from .defense import Evaluation

    d = Path(data_dir)
    test = load_dataset(_need_file(d / "test.mgds"))
    asr_path = _need_file(d / "asr.mgds")
    target = read_header(asr_path)["metadata"]["target_label"]
    return Evaluation(test, load_dataset(asr_path), target)


def cmd_defend(args):
    from .checkpoint import load_checkpoint, load_dataset, save_checkpoint
    from .defense import defend
    from .report import write_outputs

    cfg = _config(args)
    out = _out_dir(args, cfg)
    model = load_checkpoint(_need_file(args.model))
    data = Path(args.data)
    benign = load_dataset(_need_file(data / "benign.mgds"))
    evaluation = _load_eval(data)
    defense = cfg.defense
    if args.method:
        defense = type(defense)(**{**defense.to_dict(), "method": args.method})
    defended, report = defend(model, benign, defense, evaluation, cfg.attack.attack.value)
    report.config = cfg.to_dict()
    save_checkpoint(defended, out / "defended.ckpt", cfg.seed, {"role": "defended"})
    write_outputs(report, out, figures=cfg.figures)
    _dump({"test_acc": report.defended.test_acc, "asr": report.defended.asr,
           "merged_blocks": len(report.merges), "report": str(out / "report.json")})


def cmd_merge(args):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .merge import finalize_merge

    model = load_checkpoint(_need_file(args.model))
    merged, records = finalize_merge(model, args.threshold)
    out = Path(args.out or Path(args.model).with_suffix(".merged.ckpt"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(merged, out, metadata={"role": "merged"})
    _dump({"model": str(out), "merges": [r.to_dict() for r in records]})


def cmd_eval(args):
    from .checkpoint import load_checkpoint

    model = load_checkpoint(_need_file(args.model))
    m = _load_eval(args.data).score(model)
    _dump({"test_acc": m.test_acc, "asr": m.asr})


def _block_inputs(model, block, data_dir, count, seed):
    """Inputs reaching ``block.first``: intermediate features of real data, or N(0, 1)."""
    from .rng import make_rng

    if data_dir is None:
        if hasattr(block.first, "in_features"):
            shape = (block.first.in_features,)
        else:
            raise MergeGuardError("conv blocks need --data to supply realistic inputs")
        return make_rng(seed, "audit").standard_normal((count, *shape))
    from .autodiff import as_tensor
    from .checkpoint import load_dataset

    x = load_dataset(_need_file(Path(data_dir) / "test.mgds")).images[:count]
    for layer in model.layers[:block.block_id]:
        x = layer.forward(as_tensor(x)).data
    return x


def cmd_audit_bound(args):
    from .checkpoint import load_checkpoint
    from .merge import audit_bound, find_mergeable_blocks

    model = load_checkpoint(_need_file(args.model))
    blocks = find_mergeable_blocks(model)
    if not blocks:
        raise MergeGuardError(f"{args.model} has no mergeable blocks")
    block = blocks[args.block]
    seed = args.seed if args.seed is not None else 0
    samples = _block_inputs(model, block, args.data, args.samples, seed)
    if block.family != "dense":
        raise MergeGuardError("the bound audit covers dense blocks")
    _dump(audit_bound(block, np.asarray(samples, dtype=np.float64), args.delta).to_dict())


def cmd_report(args):
    from .experiment import run_experiment

    cfg = _config(args)
    out = _out_dir(args, cfg)
    report = run_experiment(cfg, out)
    _dump({
        "out": str(out),
        "trojaned": {"test_acc": report.trojaned.test_acc, "asr": report.trojaned.asr},
        "defended": {"test_acc": report.defended.test_acc, "asr": report.defended.asr},
        "merged_blocks": len(report.merges),
        "safety": report.safety,
    })


def cmd_account(args):
    from .accounting import count_macs, count_params, merge_savings

    arch = args.arch
    if arch.endswith(".ckpt"):
        from .checkpoint import load_checkpoint

        model = load_checkpoint(_need_file(arch))
        _dump({"arch": arch, "params": count_params(model), "macs": count_macs(model)})
        return
    account = merge_savings(arch, args.merge_blocks)
    if args.json:
        result = account.to_dict()
        result["interpretations"] = {
            str(k): merge_savings(arch, k).to_dict()["params_after"] for k in (3, 4)
        }
        _dump(result)
        return
    print(f"architecture      {account.arch}")
    print(f"params before     {account.params_before:,}")
    print(f"params after      {account.params_after:,}  ({account.merge_blocks} blocks merged)")
    print(f"param reduction   {100 * account.param_reduction:.2f}%")
    print(f"MACs before       {account.macs_before:,}")
    print(f"MACs after        {account.macs_after:,}")
    print(f"MAC reduction     {100 * account.mac_reduction:.2f}%")
    for b in account.blocks:
        dims = "/".join(str(d) for d in b.dims)
        print(f"  {b.first} + {b.second} ({dims}): {b.params_before:,} -> {b.params_after:,}, "
              f"saves {b.params_saved:,}")
    for k in (3, 4):
        try:
            alt = merge_savings(arch, k)
        except MergeGuardError:
            continue
        print(f"if {k} blocks merged: {alt.params_after:,} params ({100 * alt.param_reduction:.2f}% fewer)")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (or file for merge)")

    parser = _Parser(prog="mergeguard", description="Trojan removal by linearize-and-merge.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train-victim", parents=[common], help="poison data and train a victim")
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("defend", parents=[common], help="defend a victim checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="directory written by train-victim")
    p.add_argument("--method", choices=["mergeguard", "ft"])
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("merge", parents=[common], help="snap and fuse linearized blocks")
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=0.99)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", parents=[common], help="test accuracy and ASR of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit-bound", parents=[common], help="check the nonlinearity error bound")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="use features of exported test data instead of N(0, 1)")
    p.add_argument("--block", type=int, default=-1)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--delta", type=float, default=0.01)
    p.set_defaults(func=cmd_audit_bound)

    p = sub.add_parser("report", parents=[common], help="full pipeline with JSON/CSV and figures")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("account", parents=[common], help="parameter and MAC accounting")
    p.add_argument("--arch", required=True, help="bundled name, descriptor JSON, or .ckpt")
    p.add_argument("--merge-blocks", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_account)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (MergeGuardError, OSError, KeyError) as exc:
        print(f"mergeguard: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
