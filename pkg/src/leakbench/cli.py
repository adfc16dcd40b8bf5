"""Command-line interface: ``leakbench <subcommand> [options]``.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from leakbench import nn, protocol, report
from leakbench.autodiff import NonFiniteError
from leakbench.config import METHODS, dump_config, load_config
from leakbench.data import DatasetManifest, ImageSet, export_pgm_corpus
from leakbench.protocol import ProtocolError

log = logging.getLogger("leakbench")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seeds(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from exc


def _common(p, seeds=False, out_default="runs"):
    p.add_argument("--config", help="INI config file (defaults are used when omitted)")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--ascii", action="store_true", help="write '+/-' instead of '±'")
    if seeds:
        p.add_argument("--seeds", type=_seeds, help="comma-separated seeds, e.g. 0,1,2")
    else:
        p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="leakbench", description="Multi-site SSL site-leakage testbed.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate the synthetic corpus as PGM files + manifest")
    _common(p, out_default="data")

    p = sub.add_parser("pretrain", help="pretrain one model and save a checkpoint")
    _common(p)
    p.add_argument("--method", choices=METHODS[1:], default="ssl-only")

    p = sub.add_parser("downstream", help="train the linear head on frozen features and report AUC")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("probe", help="site-leakage probes on a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stage", default="checkpoint")

    for name, hlp in (("loso", "leave-one-site-out suite"), ("transfer", "fixed-role transfer suite")):
        p = sub.add_parser(name, help=hlp)
        _common(p, seeds=True)
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("sweep-wsite", help="w_site selection sweep")
    _common(p)
    p.add_argument("--grid", help="comma-separated w_site values")

    p = sub.add_parser("report", help="regenerate summary tables from stored run records")
    p.add_argument("--runs", required=True, help="runs/<config-hash> directory")
    p.add_argument("--out", help="output directory (defaults to --runs)")
    p.add_argument("--ascii", action="store_true")

    sub.add_parser("selftest", help="gradient checks and oracle cases")
    p = sub.add_parser("show-config", help="print the effective configuration")
    p.add_argument("--config")
    return parser


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else load_config(text="")
    seeds = getattr(args, "seeds", None)
    if seeds:
        cfg = dataclasses.replace(cfg, seeds=seeds)
    return cfg.validate()


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(args):
    cfg = _config(args)
    data = protocol.build_data(cfg)
    every = ImageSet.concat(data[s] for s in cfg.site_ids)
    manifest = export_pgm_corpus(every, args.out)
    summary = DatasetManifest.from_imageset(every)
    summary.check()
    for row in summary.summary_rows():
        print(f"site {row['site']} {row['split']:<5s} n={row['n']} pos={row['pos']}")
    print(f"wrote {manifest}")


def cmd_pretrain(args):
    cfg = _config(args)
    fn = protocol.pretrain_ssl if args.method == "ssl-only" else protocol.pretrain_canonicalf
    res = fn(cfg, args.seed)
    path = os.path.join(args.out, cfg.config_hash(), args.method, str(args.seed), "final.ckpt")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    nn.save_checkpoint(path, res.bundle, cfg.config_hash(), args.seed)
    print(f"final L_inv {res.loss_history[-1]:.5f}" if res.loss_history else "no epochs run")
    print(f"wrote {path}")


def cmd_downstream(args):
    cfg = _config(args)
    bundle = nn.load_checkpoint(args.checkpoint)
    data = protocol.build_data(cfg)
    src = data[cfg.source_site]
    head = protocol.train_linear_head(bundle, cfg, args.seed, src.where(split="train"), src.where(split="val"))
    sets = {"source-val": src.where(split="val")}
    for t in cfg.target_sites:
        sets[f"target:{cfg.site(t).label}"] = data[t].where(split="test")
    aucs = protocol.evaluate_transfer(bundle, head.head, sets)
    for k, v in aucs.items():
        print(f"{k:<24s} AUC {v:.4f}")
    print(f"selected epoch {head.selected_epoch}, pos_weight {head.pos_weight:.4f}")


def cmd_probe(args):
    cfg = _config(args)
    bundle = nn.load_checkpoint(args.checkpoint)
    data = protocol.build_data(cfg)
    sets = [tuple(cfg.pretrain_sites), tuple(cfg.site_ids)]
    for p in protocol.run_leakage_probes(bundle, args.stage, cfg, data, sets):
        print(f"{p.kind:<8s} {p.representation}  accuracy {p.accuracy:.4f}  chance {p.chance:.4f}  split {p.split_hash}")


def _suite(args, runner):
    cfg = _config(args)
    records = runner(cfg, out_root=args.out, workers=args.jobs)
    run_dir = os.path.join(args.out, cfg.config_hash())
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.ini"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))
    paths = report.emit_reports(records, run_dir, ascii_only=args.ascii)
    for p in paths.values():
        print(f"wrote {p}")


def cmd_loso(args):
    _suite(args, protocol.run_loso)


def cmd_transfer(args):
    _suite(args, protocol.run_transfer)


def cmd_sweep(args):
    cfg = _config(args)
    grid = tuple(float(x) for x in args.grid.split(",")) if args.grid else None
    best, rows = protocol.run_wsite_sweep(cfg, grid=grid, seed=args.seed)
    header, body = report.sweep_table(rows)
    text = report.render_csv(header, body)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"sweep_wsite_{cfg.config_hash()}.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    sys.stdout.write(text)
    print(f"selected w_site = {best}")


def cmd_report(args):
    if not os.path.isdir(args.runs):
        raise UsageError(f"no such run directory: {args.runs}")
    records = protocol.read_records(args.runs)
    if not records:
        raise UsageError(f"no record.json files under {args.runs}")
    paths = report.emit_reports(records, args.out or args.runs, ascii_only=args.ascii)
    for p in paths.values():
        print(f"wrote {p}")


def cmd_selftest(args):
    from leakbench.selftest import run_selftest

    if not run_selftest():
        return 1
    return 0


def cmd_show_config(args):
    sys.stdout.write(dump_config(_config(args)))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "downstream": cmd_downstream,
    "probe": cmd_probe,
    "loso": cmd_loso,
    "transfer": cmd_transfer,
    "sweep-wsite": cmd_sweep,
    "report": cmd_report,
    "selftest": cmd_selftest,
    "show-config": cmd_show_config,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return COMMANDS[args.command](args) or 0
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, KeyError, ProtocolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
