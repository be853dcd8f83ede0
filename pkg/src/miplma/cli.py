"""Command-line entry point: ``miplma <verb> [flags]``.

Exit codes: 0 success, 1 configuration/contract/schema error, 2 numeric abort
(including a failed gradient check).
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict

from . import data as data_mod
from .evalsuite import dump_attention, evaluate
from .exceptions import MIPLError, NumericAbort
from .model import TemperatureSchedule, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, mil_mode_adapter, pll_mode_adapter, sweep, train
from .verification import check_full_loss

log = logging.getLogger("miplma")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dump_json(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs, help="training epochs T")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="bags per optimizer step")
    p.add_argument("--lr", type=float, default=d.lr, help="initial learning rate (cosine-annealed)")
    p.add_argument("--momentum", type=float, default=d.momentum, help="SGD momentum")
    p.add_argument("--weight-decay", type=float, default=d.weight_decay, help="SGD weight decay")
    p.add_argument("--grad-clip", type=float, default=d.grad_clip, help="global gradient norm cap (0 disables)")
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam, help="margin loss weight")
    p.add_argument("--tau0", type=float, default=d.tau0, help="initial attention temperature")
    p.add_argument("--tau-min", type=float, default=d.tau_min, help="temperature floor")
    p.add_argument("--tau-decay", type=float, default=d.tau_decay, help="per-epoch temperature factor")
    p.add_argument("--no-anneal", action="store_true", help="pin the temperature at 1")
    p.add_argument("--mode", choices=("mipl", "mil", "pll"), default=d.mode, help="engine mode")
    p.add_argument("--margin", choices=("distribution", "mean", "off"), default=d.margin_variant,
                   help="margin term: distribution loss, mean margin loss, or disabled")
    p.add_argument("--feature-dim", type=int, default=d.feature_dim, help="instance feature width l")
    p.add_argument("--hidden", type=int, nargs="*", default=list(d.hidden_sizes),
                   help="extra hidden layer widths of the extractor")
    p.add_argument("--attention-dim", type=int, default=d.attention_dim, help="attention width a")
    p.add_argument("--seed", type=int, default=d.seed, help="random seed")


def _config_from(args):
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
        weight_decay=args.weight_decay, grad_clip=args.grad_clip, lam=args.lam, tau0=args.tau0,
        tau_min=args.tau_min,
        tau_decay=args.tau_decay, anneal=not args.no_anneal, seed=args.seed, mode=args.mode,
        margin_variant=args.margin, eval_every=getattr(args, "eval_every", 0),
        feature_dim=args.feature_dim, hidden_sizes=tuple(args.hidden),
        attention_dim=args.attention_dim,
    )


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="miplma", description="Multi-instance partial-label learning with margin adjustment.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset", formatter_class=fmt)
    gd = data_mod.GenConfig()
    g.add_argument("--m", type=int, default=gd.m, help="number of bags")
    g.add_argument("--k", type=int, default=gd.k, help="number of classes")
    g.add_argument("--d", type=int, default=gd.d, help="instance dimension")
    g.add_argument("--n-min", type=int, default=gd.n_range[0], help="minimum instances per bag")
    g.add_argument("--n-max", type=int, default=gd.n_range[1], help="maximum instances per bag")
    g.add_argument("--r", type=int, default=None, help="false-positive labels per bag (default 1 unless --q)")
    g.add_argument("--q", type=float, default=None, help="per-label flipping probability (PLL style)")
    g.add_argument("--pos-min", type=float, default=gd.pos_fraction_range[0], help="min positive fraction")
    g.add_argument("--pos-max", type=float, default=gd.pos_fraction_range[1], help="max positive fraction")
    g.add_argument("--cluster-sep", type=float, default=gd.cluster_sep, help="center separation multiple")
    g.add_argument("--name", default=gd.name, help="dataset name")
    g.add_argument("--seed", type=int, default=gd.seed, help="random seed")
    g.add_argument("--out", required=True, help="output JSONL (the training part when --test-out is given)")
    g.add_argument("--test-out", help="also split and write the test part here")
    g.add_argument("--ratio", type=float, default=0.7, help="train fraction for --test-out")

    t = sub.add_parser("train", help="train a model", formatter_class=fmt)
    t.add_argument("--data", required=True, help="training JSONL")
    t.add_argument("--test", help="test JSONL for per-epoch accuracy")
    t.add_argument("--eval-every", type=int, default=1, help="epochs between test evaluations")
    _add_train_flags(t)
    t.add_argument("--out", required=True, help="checkpoint JSON")
    t.add_argument("--report", help="per-epoch report JSONL")
    t.add_argument("--weights-out", help="disambiguation weights JSONL")

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    e.add_argument("--model", required=True, help="checkpoint JSON")
    e.add_argument("--data", required=True, help="JSONL with true labels")
    e.add_argument("--out", help="report JSON (stdout if omitted)")

    c = sub.add_parser("gradcheck", help="finite-difference check of the full loss", formatter_class=fmt)
    c.add_argument("--seed", type=int, default=0, help="toy problem seed")
    c.add_argument("--h", type=float, default=1e-5, help="central difference step")
    c.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance")
    c.add_argument("--out", help="report JSON (stdout if omitted)")

    i = sub.add_parser("inspect", help="dump attention scores", formatter_class=fmt)
    i.add_argument("--model", required=True, help="checkpoint JSON")
    i.add_argument("--data", required=True, help="JSONL dataset")
    i.add_argument("--out", required=True, help="attention dump JSONL")

    s = sub.add_parser("sweep", help="robustness sweep over lambda or tau0", formatter_class=fmt)
    s.add_argument("--data", required=True, help="full JSONL dataset (split per seed)")
    s.add_argument("--param", choices=("lambda", "tau0"), required=True)
    s.add_argument("--values", type=float, nargs="+", required=True)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    s.add_argument("--ratio", type=float, default=0.7, help="train fraction of each split")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    _add_train_flags(s)
    s.add_argument("--out", help="table JSON (stdout if omitted)")
    return parser


def _prepare(ds, mode):
    if mode == "mil":
        return mil_mode_adapter(ds)
    if mode == "pll":
        return pll_mode_adapter(ds)
    return ds


def cmd_generate(args):
    cfg = data_mod.GenConfig(
        m=args.m, k=args.k, d=args.d, n_range=(args.n_min, args.n_max),
        r=(1 if args.q is None else None) if args.r is None else args.r, q=args.q,
        pos_fraction_range=(args.pos_min, args.pos_max), cluster_sep=args.cluster_sep,
        seed=args.seed, name=args.name,
    )
    ds = data_mod.generate(cfg)
    if args.test_out:
        train_ds, test_ds = data_mod.split(ds, args.ratio, args.seed)
        data_mod.write_jsonl(train_ds, args.out)
        data_mod.write_jsonl(test_ds, args.test_out)
    else:
        data_mod.write_jsonl(ds, args.out)


def cmd_train(args):
    cfg = _config_from(args)
    train_ds = _prepare(data_mod.read_jsonl(args.data), cfg.mode)
    test_ds = data_mod.read_jsonl(args.test) if args.test else None
    params, report, weights = train(cfg, train_ds, test_ds)
    schedule = TemperatureSchedule(cfg.tau0, cfg.tau_min, cfg.tau_decay, cfg.epochs if cfg.anneal else 0)
    save_checkpoint(args.out, params, report.tau_final, schedule, extra={"train_config": asdict(cfg)})
    report.checkpoint = args.out
    if args.report:
        report.write_jsonl(args.report)
    if args.weights_out:
        weights.dump_jsonl(args.weights_out)


def cmd_eval(args):
    params, tau, _ = load_checkpoint(args.model)
    _dump_json(evaluate(params, data_mod.read_jsonl(args.data), tau).to_dict(), args.out)


def cmd_gradcheck(args):
    report = check_full_loss(args.seed, h=args.h, tol=args.tol)
    _dump_json(report.to_dict(), args.out)
    if not report.ok:
        raise NumericAbort(f"gradient check failed: max relative error {report.max_rel_error:.3e}")


def cmd_inspect(args):
    params, tau, _ = load_checkpoint(args.model)
    dump_attention(params, data_mod.read_jsonl(args.data), tau, args.out)


def cmd_sweep(args):
    base = _config_from(args)
    param = "lam" if args.param == "lambda" else "tau0"
    rows = sweep(base, param, args.values, data_mod.read_jsonl(args.data), args.seeds,
                 ratio=args.ratio, jobs=args.jobs)
    _dump_json(rows, args.out)


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
    "gradcheck": cmd_gradcheck, "inspect": cmd_inspect, "sweep": cmd_sweep,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.verb](args)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 2
    except (MIPLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
