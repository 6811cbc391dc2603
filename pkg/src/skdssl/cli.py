"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 I/O or validation error, 3 numeric
failure, 4 evaluation contract failure.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, load_classifier, save_classifier
from .data import load_directory, split, synthesize, write_directory
from .errors import (ConfigError, ContractError, DataError, FormatError, IoError,
                     NumericError)
from .config import RunConfig
from .metrics import EvalReport, aggregate, evaluate, write_report_csv
from .train import epoch_means, finetune, pretrain

log = logging.getLogger("skdssl")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_EVAL = 0, 1, 2, 3, 4

LOSS_CSV = "pretrain_loss.csv"
MODEL_CKPT = "model.ckpt"
CLASSIFIER_CKPT = "classifier.ckpt"
FINETUNE_CSV = "finetune_eval.csv"
REPORT_CSV = "eval_report.csv"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _UsageError(Exception):
    pass


def _kv(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def _add_common(p):
    p.add_argument("--config", help="file of 'section.key = value' lines")
    p.add_argument("--set", action="append", type=_kv, default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


# flag dest -> config key, per subcommand
_FLAG_KEYS = {
    "gen-data": {"seed": "synthetic.seed", "n_per_class": "synthetic.n_per_class",
                 "size": "synthetic.image_size", "noise": "synthetic.noise"},
    "pretrain": {"seed": "pretrain.seed", "epochs": "pretrain.epochs", "batch_size": "pretrain.batch_size",
                 "lr": "pretrain.lr", "lam": "pretrain.lambda", "tau": "pretrain.tau",
                 "omega": "pretrain.omega", "sigma": "pretrain.sigma", "propagation": "pretrain.propagation",
                 "view_size": "augment.view_size", "split_seed": "split.seed"},
    "finetune": {"seed": "finetune.seed", "epochs": "finetune.epochs", "lr": "finetune.lr",
                 "batch_size": "finetune.batch_size", "label_fraction": "finetune.label_fraction",
                 "mode": "finetune.mode", "view_size": "augment.view_size", "split_seed": "split.seed"},
    "eval": {"split_seed": "split.seed"},
}


def build_parser():
    parser = _Parser(prog="skdssl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic four-class image dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("pretrain", help="self-distillation pretraining")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--propagation", choices=["closed_form", "iterative"])
    p.add_argument("--view-size", type=int)
    p.add_argument("--split-seed", type=int)

    p = sub.add_parser("finetune", help="supervised fine-tuning with per-epoch evaluation")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--label-fraction", type=float)
    p.add_argument("--mode", choices=["full", "linear_probe"])
    p.add_argument("--view-size", type=int)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--positive-class", default="COVID")

    p = sub.add_parser("eval", help="evaluate a classifier checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--positive-class", default="COVID")
    p.add_argument("--split", choices=["test", "all"], default="test")
    p.add_argument("--split-seed", type=int)
    return parser


def resolve_config(args):
    overrides = {}
    for dest, key in _FLAG_KEYS[args.command].items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    cfg = RunConfig.load(args.config)
    # --set first, dedicated flags last: the most specific spelling wins
    cfg.update(dict(args.set))
    cfg.update(overrides)
    return cfg.validate()


def _load_data(cfg, root):
    return load_directory(root, cfg["data.resize_to"] or None)


def cmd_gen_data(args, cfg):
    ds = synthesize(cfg.synthetic())
    try:
        write_directory(ds, args.out)
    except OSError as exc:
        raise IoError(f"cannot write dataset to {args.out!r}: {exc}") from exc
    for name, count in zip(ds.class_names, ds.class_counts()):
        print(f"{name}\t{count}")
    return EXIT_OK


def cmd_pretrain(args, cfg):
    ds = _load_data(cfg, args.data)
    train_ds, _ = split(ds, cfg.split())
    pcfg = cfg.pretrain()
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "run_config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dump())
    state = pretrain(train_ds, pcfg, out_dir=args.out_dir,
                     progress=lambda r: log.debug("step %d loss %.5f", r.step, r.total))
    means = epoch_means(state.log)
    if means:
        total, cv, cm, skd = means[max(means)]
        print(f"final epoch mean: L={total:.6f} L_CV={cv:.6f} L_CM={cm:.6f} L_SKD={skd:.6f}")
    else:
        print("no optimisation steps taken; checkpoint holds the initialisation")
    return EXIT_OK


def cmd_finetune(args, cfg):
    ds = _load_data(cfg, args.data)
    train_ds, test_ds = split(ds, cfg.split())
    if args.positive_class not in ds.class_names:
        raise ContractError(f"positive class {args.positive_class!r} not in {ds.class_names}")
    fcfg = cfg.finetune()
    if args.from_scratch:
        encoder = None
    else:
        if not args.checkpoint:
            raise _UsageError("finetune needs --checkpoint unless --from-scratch is given")
        encoder = load_checkpoint(args.checkpoint).encoder
    clf, reports = finetune(train_ds, encoder, fcfg, eval_ds=test_ds, encoder_cfg=cfg.encoder(),
                            positive_class=args.positive_class)
    os.makedirs(args.out_dir, exist_ok=True)
    save_classifier(clf, os.path.join(args.out_dir, CLASSIFIER_CKPT))
    with open(os.path.join(args.out_dir, FINETUNE_CSV), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *EvalReport.METRICS, "train_loss"])
        for epoch, (rep, loss) in enumerate(zip(reports, clf.train_losses)):
            w.writerow([epoch] + ["undefined" if getattr(rep, k) is None else repr(getattr(rep, k))
                                  for k in EvalReport.METRICS] + [repr(loss)])
    if reports:
        last = reports[-10:]
        print(f"mean over last {len(last)} epochs:")
        for key, (mu, sd) in aggregate(last).items():
            print(f"  {key}: " + ("undefined" if mu is None else f"{mu:.3f} +/- {sd:.3f}"))
    return EXIT_OK


def cmd_eval(args, cfg):
    if not os.path.exists(args.classifier):
        raise IoError(f"classifier checkpoint {args.classifier!r} not found")
    ds = _load_data(cfg, args.data)
    test_ds = split(ds, cfg.split())[1] if args.split == "test" else ds
    clf = load_classifier(args.classifier, class_names=ds.class_names)
    if clf.num_classes != len(ds.class_names):
        raise ContractError(f"classifier has {clf.num_classes} classes, dataset has {len(ds.class_names)}")
    report = evaluate(clf, test_ds, args.positive_class)
    os.makedirs(args.out_dir, exist_ok=True)
    write_report_csv(report, os.path.join(args.out_dir, REPORT_CSV))
    for key, value in report.as_dict().items():
        print(f"{key}\t{'undefined' if value is None else f'{value:.6f}'}")
    print("confusion (rows = true, cols = predicted):")
    print("\t" + "\t".join(ds.class_names))
    for name, row in zip(ds.class_names, report.confusion.counts):
        print(name + "\t" + "\t".join(str(int(v)) for v in row))
    return EXIT_OK


_COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "eval" and not os.path.isdir(args.data):
            raise IoError(f"data directory {args.data!r} not found")
        return _COMMANDS[args.command](args, cfg)
    except _UsageError as exc:
        print(f"skdssl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"skdssl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as exc:
        print(f"skdssl: evaluation contract: {exc}", file=sys.stderr)
        return EXIT_EVAL if args.command in ("eval", "finetune") else EXIT_IO
    except (ConfigError, DataError, FormatError, IoError, OSError) as exc:
        print(f"skdssl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
