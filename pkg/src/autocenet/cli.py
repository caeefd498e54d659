"""Command-line interface.

Subcommands: synth, train, eval, xval, metrics, gradcheck. Configuration
comes from a dotted-key text file (e.g. `train.lr=0.001`), with explicit
flags taking precedence. Exit codes: 0 success, 2 configuration error,
3 data error, 4 numeric failure.
"""

import argparse
import ast
import os
import sys
from dataclasses import fields as dataclass_fields

import numpy as np

from . import autodiff as ad
from .data import (LabelVolume, Volume, make_phantom, read_volume, resample,
                   slice_to_pgm, window_normalize, write_volume)
from .errors import (CheckpointFormatError, ConfigurationError, DimensionError,
                     NumericError, UndefinedMetricError, UsageError,
                     VolumeFormatError)
from .gradcheck import standard_suites
from .losses import LossWeights
from .metrics import evaluate, write_report_csv
from .network import (AutoCENet, apply_ablation, desk_config, load_checkpoint,
                      save_checkpoint)
from .train import (Case, TrainConfig, desk_train_config, evaluate_run,
                    hard_dsc, nfold_study, phantom_cases, plot_curve, train,
                    write_curve_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# dotted-key config files


def parse_value(raw):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        pass
    if "," in raw:
        return tuple(parse_value(part) for part in raw.split(","))
    return raw


def parse_config_file(path):
    """Flat {dotted.key: value} mapping from a key=value text file."""
    out = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {path}: {e}")
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(
                f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        out[key.strip()] = parse_value(raw)
    return out


def _apply_section(obj, section, flat):
    names = {f.name for f in dataclass_fields(obj)}
    for key, value in flat.items():
        if not key.startswith(section + "."):
            continue
        name = key[len(section) + 1:]
        if name not in names:
            raise ConfigurationError(f"unknown config key {key!r}")
        if isinstance(getattr(obj, name), tuple) and isinstance(value, (int, float)):
            value = (value,)
        setattr(obj, name, value)
    return obj


def _known_sections(flat, sections):
    for key in flat:
        if key.split(".", 1)[0] not in sections:
            raise ConfigurationError(f"unknown config section in key {key!r}")


def build_configs(args):
    """NetworkConfig + TrainConfig from the config file and flags."""
    flat = parse_config_file(args.config) if args.config else {}
    _known_sections(flat, {"network", "train", "loss", "data"})

    net_cfg = desk_config()
    _apply_section(net_cfg, "network", flat)
    weights = LossWeights()
    _apply_section(weights, "loss", flat)
    train_cfg = desk_train_config(weights=weights)
    _apply_section(train_cfg, "train", flat)
    train_cfg.weights = weights

    if getattr(args, "ablation", None):
        net_cfg = apply_ablation(net_cfg, args.ablation)
    if getattr(args, "seed", None) is not None:
        net_cfg.seed = args.seed
        train_cfg.seed = args.seed
    if getattr(args, "out_dir", None):
        train_cfg.out_dir = args.out_dir
    data_opts = {k.split(".", 1)[1]: v for k, v in flat.items()
                 if k.startswith("data.")}
    net_cfg.validate()
    train_cfg.validate()
    return net_cfg, train_cfg, data_opts


# ---------------------------------------------------------------------------
# dataset plumbing


def _load_cases(data_dir, dims):
    """Read case-*-image.vol / case-*-label.vol pairs, window + resample."""
    try:
        names = sorted(os.listdir(data_dir))
    except OSError as e:
        raise VolumeFormatError(f"cannot list data dir {data_dir}: {e}")
    ids = [n[:-len("-image.vol")] for n in names if n.endswith("-image.vol")]
    if not ids:
        raise VolumeFormatError(f"no *-image.vol files in {data_dir}")
    cases = []
    for cid in ids:
        img = read_volume(os.path.join(data_dir, f"{cid}-image.vol"))
        lab = read_volume(os.path.join(data_dir, f"{cid}-label.vol"))
        if not isinstance(img, Volume) or not isinstance(lab, LabelVolume):
            raise VolumeFormatError(
                f"case {cid}: expected intensity image and label pair")
        if float(img.data.min()) < 0.0 or float(img.data.max()) > 1.0:
            img = window_normalize(img)
        if img.data.shape != tuple(dims):
            img = resample(img, dims)
        if lab.data.shape != tuple(dims):
            lab = resample(lab, dims)
        cases.append(Case(id=cid, image=img, label=lab))
    return cases


def _gather_cases(args, net_cfg, data_opts):
    if getattr(args, "phantoms", 0):
        dims = tuple(data_opts.get("dims", net_cfg.input_dims))
        spacing = tuple(data_opts.get("spacing", (1.0, 1.0, 2.0)))
        return phantom_cases(args.phantoms, args.seed or 0, dims, spacing)
    if getattr(args, "data_dir", None):
        return _load_cases(args.data_dir, net_cfg.input_dims)
    raise ConfigurationError("provide --data-dir or --phantoms")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    _, _, data_opts = build_configs(args)
    dims = tuple(data_opts.get("dims", (32, 32, 16)))
    spacing = tuple(data_opts.get("spacing", (1.0, 1.0, 2.0)))
    os.makedirs(args.out_dir, exist_ok=True)
    seed = args.seed or 0
    for i in range(args.count):
        vol, lab = make_phantom(seed + i, dims, spacing)
        cid = f"case-{seed + i:04d}"
        write_volume(vol, os.path.join(args.out_dir, f"{cid}-image.vol"))
        write_volume(lab, os.path.join(args.out_dir, f"{cid}-label.vol"))
        slice_to_pgm(vol, os.path.join(args.out_dir, f"{cid}-image.pgm"))
        slice_to_pgm(lab, os.path.join(args.out_dir, f"{cid}-label.pgm"))
    print(f"wrote {args.count} cases to {args.out_dir}")
    return EXIT_OK


def cmd_train(args):
    net_cfg, train_cfg, data_opts = build_configs(args)
    cases = _gather_cases(args, net_cfg, data_opts)
    net = AutoCENet(net_cfg)
    record = train(net, cases, train_cfg)
    dsc = hard_dsc(net, cases)
    if train_cfg.out_dir:
        log_path = os.path.join(train_cfg.out_dir, "train_log.csv")
        with open(log_path, "w") as f:
            f.write("iteration,total,l_final,l_prior,l_contour\n")
            for i in range(record.iterations):
                f.write(f"{i},{record.total[i]!r},{record.l_final[i]!r},"
                        f"{record.l_prior[i]!r},{record.l_contour[i]!r}\n")
    print(f"trained {record.iterations} iterations in "
          f"{record.wall_time:.1f}s; train DSC {dsc:.4f}; "
          f"final loss {record.total[-1]:.4f}")
    return EXIT_OK


def cmd_eval(args):
    net_cfg, _, data_opts = build_configs(args)
    cases = _gather_cases(args, net_cfg, data_opts)
    net = AutoCENet(net_cfg)
    load_checkpoint(net, args.checkpoint)
    reports, agg = evaluate_run(net, cases, oracle=args.oracle)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        write_report_csv(os.path.join(args.out_dir, "report.csv"), reports)
        for case in cases:
            pred = net.predict(case.image)
            write_volume(pred, os.path.join(args.out_dir,
                                            f"{case.id}-pred.vol"))
            slice_to_pgm(pred, os.path.join(args.out_dir,
                                            f"{case.id}-pred.pgm"))
    for name, (mean, std) in agg.items():
        if mean is None:
            print(f"{name}: undefined")
        else:
            print(f"{name}: {mean:.4f} +/- {std:.4f}")
    return EXIT_OK


def cmd_xval(args):
    net_cfg, train_cfg, data_opts = build_configs(args)
    cases = _gather_cases(args, net_cfg, data_opts)
    fractions = tuple(float(x) for x in args.fractions.split(","))
    seeds = tuple(int(x) for x in args.seeds.split(","))
    curves = []
    for seed in seeds:
        curve = nfold_study(cases, fractions, net_cfg, train_cfg, seed=seed)
        curves.append((seed, curve))
        for frac, n_train, loss in curve:
            print(f"seed {seed} fraction {frac}: n_train={n_train} "
                  f"test dice loss {loss:.4f}")
    mean_curve = []
    for i, frac in enumerate(fractions):
        losses = [curve[i][2] for _, curve in curves]
        mean_curve.append((frac, curves[0][1][i][1], float(np.mean(losses))))
        print(f"fraction {frac}: mean test dice loss {np.mean(losses):.4f}")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        write_curve_csv(os.path.join(args.out_dir, "xval_curve.csv"), mean_curve)
        plot_curve(os.path.join(args.out_dir, "xval_curve.png"), mean_curve)
    return EXIT_OK


def cmd_metrics(args):
    pred = read_volume(args.pred)
    gt = read_volume(args.gt)
    if not isinstance(pred, LabelVolume) or not isinstance(gt, LabelVolume):
        raise VolumeFormatError("metrics needs two label volumes")
    report = evaluate(pred, gt, oracle=args.oracle)
    if args.out:
        write_report_csv(args.out, [(os.path.basename(args.pred), report)])
    def fmt(v):
        return "NA" if v is None else f"{v:.6f}"
    print(f"dsc={fmt(report.dsc)} precision={fmt(report.precision)} "
          f"sensitivity={fmt(report.sensitivity)} hd_mm={fmt(report.hd)} "
          f"hd95_mm={fmt(report.hd95)} assd_mm={fmt(report.assd)} "
          f"tp={report.tp} fp={report.fp} fn={report.fn}")
    return EXIT_OK


def cmd_gradcheck(args):
    failures = 0
    for name, runner in standard_suites(seed=args.seed or 0):
        result = runner()
        status = "PASS" if result.ok else "FAIL"
        print(f"{status} {name}: {len(result.entries)} coords, "
              f"max rel {result.max_rel:.2e}")
        if not result.ok:
            failures += 1
            print(result.summary())
    if failures:
        print(f"{failures} suites failed")
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="autocenet",
        description="Desk-scale auto-context liver segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ablation=True):
        p.add_argument("--config", help="dotted-key config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", dest="out_dir", default="")
        if ablation:
            p.add_argument("--ablation", default=None,
                           choices=["none", "autonet", "att", "A", "R", "AR",
                                    "FC", "MC"])

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    common(p, ablation=False)
    p.add_argument("--count", type=int, default=10)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a network")
    common(p)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--phantoms", type=int, default=0,
                   help="train on N generated phantoms instead of files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--phantoms", type=int, default=0)
    p.add_argument("--oracle", action="store_true",
                   help="brute-force distance computations")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("xval", help="training-set size study")
    common(p)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--phantoms", type=int, default=0)
    p.add_argument("--fractions", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("metrics", help="evaluate one prediction/truth pair")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--out", help="write a one-row report CSV here")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (VolumeFormatError, CheckpointFormatError, DimensionError,
            FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, UndefinedMetricError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
