"""``nodulemtl`` command line: gen-data, train, pseudo-label, eval, plot.

Exit codes: 0 success, 1 usage or config error, 2 data/format error,
3 numeric error (NaN or Inf).  Log verbosity comes from NODULEMTL_LOG_LEVEL.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import has_checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config, save_config
from .data import (
    PSEUDO, balance_by_augmentation, generate_synthetic, kfold_split, read_dataset,
    verify_dataset, write_dataset,
)
from .errors import (
    ConfigError, DataError, FormatError, NoduleMTLError, NumericError, ShapeError,
    UndefinedMetricError, UsageError,
)
from .metrics import FoldMetrics, FrocCurve, MetricsLog, evaluate_fold
from .model import build_network, load_weights, save_weights
from .optim import Adam
from .pipeline import MULTI_SEMISUP, STRATEGIES, fold_records, run_strategy
from .plot import froc_svg, learning_curve_svg, write_svg
from .semisup import LabeledPool, Progress, assert_manual_unchanged, pseudo_label, write_pool_checkpoint

log = logging.getLogger("nodulemtl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_ENV = "NODULEMTL_LOG_LEVEL"


class _Halt(Exception):
    """Raised by ``--halt-after`` to stop a run with its checkpoint in place."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which we reserve for data errors
        raise UsageError(f"{self.prog}: {message}")


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, UsageError)):
        return EXIT_USAGE
    if isinstance(exc, (DataError, FormatError, ShapeError, UndefinedMetricError, OSError)):
        return EXIT_DATA
    return EXIT_USAGE if isinstance(exc, NoduleMTLError) else EXIT_DATA


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if getattr(args, "fold", None) is not None:
        cfg.run.val_fold = args.fold
    if getattr(args, "strategy", None) is not None:
        cfg.run.strategy = args.strategy
    return cfg.validate()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(cfg: RunConfig, data_dir):
    ds, split = read_dataset(data_dir)
    if split is None:
        split = kfold_split(ds, cfg.data.folds, cfg.run.seed)
    if split.k != cfg.data.folds:
        raise ConfigError(f"dataset has {split.k} folds but data.folds is {cfg.data.folds}")
    return ds, split


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _effective_config(args)
    out = _out_dir(args)
    d = cfg.data
    ds = generate_synthetic(cfg.run.seed, d.n_scans, d.nodules_per_scan, d.nonnodules_per_scan, tuple(d.patch_shape))
    if d.augment:
        ds = balance_by_augmentation(ds)
    split = kfold_split(ds, d.folds, cfg.run.seed)
    manifest = write_dataset(ds, out, split)
    save_config(cfg, out / "config.ini")
    log.info("wrote %d records to %s", len(ds), manifest)
    if args.verify:
        problems = verify_dataset(ds, split)
        back, back_split = read_dataset(manifest)
        if [r.id for r in back] != [r.id for r in ds]:
            problems.append("manifest round trip changed the record list")
        for a, b in zip(ds, back):
            if not np.array_equal(a.patch, b.patch) or (a.mask is None) != (b.mask is None) or (
                a.mask is not None and not np.array_equal(a.mask, b.mask)
            ):
                problems.append(f"{a.id}: volume round trip is not bit-exact")
        if back_split is None or back_split.assignment != split.assignment:
            problems.append("fold assignment did not round-trip")
        problems.extend(verify_dataset(back, back_split))
        if problems:
            for p in problems:
                print(f"verify: {p}", file=sys.stderr)
            raise DataError(f"{len(problems)} invariant violation(s) in generated dataset")
        print(f"verify: ok ({len(ds)} records)")
    return EXIT_OK


def _write_metrics(m: FoldMetrics, fold: int, n_candidates: int, out: Path) -> None:
    with (out / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "dsc", "sensitivity", "froc_score", "n_nodules", "n_candidates"])
        w.writerow([fold, repr(m.dsc), repr(m.sensitivity), repr(m.froc_score), m.n_nodules, n_candidates])
    m.curve.to_csv(out / "froc.csv")


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    out = _out_dir(args)
    ck_dir = out / "checkpoint"
    cfg_path = out / "config.ini"
    if args.resume and has_checkpoint(ck_dir):
        if not cfg_path.exists() or cfg_path.read_text() != dump_config(cfg):
            raise ConfigError(f"{cfg_path} differs from the effective config; refusing to resume")
    elif args.resume:
        log.warning("no checkpoint in %s, starting from scratch", ck_dir)
    save_config(cfg, cfg_path)

    ds, split = _load_split(cfg, args.data)
    train, val = fold_records(ds, split, cfg.run.val_fold, cfg.run.labeled_fraction, cfg.run.seed)
    net_cfg = cfg.network_config()
    semisup = cfg.run.strategy == MULTI_SEMISUP

    resume = pool = remaining = None
    if args.resume and has_checkpoint(ck_dir):
        ck = load_checkpoint(ck_dir, net_cfg, {r.id: r for r in train})
        net, opt, full_log, resume = ck.net, ck.optimizer, ck.log, ck.progress
        pool, remaining = ck.pool, ck.remaining
        log.info("resuming after round %d epoch %d", resume.round, resume.epoch)
    else:
        net = build_network(net_cfg)
        o = cfg.optim
        opt = Adam(net.parameters(), lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
        full_log = MetricsLog()
        if semisup:
            pool = LabeledPool([r for r in train if r.mask is not None])
            remaining = [r for r in train if r.mask is None]
    manual_before = LabeledPool([r for r in pool.records if r.provenance != PSEUDO]) if pool else None

    state = {"pool": pool, "remaining": remaining, "epochs": 0}

    def on_epoch(round_, epoch, net_, opt_, history):
        full_log.append(history.rows[-1])
        save_checkpoint(ck_dir, net_, opt_, full_log, Progress(round_, epoch), state["pool"], state["remaining"])
        state["epochs"] += 1
        if args.halt_after is not None and state["epochs"] >= args.halt_after:
            raise _Halt()

    def on_round(round_, pool_, remaining_):
        state["pool"], state["remaining"] = pool_, list(remaining_)
        save_checkpoint(ck_dir, net, opt, full_log, Progress(round_, 0), pool_, remaining_)

    try:
        result = run_strategy(cfg.run.strategy, train, val, net_cfg, cfg.loss_config(), cfg.train_config(),
                              cfg.semisup_config(), net=net, optimizer=opt, on_epoch=on_epoch,
                              on_round=on_round, resume=resume, pool=pool, remaining=remaining)
    except _Halt:
        print(f"halted after {state['epochs']} epoch(s); checkpoint in {ck_dir}")
        return EXIT_OK

    for p in result.net.parameters():
        p.check_finite()
    save_weights(result.net, out / "weights.ndlw")
    full_log.to_csv(out / "metrics_log.csv")
    if result.metrics is not None:
        _write_metrics(result.metrics, cfg.run.val_fold, len(val), out)
    if semisup:
        with (out / "rounds.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "offered", "accepted", "rejected", "remaining", "pool_size"])
            for s in result.rounds:
                w.writerow([s.round, s.offered, s.accepted, s.rejected, s.remaining, s.pool_size])
        write_pool_checkpoint(result.pool, out, len(result.rounds))
    if args.verify:
        back = load_weights(out / "weights.ndlw", net_cfg)
        for (n, a), (_, b) in zip(result.net.named_parameters(), back.named_parameters()):
            if not np.array_equal(a.data, b.data):
                raise FormatError(f"verify: weights round trip changed {n}")
        if manual_before is not None:
            assert_manual_unchanged(manual_before, result.pool)
        print("verify: ok")
    if result.metrics is not None:
        m = result.metrics
        print(f"{cfg.run.strategy}: dsc {m.dsc:.4f} sensitivity {m.sensitivity:.4f} froc {m.froc_score:.4f}")
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    cfg = _effective_config(args)
    out = _out_dir(args)
    save_config(cfg, out / "config.ini")
    ds, split = _load_split(cfg, args.data)
    train, _ = fold_records(ds, split, cfg.run.val_fold, cfg.run.labeled_fraction, cfg.run.seed)
    net = load_weights(args.weights, cfg.network_config())
    unlabeled = [r for r in train if r.mask is None]
    if not unlabeled:
        raise DataError("no mask-less training records to pseudo-label (is run.labeled_fraction 1?)")
    ss = cfg.semisup_config()
    accepted, rejected = pseudo_label(net, unlabeled, cfg.train.seg_threshold, ss.confidence_floor, 1,
                                      cfg.train.batch_size)
    pool = LabeledPool()
    pool.add_pseudo(accepted)
    manifest = write_pool_checkpoint(pool, out, 1)
    print(f"pseudo-labeled {len(accepted)} record(s), rejected {len(rejected)}; manifest {manifest}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _effective_config(args)
    out = _out_dir(args)
    save_config(cfg, out / "config.ini")
    ds, split = _load_split(cfg, args.data)
    _, val = fold_records(ds, split, cfg.run.val_fold)
    net = load_weights(args.weights, cfg.network_config())
    m = evaluate_fold(net, val, cfg.train.seg_threshold, cfg.train.batch_size)
    _write_metrics(m, cfg.run.val_fold, len(val), out)
    print(f"fold {cfg.run.val_fold}: dsc {m.dsc:.4f} sensitivity {m.sensitivity:.4f} froc {m.froc_score:.4f}")
    return EXIT_OK


def _series_names(paths: list[Path]) -> list[str]:
    stems = [p.stem for p in paths]
    return [s if stems.count(s) == 1 else f"{p.parent.name}/{s}" for s, p in zip(stems, paths)]


def cmd_plot(args) -> int:
    paths = [Path(p) for p in args.csv]
    logs, curves = [], []
    # load everything first: a bad input must not leave a partial SVG behind
    for name, path in zip(_series_names(paths), paths):
        with path.open(newline="") as fh:
            header = next(csv.reader(fh), None)
        if not header:
            raise DataError(f"{path}: empty CSV")
        if header[0] == "threshold":
            curves.append((name, FrocCurve.from_csv(path)))
        else:
            logs.append((name, MetricsLog.from_csv(path)))
    svgs = []
    if logs:
        svgs.append(("learning_curve.svg", learning_curve_svg(logs, "val_dsc")))
        svgs.append(("learning_curve_sensitivity.svg", learning_curve_svg(logs, "val_sens")))
    if curves:
        svgs.append(("froc.svg", froc_svg(curves)))
    out = _out_dir(args)
    for fname, text in svgs:
        write_svg(text, out / fname)
        print(out / fname)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nodulemtl", description="Multi-task nodule classification and segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="config file (defaults apply to anything unset)")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with fold assignment")
    common(p, "dataset directory")
    p.add_argument("--verify", action="store_true", help="re-check dataset invariants and round trip")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one strategy on one fold")
    common(p, "run directory")
    p.add_argument("--data", required=True, help="dataset directory or manifest")
    p.add_argument("--fold", type=int, help="validation fold (overrides run.val_fold)")
    p.add_argument("--strategy", choices=STRATEGIES, help="overrides run.strategy")
    p.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
    p.add_argument("--halt-after", type=int, metavar="N", help="stop after N epochs, keeping the checkpoint")
    p.add_argument("--verify", action="store_true", help="check weights round trip and manual-label immutability")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo-label", help="predict masks for the mask-less training records")
    common(p, "output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("eval", help="evaluate weights on a validation fold")
    common(p, "output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="SVG charts from metrics logs and FROC CSVs")
    p.add_argument("csv", nargs="+", help="metrics_log.csv and/or froc.csv files, one series each")
    p.add_argument("--config", help="accepted for symmetry; unused")
    p.add_argument("--seed", type=int, help="accepted for symmetry; unused")
    p.add_argument("--out", required=True, help="directory for the SVG files")
    p.set_defaults(func=cmd_plot)
    return parser


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise UsageError(f"{LOG_ENV}={level!r} is not a logging level")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (NoduleMTLError, OSError) as exc:
        print(f"nodulemtl: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
