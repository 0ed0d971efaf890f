"""``evpino`` command line: synth, train, predict, eval, psd and resolution."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .config import RunConfig, load_config
from .dataset import Scaler, build_datasets, load_log, make_windows, write_log
from .errors import ConfigError, EvPinoError
from .evaluation import (metrics, param_report, predict_log, psd_compare, resolution_eval,
                         write_metrics_csv, write_rates_csv)
from .operator import OperatorModel, load_checkpoint, save_checkpoint
from .physics import VehicleSpec
from .synth import gen_log
from .training import fit

log = logging.getLogger("evpino")


def _stem(path, suffix):
    return f"{os.path.splitext(path)[0]}{suffix}.csv"


def _require(args, *names):
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"{args.command} needs {' and '.join(missing)}")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, synth=replace(cfg.synth, seed=args.seed))
    return cfg


def _log_path(args, cfg):
    path = args.log or cfg.data.log
    if path is None:
        raise ConfigError(f"{args.command} needs --log or data.log in the config")
    return path


def _restore(args, cfg):
    # with an explicit config the checkpoint must match its operator shape
    model, meta = load_checkpoint(args.checkpoint, expect=cfg.operator if args.config else None)
    spec = VehicleSpec.from_dict(meta["vehicle"]) if "vehicle" in meta else cfg.vehicle
    scaler = Scaler.from_dict(meta["scaler"])
    return model, meta, spec, scaler


def cmd_synth(args):
    _require(args, "out")
    cfg = _config(args)
    lg = gen_log(cfg.synth, min_samples=2 * cfg.operator.window)
    write_log(lg, args.out, cfg.data.schema())
    print(f"wrote {len(lg)} samples at {lg.fs:g} Hz to {args.out}")


def cmd_train(args):
    _require(args, "checkpoint")
    cfg = _config(args)
    lg = load_log(_log_path(args, cfg), cfg.data.schema())
    sg = cfg.sg_for(lg.fs)
    train, val = build_datasets(lg, cfg.operator.window, cfg.data.stride, cfg.data.frac_train, sg)
    model = OperatorModel(cfg.operator, seed=cfg.seed)
    tcfg = replace(cfg.training, seed=cfg.seed)
    model, report = fit(model, train, val, cfg.vehicle, tcfg)
    meta = {"vehicle": cfg.vehicle.to_dict(), "scaler": train.scaler.to_dict(), "fs": lg.fs,
            "stride": cfg.data.stride, "sg": {"window": sg.window, "order": sg.order},
            "best_val": report.best_val, "epoch": report.best_epoch, "seed": cfg.seed}
    save_checkpoint(args.checkpoint, model, meta)
    report_path = args.out or _stem(args.checkpoint, "_train")
    report.write_csv(report_path)
    print(f"best validation MSE {report.best_val:.6g} kW^2 at epoch {report.best_epoch} "
          f"({report.stop_reason}); checkpoint {args.checkpoint}, report {report_path}")


def _predict(args):
    """Stitched prediction plus what produced it: ``(pred, model, spec, log, windows)``."""
    _require(args, "checkpoint")
    cfg = _config(args)
    model, meta, spec, scaler = _restore(args, cfg)
    lg = load_log(_log_path(args, cfg), cfg.data.schema())
    stride, sg = meta.get("stride", cfg.data.stride), cfg.sg_for(lg.fs)
    pred = predict_log(model, lg, spec, scaler, stride=stride, sg=sg)
    return pred, model, spec, lg, make_windows(lg, model.cfg.window, stride, scaler=scaler, sg=sg)


def cmd_predict(args):
    _require(args, "out")
    pred, _, _, lg, _ = _predict(args)
    pred.write_csv(args.out)
    print(f"wrote {len(pred)} of {len(lg)} samples to {args.out}")


def cmd_eval(args):
    pred, model, spec, _, ws = _predict(args)
    rep = metrics(pred.p_true, pred.p_pred)
    params = param_report(model, spec, ws)
    print(f"MAE {rep.mae:.4f} kW  RMSE {rep.rmse:.4f} kW", end="")
    if rep.rmae is not None:
        print(f"  rMAE {rep.rmae:.4f}  rRMSE {rep.rrmse:.4f}", end="")
    print()
    for row in params.rows:
        extra = "" if row.median is None else f"  median {row.median:.4g} IQR [{row.q1:.4g}, {row.q3:.4g}]"
        print(f"  {row.name:7s} {row.value:.6g}{extra}")
    if args.out:
        write_metrics_csv(rep, args.out)
        params.write_csv(_stem(args.out, "_params"))


def cmd_psd(args):
    _require(args, "out")
    pred, _, _, lg, _ = _predict(args)
    rep = psd_compare(pred.p_true, pred.p_pred, lg.fs)
    rep.write_csv(args.out, _stem(args.out, "_true"))
    verdict = "aligned" if rep.aligned else "NOT aligned"
    print(f"top peaks (Hz): truth {np.round(rep.freqs[rep.peaks_true], 4).tolist()}  "
          f"prediction {np.round(rep.freqs[rep.peaks_pred], 4).tolist()}  -> {verdict}")


def _rates(text):
    try:
        rates = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--rates: cannot parse {text!r}") from None
    if not rates:
        raise ConfigError("--rates is empty")
    return rates


def cmd_resolution(args):
    _require(args, "checkpoint", "rates")
    cfg = _config(args)
    model, meta, spec, scaler = _restore(args, cfg)
    lg = load_log(_log_path(args, cfg), cfg.data.schema())
    results = resolution_eval(model, lg, spec, scaler, _rates(args.rates),
                              stride=meta.get("stride", cfg.data.stride))
    for r in results:
        if r.metrics is None:
            print(f"{r.rate:g} Hz: {r.note}")
        else:
            print(f"{r.rate:g} Hz: MAE {r.metrics.mae:.4f} kW  RMSE {r.metrics.rmse:.4f} kW")
    if args.out:
        write_rates_csv(results, args.out)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
            "psd": cmd_psd, "resolution": cmd_resolution}


def build_parser():
    parser = argparse.ArgumentParser(prog="evpino", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--log", help="CSV drive log")
        p.add_argument("--checkpoint", help="model checkpoint to write (train) or read")
        p.add_argument("--out", help="output CSV path")
        p.add_argument("--rates", help="comma-separated sampling rates in Hz, e.g. 10,5,2")
        p.add_argument("--seed", type=int, help="override the config seed")
    return parser


def _thread_limit():
    value = os.environ.get("EVPINO_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"EVPINO_THREADS must be an integer, got {value!r}") from None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl is not installed; EVPINO_THREADS is ignored")
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            COMMANDS[args.command](args)
    except EvPinoError as exc:
        print(f"evpino {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"evpino {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
