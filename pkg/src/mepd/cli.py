"""Command-line entry point: ``mepd simulate|train|mismatch|layersweep``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .harness import SimConfig, emit_csv, emit_layer_csv, layer_sweep, mismatch_experiment, sweep
from .learn import ParamTable, TrainConfig, load_table, save_table, train_table
from .model import ConfigurationError


def parse_snrs(text: str) -> list[float]:
    """``"18,20,22"`` or an inclusive range ``"12:26:2"``."""
    text = text.strip()
    if ":" in text:
        parts = [float(v) for v in text.split(":")]
        if len(parts) == 2:
            parts.append(2.0)
        lo, hi, step = parts
        if step <= 0:
            raise argparse.ArgumentTypeError("range step must be positive")
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return [round(lo + i * step, 10) for i in range(max(n, 0))]
    return [float(v) for v in text.split(",") if v.strip()]


def parse_layers(text: str) -> list[int]:
    """``"1..8"``, ``"1:8"`` or ``"1,3,5"``."""
    for sep in ("..", ":"):
        if sep in text:
            lo, hi = (int(v) for v in text.split(sep))
            return list(range(lo, hi + 1))
    return [int(v) for v in text.split(",")]


def _common(p: argparse.ArgumentParser):
    p.add_argument("--nt", type=int, required=True)
    p.add_argument("--nr", type=int, required=True)
    p.add_argument("--mod", default="16qam", choices=["qpsk", "16qam", "64qam"])
    p.add_argument("--channel", default="iid", help="iid or corr:K")
    p.add_argument("--seed", type=int, default=0)


def _sim_args(p: argparse.ArgumentParser, detector_default="epd"):
    _common(p)
    p.add_argument("--detector", default=detector_default, choices=["lmmse", "mmse-sic", "epd", "mepd", "ml"])
    p.add_argument("--snr", type=parse_snrs, required=True)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--params", help="parameter table file (MEPD)")
    p.add_argument("--max-errors", type=int, default=2000)
    p.add_argument("--max-pairs", type=int, default=100_000)
    p.add_argument("--batch", type=int, default=100, help="vectors per work batch")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)


def _sim_config(a, **kw) -> SimConfig:
    table: ParamTable | None = load_table(a.params) if a.params else None
    return SimConfig(
        n_t=a.nt, n_r=a.nr, modulation=a.mod, detector=a.detector, iters=a.iters,
        params=table, snrs=tuple(a.snr), channel=a.channel, max_errors=a.max_errors,
        max_pairs=a.max_pairs, seed=a.seed, workers=a.workers, batch_size=a.batch, **kw,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mepd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="SER versus SNR for one detector")
    _sim_args(p)

    p = sub.add_parser("train", help="learn MEPD parameters on an SNR grid")
    _common(p)
    p.add_argument("--snr", type=parse_snrs, required=True)
    p.add_argument("--allinone", action="store_true", help="one record trained over the whole SNR range")
    p.add_argument("--layers", type=int, default=5)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--pairs", type=int, default=10_000)
    p.add_argument("--batch", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-decay", type=float, default=0.99)
    p.add_argument("--validation-pairs", type=int, default=2000)
    p.add_argument("--out", required=True)

    p = sub.add_parser("mismatch", help="MEPD with parameters loaded under an SNR estimation error")
    _sim_args(p, detector_default="mepd")
    p.add_argument("--devi", type=float, required=True, choices=[0.0, 3.0, 5.0])

    p = sub.add_parser("layersweep", help="SER versus number of layers at one SNR")
    _sim_args(p)
    p.add_argument("--layers", type=parse_layers, default=list(range(1, 9)))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _run(args)
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"mepd: error: {exc}", file=sys.stderr)
        return 2


def _run(args) -> int:
    if args.command == "simulate":
        curve = sweep(_sim_config(args))
        emit_csv(curve, args.out)
        for pt in curve.points:
            print(f"{pt.snr_db:g} dB  ser={pt.ser:.4g}  ({pt.symbol_errors}/{pt.symbols_tested})")
    elif args.command == "train":
        from .harness import parse_channel

        base = TrainConfig(
            n_t=args.nt, n_r=args.nr, modulation=args.mod, snr_db=args.snr[0], layers=args.layers,
            epochs=args.epochs, pairs_per_epoch=args.pairs, batch_size=args.batch,
            learning_rate=args.lr, lr_decay=args.lr_decay, seed=args.seed,
            correlation=parse_channel(args.channel), validation_pairs=args.validation_pairs,
        )
        table, reports = train_table(base, args.snr, allinone=args.allinone)
        save_table(table, args.out)
        for snr, rep in reports.items():
            print(f"{snr:g} dB  lambda={rep.params.lambda_init:.4g}  best epoch {rep.best_epoch}"
                  f"  val ser {min(v[1] for v in rep.validation):.4g}")
    elif args.command == "mismatch":
        cfg = _sim_config(args)
        curve = mismatch_experiment(cfg, args.devi)
        emit_csv(curve, args.out)
        for pt in curve.points:
            print(f"{pt.snr_db:g} dB  ser={pt.ser:.4g}")
    elif args.command == "layersweep":
        cfg = _sim_config(args)
        by_layers = None
        if cfg.detector == "mepd" and cfg.params is not None:
            by_layers = {cfg.params.L: cfg.params}
            cfg.params = None
        result = layer_sweep(cfg, args.layers, by_layers)
        emit_layer_csv(result, args.out)
        for L, pt in result.points:
            print(f"L={L}  ser={pt.ser:.4g}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
