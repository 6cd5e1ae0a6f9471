"""Command-line interface.

Exit codes: 0 success, 1 configuration/usage error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autoencoder as ae_mod
from . import dataset as ds_mod
from .errors import ConfigError, StageError
from .neuron import CODE_MAX
from .pipeline import (RunConfig, analyze_posterior, cmd_pipeline, cmd_simulate, export_report,
                       make_target, train_autoencoder, trace_times, write_csv)
from .snpe import Posterior, PriorBox, device_simulator, infer

log = logging.getLogger("adexsbi")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _codes(text: str) -> np.ndarray:
    try:
        codes = np.array([int(c) for c in text.split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse codes {text!r}") from None
    if codes.shape != (4,) or codes.min() < 0 or codes.max() > CODE_MAX:
        raise ConfigError(f"--codes needs four integers in [0, {CODE_MAX}]")
    return codes


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _load_config(args, extra: dict[str, str] | None = None) -> RunConfig:
    overrides = _overrides(args.set)
    overrides.update(extra or {})
    if args.config is None:
        return RunConfig.from_mapping(overrides)
    return RunConfig.from_file(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adexsbi", description="AdEx parameter inference from membrane traces")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", type=Path, help="flat key=value run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        if seed:
            sp.add_argument("--seed", type=int, required=True)

    sp = sub.add_parser("simulate", help="simulate one trial to CSV")
    common(sp)
    sp.add_argument("--codes", required=True, help="a,b,g_tauw,v_r codes")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--spikes", type=Path, help="also write integrator spike times")

    sp = sub.add_parser("gen-dataset", help="generate a dataset file")
    common(sp)
    sp.add_argument("--size", type=int, help="overrides dataset.size")
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("train-ae", help="train the autoencoder")
    common(sp)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True, help="checkpoint directory")

    sp = sub.add_parser("infer", help="multi-round posterior estimation")
    common(sp)
    sp.add_argument("--ae", type=Path, required=True, help="autoencoder checkpoint")
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("analyze", help="posterior statistics and predictive checks")
    common(sp)
    sp.add_argument("--posterior", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("pipeline", help="generate -> train-ae -> infer -> analyze (resumable)")
    common(sp)
    sp.add_argument("--out", type=Path, required=True)
    return p


def _run(args) -> None:
    if args.command == "simulate":
        cfg = _load_config(args)
        cmd_simulate(cfg.device, _codes(args.codes), args.seed, args.out, args.spikes)
    elif args.command == "gen-dataset":
        cfg = _load_config(args, {"dataset.size": str(args.size)} if args.size else None)
        ds = ds_mod.generate(cfg.dataset.size, cfg.device, args.seed, workers=cfg.dataset.workers)
        ds_mod.save(ds, args.out)
    elif args.command == "train-ae":
        cfg = _load_config(args)
        if not args.dataset.is_file():
            raise ConfigError(f"dataset not found: {args.dataset}")
        ds = ds_mod.load(args.dataset)
        model, report, te = train_autoencoder(cfg, ds, args.seed, args.out)
        if len(te):
            write_csv(args.out / "test_mse.csv", ["row", "mse"],
                      enumerate(ae_mod.per_trace_mse(model, te.traces)))
        print(f"best validation MSE {report.best_val_loss:.6g} at epoch {report.best_epoch}")
    elif args.command == "infer":
        cfg = _load_config(args)
        if not args.ae.is_file():
            raise ConfigError(f"autoencoder checkpoint not found: {args.ae}")
        encoder = ae_mod.Autoencoder.load(args.ae)
        x_star = make_target(cfg, args.seed)
        post = infer(device_simulator(cfg.device), PriorBox(), x_star, encoder,
                     cfg.snpe.round_config(), args.seed, out_dir=args.out)
        post.save(args.out / "posterior.ckpt")
        write_csv(args.out / "target.csv", ["time_ms", "value"], zip(trace_times(), x_star))
    elif args.command == "analyze":
        cfg = _load_config(args)
        if not args.posterior.is_file():
            raise ConfigError(f"posterior checkpoint not found: {args.posterior}")
        post = Posterior.load(args.posterior)
        a = cfg.analysis
        report = analyze_posterior(post, device_simulator(cfg.device), a.n_samples, args.seed,
                                   a.n_predictive, a.n_baseline, cfg.snpe.target, a.spike_threshold)
        export_report(report, args.out, a.bins)
        print(json.dumps({k: report.summary()[k] for k in ("median", "corr_b_gtauw", "flags")}))
    elif args.command == "pipeline":
        cfg = _load_config(args)
        manifest = cmd_pipeline(cfg, args.seed, args.out)
        for stage in manifest["stages"]:
            print(f"{stage['name']}: {stage['status']}")


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # any other failure is a failed stage
        print(f"error in {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
