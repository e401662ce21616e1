"""Command-line entry point: ``gfra <command> --config FILE --seed N --out DIR``."""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np
import yaml

from . import basis as bm
from . import detector as det
from . import harness as hx
from .channel import ConfigurationError, generate_channels

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _load(args) -> hx.ExperimentConfig:
    cfg = hx.load_config(args.config) if args.config else hx.ExperimentConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise hx.ConfigError("seed", "must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    hx.validate(cfg)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_config(cfg, out: Path) -> None:
    (out / "config.yaml").write_text(yaml.safe_dump(hx.config_to_dict(cfg), sort_keys=False))


def cmd_gen_channels(args) -> None:
    cfg = _load(args)
    out = _out_dir(args)
    grid, pdp, pulse, dop = cfg.channel_setup()
    p = cfg.population
    H = generate_channels(grid, pdp, pulse, dop, p.K, p.M, hx._stream(cfg.seed, hx.CHANNELS, args.trial),
                          cfg.channel.symbol_time_scale)
    H.save(out / "channels.bin")
    _save_config(cfg, out)
    print(f"wrote {out / 'channels.bin'} (L={grid.L}, K={p.K}, M={p.M})")


def cmd_build_basis(args) -> None:
    cfg = _load(args)
    out = _out_dir(args)
    for label, b in hx.build_bases(cfg).items():
        b.save(out / f"basis_{label}.bin")
        print(f"wrote basis_{label}.bin (N={b.N})")
    _save_config(cfg, out)


def cmd_kappa(args) -> None:
    cfg = _load(args)
    out = _out_dir(args)
    reports = hx.kappa_reports(cfg)
    bm.write_kappa_csv(out / "kappa.csv", reports)
    _save_config(cfg, out)
    for r in reports:
        print(f"{r.model:>14} N={r.N:<3} kappa={r.kappa:.4f}")


def cmd_sweep_order(args) -> None:
    cfg = _load(args)
    out = _out_dir(args)
    reports = hx.kappa_reports(cfg, orders=range(1, cfg.basis.max_order + 1))
    bm.write_kappa_csv(out / "kappa.csv", reports)
    _save_config(cfg, out)
    for r in reports:
        print(f"{r.model:>14} N={r.N:<3} kappa={r.kappa:.4f}")


def cmd_detect(args) -> None:
    """Run a single trial; each model gets its own ``gamma.csv`` and ``trace.csv``."""
    cfg = _load(args)
    out = _out_dir(args)
    bases = None if cfg.basis.on_sample else hx.build_bases(cfg)
    results, traces = hx.run_trial(cfg, args.trial, bases)
    for label, res in results.items():
        sub = out / label
        sub.mkdir(exist_ok=True)
        det.write_gamma_csv(sub / "gamma.csv", res.gamma_hat)
        traces[label].write_csv(sub / "trace.csv")
        np.savetxt(sub / "activity.csv", res.a, fmt="%d", header="active", comments="")
        print(f"{label:>14} min total error {res.min_total_error:.4f}")
    _save_config(cfg, out)


def cmd_experiment(args) -> None:
    cfg = _load(args)
    if args.dry_run:
        print(json.dumps(hx.estimate_resources(cfg), indent=2))
        return
    out = _out_dir(args)
    report = hx.run_experiment(cfg, out)
    _save_config(cfg, out)
    for label, (mean, std) in report.summary().items():
        print(f"{label:>14} min total error {mean:.4f} +- {std:.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfra", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-channels": (cmd_gen_channels, "simulate a K x M channel tensor"),
        "build-basis": (cmd_build_basis, "build the configured approximation bases"),
        "kappa": (cmd_kappa, "approximation error of each configured model"),
        "detect": (cmd_detect, "run activity detection on one trial"),
        "experiment": (cmd_experiment, "paired multi-trial detection experiment"),
        "sweep-order": (cmd_sweep_order, "kappa of PCA against the basis order"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        if name in ("gen-channels", "detect"):
            p.add_argument("--trial", type=int, default=0, help="trial index for the random streams")
        if name == "experiment":
            p.add_argument("--dry-run", action="store_true", help="validate and print resource estimates")
        p.set_defaults(func=func)
    return parser


def _failure_site(exc: BaseException) -> str:
    """``module.function`` of the innermost package frame that raised ``exc``."""
    site = "gfra"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        module = frame.f_globals.get("__name__", "")
        if module.startswith("gfra") and module != __name__:
            site = f"{module}.{frame.f_code.co_name}"
    return site


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (hx.ConfigError, ConfigurationError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (det.NumericalError, bm.RankError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure in {_failure_site(exc)}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
