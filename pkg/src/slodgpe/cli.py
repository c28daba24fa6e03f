"""Command-line entry points for the experiment runner."""

import argparse
import os
import sys

from . import harness


def _add_common(sub):
    sub.add_argument("--config", help="INI file overriding preset fields")
    sub.add_argument("--preset", help="named preset (when no config file)")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--threads", type=int, default=1,
                     help="parallel mesh-size jobs in sweeps")
    sub.add_argument("--cache", default=None,
                     help="basis cache directory (default: <out>/basis-cache)")


def _config_from(args, default_preset=None):
    if args.config:
        return harness.load_config(args.config, seed=args.seed)
    name = args.preset or default_preset
    if name is None:
        raise SystemExit("either --config or --preset is required")
    overrides = {} if args.seed is None else {"seed": args.seed}
    return harness.preset_config(name, **overrides)


def _require_kind(config, kind, command):
    if config.kind != kind:
        raise SystemExit(
            f"'{command}' needs a {kind} configuration, got {config.kind!r} "
            f"(preset {config.preset!r})")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="slodgpe",
        description="Localized-basis Gross-Pitaevskii experiments")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, desc in [
        ("ground-state", "single ground-state solve at the finest mesh"),
        ("convergence", "ground-state sweep over all mesh sizes"),
        ("evolve", "time evolution after a potential quench"),
        ("basis-study", "localisation decay study (ell vs sigma)"),
    ]:
        _add_common(subs.add_parser(name, help=desc))
    args = parser.parse_args(argv)

    if args.threads and args.threads > 0:
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))

    if args.command == "ground-state":
        config = _config_from(args)
        _require_kind(config, "ground_state", args.command)
        config.n_values = (config.n_values[-1],)
        result = harness.run(config, args.out, threads=1,
                             cache_dir=args.cache)
        row = result["table"][0]
        print(f"H={row['H']:.6g}  E={row['E']:.12g}  "
              f"Etilde={row['Etilde']:.12g}  lambda={row['lambda']:.12g}  "
              f"iters={row['iters']}  converged={row['converged']}")
    elif args.command == "convergence":
        config = _config_from(args)
        _require_kind(config, "ground_state", args.command)
        result = harness.run(config, args.out, threads=args.threads,
                             cache_dir=args.cache)
        for row in result["table"]:
            print(f"H={row['H']:.6g}  E={row['E']:.12g}  "
                  f"Etilde={row['Etilde']:.12g}  iters={row['iters']}")
        if result["reference"] is not None:
            print(f"reference energy: {result['reference']:.12g}")
    elif args.command == "evolve":
        config = _config_from(args)
        _require_kind(config, "dynamics", args.command)
        result = harness.run(config, args.out, cache_dir=args.cache)
        m = result["manifest"]
        print(f"mass drift {m['mass_drift']:.3e}, "
              f"energy drift {m['energy_drift']:.3e} over T={config.T}")
    elif args.command == "basis-study":
        config = _config_from(args, default_preset="decay_study")
        _require_kind(config, "decay", args.command)
        result = harness.run(config, args.out, cache_dir=args.cache)
        for ell, sigma in result["rows"]:
            print(f"ell={ell}  sigma_max={sigma:.6e}")
        if result["fit"]:
            print(f"log sigma ~ {result['fit']['slope']:.4f} * ell^2, "
                  f"r^2={result['fit']['r2']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
