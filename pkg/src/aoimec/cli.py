"""Command-line entry point: ``aoimec run|sweep-n|sweep-budget|selftest``.

Exit codes: 0 ok, 1 a self-test failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import sys

from .baselines import POLICIES
from .config import ConfigError, desk_profile, load_config
from .harness import run_experiment, sweep_budget, sweep_n


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aoimec", description="AoI-aware MEC scheduling experiments")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="key = value config file (default: desk profile)")
        sp.add_argument("--out", metavar="DIR", default="out", help="output directory")
        sp.add_argument("--slots", metavar="T", type=int, help="override the run length")

    r = sub.add_parser("run", help="one seeded run; writes trace.csv and summary.csv")
    common(r)
    r.add_argument("--policy", choices=POLICIES)
    r.add_argument("--seed", metavar="K", type=int)

    for name, helptext, values in (("sweep-n", "number-of-devices sweep", "5 10 15"),
                                   ("sweep-budget", "energy-budget multiplier sweep", "1 1.5 2 3")):
        s = sub.add_parser(name, help=helptext)
        common(s)
        s.add_argument("--values", default=values, help=f"sweep values (default: {values!r})")
        s.add_argument("--policies", default="dpds,lpo,coo", help="comma-separated policies")
        s.add_argument("--seeds", default="1,2,3", help="comma-separated seeds")

    sub.add_parser("selftest", help="run the built-in oracle and gradient checks")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.command == "selftest":
        from .selftest import run_all
        return 0 if run_all() else 1
    try:
        cfg = load_config(args.config) if args.config else desk_profile()
        if args.command == "run":
            m = run_experiment(cfg, args.policy, args.seed, args.out, args.slots)
            s = m.summary
            print(f"{s['policy']} seed={s['seed']} slots={s['slots']} aoi={s['aoi_mean']:.4f} "
                  f"energy={s['energy_mean']:.3e} -> {args.out}")
            return 0
        policies = [x.strip() for x in args.policies.split(",") if x.strip()]
        bad = [x for x in policies if x not in POLICIES]
        if bad:
            raise ConfigError(f"policies: unknown policy {bad[0]!r}")
        seeds = [int(x) for x in args.seeds.split(",") if x.strip()]
        values = _floats(args.values)
        if args.command == "sweep-n":
            rows = sweep_n(cfg, [int(v) for v in values], policies, seeds, args.out, args.slots)
        else:
            rows = sweep_budget(cfg, values, policies, seeds, args.out, args.slots)
        for r in rows:
            print(f"{r['sweep']}={r['value']} {r['policy']}: aoi_median={r['aoi_median']:.4f} "
                  f"energy_median={r['energy_median']:.3e}")
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
