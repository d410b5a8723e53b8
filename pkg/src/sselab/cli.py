"""Command line driver.

``sselab gen-db`` writes a synthetic database file; ``sselab run`` executes
a workload against a scheme, self-checking every search against the
plaintext oracle, and writes a CSV report.

Exit codes: 0 ok, 2 correctness mismatch, 3 overflow, 4 bad spec.
"""

from __future__ import annotations

import argparse
import sys

from .errors import BadSpec, CapacityExceeded
from .params import DEFAULT_LOAD_CONST
from .workbench import (EXIT_BADSPEC, EXIT_OVERFLOW, SCHEMES, WorkloadSpec,
                        gen_db, run, save_db)


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n", type=int, default=2**14, help="database size bound N")
    parser.add_argument("--dist", default="single:16",
                        help="uniform:L | zipf:S | single:L | adversarial-script:PATH")
    parser.add_argument("--fill", type=float, default=0.5,
                        help="fraction of N placed at setup")
    parser.add_argument("--cap-longest", action="store_true",
                        help="cap the longest generated list at N/(log2 N)^d")


def build_parser():
    parser = argparse.ArgumentParser(prog="sselab")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-db", help="write a synthetic database file")
    _add_common(gen)
    gen.add_argument("--out", required=True)

    runp = sub.add_parser("run", help="run a workload and report metrics")
    _add_common(runp)
    runp.add_argument("--p", type=int, default=16, help="page size in identifiers")
    runp.add_argument("--scheme", choices=SCHEMES, default="layered")
    runp.add_argument("--ops", type=int, default=1000)
    runp.add_argument("--mix", default="40,40,20", help="search%%,add%%,delete%%")
    runp.add_argument("--alpha", type=int, default=4)
    runp.add_argument("--d", type=int, default=1)
    runp.add_argument("--load-const", type=float, default=DEFAULT_LOAD_CONST)
    runp.add_argument("--delta-mode", choices=("one", "logloglog"), default="logloglog")
    runp.add_argument("--rtt", choices=("two_rtt", "piggyback"), default="two_rtt")
    runp.add_argument("--lambda", dest="lam", type=int, default=128)
    runp.add_argument("--trials", type=int, default=100, help="alloc-stats trials")
    runp.add_argument("--c", dest="oram_c", type=int, default=3, help="level count")
    runp.add_argument("--beta", dest="oram_beta", type=int, default=None,
                      help="block size in words")
    runp.add_argument("--db", dest="db_path", default=None, help="database file")
    runp.add_argument("--out", default="-", help="CSV path, - for stdout")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gen-db":
        spec = WorkloadSpec(seed=args.seed, n_total=args.n, dist=args.dist,
                            fill=args.fill, cap_longest=args.cap_longest)
        try:
            spec.validate()
            db = gen_db(spec)
        except (BadSpec, FileNotFoundError):
            return EXIT_BADSPEC
        except CapacityExceeded:
            return EXIT_OVERFLOW
        save_db(db, args.out)
        return 0

    try:
        mix = tuple(int(x) for x in args.mix.split(","))
    except ValueError:
        return EXIT_BADSPEC
    if len(mix) != 3:
        return EXIT_BADSPEC
    spec = WorkloadSpec(
        seed=args.seed, n_total=args.n, page_size=args.p, scheme=args.scheme,
        dist=args.dist, mix=mix, ops=args.ops, fill=args.fill, alpha=args.alpha,
        d=args.d, load_const=args.load_const, delta_mode=args.delta_mode,
        rtt=args.rtt, lam=args.lam, cap_longest=args.cap_longest,
        trials=args.trials, oram_c=args.oram_c, oram_beta=args.oram_beta,
        db_path=args.db_path,
    )
    if args.out == "-":
        return run(spec, sys.stdout)
    with open(args.out, "w", newline="") as fh:
        return run(spec, fh)


if __name__ == "__main__":
    sys.exit(main())
