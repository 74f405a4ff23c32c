"""Command line front end.

Exit codes: 0 success, 2 config error, 3 insufficient pools, 4 numerical
failure, 5 missing dependency (or unreadable artifact file).
"""

from __future__ import annotations

import argparse
import sys

from . import activations, pipeline, selection, similarity
from .errors import ConfigError, TransferRiskError

HINTS = {
    2: "check the configuration file and command line flags",
    3: "add surrogates or adjust --r1/--r2 so both pools are populated",
    4: "inspect the named stage's inputs; a model may have diverged or produced constant activations",
    5: "run the earlier pipeline stages (or 'run') so the expected files exist",
}


def _common(p):
    p.add_argument("--config", help="flat key = value config file (default: bundled example)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--r1", type=float, help="lower similarity bound of the high-similarity pool M1")
    p.add_argument("--r2", type=float, help="upper similarity bound of the low-similarity pool M2")
    p.add_argument("--min-total", type=int, help="minimum |M1| + |M2|")
    p.add_argument("--attack", help="restrict to one attack kind (fgsm or pgd)")
    p.add_argument("--eps", type=float, help="override the L-inf budget of every attack")


def build_parser():
    parser = argparse.ArgumentParser(prog="transferrisk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("run", help="run every stage in order"))
    for stage in pipeline.STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _common(p)
        if stage == "similarity":
            p.add_argument("amat", nargs="*", help="two AMAT files to compare directly")
            p.add_argument("--kernel", default="linear", choices=("linear", "rbf"))
            p.add_argument("--estimator", default="biased", choices=("biased", "unbiased"))
        if stage == "select":
            p.add_argument("csv", nargs="?", help="similarity CSV to partition directly")
            p.add_argument("--target", help="target model id (default: model_a of the first row)")
    return parser


def _config(args):
    overrides = {"seed": args.seed, "out": args.out, "policy.r1": args.r1, "policy.r2": args.r2,
                 "policy.min_total": args.min_total, "attack.kind": args.attack, "eps": args.eps}
    return pipeline.load_config(args.config, **overrides)


def _direct_similarity(args):
    if len(args.amat) != 2:
        raise ConfigError("similarity takes exactly two AMAT files")
    a, b = (activations.load_amat(p) for p in args.amat)
    rec = similarity.cka(a, b, args.kernel, args.estimator)
    sys.stdout.write(similarity.write_records_csv([rec]))


def _direct_select(args):
    records = similarity.read_records_csv(args.csv)
    if not records:
        raise ConfigError(f"{args.csv} holds no records")
    kw = {k: v for k, v in (("r1", args.r1), ("r2", args.r2), ("min_total", args.min_total)) if v is not None}
    policy = selection.ThresholdPolicy(**{"method": records[0].method, **kw}) if "r1" in kw and "r2" in kw \
        else selection.ThresholdPolicy.for_method(records[0].method, **kw)
    pools = selection.select_pools(records, policy, args.target)
    sys.stdout.write(selection.pools_to_csv(pools))
    sys.stderr.write(selection.pools_report(pools))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.command
    try:
        if stage == "similarity" and args.amat:
            _direct_similarity(args)
            return 0
        if stage == "select" and args.csv:
            _direct_select(args)
            return 0
        cfg = _config(args)
        if stage == "run":
            report = pipeline.run_pipeline(cfg)
            print(f"wrote {cfg.path('report.json')}; headline risk (worst case) = "
                  f"{report.aggregates['worst_case']:.4f}")
        else:
            pipeline.run_stage(cfg, stage)
            print(f"{stage}: done ({cfg.out})")
        return 0
    except pipeline.StageFailure as exc:
        return _fail(exc.stage, exc.error)
    except TransferRiskError as exc:
        return _fail(stage, exc)


def _fail(stage, error):
    code = error.exit_code
    print(f"error in {stage}: {error}", file=sys.stderr)
    print(f"hint: {HINTS.get(code, '')}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
