"""Command-line interface.

Subcommands: ``ingest``, ``embed``, ``cluster``, ``series``, ``stats``
(run the pipeline through that stage), ``run`` (full pipeline), ``synth``
(generate a scenario), and ``report`` (print a run directory's report).

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .errors import ConfigError, DataError, NumericError
from .ingest import parse_day
from .pipeline import PRESETS, format_report, load_report, load_run_config, run_pipeline
from .synth import ScenarioSpec, generate

logger = logging.getLogger(__name__)

_UNSET = object()


def _day(text: str) -> int:
    try:
        return parse_day(text)
    except (DataError, ConfigError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", default=None, help="TOML config file (flags override it)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="named parameter bundle")
    p.add_argument("--events", default=_UNSET, help="retweet event CSV/JSONL")
    p.add_argument("--toxicity", default=_UNSET, help="post,score CSV")
    p.add_argument("--terms", default=_UNSET, help="ideological term list (one per line)")
    p.add_argument("--out", dest="out_dir", default=_UNSET, help="run directory (default: run)")
    p.add_argument("--start-day", type=_day, default=_UNSET, metavar="DAY", help="inclusive start (day number or YYYY-MM-DD)")
    p.add_argument("--end-day", type=_day, default=_UNSET, metavar="DAY", help="inclusive end (day number or YYYY-MM-DD)")
    p.add_argument("--tolerance", dest="malformed_tolerance", type=float, default=_UNSET, help="malformed-row tolerance [0, 1]")
    p.add_argument("--min-matches", type=int, default=_UNSET, help="term matches required to retain a user")
    p.add_argument("--windows", dest="window_days", type=int, default=_UNSET, help="window length in days")
    p.add_argument("--kwin", dest="k_window", type=int, default=_UNSET, help="window embedding dimensions")
    p.add_argument("--ksample", dest="k_sample", type=int, default=_UNSET, help="sample-space components")
    p.add_argument("--tau", type=float, default=_UNSET, help="activity-norm threshold for the clustering fit")
    p.add_argument("--aggregation", choices=("sum", "mean"), default=_UNSET, help="user-vector aggregation")
    p.add_argument("--min-cluster-size", type=int, default=_UNSET, help="smallest selectable cluster")
    p.add_argument("--min-samples", type=int, default=_UNSET, help="core-distance neighbor count")
    p.add_argument("--top-hashtags", type=int, default=_UNSET, help="log-odds hashtags kept per cluster")
    p.add_argument("--min-retweets", type=int, default=_UNSET, help="retweet floor for toxicity eligibility")
    p.add_argument("--sigma", dest="smoothing_sigma", type=float, default=_UNSET, help="Gaussian smoothing sigma (days)")
    p.add_argument("--detrend", dest="detrend_window", type=int, default=_UNSET, help="rolling detrend window (observations)")
    p.add_argument("--day-of-week", action="store_const", const=True, default=_UNSET, help="add day-of-week terms to the detrend")
    p.add_argument("--max-lag", type=int, default=_UNSET, help="largest lag scanned")
    clip = p.add_mutually_exclusive_group()
    clip.add_argument("--clip", type=int, default=_UNSET, help="keep only the first N joint observations")
    clip.add_argument("--no-clip", action="store_true", help="scan the full joint record")
    p.add_argument("--alpha", type=float, default=_UNSET, help="family-wise significance level")
    p.add_argument("--seed", type=int, default=_UNSET, help="embedding seed")
    p.add_argument("--svd-tol", type=float, default=_UNSET, help="SVD residual tolerance")
    p.add_argument("--svd-max-iter", type=int, default=_UNSET, help="SVD iteration budget")


def _config_from_args(args: argparse.Namespace):
    overrides = {}
    for key in (
        "events", "toxicity", "terms", "out_dir", "start_day", "end_day",
        "malformed_tolerance", "min_matches", "window_days", "k_window",
        "k_sample", "tau", "aggregation", "min_cluster_size", "min_samples",
        "top_hashtags", "min_retweets", "smoothing_sigma", "detrend_window",
        "day_of_week", "max_lag", "clip", "alpha", "seed", "svd_tol",
        "svd_max_iter",
    ):
        value = getattr(args, key)
        if value is not _UNSET:
            overrides[key] = value
    if args.no_clip:
        overrides["clip"] = None
    return load_run_config(args.config, args.preset, overrides)


def _cmd_stage(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    report = run_pipeline(config, upto=args.upto)
    print(format_report(report.as_dict()))
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = ScenarioSpec.from_toml(args.scenario)
    if args.seed is not None:
        spec.seed = args.seed
    result = generate(spec)
    paths = result.write(args.out)
    print(
        f"scenario {spec.name!r} (seed {spec.seed}): {result.store.n_events} events, "
        f"{len(result.truth.user_names)} users, {len(result.scores)} scored posts"
    )
    for kind in ("events", "toxicity", "terms", "truth"):
        print(f"  {kind}: {paths[kind]}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    print(format_report(load_report(args.run_dir)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polarscope",
        description="Polarization dynamics in retweet event streams.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    stage_help = {
        "ingest": "parse events and apply the user inclusion criterion",
        "embed": "decompose every window (stage caches reused)",
        "cluster": "embed users and cluster their directions",
        "series": "derive per-day dissimilarity and toxicity series",
        "stats": "lagged-dependence statistics over the series",
        "run": "full pipeline (ingest through stats)",
    }
    for name, upto in (
        ("ingest", "ingest"),
        ("embed", "embed"),
        ("cluster", "cluster"),
        ("series", "series"),
        ("stats", "stats"),
        ("run", "stats"),
    ):
        p = sub.add_parser(name, help=stage_help[name])
        _add_pipeline_flags(p)
        p.set_defaults(func=_cmd_stage, upto=upto)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("--scenario", required=True, metavar="FILE", help="scenario TOML")
    p.add_argument("--out", required=True, metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("report", help="print a run directory's report")
    p.add_argument("run_dir", help="run directory containing report.json")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        violations = getattr(exc, "violations", None)
        if violations:
            print("configuration error:", file=sys.stderr)
            for v in violations:
                print(f"  - {v}", file=sys.stderr)
        else:
            print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
