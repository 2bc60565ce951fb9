"""``vbmstat`` command line: run, predict, stratify, phantom, validate-fwe, eigenvariate.

Settings come from an optional JSON config (``--config``) with command-line
flags taking precedence. Exit codes: 0 success, 2 configuration error,
3 data error, 4 numerical failure.
"""

import argparse
import json
import logging
import sys

from . import pipeline
from .errors import ConfigError
from .pipeline import PipelineConfig


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override its values)")
    p.add_argument("-o", "--output-dir", dest="output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", dest="n_jobs", type=int, help="worker threads (results do not depend on this)")
    p.add_argument("-v", "--verbose", action="store_true")


def _inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="CSV with subject_id,path columns")
    p.add_argument("--cohort", help="cohort CSV")
    p.add_argument("--phantom", help="phantom settings as a JSON object or a path to one")
    p.add_argument("--mask-rule", dest="mask_rule", choices=["intersection", "threshold", "explicit"])
    p.add_argument("--mask", dest="mask_path")
    p.add_argument("--mask-threshold", dest="mask_threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbmstat", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="voxelwise GLM, cluster inference, eigenvariates, group statistics")
    _common(p)
    _inputs(p)
    p.add_argument("--contrast", dest="contrasts", action="append", help="e.g. CN>AD or cn-gt-ad (repeatable)")
    p.add_argument("--voxel-p", dest="voxel_p", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--connectivity", type=int, choices=[6, 18, 26])
    p.add_argument("--atlas")
    p.add_argument("--atlas-names", dest="atlas_names")
    p.add_argument("--no-maps", dest="write_maps", action="store_false", default=None)
    p.add_argument("--eigenvariate-contrast", dest="eigenvariate_contrast")
    p.add_argument("--variance-rule", dest="variance_rule", choices=["pooled", "welch"])

    p = sub.add_parser("predict", help="cross-validated MCI conversion prediction")
    _common(p)
    p.add_argument("--cohort")
    p.add_argument("--features", dest="feature_sets", action="append", choices=["clinical", "eigenvariate", "combined"])
    p.add_argument("--folds", type=int)
    p.add_argument("--threshold", dest="decision_threshold", type=float)
    p.add_argument("--l2", type=float)

    p = sub.add_parser("stratify", help="APOE4-stratified comparisons and two-way ANOVA")
    _common(p)
    p.add_argument("--cohort")
    p.add_argument("--variance-rule", dest="variance_rule", choices=["pooled", "welch"])
    p.add_argument("--ss-type", dest="ss_type", type=int, choices=[1, 2, 3])

    p = sub.add_parser("phantom", help="write a synthetic cohort to disk")
    _common(p)
    p.add_argument("--phantom", help="phantom settings as a JSON object or a path to one")
    p.add_argument("--mask-threshold", dest="mask_threshold", type=float)

    p = sub.add_parser("eigenvariate", help="adjusted eigenvariate of an ROI mask")
    _common(p)
    _inputs(p)
    p.add_argument("--roi", help="NIfTI ROI mask")

    p = sub.add_parser("validate-fwe", help="Monte Carlo FWE calibration on null phantoms")
    _common(p)
    p.add_argument("--n-sim", dest="n_sim", type=int)
    p.add_argument("--voxel-p", dest="voxel_p", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--connectivity", type=int, choices=[6, 18, 26])
    return parser


def _parse_phantom(value):
    if value is None:
        return None
    text = value.strip()
    if not text.startswith("{"):
        try:
            with open(text) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read phantom settings {value}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"phantom settings are not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("phantom settings must be a JSON object")
    return d


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    base = PipelineConfig.from_json(args.config) if args.config else PipelineConfig()
    over = {k: v for k, v in vars(args).items() if k not in ("config", "command", "verbose")}
    if "phantom" in over:
        over["phantom"] = _parse_phantom(over["phantom"])
    return base.override(**over)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = config_from_args(args)
    except ConfigError as exc:
        print(pipeline.StageError("config", exc).to_json(), file=sys.stderr)
        return exc.exit_code

    def report(result):
        if args.command in ("phantom", "eigenvariate", "validate-fwe"):
            print(json.dumps(result, sort_keys=True))
        else:
            print(f"{args.command}: outputs written to {config.output_dir}")

    return pipeline.run_guarded(pipeline.COMMANDS[args.command], config, report=report)


if __name__ == "__main__":
    sys.exit(main())
