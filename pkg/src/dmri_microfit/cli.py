"""Command line entry point: ``dmri-microfit <stage> --config FILE``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import dti, estimator, nnls, noddi, pipeline, sampling, tissue
from .volume_io import GradientTableError, NiftiError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_DEPENDENCY = 2
EXIT_NUMERICAL = 3

_VALIDATION_ERRORS = (pipeline.ConfigError, NiftiError, GradientTableError, sampling.SamplingError,
                      sampling.DegenerateDirectionsError, tissue.SegmentationError, estimator.EstimatorError)
_NUMERICAL_ERRORS = (estimator.TrainingDivergedError, nnls.NNLSError, dti.RankDeficientError,
                     noddi.ZeroWeightError, FloatingPointError, np.linalg.LinAlgError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmri-microfit", description=__doc__)
    p.add_argument("stage", choices=list(pipeline.STAGES) + ["all"])
    p.add_argument("--config", default=None,
                   help="YAML config (default: bundled 16^3 phantom experiment)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for voxel-wise fitting")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides config output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise pipeline.ConfigError("--workers", "must be >= 1")
        cfg = pipeline.load_config(args.config or pipeline.bundled_config_path(), {"seed": args.seed})
        results = pipeline.run(cfg, args.stage, args.out, args.workers)
    except pipeline.DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except _VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for r in results:
        print(f"{r.stage}: {'up to date' if r.skipped else 'done'}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
