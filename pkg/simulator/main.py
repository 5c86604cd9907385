"""
Hydrofracture Simulator - command line entry point
Runs a single scenario or one of the thickness / temperature sweeps
"""

import argparse
import logging
import os
import sys
import traceback
from datetime import datetime
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

load_dotenv()

from constitutive import ConvergenceError, MaterialError  # noqa: E402
from geometry_mesh import MeshError  # noqa: E402
from global_solver import PropagationError  # noqa: E402
from output_writer import OutputError  # noqa: E402
from scenario_runner import (  # noqa: E402
    REFERENCE_CONFIG,
    ConfigError,
    ScenarioConfig,
    apply_overrides,
    load_config,
    run_scenario,
)
from sweeps import temperature_sweep, thickness_sweep  # noqa: E402

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hydrofrac",
        description="Hydraulic fracture of a glacier through a water-filled crevasse",
    )
    parser.add_argument("--config", type=Path, help="scenario file with key = value lines")
    parser.add_argument("--rheology", choices=["elastic", "viscoelastic"])
    parser.add_argument("--thickness", type=float, metavar="M", help="ice thickness in metres")
    temperature = parser.add_mutually_exclusive_group()
    temperature.add_argument("--temperature", type=float, metavar="C", help="constant ice temperature in degC")
    temperature.add_argument("--temperature-profile", type=Path, metavar="PATH",
                             help="two-column depth / temperature table")
    parser.add_argument("--dt", type=float, metavar="S", help="time step in seconds")
    parser.add_argument("--duration", type=float, metavar="S", help="simulated time after initialisation")
    parser.add_argument("--out", type=Path, metavar="DIR", help="output directory")
    parser.add_argument("--snapshot-stride", type=int, metavar="N", help="VTK snapshot every N increments")
    parser.add_argument("--mesh-dump", action="store_true", default=None, help="write node and element tables")
    parser.add_argument("--sweep", choices=["thickness", "temperature"], help="run a parameter sweep instead")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers for sweeps")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    return parser


def configure_logging(verbose: bool) -> None:
    level = "DEBUG" if verbose else os.getenv("HYDROFRAC_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def resolve_config(args: argparse.Namespace) -> ScenarioConfig:
    if args.config:
        config = load_config(args.config)
    elif args.sweep:
        config = load_config(REFERENCE_CONFIG)
    else:
        config = ScenarioConfig()
    out = args.out
    if out is None and os.getenv("HYDROFRAC_OUT_DIR"):
        out = Path(os.environ["HYDROFRAC_OUT_DIR"])
    return apply_overrides(
        config,
        rheology=args.rheology, ice_thickness=args.thickness, temperature=args.temperature,
        temperature_profile=args.temperature_profile, dt=args.dt, duration=args.duration,
        output_dir=out, snapshot_stride=args.snapshot_stride, mesh_dump=args.mesh_dump,
    )


def _log_failure(out_dir: Path, message: str) -> None:
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(out_dir / "error_log.txt", "a") as f:
            f.write(f"\n{'=' * 50}\n")
            f.write(f"Time: {datetime.now()}\n")
            f.write(f"Error: {message}\n")
            f.write(f"Traceback:\n{traceback.format_exc()}\n")
    except OSError:
        pass


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    try:
        config = resolve_config(args)
    except (ConfigError, ValidationError) as e:
        logger.error(f"❌ Configuration error: {e}")
        return EXIT_CONFIG

    try:
        if args.sweep == "thickness":
            thickness_sweep(config, n_jobs=args.jobs)
        elif args.sweep == "temperature":
            temperature_sweep(config, n_jobs=args.jobs)
        else:
            run_scenario(config)
    except (ConfigError, MeshError, MaterialError, ValidationError) as e:
        logger.error(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except (ConvergenceError, PropagationError) as e:
        logger.error(f"❌ Solver failure: {e}")
        _log_failure(config.output_dir, str(e))
        return EXIT_SOLVER
    except OutputError as e:
        logger.error(f"❌ Could not write results: {e}")
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
