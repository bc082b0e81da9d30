import argparse
import asyncio
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import pydantic

from adaptivity import AdaptiveTrace
from assembly import assemble, dump_system
from bench import emit_report, make_problem, run_case
from config import GEOMETRIES, CaseConfig, get_settings, load_case_config, parse_case_config
from errors import EXIT_CODES, ErrorType, WeaksymError
from mesh import builtin_geometry, save_mesh

logger = logging.getLogger(__name__)


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    # matplotlib is chatty at DEBUG
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weaksym", description="Adaptive weakly symmetric mixed FEM for 2D elasticity")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one or more benchmark cases")
    run.add_argument("--case", action="append", default=[], help="TOML or JSON case file (repeatable)")
    run.add_argument("--jobs", type=int, default=1, help="cases run concurrently")
    run.add_argument("--name")
    run.add_argument("--geometry", choices=GEOMETRIES)
    run.add_argument("--resolution", type=int)
    run.add_argument("--family", type=str.upper, choices=("AFW", "RAFW", "SGG"))
    run.add_argument("--k", type=int)
    run.add_argument("--E", type=float)
    run.add_argument("--nu", type=float)
    run.add_argument("--mode", choices=("plane_strain", "plane_stress"))
    run.add_argument("--estimator", choices=("eta", "eta_inc"))
    run.add_argument("--marking-fraction", type=float)
    run.add_argument("--max-dofs", type=int)
    run.add_argument("--max-iters", type=int)
    run.add_argument("--uniform", action="store_true", default=None)
    run.add_argument("--record-timings", action="store_true", default=None)
    run.add_argument("--out")
    run.add_argument("--dump-system", help="write the initial system matrix as 'i j value' lines and exit")

    mesh = sub.add_parser("mesh", help="write a built-in mesh in msh2d format")
    mesh.add_argument("--geometry", choices=GEOMETRIES, required=True)
    mesh.add_argument("--resolution", type=int, default=1)
    mesh.add_argument("--dump", required=True)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    keys = ("name", "geometry", "resolution", "family", "k", "E", "nu", "mode", "estimator",
            "marking_fraction", "max_dofs", "max_iters", "uniform", "record_timings")
    out = {key: getattr(args, key) for key in keys}
    out["out_dir"] = args.out
    return out


def collect_cases(args: argparse.Namespace) -> List[CaseConfig]:
    overrides = _overrides(args)
    if args.case:
        return [load_case_config(path, overrides) for path in args.case]
    return [parse_case_config("{}", overrides=overrides)]


async def run_cases(cases: List[CaseConfig], jobs: int) -> List[AdaptiveTrace]:
    """Cases share nothing mutable, so each runs in its own worker process."""
    if jobs <= 1 or len(cases) == 1:
        return [run_case(cfg) for cfg in cases]
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        tasks = [loop.run_in_executor(pool, run_case, cfg) for cfg in cases]
        return list(await asyncio.gather(*tasks))


def command_run(args: argparse.Namespace) -> None:
    cases = collect_cases(args)
    if args.dump_system:
        cfg = cases[0]
        problem = make_problem(cfg)
        system = assemble(problem.mesh, problem.material, cfg.family_config, problem.body_load, problem.tractions)
        dump_system(system, args.dump_system)
        logger.info(f"System of size {system.matrix.shape[0]} written to {args.dump_system}")
        return
    traces = asyncio.run(run_cases(cases, args.jobs))
    out_dir = Path(args.out or cases[0].out_dir)
    summary = emit_report(traces, out_dir)
    print(summary.to_string(index=False))


def command_mesh(args: argparse.Namespace) -> None:
    mesh = builtin_geometry(args.geometry, args.resolution)
    save_mesh(mesh, args.dump)
    logger.info(f"{args.geometry} mesh with {mesh.n_triangles} triangles written to {args.dump}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(get_settings().log_level)
    try:
        if args.command == "mesh":
            command_mesh(args)
        else:
            command_run(args)
        return 0
    except pydantic.ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CODES[ErrorType.VALIDATION]
    except WeaksymError as e:
        logger.error(f"{e.error_type.value}: {e}", exc_info=True)
        return e.exit_code
    except Exception as e:
        logger.error(f"Error in main execution: {str(e)}", exc_info=True)
        return EXIT_CODES[ErrorType.SOLVER]


if __name__ == "__main__":
    sys.exit(main())
