import argparse
import logging
import sys
from typing import Optional, Sequence

from pydantic import ValidationError

from .cli import commands
from .core.config import settings
from .core.errors import DosepoolError, ErrorResponse, SchemaError, SpecificationError, TooFewDosesError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_FAILURE = 3


def configure_logging(level: Optional[str] = None) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if settings.log_file:
        handlers.append(logging.FileHandler(settings.log_file))
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def _add_data_arguments(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", help="trial table (CSV, XLSX or JSON)")
    source.add_argument("--builtin", choices=["dupilumab"], help="bundled dataset")
    parser.add_argument("--arm-level", action="store_true", help="require arm-level rows with an se column")
    parser.add_argument("--ref-schedule", help=f"reference schedule label (default {settings.reference_schedule})")
    parser.add_argument("--config", help="TOML file with [prior.<role>] and [sampler] tables")
    parser.add_argument("--tau-prior", help="prior of the ED50 random-effect scale, e.g. half-normal:1")
    parser.add_argument("--tau-emax-prior", help="prior of the Emax random-effect scale, e.g. half-normal:10")


def _add_sampler_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--chains", type=int)
    parser.add_argument("--iter", type=int, help="iterations per chain, warmup included")
    parser.add_argument("--warmup", type=int)
    parser.add_argument("--seed", type=int, help="master seed (random and printed when omitted)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=settings.app_name,
        description="Emax dose-response fitting across administration schedules with complete and partial pooling",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    parser.add_argument("--log-level", help=f"logging level (default {settings.log_level})")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit one model and write summaries")
    _add_data_arguments(fit)
    _add_sampler_arguments(fit)
    fit.add_argument("--model", choices=sorted(commands.MODEL_MODES), default="cp")
    fit.add_argument("--ed50", choices=["shared", "fe", "re"], help="override the ED50 pooling of --model")
    fit.add_argument("--emax", choices=["shared", "fe", "re"], help="override the Emax pooling of --model")
    fit.add_argument("--out", default="out", help="output directory")
    fit.add_argument("--save-draws", action="store_true", help="also write draws.csv")
    fit.add_argument("--mle", action="store_true", help="also write the complete-pooling maximum likelihood fit")
    fit.set_defaults(handler=commands.cmd_fit)

    compare = sub.add_parser("compare", help="rank models by LOO-IC")
    _add_data_arguments(compare)
    _add_sampler_arguments(compare)
    compare.add_argument("--models", default="1,2,3,4,5", help="comma-separated model numbers")
    compare.add_argument("--out", default="out", help="output directory")
    compare.set_defaults(handler=commands.cmd_compare)

    simulate = sub.add_parser("simulate", help="run a simulation study")
    simulate.add_argument("--scenarios", required=True, help="scenario grid (TOML or JSON)")
    simulate.add_argument("--reps", type=int, help="replications per scenario (overrides the file)")
    simulate.add_argument("--workers", type=int, default=1)
    simulate.add_argument("--out", default="study", help="output directory")
    simulate.add_argument("--resume", help="continue the study in this directory")
    _add_sampler_arguments(simulate)
    simulate.set_defaults(handler=commands.cmd_simulate)

    wip = sub.add_parser("wip-table", help="print heterogeneity ranges implied by random-effect scales")
    wip.set_defaults(handler=commands.cmd_wip_table)
    return parser


def _report(error: str, exc: BaseException, exit_code: int) -> int:
    response = ErrorResponse(error=error, detail=str(exc), exit_code=exit_code)
    print(response.model_dump_json(), file=sys.stderr)
    return exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    try:
        return args.handler(args)
    except (SchemaError, SpecificationError, ValidationError, TooFewDosesError) as e:
        logger.error(f"Input error: {e}")
        return _report("Input error", e, EXIT_INPUT_ERROR)
    except DosepoolError as e:
        logger.error(f"Numerical failure: {e}")
        return _report("Numerical failure", e, EXIT_NUMERICAL_FAILURE)
    except ValueError as e:
        logger.error(f"Invalid argument: {e}")
        return _report("Invalid argument", e, EXIT_INPUT_ERROR)


if __name__ == "__main__":
    sys.exit(main())
