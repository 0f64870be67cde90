"""
Command-line frontend for bitalloc.

Exit codes: 0 success, 1 data error (unreadable model, failed validation,
failed write), 2 usage error (bad flags or configuration).
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Union

from .bitalloc import BitAlloc
from .inference import InferenceError
from .ini import ARCHITECTURES, COMMANDS, ENV_CONFIG, FORMATS, IniError, RunConfig, load_run_config
from .model_io import ModelIOError
from .paths import PathsError
from .quant import QuantError
from .search import SearchError
from .sensitivity import SensitivityError
from .tabular import TabularError
from .utils import UtilsError, parse_number_list, set_log_level, setup_logger


EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_USAGE_ERROR = 2

DATA_ERRORS = (
    QuantError,
    ModelIOError,
    SearchError,
    SensitivityError,
    InferenceError,
    TabularError,
    PathsError,
    UtilsError,
)

logger = logging.getLogger("bitalloc.cli")

DESCRIPTIONS = {
    "quantize": "Quantize a model and write the quantized container",
    "search": "Search per-layer bit-widths for each QEM",
    "sweep": "Search over a QEM sweep, optionally with agreement metrics",
    "ablate": "Layer-type and layer-position sensitivity ablations",
    "correlate": "Quantization error vs. agreement over uniform bit-widths",
    "report": "Per-layer error and storage report of an allocation",
    "runtime": "Search runtime for 1 and 10 QEMs",
    "generate": "Write a seeded synthetic model and its network spec",
}


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", type=Path, help="Model manifest (JSON); a synthetic model when omitted")
    common.add_argument("--bits", help="Candidate bit-widths, e.g. 8,7,6,5,4,3,2")
    common.add_argument("--qem", help="Quantization error multipliers, e.g. 1,2,5")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument("--seed", type=int, help="Seed for synthetic models and batches")
    common.add_argument("--format", choices=FORMATS, help="Report format")
    common.add_argument("--eval", action="store_true", default=None, help="Attach inference agreement metrics")
    common.add_argument("--topk", type=int, help="k of the top-k agreement")
    common.add_argument("--network", type=Path, help="Network spec (JSON) for evaluation")
    common.add_argument("--batch", type=Path, help="Input batch blob (raw f32)")
    common.add_argument("--batch-size", type=int, help="Size of the random batch when --batch is omitted")
    common.add_argument("--allocation", type=Path, help="Allocation JSON for quantize/report")
    common.add_argument("--uniform", type=int, help="Uniform bit-width for quantize/report")
    common.add_argument("--jobs", type=int, help="Worker threads (-1 for all cores)")
    common.add_argument("--progress", action="store_true", default=None, help="Show progress bars")
    common.add_argument("--arch", choices=ARCHITECTURES, help="Synthetic architecture")
    common.add_argument("--layers", type=int, help="Synthetic layer count")
    common.add_argument("--width", type=int, help="Synthetic channel width")
    common.add_argument("--std", type=float, help="Synthetic init std (He when omitted)")
    common.add_argument("--classes", type=int, help="Synthetic classifier width")
    common.add_argument("--config", type=Path, help="INI configuration file")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="Warnings and errors only")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitalloc",
        description="Mixed-precision post-training weight quantization",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    common = _common_parser()
    for command in COMMANDS:
        commands.add_parser(command, parents=[common], help=DESCRIPTIONS[command],
                            description=DESCRIPTIONS[command])
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """RunConfig fields given on the command line."""
    try:
        bits = parse_number_list(args.bits, int) if args.bits is not None else None
        qems = parse_number_list(args.qem, float) if args.qem is not None else None
    except UtilsError as e:
        raise IniError(str(e))
    return {
        "command": args.command,
        "model": args.model,
        "bits": bits,
        "qems": qems,
        "out_dir": args.out,
        "seed": args.seed,
        "output_format": args.format,
        "evaluate": args.eval,
        "topk": args.topk,
        "network": args.network,
        "batch": args.batch,
        "batch_size": args.batch_size,
        "allocation": args.allocation,
        "uniform_bits": args.uniform,
        "num_jobs": args.jobs,
        "progress": args.progress,
        "synthetic_arch": args.arch,
        "synthetic_layers": args.layers,
        "synthetic_width": args.width,
        "synthetic_std": args.std,
        "classes": args.classes,
    }


def _execute(config: RunConfig) -> int:
    try:
        for path in BitAlloc(config).run():
            print(path)
        return EXIT_OK
    except DATA_ERRORS as e:
        logger.error(f"{config.command} failed: {e}")
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_DATA_ERROR


def cmd_quantize(config: RunConfig) -> int:
    return _execute(config)


def cmd_search(config: RunConfig) -> int:
    """Allocation JSON per QEM, summary (architecture, qem, layers_bit_widths, model_qmse) and runtime."""
    return _execute(config)


def cmd_sweep(config: RunConfig) -> int:
    return _execute(config)


def cmd_ablate(config: RunConfig) -> int:
    return _execute(config)


def cmd_correlate(config: RunConfig) -> int:
    return _execute(config)


def cmd_report(config: RunConfig) -> int:
    return _execute(config)


def cmd_runtime(config: RunConfig) -> int:
    return _execute(config)


def cmd_generate(config: RunConfig) -> int:
    return _execute(config)


COMMAND_HANDLERS: Dict[str, Callable[[RunConfig], int]] = {
    "quantize": cmd_quantize,
    "search": cmd_search,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "correlate": cmd_correlate,
    "report": cmd_report,
    "runtime": cmd_runtime,
    "generate": cmd_generate,
}


def main(
    argv: Optional[Sequence[str]] = None,
    default_config: Optional[Union[str, Path]] = None,
) -> int:
    """Parse arguments, assemble the configuration and run the command.

    Args:
        argv: Arguments without the program name, sys.argv[1:] by default
        default_config: INI file used when neither --config nor
            BITALLOC_CONFIG is given

    Returns:
        Exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE_ERROR

    setup_logger("bitalloc.cli")
    if args.verbose:
        set_log_level(logging.DEBUG)
    elif args.quiet:
        set_log_level(logging.WARNING)
    else:
        set_log_level(logging.INFO)

    config_path = args.config or os.environ.get(ENV_CONFIG) or default_config
    try:
        config = load_run_config(_overrides(args), config_path)
    except IniError as e:
        logger.error(f"Invalid configuration: {e}")
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_USAGE_ERROR

    return COMMAND_HANDLERS[config.command](config)
