import argparse
import sys
import textwrap

from kvpool.core.exceptions import ConfigError
from kvpool.core.settings import resolve_settings
from kvpool.core.utils.logging_utils import setup_logger


def create_parser(description: str, settings_file: bool = True) -> argparse.ArgumentParser:
    """
    Argument parser with the options shared by the kvpool scripts.

    Parameters
    ----------
    description: str
        Shown by --help.
    settings_file: bool
        Add the optional positional settings file and the --set, --seed and
        --outdir options.
    """
    parser = argparse.ArgumentParser(
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=textwrap.dedent(description),
        allow_abbrev=False,
    )
    if settings_file:
        parser.add_argument(
            "settings_file",
            type=str,
            nargs="?",
            default=None,
            help="YAML settings file. Everything it leaves out takes its default value.",
        )
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override a setting by its dotted path, e.g. "
            "--set workload.request_rate=2.0. May be given several times.",
        )
        parser.add_argument("--seed", type=int, default=None, help="Random seed.")
        parser.add_argument(
            "--outdir",
            type=str,
            default=None,
            help="Output directory. Defaults to output.outdir, or $KVPOOL_OUTDIR if set.",
        )
    parser.add_argument("-v", "--verbose", action="store_true", help="Verbose output")
    return parser


def parse_args(parser: argparse.ArgumentParser, argv=None) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.verbose:
        setup_logger(log_level="DEBUG")
    return args


def settings_from_args(args: argparse.Namespace) -> dict:
    return resolve_settings(
        args.settings_file, args.overrides, seed=args.seed, outdir=args.outdir
    )


def config_error_exit(error: ConfigError, prog: str) -> int:
    print(f"{prog}: error: {error}", file=sys.stderr)
    return 2
