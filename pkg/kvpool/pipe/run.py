import sys

from kvpool.core.exceptions import ConfigError, KVPoolError
from kvpool.harness import build_simulation_config, run_simulation
from kvpool.pipe.parser import (
    config_error_exit,
    create_parser,
    parse_args,
    settings_from_args,
)


def main(argv=None) -> int:
    parser = create_parser(
        """\
        Run one simulation of a serving cluster and write its results.

        The output directory receives requests.csv, transfers.csv, routing.csv,
        summary.csv, the resolved settings.yaml and metadata.yaml. A summary line is
        printed to standard output.
        """
    )
    args = parse_args(parser, argv)
    try:
        settings = settings_from_args(args)
        outdir = settings["output"]["outdir"]
        config = build_simulation_config(settings)
    except ConfigError as e:
        return config_error_exit(e, parser.prog)
    config.settings["output"]["outdir"] = outdir

    try:
        result = run_simulation(config)
    except KVPoolError as e:
        print(f"{parser.prog}: simulation failed: {e}", file=sys.stderr)
        return 1
    result.to_directory(outdir)
    print(f"Results written to {outdir}")
    print(result.summary_line())
    return 0


if __name__ == "__main__":
    sys.exit(main())
