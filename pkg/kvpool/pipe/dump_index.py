import sys

from kvpool.core.exceptions import ConfigError
from kvpool.harness import Simulator, build_simulation_config
from kvpool.pipe.parser import (
    config_error_exit,
    create_parser,
    parse_args,
    settings_from_args,
)


def dump_indices(simulator: Simulator) -> str:
    """Render the radix index of every instance's memory pool."""
    lines = []
    for instance_id, pool in sorted(simulator.pools.items()):
        status = simulator.cluster.status(instance_id).value
        lines.append(f"== {instance_id} ({status}) {pool}")
        lines.extend(pool.dump())
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = create_parser(
        """\
        Run a simulation and print the prefix index of every instance at the end of
        the run, one node per line. Meant for comparing against golden files.
        """
    )
    args = parse_args(parser, argv)
    try:
        config = build_simulation_config(settings_from_args(args))
    except ConfigError as e:
        return config_error_exit(e, parser.prog)

    simulator = Simulator(config)
    simulator.run()
    print(dump_indices(simulator), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
