import sys

import yaml

from kvpool.core.exceptions import ConfigError
from kvpool.harness import build_simulation_config
from kvpool.pipe.parser import (
    config_error_exit,
    create_parser,
    parse_args,
    settings_from_args,
)


def main(argv=None) -> int:
    parser = create_parser(
        """\
        Check a settings file without running anything and print the resolved
        settings, defaults included.
        """
    )
    args = parse_args(parser, argv)
    try:
        settings = settings_from_args(args)
        config = build_simulation_config(settings)
    except ConfigError as e:
        return config_error_exit(e, parser.prog)

    print(yaml.dump(settings, default_flow_style=False, sort_keys=False), end="")
    kinds = ", ".join(f"{s.instance_id}:{s.kind.value}" for s in config.instances)
    print(f"# valid: design {config.design.value}, instances {kinds}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
