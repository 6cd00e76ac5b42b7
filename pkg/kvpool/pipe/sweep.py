"""
Parameter sweeps: the cross product of a few settings axes, one simulation per
point, collected into a combined table.

An experiment file looks like::

    base_settings: settings/chat_1p1d.yaml
    outdir: sweep_output
    num_processes: 4
    axes:
      cluster.setting: [PD, PD-CC, 1P1D, 1P1D-CC]
      workload.request_rate: [0.5, 1.0, 2.0]

Points are enumerated in declaration order, the last axis varying fastest. Each
point is written to ``outdir/point_NNN`` and gets one row in
``outdir/combined.csv``.
"""

import copy
import itertools
import sys
from dataclasses import dataclass, field
from functools import partial
from os.path import dirname, isabs, join
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from kvpool.core.exceptions import ConfigError
from kvpool.core.multiprocessing import apply_func_with_multiprocessing
from kvpool.core.settings import load_settings_file, resolve_settings
from kvpool.core.utils.logging_utils import check_directory_exists_and_if_not_mkdir, logger
from kvpool.core.utils.misc import set_nested
from kvpool.harness import build_simulation_config, run_simulation
from kvpool.pipe.parser import config_error_exit, create_parser, parse_args


@dataclass
class ExperimentSpec:
    base_settings: dict
    axes: List[Tuple[str, List[Any]]] = field(default_factory=list)
    outdir: str = "sweep_output"
    num_processes: int = 1

    @property
    def axis_names(self) -> List[str]:
        return [name for name, _ in self.axes]


def build_experiment_spec(experiment: dict, base_dir: str = ".") -> ExperimentSpec:
    """
    Parameters
    ----------
    experiment: dict
        Parsed experiment file.
    base_dir: str
        Relative base_settings paths are resolved against this directory.
    """
    unknown = sorted(set(experiment) - {"base_settings", "axes", "outdir", "num_processes"})
    if unknown:
        raise ConfigError(f"unknown field(s) {', '.join(unknown)}", path="experiment")
    base = experiment.get("base_settings")
    if isinstance(base, str) and not isabs(base):
        base = join(base_dir, base)
    axes = experiment.get("axes") or {}
    if not isinstance(axes, dict):
        raise ConfigError("must map dotted setting paths to lists of values", path="axes")
    parsed = []
    for name, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError("must be a non-empty list", path=f"axes.{name}")
        parsed.append((str(name), values))
    num_processes = experiment.get("num_processes", 1)
    if not isinstance(num_processes, int) or num_processes < 1:
        raise ConfigError(f"must be a positive integer, got {num_processes!r}", path="num_processes")
    return ExperimentSpec(
        base_settings=resolve_settings(base),
        axes=parsed,
        outdir=experiment.get("outdir") or "sweep_output",
        num_processes=num_processes,
    )


def sweep_points(spec: ExperimentSpec) -> pd.DataFrame:
    """One row per sweep point: its index and the value of every axis."""
    rows = []
    for i, values in enumerate(itertools.product(*[v for _, v in spec.axes])):
        rows.append({"point": i, **dict(zip(spec.axis_names, values))})
    # object dtype keeps the YAML scalar types of the axis values
    return pd.DataFrame(rows, columns=["point"] + spec.axis_names, dtype=object)


def run_point(point: Dict[str, Any], base_settings: dict, outdir: str) -> Dict[str, Any]:
    """Run one sweep point. Errors are caught and reported in the returned row."""
    point = dict(point)
    index = int(point.pop("point"))
    point_dir = join(outdir, f"point_{index:03d}")
    row = {"point": index, **point, "status": "ok", "error": ""}
    settings = copy.deepcopy(base_settings)
    try:
        for key, value in point.items():
            set_nested(settings, key, value)
        config = build_simulation_config(settings)
        config.settings["output"]["outdir"] = point_dir
        result = run_simulation(config)
        result.to_directory(point_dir)
        row.update(result.report.summary)
    except Exception as e:
        logger.warning(f"sweep point {index} failed: {type(e).__name__}: {e}")
        row.update(status="failed", error=f"{type(e).__name__}: {e}")
    return row


def run_sweep(spec: ExperimentSpec, progress: bool = False) -> pd.DataFrame:
    """
    Run every point of spec and write the combined table.

    Returns
    -------
    pd.DataFrame
        One row per point, in enumeration order: point index, axis values, status,
        error message and the summary metrics of the point.
    """
    check_directory_exists_and_if_not_mkdir(spec.outdir, logger)
    points = sweep_points(spec)
    rows = apply_func_with_multiprocessing(
        partial(run_point, base_settings=spec.base_settings, outdir=spec.outdir),
        points,
        num_processes=spec.num_processes,
        progress=progress,
    )
    combined = pd.DataFrame(rows).sort_values("point", kind="stable").reset_index(drop=True)
    combined.to_csv(join(spec.outdir, "combined.csv"), index=False, lineterminator="\n")
    return combined


def main(argv=None) -> int:
    parser = create_parser(
        """\
        Run a parameter sweep described by an experiment file (see the module
        documentation of kvpool.pipe.sweep) and collect all points into
        combined.csv.
        """,
        settings_file=False,
    )
    parser.add_argument("experiment_file", type=str, help="YAML experiment file")
    parser.add_argument(
        "--num_processes", type=int, default=None, help="Overrides num_processes of the file."
    )
    parser.add_argument("--outdir", type=str, default=None, help="Overrides outdir of the file.")
    args = parse_args(parser, argv)
    try:
        experiment = load_settings_file(args.experiment_file)
        spec = build_experiment_spec(experiment, dirname(args.experiment_file) or ".")
    except ConfigError as e:
        return config_error_exit(e, parser.prog)
    if args.num_processes is not None:
        spec.num_processes = args.num_processes
    if args.outdir is not None:
        spec.outdir = args.outdir

    n_points = len(sweep_points(spec))
    print(f"Running {n_points} sweep point(s) with {spec.num_processes} process(es).")
    combined = run_sweep(spec, progress=True)
    failed = combined[combined["status"] != "ok"]
    print(f"Combined table written to {join(spec.outdir, 'combined.csv')}")
    if len(failed):
        for _, row in failed.iterrows():
            print(f"point {int(row['point'])} failed: {row['error']}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
