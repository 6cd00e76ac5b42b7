"""
Loading, merging and validating simulation settings.

Settings are nested dicts, read from YAML. User settings are merged onto
DEFAULT_SETTINGS, so a settings file only needs to mention what it changes. The
typed configuration objects are built from the merged dict by the ``build_*``
functions of the respective subpackages; this module only handles the dict level
and the cluster roster, which every subpackage needs.
"""

import copy
import os
import re
from os.path import join
from typing import Iterable, List, Optional, Union

import yaml

from kvpool.core.exceptions import ConfigError
from kvpool.core.types import (
    CachingDesign,
    InstanceKind,
    InstanceSpec,
    ParallelismConfig,
    parse_enum,
)
from kvpool.core.utils.misc import parse_overrides, recursive_update

OUTDIR_ENV_VAR = "KVPOOL_OUTDIR"

DEFAULT_SETTINGS = {
    "seed": 0,
    "model": {
        "num_layers": 40,
        "hidden_size": 5120,
        "kv_bytes_per_token_per_layer": None,
        "context_window": 4096,
    },
    "block": {"block_size": 16, "layout": "Discrete"},
    "cluster": {
        "setting": "1P1D",
        "instances": None,
        "hbm_capacity_blocks": 4096,
        "dram_capacity_blocks": 0,
        "tp_degree": 1,
        "pp_degree": 1,
        "heartbeat_interval": 1.0,
        "failure_timeout": 3.0,
        "failures": [],
        "membership": [],
    },
    "engine": {
        "design": None,
        "timing": {
            "alpha_p": 3.0e-5,
            "gamma_p": 5.0e-9,
            "alpha_d": 0.02,
            "delta_d": 2.0e-4,
            "swap_cost_per_block": 4.4e-4,
            "dram_fetch_overhead": 4.0e-3,
        },
        "max_batch_tokens": 4096,
        "max_batch_size": 4,
        "max_decode_batch": 64,
        "schedule_tick": 0.01,
        "cost_model": True,
    },
    "transfer": {"mode": "ByRequest"},
    "network": {
        "per_call_overhead": 5.0e-6,
        "hbm_bandwidth": 5.0e10,
        "dram_bandwidth": 1.0e10,
        "control_rtt": 5.0e-5,
        "communicators_per_pair": 1,
    },
    "mempool": {"eviction": True, "swap": True},
    "scheduler": {
        "policy": "LeastLoad",
        "ttl": 300.0,
        "balance_abs_threshold": None,
    },
    "workload": {
        "kind": "chat",
        "trace_file": None,
        "num_sessions": 16,
        "request_rate": 1.0,
        "share_ratio": 1,
        "think_time_mean": 0.0,
        "vocab_size": 32000,
        "params": {},
    },
    "output": {"outdir": "kvpool_output"},
}

_SETTING_PATTERN = re.compile(r"^(?:(?P<n_cc>\d+)?PD|(?P<n_p>\d+)P(?P<n_d>\d+)D)(?P<cc>-CC)?$")


def load_settings_file(file_name: str) -> dict:
    """Read a YAML settings file. Syntax errors become ConfigError with the line."""
    try:
        with open(file_name, "r") as f:
            settings = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"could not read settings: {e.strerror}", file_name=file_name)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(f"invalid YAML: {problem}", file_name=file_name, line=line)
    if settings is None:
        settings = {}
    if not isinstance(settings, dict):
        raise ConfigError("top level must be a mapping", file_name=file_name)
    return settings


def resolve_settings(
    settings: Union[str, dict, None] = None,
    overrides: Optional[Iterable[str]] = None,
    seed: Optional[int] = None,
    outdir: Optional[str] = None,
) -> dict:
    """
    Merge user settings onto the defaults and apply command-line overrides.

    Parameters
    ----------
    settings: str or dict
        Path to a YAML settings file, or an already loaded dict.
    overrides: list of str
        ``dotted.key=value`` strings, applied after the file.
    seed: int
        Replaces the ``seed`` entry if given.
    outdir: str
        Replaces ``output.outdir``. Otherwise the KVPOOL_OUTDIR environment variable
        is used if set.

    Returns
    -------
    dict with every section present.
    """
    if isinstance(settings, str):
        user = load_settings_file(settings)
    else:
        user = copy.deepcopy(settings) if settings else {}
    unknown = sorted(set(user) - set(DEFAULT_SETTINGS))
    if unknown:
        raise ConfigError(f"unknown settings section(s): {', '.join(unknown)}")
    resolved = recursive_update(DEFAULT_SETTINGS, user)
    resolved = recursive_update(resolved, parse_overrides(overrides))
    if seed is not None:
        resolved["seed"] = seed
    if outdir is not None:
        resolved["output"]["outdir"] = outdir
    elif os.environ.get(OUTDIR_ENV_VAR):
        resolved["output"]["outdir"] = os.environ[OUTDIR_ENV_VAR]
    return resolved


def save_settings(settings: dict, outdir: str, file_name: str = "settings.yaml"):
    with open(join(outdir, file_name), "w") as f:
        yaml.dump(settings, f, default_flow_style=False, sort_keys=False)


def parse_setting_name(name: str):
    """
    Parse a cluster preset name.

    ``PD`` / ``PD-CC`` / ``3PD-CC`` are PD-colocated clusters (two instances unless a
    count is given). ``1P1D`` / ``2P1D-CC`` are disaggregated clusters.

    Returns
    -------
    (n_colocated, n_prefill, n_decode, caching)
    """
    m = _SETTING_PATTERN.match(str(name))
    if m is None:
        raise ConfigError(
            f"unknown setting {name!r}; expected PD, <n>PD, <n>P<m>D, optionally with -CC",
            path="cluster.setting",
        )
    caching = m.group("cc") is not None
    if m.group("n_p") is not None:
        n_p, n_d = int(m.group("n_p")), int(m.group("n_d"))
        if n_p < 1 or n_d < 1:
            raise ConfigError(
                f"{name!r} needs at least one prefill and one decode instance",
                path="cluster.setting",
            )
        return 0, n_p, n_d, caching
    n_cc = int(m.group("n_cc")) if m.group("n_cc") else 2
    if n_cc < 1:
        raise ConfigError(f"{name!r} needs at least one instance", path="cluster.setting")
    return n_cc, 0, 0, caching


def build_design(settings: dict) -> CachingDesign:
    """The caching design level. An explicit engine.design wins over the preset."""
    explicit = settings["engine"].get("design")
    if explicit is not None:
        return parse_enum(CachingDesign, explicit, "engine.design")
    setting = settings["cluster"].get("setting")
    if setting is not None and settings["cluster"].get("instances") is None:
        _, _, _, caching = parse_setting_name(setting)
        return CachingDesign.PDCaching3 if caching else CachingDesign.PDBasic
    return CachingDesign.PDBasic


def build_instance_specs(settings: dict) -> List[InstanceSpec]:
    """
    Build the instance roster, either from ``cluster.instances`` or from the
    ``cluster.setting`` preset.

    Mixed rosters of colocated and disaggregated instances are rejected, as are
    disaggregated rosters without a prefill or without a decode instance.
    """
    cluster = settings["cluster"]
    design = build_design(settings)
    defaults = {
        "hbm_capacity_blocks": cluster["hbm_capacity_blocks"],
        "dram_capacity_blocks": cluster["dram_capacity_blocks"],
        "tp_degree": cluster["tp_degree"],
        "pp_degree": cluster["pp_degree"],
    }

    entries = []
    if cluster.get("instances") is not None:
        if not isinstance(cluster["instances"], list) or not cluster["instances"]:
            raise ConfigError("must be a non-empty list", path="cluster.instances")
        for i, entry in enumerate(cluster["instances"]):
            if not isinstance(entry, dict):
                raise ConfigError("must be a mapping", path=f"cluster.instances[{i}]")
            entries.append((f"cluster.instances[{i}]", entry))
    else:
        n_cc, n_p, n_d, caching = parse_setting_name(cluster["setting"])
        for i in range(n_cc):
            entries.append(
                (
                    "cluster.setting",
                    {"instance_id": f"i{i}", "kind": "PDColocated", "caching_enabled": caching},
                )
            )
        for i in range(n_p):
            entries.append(
                ("cluster.setting", {"instance_id": f"p{i}", "kind": "PrefillOnly"})
            )
        for i in range(n_d):
            entries.append(
                ("cluster.setting", {"instance_id": f"d{i}", "kind": "DecodeOnly"})
            )

    specs = []
    seen = set()
    for path, entry in entries:
        unknown = sorted(
            set(entry)
            - {"instance_id", "kind", "caching_enabled", *defaults.keys()}
        )
        if unknown:
            raise ConfigError(f"unknown field(s) {', '.join(unknown)}", path=path)
        values = {**defaults, **entry}
        kind = parse_enum(InstanceKind, values.get("kind"), f"{path}.kind")
        if kind == InstanceKind.PDColocated:
            caching = bool(values.get("caching_enabled", False))
        else:
            # disaggregated instances follow the design level
            caching = design != CachingDesign.PDBasic
        try:
            spec = InstanceSpec(
                instance_id=values.get("instance_id"),
                kind=kind,
                parallelism=ParallelismConfig(
                    tp_degree=values["tp_degree"], pp_degree=values["pp_degree"]
                ),
                hbm_capacity_blocks=values["hbm_capacity_blocks"],
                dram_capacity_blocks=values["dram_capacity_blocks"],
                caching_enabled=caching,
            )
        except ConfigError as e:
            raise ConfigError(e.message, path=f"{path}.{e.path}" if e.path else path)
        if spec.instance_id in seen:
            raise ConfigError(f"duplicate instance_id {spec.instance_id!r}", path=path)
        seen.add(spec.instance_id)
        specs.append(spec)

    kinds = {s.kind for s in specs}
    if InstanceKind.PDColocated in kinds and len(kinds) > 1:
        raise ConfigError(
            "colocated and disaggregated instances can not be mixed in one cluster",
            path="cluster",
        )
    if InstanceKind.PDColocated not in kinds and kinds != {
        InstanceKind.PrefillOnly,
        InstanceKind.DecodeOnly,
    }:
        raise ConfigError(
            "a disaggregated cluster needs prefill and decode instances", path="cluster"
        )
    return specs
