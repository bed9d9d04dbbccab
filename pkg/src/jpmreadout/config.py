"""Experiment configuration: YAML parsing with unit tags.

A config file looks like::

    experiment: contrast_vs_time
    mode: dispersive
    params:
      g_j: {value: 50, unit: MHz_over_2pi}
      gamma_j: 200 MHz_rate
      t_m: {value: 100, unit: ns}
    sweep:
      bright_photons: {values: [4, 10], unit: photons}
    options:
      record_interval: {value: 1, unit: ns}
    integrator:
      dt: {value: 1, unit: ps}
    output: {path: out.csv, format: csv}
    seed: 0

Every frequency, rate and time key needs a unit tag, either as a
``{value, unit}`` mapping or as a ``"<number> <unit>"`` string. Unknown keys
are rejected. Values are converted to internal units (rad/s, 1/s, s) on
load; :func:`echo_config` writes them back in those units so an output
header is itself a valid config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import yaml

from .errors import ConfigError
from .evolve import IntegratorConfig
from .model import MODES, UNITS, SystemParams

EXPERIMENTS = (
    "drive_trace",
    "detection_surface",
    "contrast_vs_time",
    "contrast_vs_rate",
    "reset_error_curve",
    "fidelity_vs_time",
    "lifetimes",
    "qnd_repeat",
)
FORMATS = ("csv", "json")

UNIT_TABLE = dict(UNITS, ps=1e-12, fs=1e-15, ms=1e-3)

# quantity kind -> (allowed units, internal unit name, tag mandatory)
KINDS = {
    "frequency": (("MHz_over_2pi", "MHz_over_pi", "GHz_over_2pi", "rad_per_s"), "rad_per_s", True),
    "rate": (("MHz_rate", "kHz_rate", "per_s"), "per_s", True),
    "time": (("fs", "ps", "ns", "us", "ms", "s"), "s", True),
    "phase": (("rad",), "rad", False),
    "photons": (("photons",), "photons", False),
    "count": (("dimensionless",), "dimensionless", False),
}

PARAM_KINDS = {
    "omega_c": "frequency",
    "omega_q": "frequency",
    "omega_j_idle": "frequency",
    "omega_j_meas": "frequency",
    "g_q": "frequency",
    "g_j": "frequency",
    "gamma_j": "rate",
    "gamma_d": "rate",
    "gamma_r": "rate",
    "kappa": "rate",
    "cavity_decay": "bool",
    "drive_amp": "frequency",
    "bright_photons": "photons",
    "drive_phase": "phase",
    "reset_amp": "frequency",
    "reset_phase": "phase",
    "t_d": "time",
    "t_m": "time",
    "t_r": "time",
    "measured_energy": "frequency",
}

# sweep axes that are not SystemParams fields
EXTRA_AXES = {
    "alpha_sq": "photons",  # initial coherent-state occupation
    "N": "count",  # photons subtracted
    "n": "photons",  # cavity occupation for lifetimes
}

# experiment options: name -> (kind, default)
OPTIONS = {
    "record_interval": ("time", 1e-9),
    "t_max": ("time", None),
    "dark_ratio": ("count", None),
    "qubit_state": ("str", "plus"),
    "reset_mode": ("str", "ideal"),
}

INTEGRATOR_KEYS = {
    "method": "str",
    "dt": "time",
    "rtol": "count",
    "atol": "count",
    "hermitize_every": "int",
    "check_step_bound": "bool",
    "check_physical": "bool",
    "backend": "str",
}

TOP_KEYS = ("experiment", "mode", "params", "sweep", "options", "integrator", "output", "seed", "resolved")

QUBIT_STATES = ("0", "1", "plus", "minus", "plus_i")
RESET_MODES = ("ideal", "displacement", "none")


@dataclass
class ExperimentConfig:
    """Validated experiment description in internal units."""

    experiment: str
    params: SystemParams = field(default_factory=SystemParams)
    mode: str = "dispersive"
    sweep: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    integrator: IntegratorConfig = field(default_factory=lambda: IntegratorConfig(store_states=False))
    output_path: str | None = None
    output_format: str = "csv"
    seed: int = 0
    param_overrides: dict = field(default_factory=dict)

    def option(self, name):
        return self.options.get(name, OPTIONS[name][1])

    def axes(self):
        """``[(name, values), ...]`` in declaration order (first is slowest)."""
        return list(self.sweep.items())


def _number(raw, path):
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ConfigError(f"expected a number, got {raw!r}", path)
    val = float(raw)
    if not math.isfinite(val):
        raise ConfigError(f"non-finite value {raw!r}", path)
    return val


def _split_tagged(raw, path):
    """``(value, unit or None)`` from a mapping, a string or a bare number."""
    if isinstance(raw, dict):
        unknown = set(raw) - {"value", "unit"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", path)
        if "value" not in raw:
            raise ConfigError("missing 'value'", path)
        return raw["value"], raw.get("unit")
    if isinstance(raw, str):
        parts = raw.split()
        if len(parts) != 2:
            raise ConfigError(f"expected '<number> <unit>', got {raw!r}", path)
        try:
            return float(parts[0]), parts[1]
        except ValueError:
            raise ConfigError(f"cannot parse number in {raw!r}", path) from None
    return raw, None


def _unit_factor(kind, unit, path):
    allowed, _, mandatory = KINDS[kind]
    if unit is None:
        if mandatory:
            raise ConfigError(f"a unit tag is required for this {kind} key (one of {', '.join(allowed)})", path)
        return 1.0
    if unit not in allowed:
        raise ConfigError(f"unit {unit!r} is not valid for a {kind} (use one of {', '.join(allowed)})", path)
    return UNIT_TABLE[unit]


def parse_quantity(raw, kind, path):
    """Convert a tagged value to internal units; ``None`` passes through."""
    if kind == "bool":
        if not isinstance(raw, bool):
            raise ConfigError(f"expected true/false, got {raw!r}", path)
        return raw
    if kind == "str":
        if not isinstance(raw, str):
            raise ConfigError(f"expected a string, got {raw!r}", path)
        return raw
    if kind == "int":
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"expected an integer, got {raw!r}", path)
        return raw
    if raw is None:
        return None
    value, unit = _split_tagged(raw, path)
    if value is None:
        return None
    return _number(value, path) * _unit_factor(kind, unit, path)


def _parse_axis(name, raw, path):
    kind = PARAM_KINDS.get(name) or EXTRA_AXES.get(name)
    if kind is None:
        raise ConfigError(f"unknown sweep axis {name!r}", path)
    if kind == "bool":
        raise ConfigError("boolean parameters cannot be swept", path)
    if not isinstance(raw, dict):
        raise ConfigError("a sweep axis needs a mapping with 'values' (and 'unit')", path)
    unknown = set(raw) - {"values", "unit"}
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}", path)
    values = raw.get("values")
    if not isinstance(values, list):
        raise ConfigError("'values' must be an explicit list", path)
    if not values:
        raise ConfigError(f"empty sweep axis {name!r}", path)
    factor = _unit_factor(kind, raw.get("unit"), path)
    out = tuple(_number(v, f"{path}.values[{i}]") * factor for i, v in enumerate(values))
    if name == "N" and any(v != int(v) or v < 1 for v in out):
        raise ConfigError("N values must be positive integers", path)
    return out


def _parse_mapping(raw, path):
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", path)
    return raw


def parse_config(data):
    """Validate a decoded YAML document and return an :class:`ExperimentConfig`."""
    data = _parse_mapping(data, "<root>")
    unknown = set(data) - set(TOP_KEYS)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError("unknown key", key)
    exp = data.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"must be one of {', '.join(EXPERIMENTS)} (got {exp!r})", "experiment")
    mode = data.get("mode", "dispersive")
    if mode not in MODES:
        raise ConfigError(f"must be one of {', '.join(MODES)}", "mode")

    overrides = {}
    for key, raw in _parse_mapping(data.get("params"), "params").items():
        if key not in PARAM_KINDS:
            raise ConfigError("unknown parameter", f"params.{key}")
        overrides[key] = parse_quantity(raw, PARAM_KINDS[key], f"params.{key}")
    try:
        params = SystemParams(**overrides)
    except ValueError as exc:
        raise ConfigError(str(exc), "params") from None

    sweep = {}
    for name, raw in _parse_mapping(data.get("sweep"), "sweep").items():
        sweep[name] = _parse_axis(name, raw, f"sweep.{name}")

    options = {}
    for key, raw in _parse_mapping(data.get("options"), "options").items():
        if key not in OPTIONS:
            raise ConfigError("unknown option", f"options.{key}")
        options[key] = parse_quantity(raw, OPTIONS[key][0], f"options.{key}")
    if options.get("qubit_state", "plus") not in QUBIT_STATES:
        raise ConfigError(f"must be one of {', '.join(QUBIT_STATES)}", "options.qubit_state")
    if options.get("reset_mode", "ideal") not in RESET_MODES:
        raise ConfigError(f"must be one of {', '.join(RESET_MODES)}", "options.reset_mode")
    if options.get("record_interval", 1.0) is not None and options.get("record_interval", 1.0) <= 0:
        raise ConfigError("must be positive", "options.record_interval")

    integ = {}
    for key, raw in _parse_mapping(data.get("integrator"), "integrator").items():
        if key not in INTEGRATOR_KEYS:
            raise ConfigError("unknown integrator setting", f"integrator.{key}")
        integ[key] = parse_quantity(raw, INTEGRATOR_KEYS[key], f"integrator.{key}")
    try:
        integrator = IntegratorConfig(store_states=False, **integ)
    except ValueError as exc:
        raise ConfigError(str(exc), "integrator") from None

    out = _parse_mapping(data.get("output"), "output")
    unknown = set(out) - {"path", "format"}
    if unknown:
        raise ConfigError("unknown key", f"output.{sorted(unknown)[0]}")
    fmt = out.get("format", "csv")
    if fmt not in FORMATS:
        raise ConfigError(f"must be one of {', '.join(FORMATS)}", "output.format")
    path = out.get("path")
    if path is not None and not isinstance(path, str):
        raise ConfigError("must be a string", "output.path")

    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("must be an integer", "seed")

    cfg = ExperimentConfig(
        experiment=exp,
        params=params,
        mode=mode,
        sweep=sweep,
        options=options,
        integrator=integrator,
        output_path=path,
        output_format=fmt,
        seed=seed,
        param_overrides=overrides,
    )
    if "resolved" in data:
        _check_resolved(cfg, _parse_mapping(data["resolved"], "resolved"))
    return cfg


def _check_resolved(cfg, resolved):
    """An echoed ``resolved`` block must agree with the parameters it came from."""
    actual = cfg.params.resolved()
    for key, raw in resolved.items():
        if key not in PARAM_KINDS:
            raise ConfigError("unknown parameter", f"resolved.{key}")
        val = parse_quantity(raw, PARAM_KINDS[key], f"resolved.{key}")
        if val != actual[key]:
            raise ConfigError(f"echoed value {val!r} does not match the resolved value {actual[key]!r}",
                              f"resolved.{key}")


def _strip_header(text):
    """Config text from an output file's ``#`` header, or the text unchanged."""
    lines = text.splitlines()
    if lines and lines[0].startswith("# ") and "jpmreadout" in lines[0]:
        body = []
        for line in lines[1:]:
            if not line.startswith("#"):
                break
            body.append(line[2:] if line.startswith("# ") else line[1:])
        return "\n".join(body)
    if text.lstrip().startswith("{") and '"config"' in text:
        import json

        return yaml.safe_dump(json.loads(text)["config"], sort_keys=False)
    return text


def load_config(path):
    """Read a YAML config, or the header of a previous CSV/JSON output."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(str(exc), str(path)) from None
    try:
        data = yaml.safe_load(_strip_header(text))
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", str(path)) from None
    return parse_config(data)


def _internal(kind, value):
    if value is None or kind in ("bool", "str", "int"):
        return value
    unit = KINDS[kind][1]
    return {"value": float(value), "unit": unit}


def echo_config(cfg):
    """Config as a plain dict in internal units; ``parse_config`` inverts it."""
    integ_defaults = IntegratorConfig(store_states=False)
    integ = {}
    for key, kind in INTEGRATOR_KEYS.items():
        val = getattr(cfg.integrator, key)
        if val != getattr(integ_defaults, key) or key in ("method", "dt"):
            integ[key] = _internal(kind, val)
    params = {f.name: _internal(PARAM_KINDS[f.name], getattr(cfg.params, f.name)) for f in fields(SystemParams)}
    resolved = {k: _internal(PARAM_KINDS[k], v) for k, v in cfg.params.resolved().items()}
    sweep = {}
    for name, values in cfg.sweep.items():
        kind = PARAM_KINDS.get(name) or EXTRA_AXES[name]
        sweep[name] = {"values": [float(v) for v in values], "unit": KINDS[kind][1]}
    options = {k: _internal(OPTIONS[k][0], v) for k, v in sorted(cfg.options.items())}
    out = {"experiment": cfg.experiment, "mode": cfg.mode, "params": params}
    if sweep:
        out["sweep"] = sweep
    if options:
        out["options"] = options
    out["integrator"] = integ
    # the output path is not echoed: re-running an output file must
    # reproduce it byte for byte wherever it is written
    out["output"] = {"format": cfg.output_format}
    out["seed"] = cfg.seed
    out["resolved"] = resolved
    return out


def dump_yaml(data):
    """Block-style YAML with leaf mappings inline."""
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None, width=200)


def default_config_text(experiment="contrast_vs_time"):
    """YAML for :func:`echo_config` of the defaults of one experiment."""
    cfg = parse_config({"experiment": experiment})
    return dump_yaml(echo_config(cfg))
