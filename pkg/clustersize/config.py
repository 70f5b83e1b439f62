"""Module for resolving run settings from defaults, a TOML file and command-line flags."""

from __future__ import annotations

import logging
import sys
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

from clustersize.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 backport with the same API
    import tomli as tomllib

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "fit", "summarize", "power", "recover")

GLOBAL_DEFAULTS: dict[str, object] = {
    "seed": 1,
    "out_dir": ".",
    "threads": 1,
    "strict": False,
}

_DATA = {"data_dir": None, "fields": None, "vessels": None}
_CHAINS = {"burn_in": 50_000, "keep": 50_000, "thin": 20, "chains": 4}

COMMAND_DEFAULTS: dict[str, dict[str, object]] = {
    "simulate": {
        "family": "joint",
        "grouping": "coarse",
        "design": "table1",
        "rho_zero": False,
        "with_pla": True,
    },
    "fit": {
        **_DATA,
        **_CHAINS,
        "family": "joint",
        "grouping": "coarse",
        "delta_grouping": None,
        "method": "ml",
        "constraints": [],
        "n_nodes": 20,
        "prior_factor": 1.0,
        "compare": False,
        "lrt": False,
        "sensitivity": False,
        "field_effects": False,
    },
    "summarize": dict(_DATA),
    "power": {
        "means": [2.6, 5.0, 10.0],
        "sd": 7.5,
        "n": 25,
        "alpha": 0.05,
        "target": None,
        "reps": 0,
    },
    "recover": {
        "family": "joint",
        "grouping": "coarse",
        "design": "table1",
        "method": "mcmc",
        "replicates": 2,
        "burn_in": 5_000,
        "keep": 5_000,
        "thin": 5,
        "chains": 2,
        "contrast": True,
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings of one command.

    :param command: Subcommand name.
    :param settings: Global and command-specific settings, flat.
    """

    command: str
    settings: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.command not in COMMANDS:
            msg = f"unknown command {self.command!r}"
            raise ConfigError(msg)
        object.__setattr__(self, "settings", MappingProxyType(dict(self.settings)))

    def __getitem__(self, key: str) -> object:
        try:
            return self.settings[key]
        except KeyError:
            msg = f"no setting {key!r} for command {self.command}"
            raise ConfigError(msg) from None

    def get(self, key: str, default: object = None) -> object:
        return self.settings.get(key, default)

    def to_dict(self) -> dict:
        """Settings in key order, suitable for JSON and for writing back as TOML."""
        return {"command": self.command, **{k: self.settings[k] for k in sorted(self.settings)}}


def read_config_file(path: str | Path) -> dict:
    """Parse a TOML config file.

    :raises FileNotFoundError: if ``path`` does not exist.
    :raises ConfigError: if the file is not valid TOML.
    """
    path = Path(path)
    if not path.is_file():
        msg = f"config file not found: {path}"
        raise FileNotFoundError(msg)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        msg = f"{path}: {err}"
        raise ConfigError(msg) from None


def _check_keys(values: Mapping[str, object], allowed: Mapping[str, object], where: str) -> None:
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        msg = f"unknown setting(s) in {where}: {', '.join(unknown)}"
        raise ConfigError(msg)


def _coerce(key: str, value: object, default: object) -> object:
    """Check a file value against the type of its default."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            msg = f"setting {key!r} must be true or false, got {value!r}"
            raise ConfigError(msg)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            msg = f"setting {key!r} must be an integer, got {value!r}"
            raise ConfigError(msg)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            msg = f"setting {key!r} must be a number, got {value!r}"
            raise ConfigError(msg)
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            msg = f"setting {key!r} must be a list, got {value!r}"
            raise ConfigError(msg)
        return list(value)
    return str(value)


def resolve_config(
    command: str, overrides: Mapping[str, object] | None = None, file_values: Mapping[str, object] | None = None
) -> RunConfig:
    """Merge built-in defaults, a parsed config file and explicit flags.

    Top-level file keys are global settings; a table named after a command
    holds that command's settings and is ignored by the others. ``None``
    entries of ``overrides`` mean "flag not given" and do not override.

    :param command: Subcommand name.
    :param overrides: Values given on the command line.
    :param file_values: Parsed TOML document.
    :raises ConfigError: on unknown keys or mistyped values.
    """
    if command not in COMMANDS:
        msg = f"unknown command {command!r}"
        raise ConfigError(msg)
    defaults = {**GLOBAL_DEFAULTS, **COMMAND_DEFAULTS[command]}
    file_values = dict(file_values or {})
    tables = {k: file_values.pop(k) for k in COMMANDS if k in file_values}
    for name, table in tables.items():
        if not isinstance(table, dict):
            msg = f"[{name}] must be a table"
            raise ConfigError(msg)
        _check_keys(table, {**GLOBAL_DEFAULTS, **COMMAND_DEFAULTS[name]}, f"[{name}]")
    _check_keys(file_values, {**GLOBAL_DEFAULTS, **{k: v for t in COMMAND_DEFAULTS.values() for k, v in t.items()}}, "top level")

    settings = dict(defaults)
    for key, value in file_values.items():
        if key in defaults:
            settings[key] = _coerce(key, value, defaults[key])
    for key, value in tables.get(command, {}).items():
        settings[key] = _coerce(key, value, defaults[key])
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in defaults:
            msg = f"unknown setting {key!r} for command {command}"
            raise ConfigError(msg)
        settings[key] = value
    logger.debug("resolved %s config: %s", command, settings)
    return RunConfig(command, settings)


def load_config(
    command: str, path: str | Path | None = None, overrides: Mapping[str, object] | None = None
) -> RunConfig:
    """Resolve the settings of ``command`` from an optional TOML file and flag overrides."""
    file_values = read_config_file(path) if path is not None else None
    return resolve_config(command, overrides, file_values)
