"""INI-style run configuration with documented defaults.

Precedence is command-line flag > config file > default. Unknown sections
or keys are rejected so a typo cannot silently fall back to a default.
"""

import configparser
import os

from .errors import ConfigError

ENV_DATA_ROOT = "PC_ROBUST_DATA"

# section -> key -> (default, parser)
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_bool(s):
    try:
        return _BOOL[str(s).strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_widths(s):
    if isinstance(s, (tuple, list)):
        return tuple(int(v) for v in s)
    return tuple(int(tok) for tok in str(s).split(",") if tok.strip())


DEFAULTS = {
    "data": {
        "root": (None, str),              # None -> $PC_ROBUST_DATA or "data"
        "classes": (8, int),
        "per_class": (80, int),
        "val_per_class": (20, int),
        "points": (128, int),
        "seed": (7, int),
    },
    "model": {
        "backbone": ("pointnet", str),
    },
    "pool": {
        "kind": ("max", str),
        "L": (512, int),
        "heads": (4, int),
        "k_seeds": (1, int),
        "hidden": (128, int),
        "k_top": (32, int),
        "d_m": (8, int),
        "mlp_widths": ((512, 128, 32, 8, 1), _parse_widths),
    },
    "train": {
        "epochs": (30, int),
        "batch_size": (16, int),
        "optimizer": ("adam", str),
        "lr": (0.01, float),
        "lr_halve_every": (20, int),
        "at_steps": (0, int),
        "epsilon": (0.05, float),
        "random_start": (True, _parse_bool),
        "seed": (0, int),
    },
    "attack": {
        "kind": ("pgd", str),
        "epsilon": (0.05, float),
        "steps": (200, int),
        "delta": (0.16, float),
        "targeted": (False, _parse_bool),
        "target": (-1, int),
        "queries": (2000, int),
        "samples": (0, int),              # 0 -> whole split
    },
    "defense": {
        "kind": ("none", str),            # none | sor | gvg
        "k": (2, int),
        "alpha": (1.1, float),
        "upsampler": ("duplicate_jitter", str),
        "radius_r": (0.08, float),
        "target_points": (2048, int),
    },
}


class RunConfig:
    """Merged view of defaults, an optional INI file, and CLI overrides."""

    def __init__(self, values):
        self._values = values

    def __getitem__(self, section):
        return self._values[section]

    def get(self, section, key):
        return self._values[section][key]

    def data_root(self):
        root = self.get("data", "root")
        if root:
            return root
        return os.environ.get(ENV_DATA_ROOT, "data")

    def as_flat_dict(self):
        return {f"{s}.{k}": v for s, kv in self._values.items() for k, v in kv.items()}


def load_config(path=None, overrides=None):
    """Build a RunConfig. `overrides` maps (section, key) to raw values."""
    values = {s: {k: d for k, (d, _) in kv.items()} for s, kv in DEFAULTS.items()}
    if path:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                _, cast = DEFAULTS[section][key]
                try:
                    values[section][key] = cast(raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})")
    for (section, key), raw in (overrides or {}).items():
        if raw is None:
            continue
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown override {section}.{key}")
        _, cast = DEFAULTS[section][key]
        values[section][key] = cast(raw) if not isinstance(raw, (int, float, bool, tuple)) else raw
    return RunConfig(values)
