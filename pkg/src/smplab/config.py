"""Run configuration: INI sections with typed keys, defaults, and overrides."""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(s).replace(" ", "").split(",") if v)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(s).replace(" ", "").split(",") if v)


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "runs/default"),
    },
    "data": {
        "preset": (str, "styles"),
        "H": (int, 10),
        "out": (str, ""),
    },
    "prior": {
        "dataset": (str, ""),
        "steps": (int, 20_000),
        "batch": (int, 256),
        "lr": (float, 3e-4),
        "ema_decay": (float, 0.999),
        "cond_dropout": (float, 0.1),
        "N": (int, 50),
        "hidden": (_ints, (256, 256, 256)),
        "log_every": (int, 500),
        "conditional": (_bool, True),
        "holdout": (float, 0.0),
        "out": (str, ""),
    },
    "policy": {
        "task": (str, "target_speed"),
        "prior": (str, ""),
        "dataset": (str, ""),
        "w_prior": (float, 0.5),
        "w_g": (float, 0.5),
        "label": (str, ""),
        "w_cfg": (float, 1.0),
        "compose": (str, ""),
        "mask": (str, "limb1"),
        "reward_mode": (str, "ensemble"),
        "w_s": (float, 1.0),
        "mu_decay": (float, 0.999),
        "gsi": (_bool, True),
        "iterations": (int, 300),
        "n_envs": (int, 64),
        "horizon": (int, 64),
        "epochs": (int, 4),
        "minibatch": (int, 512),
        "lr": (float, 3e-4),
        "gamma": (float, 0.99),
        "lam": (float, 0.95),
        "clip": (float, 0.2),
        "entropy_coef": (float, 0.005),
        "hidden": (_ints, (128, 128)),
        "init_log_std": (float, -0.5),
        "checkpoint_every": (int, 50),
        "resume": (str, ""),
        "out": (str, ""),
    },
    "eval": {
        "kind": (str, "prior"),
        "prior": (str, ""),
        "policy": (str, ""),
        "dataset": (str, ""),
        "n_samples": (int, 512),
        "repeats": (int, 8),
        "trials": (int, 100),
        "n_windows": (int, 100),
        "episodes": (int, 16),
        "steps": (int, 300),
        "holdout": (float, 0.25),
        "label": (str, ""),
        "w_cfg": (float, 1.0),
        "compose": (str, ""),
        "mask": (str, "limb1"),
        "speeds": (_floats, (1.2, 1.733, 2.267, 2.8, 3.333, 3.867, 4.4, 4.933, 5.467, 6.0)),
        "out": (str, ""),
    },
    "sample": {
        "prior": (str, ""),
        "label": (str, ""),
        "w_cfg": (float, 1.0),
        "compose": (str, ""),
        "mask": (str, "limb1"),
        "n": (int, 16),
        "out": (str, ""),
    },
}


@dataclass
class RunConfig:
    """Resolved configuration: ``values[section][key]`` with parsed types."""

    values: dict

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["run"]["out_dir"])

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for sec, keys in self.values.items():
            cp[sec] = {k: _fmt(v) for k, v in keys.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini())


def _set(values: dict, section: str, key: str, raw) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    parse = SCHEMA[section][key][0]
    try:
        values[section][key] = parse(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from None


def load_config(path: str | Path | None = None, overrides: list[str] = (),
                env: dict | None = None) -> RunConfig:
    """Defaults, then the INI file, then ``section.key=value`` overrides, then SMP_SEED."""
    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(p.read_text())
        except configparser.Error as e:
            raise ConfigError(f"{p}: {e}") from None
        for sec in cp.sections():
            for key, raw in cp[sec].items():
                _set(values, sec, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        lhs, raw = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        _set(values, sec.strip(), key.strip(), raw.strip())
    env = os.environ if env is None else env
    if env.get("SMP_SEED"):
        _set(values, "run", "seed", env["SMP_SEED"])
    return RunConfig(values)
