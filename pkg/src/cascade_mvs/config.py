"""Sectioned run configuration (INI) with typed defaults and strict key checking."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .fusion import FusionParams
from .loss import LossWeights
from .pipeline import StageConfig
from .trainer import TrainConfig


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("none", "") else int(text)


def _schedule(text: str):
    out = []
    for item in text.split(","):
        if item.strip():
            e, m = item.split(":")
            out.append((int(e), float(m)))
    return tuple(out)


# section -> key -> (parser, default text)
SCHEMA = {
    "run": {"seed": (int, "0"), "threads": (int, "1")},
    "stage": {
        "planes": (_ints, "48,32,8"),
        "lambdas": (_floats, "1.5,0.75"),
        "spatial_radius": (int, "1"),
        "depth_radius": (int, "1"),
        "temperature": (_opt_float, "auto"),
    },
    "train": {
        "scenes": (int, "32"),
        "epochs": (int, "16"),
        "batch_size": (int, "2"),
        "lr": (float, "0.001"),
        "schedule": (_schedule, "10:0.5,12:0.5,14:0.5"),
        "alpha": (_floats, "0.5,1.0,2.0"),
        "beta": (_floats, "3.0,0.0"),
        "tau_fraction": (float, "0.5"),
        "init_uncertainty": (float, "0.1"),
        "train_features": (_bool, "false"),
        "refined_path": (_bool, "true"),
        "hypothesis_path": (_bool, "true"),
        "probability_path": (_bool, "true"),
        "max_steps": (_opt_int, "none"),
    },
    "synth": {"scenes": (int, "8"), "width": (int, "128"), "height": (int, "96"), "views": (int, "3")},
    "fusion": {
        "reproj_tol_px": (float, "0.75"),
        "rel_depth_tol": (float, "0.01"),
        "min_consistent_views": (int, "2"),
        "ply_format": (str, "binary_le"),
    },
    "eval": {"dist_cap_factor": (float, "20")},
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)  # section -> key -> parsed value

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.get("run", "seed")

    @property
    def threads(self) -> int:
        return self.get("run", "threads")

    def stage_config(self) -> StageConfig:
        s = self.values["stage"]
        return StageConfig(s["planes"], s["lambdas"], s["spatial_radius"], s["depth_radius"], s["temperature"])

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            seed=self.seed,
            lr=t["lr"],
            schedule=t["schedule"],
            weights=LossWeights(t["alpha"], t["beta"]),
            tau_fraction=t["tau_fraction"],
            init_uncertainty=t["init_uncertainty"],
            train_features=t["train_features"],
            refined_path=t["refined_path"],
            hypothesis_path=t["hypothesis_path"],
            probability_path=t["probability_path"],
            max_steps=t["max_steps"],
        )

    def fusion_params(self) -> FusionParams:
        f = self.values["fusion"]
        return FusionParams(f["reproj_tol_px"], f["rel_depth_tol"], f["min_consistent_views"])


def _set(values: dict, section: str, key: str, text: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    parser = SCHEMA[section][key][0]
    try:
        values[section][key] = parser(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} = {text!r}: {exc}") from exc


def resolve_key(name: str) -> tuple[str, str]:
    """``section.key`` or a bare key that is unique across sections."""
    name = name.replace("-", "_")
    if "." in name:
        section, key = name.split(".", 1)
        return section, key
    hits = [s for s, keys in SCHEMA.items() if name in keys]
    if len(hits) != 1:
        raise ConfigError(f"unknown or ambiguous key {name!r}" + (f" (use one of {[h + '.' + name for h in hits]})" if hits else ""))
    return hits[0], name


def load_config(path=None, overrides: list[tuple[str, str]] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides`` as ``(key, value)`` pairs."""
    values = {s: {} for s in SCHEMA}
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            _set(values, section, key, default)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        for section in cp.sections():
            for key, text in cp.items(section):
                _set(values, section, key, text)
    for name, text in overrides or []:
        section, key = resolve_key(name)
        _set(values, section, key, text)
    cfg = RunConfig(values)
    try:
        cfg.stage_config()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if values["fusion"]["ply_format"] not in ("ascii", "binary_le"):
        raise ConfigError("ply_format must be ascii or binary_le")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Round-trippable INI text of every resolved value."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if v is None:
            return "none"
        if isinstance(v, tuple):
            if v and isinstance(v[0], tuple):
                return ",".join(f"{e}:{m!r}" for e, m in v)
            return ",".join(repr(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    lines = []
    for section, keys in cfg.values.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {fmt(v)}" for k, v in keys.items()]
        lines.append("")
    return "\n".join(lines)
