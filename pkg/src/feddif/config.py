"""YAML experiment specs: parsing, validation, overrides and sweep expansion.

A config file looks like::

    name: alpha_sweep
    seeds: [0, 1, 2]
    base:
      n_rounds: 30
      radio: {tx_power: 0.1}
    sweep:
      alpha: [0.1, 1.0, 100.0]
      mode: [feddif, full_diffusion]

Nested sections (``radio``, ``hp``, ``model``) may also be addressed with
dotted keys such as ``radio.tx_power`` in ``sweep`` and in overrides.
"""
from __future__ import annotations

import dataclasses
import enum
import itertools
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from feddif import channel, learn
from feddif.dist import DistanceMetric
from feddif.sim import Mode, SimConfig

TOP_LEVEL_KEYS = ("name", "base", "sweep", "seeds", "output_dir", "paired_baseline")
NESTED = {"radio": channel.RadioConfig, "hp": learn.Hyperparams, "model": learn.ModelSpec}
MODE_ALIASES = {
    "feddif": Mode.FEDDIF,
    "baseline": Mode.BASELINE,
    "baselinefedavg": Mode.BASELINE,
    "fedavg": Mode.BASELINE,
    "full_diffusion": Mode.FULL_DIFFUSION,
    "fulldiffusion": Mode.FULL_DIFFUSION,
}


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending key."""


@dataclass(frozen=True)
class ExperimentSpec:
    base: SimConfig = field(default_factory=SimConfig)
    sweep: dict = field(default_factory=dict)  # dotted key -> list of values
    seeds: tuple = (0,)
    output_dir: Optional[str] = None
    name: str = "experiment"
    paired_baseline: bool = True


@dataclass(frozen=True)
class Cell:
    """One (scenario, seed) unit of work."""

    scenario: str
    params: dict
    seed: int
    config: SimConfig

    @property
    def stem(self) -> str:
        return f"{self.scenario}__seed{self.seed}"


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def valid_keys() -> set:
    keys = set(_field_names(SimConfig)) - set(NESTED)
    for section, cls in NESTED.items():
        keys |= {f"{section}.{name}" for name in _field_names(cls)}
    return keys | set(NESTED)


def _coerce(key: str, value):
    """Map YAML scalars onto the enum-typed fields."""
    leaf = key.rsplit(".", 1)[-1]
    if value is None:
        return None
    if leaf == "mode":
        norm = str(value).strip().lower().replace("-", "_")
        if norm not in MODE_ALIASES:
            raise ConfigError(f"{key}: unknown mode {value!r}")
        return MODE_ALIASES[norm]
    if leaf == "metric":
        try:
            return DistanceMetric(str(value).lower())
        except ValueError:
            raise ConfigError(f"{key}: unknown metric {value!r}") from None
    if key == "model.kind":
        try:
            return learn.ModelKind(str(value).lower())
        except ValueError:
            raise ConfigError(f"{key}: unknown model kind {value!r}") from None
    return value


def _nest(flat: dict) -> dict:
    """Fold dotted keys into nested section dicts."""
    out: dict = {}
    for key, value in flat.items():
        if "." in key:
            section, leaf = key.split(".", 1)
            out.setdefault(section, {})
            if not isinstance(out[section], dict):
                raise ConfigError(f"{section}: expected a mapping")
            out[section][leaf] = value
        else:
            if key in NESTED and key in out:
                if not isinstance(value, dict):
                    raise ConfigError(f"{key}: expected a mapping")
                out[key] = {**value, **out[key]}
            else:
                out[key] = value
    return out


def sim_config_from_dict(raw: Optional[dict], where: str = "base") -> SimConfig:
    """Build a validated :class:`SimConfig`; unknown keys raise ConfigError."""
    raw = _nest(dict(raw or {}))
    allowed = _field_names(SimConfig)
    kwargs = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"{where}.{key}: unknown key")
        if key in NESTED:
            cls = NESTED[key]
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key}: expected a mapping")
            names = _field_names(cls)
            sub = {}
            for leaf, v in value.items():
                if leaf not in names:
                    raise ConfigError(f"{where}.{key}.{leaf}: unknown key")
                sub[leaf] = _coerce(f"{key}.{leaf}", v)
            try:
                kwargs[key] = cls(**sub)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}.{key}: {exc}") from None
        else:
            kwargs[key] = _coerce(key, value)
    try:
        return SimConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _plain(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: SimConfig) -> dict:
    """Fully resolved, JSON/YAML-safe view of a config."""
    return _plain(dataclasses.asdict(cfg))


def parse_override(text: str):
    """``key=value`` with the value parsed as YAML (so ``[1, 2]`` is a list)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, value = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r}: empty key")
    return key, yaml.safe_load(value)


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key=value`` overrides on a raw config mapping; flags win.

    Keys are base fields (``alpha``, ``radio.tx_power``) unless they start
    with a top-level section name (``seeds``, ``sweep.alpha``, ``name``).
    """
    raw = dict(raw)
    raw["base"] = dict(raw.get("base") or {})
    raw["sweep"] = dict(raw.get("sweep") or {})
    for text in overrides or ():
        key, value = parse_override(text)
        head = key.split(".", 1)[0]
        if key in TOP_LEVEL_KEYS and key not in ("base", "sweep"):
            raw[key] = value
        elif head == "sweep" and "." in key:
            raw["sweep"][key.split(".", 1)[1]] = value
        elif head == "base" and "." in key:
            raw["base"] = _set_dotted(raw["base"], key.split(".", 1)[1], value)
        else:
            raw["base"] = _set_dotted(raw["base"], key, value)
    return raw


def _set_dotted(base: dict, key: str, value) -> dict:
    base = dict(base)
    if "." in key:
        section, leaf = key.split(".", 1)
        sub = dict(base.get(section) or {})
        sub[leaf] = value
        base[section] = sub
    else:
        base[key] = value
    return base


def spec_from_dict(raw: Optional[dict], default_name: str = "experiment") -> ExperimentSpec:
    raw = dict(raw or {})
    for key in raw:
        if key not in TOP_LEVEL_KEYS:
            raise ConfigError(f"{key}: unknown key")
    base_raw = raw.get("base") or {}
    if not isinstance(base_raw, dict):
        raise ConfigError("base: expected a mapping")
    base = sim_config_from_dict(base_raw)

    sweep_raw = raw.get("sweep") or {}
    if not isinstance(sweep_raw, dict):
        raise ConfigError("sweep: expected a mapping")
    keys = valid_keys()
    sweep = {}
    for key, values in sweep_raw.items():
        if key not in keys or key in NESTED:
            raise ConfigError(f"sweep.{key}: unknown key")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{key}: expected a non-empty list")
        for v in values:
            # Validate each value in isolation against the base config.
            sim_config_from_dict(_set_dotted(base_raw, key, v), where=f"sweep.{key}")
        sweep[key] = list(values)

    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds: expected a non-empty list of integers")
    if not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of integers")

    name = str(raw.get("name") or default_name)
    if not re.fullmatch(r"[A-Za-z0-9_.\-]+", name):
        raise ConfigError(f"name: {name!r} must be a plain file-name token")
    out = raw.get("output_dir")
    paired = raw.get("paired_baseline", True)
    if not isinstance(paired, bool):
        raise ConfigError("paired_baseline: expected true or false")
    return ExperimentSpec(base=base, sweep=sweep, seeds=tuple(seeds),
                          output_dir=None if out is None else str(out),
                          name=name, paired_baseline=paired)


def read_raw(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def load_config(path, overrides=None) -> ExperimentSpec:
    raw = apply_overrides(read_raw(path), overrides)
    return spec_from_dict(raw, default_name=Path(path).stem)


def _token(value) -> str:
    value = _plain(value)
    text = value if isinstance(value, str) else yaml.safe_dump(value, default_flow_style=True).strip()
    if text.endswith("\n..."):
        text = text[:-4]
    return re.sub(r"[^A-Za-z0-9_.\-]+", "-", str(text)).strip("-") or "x"


def scenario_name(params: dict) -> str:
    if not params:
        return "base"
    return "__".join(f"{k}={_token(v)}" for k, v in params.items())


def expand(spec: ExperimentSpec, use_sweep: bool = True) -> list:
    """All (scenario, seed) cells; sweep keys keep their file order.

    With ``paired_baseline`` every non-baseline scenario gets a baseline
    twin with identical parameters, so cost-to-target can be computed.
    """
    base = config_to_dict(spec.base)
    keys = list(spec.sweep) if use_sweep else []
    grids = [spec.sweep[k] for k in keys]
    scenarios = []
    seen = set()
    for combo in itertools.product(*grids):
        params = dict(zip(keys, combo))
        variants = [params]
        mode = _coerce("mode", params.get("mode", base["mode"]))
        if spec.paired_baseline and mode is not Mode.BASELINE:
            variants.append({**params, "mode": "baseline"})
        for p in variants:
            name = scenario_name(p)
            if name not in seen:
                seen.add(name)
                scenarios.append((name, p))
    cells = []
    for name, params in scenarios:
        for seed in spec.seeds:
            raw = dict(base)
            for k, v in params.items():
                raw = _set_dotted(raw, k, v)
            raw["seed"] = seed
            cells.append(Cell(name, dict(params), int(seed), sim_config_from_dict(raw)))
    return cells


def group_key(cell_params: dict) -> tuple:
    """Scenario parameters minus ``mode``: cells sharing it are compared."""
    return tuple((k, repr(_plain(v))) for k, v in sorted(cell_params.items()) if k != "mode")
