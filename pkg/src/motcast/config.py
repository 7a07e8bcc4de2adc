"""Run configuration: one JSON document with a section per concern, validated strictly."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from ._validation import ConfigError
from .data import DEFAULT_START, SyntheticRecipe, check_six_hourly, default_recipe, parse_timestamp
from .grid import build_channel_layout, regular_grid
from .net import NetConfig
from .objectives import LossConfig
from .train import TrainConfig


@dataclass
class GridSection:
    n_lat: int = 16
    n_lon: int = 32
    depth_levels: list = field(default_factory=lambda: [0.0, 200.0])
    variables: list = field(default_factory=lambda: ["T", "S", "U", "V"])
    has_ssh: bool = True
    land_fraction: float = 0.25


@dataclass
class DataSection:
    n_steps: int = 600
    start: str = "2006-01-01T00:00:00Z"


@dataclass
class RecipeSection:
    seed: int  # required: the generator must be reproducible from the config alone
    noise: float = 0.05
    channels: list = None


@dataclass
class EvalSection:
    steps: int = 8
    max_inits: int = 40
    buoys_per_step: int = 50
    buoy_sigma: float = 0.1
    buoy_variable: str = "T"


@dataclass
class AblateSection:
    variants: list = field(default_factory=lambda: ["full", "woMoT", "woMoT_2times"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    steps: int = 8


SECTIONS = {
    "grid": GridSection,
    "data": DataSection,
    "recipe": RecipeSection,
    "net": NetConfig,
    "train": TrainConfig,
    "finetune": TrainConfig,
    "loss": LossConfig,
    "eval": EvalSection,
    "ablate": AblateSection,
}


def _build(cls, values, section):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"section '{section}': unknown keys {unknown}")
    required = [f.name for f in dataclasses.fields(cls)
                if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING]
    missing = [n for n in required if n not in values]
    if missing:
        raise ConfigError(f"section '{section}': missing required field(s) {missing}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


@dataclass
class RunConfig:
    raw: dict

    def __post_init__(self):
        if not isinstance(self.raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(self.raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}")
        self.sections = {}
        for name, cls in SECTIONS.items():
            if name in self.raw:
                self.sections[name] = _build(cls, self.raw[name], name)
        if "finetune" in self.raw and "stage" not in self.raw["finetune"]:
            self.sections["finetune"] = _build(TrainConfig, {**self.raw["finetune"], "stage": "finetune"}, "finetune")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls(raw)

    def section(self, name, required=False, **overrides):
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if name in self.sections:
            base = self.sections[name]
            return dataclasses.replace(base, **overrides) if overrides else base
        if required:
            raise ConfigError(f"config is missing the '{name}' section")
        try:
            return SECTIONS[name](**overrides)
        except TypeError as exc:
            raise ConfigError(f"section '{name}': {exc}") from exc

    def digest(self):
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    # -- builders ---------------------------------------------------------

    def grid_and_layout(self):
        g = self.section("grid")
        grid = regular_grid(g.n_lat, g.n_lon, tuple(g.depth_levels))
        layout = build_channel_layout(g.variables, len(g.depth_levels), g.has_ssh)
        return grid, layout, g.land_fraction

    def recipe(self, layout, seed=None):
        r = self.section("recipe", required=True, seed=seed)
        if r.channels is None:
            return default_recipe(layout, seed=r.seed, noise=r.noise)
        return SyntheticRecipe(r.channels, noise=r.noise, seed=r.seed)

    def start(self):
        try:
            return check_six_hourly(parse_timestamp(self.section("data").start))
        except ValueError as exc:
            raise ConfigError(f"data.start: {exc}") from exc


def toy_config():
    """Desk-scale configuration: 16x32 grid, 9 channels, two attention blocks."""
    return {
        "grid": {"n_lat": 16, "n_lon": 32, "depth_levels": [0.0, 200.0],
                 "variables": ["T", "S", "U", "V"], "has_ssh": True, "land_fraction": 0.25},
        "data": {"n_steps": 600, "start": DEFAULT_START.strftime("%Y-%m-%dT%H:%M:%SZ")},
        "recipe": {"seed": 0, "noise": 0.05},
        "net": {"latent_dim": 32, "patch": 2, "depth": 2, "window": 4, "heads": 4},
        "train": {"iterations": 2000, "peak_lr": 2e-3, "seed": 0},
        "finetune": {"iterations": 500, "peak_lr": 2e-4, "horizon": 4, "seed": 0},
        "loss": {"eps": 1e-3},
        "eval": {"steps": 8, "max_inits": 40},
        "ablate": {"seeds": [0, 1, 2, 3, 4], "steps": 8},
    }
