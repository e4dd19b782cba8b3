"""Run configuration: one flat text file of dotted keys.

Each non-blank, non-comment line is `section.key = value` with the value in
JSON syntax (numbers, strings, booleans, lists; `Infinity` is a valid
number, used for an unbounded yield stress).  Unknown keys are rejected so a
typo cannot silently fall back to a default.

Example::

    geometry.grid_n = 16
    geometry.particles = [[0.3, 0.3, 0.16], [0.75, 0.7, 0.14]]
    material.particle.M0 = Infinity
    rnn.epochs = 20000

All defaults are desk-scale; see DEFAULT_TEXT for the full schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .fem import MeshSpec, SolverConfig
from .material import MaterialParams
from .rnn import TrainConfig

__all__ = [
    "GeometryConfig",
    "PodConfig",
    "LoadingConfig",
    "RnnConfig",
    "SweepConfig",
    "RunConfig",
    "parse_config_text",
    "load_config",
    "config_to_text",
]


@dataclass(frozen=True)
class GeometryConfig:
    grid_n: int = 16
    cell_size: float = 1.0
    particles: tuple = ((0.3, 0.3, 0.16), (0.75, 0.7, 0.14), (0.2, 0.8, 0.12))

    def mesh_spec(self) -> MeshSpec:
        return MeshSpec(grid_n=self.grid_n, cell_size=self.cell_size,
                        particles=tuple(tuple(p) for p in self.particles))


@dataclass(frozen=True)
class PodConfig:
    n_b: int = 20
    stride: int = 10


@dataclass(frozen=True)
class LoadingConfig:
    n_inc: int = 1000
    n_cyclic_train: int = 12
    n_random_train: int = 20
    n_cyclic_val: int = 2
    n_random_val: int = 2
    random_step: float = 0.002
    cyclic_fill: float = 0.85
    seed: int = 2024


@dataclass(frozen=True)
class RnnConfig:
    d_in: int = 32
    d_h: int = 128
    d_out: int = 128
    slope: float = 0.01
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20000
    batch_switch_every: int = 1
    hidden_init: float = -1.0
    seed: int = 7
    clip_norm: float = 10.0
    val_every: int = 50
    stop_loss: float | None = None
    lr_decay_every: int = 0
    lr_decay_factor: float = 1.0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
            epochs=self.epochs, batch_switch_every=self.batch_switch_every,
            hidden_init=self.hidden_init, seed=self.seed,
            clip_norm=self.clip_norm, val_every=self.val_every,
            stop_loss=self.stop_loss, lr_decay_every=self.lr_decay_every,
            lr_decay_factor=self.lr_decay_factor)


@dataclass(frozen=True)
class SweepConfig:
    d_in_list: tuple = (8, 32)
    d_h_list: tuple = (16, 64)
    d_out_list: tuple = (32,)
    epochs: int = 2000


_MATRIX_DEFAULT = dict(E=1.0, nu=0.3, M0=0.01, h=0.02, m=1.05)
_PARTICLE_DEFAULT = dict(E=20.0, nu=0.3, M0=float("inf"), h=0.0, m=1.0)


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    matrix: MaterialParams = field(
        default_factory=lambda: MaterialParams(**_MATRIX_DEFAULT))
    particle: MaterialParams = field(
        default_factory=lambda: MaterialParams(**_PARTICLE_DEFAULT))
    solver: SolverConfig = field(default_factory=SolverConfig)
    pod: PodConfig = field(default_factory=PodConfig)
    loading: LoadingConfig = field(default_factory=LoadingConfig)
    rnn: RnnConfig = field(default_factory=RnnConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    data_dir: str = "data"

    def materials(self):
        return [self.matrix, self.particle]


# section name in the file -> (attribute on RunConfig, dataclass)
_SECTIONS = {
    "geometry": ("geometry", GeometryConfig),
    "material.matrix": ("matrix", MaterialParams),
    "material.particle": ("particle", MaterialParams),
    "solver": ("solver", SolverConfig),
    "pod": ("pod", PodConfig),
    "loading": ("loading", LoadingConfig),
    "rnn": ("rnn", RnnConfig),
    "sweep": ("sweep", SweepConfig),
}


def parse_config_text(text: str) -> RunConfig:
    """Build a RunConfig from dotted-key assignments layered on defaults."""
    overrides: dict[str, dict] = {name: {} for name in _SECTIONS}
    paths: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', "
                              f"got {line!r}")
        key, _, value_text = line.partition("=")
        key = key.strip()
        value_text = value_text.strip()
        try:
            value = json.loads(value_text)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"line {lineno}: cannot parse value for {key}: {exc}") from exc
        if key == "paths.data_dir":
            if not isinstance(value, str):
                raise ConfigError(f"line {lineno}: paths.data_dir must be a "
                                  f"string")
            paths["data_dir"] = value
            continue
        section, _, attr = key.rpartition(".")
        if section not in _SECTIONS or not attr:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        _, cls = _SECTIONS[section]
        known = {f.name for f in fields(cls)}
        if attr not in known:
            raise ConfigError(
                f"line {lineno}: unknown key {attr!r} in section {section!r} "
                f"(known: {', '.join(sorted(known))})")
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v
                          for v in value)
        overrides[section][attr] = value
    base = RunConfig()
    kwargs = {}
    for section, (target, _cls) in _SECTIONS.items():
        try:
            kwargs[target] = replace(getattr(base, target),
                                     **overrides[section])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {section!r}: {exc}") from exc
    if "data_dir" in paths:
        kwargs["data_dir"] = paths["data_dir"]
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc


def _to_json(value) -> str:
    if isinstance(value, tuple):
        value = [list(v) if isinstance(v, tuple) else v for v in value]
    if isinstance(value, float) and value != value:  # NaN guard
        raise ConfigError("cannot serialize NaN config value")
    return json.dumps(value)


def config_to_text(cfg: RunConfig) -> str:
    """Render the full effective configuration, one dotted key per line."""
    lines = []
    for section, (target, cls) in _SECTIONS.items():
        obj = getattr(cfg, target)
        for f in fields(cls):
            lines.append(f"{section}.{f.name} = "
                         f"{_to_json(getattr(obj, f.name))}")
    lines.append(f"paths.data_dir = {_to_json(cfg.data_dir)}")
    return "\n".join(lines) + "\n"


DEFAULT_TEXT = config_to_text(RunConfig())
