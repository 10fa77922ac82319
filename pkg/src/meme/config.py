"""Run configuration: nested dataclasses, a YAML file, env overrides and flags.

Precedence is flags > environment (``MEME_<SECTION>__<KEY>``) > file >
defaults. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .envbench import REGISTRY
from .intrinsic import IntrinsicConfig
from .learner import LossConfig, OptimizerConfig, ReturnsConfig
from .learning import LOSS_MODES
from .mixture import ConfigError
from .network import NetConfig
from .replay import ReplayConfig
from .returns import ESTIMATORS

ENV_PREFIX = "MEME_"


@dataclass
class EnvConfig:
    name: str = "deep_sea"
    size: int = 8
    seed: int = 0
    scale: float = 1.0

    def params(self) -> dict:
        return {"n": self.size, "seed": self.seed, "scale": self.scale}


@dataclass
class MixtureConfig:
    n: int = 8
    beta_im: float = 0.1
    gamma_max: float = 0.9997
    gamma_min: float = 0.97


@dataclass
class BanditConfig:
    gamma: float = 0.999
    beta: float = 1.0
    epsilon: float = 0.5


@dataclass
class RuntimeConfig:
    frames: int = 100_000
    seed: int = 0
    mode: str = "threaded"
    n_actors: int = 4
    n_eval: int = 1
    batch_size: int = 16
    eval_every: int = 2000
    log_every: int = 50
    publish_every: int = 1
    checkpoint_every: int = 0
    out_dir: str = ""
    stop_on_solve: bool = False
    solve_fraction: float = 0.99
    epsilon_base: float = 0.4
    epsilon_alpha: float = 7.0
    actor_epsilons: typing.Optional[typing.List[float]] = None
    torch_threads: int = 1
    drain_seconds: float = 5.0


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    mixtures: MixtureConfig = field(default_factory=MixtureConfig)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    returns: ReturnsConfig = field(default_factory=ReturnsConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig = field(default_factory=NetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    intrinsic: IntrinsicConfig = field(default_factory=IntrinsicConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _key(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


def _fields(section) -> dict:
    return {_key(f): f for f in dataclasses.fields(section)}


def _coerce(value, tp, where: str):
    if isinstance(value, str) and tp is not str:
        value = yaml.safe_load(value)
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        tp = args[0]
        origin = typing.get_origin(tp)
    try:
        if tp is bool:
            if isinstance(value, bool):
                return value
            raise TypeError
        if tp is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if tp is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if tp is str:
            return str(value)
        if origin in (list, typing.List):
            return [float(v) for v in value]
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"{where}: cannot use {value!r} as {tp}")


def apply(cfg: RunConfig, section: str, key: str, value) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    sec = getattr(cfg, section)
    fields = _fields(sec)
    if key not in fields:
        raise ConfigError(f"unknown config key {section}.{key}")
    f = fields[key]
    tp = typing.get_type_hints(type(sec))[f.name]
    setattr(sec, f.name, _coerce(value, tp, f"{section}.{key}"))


def from_dict(data: dict | None, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for section, values in (data or {}).items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key, value in values.items():
            apply(cfg, section, key, value)
    return cfg


def to_dict(cfg: RunConfig) -> dict:
    return {s: {_key(f): getattr(getattr(cfg, s), f.name) for f in dataclasses.fields(getattr(cfg, s))}
            for s in SECTIONS}


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def loads(text: str) -> RunConfig:
    data = yaml.safe_load(text)
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config file must be a mapping of sections")
    return from_dict(data)


def env_overrides(environ=None) -> list[tuple[str, str, str]]:
    environ = os.environ if environ is None else environ
    out = []
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, key = name[len(ENV_PREFIX):].split("__", 1)
        out.append((section.lower(), key.lower(), value))
    return sorted(out)


def load(path: str | Path | None = None, overrides: list[str] | None = None,
         environ=None) -> RunConfig:
    """File, then environment, then ``section.key=value`` overrides."""
    if path and not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = loads(Path(path).read_text(encoding="utf-8")) if path else RunConfig()
    for section, key, value in env_overrides(environ):
        apply(cfg, section, key, value)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        apply(cfg, section.strip(), key.strip(), value.strip())
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.env.name not in REGISTRY:
        raise ConfigError(f"unknown env {cfg.env.name!r}; choose from {list(REGISTRY)}")
    if cfg.returns.estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {cfg.returns.estimator!r}")
    if cfg.loss.mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {cfg.loss.mode!r}")
    if cfg.loss.bootstrap not in ("online", "target"):
        raise ConfigError("loss.bootstrap must be online or target")
    if cfg.runtime.mode not in ("sync", "threaded"):
        raise ConfigError("runtime.mode must be sync or threaded")
    checks = [
        (0.0 <= cfg.loss.eta <= 1.0, "loss.eta must lie in [0, 1]"),
        (0.0 <= cfg.returns.lam <= 1.0, "returns.lambda must lie in [0, 1]"),
        (cfg.returns.kappa >= 0, "returns.kappa must be >= 0"),
        (cfg.loss.tau > 0, "loss.tau must be > 0"),
        (0.0 <= cfg.loss.w_max <= 1.0, "loss.w_max must lie in [0, 1]"),
        (cfg.mixtures.n >= 2, "mixtures.n must be >= 2"),
        (cfg.mixtures.beta_im >= 0, "mixtures.beta_im must be >= 0"),
        (0 < cfg.mixtures.gamma_min <= cfg.mixtures.gamma_max < 1, "need 0 < gamma_min <= gamma_max < 1"),
        (cfg.runtime.frames >= 0, "runtime.frames must be >= 0"),
        (cfg.runtime.n_actors >= 1, "runtime.n_actors must be >= 1"),
        (cfg.runtime.n_eval >= 0, "runtime.n_eval must be >= 0"),
        (cfg.runtime.batch_size >= 1, "runtime.batch_size must be >= 1"),
        (cfg.runtime.publish_every >= 1 and cfg.runtime.log_every >= 1, "periods must be >= 1"),
        (cfg.replay.shards >= 1 and cfg.replay.capacity >= cfg.replay.shards, "bad replay shape"),
        (1 <= cfg.replay.period <= cfg.replay.trace_length, "need 1 <= replay.period <= trace_length"),
        (cfg.replay.trace_length >= 2, "replay.trace_length must be >= 2"),
        (cfg.replay.spi > 0, "replay.spi must be > 0"),
        (0.0 <= cfg.net.drop_rate <= 1.0, "net.drop_rate must lie in [0, 1]"),
        (cfg.net.t_target >= 1, "net.t_target must be >= 1"),
        (len(cfg.optimizer.betas) == 2 and all(0 <= b < 1 for b in cfg.optimizer.betas),
         "optimizer.betas needs two values in [0, 1)"),
        (cfg.intrinsic.embed_dim == cfg.net.ap_embed, "intrinsic.embed_dim must equal net.ap_embed"),
        (cfg.runtime.actor_epsilons is None or len(cfg.runtime.actor_epsilons) == cfg.runtime.n_actors,
         "runtime.actor_epsilons needs one value per actor"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
