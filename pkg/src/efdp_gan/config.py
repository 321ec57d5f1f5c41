"""Training configuration: one flat, typed TOML table; unknown keys are rejected."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .accountant import DEFAULT_ORDERS, DpBudget
from .losses import LossWeights
from .models import GeneratorArch, NoiseConfig
from .sanitizer import AGGREGATE, PER_SOURCE, ClipConfig, DpNoiseConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # sampling / privacy
    gamma: float = 0.0  # 0 means 1/k
    sigma: float = 1.0
    epsilon: float = 10.0
    delta: float = 1e-5
    orders: tuple = DEFAULT_ORDERS
    # loop structure
    iterations: int = 2000
    n_dis: int = 5
    n_en: int = 1
    n_f: int = 1
    n_r: int = 1
    n_pre: int = 200
    batch: int = 32
    k: int = 10
    drop_remainder: bool = True
    # learning rates; eta_e = 0 means eta_c
    eta_d: float = 1e-4
    eta_c: float = 1e-4
    eta_g: float = 1e-4
    eta_e: float = 0.0
    # sanitizer
    c1: float = 1.0
    c2: float = 1.0
    ef_mode: str = PER_SOURCE
    # losses and injection
    sigma_noise: float = 0.1
    lambda_gp: float = 10.0
    lambda_c: float = 1.0
    gamma_recon: float = 1.0
    # architecture
    n_classes: int = 2
    image_size: int = 8
    latent_dim: int = 16
    embed_dim: int = 4
    base_channels: int = 16
    stage_channels: tuple = (16, 8)
    kernel: int = 3
    disc_hidden: int = 64
    per_subset_aux: bool = False
    # bookkeeping
    seed: int = 0
    eval_interval: int = 50

    def __post_init__(self):
        object.__setattr__(self, "orders", tuple(self.orders))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        for name in ("iterations", "batch", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("n_dis", "n_en", "n_f", "n_r", "n_pre"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("eta_d", "eta_c", "eta_g", "sigma", "c1"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.c2 >= 0:
            raise ConfigError("c2 must be >= 0")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1] (or 0 for 1/k)")
        if self.ef_mode not in (PER_SOURCE, AGGREGATE):
            raise ConfigError(f"ef_mode must be {PER_SOURCE!r} or {AGGREGATE!r}")
        try:
            self.budget, self.weights, self.noise, self.gen_arch
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def sampling_rate(self) -> float:
        return self.gamma if self.gamma > 0 else 1.0 / self.k

    @property
    def lr_encoder(self) -> float:
        return self.eta_e if self.eta_e > 0 else self.eta_c

    @property
    def clip(self) -> ClipConfig:
        return ClipConfig(self.c1, self.c2)

    @property
    def dp_noise(self) -> DpNoiseConfig:
        return DpNoiseConfig(self.sigma)

    @property
    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.sigma_noise)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_gp, self.lambda_c, self.gamma_recon)

    @property
    def budget(self) -> DpBudget:
        return DpBudget(self.epsilon, self.delta)

    @property
    def gen_arch(self) -> GeneratorArch:
        return GeneratorArch(self.latent_dim, self.n_classes, self.embed_dim, self.base_channels,
                             self.stage_channels, self.kernel, self.image_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["orders"] = list(self.orders)
        d["stage_channels"] = list(self.stage_channels)
        return d

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    def updated(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def config_from_dict(values: dict) -> TrainConfig:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    defaults = TrainConfig()
    clean = {}
    for key, val in values.items():
        ref = getattr(defaults, key)
        if isinstance(ref, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{key} must be a boolean")
        elif isinstance(ref, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{key} must be an integer")
        elif isinstance(ref, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{key} must be a number")
            val = float(val)
        elif isinstance(ref, tuple):
            if not isinstance(val, list):
                raise ConfigError(f"{key} must be an array")
        elif isinstance(ref, str) and not isinstance(val, str):
            raise ConfigError(f"{key} must be a string")
        clean[key] = val
    return TrainConfig(**clean)


def load_config(path) -> TrainConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in cfg.to_dict().items())


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
