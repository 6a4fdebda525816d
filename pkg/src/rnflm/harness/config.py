"""Run configuration: defaults, ``key=value`` files and environment overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from ..errors import ConfigError

OBJECTIVES = ("vae", "vae-nf", "wae", "wae-nf", "wae-rnf")
ENV_PREFIX = "RNFLM_"


@dataclass
class RunConfig:
    objective: str = "wae-rnf"
    n_flows: int = 3
    n_clusters: int = 20
    kernel: str = "inverse-multiquadratic"
    rbf_beta: float = 10.0
    latent: int = 32
    hidden: int = 200
    embed: int = 200
    mlp_hidden: int = 200
    dropout: float = 0.2
    injection: str = "init-state+concat"
    epochs: int = 48
    steps_per_epoch: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    clip: float = 5.0
    alpha_end: float = 0.8
    ramp_epochs: int = 21
    lambda_base: float = 10.0
    kl_schedule: str = "anneal"
    kl_weight: float = 1.0
    pretrain_fraction: float = 0.25
    cluster_path: str = ""
    seed: int = 0
    data_seed: int = 0
    data_dir: str = ""
    synthetic_size: int = 2000
    vocab_cap: int = 20000
    eval_batch_size: int = 64
    mi_samples: int = 512
    mi_batch: int = 64
    mmd_eval_max: int = 512
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.kernel not in ("inverse-multiquadratic", "gaussian"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.kl_schedule not in ("anneal", "constant"):
            raise ConfigError(f"kl_schedule must be 'anneal' or 'constant', got {self.kl_schedule!r}")
        if self.injection not in ("init-state", "init-state+concat"):
            raise ConfigError(f"unknown injection mode {self.injection!r}")
        for name in ("latent", "hidden", "embed", "mlp_hidden", "batch_size", "n_clusters", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.steps_per_epoch < 0 or self.n_flows < 0:
            raise ConfigError("epochs, steps_per_epoch and n_flows must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 <= self.pretrain_fraction < 1.0:
            raise ConfigError("pretrain_fraction must lie in [0, 1)")
        if self.objective == "wae-rnf" and not self.cluster_path and self.pretrain_fraction <= 0.0:
            raise ConfigError("wae-rnf needs cluster_path or a pre-training phase (pretrain_fraction > 0)")
        if self.objective in ("vae-nf", "wae-nf", "wae-rnf") and self.n_flows < 1:
            raise ConfigError(f"{self.objective} needs at least one flow")

    @property
    def uses_flows(self) -> bool:
        return self.objective in ("vae-nf", "wae-nf", "wae-rnf")

    @property
    def pretrain_epochs(self) -> int:
        if self.objective != "wae-rnf" or self.cluster_path:
            return 0
        return max(1, int(round(self.pretrain_fraction * self.epochs)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, kind, raw: str):
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return raw


def _field_types() -> dict[str, object]:
    return {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str) -> dict[str, object]:
    types = _field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, types[key], value)
    return out


def env_overrides(environ=None) -> dict[str, object]:
    environ = os.environ if environ is None else environ
    types = _field_types()
    out = {}
    for key, kind in types.items():
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            out[key] = _coerce(key, kind, raw)
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    """Defaults < config file < ``RNFLM_*`` environment < explicit overrides."""
    values: dict[str, object] = {}
    if path:
        try:
            values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    values.update(env_overrides(environ))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)
