"""Run configuration: a flat set of knobs read from plain ``key = value`` files.

Precedence, highest first: explicit overrides (command-line flags), the
config file, ``MC_SEED`` for the seed only, then the defaults below.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from . import __version__
from .dit import ModelConfig
from .synth import DEFAULT_STYLES
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # data
    n: int = 400
    corruption_rate: float = 0.0
    heldout_fraction: float = 0.1
    styles: tuple = DEFAULT_STYLES
    prefix: str = "s"
    # curation
    rejection_cap: float = 0.3
    patch: int = 64
    # model
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 3
    mlp_mult: int = 2
    lora_rank: int = 16
    patch_size: int = 8
    image_hw: int = 64
    max_text_len: int = 8
    ref_window: int = 6
    # training
    stage0_steps: int = 2000
    stage0_lr: float = 1e-3
    steps: int = 1000
    stage3_steps: int = 1000
    lr: float = 2e-3
    batch: int = 4
    accumulation: int = 2
    hash_every: int = 100
    heldout: int = 16
    mask_policy: str = "structural"
    # inference and evaluation
    sample_steps: int = 20
    pixel_threshold: float = 8 / 255

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def train_config(self, stage: int) -> TrainConfig:
        steps = {0: self.stage0_steps, 3: self.stage3_steps}.get(stage, self.steps)
        lr = self.stage0_lr if stage == 0 else self.lr
        return TrainConfig(steps=steps, lr=lr, batch=self.batch, accumulation=self.accumulation,
                           seed=self.seed, hash_every=self.hash_every, heldout=self.heldout)

    def dumps(self, command: str = "") -> str:
        lines = [f"# instyle {__version__}", f"version = {__version__}"]
        if command:
            lines.append(f"command = {command}")
        for k, v in asdict(self).items():
            lines.append(f"{k} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def write(self, directory, command: str) -> Path:
        """Record the resolved config (and tool version) next to a command's outputs."""
        path = Path(directory) / f"{command}.config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(command))
        return path


_FIELDS = {f.name: f for f in fields(RunConfig)}
_IGNORED = {"version", "command"}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw):
    default = getattr(RunConfig(), key)
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else type(default)(raw)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _IGNORED:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve(path=None, overrides: dict | None = None, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    values = {}
    if "MC_SEED" in environ:
        try:
            values["seed"] = int(environ["MC_SEED"])
        except ValueError:
            raise ConfigError(f"MC_SEED must be an integer, got {environ['MC_SEED']!r}") from None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in _FIELDS:
            raise ConfigError(f"unknown setting {k!r}")
        values[k] = _coerce(k, v)
    cfg = replace(RunConfig(), **values)
    cfg.model_config()  # validates model geometry early
    if cfg.mask_policy not in ("none", "structural"):
        raise ConfigError(f"mask_policy must be 'none' or 'structural', got {cfg.mask_policy!r}")
    return cfg
