from __future__ import annotations

import configparser
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ContractViolation


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvSection(_Section):
    kind: str | None = None
    scale: typing.Literal["desk", "full"] = "desk"
    steps: int = 120
    dt: float = 1.0 / 60.0
    n_sims: int = 40


class ModelSection(_Section):
    hidden: int = 150
    edge_radius: float = 0.08
    history: int = 4
    mp_rounds: int = 1
    vp_window: int = 4
    vp_hidden: int = 256
    vp_channels: list[int] = [32, 64, 128, 256]
    grid_size: int = 32
    gru_layers: int = 2
    inference_window: int = 10
    rollout_train_steps: int = 2


class TrainSection(_Section):
    vp_lr: float = 1e-4
    vp_batch: int = 50
    vp_iterations: int = 2700
    dp_lr: float = 1e-5
    dp_batch: int = 4
    dp_epochs: int = 10
    dp_window_stride: int = 1
    inf_lr: float = 1e-5
    inf_batch: int = 2
    inf_epochs: int = 2
    inf_window_stride: int = 1
    proposal_noise: float = 0.01
    flip_rate: float = 0.02
    proposals: typing.Literal["corrupt", "visual"] = "corrupt"
    log_every: int = 100


class EvalSection(_Section):
    horizons: list[int] = [1, 5, 10, 20]
    t_min: int = 1
    t_max: int = 20
    window: int = 10
    start_frame: int = 0
    rigid_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    baseline_draws: int = 10000
    proposal_noise: float = 0.01
    flip_rate: float = 0.02


SECTIONS: dict[str, type[_Section]] = {
    "env": EnvSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class PathsConfig:
    # Read env vars at instance creation time (not at import time)
    data_dir: str = field(default_factory=lambda: os.getenv("VGPL_DATA_DIR", "data"))
    ckpt_dir: str = field(default_factory=lambda: os.getenv("VGPL_CKPT_DIR", "checkpoints"))


@dataclass
class AppConfig:
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsConfig = field(default_factory=PathsConfig)
    log_level: str = field(default_factory=lambda: os.getenv("LOG_LEVEL", "INFO"))

    def override(self, section: str, **values) -> "AppConfig":
        """Apply non-None flag values on top of ``section`` (flag > file > default)."""
        updates = {k: v for k, v in values.items() if v is not None}
        if not updates:
            return self
        current: _Section = getattr(self, section)
        setattr(self, section, _validate(section, {**current.model_dump(), **updates}))
        return self

    def echo(self) -> dict:
        return {name: getattr(self, name).model_dump() for name in SECTIONS}


def _validate(section: str, values: dict) -> _Section:
    try:
        return SECTIONS[section].model_validate(values)
    except ValidationError as e:
        raise ContractViolation(f"invalid [{section}] config: {e}") from e


def _is_list_field(model: type[_Section], key: str) -> bool:
    info = model.model_fields.get(key)
    return info is not None and typing.get_origin(info.annotation) is list


def load_config(path: str | Path | None = None) -> AppConfig:
    cfg = AppConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    try:
        found = parser.read(path)
    except configparser.Error as e:
        raise ContractViolation(f"malformed config file {path}: {e}") from e
    if not found:
        raise ContractViolation(f"config file not found: {path}")
    for section in parser.sections():
        if section not in SECTIONS:
            raise ContractViolation(f"unknown config section [{section}] in {path}")
        model = SECTIONS[section]
        values: dict = {}
        for key, raw in parser.items(section):
            if _is_list_field(model, key):
                values[key] = [v.strip() for v in raw.split(",") if v.strip()]
            else:
                values[key] = raw
        current = getattr(cfg, section).model_dump()
        setattr(cfg, section, _validate(section, {**current, **values}))
    return cfg


def _sha1(text: str) -> str:
    return hashlib.sha1(text.encode("utf-8")).hexdigest()


def config_hash(*sections: _Section) -> str:
    payload = [type(s).__name__ for s in sections], [s.model_dump() for s in sections]
    return _sha1(json.dumps(payload, sort_keys=True))
