"""Run configuration: YAML file, environment overrides and command-line flags.

Precedence, lowest to highest: defaults, config file, ``CORRSTAB_*``
environment variables, explicit command-line flags. Environment variables
address nested keys with a double underscore, e.g.
``CORRSTAB_TRAIN__EPOCHS=20`` or ``CORRSTAB_SEED=3``.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError

from .correlation import CorrConfig
from .errors import ConfigError
from .md import DatagenConfig, MDConfig, load_preset
from .stability import StabilityConfig
from .training import LossWeights, ModelConfig, SchedulerConfig, check_coefficients

log = logging.getLogger(__name__)

ENV_PREFIX = "CORRSTAB_"


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: str = "lj-mixture"
    compositions: list = Field(default_factory=lambda: ["1:2"])
    n_frames: int = Field(24, ge=0)
    format: str = "xyz-extended"
    generation: DatagenConfig = DatagenConfig()


class TrainSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(500, ge=0)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-3, gt=0)
    val_every: int = Field(1, ge=1)
    n_val: int = Field(4, ge=1)
    corr_enabled: bool = True
    normalize_loss: bool = True


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    out: str = "out"
    data: DataSection = DataSection()
    model: ModelConfig = ModelConfig()
    corr: CorrConfig = CorrConfig()
    scheduler: SchedulerConfig = SchedulerConfig()
    weights: LossWeights = LossWeights()
    train: TrainSection = TrainSection()
    md: MDConfig = MDConfig()
    stability: StabilityConfig = StabilityConfig()

    def cross_check(self):
        """Model cutoff must fit the preset cell; warn on an oversized c_max."""
        try:
            pot = load_preset(self.data.preset)
        except Exception:  # a custom dataset may not use a preset
            pot = None
        if pot is not None and pot.box is not None and self.model.r_max > pot.box / 2:
            raise ConfigError(
                f"model.r_max={self.model.r_max} exceeds half the preset cell ({pot.box / 2})"
            )
        if self.train.corr_enabled:
            check_coefficients(self.scheduler, self.weights)
        return self


def _valid_keys(model_cls, prefix="") -> list:
    keys = []
    for name, info in model_cls.model_fields.items():
        ann = info.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            keys.extend(_valid_keys(ann, f"{prefix}{name}."))
        else:
            keys.append(f"{prefix}{name}")
    return keys


def valid_keys() -> list:
    return _valid_keys(RunConfig)


def _leaf_index() -> dict:
    """Leaf name -> list of dotted paths carrying it."""
    index = {}
    for key in valid_keys():
        index.setdefault(key.rsplit(".", 1)[-1], []).append(key)
    return index


def _expand_flat(tree: dict) -> dict:
    """Resolve dotted keys and unambiguous bare leaf names to nested sections.

    ``c_max: 0.1`` and ``scheduler.c_max: 0.1`` both mean
    ``scheduler: {c_max: 0.1}``. A bare name that lives in several
    sections (``seed``, ``T_set``...) is only accepted at the top level
    when the top level itself has it.
    """
    fields = RunConfig.model_fields
    out = {}
    index = None
    for key, value in tree.items():
        key = str(key)
        if key in fields:
            path = [key]
        elif "." in key:
            path = key.split(".")
        else:
            index = index if index is not None else _leaf_index()
            matches = index.get(key, [])
            if len(matches) > 1:
                raise ConfigError(
                    f"config key {key!r} is ambiguous; use one of: {', '.join(matches)}"
                )
            path = matches[0].split(".") if matches else [key]
        if len(path) == 1:
            if isinstance(value, dict) and isinstance(out.get(key), dict):
                out[key] = _merge(out[key], value)
            else:
                out[key] = value
        else:
            _set_path(out, path, value)
    return out


def _set_path(tree: dict, path: list, value):
    node = tree
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config key {'.'.join(path)} conflicts with a scalar value")
    node[path[-1]] = value


def _check_keys(tree: dict, model_cls, prefix=""):
    fields = model_cls.model_fields
    for key, value in tree.items():
        if key not in fields:
            raise ConfigError(
                f"unknown config key {prefix}{key!r}; valid keys: {', '.join(valid_keys())}"
            )
        ann = fields[key].annotation
        if isinstance(value, dict) and isinstance(ann, type) and issubclass(ann, BaseModel):
            _check_keys(value, ann, f"{prefix}{key}.")


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    tree = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        # let YAML decide the scalar type ("3" -> 3, "true" -> True, "[a, b]" -> list)
        _set_path(tree, path, yaml.safe_load(raw) if raw != "" else "")
    # stay case-preserving for keys like T_set
    return _restore_case(tree, RunConfig)


def _restore_case(tree: dict, model_cls) -> dict:
    fields = {k.lower(): k for k in model_cls.model_fields}
    out = {}
    for key, value in tree.items():
        real = fields.get(key, key)
        ann = model_cls.model_fields[real].annotation if real in model_cls.model_fields else None
        if isinstance(value, dict) and isinstance(ann, type) and issubclass(ann, BaseModel):
            value = _restore_case(value, ann)
        out[real] = value
    return out


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: Optional[dict] = None, environ=None) -> RunConfig:
    """Defaults <- YAML file <- environment <- ``overrides`` (nested dict)."""
    tree = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping of config keys")
        tree = _expand_flat(loaded)
    tree = _merge(tree, env_overrides(environ))
    tree = _merge(tree, overrides or {})
    _check_keys(tree, RunConfig)
    try:
        return RunConfig.model_validate(tree)
    except PydanticError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from exc


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
