"""Run configuration: a flat ``section.key = value`` text file (TOML dotted keys)
mapped onto typed dataclasses, with range checks and strict key matching."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .data import SynthConfig
from .losses import LossWeights
from .model import ModelConfig


class ValidationError(ValueError):
    """Configuration rejected before any work starts."""


@dataclass
class ModelSection:
    embed_dim: int = 96
    depth: int = 4
    num_heads: int = 6
    hdb_heads: int = 6
    img_height: int = 64
    img_width: int = 32
    patch: int = 8
    stride: int = 8
    sie_lambda: float = 3.0
    mlp_ratio: int = 4
    init_std: float = 0.02


@dataclass
class LossSection:
    alpha: float = 0.1
    beta: float = 3.0


@dataclass
class OptimSection:
    base_lr: float = 0.05  # 0 -> 0.008 * batch / 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    min_lr_ratio: float = 0.01
    epochs: int = 120
    eval_every: int = 0  # epochs; 0 -> only at the end
    dtype: str = "float32"


@dataclass
class SamplerSection:
    P: int = 4
    K: int = 4


@dataclass
class AblationSection:
    enable_hdb: bool = True
    enable_adc: bool = True
    enable_cdc: bool = True
    hdb_residual: bool = False
    hdb_ffn: bool = False
    hdb_cls: bool = True
    neck: bool = False


@dataclass
class RunSection:
    seed: int = 0
    data_root: str = "data/synth"
    output_dir: str = "runs/default"
    augment: bool = True
    init_ckpt: str = ""  # optional container whose matching tensors seed the model


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    run: RunSection = field(default_factory=RunSection)
    synth: SynthConfig = field(default_factory=SynthConfig)

    # ------------------------------------------------------------ derived views

    @property
    def batch_size(self) -> int:
        return self.sampler.P * self.sampler.K

    @property
    def lr(self) -> float:
        return self.optim.base_lr if self.optim.base_lr > 0 else 0.008 * self.batch_size / 64

    @property
    def np_dtype(self):
        import numpy as np

        return np.float32 if self.optim.dtype == "float32" else np.float64

    def loss_weights(self) -> LossWeights:
        a = self.ablation
        return LossWeights(
            alpha=self.loss.alpha if a.enable_adc else 0.0,
            beta=self.loss.beta if (a.enable_cdc and a.enable_hdb) else 0.0,
        )

    def model_config(self, num_cameras: int) -> ModelConfig:
        m, a = self.model, self.ablation
        return ModelConfig(
            embed_dim=m.embed_dim, depth=m.depth, num_heads=m.num_heads, hdb_heads=m.hdb_heads,
            img_height=m.img_height, img_width=m.img_width, patch=m.patch, stride=m.stride,
            num_cameras=num_cameras, sie_lambda=m.sie_lambda, mlp_ratio=m.mlp_ratio,
            enable_hdb=a.enable_hdb, hdb_residual=a.hdb_residual, hdb_ffn=a.hdb_ffn,
            hdb_cls=a.hdb_cls, init_std=m.init_std,
        )

    # ------------------------------------------------------------ flat view

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                out[f"{sec.name}.{f.name}"] = getattr(obj, f.name)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_flat().items())

    def replace(self, overrides: dict[str, Any]) -> RunConfig:
        flat = self.to_flat()
        for k, v in overrides.items():
            if k not in flat:
                raise ValidationError(f"unknown config key {k!r}")
            flat[k] = v
        return from_flat(flat)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, target_type: type):
    if target_type is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"{key}: expected true/false, got {value!r}")
        return value
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{key}: expected an integer, got {value!r}")
        return value
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ValidationError(f"{key}: expected a string, got {value!r}")
        return value
    raise ValidationError(f"{key}: unsupported type {target_type}")


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def from_flat(flat: dict[str, Any]) -> RunConfig:
    base = RunConfig()
    sections: dict[str, dict[str, Any]] = {}
    for key, value in flat.items():
        sec, _, name = key.partition(".")
        if not name or not hasattr(base, sec):
            raise ValidationError(f"unknown config key {key!r}")
        fields_ = {f.name: f for f in dataclasses.fields(getattr(base, sec))}
        if name not in fields_:
            raise ValidationError(f"unknown config key {key!r}")
        ftype = fields_[name].type
        ftype = _TYPES.get(ftype, ftype) if isinstance(ftype, str) else ftype
        sections.setdefault(sec, {})[name] = _coerce(key, value, ftype)
    kwargs = {}
    for f in dataclasses.fields(base):
        try:
            kwargs[f.name] = dataclasses.replace(getattr(base, f.name), **sections.get(f.name, {}))
        except ValueError as e:
            raise ValidationError(f"{f.name}: {e}") from e
    cfg = RunConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    m, o, s = cfg.model, cfg.optim, cfg.sampler
    checks = [
        (m.embed_dim >= 2, "model.embed_dim must be >= 2"),
        (m.depth >= 1, "model.depth must be >= 1"),
        (m.num_heads >= 1 and m.embed_dim % m.num_heads == 0, "model.num_heads must divide model.embed_dim"),
        (m.hdb_heads >= 1 and m.embed_dim % m.hdb_heads == 0, "model.hdb_heads must divide model.embed_dim"),
        (m.patch >= 1 and m.patch <= min(m.img_height, m.img_width), "model.patch must fit the image"),
        (1 <= m.stride <= m.patch, "model.stride must lie in [1, patch]"),
        (m.sie_lambda >= 0, "model.sie_lambda must be >= 0"),
        (m.mlp_ratio >= 1, "model.mlp_ratio must be >= 1"),
        (m.init_std > 0, "model.init_std must be > 0"),
        (cfg.loss.alpha >= 0 and cfg.loss.beta >= 0, "loss weights must be >= 0"),
        (o.base_lr >= 0, "optim.base_lr must be >= 0"),
        (0 <= o.momentum < 1, "optim.momentum must lie in [0, 1)"),
        (o.weight_decay >= 0, "optim.weight_decay must be >= 0"),
        (0 <= o.warmup_frac < 1, "optim.warmup_frac must lie in [0, 1)"),
        (0 <= o.min_lr_ratio <= 1, "optim.min_lr_ratio must lie in [0, 1]"),
        (o.epochs >= 1, "optim.epochs must be >= 1"),
        (o.eval_every >= 0, "optim.eval_every must be >= 0"),
        (o.dtype in ("float32", "float64"), "optim.dtype must be float32 or float64"),
        (s.P >= 2 and s.K >= 1, "sampler needs P >= 2 and K >= 1"),
        (cfg.synth.height == m.img_height and cfg.synth.width == m.img_width,
         "synth image size must match model.img_height/img_width"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ValidationError(msg)


def parse_value(text: str):
    """A single TOML value, falling back to a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    flat: dict[str, Any] = RunConfig().to_flat()
    if path is not None:
        try:
            text = Path(path).read_text()
            parsed = tomli.loads(text)
        except (OSError, tomli.TOMLDecodeError) as e:
            raise ValidationError(f"cannot read config {path}: {e}") from e
        for k, v in _flatten(parsed).items():
            if k not in flat:
                raise ValidationError(f"unknown config key {k!r}")
            flat[k] = v
    for k, v in (overrides or {}).items():
        if k not in flat:
            raise ValidationError(f"unknown config key {k!r}")
        flat[k] = v
    return from_flat(flat)


def config_from_text(text: str) -> RunConfig:
    return from_flat(_flatten(tomli.loads(text)))
