"""Experiment configuration: YAML in, validated frozen dataclasses out."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from ..anf import GATE_MODES, PLACEMENTS, ANFConfig
from ..errors import ConfigError, ParseError, UnknownKey
from ..model import ViTConfig
from ..sta import STAConfig


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    steps: int = 700
    batch_size: int = 32
    warmup_steps: int = 50
    grad_clip: float = 1.0


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    num_classes: int = 4
    image_h: int = 32
    image_w: int = 32
    channels: int = 1
    train_size: int = 2048
    test_size: int = 512
    noise: float = 0.02
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str = "runs/default"
    eval_every: int = 100
    wall_time_budget: float = 600.0
    name: str = "experiment"


# field validators: key -> (coerce, check, reason)

def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _any(_):
    return True


def _odd(x):
    return x > 0 and x % 2 == 1


_INT, _FLOAT, _BOOL, _STR = int, float, bool, str

STA_FIELDS = {
    "alpha": (_FLOAT, _nonneg, "must be >= 0"),
    "tau": (_FLOAT, _any, ""),
    "sigma": (_FLOAT, _nonneg, "must be >= 0"),
    "train_only": (_BOOL, _any, ""),
}
ANF_FIELDS = {
    "kernel_size": (_INT, _odd, "must be a positive odd integer"),
    "placement": (_STR, lambda v: v in PLACEMENTS, f"must be one of {PLACEMENTS}"),
    "apply_to_special_tokens": (_BOOL, _any, ""),
    "gate": (_STR, lambda v: v in GATE_MODES, f"must be one of {GATE_MODES}"),
}
MODEL_FIELDS = {
    "image_h": (_INT, _pos, "must be > 0"),
    "image_w": (_INT, _pos, "must be > 0"),
    "channels": (_INT, _pos, "must be > 0"),
    "patch_size": (_INT, _pos, "must be > 0"),
    "embed_dim": (_INT, _pos, "must be > 0"),
    "num_heads": (_INT, _pos, "must be > 0"),
    "num_blocks": (_INT, _pos, "must be > 0"),
    "mlp_ratio": (_FLOAT, _pos, "must be > 0"),
    "num_classes": (_INT, _pos, "must be > 0"),
    "num_registers": (_INT, _nonneg, "must be >= 0"),
}
OPT_FIELDS = {
    "lr": (_FLOAT, _pos, "must be > 0"),
    "momentum": (_FLOAT, lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "weight_decay": (_FLOAT, _nonneg, "must be >= 0"),
    "steps": (_INT, _nonneg, "must be >= 0"),
    "batch_size": (_INT, _pos, "must be > 0"),
    "warmup_steps": (_INT, _nonneg, "must be >= 0"),
    "grad_clip": (_FLOAT, _nonneg, "must be >= 0 (0 disables clipping)"),
}
DATA_FIELDS = {
    "source": (_STR, lambda v: v in ("synthetic", "idx"), "must be 'synthetic' or 'idx'"),
    "num_classes": (_INT, _pos, "must be > 0"),
    "image_h": (_INT, _pos, "must be > 0"),
    "image_w": (_INT, _pos, "must be > 0"),
    "channels": (_INT, _pos, "must be > 0"),
    "train_size": (_INT, _pos, "must be > 0"),
    "test_size": (_INT, _pos, "must be > 0"),
    "noise": (_FLOAT, _nonneg, "must be >= 0"),
    "train_images": (_STR, _any, ""),
    "train_labels": (_STR, _any, ""),
    "test_images": (_STR, _any, ""),
    "test_labels": (_STR, _any, ""),
}
TOP_FIELDS = {
    "seed": (_INT, _nonneg, "must be >= 0"),
    "output_dir": (_STR, bool, "must be non-empty"),
    "eval_every": (_INT, _pos, "must be > 0"),
    "wall_time_budget": (_FLOAT, _pos, "must be > 0"),
    "name": (_STR, bool, "must be non-empty"),
}
SECTIONS = ("model", "optimizer", "data")


def _coerce(key: str, value, kind):
    if kind is _BOOL:
        if isinstance(value, bool):
            return value
        raise ParseError(key, f"expected a boolean, got {value!r}")
    if kind is _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParseError(key, f"expected an integer, got {value!r}")
        return value
    if kind is _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(key, f"expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ParseError(key, f"expected a string, got {value!r}")
    return value


def _section(raw, spec: dict, prefix: str) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ParseError(prefix.rstrip("."), "expected a mapping")
    out = {}
    for key, value in raw.items():
        full = prefix + str(key)
        if key not in spec:
            raise UnknownKey(full)
        kind, check, reason = spec[key]
        if value is None and kind is _STR and check is _any:
            out[key] = None
            continue
        value = _coerce(full, value, kind)
        if not check(value):
            raise ParseError(full, reason)
        out[key] = value
    return out


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a raw mapping; errors name the offending dotted key."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ParseError("<root>", "expected a mapping at top level")
    extra = set(raw) - set(TOP_FIELDS) - set(SECTIONS)
    if extra:
        raise UnknownKey(sorted(extra)[0])
    top = _section({k: v for k, v in raw.items() if k in TOP_FIELDS}, TOP_FIELDS, "")
    opt = OptimizerConfig(**_section(raw.get("optimizer"), OPT_FIELDS, "optimizer."))
    data_kw = _section(raw.get("data"), DATA_FIELDS, "data.")

    model_raw = raw.get("model") or {}
    if not isinstance(model_raw, dict):
        raise ParseError("model", "expected a mapping")
    sta_raw = model_raw.get("sta")
    anf_raw = model_raw.get("anf")
    model_kw = _section(
        {k: v for k, v in model_raw.items() if k not in ("sta", "anf")}, MODEL_FIELDS, "model."
    )

    # image geometry and class count are owned by the data section
    for key in ("image_h", "image_w", "channels", "num_classes"):
        if key in model_kw and key in data_kw and model_kw[key] != data_kw[key]:
            raise ParseError(f"model.{key}", f"disagrees with data.{key}")
        if key in model_kw:
            data_kw.setdefault(key, model_kw[key])
    data = DataConfig(**data_kw)
    for key in ("image_h", "image_w", "channels", "num_classes"):
        model_kw[key] = getattr(data, key)

    if data.source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            value = getattr(data, key)
            if value is None:
                raise ParseError(f"data.{key}", "required when data.source is 'idx'")
            path = Path(value)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            if not path.exists():
                raise ParseError(f"data.{key}", f"file not found: {path}")
            data = replace(data, **{key: str(path)})

    try:
        sta = None if sta_raw is None else STAConfig(**_section(sta_raw, STA_FIELDS, "model.sta."))
        anf = None if anf_raw is None else ANFConfig(**_section(anf_raw, ANF_FIELDS, "model.anf."))
        model = ViTConfig(**model_kw, sta=sta, anf=anf, seed=top.get("seed", 0))
    except ValueError as exc:
        raise ParseError("model", str(exc)) from exc
    return ExperimentConfig(model=model, optimizer=opt, data=data, **top)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(str(path), f"cannot read: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(str(path), f"invalid YAML: {exc}") from exc
    return parse_config(raw, path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain-data echo of ``cfg``; ``parse_config`` of the echo reproduces ``cfg``."""
    d = dataclasses.asdict(cfg)
    model = d["model"]
    model.pop("seed")
    if model["sta"] is None:
        model.pop("sta")
    if model["anf"] is None:
        model.pop("anf")
    return d


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


ABLATION_VARIANTS = ("baseline", "sta", "anf", "sta_anf")


def ablation_grid(cfg: ExperimentConfig) -> dict[str, ExperimentConfig]:
    """The four mechanism toggles under one shared recipe and seed."""
    sta = cfg.model.sta or STAConfig()
    anf = cfg.model.anf or ANFConfig()
    out = {}
    for name in ABLATION_VARIANTS:
        model = replace(
            cfg.model,
            sta=sta if "sta" in name else None,
            anf=anf if "anf" in name else None,
        )
        out[name] = replace(
            cfg, model=model, output_dir=str(Path(cfg.output_dir) / name), name=f"{cfg.name}-{name}"
        )
    return out


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, seed=seed, model=replace(cfg.model, seed=seed))


__all__ = [
    "ABLATION_VARIANTS",
    "ConfigError",
    "DataConfig",
    "ExperimentConfig",
    "OptimizerConfig",
    "ablation_grid",
    "config_to_dict",
    "dump_config",
    "load_config",
    "parse_config",
    "with_seed",
]
