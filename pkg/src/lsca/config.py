"""Run configuration: built-in profiles, flat ``key = value`` files and overrides.

Keys are namespaced by section (``model.d_model``, ``train.epochs``, ...).
Values are parsed according to the type of the field's default.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

from .data import SynthConfig
from .fusion import FusionConfig
from .model import ModelConfig
from .train import TrainConfig

PROFILES = ("toy", "paper")
SEED_ENV = "LSCA_SEED"

# fields that are not user-settable: derived from vocab files or the global seed
_DERIVED = {
    "model": {"man_vocab_size", "eng_vocab_size"},
    "synth": {"seed"},
    "pretrain": {"seed", "lam"},
    "train": {"seed"},
}
_SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "pretrain": TrainConfig, "train": TrainConfig, "fusion": FusionConfig}


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    profile: str
    seed: int
    synth: SynthConfig
    model: ModelConfig
    pretrain: TrainConfig
    train: TrainConfig
    fusion: FusionConfig
    lambdas: Tuple[float, ...]
    alphas: Tuple[float, ...]
    probe_utts: int = 3

    def flat(self) -> Dict[str, object]:
        out: Dict[str, object] = {"profile": self.profile, "seed": self.seed}
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if f.name not in _DERIVED.get(section, ()):
                    out[f"{section}.{f.name}"] = getattr(obj, f.name)
        out["experiment.lambdas"] = self.lambdas
        out["experiment.alphas"] = self.alphas
        out["experiment.probe_utts"] = self.probe_utts
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.flat().items()))


_TOY = {
    "model.num_layers": 2,
    "model.d_model": 32,
    "model.d_ffn": 64,
    "model.num_heads": 2,
    "model.feat_dim": 16,
    "synth.noise": 0.6,
    "synth.frames_per_token": (8, 12),
    "synth.n_pretrain": 16000,
    "synth.n_train": 8000,
    "pretrain.epochs": 4,
    "pretrain.warmup_steps": 200,
    "pretrain.lr_scale": 2.0,
    "pretrain.max_frames_per_batch": 2000,
    "pretrain.average_last_n": 3,
    "train.epochs": 6,
    "train.warmup_steps": 200,
    "train.lr_scale": 2.0,
    "train.max_frames_per_batch": 2000,
    "train.average_last_n": 3,
    "train.lam": 0.0,
    "experiment.lambdas": (0.0, 0.7, 1.0),
    "fusion.lsm_only_unk": "zero",
    "experiment.alphas": (0.0, 0.3, 0.5, 0.7, 1.0),
}

_PAPER = {
    "model.num_layers": 12,
    "model.d_model": 256,
    "model.d_ffn": 2048,
    "model.num_heads": 4,
    "model.feat_dim": 80,
    "synth.feat_dim": 80,
    "pretrain.epochs": 40,
    "pretrain.warmup_steps": 250000,
    "pretrain.max_frames_per_batch": 10000,
    "train.epochs": 40,
    "train.warmup_steps": 2500,
    "train.max_frames_per_batch": 10000,
    "experiment.lambdas": (0.0, 0.3, 0.5, 0.7, 1.0),
    "fusion.lsm_only_unk": "zero",
    "experiment.alphas": (0.0, 0.3, 0.5, 0.7, 1.0),
}
for _s in ("pretrain", "train"):
    _PAPER.update({f"{_s}.freq_masks": 2, f"{_s}.freq_width": 10, f"{_s}.time_masks": 3, f"{_s}.time_width": 50})
    _PAPER.update({f"{_s}.average_last_n": 5, f"{_s}.dropout": 0.1})


def profile_values(name: str) -> Dict[str, object]:
    if name not in PROFILES:
        raise ConfigFileError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    return dict(_TOY if name == "toy" else _PAPER)


def format_value(v: object) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(raw: str, like: object, key: str) -> object:
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigFileError(f"bad value for {key}: {raw!r}") from None
    return raw


def _defaults() -> Dict[str, object]:
    out: Dict[str, object] = {"profile": "toy", "seed": 0}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if f.name not in _DERIVED.get(section, ()):
                out[f"{section}.{f.name}"] = f.default
    out["experiment.lambdas"] = (0.0,)
    out["experiment.alphas"] = (0.0,)
    out["experiment.probe_utts"] = 3
    return out


KNOWN_KEYS = tuple(sorted(_defaults()))


def parse_value(key: str, raw: str) -> object:
    defaults = _defaults()
    if key not in defaults:
        raise ConfigFileError(f"unknown config key {key!r}")
    like = defaults[key]
    if isinstance(like, tuple):
        items = [s for s in raw.split(",") if s.strip()]
        elem = like[0] if like else 0.0
        return tuple(_parse_scalar(s, elem, key) for s in items)
    return _parse_scalar(raw, like, key)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, object]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, raw)
        except ConfigFileError as e:
            raise ConfigFileError(f"{source}:{lineno}: {e}") from None
    return out


def read_config_file(path: Union[str, Path]) -> Dict[str, object]:
    p = Path(path)
    if not p.is_file():
        raise ConfigFileError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"), str(p))


def _build(cls, section: str, values: Mapping[str, object], **extra):
    kw = {f.name: values[f"{section}.{f.name}"] for f in fields(cls) if f"{section}.{f.name}" in values}
    kw.update(extra)
    return cls(**kw)


def resolve(
    profile: Optional[str] = None,
    file_values: Optional[Mapping[str, object]] = None,
    overrides: Optional[Mapping[str, object]] = None,
    env: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Merge defaults < profile < config file < explicit overrides.

    The seed falls back to ``LSCA_SEED`` when neither the file nor the
    overrides set one.
    """
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    env = os.environ if env is None else env
    name = overrides.get("profile") or profile or file_values.get("profile") or "toy"
    values = _defaults()
    values.update(profile_values(str(name)))
    values.update(file_values)
    values.update(overrides)
    values["profile"] = name
    if "seed" not in file_values and "seed" not in overrides and env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigFileError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    seed = int(values["seed"])
    try:
        synth = _build(SynthConfig, "synth", values, seed=seed)
        model = _build(ModelConfig, "model", values)
        pretrain = _build(TrainConfig, "pretrain", values, seed=seed, lam=0.0)
        train = _build(TrainConfig, "train", values, seed=seed)
        fusion = _build(FusionConfig, "fusion", values)
    except TypeError as e:
        raise ConfigFileError(str(e)) from None
    lambdas = tuple(float(x) for x in values["experiment.lambdas"])
    alphas = tuple(float(x) for x in values["experiment.alphas"])
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ConfigFileError(f"lambda out of range: {lam}")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ConfigFileError(f"alpha out of range: {a}")
    return RunConfig(
        profile=str(name),
        seed=seed,
        synth=synth,
        model=model,
        pretrain=pretrain,
        train=train,
        fusion=fusion,
        lambdas=lambdas,
        alphas=alphas,
        probe_utts=int(values["experiment.probe_utts"]),
    )


def write_run_config(out_dir: Union[str, Path], cfg: RunConfig, name: str = "run_config.txt") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path
