"""Experiment configuration read from INI-style files with named presets."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import schedule as S
from .mcformer import MCFormerConfig
from .train import TrainConfig

SECTIONS = ("model", "schedule", "degradation", "optimizer", "io")

PRESETS: dict[str, dict[str, dict[str, str]]] = {
    # desk scale: what the toy runs and the test-suite use
    "desk": {
        "model": {"profile": "toy"},
        "schedule": {"T": "50", "kind": "scaled"},
        "degradation": {"family": "iso", "scale": "2", "noise_sigma": "0", "hr_patch": "32"},
        "optimizer": {"batch_size": "4", "total_iters": "2000", "lr": "2e-3",
                      "lr_halving_interval": "1000", "seed": "0"},
        "io": {"checkpoint_every": "500", "workers": "0", "flip": "false", "corpus": "synthetic"},
    },
    # full protocol: not runnable in reasonable time on a CPU, shipped for completeness
    "full": {
        "model": {"profile": "full"},
        "schedule": {"T": "1000", "kind": "linear", "beta_start": "1e-4", "beta_end": "0.02"},
        "degradation": {"family": "iso", "scale": "4", "noise_sigma": "0", "hr_patch": "256"},
        "optimizer": {"batch_size": "8", "total_iters": "500000", "lr": "2e-4",
                      "lr_halving_interval": "100000", "seed": "0"},
        "io": {"checkpoint_every": "10000", "workers": "2", "flip": "true", "corpus": "synthetic"},
    },
}

_MODEL_LISTS = ("blocks_per_level", "channels_per_level", "heads_per_level")
_MODEL_INTS = ("levels", "refinement_blocks", "kernel_code_dim", "time_embed_dim",
               "estimator_channels", "image_channels")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: MCFormerConfig = field(default_factory=MCFormerConfig.toy)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule_kind: str = "scaled"
    T: int = 50
    beta_start: float = S.DEFAULT_BETA[0]
    beta_end: float = S.DEFAULT_BETA[1]
    corpus: str = "synthetic"
    raw: dict = field(default_factory=dict, repr=False)

    def schedule(self) -> S.DiffusionSchedule:
        if self.schedule_kind == "scaled":
            return S.scaled_linear_schedule(self.T)
        return S.linear_schedule(self.T, self.beta_start, self.beta_end)


def _parser(preset: str) -> configparser.ConfigParser:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_dict(PRESETS[preset])
    return cp


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(" ", "").split(",") if v]


def _model(sec: configparser.SectionProxy) -> MCFormerConfig:
    profile = sec.get("profile", "toy")
    if profile not in ("toy", "full"):
        raise ConfigError(f"model profile must be toy or full, got {profile!r}")
    base = (MCFormerConfig.toy() if profile == "toy" else MCFormerConfig()).as_dict()
    for key in _MODEL_INTS:
        if key in sec:
            base[key] = sec.getint(key)
    for key in _MODEL_LISTS:
        if key in sec:
            base[key] = _ints(sec[key])
    if "ffn_expansion" in sec:
        base["ffn_expansion"] = sec.getfloat("ffn_expansion")
    return MCFormerConfig(**base)


def from_parser(cp: configparser.ConfigParser) -> ExperimentConfig:
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}")
    try:
        sch, deg, opt, io = cp["schedule"], cp["degradation"], cp["optimizer"], cp["io"]
        kind = sch.get("kind", "scaled")
        if kind not in ("scaled", "linear"):
            raise ConfigError(f"schedule kind must be scaled or linear, got {kind!r}")
        train = TrainConfig(
            batch_size=opt.getint("batch_size"), hr_patch=deg.getint("hr_patch"),
            total_iters=opt.getint("total_iters"), lr=opt.getfloat("lr"),
            lr_halving_interval=opt.getint("lr_halving_interval"), scale=deg.getint("scale"),
            family=deg.get("family"), noise_sigma=deg.getfloat("noise_sigma"),
            seed=opt.getint("seed"), checkpoint_every=io.getint("checkpoint_every"),
            flip=io.getboolean("flip"), workers=io.getint("workers"))
        return ExperimentConfig(
            model=_model(cp["model"]), train=train, schedule_kind=kind, T=sch.getint("T"),
            beta_start=sch.getfloat("beta_start", S.DEFAULT_BETA[0]),
            beta_end=sch.getfloat("beta_end", S.DEFAULT_BETA[1]),
            corpus=io.get("corpus", "synthetic"),
            raw={s: dict(cp[s]) for s in SECTIONS})
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"missing or malformed entry: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load(path: Optional[str] = None, preset: str = "desk",
         overrides: Optional[dict[str, dict[str, str]]] = None) -> ExperimentConfig:
    """Preset values, then the file (if any), then ``overrides`` win."""
    cp = _parser(preset)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            cp.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from None
    for section, values in (overrides or {}).items():
        for k, v in values.items():
            if v is not None:
                cp[section][k] = str(v)
    return from_parser(cp)


def dump(cfg: ExperimentConfig, path) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_dict(cfg.raw)
    with Path(path).open("w", encoding="utf-8") as fh:
        cp.write(fh)
