"""Run configuration: an INI file with [paths], [synth], [architecture] and [training]."""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import ModalitySpec, SynthConfig

OUTPUT_ENV = "FUSVDD_OUTPUT_DIR"

# Per-component seed offsets from the single run seed.
SEED_SYNTH, SEED_CAE_INIT, SEED_PRETRAIN, SEED_FUSION_INIT, SEED_FINETUNE = range(5)


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    output_dir: str = "runs/synthetic"
    train_manifest: str = ""
    test_manifest: str = ""
    cae_checkpoint: str = ""
    cae_history: str = ""
    model_checkpoint: str = ""
    finetune_history: str = ""
    scores: str = ""
    report: str = ""
    curves_dir: str = ""

    def resolve(self, name: str) -> Path:
        value = getattr(self, name)
        out = Path(self.output_dir)
        if value:
            return Path(value)
        return {
            "output_dir": out,
            "train_manifest": out / "data" / "train_manifest.json",
            "test_manifest": out / "data" / "test_manifest.json",
            "cae_checkpoint": out / "cae.mawt",
            "cae_history": out / "cae_loss.csv",
            "model_checkpoint": out / "model.mawt",
            "finetune_history": out / "finetune_loss.csv",
            "scores": out / "scores.csv",
            "report": out / "report.json",
            "curves_dir": out / "curves",
        }[name]


@dataclass
class ArchConfig:
    common_size: tuple[int, int] | None = None  # None: largest H and W across modalities
    fusion_depth: int = 3
    fusion_width: int = 16
    cae_widths: tuple[int, ...] = (16, 32, 32, 64)


@dataclass
class TrainConfig:
    pretrain_epochs: int = 100
    finetune_epochs: int = 75
    learning_rate: float = 1e-2
    weight_decay: float = 0.1
    lam: float = 0.1
    batch_size: int = 64
    seed: int = 0
    center_mode: str = "fixed-after-init"
    precision: str = "float32"


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    def seed_for(self, offset: int) -> int:
        return self.training.seed + offset

    def validate(self) -> None:
        t, a = self.training, self.arch
        problems = []
        if t.pretrain_epochs < 1:
            problems.append("training.pretrain_epochs must be >= 1")
        if t.finetune_epochs < 1:
            problems.append("training.finetune_epochs must be >= 1")
        if t.learning_rate < 0:
            problems.append("training.learning_rate must be >= 0")
        if t.weight_decay < 0:
            problems.append("training.weight_decay must be >= 0")
        if not t.lam > 0:
            problems.append("training.lambda must be > 0")
        if t.batch_size < 2:
            problems.append("training.batch_size must be >= 2")
        if t.seed < 0:
            problems.append("training.seed must be non-negative")
        if t.center_mode not in ("fixed-after-init", "learned"):
            problems.append("training.center_mode must be fixed-after-init or learned")
        if t.precision not in ("float32", "float64"):
            problems.append("training.precision must be float32 or float64")
        if a.fusion_depth < 1 or a.fusion_width < 1:
            problems.append("architecture.fusion_depth and fusion_width must be >= 1")
        if not a.cae_widths or min(a.cae_widths) < 1:
            problems.append("architecture.cae_widths must be positive integers")
        if a.common_size is not None and min(a.common_size) < 1:
            problems.append("architecture.common_size must be positive")
        try:
            self.synth.validate()
        except ValueError as e:
            problems.append(f"synth: {e}")
        if problems:
            raise ConfigError("; ".join(problems))


def _size(text: str) -> tuple[int, int]:
    h, _, w = text.lower().partition("x")
    return int(h), int(w)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def parse_modalities(text: str) -> tuple[ModalitySpec, ...]:
    """``"depth:1:8x8, flow:2:6x6"`` -> modality specs."""
    out = []
    for item in _names(text):
        name, ch, size = item.split(":")
        h, w = _size(size)
        out.append(ModalitySpec(name, int(ch), h, w))
    return tuple(out)


def format_modalities(specs) -> str:
    return ", ".join(f"{m.name}:{m.channels}:{m.height}x{m.width}" for m in specs)


_SYNTH_KEYS = {
    "modalities": parse_modalities,
    "train_videos": int,
    "test_videos": int,
    "frames_per_video": int,
    "anomaly_rate": float,
    "anomalous_modalities": _names,
    "num_patterns": int,
    "drift": float,
    "noise": float,
    "anomaly_gain": float,
    "texture": float,
    "energy_margin": float,
}
_ARCH_KEYS = {
    "common_size": lambda s: None if s.strip().lower() == "auto" else _size(s),
    "fusion_depth": int,
    "fusion_width": int,
    "cae_widths": _ints,
}
_TRAIN_KEYS = {
    "pretrain_epochs": int,
    "finetune_epochs": int,
    "learning_rate": float,
    "weight_decay": float,
    "lambda": float,
    "batch_size": int,
    "seed": int,
    "center_mode": str.strip,
    "precision": str.strip,
}


def _apply(section, target, keys: dict, where: str) -> None:
    for key, raw in section.items():
        if key not in keys:
            raise ConfigError(f"[{where}] unknown key {key!r}")
        try:
            value = keys[key](raw)
        except (ValueError, TypeError):
            raise ConfigError(f"[{where}] {key}: cannot parse {raw!r}") from None
        setattr(target, "lam" if key == "lambda" else key, value)


def load_config(path=None, output_dir: str | None = None, seed: int | None = None) -> RunConfig:
    """Read an INI config (or defaults when ``path`` is None) and validate it."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(p, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"{p}: {e}") from None
        for name in parser.sections():
            sec = parser[name]
            if name == "paths":
                known = {f.name for f in fields(PathsConfig)}
                for key, raw in sec.items():
                    if key not in known:
                        raise ConfigError(f"[paths] unknown key {key!r}")
                    setattr(cfg.paths, key, raw.strip())
            elif name == "synth":
                _apply(sec, cfg.synth, _SYNTH_KEYS, name)
            elif name == "architecture":
                _apply(sec, cfg.arch, _ARCH_KEYS, name)
            elif name == "training":
                _apply(sec, cfg.training, _TRAIN_KEYS, name)
            else:
                raise ConfigError(f"unknown section [{name}]")
    env_out = os.environ.get(OUTPUT_ENV)
    if output_dir is not None:
        cfg.paths.output_dir = output_dir
    elif env_out:
        cfg.paths.output_dir = env_out
    if seed is not None:
        cfg.training.seed = seed
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """INI text that reloads to an equal config."""
    s, a, t = cfg.synth, cfg.arch, cfg.training
    lines = ["[paths]"]
    lines += [f"{f.name} = {getattr(cfg.paths, f.name)}" for f in fields(PathsConfig) if getattr(cfg.paths, f.name)]
    lines += ["", "[synth]", f"modalities = {format_modalities(s.modalities)}"]
    for key in list(_SYNTH_KEYS)[1:]:
        val = getattr(s, key)
        lines.append(f"{key} = {', '.join(val) if isinstance(val, tuple) else val}")
    lines += ["", "[architecture]",
              f"common_size = {'auto' if a.common_size is None else f'{a.common_size[0]}x{a.common_size[1]}'}",
              f"fusion_depth = {a.fusion_depth}", f"fusion_width = {a.fusion_width}",
              f"cae_widths = {', '.join(map(str, a.cae_widths))}"]
    lines += ["", "[training]"]
    for key in _TRAIN_KEYS:
        lines.append(f"{key} = {getattr(t, 'lam' if key == 'lambda' else key)}")
    return "\n".join(lines) + "\n"

