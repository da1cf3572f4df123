"""The five pipeline stages (synth, pretrain, finetune, score, eval) over a RunConfig."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cae import CaeConfig, CaeModel, PretrainConfig, pretrain
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (SEED_CAE_INIT, SEED_FINETUNE, SEED_FUSION_INIT, SEED_PRETRAIN, SEED_SYNTH, ConfigError,
                     RunConfig)
from .data import DataError, DatasetManifest, FrameSet, ensure_dir, generate_synthetic, is_writable_dir, \
    load_frames, load_manifest
from .fusion import FusionBlock, FusionConfig
from .metrics import AucReport, evaluate, export_curves, read_scores, series_from_rows, write_report, write_scores
from .svdd import AnomalyModel, CenterSet, SvddConfig, TrainingDiverged, calibrate_batchnorm, finetune, \
    init_centers, score_frames

log = logging.getLogger(__name__)


def _dtype(cfg: RunConfig):
    return np.float64 if cfg.training.precision == "float64" else np.float32


def _require_file(path: Path, what: str) -> None:
    if not path.is_file():
        raise DataError(f"{what} not found: {path}")


def _require_writable(*paths: Path) -> None:
    for p in paths:
        if not is_writable_dir(p.parent):
            raise ConfigError(f"output location is not writable: {p.parent}")


# --- architecture record ------------------------------------------------------------------------

@dataclass
class Arch:
    modalities: list[str]
    channels: list[int]
    common_size: tuple[int, int]
    fusion_depth: int
    fusion_width: int
    cae_widths: tuple[int, ...]

    def to_header(self) -> dict:
        return {"modalities": self.modalities, "channels": self.channels, "common_size": list(self.common_size),
                "fusion_depth": self.fusion_depth, "fusion_width": self.fusion_width,
                "cae_widths": list(self.cae_widths)}

    @classmethod
    def from_header(cls, h: dict) -> "Arch":
        try:
            return cls(list(h["modalities"]), [int(c) for c in h["channels"]], tuple(h["common_size"]),
                       int(h["fusion_depth"]), int(h["fusion_width"]), tuple(h["cae_widths"]))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"checkpoint header lacks a readable architecture record: {e}") from None

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(tuple(self.channels), self.fusion_depth, self.fusion_width)

    def cae_config(self) -> CaeConfig:
        return CaeConfig(max(self.channels), self.common_size, self.cae_widths)


def arch_from_data(cfg: RunConfig, frames: FrameSet) -> Arch:
    a = cfg.arch
    h, w = frames.maps[0].shape[2:]
    return Arch(list(frames.modalities), frames.channels, (h, w), a.fusion_depth, a.fusion_width, a.cae_widths)


def arch_diff(config_arch: Arch, ckpt_arch: Arch) -> list[str]:
    """Human-readable field differences; empty when they agree."""
    out = []
    for key, mine in config_arch.to_header().items():
        theirs = ckpt_arch.to_header()[key]
        if mine != theirs:
            out.append(f"{key}: checkpoint {theirs} vs config {mine}")
    return out


def shape_diff(expected: dict[str, np.ndarray], found: dict[str, np.ndarray]) -> list[str]:
    out = []
    for name in sorted(set(expected) | set(found)):
        a = expected.get(name)
        b = found.get(name)
        if a is None:
            out.append(f"{name}: unexpected in checkpoint {tuple(b.shape)}")
        elif b is None:
            out.append(f"{name}: missing from checkpoint, model needs {tuple(a.shape)}")
        elif a.shape != b.shape:
            out.append(f"{name}: checkpoint {tuple(b.shape)} vs model {tuple(a.shape)}")
    return out


def _check_against_config(cfg: RunConfig, arch: Arch, path: Path) -> None:
    a = cfg.arch
    wanted = Arch(arch.modalities, arch.channels, a.common_size or arch.common_size, a.fusion_depth,
                  a.fusion_width, a.cae_widths)
    diff = arch_diff(wanted, arch)
    if diff:
        raise ConfigError(f"architecture mismatch between {path} and config:\n  " + "\n  ".join(diff))


def _check_modalities(arch: Arch, manifest: DatasetManifest, path: Path) -> DatasetManifest:
    """Same modality set as the model, reordered to the model's order."""
    if sorted(manifest.modalities) != sorted(arch.modalities):
        raise DataError(f"modality mismatch: model trained on {arch.modalities}, "
                        f"{path} provides {manifest.modalities}")
    return DatasetManifest(manifest.split, list(arch.modalities), manifest.videos, manifest.root)


def _load_state(model, expected: dict[str, np.ndarray], state: dict[str, np.ndarray], path: Path) -> None:
    diff = shape_diff(expected, state)
    if diff:
        raise ConfigError(f"architecture mismatch between {path} and config:\n  " + "\n  ".join(diff))
    model.load(state)


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --- stages ---------------------------------------------------------------------------------------

def run_synth(cfg: RunConfig) -> tuple[Path, Path]:
    train_path = cfg.paths.resolve("train_manifest")
    test_path = cfg.paths.resolve("test_manifest")
    out_dir = train_path.parent
    if train_path.name != "train_manifest.json" or test_path != out_dir / "test_manifest.json":
        raise ConfigError("synth writes train_manifest.json and test_manifest.json into one directory; "
                          f"got {train_path} and {test_path}")
    _require_writable(train_path)
    ensure_dir(out_dir)
    generate_synthetic(cfg.synth, cfg.seed_for(SEED_SYNTH), out_dir)
    return train_path, test_path


def _train_frames(cfg: RunConfig) -> FrameSet:
    path = cfg.paths.resolve("train_manifest")
    _require_file(path, "train manifest")
    manifest = load_manifest(path)
    if manifest.split != "train":
        raise DataError(f"{path}: expected a train split, got {manifest.split!r}")
    return load_frames(manifest, cfg.arch.common_size, _dtype(cfg))


def pretrain_inputs(frames: FrameSet, fusion: FusionBlock) -> np.ndarray:
    """Depth-0 central maps under the initial fusion weights."""
    return fusion.fuse_inputs(frames.maps)[1].data


def run_pretrain(cfg: RunConfig) -> tuple[Path, list[float]]:
    ckpt = cfg.paths.resolve("cae_checkpoint")
    hist = cfg.paths.resolve("cae_history")
    _require_writable(ckpt, hist)
    frames = _train_frames(cfg)
    arch = arch_from_data(cfg, frames)
    dtype = _dtype(cfg)
    t = cfg.training
    fusion = FusionBlock(arch.fusion_config(), np.random.default_rng(cfg.seed_for(SEED_FUSION_INIT)), dtype)
    cae = CaeModel(arch.cae_config(), np.random.default_rng(cfg.seed_for(SEED_CAE_INIT)), dtype)
    pcfg = PretrainConfig(t.pretrain_epochs, t.batch_size, t.learning_rate, t.weight_decay,
                          cfg.seed_for(SEED_PRETRAIN))
    history = pretrain(pretrain_inputs(frames, fusion), pcfg, cae)
    ensure_dir(ckpt.parent)
    header = {"kind": "cae", "arch": arch.to_header(), "epoch": len(history), "seed": t.seed}
    save_checkpoint(ckpt, header, cae.state())
    ensure_dir(hist.parent)
    _write_rows(hist, ["epoch", "loss"], [(i, repr(v)) for i, v in enumerate(history, 1)])
    return ckpt, history


def load_cae(path: Path, dtype=np.float32) -> tuple[CaeModel, Arch]:
    _require_file(path, "CAE checkpoint")
    header, state = load_checkpoint(path)
    if header.get("kind") != "cae":
        raise DataError(f"{path} is not a CAE checkpoint (kind {header.get('kind')!r})")
    arch = Arch.from_header(header["arch"] if "arch" in header else {})
    cae = CaeModel(arch.cae_config(), np.random.default_rng(0), dtype)
    _load_state(cae, cae.state(), state, path)
    cae.set_training(False)
    return cae, arch


def _finetune_history_rows(history):
    for r in history:
        yield [r.epoch, repr(r.central)] + [repr(b) for b in r.branches] + [repr(r.reg), repr(r.total)]


def _save_model(path: Path, model: AnomalyModel, arch: Arch, cfg: RunConfig, epoch: int, diverged: bool) -> None:
    header = {"kind": "anomaly", "arch": arch.to_header(), "epoch": epoch, "seed": cfg.training.seed,
              "center_mode": model.config.center_mode, "diverged": diverged}
    save_checkpoint(path, header, model.state())


def run_finetune(cfg: RunConfig, on_epoch=None) -> tuple[Path, list]:
    ckpt_in = cfg.paths.resolve("cae_checkpoint")
    ckpt_out = cfg.paths.resolve("model_checkpoint")
    hist = cfg.paths.resolve("finetune_history")
    _require_writable(ckpt_out, hist)
    dtype = _dtype(cfg)
    cae, arch = load_cae(ckpt_in, dtype)
    _check_against_config(cfg, arch, ckpt_in)
    train_path = cfg.paths.resolve("train_manifest")
    _require_file(train_path, "train manifest")
    manifest = _check_modalities(arch, load_manifest(train_path), train_path)
    frames = load_frames(manifest, arch.common_size, dtype)
    if frames.channels != arch.channels:
        raise DataError(f"{train_path}: channels {frames.channels} differ from checkpoint {arch.channels}")
    t = cfg.training
    fusion = FusionBlock(arch.fusion_config(), np.random.default_rng(cfg.seed_for(SEED_FUSION_INIT)), dtype)
    scfg = SvddConfig(t.lam, t.finetune_epochs, t.learning_rate, t.batch_size, t.center_mode,
                      cfg.seed_for(SEED_FINETUNE))
    model = AnomalyModel.from_pretrained(fusion, cae, scfg)
    calibrate_batchnorm(model, frames, t.batch_size)
    init_centers(model, frames)
    names = [f"branch_{m}" for m in arch.modalities]
    columns = ["epoch", "central"] + names + ["regularization", "total"]
    ensure_dir(ckpt_out.parent)
    ensure_dir(hist.parent)
    try:
        history = finetune(model, frames, on_epoch)
    except TrainingDiverged as e:
        _save_model(ckpt_out, model, arch, cfg, len(e.history), diverged=True)
        _write_rows(hist, columns, _finetune_history_rows(e.history))
        raise
    _save_model(ckpt_out, model, arch, cfg, len(history), diverged=False)
    _write_rows(hist, columns, _finetune_history_rows(history))
    return ckpt_out, history


def load_model(path: Path, dtype=np.float32) -> tuple[AnomalyModel, Arch]:
    _require_file(path, "model checkpoint")
    header, state = load_checkpoint(path)
    if header.get("kind") != "anomaly":
        raise DataError(f"{path} is not an anomaly-model checkpoint (kind {header.get('kind')!r})")
    arch = Arch.from_header(header.get("arch", {}))
    cae = CaeModel(arch.cae_config(), np.random.default_rng(0), dtype)
    fusion = FusionBlock(arch.fusion_config(), np.random.default_rng(0), dtype)
    model = AnomalyModel(fusion, cae.encoder, SvddConfig(center_mode=header.get("center_mode", "fixed-after-init")))
    if "center.central" not in state:
        raise DataError(f"{path}: checkpoint has no hypersphere centers")
    model.centers = CenterSet.from_state(state, len(arch.channels))
    model_state = {k: v for k, v in state.items() if not k.startswith("center.")}
    expected = {k: v for k, v in model.state().items() if not k.startswith("center.")}
    diff = shape_diff(expected, model_state)
    if diff:
        raise DataError(f"{path}: tensors disagree with its own architecture record:\n  " + "\n  ".join(diff))
    fusion.load(model_state, "fusion")
    cae.encoder.load(model_state, "encoder")
    model.centers.central.data = model.centers.central.data.astype(dtype)
    for c in model.centers.branches:
        c.data = c.data.astype(dtype)
    model.set_training(False)
    return model, arch


def run_score(cfg: RunConfig, manifest_path: Path | None = None) -> Path:
    ckpt = cfg.paths.resolve("model_checkpoint")
    out = cfg.paths.resolve("scores")
    manifest_path = manifest_path or cfg.paths.resolve("test_manifest")
    _require_writable(out)
    _require_file(manifest_path, "manifest")
    model, arch = load_model(ckpt, _dtype(cfg))
    manifest = _check_modalities(arch, load_manifest(manifest_path), manifest_path)
    frames = load_frames(manifest, arch.common_size, _dtype(cfg))
    if frames.channels != arch.channels:
        raise DataError(f"{manifest_path}: channels {frames.channels} differ from model {arch.channels}")
    scores = score_frames(model, frames)
    rows = sorted(zip(frames.video_ids, frames.frame_indices.tolist(), scores.tolist(), frames.labels.tolist()),
                  key=lambda r: (r[0], r[1]))
    ensure_dir(out.parent)
    write_scores(rows, out)
    return out


def run_eval(cfg: RunConfig, scores_path: Path | None = None) -> AucReport:
    scores_path = scores_path or cfg.paths.resolve("scores")
    report_path = cfg.paths.resolve("report")
    curves = cfg.paths.resolve("curves_dir")
    _require_writable(report_path, curves)
    _require_file(scores_path, "scores file")
    rows = read_scores(scores_path)
    if not rows:
        raise DataError(f"{scores_path}: no score rows")
    unlabeled = sum(1 for r in rows if r[3] == -1)
    if unlabeled:
        raise DataError(f"{scores_path}: no ground truth for {unlabeled} rows (label -1)")
    series = series_from_rows(rows)
    report = evaluate(series)
    ensure_dir(report_path.parent)
    write_report(report, report_path)
    ensure_dir(curves)
    for s in series:
        export_curves(s, curves / f"{s.video_id}.csv")
    return report
