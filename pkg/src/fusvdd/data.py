"""Modality feature files, manifests, spatial alignment and synthetic data.

Feature clip file layout (little-endian)::

    b"MAFC" | u32 version (=1) | u32 header length | header JSON | float32 payload

The header JSON carries ``modality_name``, ``video_id``, ``frame_start``,
``extractor_tag`` and ``dims`` = [T, C, H, W]. Payload is row-major.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import bilinear_resize
from .tensor import Tensor

CLIP_MAGIC = b"MAFC"
CLIP_VERSION = 1
_PRELUDE = struct.Struct("<4sII")

NORMAL, ANOMALOUS, UNKNOWN = 0, 1, -1


class DataError(Exception):
    """Base class for malformed or inconsistent input data."""


class FormatError(DataError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class FeatureClip:
    modality_name: str
    video_id: str
    frame_start: int
    maps: np.ndarray  # [T, C, H, W] float32
    extractor_tag: str = ""

    def __post_init__(self):
        self.maps = np.ascontiguousarray(self.maps, dtype="<f4")
        if self.maps.ndim != 4 or min(self.maps.shape) < 1:
            raise DataError(f"clip maps must be T×C×H×W with positive extents, got {self.maps.shape}")
        if self.frame_start < 0:
            raise DataError("frame_start must be non-negative")
        if not np.all(np.isfinite(self.maps)):
            raise DataError(f"clip {self.video_id}/{self.modality_name} has non-finite values")

    @property
    def num_frames(self) -> int:
        return self.maps.shape[0]

    def header(self) -> dict:
        return {
            "modality_name": self.modality_name,
            "video_id": self.video_id,
            "frame_start": int(self.frame_start),
            "extractor_tag": self.extractor_tag,
            "dims": [int(d) for d in self.maps.shape],
        }

    def frame(self, index: int) -> "FeatureClip":
        """Single-frame slice at absolute video frame ``index``."""
        local = index - self.frame_start
        if not 0 <= local < self.num_frames:
            raise DataError(f"frame {index} outside clip {self.video_id}/{self.modality_name}")
        return FeatureClip(self.modality_name, self.video_id, index, self.maps[local : local + 1], self.extractor_tag)


def encode_feature_clip(clip: FeatureClip) -> bytes:
    header = _header_bytes(clip.header())
    return _PRELUDE.pack(CLIP_MAGIC, CLIP_VERSION, len(header)) + header + clip.maps.tobytes()


def decode_feature_clip(buf: bytes) -> FeatureClip:
    if len(buf) < 4 or buf[:4] != CLIP_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {CLIP_MAGIC!r}")
    if len(buf) < _PRELUDE.size:
        raise TruncatedError("file ends inside the fixed prelude")
    _, version, hlen = _PRELUDE.unpack_from(buf)
    if version != CLIP_VERSION:
        raise VersionMismatchError(f"unsupported feature clip version {version}")
    start = _PRELUDE.size
    if len(buf) < start + hlen:
        raise TruncatedError(f"header claims {hlen} bytes, only {len(buf) - start} present")
    try:
        header = json.loads(buf[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header JSON: {e}") from None
    payload = buf[start + hlen :]
    if len(payload) % 4:
        raise TruncatedError(f"payload of {len(payload)} bytes is not a whole number of float32 values")
    dims = header.get("dims")
    if not isinstance(dims, list) or len(dims) != 4:
        raise FormatError(f"header dims must be [T, C, H, W], got {dims!r}")
    expected = int(np.prod(dims))
    if len(payload) // 4 != expected:
        raise LengthMismatchError(f"dims {dims} need {expected} values, payload holds {len(payload) // 4}")
    maps = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return FeatureClip(header["modality_name"], header["video_id"], header["frame_start"], maps,
                       header.get("extractor_tag", ""))


def write_feature_clip(clip: FeatureClip, path) -> None:
    Path(path).write_bytes(encode_feature_clip(clip))


def read_feature_clip(path) -> FeatureClip:
    return decode_feature_clip(Path(path).read_bytes())


def write_labels(labels, path) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels), encoding="ascii")


def read_labels(path) -> np.ndarray:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        line = line.strip()
        if line not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {line!r}")
        out.append(int(line))
    return np.array(out, dtype=np.int64)


@dataclass
class VideoEntry:
    video_id: str
    features: dict[str, str]  # modality -> feature file path
    labels: str  # label file path or "all-normal"
    frames: int


@dataclass
class DatasetManifest:
    split: str
    modalities: list[str]
    videos: list[VideoEntry]
    root: Path = field(default_factory=Path)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.root / q

    def to_json(self) -> str:
        doc = {
            "split": self.split,
            "modalities": self.modalities,
            "videos": [
                {"video_id": v.video_id, "features": v.features, "labels": v.labels, "frames": v.frames}
                for v in self.videos
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @property
    def total_frames(self) -> int:
        return sum(v.frames for v in self.videos)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        videos = [VideoEntry(v["video_id"], dict(v["features"]), v["labels"], int(v["frames"]))
                  for v in doc["videos"]]
        man = DatasetManifest(doc["split"], list(doc["modalities"]), videos, path.parent)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed manifest {path}: {e}") from None
    if man.split not in ("train", "test"):
        raise DataError(f"{path}: split must be 'train' or 'test', got {man.split!r}")
    if not man.modalities:
        raise DataError(f"{path}: manifest lists no modalities")
    for v in man.videos:
        if sorted(v.features) != sorted(man.modalities):
            raise DataError(f"{path}: video {v.video_id} has modalities {sorted(v.features)}, "
                            f"expected {sorted(man.modalities)}")
    return man


@dataclass
class AlignedSample:
    video_id: str
    frame_index: int
    maps: list[np.ndarray]  # per modality [C_k, H*, W*]
    label: int = UNKNOWN


def align_sample(clips: list[FeatureClip], size: tuple[int, int]) -> AlignedSample:
    """Resize single-frame clips of every modality to a common spatial size."""
    if not clips:
        raise DataError("align_sample needs at least one modality")
    vid, frame = clips[0].video_id, clips[0].frame_start
    maps = []
    for c in clips:
        if c.video_id != vid or c.frame_start != frame:
            raise DataError(f"modalities disagree on frame: {vid}@{frame} vs {c.video_id}@{c.frame_start}")
        maps.append(bilinear_resize(Tensor(c.maps[:1]), size).data[0])
    return AlignedSample(vid, frame, maps)


@dataclass
class FrameSet:
    """All aligned frames of a manifest, stacked per modality for batching."""

    modalities: list[str]
    maps: list[np.ndarray]  # per modality [N, C_k, H*, W*]
    video_ids: list[str]
    frame_indices: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.frame_indices)

    @property
    def channels(self) -> list[int]:
        return [m.shape[1] for m in self.maps]

    def batch(self, idx) -> list[np.ndarray]:
        return [m[idx] for m in self.maps]

    def sample(self, i: int) -> AlignedSample:
        return AlignedSample(self.video_ids[i], int(self.frame_indices[i]), [m[i] for m in self.maps],
                             int(self.labels[i]))


def common_size(manifest: DatasetManifest) -> tuple[int, int]:
    """Largest H and W over all modality files (upsampling keeps information)."""
    h = w = 1
    for v in manifest.videos:
        for p in v.features.values():
            dims = read_feature_clip(manifest.resolve(p)).maps.shape
            h, w = max(h, dims[2]), max(w, dims[3])
    return h, w


def load_frames(manifest: DatasetManifest, size: tuple[int, int] | None = None, dtype=np.float32) -> FrameSet:
    if not manifest.videos:
        raise DataError("manifest has no videos")
    size = size or common_size(manifest)
    per_mod: list[list[np.ndarray]] = [[] for _ in manifest.modalities]
    vids: list[str] = []
    frames: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for v in manifest.videos:
        clips = [read_feature_clip(manifest.resolve(v.features[m])) for m in manifest.modalities]
        starts = {c.frame_start for c in clips}
        counts = {c.num_frames for c in clips}
        if len(starts) != 1 or counts != {v.frames}:
            raise DataError(f"video {v.video_id}: modalities disagree on frame range "
                            f"(starts {sorted(starts)}, counts {sorted(counts)}, manifest {v.frames})")
        for c, name in zip(clips, manifest.modalities):
            if c.video_id != v.video_id or c.modality_name != name:
                raise DataError(f"feature file for {v.video_id}/{name} is tagged {c.video_id}/{c.modality_name}")
        for k, c in enumerate(clips):
            per_mod[k].append(bilinear_resize(Tensor(c.maps.astype(dtype)), size).data)
        if v.labels == "all-normal":
            lab = np.zeros(v.frames, dtype=np.int64)
        else:
            lab = read_labels(manifest.resolve(v.labels))
            if len(lab) != v.frames:
                raise DataError(f"video {v.video_id}: {len(lab)} labels for {v.frames} frames")
        if manifest.split == "train" and np.any(lab != NORMAL):
            raise DataError(f"training video {v.video_id} contains anomalous frames")
        start = clips[0].frame_start
        vids.extend([v.video_id] * v.frames)
        frames.append(np.arange(start, start + v.frames))
        labels.append(lab)
    return FrameSet(list(manifest.modalities), [np.concatenate(p) for p in per_mod], vids,
                    np.concatenate(frames), np.concatenate(labels))


# --- synthetic data -------------------------------------------------------------------------


@dataclass
class ModalitySpec:
    name: str
    channels: int
    height: int
    width: int


DEFAULT_MODALITIES = (
    ModalitySpec("depth", 1, 8, 8),
    ModalitySpec("flow", 2, 6, 6),
    ModalitySpec("appearance", 4, 8, 8),
)


@dataclass
class SynthConfig:
    modalities: tuple[ModalitySpec, ...] = DEFAULT_MODALITIES
    train_videos: int = 10
    test_videos: int = 5
    frames_per_video: int = 200
    anomaly_rate: float = 0.2
    anomalous_modalities: tuple[str, ...] = ("flow", "appearance")
    num_patterns: int = 3
    drift: float = 0.95
    noise: float = 0.02
    anomaly_gain: float = 1.6
    texture: float = 0.5
    energy_margin: float = 0.5

    def validate(self) -> None:
        if not self.modalities:
            raise ValueError("synthetic config needs at least one modality")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise ValueError(f"anomaly_rate must lie in [0, 1], got {self.anomaly_rate}")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate modality names {names}")
        unknown = set(self.anomalous_modalities) - set(names)
        if unknown:
            raise ValueError(f"anomalous_modalities not among modalities: {sorted(unknown)}")
        if min(self.train_videos, self.test_videos, self.frames_per_video) < 1:
            raise ValueError("video and frame counts must be positive")
        for m in self.modalities:
            if min(m.channels, m.height, m.width) < 1:
                raise ValueError(f"modality {m.name} has non-positive dimensions")


def _patterns(spec: ModalitySpec, k: int, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency spatial sinusoids, [k, C, H, W]."""
    yy, xx = np.meshgrid(np.linspace(0, 1, spec.height), np.linspace(0, 1, spec.width), indexing="ij")
    out = np.empty((k, spec.channels, spec.height, spec.width))
    for j in range(k):
        for c in range(spec.channels):
            fy, fx = rng.uniform(0.3, 1.2, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            out[j, c] = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out


def _episode_mask(frames: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """One contiguous anomalous episode whose length averages ``rate * frames``."""
    mask = np.zeros(frames, dtype=bool)
    if rate <= 0:
        return mask
    length = int(round(rate * frames * rng.uniform(0.75, 1.25)))
    length = min(max(length, 1), frames)
    start = int(rng.integers(0, frames - length + 1))
    mask[start : start + length] = True
    return mask


def _video_maps(cfg: SynthConfig, patterns: list[np.ndarray], anomalous: np.ndarray,
                rng: np.random.Generator) -> list[np.ndarray]:
    t = len(anomalous)
    rho = cfg.drift
    out = []
    for spec, pats in zip(cfg.modalities, patterns):
        coef = np.empty((t, cfg.num_patterns))
        coef[0] = rng.standard_normal(cfg.num_patterns)
        for i in range(1, t):
            coef[i] = rho * coef[i - 1] + np.sqrt(1 - rho * rho) * rng.standard_normal(cfg.num_patterns)
        maps = 1.0 + 0.3 * np.tensordot(coef, pats, axes=1)
        maps += cfg.noise * rng.standard_normal(maps.shape)
        if spec.name in cfg.anomalous_modalities and anomalous.any():
            n_bad = int(anomalous.sum())
            tex = rng.choice([-1.0, 1.0], size=(n_bad,) + maps.shape[1:])
            maps[anomalous] = cfg.anomaly_gain * maps[anomalous] + cfg.texture * tex
        out.append(np.maximum(maps, 0.0).astype(np.float32))
    return out


def frame_energy(maps: list[np.ndarray]) -> np.ndarray:
    """Mean squared value per frame across all modalities ([T, ...] arrays)."""
    tot = sum(m.reshape(len(m), -1).sum(axis=1) for m in [x * x for x in maps])
    return tot / sum(m[0].size for m in maps)


def generate_synthetic(cfg: SynthConfig, seed: int, out_dir) -> tuple[DatasetManifest, DatasetManifest]:
    """Write a labeled train/test dataset under ``out_dir``; returns both manifests.

    Everything is generated in memory first, so a failed margin check writes nothing.
    """
    cfg.validate()
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    patterns = [_patterns(m, cfg.num_patterns, rng) for m in cfg.modalities]
    names = [m.name for m in cfg.modalities]
    videos: dict[str, list[tuple[str, np.ndarray, list[np.ndarray]]]] = {}
    for split, count in (("train", cfg.train_videos), ("test", cfg.test_videos)):
        videos[split] = []
        for vi in range(count):
            vid = f"{split}_{vi:03d}"
            vrng = np.random.default_rng([seed, 0 if split == "train" else 1, vi])
            rate = cfg.anomaly_rate if split == "test" else 0.0
            mask = _episode_mask(cfg.frames_per_video, rate, vrng)
            videos[split].append((vid, mask, _video_maps(cfg, patterns, mask, vrng)))

    flags = np.concatenate([mask for _, mask, _ in videos["test"]])
    if flags.any() and not flags.all():
        e = np.concatenate([frame_energy(maps) for _, _, maps in videos["test"]])
        gap = float(e[flags].mean() - e[~flags].mean())
        if gap < cfg.energy_margin:
            raise DataError(f"synthetic anomalies too weak: energy gap {gap:.4f} < margin {cfg.energy_margin}")

    manifests = []
    for split, items in videos.items():
        (out / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for vid, mask, maps in items:
            feats = {}
            for name, arr in zip(names, maps):
                rel = f"{split}/{vid}.{name}.mafc"
                write_feature_clip(FeatureClip(name, vid, 0, arr, "synthetic"), out / rel)
                feats[name] = rel
            if split == "train":
                labels = "all-normal"
            else:
                labels = f"{split}/{vid}.labels.txt"
                write_labels(mask.astype(int), out / labels)
            entries.append(VideoEntry(vid, feats, labels, cfg.frames_per_video))
        man = DatasetManifest(split, names, entries, out)
        man.save(out / f"{split}_manifest.json")
        manifests.append(man)
    return manifests[0], manifests[1]


def energy_gap(frames: FrameSet) -> float:
    """Mean frame energy of anomalous frames minus that of normal frames."""
    e = frame_energy(frames.maps)
    return float(e[frames.labels == ANOMALOUS].mean() - e[frames.labels == NORMAL].mean())


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def is_writable_dir(path) -> bool:
    p = Path(path)
    while not p.exists():
        p = p.parent
    return p.is_dir() and os.access(p, os.W_OK)
