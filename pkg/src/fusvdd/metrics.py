"""Frame-level ROC-AUC, per-video reports and score-curve export."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with half credit for ties; None when only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length 1-d, got {s.shape} and {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pairwise_auc(scores, labels) -> float | None:
    """O(N²) pair counting; the reference the rank formula is checked against."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    p, n = s[y == 1], s[y == 0]
    if len(p) == 0 or len(n) == 0:
        return None
    diff = p[:, None] - n[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(p) * len(n)))


@dataclass
class ScoreSeries:
    video_id: str
    frame_indices: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.frame_indices) == len(self.scores) == len(self.labels)):
            raise ValueError(f"series {self.video_id}: length mismatch")
        if np.any(np.diff(self.frame_indices) <= 0):
            raise ValueError(f"series {self.video_id}: frame indices must be strictly increasing")


@dataclass
class AucReport:
    per_video: list[tuple[str, float | None]]
    average: float | None
    overall: float | None
    undefined_videos: list[str] = field(default_factory=list)

    @property
    def all_undefined(self) -> bool:
        return self.average is None

    def to_dict(self) -> dict:
        return {
            "per_video": [{"video_id": v, "auc": a} for v, a in self.per_video],
            "average": self.average,
            "overall": self.overall,
            "undefined_videos": self.undefined_videos,
            "all_undefined": self.all_undefined,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(series: list[ScoreSeries]) -> AucReport:
    if not series:
        raise ValueError("evaluate needs at least one series")
    per_video = [(s.video_id, roc_auc(s.scores, s.labels)) for s in series]
    defined = [a for _, a in per_video if a is not None]
    average = float(np.mean(defined)) if defined else None
    overall = roc_auc(np.concatenate([s.scores for s in series]), np.concatenate([s.labels for s in series]))
    return AucReport(per_video, average, overall, [v for v, a in per_video if a is None])


def normalized(scores: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(scores)), float(np.max(scores))
    if hi == lo:
        return np.zeros(len(scores))
    return (np.asarray(scores, dtype=np.float64) - lo) / (hi - lo)


def export_curves(series: ScoreSeries, path) -> None:
    norm = normalized(series.scores)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame_index", "score", "normalized_score", "label"])
        for i, s, n, y in zip(series.frame_indices, series.scores, norm, series.labels):
            w.writerow([int(i), repr(float(s)), repr(float(n)), int(y)])


def read_curves(path, video_id: str = "") -> ScoreSeries:
    rows = list(csv.DictReader(open(path, newline="")))
    return ScoreSeries(video_id, [int(r["frame_index"]) for r in rows], [float(r["score"]) for r in rows],
                       [int(r["label"]) for r in rows])


SCORE_HEADER = ["video_id", "frame_index", "score", "label"]


class ScoreFileError(ValueError):
    pass


def write_scores(rows, path) -> None:
    """``rows``: iterable of (video_id, frame_index, score, label); label -1 means unknown."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_HEADER)
        for vid, idx, s, y in rows:
            w.writerow([vid, int(idx), repr(float(s)), int(y)])


def read_scores(path) -> list[tuple[str, int, float, int]]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise ScoreFileError(f"{path}:1: expected header {','.join(SCORE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, 2):
            try:
                vid, idx, s, y = row
                rec = (vid, int(idx), float(s), int(y))
            except ValueError:
                raise ScoreFileError(f"{path}:{lineno}: malformed row {row!r}") from None
            if rec[3] not in (-1, 0, 1) or not np.isfinite(rec[2]):
                raise ScoreFileError(f"{path}:{lineno}: malformed row {row!r}")
            out.append(rec)
    return out


def series_from_rows(rows) -> list[ScoreSeries]:
    """Group score rows by video (first-appearance order), sorted by frame index."""
    groups: dict[str, list] = {}
    for vid, idx, s, y in rows:
        groups.setdefault(vid, []).append((idx, s, y))
    out = []
    for vid, items in groups.items():
        items.sort()
        idx, s, y = zip(*items)
        out.append(ScoreSeries(vid, idx, s, y))
    return out


def write_report(report: AucReport, path) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")
