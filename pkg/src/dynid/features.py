"""Per-frame pairwise landmark distance features and F-frame clips.

A frame feature is the vector of Euclidean distances between every landmark
pair (i, j), i < j, in lexicographic order, divided by the identity's
neutral scale (square root of the neutral frame's bounding-box area).
126 landmarks give 7875 values per frame.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .data import (
    N_LANDMARKS,
    DatasetManifest,
    LandmarkSequence,
    VideoRecord,
    load_landmarks,
    map_container,
    write_container,
)
from .errors import DegenerateFaceError, ShapeError, TooShortError

log = logging.getLogger(__name__)

FEATURE_DIM = N_LANDMARKS * (N_LANDMARKS - 1) // 2
FEATURE_MAGIC = b"FTR1"
PAIR_I, PAIR_J = np.triu_indices(N_LANDMARKS, k=1)


@dataclass(frozen=True)
class ClipFeature:
    """Features of ``F`` consecutive frames.

    ``values`` is stored frame-major, shape (F, 7875): row ``j`` is the
    frame feature of frame ``start_frame + j``.
    """

    values: np.ndarray
    video_id: str
    start_frame: int
    driving_id: str = ""
    target_id: str = ""

    @property
    def frames(self) -> int:
        return self.values.shape[0]


def neutral_scale(neutral: np.ndarray) -> float:
    pts = np.asarray(neutral, dtype=np.float64)
    if pts.shape != (N_LANDMARKS, 2):
        raise ShapeError(f"neutral frame must be ({N_LANDMARKS}, 2), got {pts.shape}")
    width, height = pts.max(axis=0) - pts.min(axis=0)
    if width <= 0 or height <= 0:
        raise DegenerateFaceError(f"neutral bounding box is degenerate ({width} x {height})")
    return float(np.sqrt(width * height))


def frame_feature(frame: np.ndarray, scale: float) -> np.ndarray:
    pts = np.asarray(frame, dtype=np.float64)
    if pts.shape != (N_LANDMARKS, 2):
        raise ShapeError(f"frame must be ({N_LANDMARKS}, 2), got {pts.shape}")
    return (pdist(pts) / scale).astype(np.float32)


def sequence_features(frames: np.ndarray, scale: float) -> np.ndarray:
    """Frame features for a (T, 126, 2) landmark array -> (T, 7875) float32."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[1:] != (N_LANDMARKS, 2):
        raise ShapeError(f"expected (T, {N_LANDMARKS}, 2) landmarks, got {frames.shape}")
    out = np.empty((frames.shape[0], FEATURE_DIM), dtype=np.float32)
    for t in range(frames.shape[0]):
        out[t] = pdist(frames[t]) / scale
    return out


def clip_features(seq: LandmarkSequence, scale: float, F: int, stride: int = 1) -> list[ClipFeature]:
    n = len(seq)
    if n < F:
        raise TooShortError(f"{seq.video_id}: {n} frames is shorter than clip length {F}")
    feats = sequence_features(seq.frames, scale)
    return [ClipFeature(feats[t : t + F], seq.video_id, t) for t in range(0, n - F + 1, stride)]


def write_feature_cache(path: str | os.PathLike, feats: np.ndarray) -> None:
    if feats.ndim != 2 or feats.shape[1] != FEATURE_DIM:
        raise ShapeError(f"feature cache payload must be (T, {FEATURE_DIM}), got {feats.shape}")
    write_container(path, feats, FEATURE_MAGIC)


def read_feature_cache(path: str | os.PathLike) -> np.ndarray:
    arr = map_container(path, FEATURE_MAGIC)
    if arr.shape[1:] != (FEATURE_DIM, 1):
        raise ShapeError(f"{path}: feature cache has shape {arr.shape}")
    return arr[:, :, 0]


class FeatureStore:
    """Window-level feature access for the videos of one manifest.

    Landmarks are loaded lazily and kept in memory. Features are computed on
    demand, or read from an ``extract`` cache directory when one is given.
    ``norm_by`` picks whose neutral scale normalises a synthetic video:
    the identity whose face is shown (``"target"``) or the driver.
    """

    def __init__(self, manifest: DatasetManifest, cache_dir: str | os.PathLike | None = None, norm_by: str = "target"):
        if norm_by not in ("target", "driver"):
            raise ValueError(f"norm_by must be 'target' or 'driver', got {norm_by!r}")
        self.manifest = manifest
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.norm_by = norm_by
        self._landmarks: dict[str, np.ndarray] = {}
        self._cached: dict[str, np.ndarray] = {}
        self._scales: dict[str, float] = {}
        self.requested: set[str] = set()

    def scale(self, identity: str) -> float:
        if identity not in self._scales:
            self._scales[identity] = neutral_scale(self.manifest.neutral[identity])
        return self._scales[identity]

    def scale_for(self, record: VideoRecord) -> float:
        return self.scale(record.target_id if self.norm_by == "target" else record.driving_id)

    def landmarks(self, video_id: str) -> np.ndarray:
        if video_id not in self._landmarks:
            self._landmarks[video_id] = load_landmarks(self.manifest.video(video_id)).frames
        return self._landmarks[video_id]

    def _from_cache(self, video_id: str) -> np.ndarray | None:
        if self.cache_dir is None:
            return None
        if video_id not in self._cached:
            path = self.cache_dir / f"{video_id}.ftr"
            if not path.exists():
                return None
            self._cached[video_id] = read_feature_cache(path)
        return self._cached[video_id]

    def window(self, video_id: str, start: int, length: int) -> np.ndarray:
        """Features of frames [start, start + length) -> (length, 7875) float32."""
        self.requested.add(video_id)
        record = self.manifest.video(video_id)
        if start < 0 or start + length > record.frame_count:
            raise TooShortError(f"{video_id}: window [{start}, {start + length}) outside {record.frame_count} frames")
        cached = self._from_cache(video_id)
        if cached is not None:
            return np.array(cached[start : start + length])
        lm = self.landmarks(video_id)
        return sequence_features(lm[start : start + length], self.scale_for(record))

    def video_features(self, video_id: str) -> np.ndarray:
        record = self.manifest.video(video_id)
        return self.window(video_id, 0, record.frame_count)

    def clips(self, video_id: str, F: int, stride: int = 1) -> list[ClipFeature]:
        record = self.manifest.video(video_id)
        if record.frame_count < F:
            raise TooShortError(f"{video_id}: {record.frame_count} frames is shorter than clip length {F}")
        feats = self.video_features(video_id)
        return [
            ClipFeature(feats[t : t + F], video_id, t, record.driving_id, record.target_id)
            for t in range(0, record.frame_count - F + 1, stride)
        ]


def extract_cache(manifest: DatasetManifest, out_dir: str | os.PathLike, norm_by: str = "target", video_ids=None) -> int:
    """Write one FTR1 feature file per video; returns the number written."""
    out_dir = Path(out_dir)
    store = FeatureStore(manifest, norm_by=norm_by)
    ids = video_ids if video_ids is not None else [v.video_id for v in manifest.videos]
    for n, vid in enumerate(ids, 1):
        write_feature_cache(out_dir / f"{vid}.ftr", store.video_features(vid))
        store._landmarks.pop(vid, None)
        if n % 100 == 0:
            log.info("extracted %d/%d videos", n, len(ids))
    return len(ids)
