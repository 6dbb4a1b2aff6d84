"""Identities, video records, manifests and the binary landmark container.

Manifest (JSON, paths relative to the manifest's directory)::

    {
      "format": "dynid-manifest/1",
      "identities": ["id000", ...],
      "split": {"id000": "train", ...},
      "neutral_frames": {"id000": {"path": "neutral/id000.lmk", "frame": 0}},
      "videos": [
        {"video_id": "...", "driving_id": "...", "target_id": "...",
         "kind": "original" | "self" | "cross",
         "landmark_path": "...", "frame_count": 200, "fps": 30.0}
      ]
    }

Landmark container: little-endian, 4 magic bytes, three uint32 dimensions
(frames, landmarks, coordinate dims) and a float32 payload in that order.
Landmark indices 0..125 are opaque; nothing downstream gives them meaning.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    EmptySplitError,
    FormatIOError,
    NonFiniteError,
    ParseError,
    ShapeError,
    ValidationError,
)

N_LANDMARKS = 126
COORD_DIMS = 2
LANDMARK_MAGIC = b"LMK1"
MANIFEST_FORMAT = "dynid-manifest/1"
_HEADER = struct.Struct("<4sIII")


class VideoKind(str, Enum):
    ORIGINAL = "original"
    SELF = "self"
    CROSS = "cross"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    driving_id: str
    target_id: str
    kind: VideoKind
    landmark_path: Path
    frame_count: int
    fps: float

    @property
    def synthetic(self) -> bool:
        return self.kind is not VideoKind.ORIGINAL


@dataclass(frozen=True)
class LandmarkSequence:
    """Landmarks of one video, shape (frames, 126, 2), float32."""

    video_id: str
    frames: np.ndarray

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    identities: tuple[str, ...]
    videos: tuple[VideoRecord, ...]
    neutral: dict[str, np.ndarray]
    split: dict[str, Split]
    dropped_cross_set: int = 0
    _by_id: dict[str, VideoRecord] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {v.video_id: v for v in self.videos})

    def video(self, video_id: str) -> VideoRecord:
        return self._by_id[video_id]

    def identities_in(self, split: Split) -> list[str]:
        return [i for i in self.identities if self.split[i] is split]

    def select(
        self,
        kind: VideoKind | None = None,
        driving_id: str | None = None,
        target_id: str | None = None,
    ) -> list[VideoRecord]:
        out = []
        for v in self.videos:
            if kind is not None and v.kind is not kind:
                continue
            if driving_id is not None and v.driving_id != driving_id:
                continue
            if target_id is not None and v.target_id != target_id:
                continue
            out.append(v)
        return out

    def digest(self, split: Split = Split.TRAIN) -> str:
        """Hash of the identities and video ids assigned to ``split``."""
        ids = sorted(self.identities_in(split))
        members = set(ids)
        vids = sorted(v.video_id for v in self.videos if v.driving_id in members)
        h = hashlib.sha256()
        h.update(json.dumps([ids, vids]).encode())
        return h.hexdigest()[:16]


# -- landmark container -----------------------------------------------------


def write_container(path: str | os.PathLike, array: np.ndarray, magic: bytes) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"container payload must be 2-D or 3-D, got {arr.shape}")
    header = _HEADER.pack(magic, *arr.shape)
    atomic_write_bytes(path, header + arr.tobytes())


def read_header(path: str | os.PathLike, magic: bytes) -> tuple[int, int, int]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read(_HEADER.size)
    except OSError as exc:
        raise FormatIOError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise ParseError(f"{path}: truncated header")
    got, n0, n1, n2 = _HEADER.unpack(raw)
    if got != magic:
        raise ParseError(f"{path}: bad magic {got!r}, expected {magic!r}")
    return n0, n1, n2


def read_container(path: str | os.PathLike, magic: bytes) -> np.ndarray:
    n0, n1, n2 = read_header(path, magic)
    try:
        payload = np.fromfile(path, dtype="<f4", offset=_HEADER.size)
    except OSError as exc:
        raise FormatIOError(f"cannot read {path}: {exc}") from exc
    if payload.size != n0 * n1 * n2:
        raise ParseError(f"{path}: payload has {payload.size} values, header says {n0 * n1 * n2}")
    return payload.reshape(n0, n1, n2).astype(np.float32, copy=False)


def map_container(path: str | os.PathLike, magic: bytes) -> np.ndarray:
    """Read-only memory map of a container payload."""
    n0, n1, n2 = read_header(path, magic)
    return np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(n0, n1, n2))


def write_landmarks(path: str | os.PathLike, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    _check_landmark_array(frames, str(path))
    write_container(path, frames, LANDMARK_MAGIC)


def read_landmarks(path: str | os.PathLike) -> np.ndarray:
    arr = read_container(path, LANDMARK_MAGIC)
    _check_landmark_array(arr, str(path))
    return arr


def _check_landmark_array(arr: np.ndarray, where: str) -> None:
    if arr.ndim != 3 or arr.shape[2] != COORD_DIMS:
        raise ShapeError(f"{where}: expected (frames, {N_LANDMARKS}, 2) landmarks, got {arr.shape}")
    if arr.shape[1] != N_LANDMARKS:
        raise ShapeError(f"{where}: frames have {arr.shape[1]} landmarks, expected {N_LANDMARKS}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.argwhere(~np.isfinite(arr))[0][0])
        raise NonFiniteError(f"{where}: non-finite coordinate in frame {bad}")


def load_landmarks(record: VideoRecord) -> LandmarkSequence:
    frames = read_landmarks(record.landmark_path)
    if frames.shape[0] != record.frame_count:
        raise ShapeError(
            f"{record.video_id}: file has {frames.shape[0]} frames, manifest says {record.frame_count}"
        )
    frames.setflags(write=False)
    return LandmarkSequence(record.video_id, frames)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- manifest -----------------------------------------------------------------


def bbox_area(points: np.ndarray) -> float:
    p = np.asarray(points, dtype=np.float64)
    span = p.max(axis=0) - p.min(axis=0)
    return float(span[0] * span[1])


def validate_manifest(manifest: DatasetManifest, check_files: bool = True) -> None:
    seen = set()
    for ident in manifest.identities:
        if not ident:
            raise ValidationError("empty identity id")
        if ident in seen:
            raise ValidationError(f"duplicate identity {ident!r}")
        seen.add(ident)
    for ident in manifest.identities:
        if ident not in manifest.split:
            raise ValidationError(f"identity {ident!r} has no split label")
    video_ids = set()
    for v in manifest.videos:
        if v.video_id in video_ids:
            raise ValidationError(f"duplicate video id {v.video_id!r}")
        video_ids.add(v.video_id)
        for role, ident in (("driving", v.driving_id), ("target", v.target_id)):
            if ident not in seen:
                raise ValidationError(f"{v.video_id}: unknown {role} identity {ident!r}")
            if ident not in manifest.neutral:
                raise ValidationError(f"missing neutral frame for identity {ident!r}")
        if v.kind in (VideoKind.ORIGINAL, VideoKind.SELF) and v.driving_id != v.target_id:
            raise ValidationError(f"{v.video_id}: {v.kind.value} video must have driving_id == target_id")
        if v.kind is VideoKind.CROSS and v.driving_id == v.target_id:
            raise ValidationError(f"{v.video_id}: cross-reenactment with driving_id == target_id")
        if v.synthetic and manifest.split[v.driving_id] is not manifest.split[v.target_id]:
            raise ValidationError(
                f"{v.video_id}: cross-set reenactment ({v.driving_id} in "
                f"{manifest.split[v.driving_id].value}, {v.target_id} in {manifest.split[v.target_id].value})"
            )
        if v.frame_count <= 0:
            raise ValidationError(f"{v.video_id}: frame_count must be positive")
        if not v.fps > 0:
            raise ValidationError(f"{v.video_id}: fps must be positive")
        if check_files and not v.landmark_path.exists():
            raise ValidationError(f"{v.video_id}: landmark file {v.landmark_path} does not exist")
    for ident, frame in manifest.neutral.items():
        if frame.shape != (N_LANDMARKS, COORD_DIMS):
            raise ShapeError(f"neutral frame of {ident!r} has shape {frame.shape}")
        if not bbox_area(frame) > 0:
            raise ValidationError(f"neutral frame of {ident!r} has a degenerate bounding box")


def _parse_video(entry: dict, root: Path) -> VideoRecord:
    try:
        return VideoRecord(
            video_id=str(entry["video_id"]),
            driving_id=str(entry["driving_id"]),
            target_id=str(entry["target_id"]),
            kind=VideoKind(entry["kind"]),
            landmark_path=root / entry["landmark_path"],
            frame_count=int(entry["frame_count"]),
            fps=float(entry["fps"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"malformed video entry {entry!r}: {exc}") from exc


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatIOError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"{path}: expected format {MANIFEST_FORMAT!r}")
    root = path.parent
    try:
        identities = tuple(str(i) for i in doc["identities"])
        split = {str(k): Split(v) for k, v in doc["split"].items()}
        neutral_refs = doc["neutral_frames"]
        videos = tuple(_parse_video(e, root) for e in doc["videos"])
    except (KeyError, ValueError, TypeError, AttributeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc

    neutral = {}
    for ident, ref in neutral_refs.items():
        try:
            frames = read_landmarks(root / ref["path"])
            frame = frames[int(ref.get("frame", 0))]
        except (KeyError, IndexError, TypeError) as exc:
            raise ParseError(f"{path}: bad neutral frame reference for {ident!r}: {exc}") from exc
        frame.setflags(write=False)
        neutral[str(ident)] = frame

    manifest = DatasetManifest(root, identities, videos, neutral, split)
    validate_manifest(manifest)
    return manifest


def manifest_to_dict(manifest: DatasetManifest, neutral_paths: dict[str, str] | None = None) -> dict:
    root = manifest.root
    neutral_paths = neutral_paths or {i: f"neutral/{i}.lmk" for i in manifest.neutral}
    return {
        "format": MANIFEST_FORMAT,
        "identities": list(manifest.identities),
        "split": {i: manifest.split[i].value for i in manifest.identities},
        "neutral_frames": {i: {"path": neutral_paths[i], "frame": 0} for i in manifest.identities if i in manifest.neutral},
        "videos": [
            {
                "video_id": v.video_id,
                "driving_id": v.driving_id,
                "target_id": v.target_id,
                "kind": v.kind.value,
                "landmark_path": Path(os.path.relpath(v.landmark_path, root)).as_posix(),
                "frame_count": v.frame_count,
                "fps": v.fps,
            }
            for v in manifest.videos
        ],
    }


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike | None = None, write_neutral: bool = True) -> Path:
    """Write ``manifest.json`` (and neutral frame files) under ``manifest.root``."""
    path = Path(path) if path is not None else manifest.root / "manifest.json"
    if write_neutral:
        for ident, frame in manifest.neutral.items():
            write_landmarks(manifest.root / "neutral" / f"{ident}.lmk", frame[None])
    text = json.dumps(manifest_to_dict(manifest), indent=1)
    atomic_write_text(path, text + "\n")
    return path


# -- identity splits ----------------------------------------------------------


def split_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` identities."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0, atol=1e-6):
        raise ValidationError(f"split fractions must be three non-negative reals summing to 1, got {fractions}")
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    rem = n - int(sizes.sum())
    order = sorted(range(3), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[:rem]:
        sizes[k] += 1
    for k in range(3):
        if fr[k] > 0 and sizes[k] == 0:
            raise EmptySplitError(f"fraction {fr[k]} for split {list(Split)[k].value} yields no identities")
    return [int(s) for s in sizes]


def assign_splits(identities: Sequence[str], fractions: Sequence[float], seed: int) -> dict[str, Split]:
    sizes = split_sizes(len(identities), fractions)
    order = np.random.default_rng(seed).permutation(len(identities))
    labels = [Split.TRAIN] * sizes[0] + [Split.VAL] * sizes[1] + [Split.TEST] * sizes[2]
    return {identities[int(idx)]: labels[rank] for rank, idx in enumerate(order)}


def split_identities(manifest: DatasetManifest, fractions: Sequence[float], seed: int) -> DatasetManifest:
    """Reassign splits by identity; reenactments that would cross splits are dropped."""
    split = assign_splits(list(manifest.identities), fractions, seed)
    kept = tuple(v for v in manifest.videos if not v.synthetic or split[v.driving_id] is split[v.target_id])
    dropped = len(manifest.videos) - len(kept)
    return replace(manifest, videos=kept, split=split, dropped_cross_set=dropped)

