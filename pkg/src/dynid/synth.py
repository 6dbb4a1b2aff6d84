"""Procedural talking-head landmark data with known driving/target identities.

Each identity has a rest face shape and a motion signature. Motion is a sum
of six fixed displacement fields (brows, eyes, mouth corners, jaw, nod,
shake), each switched on by Poisson events with raised-cosine envelopes,
plus continuous head motion from a small bank of sinusoids. Reenactment
adds a driver's displacements (rescaled to the target's face size) to the
target's rest shape, so the driver alone decides how the face moves.

Displacement fields are defined on a shared template in face-size units;
identities differ in shape, not in what a primitive does to the template.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    N_LANDMARKS,
    DatasetManifest,
    Split,
    VideoKind,
    VideoRecord,
    assign_splits,
    save_manifest,
    validate_manifest,
    write_landmarks,
)
from .errors import MarginError, ValidationError
from .features import neutral_scale

log = logging.getLogger(__name__)

PRIMITIVES = ("brows", "eyes", "mouth_corners", "jaw", "nod", "shake")
HEAD_FREQS_HZ = (0.25, 0.5, 1.0, 2.0)
HEAD_CHANNELS = ("nod", "shake")

# sampling ranges, also used to normalise signatures for the margin test
RATE = (0.2, 1.5)  # events per second
AMPLITUDE = (0.3, 1.5)
DURATION = (0.3, 1.2)  # seconds
DURATION_SPREAD = (0.1, 0.3)  # std as a fraction of the mean
ASYMMETRY = (-0.6, 0.6)
HEAD_WEIGHT = (0.0, 0.4)

# landmark index groups of the template
JAW = np.arange(0, 33)
BROW_L = np.arange(33, 42)
BROW_R = np.arange(42, 51)
NOSE = np.arange(51, 66)
EYE_L = np.arange(66, 82)
EYE_R = np.arange(82, 98)
LIP_OUTER = np.arange(98, 114)
LIP_INNER = np.arange(114, 126)


def _ellipse(cx, cy, rx, ry, n):
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([cx + rx * np.cos(a), cy + ry * np.sin(a)], axis=1)


def template() -> np.ndarray:
    """Canonical 126-point face in face-size units (x right, y down)."""
    phi = np.linspace(0, np.pi, 33)
    jaw = np.stack([-np.cos(phi), -0.1 + 1.1 * np.sin(phi)], axis=1)
    s = np.linspace(0, 1, 9)
    brow_l = np.stack([-0.8 + 0.6 * s, -0.55 - 0.08 * np.sin(np.pi * s)], axis=1)
    brow_r = brow_l * [-1, 1]
    bridge = np.stack([np.zeros(6), np.linspace(-0.35, 0.2, 6)], axis=1)
    u = np.linspace(-1, 1, 9)
    nostrils = np.stack([0.2 * u, 0.28 + 0.05 * (1 - u**2)], axis=1)
    pts = np.concatenate(
        [
            jaw,
            brow_l,
            brow_r,
            bridge,
            nostrils,
            _ellipse(-0.45, -0.3, 0.18, 0.07, 16),
            _ellipse(0.45, -0.3, 0.18, 0.07, 16),
            _ellipse(0.0, 0.6, 0.38, 0.14, 16),
            _ellipse(0.0, 0.6, 0.25, 0.05, 12),
        ]
    )
    assert pts.shape == (N_LANDMARKS, 2)
    return pts


def _side_weight(x: np.ndarray, asym: float) -> np.ndarray:
    return 1.0 + asym * np.tanh(-x / 0.2)


def primitive_field(name: str, asym: float = 0.0) -> np.ndarray:
    """Unit-amplitude displacement field (126, 2) of one primitive on the template."""
    T = template()
    x, y = T[:, 0], T[:, 1]
    d = np.zeros_like(T)
    w = _side_weight(x, asym)
    if name == "brows":
        idx = np.concatenate([BROW_L, BROW_R])
        d[idx, 1] = -0.12 * w[idx]
        for eye in (EYE_L, EYE_R):
            upper = eye[y[eye] < -0.3]
            d[upper, 1] = -0.03 * w[upper]
    elif name == "eyes":
        for eye, cy in ((EYE_L, -0.3), (EYE_R, -0.3)):
            upper = eye[y[eye] < cy]
            lower = eye[y[eye] > cy]
            d[upper, 1] = 0.12 * w[upper]
            d[lower, 1] = -0.02 * w[lower]
    elif name == "mouth_corners":
        for idx, rx in ((LIP_OUTER, 0.38), (LIP_INNER, 0.25)):
            r = x[idx] / rx
            d[idx, 0] = 0.10 * r * np.abs(r) * w[idx]
            d[idx, 1] = -0.06 * r**2 * w[idx]
    elif name == "jaw":
        d[JAW, 1] = 0.15 * np.clip(1.2 * np.sin(np.linspace(0, np.pi, 33)) - 0.2, 0, None) * w[JAW]
        d[JAW, 0] = -0.03 * x[JAW] * w[JAW]
        lower = LIP_OUTER[y[LIP_OUTER] > 0.6]
        d[lower, 1] = 0.18 * w[lower]
        lower_in = LIP_INNER[y[LIP_INNER] > 0.6]
        d[lower_in, 1] = 0.2 * w[lower_in]
    elif name == "nod":
        d[:, 1] = -0.15 * (y - 0.2) * w
        d[NOSE, 1] += 0.05
    elif name == "shake":
        d[:, 0] = -0.15 * x * (1.0 + asym * np.sign(x))
        d[NOSE, 0] += 0.08
        d[np.concatenate([LIP_OUTER, LIP_INNER]), 0] += 0.04
    else:
        raise ValueError(f"unknown primitive {name!r}")
    return d


@dataclass(frozen=True)
class PrimitiveParams:
    rate: float
    amplitude: float
    duration_mean: float
    duration_std: float
    asymmetry: float


@dataclass(frozen=True)
class MotionSignature:
    primitives: dict[str, PrimitiveParams]
    head_weights: np.ndarray  # (2 channels, len(HEAD_FREQS_HZ))

    def vector(self) -> np.ndarray:
        """Signature normalised to [0, 1] per parameter, for margin checks."""

        def unit(v, lo_hi):
            lo, hi = lo_hi
            return (v - lo) / (hi - lo)

        out = []
        for name in PRIMITIVES:
            p = self.primitives[name]
            out += [
                unit(p.rate, RATE),
                unit(p.amplitude, AMPLITUDE),
                unit(p.duration_mean, DURATION),
                unit(p.duration_std / p.duration_mean, DURATION_SPREAD),
                unit(p.asymmetry, ASYMMETRY),
            ]
        out += list(unit(self.head_weights.reshape(-1), HEAD_WEIGHT))
        return np.array(out)


@dataclass(frozen=True)
class SyntheticIdentity:
    id: str
    base_shape: np.ndarray  # (126, 2) pixels
    signature: MotionSignature

    @property
    def scale(self) -> float:
        return neutral_scale(self.base_shape)


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 8
    videos_per_identity: int = 8
    frames_per_video: int = 200
    fps: float = 30.0
    landmark_noise: float = 0.3
    degradation: float = 0.5
    seed: int = 0
    video_seed: int | None = None
    cross_per_pair: int = 8
    margin: float = 0.2
    fractions: tuple[float, float, float] = (1.0, 0.0, 0.0)
    face_size: float = 90.0

    def __post_init__(self):
        if self.n_identities < 1 or self.videos_per_identity < 1 or self.frames_per_video < 1:
            raise ValidationError("identities, videos and frames must be positive")
        if self.fps <= 0 or self.landmark_noise < 0 or self.degradation < 0:
            raise ValidationError("fps must be positive and noise levels non-negative")

    @property
    def motion_seed(self) -> int:
        return self.seed if self.video_seed is None else self.video_seed


def sample_signature(rng: np.random.Generator) -> MotionSignature:
    prims = {}
    for name in PRIMITIVES:
        mean = rng.uniform(*DURATION)
        prims[name] = PrimitiveParams(
            rate=rng.uniform(*RATE),
            amplitude=rng.uniform(*AMPLITUDE),
            duration_mean=mean,
            duration_std=mean * rng.uniform(*DURATION_SPREAD),
            asymmetry=rng.uniform(*ASYMMETRY),
        )
    head = rng.uniform(*HEAD_WEIGHT, size=(len(HEAD_CHANNELS), len(HEAD_FREQS_HZ)))
    return MotionSignature(prims, head)


def signatures_separated(a: MotionSignature, b: MotionSignature, margin: float) -> bool:
    """True when at least two normalised parameters differ by ``margin`` or more."""
    return int(np.sum(np.abs(a.vector() - b.vector()) >= margin)) >= 2


def generate_identity(
    rng: np.random.Generator,
    ident: str = "id000",
    others: list[SyntheticIdentity] = (),
    margin: float = 0.2,
    face_size: float = 90.0,
    max_attempts: int = 100,
) -> SyntheticIdentity:
    T = template()
    aspect = rng.uniform(0.9, 1.1)
    size = face_size * rng.uniform(0.85, 1.15)
    shape = T * [aspect, 1.0] + rng.normal(0.0, 0.015, T.shape)
    base = np.array([320.0, 240.0]) + rng.normal(0.0, 10.0, 2) + size * shape
    for _ in range(max_attempts):
        sig = sample_signature(rng)
        if all(signatures_separated(sig, o.signature, margin) for o in others):
            return SyntheticIdentity(ident, base, sig)
    raise MarginError(f"{ident}: no signature {margin} away from the {len(others)} others after {max_attempts} draws")


def envelope(length: int) -> np.ndarray:
    """Raised cosine rising from 0 to 1 and back over ``length`` frames."""
    tau = (np.arange(length) + 0.5) / length
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * tau))


def primitive_activation(p: PrimitiveParams, frames: int, fps: float, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Activation curve of one primitive and the number of events that started."""
    act = np.zeros(frames)
    n_events = int(rng.poisson(p.rate * frames / fps))
    onsets = rng.uniform(0, frames, n_events)
    durations = np.maximum(rng.normal(p.duration_mean, p.duration_std, n_events), 0.1)
    gains = rng.uniform(0.7, 1.3, n_events)
    for onset, dur, gain in zip(onsets, durations, gains):
        length = max(int(round(dur * fps)), 2)
        start = int(onset)
        stop = min(start + length, frames)
        act[start:stop] += gain * envelope(length)[: stop - start]
    return act * p.amplitude, n_events


def head_activation(weights: np.ndarray, frames: int, fps: float, rng: np.random.Generator) -> np.ndarray:
    """(channels, frames) smooth head motion from the sinusoid bank."""
    t = np.arange(frames) / fps
    phases = rng.uniform(0, 2 * np.pi, weights.shape)
    freqs = np.asarray(HEAD_FREQS_HZ)
    waves = np.sin(2 * np.pi * freqs[None, :, None] * t[None, None, :] + phases[..., None])
    return (weights[..., None] * waves).sum(axis=1)


def render_motion(identity: SyntheticIdentity, frames: int, rng: np.random.Generator, fps: float = 30.0) -> np.ndarray:
    """Displacements (frames, 126, 2) in the identity's pixel units."""
    sig = identity.signature
    disp = np.zeros((frames, N_LANDMARKS, 2))
    for name in PRIMITIVES:
        p = sig.primitives[name]
        act, _ = primitive_activation(p, frames, fps, rng)
        disp += act[:, None, None] * primitive_field(name, p.asymmetry)[None]
    head = head_activation(sig.head_weights, frames, fps, rng)
    for c, name in enumerate(HEAD_CHANNELS):
        disp += head[c][:, None, None] * primitive_field(name)[None]
    return disp * identity.scale


def reenact(
    driver_motion: np.ndarray,
    target: SyntheticIdentity,
    degradation: float,
    rng: np.random.Generator,
    driver_scale: float | None = None,
) -> np.ndarray:
    """Target rest shape + driver displacements (rescaled to the target's size) + noise."""
    ratio = 1.0 if driver_scale is None else target.scale / driver_scale
    out = target.base_shape[None] + driver_motion * ratio
    if degradation > 0:
        out = out + rng.normal(0.0, degradation, out.shape)
    return out


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def generate_identities(config: SynthConfig) -> list[SyntheticIdentity]:
    """Identity ``k`` depends only on (seed, k) and the identities before it."""
    out: list[SyntheticIdentity] = []
    for k in range(config.n_identities):
        out.append(generate_identity(_rng(config.seed, 0, k), f"id{k:03d}", out, config.margin, config.face_size))
    return out


def generate_dataset(config: SynthConfig, out_dir: str | os.PathLike, dry_run: bool = False) -> DatasetManifest:
    """Write originals, self- and cross-reenactments plus ``manifest.json``.

    With ``dry_run`` only the manifest records are built; nothing is written.
    """
    out_dir = Path(out_dir)
    idents = generate_identities(config)
    ids = [i.id for i in idents]
    split = assign_splits(ids, config.fractions, config.seed)
    T, fps = config.frames_per_video, config.fps
    ms = config.motion_seed
    videos: list[VideoRecord] = []

    def record(vid, drv, tgt, kind):
        path = out_dir / "landmarks" / drv / f"{vid}.lmk"
        videos.append(VideoRecord(vid, drv, tgt, kind, path, T, fps))
        return path

    def noisy(arr, *key):
        if config.landmark_noise > 0:
            arr = arr + _rng(ms, 4, *key).normal(0.0, config.landmark_noise, arr.shape)
        return arr

    for i, drv in enumerate(idents):
        motions = []
        for k in range(config.videos_per_identity):
            motion = None if dry_run else render_motion(drv, T, _rng(ms, 1, i, k), fps)
            motions.append(motion)
            orig = record(f"{drv.id}_v{k:02d}_orig", drv.id, drv.id, VideoKind.ORIGINAL)
            selfp = record(f"{drv.id}_v{k:02d}_self", drv.id, drv.id, VideoKind.SELF)
            if not dry_run:
                write_landmarks(orig, noisy(drv.base_shape[None] + motion, i, k, 0))
                self_lm = reenact(motion, drv, config.degradation, _rng(ms, 2, i, k, i), drv.scale)
                write_landmarks(selfp, noisy(self_lm, i, k, 1))
        for j, tgt in enumerate(idents):
            if j == i or split[tgt.id] is not split[drv.id]:
                continue
            pick_rng = _rng(ms, 3, i, j)
            n = config.cross_per_pair
            picks = pick_rng.choice(config.videos_per_identity, size=n, replace=n > config.videos_per_identity)
            for slot, k in enumerate(picks):
                k = int(k)
                path = record(f"{drv.id}_v{k:02d}_to_{tgt.id}_{slot}", drv.id, tgt.id, VideoKind.CROSS)
                if not dry_run:
                    lm = reenact(motions[k], tgt, config.degradation, _rng(ms, 2, i, k, j, slot), drv.scale)
                    write_landmarks(path, noisy(lm, i, k, 2 + j, slot))
        if not dry_run:
            log.info("generated identity %s (%d/%d)", drv.id, i + 1, len(idents))

    neutral = {i.id: i.base_shape.astype(np.float32) for i in idents}
    manifest = DatasetManifest(out_dir, tuple(ids), tuple(videos), neutral, split)
    validate_manifest(manifest, check_files=not dry_run)
    if not dry_run:
        save_manifest(manifest)
    return manifest
