"""Temporal embedding network: a stack of valid dilated convolutions.

Layer 0 is a kernel-1 projection of the 7875 input features; every later
layer has kernel 3. With valid convolutions the receptive field is
``1 + 2 * sum(dilations[1:])``, which the schedules below make equal to
the clip length, so an F-frame clip collapses to exactly one time step and
an (F+4)-frame window to five. A kernel-1 affine head maps to 128 dims.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine
from .engine import ParamStore, Tensor
from .errors import ReceptiveFieldError, ShapeError
from .features import FEATURE_DIM, ClipFeature

SCHEDULES: dict[int, tuple[int, ...]] = {
    31: (1, 1, 1, 1, 2, 2, 2, 2, 4),
    51: (1, 1, 1, 1, 2, 2, 2, 4, 4, 4, 4),
    71: (1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 4, 4, 4, 4, 4),
    91: (1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 4, 4, 4, 4, 4, 4, 4),
}
WINDOW_CLIPS = 5


@dataclass(frozen=True)
class NetworkConfig:
    clip_frames: int = 51
    dilations: tuple[int, ...] = field(default=())
    width: int = 256
    input_dim: int = FEATURE_DIM
    embedding_dim: int = 128
    normalize: bool = False

    def __post_init__(self):
        if not self.dilations:
            if self.clip_frames not in SCHEDULES:
                raise ReceptiveFieldError(
                    f"no built-in dilation schedule for F={self.clip_frames}; supported: {sorted(SCHEDULES)}"
                )
            object.__setattr__(self, "dilations", SCHEDULES[self.clip_frames])
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))

    @property
    def kernel_sizes(self) -> tuple[int, ...]:
        return (1,) + (3,) * (len(self.dilations) - 1)

    @property
    def window_frames(self) -> int:
        return self.clip_frames + WINDOW_CLIPS - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["dilations"] = tuple(d.get("dilations", ()))
        return cls(**d)


def receptive_field(dilations, kernel_sizes) -> int:
    return 1 + sum((k - 1) * d for k, d in zip(kernel_sizes, dilations))


def check_config(config: NetworkConfig) -> None:
    rf = receptive_field(config.dilations, config.kernel_sizes)
    if rf != config.clip_frames:
        raise ReceptiveFieldError(
            f"dilations {config.dilations} give receptive field {rf}, clip length is {config.clip_frames}"
        )
    if any(d < 1 for d in config.dilations):
        raise ReceptiveFieldError("dilations must be positive")


def layer_names(config: NetworkConfig) -> list[str]:
    return [f"conv{i:02d}" for i in range(len(config.dilations))] + ["head"]


def build_network(config: NetworkConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Fan-in scaled uniform kernels, zero biases; deterministic in ``seed``."""
    check_config(config)
    rng = np.random.default_rng(seed)
    params = {}
    c_in = config.input_dim
    for i, k in enumerate(config.kernel_sizes):
        bound = np.sqrt(6.0 / (c_in * k))
        params[f"conv{i:02d}.weight"] = rng.uniform(-bound, bound, (config.width, c_in, k)).astype(dtype)
        params[f"conv{i:02d}.bias"] = np.zeros(config.width, dtype=dtype)
        c_in = config.width
    bound = np.sqrt(3.0 / c_in)
    params["head.weight"] = rng.uniform(-bound, bound, (config.embedding_dim, c_in, 1)).astype(dtype)
    params["head.bias"] = np.zeros(config.embedding_dim, dtype=dtype)
    return ParamStore(params)


def forward(params: dict, x, config: NetworkConfig) -> Tensor:
    """(B, L, input_dim) -> (B, L - F + 1, embedding_dim).

    ``params`` maps names to arrays or to tensors (for a recorded pass).
    """
    h = x
    for i, d in enumerate(config.dilations):
        h = engine.conv1d(h, params[f"conv{i:02d}.weight"], params[f"conv{i:02d}.bias"], dilation=d)
        h = engine.relu(h)
    out = engine.conv1d(h, params["head.weight"], params["head.bias"])
    if config.normalize:
        out = engine.l2_normalize(out)
    return out


def _check_input(x: np.ndarray, config: NetworkConfig, frames: int) -> None:
    if x.ndim != 3 or x.shape[1] != frames or x.shape[2] != config.input_dim:
        raise ShapeError(f"expected (batch, {frames}, {config.input_dim}) input, got {x.shape}")


def embed_windows(params: dict, windows: np.ndarray, config: NetworkConfig) -> Tensor:
    """Batched windows (B, F+4, input_dim) -> embeddings (B, 5, embedding_dim)."""
    _check_input(windows, config, config.window_frames)
    return forward(params, windows, config)


def embed_clips(store: ParamStore, clips: np.ndarray, config: NetworkConfig) -> np.ndarray:
    """Batched clips (B, F, input_dim) -> (B, embedding_dim) array."""
    _check_input(clips, config, config.clip_frames)
    return forward(store.params, clips, config).data[:, 0, :]


@dataclass(frozen=True)
class ClipEmbedding:
    vector: np.ndarray
    driving_id: str
    target_id: str
    video_id: str
    t: int


def embed(store: ParamStore, config: NetworkConfig, clip: ClipFeature) -> ClipEmbedding:
    values = np.asarray(clip.values)
    if values.ndim != 2 or values.shape[0] != config.clip_frames:
        raise ShapeError(f"embed takes exactly {config.clip_frames} frames, got {values.shape}")
    vec = embed_clips(store, values[None], config)[0]
    return ClipEmbedding(vec, clip.driving_id, clip.target_id, clip.video_id, clip.start_frame)


def embed_window(store: ParamStore, config: NetworkConfig, window: ClipFeature) -> list[ClipEmbedding]:
    values = np.asarray(window.values)
    if values.ndim != 2 or values.shape[0] != config.window_frames:
        raise ShapeError(f"embed_window takes exactly {config.window_frames} frames, got {values.shape}")
    out = embed_windows(store.params, values[None], config).data[0]
    return [
        ClipEmbedding(out[n], window.driving_id, window.target_id, window.video_id, window.start_frame + n)
        for n in range(WINDOW_CLIPS)
    ]
