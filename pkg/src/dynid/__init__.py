"""Appearance-agnostic dynamic identity embeddings for talking-head landmark sequences."""

from .data import DatasetManifest, Split, VideoKind, VideoRecord, load_landmarks, load_manifest, split_identities
from .features import FeatureStore, clip_features, frame_feature, neutral_scale
from .network import NetworkConfig, build_network, embed, embed_window
from .trainer import TrainConfig, resume, train, validate

__version__ = "0.1.0"
