"""Optimisation loop with checkpointing, validation and exact resume."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import engine
from .data import DatasetManifest, Split
from .engine import ParamStore, adam_step, load_checkpoint, save_checkpoint
from .errors import InsufficientDataError, ManifestMismatchError, NonFiniteLossError, ValidationError
from .features import FeatureStore
from .network import SCHEDULES, NetworkConfig, build_network
from .sampler import BATCH_IDENTITIES, batch_loss, rng_token, sample_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dynid-checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 100_000
    lr: float = 1e-4
    clip_frames: int = 51
    width: int = 256
    batch_identities: int = BATCH_IDENTITIES
    checkpoint_every: int = 1000
    val_every: int = 1000
    val_batches: int = 4
    seed: int = 0
    normalize: bool = False
    norm_by: str = "target"

    def __post_init__(self):
        for name in ("iterations", "checkpoint_every", "val_every", "val_batches", "width", "batch_identities"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.lr < 0:
            raise ValidationError("lr must be non-negative")
        if self.clip_frames not in SCHEDULES:
            raise ValidationError(f"clip_frames must be one of {sorted(SCHEDULES)}")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(clip_frames=self.clip_frames, width=self.width, normalize=self.normalize)


@dataclass
class TrainLogRecord:
    iteration: int
    loss: float
    val_loss: float | None
    millis: float
    rng_token: str

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    store: ParamStore
    network: NetworkConfig
    log: list[TrainLogRecord] = field(default_factory=list)
    last_checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    best_val_loss: float | None = None


def _seeds(seed: int) -> tuple[int, np.random.Generator]:
    init_seq, sample_seq = np.random.SeedSequence(seed).spawn(2)
    return int(init_seq.generate_state(1)[0]), np.random.default_rng(sample_seq)


def load_model(path: str | os.PathLike) -> tuple[ParamStore, NetworkConfig, dict]:
    store, meta = load_checkpoint(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a training checkpoint")
    return store, NetworkConfig.from_dict(meta["network"]), meta


def validate(
    store: ParamStore,
    net: NetworkConfig,
    manifest: DatasetManifest,
    features: FeatureStore | None = None,
    n_batches: int = 4,
    seed: int = 0,
    split: Split = Split.VAL,
    batch_identities: int = BATCH_IDENTITIES,
) -> float:
    """Mean batch loss over ``n_batches`` fixed, seed-derived batches. Read-only."""
    ids = manifest.identities_in(split)
    if len(ids) < 2:
        raise InsufficientDataError(f"{split.value} split needs at least 2 identities, has {len(ids)}")
    features = features or FeatureStore(manifest)
    rng = np.random.default_rng([seed, 0x7A1])
    n_ids = min(batch_identities, len(ids))
    losses = []
    for _ in range(n_batches):
        plan = sample_batch(manifest, net.clip_frames, rng, split=split, n_identities=n_ids)
        loss, _, _ = batch_loss(plan, store, features, net, with_grad=False)
        losses.append(loss.item())
    return float(np.mean(losses))


def _meta(net: NetworkConfig, config: TrainConfig, manifest: DatasetManifest, iteration: int, rng) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "iteration": iteration,
        "rng_state": rng.bit_generator.state,
        "network": net.to_dict(),
        "train": asdict(config),
        "digest": manifest.digest(Split.TRAIN),
    }


def _can_validate(manifest: DatasetManifest, net: NetworkConfig) -> bool:
    return len(manifest.identities_in(Split.VAL)) >= 2


def _run(
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir: Path,
    store: ParamStore,
    net: NetworkConfig,
    rng: np.random.Generator,
    start: int,
    features: FeatureStore | None,
) -> TrainResult:
    out_dir.mkdir(parents=True, exist_ok=True)
    features = features or FeatureStore(manifest, norm_by=config.norm_by)
    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "best.ckpt"
    log_path = out_dir / "train_log.jsonl"
    result = TrainResult(store, net)
    do_val = _can_validate(manifest, net)
    last_good: str | None = None
    end = start + config.iterations
    # checkpoints record the total step budget, so a resumed run matches an uninterrupted one
    config = replace(config, iterations=end)
    with open(log_path, "a", encoding="utf-8") as log_fh:
        for it in range(start + 1, end + 1):
            t0 = time.perf_counter()
            token = rng_token(rng)
            plan = sample_batch(manifest, net.clip_frames, rng, n_identities=config.batch_identities)
            loss, _, tensors = batch_loss(plan, store, features, net)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    f"loss became {value} at iteration {it}; last good checkpoint: {last_good}", last_good
                )
            grads = engine.grad(loss, tensors)
            store = adam_step(store, grads, config.lr)
            val_loss = None
            if do_val and it % config.val_every == 0:
                val_loss = validate(
                    store, net, manifest, features, config.val_batches, config.seed,
                    batch_identities=config.batch_identities,
                )
                if result.best_val_loss is None or val_loss < result.best_val_loss:
                    result.best_val_loss = val_loss
                    save_checkpoint(best_path, store, _meta(net, config, manifest, it, rng))
                    result.best_checkpoint = best_path
            record = TrainLogRecord(it, value, val_loss, (time.perf_counter() - t0) * 1000.0, token)
            result.log.append(record)
            log_fh.write(record.to_json() + "\n")
            log_fh.flush()
            if it % config.checkpoint_every == 0 or it == end:
                save_checkpoint(last_path, store, _meta(net, config, manifest, it, rng))
                last_good = str(last_path)
                result.last_checkpoint = last_path
            if it % 50 == 0 or it == end:
                log.info("iteration %d loss %.4f%s", it, value, "" if val_loss is None else f" val {val_loss:.4f}")
    result.store = store
    return result


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir: str | os.PathLike,
    features: FeatureStore | None = None,
) -> TrainResult:
    """Run ``config.iterations`` optimizer steps from a fresh initialisation."""
    net = config.network_config()
    init_seed, rng = _seeds(config.seed)
    store = build_network(net, init_seed)
    out_dir = Path(out_dir)
    save_checkpoint(out_dir / "init.ckpt", store, _meta(net, config, manifest, 0, rng))
    return _run(manifest, config, out_dir, store, net, rng, 0, features)


def resume(
    checkpoint: str | os.PathLike,
    manifest: DatasetManifest,
    config: TrainConfig,
    out_dir: str | os.PathLike,
    features: FeatureStore | None = None,
) -> TrainResult:
    """Continue training for ``config.iterations`` more steps from ``checkpoint``."""
    store, net, meta = load_model(checkpoint)
    if meta["digest"] != manifest.digest(Split.TRAIN):
        raise ManifestMismatchError(
            f"checkpoint was trained on manifest {meta['digest']}, this manifest is {manifest.digest()}"
        )
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return _run(manifest, config, Path(out_dir), store, net, rng, int(meta["iteration"]), features)
