"""Training batches: 8 identities, 16 pull and 56 push windows each.

Per identity the pull list holds 8 self-reenactment windows and 8 windows
of cross-reenactments it drives. Its push list is the 8 self-reenactment
windows of each of the other 7 batch identities, so push windows are
shared with pull lists and every distinct window is embedded once.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import network
from .data import DatasetManifest, Split, VideoKind, VideoRecord
from .engine import ParamStore, Tensor
from .errors import InsufficientDataError
from .features import FeatureStore
from .loss import LossBreakdown, LossStructure, contrastive_loss
from .network import NetworkConfig

log = logging.getLogger(__name__)

BATCH_IDENTITIES = 8
PER_CATEGORY = 8


@dataclass(frozen=True)
class WindowSpec:
    video_id: str
    start: int


@dataclass(frozen=True)
class BatchPlan:
    identities: tuple[str, ...]
    pull: dict[str, tuple[WindowSpec, ...]]
    push: dict[str, tuple[WindowSpec, ...]]
    window_frames: int
    rng_token: str


def rng_token(rng: np.random.Generator) -> str:
    state = json.dumps(rng.bit_generator.state, sort_keys=True)
    return hashlib.sha256(state.encode()).hexdigest()[:16]


def _eligible(manifest: DatasetManifest, split: Split, window: int) -> dict[str, tuple[list[VideoRecord], list[VideoRecord]]]:
    ids = manifest.identities_in(split)
    members = set(ids)
    pools = {i: ([], []) for i in ids}
    for v in manifest.videos:
        if v.driving_id not in members or v.frame_count < window:
            continue
        if v.kind is VideoKind.SELF:
            pools[v.driving_id][0].append(v)
        elif v.kind is VideoKind.CROSS and v.target_id in members:
            pools[v.driving_id][1].append(v)
    return pools


def _windows(videos: list[VideoRecord], count: int, window: int, rng: np.random.Generator) -> list[WindowSpec]:
    picks = rng.choice(len(videos), size=count, replace=len(videos) < count)
    out = []
    for k in picks:
        v = videos[int(k)]
        out.append(WindowSpec(v.video_id, int(rng.integers(0, v.frame_count - window + 1))))
    return out


def sample_batch(
    manifest: DatasetManifest,
    F: int,
    rng: np.random.Generator,
    split: Split = Split.TRAIN,
    n_identities: int = BATCH_IDENTITIES,
    per_category: int = PER_CATEGORY,
) -> BatchPlan:
    window = F + network.WINDOW_CLIPS - 1
    pools = _eligible(manifest, split, window)
    ids = list(pools)
    if len(ids) < n_identities:
        raise InsufficientDataError(
            f"{split.value} split has {len(ids)} identities, a batch needs {n_identities}"
        )
    token = rng_token(rng)
    chosen = [ids[int(k)] for k in rng.choice(len(ids), size=n_identities, replace=False)]
    pull: dict[str, tuple[WindowSpec, ...]] = {}
    for ident in chosen:
        selfs, crosses = pools[ident]
        if not selfs:
            raise InsufficientDataError(
                f"identity {ident!r} has no self-reenactment videos of at least {window} frames"
            )
        if len(selfs) < per_category:
            log.warning("identity %s: only %d self-reenactment videos, sampling with replacement", ident, len(selfs))
        self_w = _windows(selfs, per_category, window, rng)
        if len(crosses) >= per_category:
            cross_w = _windows(crosses, per_category, window, rng)
        else:
            log.warning(
                "identity %s: only %d cross-reenactments as driver, filling with self-reenactment windows",
                ident,
                len(crosses),
            )
            cross_w = _windows(crosses, len(crosses), window, rng) if crosses else []
            cross_w += _windows(selfs, per_category - len(cross_w), window, rng)
        pull[ident] = tuple(self_w + cross_w)
    push = {
        ident: tuple(w for other in chosen if other != ident for w in pull[other][:per_category]) for ident in chosen
    }
    return BatchPlan(tuple(chosen), pull, push, window, token)


@dataclass
class RealizedBatch:
    windows: list[WindowSpec]
    embeddings: Tensor  # (W, 5, D)
    structure: LossStructure


def plan_structure(plan: BatchPlan, manifest: DatasetManifest) -> tuple[list[WindowSpec], LossStructure]:
    """Distinct windows of a plan and the anchor/pull/push multiplicities over them."""
    index: dict[WindowSpec, int] = {}
    for ident in plan.identities:
        for spec in plan.pull[ident] + plan.push[ident]:
            index.setdefault(spec, len(index))
    windows = list(index)
    n_win = len(windows)
    anchors, pull_rows, push_rows = [], [], []
    for ident in plan.identities:
        slots = [index[s] for s in plan.pull[ident]]
        push_row = np.zeros(n_win)
        np.add.at(push_row, [index[s] for s in plan.push[ident]], 1.0)
        counts = np.zeros(n_win)
        np.add.at(counts, slots, 1.0)
        for w in slots:
            row = counts.copy()
            row[w] -= 1.0
            anchors.append(w)
            pull_rows.append(row)
            push_rows.append(push_row)
    structure = LossStructure(
        anchors=np.array(anchors, dtype=np.int64),
        pull=np.array(pull_rows),
        push=np.array(push_rows),
        driving_ids=tuple(manifest.video(s.video_id).driving_id for s in windows),
        video_ids=tuple(s.video_id for s in windows),
        starts=tuple(s.start for s in windows),
    )
    return windows, structure


def realize_batch(
    plan: BatchPlan,
    features: FeatureStore,
    params: dict,
    config: NetworkConfig,
) -> RealizedBatch:
    """Embed every distinct window of ``plan`` once.

    ``params`` maps names to arrays, or to leaf tensors to record a graph.
    """
    windows, structure = plan_structure(plan, features.manifest)
    if not windows:
        raise InsufficientDataError("batch plan has no windows")
    x = np.stack([features.window(s.video_id, s.start, plan.window_frames) for s in windows])
    emb = network.embed_windows(params, x, config)
    return RealizedBatch(windows, emb, structure)


def batch_loss(
    plan: BatchPlan,
    store: ParamStore,
    features: FeatureStore,
    config: NetworkConfig,
    with_grad: bool = True,
) -> tuple[Tensor, LossBreakdown, dict[str, Tensor]]:
    """Loss of one batch; when ``with_grad``, also the leaf tensors to differentiate."""
    params = store.tensors() if with_grad else store.params
    realized = realize_batch(plan, features, params, config)
    loss, breakdown = contrastive_loss(realized.embeddings, realized.structure)
    return loss, breakdown, params if with_grad else {}
