"""Per-target verification: genuine vs impostor clip distances, ROC, AUC.

For target identity ``i``: genuine distances are between distinct clips of
its self-reenactments; impostor distances pair each of those clips with
every clip of a cross-reenactment showing ``i`` but driven by someone else.
A pair is accepted as genuine when its distance is at most the threshold.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, Split, VideoKind, atomic_write_text
from .engine import ParamStore
from .errors import InsufficientDataError, NoScoreableIdentityError, ValidationError
from .features import FeatureStore
from .network import NetworkConfig, embed_clips

log = logging.getLogger(__name__)


@dataclass
class ScorePools:
    target_id: str
    genuine: np.ndarray
    impostor: np.ndarray


@dataclass
class IdentityRoc:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    n_genuine: int
    n_impostor: int


@dataclass
class RocReport:
    per_identity: dict[str, IdentityRoc]
    mean_auc: float
    skipped: dict[str, str] = field(default_factory=dict)


class ClipEmbedder:
    """Embeds every clip of a video once and caches the result."""

    def __init__(self, store: ParamStore, net: NetworkConfig, features: FeatureStore, stride: int | None = None, chunk: int = 64):
        self.store = store
        self.net = net
        self.features = features
        self.stride = stride or net.clip_frames
        self.chunk = chunk
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, video_id: str) -> np.ndarray:
        if video_id not in self._cache:
            clips = self.features.clips(video_id, self.net.clip_frames, self.stride)
            stack = np.stack([c.values for c in clips])
            parts = [embed_clips(self.store, stack[k : k + self.chunk], self.net) for k in range(0, len(stack), self.chunk)]
            self._cache[video_id] = np.concatenate(parts).astype(np.float64)
        return self._cache[video_id]


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def pools_from_embeddings(target_id: str, self_clips: Sequence[np.ndarray], cross_clips: Sequence[np.ndarray]) -> ScorePools:
    """``self_clips``/``cross_clips``: one (clips, D) array per video."""
    S = np.concatenate(self_clips) if self_clips else np.zeros((0, 0))
    C = np.concatenate(cross_clips) if cross_clips else np.zeros((0, 0))
    iu = np.triu_indices(len(S), k=1)
    genuine = pairwise_distances(S, S)[iu]
    impostor = pairwise_distances(S, C).reshape(-1)
    return ScorePools(target_id, genuine, impostor)


def build_pools(
    manifest: DatasetManifest,
    embedder: ClipEmbedder,
    target: str,
) -> ScorePools:
    selfs = [v for v in manifest.select(VideoKind.SELF, target_id=target) if v.frame_count >= embedder.net.clip_frames]
    crosses = [v for v in manifest.select(VideoKind.CROSS, target_id=target) if v.frame_count >= embedder.net.clip_frames]
    if len(selfs) < 2:
        raise InsufficientDataError(f"{target}: needs at least 2 self-reenactment videos, has {len(selfs)}")
    if not crosses:
        raise InsufficientDataError(f"{target}: has no cross-reenactment videos as target")
    return pools_from_embeddings(target, [embedder(v.video_id) for v in selfs], [embedder(v.video_id) for v in crosses])


def roc_auc(pools: ScorePools) -> IdentityRoc:
    """ROC over every distinct pooled distance; ties get half credit.

    The AUC is accumulated as an exact integer count, so it equals the
    Mann-Whitney statistic ``P(g < i) + P(g == i) / 2`` to the last bit.
    """
    g = np.sort(np.asarray(pools.genuine, dtype=np.float64))
    imp = np.sort(np.asarray(pools.impostor, dtype=np.float64))
    n_g, n_i = len(g), len(imp)
    if n_g == 0 or n_i == 0:
        raise InsufficientDataError(f"{pools.target_id}: empty genuine or impostor pool")
    values = np.unique(np.concatenate([g, imp]))
    tp = np.searchsorted(g, values, side="right")
    fp = np.searchsorted(imp, values, side="right")
    tp = np.concatenate([[0], tp, [n_g]]).astype(np.int64)
    fp = np.concatenate([[0], fp, [n_i]]).astype(np.int64)
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_g * n_i)
    thresholds = np.concatenate([[-np.inf], values, [np.inf]])
    return IdentityRoc(thresholds, fp / n_i, tp / n_g, auc, n_g, n_i)


def evaluate(
    manifest: DatasetManifest,
    store: ParamStore,
    net: NetworkConfig,
    split: Split = Split.TEST,
    stride: int | None = None,
    features: FeatureStore | None = None,
    targets: Sequence[str] | None = None,
) -> RocReport:
    if split is Split.TRAIN:
        raise ValidationError("evaluation runs on the val or test split only")
    ids = manifest.identities_in(split)
    if not ids:
        raise NoScoreableIdentityError(f"{split.value} split is empty")
    if targets is not None:
        unknown = [t for t in targets if t not in ids]
        if unknown:
            raise ValidationError(f"targets not in {split.value} split: {unknown}")
        ids = [i for i in ids if i in set(targets)]
    embedder = ClipEmbedder(store, net, features or FeatureStore(manifest), stride)
    per_identity, skipped = {}, {}
    for ident in ids:
        try:
            pools = build_pools(manifest, embedder, ident)
        except InsufficientDataError as exc:
            skipped[ident] = str(exc)
            continue
        per_identity[ident] = roc_auc(pools)
        log.info("%s: auc %.4f (%d genuine, %d impostor)", ident, per_identity[ident].auc, len(pools.genuine), len(pools.impostor))
    if not per_identity:
        raise NoScoreableIdentityError(f"no scoreable identity in {split.value} split: {skipped}")
    mean_auc = float(np.mean([r.auc for r in per_identity.values()]))
    return RocReport(per_identity, mean_auc, skipped)


def reference_distance_report(
    manifest: DatasetManifest,
    store: ParamStore,
    net: NetworkConfig,
    reference: str,
    probes: Sequence[str],
    stride: int | None = None,
    features: FeatureStore | None = None,
    embedder: ClipEmbedder | None = None,
) -> dict[str, float]:
    """Mean distance of each probe's clips to the reference's held-out self-reenactment clips."""
    held_out = [
        v.video_id
        for v in manifest.select(VideoKind.SELF, driving_id=reference)
        if v.video_id not in set(probes) and v.frame_count >= net.clip_frames
    ]
    if not held_out:
        raise InsufficientDataError(f"{reference}: no self-reenactment videos left outside the probes")
    embedder = embedder or ClipEmbedder(store, net, features or FeatureStore(manifest), stride)
    ref = np.concatenate([embedder(v) for v in held_out])
    return {p: float(pairwise_distances(embedder(p), ref).mean()) for p in probes}


def default_probes(manifest: DatasetManifest, reference: str, rng: np.random.Generator) -> dict[str, str]:
    """One probe of each kind: own self-reenactment, driving someone else, two driven by others."""
    selfs = manifest.select(VideoKind.SELF, driving_id=reference)
    drives = manifest.select(VideoKind.CROSS, driving_id=reference)
    targeted = manifest.select(VideoKind.CROSS, target_id=reference)
    if len(selfs) < 2 or not drives or len(targeted) < 1:
        raise InsufficientDataError(f"{reference}: not enough videos to pick default probes")
    out = {"self": selfs[int(rng.integers(len(selfs)))].video_id, "drives_other": drives[int(rng.integers(len(drives)))].video_id}
    picks = rng.choice(len(targeted), size=min(2, len(targeted)), replace=False)
    for n, k in enumerate(picks):
        out[f"driven_by_other_{n + 1}"] = targeted[int(k)].video_id
    return out


# -- report files -------------------------------------------------------------


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def write_report(report: RocReport, out_dir: str | os.PathLike) -> Path:
    """One ``roc_<identity>.csv`` per identity plus ``summary.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for ident, roc in report.per_identity.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for th, f, t in zip(roc.thresholds, roc.fpr, roc.tpr):
            w.writerow([_fmt(th), _fmt(f), _fmt(t)])
        atomic_write_text(out_dir / f"roc_{ident}.csv", buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["identity", "auc", "n_genuine", "n_impostor"])
    for ident, roc in report.per_identity.items():
        w.writerow([ident, _fmt(roc.auc), roc.n_genuine, roc.n_impostor])
    for ident, reason in report.skipped.items():
        w.writerow([ident, "skipped", 0, 0])
    w.writerow(["mean_auc", _fmt(report.mean_auc), "", ""])
    path = out_dir / "summary.csv"
    atomic_write_text(path, buf.getvalue())
    return path


def read_roc_tables(eval_dir: str | os.PathLike) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out = {}
    for path in sorted(Path(eval_dir).glob("roc_*.csv")):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        out[path.stem[4:]] = (np.array([float(r["fpr"]) for r in rows]), np.array([float(r["tpr"]) for r in rows]))
    return out


def mean_roc(curves: dict[str, tuple[np.ndarray, np.ndarray]], grid: int = 201) -> tuple[np.ndarray, np.ndarray]:
    """Vertical average of ROC curves on a common FPR grid."""
    fpr_grid = np.linspace(0.0, 1.0, grid)
    tprs = []
    for fpr, tpr in curves.values():
        # right-continuous step interpolation: best TPR reachable at each FPR
        idx = np.searchsorted(fpr, fpr_grid, side="right") - 1
        tprs.append(tpr[np.clip(idx, 0, len(tpr) - 1)])
    return fpr_grid, np.mean(tprs, axis=0)


def plot_mean_roc(eval_dir: str | os.PathLike, out_path: str | os.PathLike) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = read_roc_tables(eval_dir)
    if not curves:
        raise InsufficientDataError(f"no roc_*.csv tables in {eval_dir}")
    fpr, tpr = mean_roc(curves)
    auc = float(np.trapezoid(tpr, fpr)) if hasattr(np, "trapezoid") else float(np.trapz(tpr, fpr))
    plt.rcParams["svg.hashsalt"] = "dynid"
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, lw=2, label=f"mean ROC ({len(curves)} identities), area {auc:.3f}")
    ax.plot([0, 1], [0, 1], ls="--", lw=1, color="grey")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right", fontsize=8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path
