"""Pull/push contrastive loss over 5-clip windows.

For an anchor clip ``x`` (clip ``t`` of window ``a``) and another window
``w`` with clips ``y_0..y_4``, the window similarity is
``max_n exp(-|x - y_n|^2)``. ``N`` sums it over the anchor's pull set
(windows with the same driver), ``Q`` over its push set (windows driven
by someone else), ``p = N / (N + Q)`` and the loss is ``sum -log p`` over
all anchors and all five ``t``.

Everything is evaluated in the log domain in float64: the per-window term
is ``-min_n |x - y_n|^2`` and the sums are log-sum-exps, so no similarity
ever underflows to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .engine import Tensor, _make
from .errors import DegenerateError, EmptyPullSetError, EmptyPushSetError, ValidationError


@dataclass(frozen=True)
class WindowEmbeddings:
    embeddings: np.ndarray  # (5, D), row n is the clip starting at start + n
    driving_id: str
    target_id: str
    video_id: str
    start: int = 0


def log_similarity(a, b) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return -float(d @ d)


def similarity(a, b) -> float:
    return math.exp(log_similarity(a, b))


def _window_log_sims(anchor: WindowEmbeddings, t: int, windows: Sequence[WindowEmbeddings]) -> np.ndarray:
    x = np.asarray(anchor.embeddings[t], dtype=np.float64)
    return np.array([max(log_similarity(x, y) for y in w.embeddings) for w in windows])


def log_pull_term(anchor: WindowEmbeddings, t: int, pull_set: Sequence[WindowEmbeddings]) -> float:
    if not pull_set:
        raise EmptyPullSetError(f"empty pull set for identity {anchor.driving_id!r}")
    for w in pull_set:
        if w.driving_id != anchor.driving_id:
            raise ValidationError(f"pull window {w.video_id} is driven by {w.driving_id!r}, not {anchor.driving_id!r}")
        if w is anchor:
            raise ValidationError("the anchor window must not be in its own pull set")
    return float(logsumexp(_window_log_sims(anchor, t, pull_set)))


def log_push_term(anchor: WindowEmbeddings, t: int, push_set: Sequence[WindowEmbeddings]) -> float:
    if not push_set:
        raise EmptyPushSetError(f"empty push set for identity {anchor.driving_id!r}")
    for w in push_set:
        if w.driving_id == anchor.driving_id:
            raise ValidationError(f"push window {w.video_id} has the anchor's driver {anchor.driving_id!r}")
    return float(logsumexp(_window_log_sims(anchor, t, push_set)))


def pull_term(anchor: WindowEmbeddings, t: int, pull_set: Sequence[WindowEmbeddings]) -> float:
    return math.exp(log_pull_term(anchor, t, pull_set))


def push_term(anchor: WindowEmbeddings, t: int, push_set: Sequence[WindowEmbeddings]) -> float:
    return math.exp(log_push_term(anchor, t, push_set))


def clip_log_probability(log_n: float, log_q: float) -> float:
    if log_n == -math.inf and log_q == -math.inf:
        raise DegenerateError("pull and push terms are both zero")
    return log_n - float(np.logaddexp(log_n, log_q))


def clip_probability(n: float, q: float) -> float:
    if n < 0 or q < 0:
        raise ValueError("pull and push terms must be non-negative")
    if n == 0 and q == 0:
        raise DegenerateError("pull and push terms are both zero")
    if n == 0:
        return 0.0
    if q == 0:
        return 1.0
    return math.exp(clip_log_probability(math.log(n), math.log(q)))


@dataclass(frozen=True)
class LossStructure:
    """Which windows each anchor pulls toward and pushes from.

    ``pull`` and ``push`` are (anchors, windows) multiplicity matrices: a
    window listed twice in a pull list counts twice. ``anchors[a]`` is the
    window index of anchor ``a``.
    """

    anchors: np.ndarray
    pull: np.ndarray
    push: np.ndarray
    driving_ids: tuple[str, ...]  # per window
    video_ids: tuple[str, ...] = ()
    starts: tuple[int, ...] = ()


@dataclass
class LossBreakdown:
    total: float
    log_n: np.ndarray  # (anchors, 5)
    log_q: np.ndarray
    p: np.ndarray
    anchor_driving_ids: tuple[str, ...]
    anchor_video_ids: tuple[str, ...] = ()

    def records(self):
        """Yield (anchor driver, video, t, N, Q, p) per anchor clip."""
        for a, drv in enumerate(self.anchor_driving_ids):
            vid = self.anchor_video_ids[a] if self.anchor_video_ids else ""
            for t in range(self.p.shape[1]):
                yield drv, vid, t, math.exp(self.log_n[a, t]), math.exp(self.log_q[a, t]), float(self.p[a, t])


def contrastive_loss(embeddings: Tensor, structure: LossStructure) -> tuple[Tensor, LossBreakdown]:
    """Differentiable loss over window embeddings of shape (W, 5, D)."""
    E = embeddings.data.astype(np.float64)
    n_win, n_clip, dim = E.shape
    anchors = np.asarray(structure.anchors)
    pull = np.asarray(structure.pull, dtype=np.float64)
    push = np.asarray(structure.push, dtype=np.float64)
    for a, w in enumerate(anchors):
        if not pull[a].any():
            raise EmptyPullSetError(f"empty pull set for identity {structure.driving_ids[w]!r}")
        if not push[a].any():
            raise EmptyPushSetError(f"empty push set for identity {structure.driving_ids[w]!r}")
    n_anc = len(anchors)

    flat = E.reshape(n_win * n_clip, dim)
    anc = E[anchors].reshape(n_anc * n_clip, dim)
    sq = (anc * anc).sum(1)[:, None] + (flat * flat).sum(1)[None, :] - 2.0 * (anc @ flat.T)
    np.maximum(sq, 0.0, out=sq)
    logsim = -sq.reshape(n_anc, n_clip, n_win, n_clip)
    best = logsim.argmax(axis=3)
    lw = np.take_along_axis(logsim, best[..., None], axis=3)[..., 0]  # (A, T, W)

    with np.errstate(divide="ignore"):
        log_pull_w = np.log(pull)[:, None, :]
        log_push_w = np.log(push)[:, None, :]
    log_n = logsumexp(lw + log_pull_w, axis=2)
    log_q = logsumexp(lw + log_push_w, axis=2)
    log_nq = np.logaddexp(log_n, log_q)
    per = log_nq - log_n
    total = per.sum()

    def backward(g):
        coef = (pull + push)[:, None, :] * np.exp(lw - log_nq[..., None]) - pull[:, None, :] * np.exp(
            lw - log_n[..., None]
        )
        coef *= float(g)
        G = np.zeros((n_anc * n_clip, n_win * n_clip))
        rows = np.repeat(np.arange(n_anc * n_clip), n_win)
        cols = (np.arange(n_win)[None, None, :] * n_clip + best).reshape(-1)
        G[rows, cols] = coef.reshape(-1)
        d_anc = -2.0 * (G.sum(1)[:, None] * anc - G @ flat)
        d_flat = -2.0 * (G.sum(0)[:, None] * flat - G.T @ anc)
        dE = d_flat.reshape(n_win, n_clip, dim)
        np.add.at(dE, anchors, d_anc.reshape(n_anc, n_clip, dim))
        return (dE.astype(embeddings.dtype),)

    out = _make(np.asarray(total), (embeddings,), backward)
    drv = structure.driving_ids
    breakdown = LossBreakdown(
        total=float(total),
        log_n=log_n,
        log_q=log_q,
        p=np.exp(log_n - log_nq),
        anchor_driving_ids=tuple(drv[w] for w in anchors),
        anchor_video_ids=tuple(structure.video_ids[w] for w in anchors) if structure.video_ids else (),
    )
    return out, breakdown


def windows_loss(windows: Sequence[WindowEmbeddings], push_scope: str = "all") -> tuple[float, LossBreakdown]:
    """Loss over plain window embeddings, every window acting as an anchor.

    Pull set: all other windows with the same driver. Push set: all windows
    with a different driver (``push_scope="all"``), or only those sharing
    the anchor's target (``"same_target"``).
    """
    E = Tensor(np.stack([np.asarray(w.embeddings, dtype=np.float64) for w in windows]))
    structure = structure_for(windows, push_scope)
    loss, breakdown = contrastive_loss(E, structure)
    return loss.item(), breakdown


def structure_for(windows: Sequence[WindowEmbeddings], push_scope: str = "all") -> LossStructure:
    n = len(windows)
    drv = np.array([w.driving_id for w in windows])
    tgt = np.array([w.target_id for w in windows])
    same = drv[:, None] == drv[None, :]
    pull = same & ~np.eye(n, dtype=bool)
    push = ~same
    if push_scope == "same_target":
        push &= tgt[:, None] == tgt[None, :]
    elif push_scope != "all":
        raise ValueError(f"unknown push scope {push_scope!r}")
    return LossStructure(
        anchors=np.arange(n),
        pull=pull.astype(np.float64),
        push=push.astype(np.float64),
        driving_ids=tuple(drv.tolist()),
        video_ids=tuple(w.video_id for w in windows),
        starts=tuple(w.start for w in windows),
    )
