"""Feature fusion, distances and camera-aware CMC / mAP."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import FeatureSet

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    cmc: np.ndarray
    mAP: float
    ap: np.ndarray
    num_skipped: int = 0
    extra: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_dict(self, topk=(1, 5, 10)) -> dict:
        out = {"mAP": float(self.mAP)}
        out.update({f"rank{k}": self.rank(k) for k in topk})
        out["num_queries"] = int(len(self.ap))
        out["num_skipped"] = int(self.num_skipped)
        out.update(self.extra)
        return out


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def fuse(fs: FeatureSet, normalize: bool = True, use_global: bool = True) -> np.ndarray:
    """(f_g + sum of parts) / (N + 1), optionally L2-normalized. Returns (B, c)."""
    g = fs.global_feat.data
    if fs.parts is None:
        f = g
    else:
        parts = fs.parts.data
        if use_global:
            f = (g + parts.sum(axis=1)) / (parts.shape[1] + 1)
        else:
            f = parts.mean(axis=1)
    return l2_normalize(f) if normalize else f


def distance_matrix(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance between L2-normalized rows, i.e. 2 - 2 cos."""
    q, g = np.asarray(q, dtype=np.float64), np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dimensions differ: {q.shape} vs {g.shape}")
    return np.maximum(2.0 - 2.0 * (q @ g.T), 0.0)


def cmc_map(dist: np.ndarray, q_ids, q_cams, g_ids, g_cams, max_rank: int | None = None) -> EvalReport:
    """Single-query evaluation with same-id/same-camera and junk (-1) gallery filtering.

    Gallery items are ranked by ascending distance, ties broken by gallery
    index. Queries left with no valid match are skipped and counted.
    """
    dist = np.asarray(dist)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    num_q, num_g = dist.shape
    order = np.argsort(dist, axis=1, kind="stable")
    matches = g_ids[order] == q_ids[:, None]
    max_rank = num_g if max_rank is None else max_rank

    cmcs, aps = [], []
    skipped = 0
    for i in range(num_q):
        o = order[i]
        junk = (g_ids[o] == -1) | ((g_ids[o] == q_ids[i]) & (g_cams[o] == q_cams[i]))
        hits = matches[i][~junk]
        if not hits.any():
            skipped += 1
            continue
        cmc = np.zeros(max_rank)
        first = int(np.argmax(hits))
        if first < max_rank:
            cmc[first:] = 1.0
        cmcs.append(cmc)
        hit_ranks = np.flatnonzero(hits) + 1
        aps.append(float(np.mean(np.arange(1, hit_ranks.size + 1) / hit_ranks)))
    if skipped:
        log.warning("%d of %d queries had no valid gallery match and were skipped", skipped, num_q)
    if not aps:
        raise ValueError("no query has a valid gallery match")
    return EvalReport(cmc=np.mean(cmcs, axis=0), mAP=float(np.mean(aps)), ap=np.asarray(aps), num_skipped=skipped)


def head_diversity(attn_rows: np.ndarray) -> float:
    """Mean off-diagonal entry of the per-image head attention Gram matrix."""
    a = np.asarray(attn_rows, dtype=np.float64)
    if a.shape[1] < 2:
        return 0.0
    gram = a @ np.swapaxes(a, 1, 2)
    N = gram.shape[1]
    off = ~np.eye(N, dtype=bool)
    return float(gram[:, off].mean())
