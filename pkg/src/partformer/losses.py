"""Training objectives: identity CE, soft-margin batch-hard triplet, and the two
head-diversity penalties (attention Gram vs identity, masked classifier
distributions across heads), combined into one weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import FeatureSet, _trunc_normal
from .tensor import Tensor


class LossError(ValueError):
    """Inputs violate a loss precondition (bad labels, unminable batch, off-simplex rows)."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 3.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")


def _labels(labels, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if num_classes is not None and y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LossError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class, no label smoothing."""
    B, C = logits.shape
    y = _labels(labels, C)
    if y.size != B:
        raise LossError(f"{B} rows of logits but {y.size} labels")
    return -T.mean(T.log_softmax(logits)[np.arange(B), y])


def hardest_pairs(dist: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor, index of the farthest same-id sample and the nearest other-id sample.

    The anchor itself counts as a positive, so singleton identities mine d_ap = 0.
    """
    same = labels[:, None] == labels[None, :]
    if same.all():
        raise LossError("batch-hard mining needs at least two identities in the batch")
    pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    return pos, neg


def triplet_soft(features: Tensor, labels) -> Tensor:
    """Batch-hard triplet with soft margin: mean softplus(d_ap - d_an) on Euclidean distances."""
    B = features.shape[0]
    y = _labels(labels)
    if y.size != B:
        raise LossError(f"{B} features but {y.size} labels")
    dist = T.sqrt(T.clamp_min(T.pairwise_sqdist(features), 1e-12))
    pos, neg = hardest_pairs(dist.data, y)
    rows = np.arange(B)
    return T.mean(T.softplus(dist[rows, pos] - dist[rows, neg]))


def adc_loss(attn_rows: Tensor, tol: float = 1e-6) -> Tensor:
    """Entrywise 1-norm of (a a^T - I) per image, averaged over the batch.

    ``attn_rows`` is (B, N, M), each row a distribution over image tokens.
    """
    B, N, M = attn_rows.shape
    sums = attn_rows.data.sum(axis=-1)
    if np.any(np.abs(sums - 1) > tol) or np.any(attn_rows.data < 0):
        raise LossError(f"attention rows must lie on the simplex (row sums span [{sums.min()}, {sums.max()}])")
    gram = attn_rows @ attn_rows.T
    eye = Tensor(np.eye(N, dtype=attn_rows.dtype))
    return T.mean(T.sum(T.abs(gram - eye), axis=(1, 2)))


def _drop_true_class(labels: np.ndarray, C: int) -> np.ndarray:
    cols = np.broadcast_to(np.arange(C), (labels.size, C))
    keep = cols != labels[:, None]
    return cols[keep].reshape(labels.size, C - 1)


def cdc_loss(part_logits: Tensor, labels) -> Tensor:
    """Mean over head pairs i < j of <softmax(D_i without y), softmax(D_j without y)>,
    averaged over the batch. ``part_logits`` is (N, B, C). Zero when N < 2."""
    N, B, C = part_logits.shape
    if C < 2:
        raise LossError("correlation diversity needs at least two classes")
    y = _labels(labels, C)
    if y.size != B:
        raise LossError(f"{B} rows of logits but {y.size} labels")
    if N < 2:
        return Tensor(np.zeros((), dtype=part_logits.dtype))
    keep = _drop_true_class(y, C)
    masked = part_logits[:, np.arange(B)[:, None], keep]  # (N, B, C-1)
    probs = T.softmax(masked).transpose(1, 0, 2)  # (B, N, C-1)
    gram = probs @ probs.T  # (B, N, N)
    upper = Tensor(np.triu(np.ones((N, N), dtype=part_logits.dtype), k=1))
    pair_sum = T.sum(gram * upper, axis=(1, 2))
    return T.mean(pair_sum) * (2.0 / (N * (N - 1)))


class ClassifierBank:
    """One bias-free linear classifier for the global feature and one per part.

    With ``neck`` set, each feature passes through a batch normalization
    (batch statistics, learnable gain/bias) before its classifier.
    """

    def __init__(self, embed_dim: int, num_classes: int, num_parts: int, seed: int = 0,
                 dtype=np.float64, neck: bool = False, std: float = 0.001):
        rng = np.random.default_rng(seed)
        self.embed_dim, self.num_classes, self.num_parts, self.neck = embed_dim, num_classes, num_parts, neck
        c, C, N = embed_dim, num_classes, num_parts
        raw = {"classifier.global": _trunc_normal(rng, (c, C), std)}
        if N:
            raw["classifier.parts"] = _trunc_normal(rng, (N, c, C), std)
        if neck:
            raw["neck.global.gain"] = np.ones(c)
            raw["neck.global.bias"] = np.zeros(c)
            if N:
                raw["neck.parts.gain"] = np.ones((N, c))
                raw["neck.parts.bias"] = np.zeros((N, c))
        self.params = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in raw.items()}

    def _bn(self, x: Tensor, prefix: str) -> Tensor:
        # normalize each channel over the batch axis, which is axis 0
        axes = list(range(1, x.ndim)) + [0]
        back = list(np.argsort(axes))
        xn = T.layernorm(x.transpose(axes)).transpose(back)
        return xn * self.params[prefix + ".gain"] + self.params[prefix + ".bias"]

    def global_logits(self, f: Tensor) -> Tensor:
        if self.neck:
            f = self._bn(f, "neck.global")
        return f @ self.params["classifier.global"]

    def part_logits(self, parts: Tensor) -> Tensor:
        """(B, N, c) -> (N, B, C)."""
        if self.neck:
            parts = self._bn(parts, "neck.parts")
        return parts.transpose(1, 0, 2) @ self.params["classifier.parts"]


def total_loss(fs: FeatureSet, labels, bank: ClassifierBank, weights: LossWeights,
               use_global: bool = True) -> tuple[Tensor, dict[str, float]]:
    """L_g + L_p + alpha * adc + beta * cdc, plus the four unweighted terms for logging.

    A term whose weight is zero is still reported but kept off the graph.
    """
    y = _labels(labels, bank.num_classes)
    zero = Tensor(np.zeros((), dtype=fs.global_feat.dtype))
    l_g = zero
    if use_global:
        l_g = ce_loss(bank.global_logits(fs.global_feat), y) + triplet_soft(fs.global_feat, y)

    l_p, l_cdc = zero, zero
    part_logits = None
    if fs.parts is not None:
        N = fs.num_parts
        part_logits = bank.part_logits(fs.parts)
        per_head = [ce_loss(part_logits[i], y) + triplet_soft(fs.parts[:, i, :], y) for i in range(N)]
        acc = per_head[0]
        for term in per_head[1:]:
            acc = acc + term
        l_p = acc * (1.0 / N)

    def weighted(w, fn):
        if w == 0:
            with T.no_grad():
                return fn(), None
        val = fn()
        return val, val * w

    l_adc, adc_term = weighted(weights.alpha, lambda: adc_loss(fs.attn_rows))
    if part_logits is not None:
        l_cdc, cdc_term = weighted(weights.beta, lambda: cdc_loss(part_logits, y))
    else:
        cdc_term = None

    total = l_g + l_p if use_global else l_p
    for term in (adc_term, cdc_term):
        if term is not None:
            total = total + term
    breakdown = {
        "global": float(l_g.data),
        "part": float(l_p.data),
        "adc": float(l_adc.data),
        "cdc": float(l_cdc.data),
    }
    return total, breakdown
