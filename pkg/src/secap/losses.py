"""Identity, triplet, view, and orthogonality objectives with their
weighted combination.

Global terms score the view-invariant feature, local terms the refined
local feature; the view and orthogonality terms push viewpoint information
out of the invariant half.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .nn import Linear
from .tensor import (
    Tensor, add, clamp_min, log_softmax_lastdim, mul, neg, softplus, sub,
    swapaxes, tabs, take_pairs, tmean, tsqrt, tsum, matmul,
)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0   # global identity + triplet
    beta: float = 1.0    # local identity + triplet
    lam: float = 0.001   # view classification + orthogonality

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise ConfigurationError("loss weights must be non-negative")


class Heads:
    """Classifier heads over the learned features."""

    def __init__(self, dim: int, num_ids: int, num_views: int,
                 rng: np.random.Generator, dtype=np.float32,
                 with_local: bool = True, with_view: bool = True):
        if num_ids < 1:
            raise ConfigurationError(f"need at least one identity class, got {num_ids}")
        if with_view and num_views < 2:
            raise ConfigurationError(f"need at least two view classes, got {num_views}")
        self.num_ids = num_ids
        self.num_views = num_views
        self.id_global = Linear("heads.id_global", dim, num_ids, rng, dtype)
        self.id_local = Linear("heads.id_local", dim, num_ids, rng, dtype) if with_local else None
        self.view = Linear("heads.view", dim, num_views, rng, dtype) if with_view else None

    def parameters(self):
        params = list(self.id_global.parameters())
        if self.id_local is not None:
            params.extend(self.id_local.parameters())
        if self.view is not None:
            params.extend(self.view.parameters())
        return params


def _mean_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(
            f"label outside [0, {num_classes}): {labels.min()}..{labels.max()}")
    logp = log_softmax_lastdim(logits)
    picked = take_pairs(logp, np.arange(n), labels.astype(np.intp))
    return neg(tmean(picked))


def id_ce_loss(features: Tensor, labels: np.ndarray, classifier: Linear) -> Tensor:
    """Mean softmax cross-entropy of the identity classifier."""
    return _mean_cross_entropy(classifier(features), labels)


def view_ce_loss(view_feat: Tensor, view_labels: np.ndarray, classifier: Linear) -> Tensor:
    """Mean cross-entropy of the view classifier on the view-related feature."""
    return _mean_cross_entropy(classifier(view_feat), view_labels)


def pairwise_euclidean(features: Tensor) -> Tensor:
    """All-pairs Euclidean distances, differentiably.

    The sqrt argument is floored so coincident points cannot produce infinite
    gradients; the diagonal is masked to exactly zero (value and gradient),
    keeping self-distances honest.
    """
    b = features.shape[0]
    sq = tsum(mul(features, features), axis=1, keepdims=True)          # B x 1
    cross = matmul(features, swapaxes(features, 0, 1))                 # B x B
    d2 = add(sub(sq, mul(cross, Tensor(np.asarray(2.0, dtype=features.dtype)))),
             swapaxes(sq, 0, 1))
    off_diag = Tensor((1.0 - np.eye(b)).astype(features.dtype))
    return mul(tsqrt(clamp_min(mul(d2, off_diag), 1e-12)), off_diag)


def soft_triplet_loss(features: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-hard mining with the smooth margin ln(1 + exp(d_ap - d_an)).

    Hardest positive is the max distance over same-identity rows (the anchor's
    own zero never wins unless it is the only positive, which keeps batches
    with a lone image of some identity well-defined); hardest negative is the
    min over different-identity rows.
    """
    labels = np.asarray(labels)
    b = features.shape[0]
    if labels.shape != (b,):
        raise DimensionError(f"expected {b} labels, got shape {labels.shape}")
    if np.unique(labels).size < 2:
        raise ContractError("triplet mining needs at least two identities in the batch")

    dist = pairwise_euclidean(features)
    raw = dist.data
    same = labels[:, None] == labels[None, :]
    pos_idx = np.where(same, raw, -np.inf).argmax(axis=1)
    neg_idx = np.where(same, np.inf, raw).argmin(axis=1)
    anchors = np.arange(b)
    d_ap = take_pairs(dist, anchors, pos_idx)
    d_an = take_pairs(dist, anchors, neg_idx)
    return tmean(softplus(sub(d_ap, d_an)))


def orthogonality_loss(x_inv: Tensor, view_feat: Tensor) -> Tensor:
    """Mean over the batch of the L1 overlap between the two features."""
    if x_inv.shape != view_feat.shape:
        raise DimensionError(
            f"feature shapes disagree: {x_inv.shape} vs {view_feat.shape}")
    return tmean(tsum(tabs(mul(x_inv, view_feat)), axis=1))


@dataclass
class LossParts:
    id_g: Tensor
    tri_g: Tensor
    id_l: Optional[Tensor] = None
    tri_l: Optional[Tensor] = None
    view: Optional[Tensor] = None
    orth: Optional[Tensor] = None

    def scalars(self) -> dict[str, float]:
        out = {}
        for key in ("id_g", "tri_g", "id_l", "tri_l", "view", "orth"):
            part = getattr(self, key)
            out[key] = float(part.item()) if part is not None else 0.0
        return out


def total_loss(parts: LossParts, w: LossWeights) -> Tensor:
    """alpha*(global id + triplet) + beta*(local) + lambda*(view + orthogonality).

    Absent parts (ablated branches) contribute exactly zero.
    """
    def weighted(terms, weight):
        live = [t for t in terms if t is not None]
        if not live:
            return None
        acc = live[0]
        for t in live[1:]:
            acc = add(acc, t)
        return mul(acc, Tensor(np.asarray(weight, dtype=acc.dtype)))

    total = None
    for group, weight in (((parts.id_g, parts.tri_g), w.alpha),
                          ((parts.id_l, parts.tri_l), w.beta),
                          ((parts.view, parts.orth), w.lam)):
        term = weighted(group, weight)
        if term is not None:
            total = term if total is None else add(total, term)
    if total is None:
        raise ContractError("no loss terms present")
    return total
