"""Training losses: identity cross-entropy, batch-hard triplet, box L2."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import params_to_box
from .tensor import Tensor, matmul

TRIPLET_MARGIN = 0.3
_MASK_BIG = 1e9
_DIST_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0       # triplet term
    beta: float = 1.0        # identity cross-entropy term
    black_weight: float = 1.0  # black-appearance cross-entropy term


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy, stabilized through log-sum-exp.

    logits: [N, C] tensor; labels: [N] integer array.
    """
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy: labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy: label outside [0, {c})")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    lse = logits.logsumexp(axis=1)
    picked = (logits * Tensor(onehot)).sum(axes=1)
    return (lse - picked).mean()


def batch_hard_triplet(embeddings, ids, margin=TRIPLET_MARGIN):
    """Mean hinge over anchors of (margin + hardest-pos - hardest-neg).

    For each anchor the hardest positive is the farthest same-id other
    sample and the hardest negative the nearest other-id sample, under
    plain Euclidean distance.  Requires at least two ids and at least
    two samples for every id in the batch.
    """
    if not isinstance(embeddings, Tensor):
        embeddings = Tensor(embeddings)
    ids = np.asarray(ids)
    n = embeddings.shape[0]
    if ids.shape != (n,):
        raise ValueError(f"triplet: ids shape {ids.shape} does not match batch {n}")
    same = ids[:, None] == ids[None, :]
    eye = np.eye(n, dtype=bool)
    pos = same & ~eye
    neg = ~same
    if not pos.any(axis=1).all():
        raise ValueError("triplet: every id in the batch needs at least two samples")
    if not neg.any(axis=1).all():
        raise ValueError("triplet: batch needs at least two distinct ids")

    dt = embeddings.dtype
    sq = (embeddings * embeddings).sum(axes=1)
    inner = matmul(embeddings, embeddings, tb=True)
    d2 = sq.reshape((n, 1)) + sq.reshape((1, n)) - inner * 2.0
    # the diagonal is exactly zero up to rounding and never selected;
    # shifting it off zero keeps the clamp away from its corner
    d2 = d2 + Tensor(np.eye(n, dtype=dt))
    dist = (d2.clip(lo=0.0) + _DIST_EPS).sqrt()

    pos_shift = Tensor(((~pos).astype(dt)) * -_MASK_BIG)
    neg_shift = Tensor(((~neg).astype(dt)) * -_MASK_BIG)
    hardest_pos = (dist + pos_shift).max(axes=1)
    hardest_neg = -((-dist) + neg_shift).max(axes=1)
    return (hardest_pos - hardest_neg + margin).relu().mean()


def box_l2(params, boxes):
    """Localization loss: squared error between the predicted crop box
    and the labeled box, summed and divided by 2N.

    params: [N, 4] tensor of (s_x, s_y, t_x, t_y); boxes: [N, 4]
    normalized (left, top, right, bottom).
    """
    if not isinstance(params, Tensor):
        params = Tensor(params)
    boxes = np.asarray(boxes, dtype=params.dtype)
    n = params.shape[0]
    if boxes.shape != (n, 4):
        raise ValueError(f"box_l2: boxes shape {boxes.shape} does not match params {params.shape}")
    if (boxes < 0).any() or (boxes > 1).any():
        raise ValueError("box_l2: box coordinates must lie in [0, 1]")
    if (boxes[:, 0] > boxes[:, 2]).any() or (boxes[:, 1] > boxes[:, 3]).any():
        raise ValueError("box_l2: malformed box (left > right or top > bottom)")
    pred = params_to_box(params)
    diff = pred - Tensor(boxes)
    return (diff * diff).sum() / (2.0 * n)


def total_loss(parts, weights=LossWeights()):
    """Combine stage losses.

    parts maps names to scalar tensors: either {"box"} alone for the
    localization pretrain stage, or {"triplet", "ce"} with an optional
    "black" term for the embedding stages.
    """
    known = {"box", "triplet", "ce", "black"}
    unknown = set(parts) - known
    if unknown:
        raise ValueError(f"total_loss: unknown parts {sorted(unknown)}")
    if "box" in parts:
        if len(parts) != 1:
            raise ValueError("total_loss: the box term stands alone in the pretrain stage")
        return parts["box"]
    if "triplet" not in parts or "ce" not in parts:
        raise ValueError("total_loss: embedding stages need both triplet and ce parts")
    out = parts["triplet"] * weights.alpha + parts["ce"] * weights.beta
    if "black" in parts:
        out = out + parts["black"] * weights.black_weight
    return out
