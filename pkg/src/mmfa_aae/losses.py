"""Training losses on backbone features and hidden codes.

Every loss returns a scalar :class:`Tensor` whose backward pass is written out
by hand, so each one can be checked against finite differences on its own.
"""

from __future__ import annotations

import math

import numpy as np

from .diffcore.ops import weighted_sum
from .diffcore.tensor import NonFiniteError, Tensor, as_tensor, make_op

LOG_PROB_FLOOR = math.log(1e-300)


def _labels(labels, n: int, classes: int, what: str) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"{what} labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"{what} labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"{what} label out of range [0, {classes})")
    return labels.astype(np.intp)


def _softmax_nll(logits, labels, what: str) -> Tensor:
    z = as_tensor(logits)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError(f"{what} logits must be (n, classes), got {z.shape}")
    n, c = z.shape
    if c < 2:
        raise ValueError(f"{what} needs at least 2 classes")
    y = _labels(labels, n, c, what)
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    true_log_p = np.maximum(log_p[np.arange(n), y], LOG_PROB_FLOOR)
    value = np.asarray(-true_log_p.mean())

    def back(g):
        grad = np.exp(log_p)
        grad[np.arange(n), y] -= 1.0
        return (g * grad / n,)

    return make_op(value, (z,), back, what)


def identity_loss(logits, labels) -> Tensor:
    """Mean negative log-likelihood of the true identity under softmax(logits)."""
    return _softmax_nll(logits, labels, "identity_loss")


def domain_discrimination_loss(domain_logits, domain_labels) -> Tensor:
    """Mean negative log-likelihood of the true domain (discriminator objective)."""
    return _softmax_nll(domain_logits, domain_labels, "domain_loss")


def adversarial_loss(domain_logits, domain_labels) -> Tensor:
    """Negated discrimination loss; the feature path minimizes this."""
    d = domain_discrimination_loss(domain_logits, domain_labels)

    def back(g):
        return (-g,)

    return make_op(-d.data, (d,), back, "adversarial_loss")


def pairwise_distances(codes: np.ndarray) -> np.ndarray:
    diff = codes[:, None, :] - codes[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def hardest_pairs(codes: np.ndarray, labels: np.ndarray):
    """Batch-hard mining.

    Returns ``(anchors, positives, negatives, dist)`` where, for each valid
    anchor, the positive is the farthest other sample with the same identity
    and the negative the nearest sample with a different identity.  Ties go to
    the lower index.
    """
    dist = pairwise_distances(codes)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    not_self = ~np.eye(n, dtype=bool)
    pos_mask = same & not_self
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    anchors = np.flatnonzero(valid)
    positives = np.where(pos_mask, dist, -np.inf).argmax(axis=1)[anchors]
    negatives = np.where(neg_mask, dist, np.inf).argmin(axis=1)[anchors]
    return anchors, positives, negatives, dist


def triplet_loss_batch_hard(codes, identity_labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss with Euclidean distance, averaged over valid anchors."""
    h = as_tensor(codes)
    if h.ndim != 2 or h.shape[1] < 1:
        raise ValueError(f"codes must be (n, d) with d >= 1, got {h.shape}")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    labels = np.asarray(identity_labels)
    if labels.shape != (h.shape[0],):
        raise ValueError("one identity label per code is required")
    anchors, pos, neg, dist = hardest_pairs(h.data, labels)
    if anchors.size == 0:
        raise ValueError("no valid anchors: need an identity with >= 2 samples and a negative")
    d_ap = dist[anchors, pos]
    d_an = dist[anchors, neg]
    hinge = np.maximum(0.0, d_ap - d_an + margin)
    count = anchors.size
    value = np.asarray(math.fsum(hinge.tolist()) / count)

    def back(g):
        grad = np.zeros_like(h.data)
        active = hinge > 0
        for a, p, q, dp, dn in zip(anchors[active], pos[active], neg[active], d_ap[active], d_an[active]):
            u_ap = (h.data[a] - h.data[p]) / dp if dp > 0 else 0.0
            u_an = (h.data[a] - h.data[q]) / dn if dn > 0 else 0.0
            grad[a] += u_ap - u_an
            grad[p] -= u_ap
            grad[q] += u_an
        return (g * grad / count,)

    return make_op(value, (h,), back, "triplet_loss")


def reconstruction_loss(features, reconstructed) -> Tensor:
    """Squared l2 reconstruction error per sample, averaged over the batch."""
    x, r = as_tensor(features), as_tensor(reconstructed)
    if x.shape != r.shape:
        raise ValueError(f"reconstruction shape {r.shape} != feature shape {x.shape}")
    n = x.shape[0]
    resid = x.data - r.data
    value = np.asarray((resid * resid).sum() / n)

    def back(g):
        gx = g * 2.0 * resid / n
        return gx, -gx

    return make_op(value, (x, r), back, "reconstruction_loss")


LOSS_NAMES = ("l_id", "l_tri", "l_rec", "l_mmd", "l_adv")


def combined_feature_loss(
    l_id, l_tri=None, l_rec=None, l_mmd=None, l_adv=None,
    lambdas: tuple[float, float, float, float] = (1.0, 10.0, 0.2, 0.5),
) -> Tensor:
    """``l_id + λ1·l_tri + λ2·l_rec + λ3·l_mmd + λ4·l_adv``.

    Components passed as ``None`` are disabled and contribute nothing.
    """
    terms, weights = [], []
    for name, term, w in zip(LOSS_NAMES, (l_id, l_tri, l_rec, l_mmd, l_adv), (1.0, *lambdas)):
        if term is None:
            continue
        raw = term.data if isinstance(term, Tensor) else np.asarray(term, dtype=float)
        if not np.isfinite(raw).all():
            raise NonFiniteError(f"loss component {name} is non-finite")
        terms.append(as_tensor(term))
        weights.append(w)
    if not terms:
        return Tensor(0.0)
    return weighted_sum(terms, weights)
