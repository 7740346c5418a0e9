"""The four-term training objective and the head-specific prototype
distance terms.

The distance terms are evaluated through the squared-distance expansion
||a - b||^2 = ||a||^2 + ||b||^2 - 2 a.b over normalized feature columns,
which lets them share the cosine maps the head forward pass already
produces instead of materializing per-pair difference tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import heads as H
from . import tensor as T
from .encoder import TrainingError
from .tensor import Tensor

EPS_LOG = 1e-12
EPS_J = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lam1: float = 1.0
    lam2: float = 1.0
    lam3: float = 0.1

    def __post_init__(self):
        for name in ("lam1", "lam2", "lam3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and nonnegative")


def cross_entropy(targets, logits) -> Tensor:
    """-sum(t * log(softmax(y))), averaged over the batch.

    Computed through log-sum-exp, so log probabilities stay finite for
    any finite logits (the role of the eps-inside-log guard) without the
    gradient saturation an additive guard would cause.

    targets may be an integer label, an integer label array, or a
    probability vector/matrix summing to 1 per row.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    squeeze = logits.ndim == 1
    if squeeze:
        logits = T.reshape(logits, (1, logits.shape[0]))
    logp = T.log_softmax(logits, axis=-1)
    tarr = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if np.issubdtype(tarr.dtype, np.integer):
        labels = np.atleast_1d(tarr).astype(np.int64)
        picked = T.gather(logp, (np.arange(logits.shape[0]), labels))
        return -T.tmean(picked)
    tarr = np.atleast_2d(tarr.astype(np.float64))
    return -T.tmean(T.tsum(T.mul(Tensor(tarr), logp), axis=-1))


def aux_mask_loss(y_pred, y_mask) -> Tensor:
    """Cross-entropy of the masked logits against the unmasked argmax,
    treated as a hard constant label."""
    return cross_entropy(np.asarray(y_pred, dtype=np.int64), y_mask)


def _same_class_masks(labels_x, labels_p) -> tuple:
    lx = np.asarray(labels_x).reshape(-1, 1)
    lp = np.asarray(labels_p).reshape(1, -1)
    same = (lx == lp).astype(np.float64)
    return same, 1.0 - same


def _signed_mean(d: Tensor, labels_x, labels_p) -> Tensor:
    """mean over pairs of d for same-class pairs and 1/(d+eps) otherwise."""
    same, diff = _same_class_masks(labels_x, labels_p)
    inv = T.div(1.0, T.add(d, EPS_J))
    return T.tmean(T.add(T.mul(d, same), T.mul(inv, diff)))


def _pair_sq_dist(nx: Tensor, np_: Tensor, cos: Tensor) -> Tensor:
    """[B] + [K] - 2*[B,K] -> [B,K] squared distances."""
    b, k = cos.shape
    return T.add(T.add(T.reshape(nx, (b, 1)), T.reshape(np_, (1, k))), T.mul(cos, -2.0))


def _spatial_sq_dist(nx: Tensor, np_: Tensor, cos: Tensor) -> Tensor:
    """Mean over positions of column distances: [B,HW],[K,HW],[B,K,HW] -> [B,K]."""
    b, k, hw = cos.shape
    d = T.add(T.add(T.reshape(nx, (b, 1, hw)), T.reshape(np_, (1, k, hw))), T.mul(cos, -2.0))
    return T.tmean(d, axis=2)


def _gather_bk(t: Tensor, arg: np.ndarray, axis_of_t: str) -> Tensor:
    """Select per-(b,k) columns out of [B,HW] or [K,HW] using flat argmax
    indices [B,K,HW]."""
    b, k, hw = arg.shape
    width = t.shape[1]
    if axis_of_t == "p":
        flat = np.arange(k)[None, :, None] * width + arg
    else:
        flat = np.arange(b)[:, None, None] * width + arg
    return T.take_flat(t, flat)


def j_from_record(rec: H.SimilarityRecord, labels_x, labels_p) -> Tensor:
    """Head-appropriate distance objective from a forward record."""
    kind = rec.kind
    if kind == "I":
        cos = T.matmul(rec.gxh, T.transpose(rec.gph, (1, 0)))
        nx = T.tsum(T.square(rec.gxh), axis=1)
        np_ = T.tsum(T.square(rec.gph), axis=1)
        return _signed_mean(_pair_sq_dist(nx, np_, cos), labels_x, labels_p)
    if kind in ("II-A", "III-A"):
        d = _spatial_sq_dist(rec.norms_x, rec.norms_p, rec.cos_iia)
        return _signed_mean(d, labels_x, labels_p)
    if kind in ("II-B", "III-B"):
        np_sel = _gather_bk(rec.norms_p, rec.argmax_p, "p")
        b, k, hw = rec.cos_iib.shape
        d = T.tmean(T.add(T.add(T.reshape(rec.norms_x, (b, 1, hw)), np_sel),
                          T.mul(rec.cos_iib, -2.0)), axis=2)
        return _signed_mean(d, labels_x, labels_p)
    if kind == "III-C":
        np_sel = _gather_bk(rec.norms_p, rec.argmax_p, "p")
        b, k, hw = rec.cos_iib.shape
        d_x = T.tmean(T.add(T.add(T.reshape(rec.norms_x, (b, 1, hw)), np_sel),
                            T.mul(rec.cos_iib, -2.0)), axis=2)
        nx_sel = _gather_bk(rec.norms_x, rec.argmax_x, "x")
        d_p = T.tmean(T.add(T.add(nx_sel, T.reshape(rec.norms_p, (1, k, hw))),
                            T.mul(rec.cos_iiic, -2.0)), axis=2)
        return T.add(_signed_mean(d_x, labels_x, labels_p),
                     _signed_mean(d_p, labels_x, labels_p))
    raise ValueError(f"unknown head kind {kind!r}")


def _record_for(kind: str, batch_features, store) -> H.SimilarityRecord:
    fx = batch_features if isinstance(batch_features, Tensor) else Tensor(np.asarray(batch_features, dtype=np.float64))
    if fx.ndim == 3:
        fx = T.reshape(fx, (1, *fx.shape))
    fp = store.features if isinstance(store.features, Tensor) else Tensor(np.asarray(store.features, dtype=np.float64))
    rec = H.SimilarityRecord(kind=kind, hw_shape=fx.shape[2:], z=None)
    if kind == "I":
        rec.gxh = T.l2_normalize(T.avgpool_spatial(fx), axis=1)
        rec.gph = T.l2_normalize(T.avgpool_spatial(fp), axis=1)
        return rec
    fx_flat = T.reshape(fx, (fx.shape[0], fx.shape[1], -1))
    fp_flat = T.reshape(fp, (fp.shape[0], fp.shape[1], -1))
    fxh = T.l2_normalize(fx_flat, axis=1)
    fph = T.l2_normalize(fp_flat, axis=1)
    rec.norms_x = T.tsum(T.square(fxh), axis=1)
    rec.norms_p = T.tsum(T.square(fph), axis=1)
    allpairs = H.cosine_allpairs(fxh, fph)
    if kind in ("II-A", "III-A"):
        rec.cos_iia = H._diag_positions(allpairs)
    elif kind in ("II-B", "III-B"):
        rec.cos_iib, rec.argmax_p = T.tmax(allpairs, axis=3)
    elif kind == "III-C":
        rec.cos_iib, rec.argmax_p = T.tmax(allpairs, axis=3)
        rec.cos_iiic, rec.argmax_x = T.tmax(allpairs, axis=2)
    return rec


def j_head1(batch_features, batch_labels, store) -> Tensor:
    """Distance term over pooled normalized features (Head I)."""
    rec = _record_for("I", batch_features, store)
    return j_from_record(rec, batch_labels, store.labels)


def j_headA(batch_features, batch_labels, store) -> Tensor:
    """Aligned-position distance term (Heads II-A and III-A)."""
    rec = _record_for("II-A", batch_features, store)
    return j_from_record(rec, batch_labels, store.labels)


def j_headB(batch_features, batch_labels, store) -> Tensor:
    """Best-match-position distance term (Heads II-B and III-B)."""
    rec = _record_for("II-B", batch_features, store)
    return j_from_record(rec, batch_labels, store.labels)


def j_headC(batch_features, batch_labels, store) -> Tensor:
    """Two-sided best-match distance term (Head III-C)."""
    rec = _record_for("III-C", batch_features, store)
    return j_from_record(rec, batch_labels, store.labels)


J_BY_KIND = {"I": j_head1, "II-A": j_headA, "II-B": j_headB,
             "III-A": j_headA, "III-B": j_headB, "III-C": j_headC}


def total_loss(y_true, y, y_teacher, y_pred, y_mask, j_value, weights: LossWeights) -> tuple:
    """Supervised CE + distillation CE + masked-output CE + distance term.

    Returns (total Tensor, {term: float}). Raises TrainingError naming the
    first non-finite component.
    """
    with T.no_grad():
        soft = T.softmax(y_teacher if isinstance(y_teacher, Tensor) else Tensor(np.asarray(y_teacher, dtype=np.float64)), axis=-1)
    l_sup = cross_entropy(y_true, y)
    l_dist = cross_entropy(soft.data, y)
    l_aux = aux_mask_loss(y_pred, y_mask)
    j_value = j_value if isinstance(j_value, Tensor) else Tensor(float(j_value))
    parts = {"supervised": l_sup, "distill": l_dist, "aux_mask": l_aux, "distance": j_value}
    for name, part in parts.items():
        if not np.isfinite(part.data).all():
            raise TrainingError(f"loss term '{name}' is non-finite")
    total = T.add(T.add(l_sup, T.mul(l_dist, weights.lam1)),
                  T.add(T.mul(l_aux, weights.lam2), T.mul(j_value, weights.lam3)))
    return total, {name: float(part.data) for name, part in parts.items()}
