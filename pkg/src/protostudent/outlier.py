"""Outlier scoring from prototype similarities, the max-probability
baseline, and AUC evaluation.

Every head yields per-prototype similarity scores u_k in [0,1] (given the
nonnegative encoder): Heads I and II use the classification-layer inputs
z(p_k) directly; Head III derives them from attention-weighted cosine
maps. The outlier score is one minus the mean of the top-k' scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .heads import SimilarityRecord, StudentModel
from .replacement import ParameterError
from .tensor import Tensor


class MetricError(ValueError):
    """The metric is undefined for the given inputs."""


@dataclass
class OutlierReport:
    """Per-sample scoring record."""
    u: np.ndarray              # [K]
    o: float
    predicted_class: int
    maxprob: float
    is_outlier: bool | None = None


def spatial_sim_map(rec: SimilarityRecord) -> np.ndarray:
    """Attended similarity map r per (sample, prototype), [B,K,H,W].

    Head III only: the attention weight(s) times the normalized cosine at
    each position, so every entry stays in [0,1] for nonnegative
    features. III-A pairs its attention with the aligned cosine map,
    III-B/III-C with the best-match cosine map; III-C multiplies both of
    its attention maps in.
    """
    kind = rec.kind
    if kind == "III-A":
        r = rec.attn.data * rec.cos_iia.data
    elif kind == "III-B":
        r = rec.attn.data * rec.cos_iib.data
    elif kind == "III-C":
        r = rec.attn.data * rec.attn_p.data * rec.cos_iib.data
    else:
        raise MetricError(f"no attended similarity map for head {kind!r}")
    b, k, _ = r.shape
    return r.reshape(b, k, *rec.hw_shape)


def u_from_record(rec: SimilarityRecord) -> np.ndarray:
    """Per-prototype similarity scores from a head forward record, [B,K].

    Heads I/II: u_k = z(p_k). Heads III-A/B: spatial mean of the attended
    similarity map. Head III-C: its spatial max.
    """
    kind = rec.kind
    if kind in ("I", "II-A", "II-B"):
        return rec.z.data.copy()
    if kind in ("III-A", "III-B"):
        return spatial_sim_map(rec).mean(axis=(2, 3))
    if kind == "III-C":
        return spatial_sim_map(rec).max(axis=(2, 3))
    raise MetricError(f"unknown head kind {kind!r}")


def u_scores(student: StudentModel, x: np.ndarray) -> np.ndarray:
    """Similarity scores of one sample against every prototype, [K]."""
    arr = np.asarray(x, dtype=np.float64)
    _, rec = student.forward(arr[None] if arr.ndim == 3 else arr)
    return u_from_record(rec)[0]


def outlier_score(u: np.ndarray, k_prime: int) -> float:
    """1 - mean of the k' largest similarity scores (class-agnostic)."""
    u = np.asarray(u, dtype=np.float64)
    if not 1 <= k_prime <= len(u):
        raise ParameterError(f"k'={k_prime} out of range for K={len(u)}")
    top = np.sort(u)[::-1][:k_prime]
    return float(1.0 - top.mean())


def maxprob_score(model, images: np.ndarray) -> np.ndarray:
    """Negative probability of the predicted class; higher is more
    anomalous. Works on any model exposing predict_logits."""
    arr = np.asarray(images, dtype=np.float64)
    squeeze = arr.ndim == 3
    logits = model.predict_logits(arr[None] if squeeze else arr)
    with T.no_grad():
        probs = T.softmax(Tensor(logits), axis=-1).data
    scores = -probs.max(axis=-1)
    return float(scores[0]) if squeeze else scores


def auc(scores, labels) -> float:
    """Probability that a random outlier outranks a random normal sample,
    ties counted one half (rank form of the Mann-Whitney statistic)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_out = int(labels.sum())
    n_norm = len(labels) - n_out
    if n_out == 0 or n_norm == 0:
        raise MetricError("AUC needs both normal and outlier samples")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    rank_pos = 1.0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (rank_pos + (rank_pos + (j - i))) / 2.0
        rank_pos += j - i + 1
        i = j + 1
    r_out = ranks[labels].sum()
    return float((r_out - n_out * (n_out + 1) / 2.0) / (n_out * n_norm))


def score_samples(student: StudentModel, images: np.ndarray, k_prime: int,
                  is_outlier=None, batch_size: int = 128,
                  baseline_model=None) -> list:
    """OutlierReport per image, evaluated in deterministic batches.

    The baseline max-probability score comes from baseline_model when
    given (typically the teacher, the non-prototype reference predictor),
    otherwise from the student itself.
    """
    images = np.asarray(images, dtype=np.float64)
    flags = [None] * len(images) if is_outlier is None else list(is_outlier)
    reports = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        logits, rec = student.forward(chunk)
        u_all = u_from_record(rec)
        base = maxprob_score(baseline_model or student, chunk)
        preds = logits.data.argmax(axis=1)
        for i in range(len(chunk)):
            reports.append(OutlierReport(u=u_all[i], o=outlier_score(u_all[i], k_prime),
                                         predicted_class=int(preds[i]),
                                         maxprob=float(base[i]),
                                         is_outlier=flags[start + i]))
    return reports
