"""Region-perturbation evaluation of heatmap quality.

The image is partitioned into region x region tiles. Tiles are removed
(replaced by the per-channel dataset mean) either in decreasing order of
summed absolute relevance of the top-1 prototype pair, or in random
order as a baseline, while the predicted-class logit is tracked. Good
heatmaps make the relevance ordering destroy the logit faster.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .heads import ConfigurationError, StudentModel
from .lrp import LrpParams, heatmaps
from .outlier import u_from_record


@dataclass
class PerturbationCurve:
    steps: int
    mean_logits: list          # step 0 = unperturbed
    region: int
    policy: str                # "relevance" or "random"

    def aopc(self) -> float:
        """Mean drop of the predicted-class logit over all steps."""
        base = self.mean_logits[0]
        drops = [base - v for v in self.mean_logits[1:]]
        return float(np.mean(drops)) if drops else 0.0


def tile_order(heat: np.ndarray, region: int) -> np.ndarray:
    """Tile indices by decreasing summed |relevance|; ties keep the lower
    flat tile index first."""
    h, w = heat.shape
    th, tw = h // region, w // region
    sums = np.abs(heat).reshape(th, region, tw, region).sum(axis=(1, 3)).reshape(-1)
    return np.argsort(-sums, kind="stable")


def _apply_tile(img: np.ndarray, tile: int, region: int, tw: int, fill: np.ndarray):
    ty, tx = divmod(int(tile), tw)
    img[:, ty * region:(ty + 1) * region, tx * region:(tx + 1) * region] = fill[:, None, None]


def perturb_eval(student: StudentModel, images: np.ndarray, region: int = 4,
                 steps: int = 15, policy: str = "relevance",
                 params: LrpParams | None = None, fill: np.ndarray | None = None,
                 seed: int = 0, heats: list | None = None) -> PerturbationCurve:
    """Perturbation curve over an evaluation set.

    fill defaults to the per-channel mean of the given images. heats may
    carry precomputed input-side heatmaps (top-1 prototype pair per
    sample) to share between policies.
    """
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    if h % region or w % region:
        raise ConfigurationError(f"region {region} does not divide image size {h}x{w}")
    n_tiles = (h // region) * (w // region)
    if steps > n_tiles:
        raise ConfigurationError(f"steps {steps} exceeds tile count {n_tiles}")
    if policy not in ("relevance", "random"):
        raise ConfigurationError(f"unknown policy {policy!r}")
    fill = images.mean(axis=(0, 2, 3)) if fill is None else np.asarray(fill, dtype=np.float64)

    logits0, rec0 = student.forward(images)
    preds = logits0.data.argmax(axis=1)

    orders = []
    if policy == "relevance":
        if heats is None:
            heats = top1_heatmaps(student, images, params, rec0)
        for i in range(n):
            orders.append(tile_order(heats[i], region))
    else:
        for i in range(n):
            rng = np.random.default_rng([seed, i])
            orders.append(rng.permutation(n_tiles))

    work = images.copy()
    tw = w // region
    curve = [float(logits0.data[np.arange(n), preds].mean())]
    for step in range(steps):
        for i in range(n):
            _apply_tile(work[i], orders[i][step], region, tw, fill)
        logits = student.predict_logits(work)
        curve.append(float(logits[np.arange(n), preds].mean()))
    return PerturbationCurve(steps=steps, mean_logits=curve, region=region, policy=policy)


def top1_heatmaps(student: StudentModel, images: np.ndarray,
                  params: LrpParams | None = None, rec0=None) -> list:
    """Input-side heatmap against the highest-similarity prototype for
    each sample."""
    images = np.asarray(images, dtype=np.float64)
    if rec0 is None:
        rec0 = student.forward(images)[1]
    u_all = u_from_record(rec0)
    out = []
    for i in range(len(images)):
        k = int(np.argmax(u_all[i]))
        out.append(heatmaps(student, images[i], k, params).heat_input)
    return out
