"""Similarity head architectures mapping (input features, prototype
features) to class logits.

Six kinds are supported:

  I      cosine between spatially pooled feature vectors
  II-A   per-position cosine map between normalized feature columns
  II-B   per-position max cosine over all prototype positions
  III-A  attention-weighted channel products, attention from the II-A map
  III-B  as III-A but pairing each input position with its best-matching
         prototype position (attention from the II-B map)
  III-C  separate attention maps for input and prototype, multiplied

The per-position cosine maps for II-A and II-B are read out of one shared
all-pairs cosine matrix (diagonal vs row max) so the dominance relation
between the two kinds holds exactly, not just within float tolerance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import Encoder
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)

HEAD_KINDS = ("I", "II-A", "II-B", "III-A", "III-B", "III-C")


class ConfigurationError(ValueError):
    """Head kind and supplied features or parameters do not match."""


@dataclass
class HeadModel:
    """Learnable head parameters: per-(class, prototype) linear weights,
    class biases, and for Head III a shared nonnegative channel kernel."""
    kind: str
    w: Tensor                 # [class_count, K]
    b: Tensor                 # [class_count]
    conv1d_w: Tensor | None   # [C], elementwise >= 0, Head III only
    prototype_refs: object = None

    @property
    def params(self) -> list:
        ps = [self.w, self.b]
        if self.conv1d_w is not None:
            ps.append(self.conv1d_w)
        return ps

    def clip_conv1d(self):
        """Project the channel kernel back onto the nonnegative orthant;
        called after every optimizer step."""
        if self.conv1d_w is not None:
            np.maximum(self.conv1d_w.data, 0.0, out=self.conv1d_w.data)


def make_head(kind: str, k: int, class_count: int, channels: int, seed: int = 0) -> HeadModel:
    if kind not in HEAD_KINDS:
        raise ConfigurationError(f"unknown head kind {kind!r}")
    rng = np.random.default_rng([seed, 0x4D])
    # zero-init the classification layer: logits start scale-free no matter
    # how large the attended products are, and prototype asymmetry comes
    # from the z values themselves
    w = Tensor(np.zeros((class_count, k)), requires_grad=True)
    b = Tensor(np.zeros(class_count), requires_grad=True)
    conv1d_w = None
    if kind.startswith("III"):
        conv1d_w = Tensor(rng.uniform(0.0, 2.0 / channels, size=channels), requires_grad=True)
    return HeadModel(kind=kind, w=w, b=b, conv1d_w=conv1d_w)


@dataclass
class SimilarityRecord:
    """Intermediates of one head forward pass, kept for the losses, the
    relevance propagation, and the outlier scores.

    Batched over inputs (B) and prototypes (K); spatial grids are stored
    flattened (HW). Argmax arrays hold flat positions and are constants
    with respect to the graph.
    """
    kind: str
    hw_shape: tuple
    z: Tensor                          # [B, K]
    s_raw: Tensor | None = None        # [B, K] Head I cosine before ReLU
    gxh: Tensor | None = None          # [B, C] normalized pooled input features
    gph: Tensor | None = None          # [K, C]
    smap: Tensor | None = None         # [B, K, HW] similarity map (II)
    cos_iia: Tensor | None = None      # [B, K, HW] aligned cosines
    cos_iib: Tensor | None = None      # [B, K, HW] row-max cosines
    cos_iiic: Tensor | None = None     # [B, K, HW] column-max cosines (III-C)
    argmax_p: np.ndarray | None = None  # [B, K, HW] best prototype position per input position
    argmax_x: np.ndarray | None = None  # [B, K, HW] best input position per prototype position (III-C)
    attn: Tensor | None = None         # [B, K, HW] attention over input positions (III)
    attn_p: Tensor | None = None       # [B, K, HW] attention over prototype positions (III-C)
    attended: Tensor | None = None     # [B, K, C] attended similarity vector (III)
    norms_x: Tensor | None = None      # [B, HW] squared norms of normalized input columns
    norms_p: Tensor | None = None      # [K, HW]
    fxh: Tensor | None = None          # [B, C, HW] normalized input features
    fph: Tensor | None = None          # [K, C, HW]
    fx_raw: Tensor | None = None       # [B, C, HW]
    fp_raw: Tensor | None = None       # [K, C, HW]


def _flatten_spatial(t: Tensor) -> Tensor:
    n, c, h, w = t.shape
    return T.reshape(t, (n, c, h * w))


def cosine_allpairs(fxh: Tensor, fph: Tensor) -> Tensor:
    """All-pairs position cosines: [B,C,HWx] x [K,C,HWp] -> [B,K,HWx,HWp]."""
    bsz, c, hwx = fxh.shape
    k, cp, hwp = fph.shape
    if cp != c:
        raise DimensionError(f"channel mismatch: {c} vs {cp}")
    a2 = T.reshape(T.transpose(fxh, (0, 2, 1)), (bsz * hwx, c))
    b2 = T.reshape(T.transpose(fph, (1, 0, 2)), (c, k * hwp))
    m = T.matmul(a2, b2)
    m4 = T.reshape(m, (bsz, hwx, k, hwp))
    return T.transpose(m4, (0, 2, 1, 3))


def _diag_positions(allpairs: Tensor) -> Tensor:
    bsz, k, hw, hwp = allpairs.shape
    if hw != hwp:
        raise DimensionError("aligned similarity needs equal spatial grids")
    base = np.arange(bsz * k).reshape(bsz, k, 1) * (hw * hwp)
    flat = base + np.arange(hw) * (hwp + 1)
    return T.take_flat(allpairs, flat)


def _squared_column_norms(fh: Tensor) -> Tensor:
    # [*,C,HW] -> [*,HW]; equals 1 where the column was normalized, 0 where dead
    return T.tsum(T.square(fh), axis=1)


def head_forward(x_features: Tensor, store, model: HeadModel) -> tuple:
    """Run one head over a batch of feature maps against every prototype.

    Returns (logits [B, class_count], SimilarityRecord). x_features may be
    [C,H,W] or [B,C,H,W]; prototype features come from store.features.
    """
    fx = x_features if isinstance(x_features, Tensor) else Tensor(np.asarray(x_features, dtype=np.float64))
    if fx.ndim == 3:
        fx = T.reshape(fx, (1, *fx.shape))
    fp = store.features
    if not isinstance(fp, Tensor):
        fp = Tensor(np.asarray(fp, dtype=np.float64))
    if fx.shape[1:] != fp.shape[1:]:
        raise ConfigurationError(f"feature shape mismatch: input {fx.shape[1:]}, prototypes {fp.shape[1:]}")
    k = fp.shape[0]
    if model.w.shape[1] != k:
        raise ConfigurationError(f"head expects {model.w.shape[1]} prototypes, store has {k}")
    kind = model.kind
    if kind.startswith("III") and model.conv1d_w is None:
        raise ConfigurationError("Head III requires conv1d channel weights")
    if kind.startswith("III") and model.conv1d_w.shape[0] != fx.shape[1]:
        raise ConfigurationError("conv1d kernel length must equal feature channel count")
    hw_shape = fx.shape[2:]

    if kind == "I":
        gx = T.avgpool_spatial(fx)
        gp = T.avgpool_spatial(fp)
        gxh = T.l2_normalize(gx, axis=1)
        gph = T.l2_normalize(gp, axis=1)
        s_raw = T.matmul(gxh, T.transpose(gph, (1, 0)))  # [B, K]
        z = T.relu(s_raw)
        rec = SimilarityRecord(kind=kind, hw_shape=hw_shape, z=z, s_raw=s_raw, gxh=gxh, gph=gph)
        return T.linear(z, model.w, model.b), rec

    fx_flat = _flatten_spatial(fx)
    fp_flat = _flatten_spatial(fp)
    fxh = T.l2_normalize(fx_flat, axis=1)
    fph = T.l2_normalize(fp_flat, axis=1)
    allpairs = cosine_allpairs(fxh, fph)
    rec = SimilarityRecord(kind=kind, hw_shape=hw_shape, z=None,
                           norms_x=_squared_column_norms(fxh),
                           norms_p=_squared_column_norms(fph),
                           fxh=fxh, fph=fph, fx_raw=fx_flat, fp_raw=fp_flat)

    if kind == "II-A":
        rec.smap = rec.cos_iia = _diag_positions(allpairs)
        rec.z = T.tmean(rec.smap, axis=2)
    elif kind == "II-B":
        smap, arg = T.tmax(allpairs, axis=3)
        rec.smap = rec.cos_iib = smap
        rec.argmax_p = arg
        rec.z = T.tmean(smap, axis=2)
    elif kind == "III-A":
        rec.cos_iia = _diag_positions(allpairs)
        rec.attn = T.softmax(rec.cos_iia, axis=2)
        rec.attended = T.einsum("bki,bci,kci->bkc", rec.attn, fx_flat, fp_flat)
        rec.z = T.einsum("bkc,c->bk", rec.attended, model.conv1d_w)
    elif kind == "III-B":
        cos_iib, arg = T.tmax(allpairs, axis=3)
        rec.cos_iib = cos_iib
        rec.argmax_p = arg
        rec.attn = T.softmax(cos_iib, axis=2)
        bsz, kk, hw = cos_iib.shape
        c = fx.shape[1]
        # flat index into fp[k,c,j]: (k*C + c)*HW + arg[b,k,i]
        base_kc = (np.arange(kk)[:, None] * c + np.arange(c)[None, :]) * hw
        flat = base_kc[None, :, :, None] + arg[:, :, None, :]
        fp_sel = T.take_flat(fp_flat, flat)
        rec.attended = T.einsum("bki,bci,bkci->bkc", rec.attn, fx_flat, fp_sel)
        rec.z = T.einsum("bkc,c->bk", rec.attended, model.conv1d_w)
    elif kind == "III-C":
        cos_iib, arg_p = T.tmax(allpairs, axis=3)
        cos_iiic, arg_x = T.tmax(allpairs, axis=2)
        rec.cos_iib = cos_iib
        rec.cos_iiic = cos_iiic
        rec.argmax_p = arg_p
        rec.argmax_x = arg_x
        rec.attn = T.softmax(cos_iib, axis=2)
        rec.attn_p = T.softmax(cos_iiic, axis=2)
        joint = T.mul(rec.attn, rec.attn_p)
        rec.attended = T.einsum("bki,bci,kci->bkc", joint, fx_flat, fp_flat)
        rec.z = T.einsum("bkc,c->bk", rec.attended, model.conv1d_w)
    else:
        raise ConfigurationError(f"unknown head kind {kind!r}")

    return T.linear(rec.z, model.w, model.b), rec


# -- single-pair similarity operations --------------------------------------
#
# Value-level views of the batched machinery above, for toys, tests, and
# the relevance propagation code. All take and return plain arrays.

def _pair_setup(fx, fp):
    fx = np.asarray(fx, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    if fx.ndim != 3 or fp.ndim != 3 or fx.shape[0] != fp.shape[0]:
        raise DimensionError(f"expected [C,H,W] maps with equal channels, got {fx.shape}, {fp.shape}")
    if fx.shape[1] * fx.shape[2] == 0 or fp.shape[1] * fp.shape[2] == 0:
        raise DimensionError("empty spatial grid")
    with T.no_grad():
        fxh = T.l2_normalize_channels(Tensor(fx)).data
        fph = T.l2_normalize_channels(Tensor(fp)).data
    c = fx.shape[0]
    return fxh.reshape(c, -1), fph.reshape(c, -1)


def sim_I(gx, gp) -> float:
    """Cosine similarity of two pooled feature vectors; 0 for zero norms."""
    gx = np.asarray(gx, dtype=np.float64)
    gp = np.asarray(gp, dtype=np.float64)
    nx, npr = np.linalg.norm(gx), np.linalg.norm(gp)
    if nx <= T.EPS_NORM or npr <= T.EPS_NORM:
        log.debug("sim_I: zero-norm operand, similarity forced to 0")
        return 0.0
    return float(gx @ gp / (nx * npr))


def sim_IIA(fx, fp) -> np.ndarray:
    """Aligned-position cosine map, shape [H,W].

    Computed as the diagonal of the same all-pairs matrix the max variant
    reduces, so the dominance relation between the two is exact.
    """
    fxh, fph = _pair_setup(fx, fp)
    if fxh.shape != fph.shape:
        raise DimensionError("II-A needs matching spatial extents")
    h, w = np.asarray(fx).shape[1:]
    allp = fxh.T @ fph
    return np.diagonal(allp).copy().reshape(h, w)


def sim_IIB(fx, fp) -> tuple:
    """Max cosine over prototype positions per input position.

    Returns (map [H,W], argmax [H,W,2]) with row-major first-index ties.
    """
    fxh, fph = _pair_setup(fx, fp)
    allp = fxh.T @ fph  # [HWx, HWp]
    arg = allp.argmax(axis=1)
    smap = np.take_along_axis(allp, arg[:, None], axis=1)[:, 0]
    h, w = np.asarray(fx).shape[1:]
    hp, wp = np.asarray(fp).shape[1:]
    pairs = np.stack(np.unravel_index(arg, (hp, wp)), axis=-1).reshape(h, w, 2)
    return smap.reshape(h, w), pairs


def attention(s) -> np.ndarray:
    """Softmax over all spatial positions of a similarity map."""
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def sim_IIIA(fx, fp, a) -> np.ndarray:
    """Attention-weighted per-channel products at aligned positions."""
    fx = np.asarray(fx, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if fx.shape != fp.shape or a.shape != fx.shape[1:]:
        raise DimensionError("III-A shape mismatch")
    return np.einsum("hw,chw,chw->c", a, fx, fp)


def sim_IIIB(fx, fp, a, argmax) -> np.ndarray:
    """As III-A but the prototype factor is taken at the recorded best
    match position for each input position."""
    fx = np.asarray(fx, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    idx = np.asarray(argmax)
    if fx.shape[0] != fp.shape[0] or a.shape != fx.shape[1:]:
        raise DimensionError("III-B shape mismatch")
    fp_sel = fp[:, idx[..., 0], idx[..., 1]]  # [C,H,W]
    return np.einsum("hw,chw,chw->c", a, fx, fp_sel)


def attn_IIIC(fx, fp) -> np.ndarray:
    """Prototype-side attention map: softmax over prototype positions of
    the max cosine against any input position."""
    fxh, fph = _pair_setup(fx, fp)
    allp = fxh.T @ fph
    col_max = allp.max(axis=0)
    hp, wp = np.asarray(fp).shape[1:]
    return attention(col_max.reshape(hp, wp))


def sim_IIIC(fx, fp, a_b, a_c) -> np.ndarray:
    """Doubly attention-weighted products at aligned positions."""
    fx = np.asarray(fx, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    if fx.shape != fp.shape:
        raise DimensionError("III-C needs matching feature shapes")
    joint = np.asarray(a_b, dtype=np.float64) * np.asarray(a_c, dtype=np.float64)
    return np.einsum("hw,chw,chw->c", joint, fx, fp)


# -- the assembled student ---------------------------------------------------

@dataclass
class StudentModel:
    """Encoder plus head plus the prototype store the head indexes into."""
    encoder: Encoder
    head: HeadModel
    store: object
    class_count: int

    @property
    def params(self) -> list:
        return self.encoder.params + self.head.params

    def refresh_store_features(self, build_graph: bool = False):
        """Recompute prototype feature maps through the current encoder."""
        imgs = Tensor(self.store.images)
        if build_graph:
            self.store.features = self.encoder.forward(imgs)
        else:
            with T.no_grad():
                self.store.features = self.encoder.forward(imgs)

    def forward(self, images: np.ndarray) -> tuple:
        """(logits, record) for a batch of raw images, without a graph."""
        with T.no_grad():
            fx = self.encoder.forward(Tensor(np.asarray(images, dtype=np.float64)))
            return head_forward(fx, self.store, self.head)

    def predict_logits(self, images: np.ndarray) -> np.ndarray:
        return self.forward(images)[0].data

    def accuracy(self, images: np.ndarray, labels: np.ndarray) -> float:
        preds = self.predict_logits(images).argmax(axis=1)
        return float((preds == np.asarray(labels)).mean())
