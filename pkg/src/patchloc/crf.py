"""Pixel-adaptive-convolution CRF refinement of patch probabilities.

Unary potentials come from the backbone (the patch probabilities p); a small
feature branch over the input image supplies per-patch feature vectors whose
Gaussian affinities modulate a learned offset-dependent class compatibility.
Refinement is an unrolled sigmoid mean-field iteration, differentiable end
to end: z <- sigmoid(logit(p) - message(z)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .backbone import PatchScores
from .tensor import NormState, Tensor


@dataclass
class PatchFeatures:
    """Learned per-patch feature vectors plus the fixed coordinate grid."""

    f: np.ndarray            # (P, P, F)
    xi: np.ndarray           # (P, P, 2) patch-center pixel coordinates

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        self.xi = np.asarray(self.xi, dtype=np.float64)
        if self.f.ndim != 3 or self.xi.shape != (*self.f.shape[:2], 2):
            raise ValueError(f"inconsistent feature shapes {self.f.shape} vs {self.xi.shape}")
        if not np.all(np.isfinite(self.f)):
            raise ValueError("non-finite patch features")


def coordinate_grid(patch_grid: int, input_side: int) -> np.ndarray:
    """Patch-center pixel coordinates, row-major (P,P,2)."""
    stride = input_side // patch_grid
    centers = np.arange(patch_grid) * stride + (stride - 1) / 2.0
    rr, cc = np.meshgrid(centers, centers, indexing="ij")
    return np.stack([rr, cc], axis=-1)


class CrfParams:
    """Learnable CRF state: compatibility W plus the two-conv feature branch.

    W is indexed (class k, class k', window offset) and starts at zero, so an
    untrained CRF is exactly the identity on its unaries.
    """

    def __init__(self, classes: int, patch_grid: int, input_side: int,
                 rng: np.random.Generator, window: int = 5, iterations: int = 5,
                 feature_dim: int = 8, bandwidth: float = 1.0):
        if window % 2 == 0 or window < 1 or window > 2 * patch_grid - 1:
            raise ValueError(f"window side must be odd and <= {2 * patch_grid - 1}, got {window}")
        if iterations < 1:
            raise ValueError("need at least one mean-field iteration")
        pool = input_side // patch_grid
        if patch_grid * pool != input_side or pool & (pool - 1):
            raise ValueError(f"input side {input_side} not a power-of-two multiple of P={patch_grid}")
        self.classes = classes
        self.patch_grid = patch_grid
        self.input_side = input_side
        self.window = window
        self.iterations = iterations
        self.feature_dim = feature_dim
        self.bandwidth = float(bandwidth)
        self.pool_stages = pool.bit_length() - 1
        self.xi = coordinate_grid(patch_grid, input_side)
        self.tensors: Dict[str, Tensor] = {}
        self.norms: Dict[str, NormState] = {}
        self.tensors["crf.W"] = T.parameter(
            np.zeros((classes, classes, window, window)), name="crf.W")
        fd = feature_dim
        for i, (cin, cout) in enumerate(((1, fd), (fd, fd)), start=1):
            std = np.sqrt(2.0 / (cin * 9))
            w = rng.normal(0.0, std, size=(cout, cin, 3, 3))
            self.tensors[f"crf.feat.layer{i}.conv.w"] = T.parameter(w, name=f"crf.feat.layer{i}.conv.w")
            self.tensors[f"crf.feat.layer{i}.conv.b"] = T.parameter(np.zeros(cout),
                                                                    name=f"crf.feat.layer{i}.conv.b")
            self.tensors[f"crf.feat.layer{i}.norm.gamma"] = T.parameter(
                np.ones(cout), name=f"crf.feat.layer{i}.norm.gamma")
            self.tensors[f"crf.feat.layer{i}.norm.beta"] = T.parameter(
                np.zeros(cout), name=f"crf.feat.layer{i}.norm.beta")
            self.norms[f"crf.feat.layer{i}"] = NormState(cout)

    def params(self) -> List[Tensor]:
        return list(self.tensors.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {name: t.data.copy() for name, t in self.tensors.items()}
        for prefix, st in self.norms.items():
            out[f"{prefix}.norm.running_mean"] = st.running_mean.copy()
            out[f"{prefix}.norm.running_var"] = st.running_var.copy()
        return out

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, t in self.tensors.items():
            if name not in state:
                raise KeyError(f"checkpoint missing tensor {name!r}")
            if state[name].shape != t.data.shape:
                raise ValueError(f"checkpoint tensor {name!r} shape {state[name].shape} "
                                 f"!= expected {t.data.shape}")
            t.data[...] = state[name]
        for prefix, st in self.norms.items():
            st.running_mean[...] = state[f"{prefix}.norm.running_mean"]
            st.running_var[...] = state[f"{prefix}.norm.running_var"]


def features_batch(images: Tensor, params: CrfParams, training: bool = False) -> Tensor:
    """Feature branch: (N,1,H,W) images -> (N,F,P,P) patch features."""
    x = images if isinstance(images, Tensor) else T.constant(images)
    if x.data.ndim != 4 or x.data.shape[2] != params.input_side:
        raise T.ShapeError(f"feature branch expects (N,1,{params.input_side},"
                           f"{params.input_side}) images, got {x.data.shape}")
    # fixed 2x2 mean-pool chain brings the image onto the patch grid
    for _ in range(params.pool_stages):
        x = T.blur_downsample(x, 2)
    for i in (1, 2):
        pre = f"crf.feat.layer{i}"
        x = T.conv2d(x, params.tensors[f"{pre}.conv.w"], params.tensors[f"{pre}.conv.b"], padding=1)
        x = T.relu(x)
        x = T.affine_norm(x, params.tensors[f"{pre}.norm.gamma"], params.tensors[f"{pre}.norm.beta"],
                          params.norms[pre], training)
    return x


def compute_features(image: np.ndarray, params: CrfParams) -> PatchFeatures:
    """Single-image inference wrapper returning PatchFeatures."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None, None]
    elif img.ndim == 3 and img.shape[0] == 1:
        img = img[None]
    else:
        raise T.ShapeError(f"expected (H,W) or (1,H,W) image, got {img.shape}")
    f = features_batch(T.constant(img), params, training=False)
    return PatchFeatures(f.data[0].transpose(1, 2, 0), params.xi)


def _offset_slices(p: int, dr: int, dc: int):
    a0, a1 = max(0, -dr), p - max(0, dr)
    b0, b1 = a0 + dr, a1 + dr
    c0, c1 = max(0, -dc), p - max(0, dc)
    d0, d1 = c0 + dc, c1 + dc
    return (slice(a0, a1), slice(c0, c1)), (slice(b0, b1), slice(d0, d1))


def crf_message(z: Tensor, feats: Tensor, w: Tensor, window: int,
                bandwidth: float = 1.0) -> Tensor:
    """Pairwise mean-field message, one fused differentiable op.

    m[n,k,j] = sum over window offsets d != 0 and classes k' of
    exp(-||f_j - f_l||^2 / (2 bw^2)) * W[k,k',d] * z[n,k',l], l = j + d,
    with out-of-grid neighbors contributing zero.
    """
    z = z if isinstance(z, Tensor) else T.constant(z)
    feats = feats if isinstance(feats, Tensor) else T.constant(feats)
    w = w if isinstance(w, Tensor) else T.constant(w)
    n, k, p, p2 = z.data.shape
    if p != p2:
        raise T.ShapeError(f"op 'crf_message': patch grid must be square, got {z.data.shape}")
    if feats.data.shape[0] != n or feats.data.shape[2:] != (p, p):
        raise T.ShapeError(f"op 'crf_message': feature shape {feats.data.shape} "
                           f"does not match scores {z.data.shape}")
    if w.data.shape != (k, k, window, window):
        raise T.ShapeError(f"op 'crf_message': W shape {w.data.shape}, "
                           f"expected {(k, k, window, window)}")
    half = window // 2
    inv2bw2 = 1.0 / (2.0 * bandwidth * bandwidth)
    zd, fd, wd = z.data, feats.data, w.data

    offsets = [(dr, dc) for dr in range(-half, half + 1) for dc in range(-half, half + 1)
               if (dr, dc) != (0, 0)]

    def gauss(dst, src):
        diff = fd[:, :, src[0], src[1]] - fd[:, :, dst[0], dst[1]]
        return np.exp(-np.sum(diff * diff, axis=1) * inv2bw2)  # (N,h,w)

    out = np.zeros_like(zd)
    for dr, dc in offsets:
        dst, src = _offset_slices(p, dr, dc)
        wo = wd[:, :, dr + half, dc + half]
        msg = np.einsum("kl,nlhw->nkhw", wo, zd[:, :, src[0], src[1]], optimize=True)
        out[:, :, dst[0], dst[1]] += gauss(dst, src)[:, None] * msg

    def bwd(g):
        gz = np.zeros_like(zd)
        gw = np.zeros_like(wd)
        gf = np.zeros_like(fd)
        for dr, dc in offsets:
            dst, src = _offset_slices(p, dr, dc)
            wo = wd[:, :, dr + half, dc + half]
            zl = zd[:, :, src[0], src[1]]
            gm = g[:, :, dst[0], dst[1]]
            gauss_v = gauss(dst, src)
            gg = gauss_v[:, None] * gm
            gz[:, :, src[0], src[1]] += np.einsum("kl,nkhw->nlhw", wo, gg, optimize=True)
            gw[:, :, dr + half, dc + half] += np.einsum("nkhw,nlhw->kl", gg, zl, optimize=True)
            # gradient w.r.t. the Gaussian coefficient, then chain into features
            s = np.einsum("nkhw,nkhw->nhw", gm,
                          np.einsum("kl,nlhw->nkhw", wo, zl, optimize=True), optimize=True)
            coeff = (s * gauss_v * 2.0 * inv2bw2)[:, None]
            diff = fd[:, :, src[0], src[1]] - fd[:, :, dst[0], dst[1]]
            gf[:, :, dst[0], dst[1]] += coeff * diff
            gf[:, :, src[0], src[1]] -= coeff * diff
        return gz, gf, gw

    return T.apply_custom("crf_message", (z, feats, w), out, bwd)


def pairwise_message(z: PatchScores, features: PatchFeatures, params: CrfParams) -> np.ndarray:
    """Single-image pairwise message, (P,P,K)."""
    zt = T.constant(z.values.transpose(2, 0, 1)[None])
    ft = T.constant(features.f.transpose(2, 0, 1)[None])
    m = crf_message(zt, ft, params.tensors["crf.W"], params.window, params.bandwidth)
    return m.data[0].transpose(1, 2, 0)


def refine_batch(p: Tensor, feats: Tensor, params: CrfParams,
                 iterations: Optional[int] = None) -> Tensor:
    """Unrolled mean-field refinement on batched scores (N,K,P,P)."""
    p = p if isinstance(p, Tensor) else T.constant(p)
    rounds = params.iterations if iterations is None else iterations
    unary = T.logit(p, clamp=1e-7)
    z = p
    for it in range(rounds):
        try:
            m = crf_message(z, feats, params.tensors["crf.W"], params.window, params.bandwidth)
            z = T.sigmoid(T.sub(unary, m))
        except T.NonFiniteError as e:
            raise T.NonFiniteError(f"crf_refine iteration {it}: {e}") from e
    return z


def crf_refine(p: PatchScores, features: PatchFeatures, params: CrfParams,
               iterations: Optional[int] = None) -> PatchScores:
    """Single-image refinement: unaries p -> refined scores z."""
    pt = T.constant(p.values.transpose(2, 0, 1)[None])
    ft = T.constant(features.f.transpose(2, 0, 1)[None])
    z = refine_batch(pt, ft, params, iterations)
    return PatchScores(z.data[0].transpose(1, 2, 0))
