"""Anti-aliased convolutional backbone mapping images to patch probabilities.

A stack of conv / affine-norm / ReLU stages, each followed by a binomial
blur + stride-2 downsampling, lands exactly on the P x P patch grid; a
two-layer head then emits K per-class channels through a sigmoid (never a
softmax: one patch may carry several classes at once).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .tensor import NormState, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    input_side: int = 64
    patch_grid: int = 8
    classes: int = 6
    widths: tuple = (16, 32, 64)
    blur_taps: int = 3
    head_width: int = 32

    def __post_init__(self):
        stages = len(self.widths)
        if self.input_side != self.patch_grid * (2 ** stages):
            raise ValueError(
                f"input side {self.input_side} != patch grid {self.patch_grid} * 2^{stages}")
        if self.classes < 1:
            raise ValueError("need at least one class")
        if self.blur_taps not in (1, 2, 3, 5):
            raise ValueError(f"blur taps must be in {{1,2,3,5}}, got {self.blur_taps}")


@dataclass
class PatchScores:
    """P x P x K grid of per-patch, per-class probabilities."""

    values: np.ndarray
    grid: int = field(init=False)
    classes: int = field(init=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != v.shape[1]:
            raise ValueError(f"patch scores must be PxPxK, got {v.shape}")
        if np.min(v) < 0.0 or np.max(v) > 1.0:
            raise ValueError("patch scores outside [0,1]")
        self.values = v
        self.grid = v.shape[0]
        self.classes = v.shape[2]


class BackboneWeights:
    """Learnable tensors plus norm running statistics, keyed for checkpoints."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.tensors: Dict[str, Tensor] = {}
        self.norms: Dict[str, NormState] = {}
        prev = 1
        for i, width in enumerate(config.widths, start=1):
            self._add_conv(f"backbone.stage{i}", prev, width, 3, rng)
            self._add_norm(f"backbone.stage{i}", width)
            prev = width
        self._add_conv("backbone.head1", prev, config.head_width, 3, rng)
        self._add_norm("backbone.head1", config.head_width)
        # small final init keeps initial probabilities near 0.5
        self._add_conv("backbone.head2", config.head_width, config.classes, 1, rng, scale=0.01)

    def _add_conv(self, prefix: str, cin: int, cout: int, k: int,
                  rng: np.random.Generator, scale: Optional[float] = None):
        std = scale if scale is not None else np.sqrt(2.0 / (cin * k * k))
        w = rng.normal(0.0, std, size=(cout, cin, k, k))
        self.tensors[f"{prefix}.conv.w"] = T.parameter(w, name=f"{prefix}.conv.w")
        self.tensors[f"{prefix}.conv.b"] = T.parameter(np.zeros(cout), name=f"{prefix}.conv.b")

    def _add_norm(self, prefix: str, channels: int):
        self.tensors[f"{prefix}.norm.gamma"] = T.parameter(np.ones(channels), name=f"{prefix}.norm.gamma")
        self.tensors[f"{prefix}.norm.beta"] = T.parameter(np.zeros(channels), name=f"{prefix}.norm.beta")
        self.norms[prefix] = NormState(channels)

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


def forward_batch(images: Tensor, config: BackboneConfig, weights: BackboneWeights,
                  training: bool = False, blur_taps: Optional[int] = None) -> Tensor:
    """Batched forward pass: (N,1,H,W) images -> (N,K,P,P) probabilities."""
    x = images if isinstance(images, Tensor) else T.constant(images)
    n, c, h, w = x.data.shape
    side = config.input_side
    if c != 1 or h != side or w != side:
        raise T.ShapeError(f"backbone expects (N,1,{side},{side}) images, got {x.data.shape}")
    taps = config.blur_taps if blur_taps is None else blur_taps
    ten = weights.tensors
    for i in range(1, len(config.widths) + 1):
        pre = f"backbone.stage{i}"
        x = T.conv2d(x, ten[f"{pre}.conv.w"], ten[f"{pre}.conv.b"], padding=1)
        x = T.affine_norm(x, ten[f"{pre}.norm.gamma"], ten[f"{pre}.norm.beta"],
                          weights.norms[pre], training)
        x = T.relu(x)
        x = T.blur_downsample(x, taps)
    x = T.conv2d(x, ten["backbone.head1.conv.w"], ten["backbone.head1.conv.b"], padding=1)
    x = T.affine_norm(x, ten["backbone.head1.norm.gamma"], ten["backbone.head1.norm.beta"],
                      weights.norms["backbone.head1"], training)
    x = T.relu(x)
    x = T.conv2d(x, ten["backbone.head2.conv.w"], ten["backbone.head2.conv.b"], padding=0)
    return T.sigmoid(x)


def forward_patch_probs(image: np.ndarray, config: BackboneConfig,
                        weights: BackboneWeights) -> PatchScores:
    """Single-image inference: (H,W) pixels in [-1,1] -> PatchScores."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None, None]
    elif img.ndim == 3 and img.shape[0] == 1:
        img = img[None]
    else:
        raise T.ShapeError(f"expected (H,W) or (1,H,W) image, got {img.shape}")
    p = forward_batch(T.constant(img), config, weights, training=False)
    return PatchScores(p.data[0].transpose(1, 2, 0))


def shift_sensitivity(image: np.ndarray, config: BackboneConfig, weights: BackboneWeights,
                      use_blur: bool = True) -> float:
    """Mean absolute patch-probability change under 1-pixel diagonal input shifts."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None, None]
    taps = config.blur_taps if use_blur else 1
    base = forward_batch(T.constant(img), config, weights, training=False, blur_taps=taps).data
    deltas = []
    for dr, dc in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        shifted = np.roll(img, shift=(dr, dc), axis=(2, 3))
        p = forward_batch(T.constant(shifted), config, weights, training=False,
                          blur_taps=taps).data
        deltas.append(np.mean(np.abs(p - base)))
    return float(np.mean(deltas))
