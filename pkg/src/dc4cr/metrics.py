"""Image quality measures and the differentiable losses built on them.

Image-level functions (``mse``, ``psnr``, ``ssim``, ``style_loss``,
``perceptual_distance``) take :class:`Image` values in [0, 1]. The
``*_tensor`` variants operate on NCHW tensors and are differentiable.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .imagery import Image
from .numerics import Tensor

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class QualityReport:
    psnr: float
    ssim: float
    pd: float

    def to_json(self) -> dict:
        return asdict(self)


def _same_shape(a: Image, b: Image) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def _nchw(img: Image) -> Tensor:
    return Tensor(img.pixels.transpose(2, 0, 1)[None].copy())


def mse(a: Image, b: Image) -> float:
    _same_shape(a, b)
    return float(np.mean((a.pixels - b.pixels) ** 2))


def psnr(a: Image, b: Image) -> float:
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / err))


# ---------------------------------------------------------------- SSIM

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


_WINDOW = Tensor(gaussian_window()[None, None])


def _blur(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = nx.conv2d(x.reshape(n * c, 1, h, w), _WINDOW)
    return out.reshape(n, c, out.shape[2], out.shape[3])


def ssim_map_tensor(x: Tensor, y: Tensor) -> Tensor:
    """Local SSIM over valid 11x11 Gaussian windows, shape N x C x H' x W'."""
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if min(x.shape[2:]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape[2:]}")
    mu_x, mu_y = _blur(x), _blur(y)
    mu_xx, mu_yy, mu_xy = nx.square(mu_x), nx.square(mu_y), nx.mul(mu_x, mu_y)
    var_x = _blur(nx.square(x)) - mu_xx
    var_y = _blur(nx.square(y)) - mu_yy
    cov = _blur(nx.mul(x, y)) - mu_xy
    num = nx.mul(mu_xy * 2.0 + SSIM_C1, cov * 2.0 + SSIM_C2)
    den = nx.mul(mu_xx + mu_yy + SSIM_C1, var_x + var_y + SSIM_C2)
    return nx.mul(num, nx.reciprocal(den))


def ssim_tensor(x: Tensor, y: Tensor) -> Tensor:
    """Per-image SSIM (channel-averaged), shape (N,)."""
    m = ssim_map_tensor(x, y)
    return m.reshape(m.shape[0], -1).mean(axis=1)


def ssim(a: Image, b: Image) -> float:
    _same_shape(a, b)
    with nx.no_grad():
        return float(ssim_tensor(_nchw(a), _nchw(b)).data[0])


# ---------------------------------------------------------------- fixed features

class StyleFeatureExtractor:
    """Frozen conv stack 3->8->16->32 (3x3, stride 2, silu), weights drawn from a fixed seed."""

    channels = (3, 8, 16, 32)

    def __init__(self, seed: int = 7):
        rng = np.random.default_rng(seed)
        self.kernels = []
        self.biases = []
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            std = math.sqrt(2.0 / (cin * 9))
            self.kernels.append(Tensor(rng.standard_normal((cout, cin, 3, 3)) * std))
            self.biases.append(Tensor(rng.standard_normal(cout) * 0.1))

    @property
    def depth(self) -> int:
        return len(self.kernels)

    def features(self, x: Tensor) -> list:
        """Per-layer activations for an NCHW batch in [0, 1] image range."""
        feats = []
        h = x
        for k, b in zip(self.kernels, self.biases):
            h = nx.silu(nx.conv2d(h, k, b, stride=2, padding=1))
            feats.append(h)
        return feats


_EXTRACTOR: Optional[StyleFeatureExtractor] = None


def extractor() -> StyleFeatureExtractor:
    global _EXTRACTOR
    if _EXTRACTOR is None:
        _EXTRACTOR = StyleFeatureExtractor()
    return _EXTRACTOR


def gram_matrix(features: Tensor) -> Tensor:
    """C x H x W (or N x C x H x W) -> C x C (or N x C x C), normalised by H*W."""
    if features.ndim == 3:
        c, h, w = features.shape
        f = features.reshape(c, h * w)
        return nx.matmul(f, f.transpose()) * (1.0 / (h * w))
    n, c, h, w = features.shape
    f = features.reshape(n, c, h * w)
    # batched F F^T via broadcasting: (n,c,1,hw) * (n,1,c,hw) summed over hw
    prod = nx.mul(f.reshape(n, c, 1, h * w), f.reshape(n, 1, c, h * w))
    return prod.sum(axis=3) * (1.0 / (h * w))


DEFAULT_STYLE_WEIGHTS = (1 / 3, 1 / 3, 1 / 3)


def style_loss_tensor(gen: Tensor, ref: Tensor, weights: Sequence[float] = DEFAULT_STYLE_WEIGHTS) -> Tensor:
    """Per-image weighted squared Frobenius distance between Gram matrices, shape (N,)."""
    ext = extractor()
    if len(weights) != ext.depth:
        raise ValueError(f"need {ext.depth} layer weights, got {len(weights)}")
    if gen.shape != ref.shape:
        raise ValueError(f"dimension mismatch: {gen.shape} vs {ref.shape}")
    total = None
    for w, fg, fr in zip(weights, ext.features(gen), ext.features(ref)):
        diff = gram_matrix(fg) - gram_matrix(fr)
        term = nx.square(diff).sum(axis=(1, 2)) * float(w)
        total = term if total is None else total + term
    return total


def style_loss(gen: Image, ref: Image, weights: Sequence[float] = DEFAULT_STYLE_WEIGHTS) -> float:
    _same_shape(gen, ref)
    with nx.no_grad():
        return float(style_loss_tensor(_nchw(gen), _nchw(ref), weights).data[0])


def _unit(f: np.ndarray) -> np.ndarray:
    norm = np.sqrt((f * f).sum(axis=1, keepdims=True))
    return f / (norm + 1e-10)


def perceptual_distance(a: Image, b: Image) -> float:
    """Fixed-feature stand-in for LPIPS (reported as "PD"; not comparable to LPIPS)."""
    _same_shape(a, b)
    if a == b:
        return 0.0
    ext = extractor()
    with nx.no_grad():
        fa, fb = ext.features(_nchw(a)), ext.features(_nchw(b))
    return float(np.mean([np.mean((_unit(x.data) - _unit(y.data)) ** 2) for x, y in zip(fa, fb)]))


def complexity_score(x: Image, y: Image, lambda1: float = 1.0, lambda2: float = 1.0) -> float:
    """lambda1 * MSE + lambda2 * (1 - SSIM); larger means a harder pair."""
    return score_from_terms(mse(x, y), ssim(x, y), lambda1, lambda2)


def score_from_terms(mse_value: float, ssim_value: float, lambda1: float = 1.0, lambda2: float = 1.0) -> float:
    return lambda1 * mse_value + lambda2 * (1.0 - ssim_value)


def quality_report(output: Image, reference: Image) -> QualityReport:
    return QualityReport(psnr(output, reference), ssim(output, reference), perceptual_distance(output, reference))
