"""Reward, evaluation metrics and the pixel-space AdaIN baseline.

No pretrained networks are available, so a frozen, seeded three-layer conv
net (``ProxyFeatureNet``) stands in for the perceptual backbone. It is used
both as the GRPO reward model and as the feature extractor behind the
perceptual, Gram style and content metrics. It is a proxy, not DreamSim.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x, pad, mode="edge")
    win = sliding_window_view(xp, (3, 3), axis=(-3, -2))  # (..., H, W, C, 3, 3)
    win = win[..., ::stride, ::stride, :, :, :]
    return np.einsum("...hwcij,ijco->...hwo", win, w, optimize=True) + b


class ProxyFeatureNet:
    """Frozen seeded conv stack; ``taps(img)`` returns each layer's activations."""

    def __init__(self, seed: int = 1234, channels: Sequence[int] = (8, 16, 32),
                 strides: Sequence[int] = (1, 2, 2)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
        self.layers = []
        c_in = 3
        for c_out, stride in zip(channels, strides):
            w = rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), (3, 3, c_in, c_out))
            b = rng.normal(0.0, 0.1, c_out)
            w.setflags(write=False)
            b.setflags(write=False)
            self.layers.append((w, b, stride))
            c_in = c_out

    def taps(self, img: np.ndarray) -> List[np.ndarray]:
        x = np.asarray(img, dtype=np.float64) - 0.5
        out = []
        for w, b, stride in self.layers:
            x = np.tanh(_conv3x3(x, w, b, stride))
            out.append(x)
        return out


_DEFAULT_NET: Optional[ProxyFeatureNet] = None


def default_net() -> ProxyFeatureNet:
    global _DEFAULT_NET
    if _DEFAULT_NET is None:
        _DEFAULT_NET = ProxyFeatureNet()
    return _DEFAULT_NET


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def _unit(f: np.ndarray, eps: float = 1e-10) -> np.ndarray:
    return f / (np.sqrt((f * f).sum(axis=-1, keepdims=True)) + eps)


def proxy_perceptual_distance(a: np.ndarray, b: np.ndarray,
                              net: Optional[ProxyFeatureNet] = None) -> np.ndarray:
    """Mean squared distance between unit-normalized proxy features, averaged over taps.

    Works on single images or batches; returns one value per image.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    net = net or default_net()
    total = 0.0
    taps_a, taps_b = net.taps(a), net.taps(b)
    for fa, fb in zip(taps_a, taps_b):
        diff = _unit(fa) - _unit(fb)
        total = total + (diff * diff).sum(axis=-1).mean(axis=(-2, -1))
    return total / len(taps_a)


def reward(x_hat: np.ndarray, x_target: np.ndarray, scale: float = 5.0,
           net: Optional[ProxyFeatureNet] = None) -> np.ndarray:
    """``-scale * proxy_perceptual_distance``; 0 is the best attainable reward."""
    if scale <= 0:
        raise ValueError(f"reward scale must be positive, got {scale}")
    return -scale * proxy_perceptual_distance(x_hat, x_target, net)


def adain_baseline(content: np.ndarray, style: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Match each channel's spatial mean/std of ``content`` to ``style`` (pixel space)."""
    axes = (-3, -2)
    mu_c = content.mean(axis=axes, keepdims=True)
    sd_c = content.std(axis=axes, keepdims=True)
    mu_s = style.mean(axis=axes, keepdims=True)
    sd_s = style.std(axis=axes, keepdims=True)
    out = sd_s * (content - mu_c) / (sd_c + 1e-8) + mu_s
    return np.clip(out, 0.0, 1.0) if clamp else out


def gram(f: np.ndarray) -> np.ndarray:
    """Channel Gram matrix of ``(..., H, W, C)`` features, divided by H*W."""
    H, W, C = f.shape[-3:]
    flat = f.reshape(*f.shape[:-3], H * W, C)
    return np.swapaxes(flat, -1, -2) @ flat / (H * W)


def style_loss(generated: np.ndarray, style: np.ndarray, net: Optional[ProxyFeatureNet] = None):
    net = net or default_net()
    _check_pair(generated, style)
    vals = [((gram(a) - gram(b)) ** 2).mean(axis=(-2, -1))
            for a, b in zip(net.taps(generated), net.taps(style))]
    return sum(vals) / len(vals)


def content_loss(generated: np.ndarray, content: np.ndarray, net: Optional[ProxyFeatureNet] = None):
    net = net or default_net()
    _check_pair(generated, content)
    vals = [((a - b) ** 2).mean(axis=(-3, -2, -1))
            for a, b in zip(net.taps(generated), net.taps(content))]
    return sum(vals) / len(vals)


def ssim(x: np.ndarray, y: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Single-scale SSIM with uniform ``window x window`` windows, per channel, averaged.

    Uses population moments inside each window and C1=(0.01)^2, C2=(0.03)^2
    for images in [0, 1].
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    _check_pair(x, y)
    wx = sliding_window_view(x, (window, window), axis=(0, 1))
    wy = sliding_window_view(y, (window, window), axis=(0, 1))
    mx, my = wx.mean(axis=(-2, -1)), wy.mean(axis=(-2, -1))
    vx = (wx * wx).mean(axis=(-2, -1)) - mx * mx
    vy = (wy * wy).mean(axis=(-2, -1)) - my * my
    cxy = (wx * wy).mean(axis=(-2, -1)) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return float((num / den).mean())


@dataclass
class MetricReport:
    method: str
    rows: List[Dict[str, float]] = field(default_factory=list)

    FIELDS = ("index", "style_loss", "content_loss", "ssim", "proxy_perceptual")

    def aggregate(self) -> Dict[str, float]:
        if not self.rows:
            return {}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in self.FIELDS[1:]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.FIELDS)
            for r in self.rows:
                w.writerow([r["index"]] + [repr(float(r[k])) for k in self.FIELDS[1:]])

    def write_json(self, path) -> None:
        summary = {"method": self.method, "n": len(self.rows), **self.aggregate()}
        Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def evaluate(produce: Callable[[int, object], np.ndarray], triplets: Sequence, method: str,
             net: Optional[ProxyFeatureNet] = None) -> MetricReport:
    """Score ``produce(i, triplet) -> image`` on every triplet of a split."""
    if not triplets:
        raise ValueError("evaluate needs a non-empty split")
    net = net or default_net()
    report = MetricReport(method)
    for i, t in enumerate(triplets):
        out = np.asarray(produce(i, t), dtype=np.float64)
        report.rows.append({
            "index": i,
            "style_loss": float(style_loss(out, t.style, net)),
            "content_loss": float(content_loss(out, t.content, net)),
            "ssim": ssim(out, t.target),
            "proxy_perceptual": float(proxy_perceptual_distance(out, t.target, net)),
        })
    return report
