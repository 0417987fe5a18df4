"""Distortion metrics, rate accounting and analytic MAC counting."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import ImageF32

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
LUMA = (0.299, 0.587, 0.114)
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03
CSV_HEADER = ("codec", "lambda", "bpp", "msssim", "psnr")


def _array(img) -> np.ndarray:
    arr = img.data if isinstance(img, ImageF32) else np.asarray(img)
    return arr.astype(np.float64)


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    x, y = _array(a), _array(b)
    _check_dims(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for [0, 1] data; identical inputs give +inf."""
    err = mse(a, b)
    return math.inf if err == 0.0 else -10.0 * math.log10(err)


def luminance(img) -> np.ndarray:
    arr = _array(img)
    if arr.ndim == 2:
        return arr
    if arr.shape[0] == 1:
        return arr[0]
    return LUMA[0] * arr[0] + LUMA[1] * arr[1] + LUMA[2] * arr[2]


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation: rows then columns
    x = sliding_window_view(x, g.size, axis=1) @ g
    return sliding_window_view(x, g.size, axis=0) @ g


def _ssim_terms(x: np.ndarray, y: np.ndarray, g: np.ndarray) -> tuple[float, float]:
    c1, c2 = K1**2, K2**2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def num_scales(height: int, width: int) -> int:
    """Largest scale count (<= 5) whose coarsest level still fits the window."""
    m = min(height, width)
    if m < WIN_SIZE:
        raise ValueError(f"images need at least {WIN_SIZE} pixels per side, got {m}")
    scales = 1
    while scales < len(MS_SSIM_WEIGHTS) and m // 2**scales >= WIN_SIZE:
        scales += 1
    return scales


def ssim(a, b) -> float:
    x, y = luminance(a), luminance(b)
    _check_dims(x, y)
    return _ssim_terms(x, y, gaussian_window())[0]


def ms_ssim(a, b) -> float:
    """Multi-scale SSIM on Rec. 601 luminance.

    Five scales need a shorter side of at least 176 pixels; smaller images
    use as many scales as fit, with the leading weights renormalized.
    """
    x, y = luminance(a), luminance(b)
    _check_dims(x, y)
    scales = num_scales(*x.shape)
    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights /= weights.sum()
    g = gaussian_window()
    value = 1.0
    for j in range(scales):
        s, cs = _ssim_terms(x, y, g)
        if j == scales - 1:
            value *= max(s, 0.0) ** weights[j]
        else:
            value *= max(cs, 0.0) ** weights[j]
            x, y = _downsample(x), _downsample(y)
    return float(min(value, 1.0))


def bpp(stream_bytes: int, width: int, height: int) -> float:
    if width <= 0 or height <= 0:
        raise ValueError("bpp needs a positive pixel count")
    return 8.0 * stream_bytes / (width * height)


# ------------------------------------------------------------------ RD points


@dataclass(frozen=True)
class RDPoint:
    codec: str
    lam: float
    bpp: float
    ms_ssim: float
    psnr: float

    def row(self) -> list[str]:
        return [self.codec, _fmt(self.lam), _fmt(self.bpp), _fmt(self.ms_ssim), _fmt(self.psnr)]


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6g}"


def write_rd_csv(points: Iterable[RDPoint], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for p in points:
            w.writerow(p.row())


def read_rd_csv(path: str | os.PathLike) -> list[RDPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RDPoint(r["codec"], float(r["lambda"]), float(r["bpp"]), float(r["msssim"]), float(r["psnr"])) for r in rows]


# --------------------------------------------------------------- MAC counting


@dataclass(frozen=True)
class LayerMacs:
    name: str
    kind: str
    macs: int


def conv_macs(c_in: int, c_out: int, k: int, h_out: int, w_out: int) -> int:
    return c_out * c_in * k * k * h_out * w_out


def tconv_macs(c_in: int, c_out: int, k: int, h_in: int, w_in: int) -> int:
    # every input sample scatters a k x k footprint into each output channel
    return c_in * c_out * k * k * h_in * w_in


def gdn_macs(c: int, h: int, w: int) -> int:
    return c * c * h * w


def codec_layer_macs(config, height: int, width: int) -> tuple[list[LayerMacs], list[LayerMacs]]:
    """Per-layer MACs of the encoder and decoder for one ``height x width`` image."""
    k, s = config.kernel, config.stride
    n, m, ic = config.hidden_channels, config.latent_channels, config.image_channels
    enc: list[LayerMacs] = []
    h, w = height, width
    for i, (ci, co) in enumerate([(ic, n), (n, n), (n, n), (n, m)]):
        h, w = -(-h // s), -(-w // s)
        enc.append(LayerMacs(f"enc.conv{i}", "conv", conv_macs(ci, co, k, h, w)))
        if i < 3:
            enc.append(LayerMacs(f"enc.gdn{i}", "gdn", gdn_macs(co, h, w)))
    dec: list[LayerMacs] = []
    for i, (ci, co) in enumerate([(m, n), (n, n), (n, n), (n, ic)]):
        if config.decoder_layers == 8:
            dec.append(LayerMacs(f"dec.conv{i}", "conv", conv_macs(ci, ci, k, h, w)))
            dec.append(LayerMacs(f"dec.xigdn{i}", "gdn", gdn_macs(ci, h, w)))
        dec.append(LayerMacs(f"dec.tconv{i}", "tconv", tconv_macs(ci, co, k, h, w)))
        h, w = h * s, w * s
        if i < 3:
            dec.append(LayerMacs(f"dec.igdn{i}", "gdn", gdn_macs(co, h, w)))
    return enc, dec


def unet_layer_macs(cfg: dict, height: int, width: int) -> list[LayerMacs]:
    """Per-layer MACs of a plain U-Net denoiser.

    Keys: ``base_channels``, ``depth`` (number of 2x downsamplings),
    ``kernel``, ``in_channels``, ``out_channels``, ``convs_per_level``.
    Downsampling is 2x2 max-pooling (no MACs); upsampling is a 2x2 stride-2
    transposed convolution.
    """
    base = int(cfg.get("base_channels", 64))
    depth = int(cfg.get("depth", 4))
    k = int(cfg.get("kernel", 3))
    cin0 = int(cfg.get("in_channels", 3))
    cout = int(cfg.get("out_channels", 3))
    per = int(cfg.get("convs_per_level", 2))
    layers: list[LayerMacs] = []
    h, w = height, width
    ch_in = cin0
    for lvl in range(depth + 1):
        ch = base * 2**lvl
        for j in range(per):
            layers.append(LayerMacs(f"down{lvl}.conv{j}", "conv", conv_macs(ch_in if j == 0 else ch, ch, k, h, w)))
        ch_in = ch
        if lvl < depth:
            h, w = h // 2, w // 2
    for lvl in range(depth - 1, -1, -1):
        ch = base * 2**lvl
        layers.append(LayerMacs(f"up{lvl}.tconv", "tconv", tconv_macs(ch * 2, ch, 2, h, w)))
        h, w = h * 2, w * 2
        for j in range(per):
            layers.append(LayerMacs(f"up{lvl}.conv{j}", "conv", conv_macs(ch * 2 if j == 0 else ch, ch, k, h, w)))
    layers.append(LayerMacs("out.conv", "conv", conv_macs(base, cout, 1, h, w)))
    return layers


@dataclass
class MacReport:
    encoder: list[LayerMacs]
    decoder: list[LayerMacs]
    pixels: int
    reference: list[LayerMacs] | None = None

    @staticmethod
    def _total(layers) -> int:
        return int(sum(layer.macs for layer in layers))

    @property
    def encoder_total(self) -> int:
        return self._total(self.encoder)

    @property
    def decoder_total(self) -> int:
        return self._total(self.decoder)

    @property
    def reference_total(self) -> int | None:
        return None if self.reference is None else self._total(self.reference)

    def gmac_per_mp(self, macs: int) -> float:
        return macs / self.pixels * 1e6 / 1e9


# probe size used to derive per-megapixel figures; divisible by every stride used
_PROBE = 1024


def count_macs(config, megapixels: float) -> float:
    """Encoder + decoder GMac for ``megapixels`` of input (analytic)."""
    if megapixels == 0:
        return 0.0
    enc, dec = codec_layer_macs(config, _PROBE, _PROBE)
    per_pixel = (sum(l.macs for l in enc) + sum(l.macs for l in dec)) / (_PROBE * _PROBE)
    return per_pixel * megapixels * 1e6 / 1e9


def mac_report(config, reference: dict | None = None, height: int = _PROBE, width: int = _PROBE) -> MacReport:
    enc, dec = codec_layer_macs(config, height, width)
    ref = unet_layer_macs(reference, height, width) if reference is not None else None
    return MacReport(enc, dec, height * width, ref)
