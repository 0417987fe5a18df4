"""Analysis/synthesis transforms with GDN activations, plus latent quantization.

The encoder is four stride-2, kernel-5 convolutions with GDN after the first
three.  The decoder mirrors it with transposed convolutions and inverse GDN.
A deeper decoder variant (``decoder_layers=8``) inserts a stride-1 kernel-5
convolution plus IGDN in front of every upsampling stage.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BETA_MIN = 1e-6
GAMMA_PEDESTAL = 2.0**-36


@dataclass(frozen=True)
class CodecConfig:
    hidden_channels: int = 32
    latent_channels: int = 48
    kernel: int = 5
    stride: int = 2
    encoder_layers: int = 4
    decoder_layers: int = 4
    num_priors: int = 1
    mixture_components: int = 3
    image_channels: int = 3

    def __post_init__(self):
        if self.kernel != 5 or self.stride != 2 or self.encoder_layers != 4:
            raise ValueError("kernel=5, stride=2 and encoder_layers=4 are fixed by the architecture")
        if self.decoder_layers not in (4, 8):
            raise ValueError("decoder_layers must be 4 or 8")
        if self.hidden_channels < 1 or self.latent_channels < 1 or self.num_priors < 1 or self.mixture_components < 1:
            raise ValueError("channel, prior and mixture counts must be positive")

    @property
    def downscale(self) -> int:
        return self.stride**self.encoder_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class GdnParams:
    """Unconstrained storage for one (I)GDN layer.

    ``beta = beta_raw**2 + BETA_MIN`` and ``gamma = gamma_raw**2`` hold the
    positivity constraints by construction.
    """

    beta_raw: Tensor
    gamma_raw: Tensor

    @classmethod
    def init(cls, channels: int, name: str = "") -> "GdnParams":
        beta_raw = np.full(channels, math.sqrt(1.0 - BETA_MIN), dtype=np.float32)
        gamma = np.full((channels, channels), GAMMA_PEDESTAL) + np.eye(channels) * 0.1
        return cls(
            Tensor(beta_raw, requires_grad=True, name=f"{name}.beta_raw"),
            Tensor(np.sqrt(gamma).astype(np.float32), requires_grad=True, name=f"{name}.gamma_raw"),
        )

    @classmethod
    def from_values(cls, beta, gamma) -> "GdnParams":
        """Build parameters that realize the given (beta, gamma) exactly in float64."""
        beta = np.asarray(beta, dtype=np.float64)
        gamma = np.asarray(gamma, dtype=np.float64)
        if (beta < BETA_MIN).any() or (gamma < 0).any():
            raise ValueError("beta must be >= BETA_MIN and gamma >= 0")
        return cls(Tensor(np.sqrt(beta - BETA_MIN), requires_grad=True), Tensor(np.sqrt(gamma), requires_grad=True))

    @property
    def channels(self) -> int:
        return self.beta_raw.shape[0]

    def beta(self) -> np.ndarray:
        return self.beta_raw.data.astype(np.float64) ** 2 + BETA_MIN

    def gamma(self) -> np.ndarray:
        return self.gamma_raw.data.astype(np.float64) ** 2


def _gdn_norm(x: Tensor, p: GdnParams) -> Tensor:
    c = x.shape[1]
    if c != p.channels:
        raise ad.ShapeMismatch(f"GDN expects {p.channels} channels, input has {c}")
    beta = ad.add_scalar(ad.square(p.beta_raw), BETA_MIN)
    gamma = ad.reshape(ad.square(p.gamma_raw), (c, c, 1, 1))
    # per-pixel channel mixing of x^2 is a 1x1 convolution with gamma as weights
    return ad.sqrt(ad.conv2d(ad.square(x), gamma, beta))


def gdn_forward(x: Tensor, p: GdnParams) -> Tensor:
    return ad.div(x, _gdn_norm(x, p))


def igdn_forward(y: Tensor, p: GdnParams) -> Tensor:
    return ad.mul(y, _gdn_norm(y, p))


def _uniform_init(rng: np.random.Generator, shape: tuple, fan_in: float, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True, name=name)


def _zeros(shape: tuple, name: str) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True, name=name)


@dataclass
class CodecModel:
    """All trainable state of the codec, addressable by name."""

    config: CodecConfig
    params: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    step: int = 0
    lam: float = 0.0

    @classmethod
    def create(cls, config: CodecConfig | None = None, seed: int = 0) -> "CodecModel":
        from .entropy import init_density_params

        config = config or CodecConfig()
        rng = np.random.default_rng(seed)
        k, s = config.kernel, config.stride
        n, m, ic = config.hidden_channels, config.latent_channels, config.image_channels
        p: OrderedDict[str, Tensor] = OrderedDict()

        enc = [(ic, n), (n, n), (n, n), (n, m)]
        for i, (ci, co) in enumerate(enc):
            p[f"enc.conv{i}.w"] = _uniform_init(rng, (co, ci, k, k), ci * k * k, f"enc.conv{i}.w")
            p[f"enc.conv{i}.b"] = _zeros((co,), f"enc.conv{i}.b")
            if i < 3:
                g = GdnParams.init(co, f"enc.gdn{i}")
                p[f"enc.gdn{i}.beta_raw"], p[f"enc.gdn{i}.gamma_raw"] = g.beta_raw, g.gamma_raw

        dec = [(m, n), (n, n), (n, n), (n, ic)]
        for i, (ci, co) in enumerate(dec):
            if config.decoder_layers == 8:
                p[f"dec.conv{i}.w"] = _uniform_init(rng, (ci, ci, k, k), ci * k * k, f"dec.conv{i}.w")
                p[f"dec.conv{i}.b"] = _zeros((ci,), f"dec.conv{i}.b")
                g = GdnParams.init(ci, f"dec.xigdn{i}")
                p[f"dec.xigdn{i}.beta_raw"], p[f"dec.xigdn{i}.gamma_raw"] = g.beta_raw, g.gamma_raw
            p[f"dec.tconv{i}.w"] = _uniform_init(rng, (ci, co, k, k), ci * k * k / (s * s), f"dec.tconv{i}.w")
            p[f"dec.tconv{i}.b"] = _zeros((co,), f"dec.tconv{i}.b")
            if i == 3:
                # start the reconstruction at mid-grey rather than black
                p[f"dec.tconv{i}.b"].data[:] = 0.5
            if i < 3:
                g = GdnParams.init(co, f"dec.igdn{i}")
                p[f"dec.igdn{i}.beta_raw"], p[f"dec.igdn{i}.gamma_raw"] = g.beta_raw, g.gamma_raw

        for j in range(config.num_priors):
            for key, arr in init_density_params(m, config.mixture_components, offset=j).items():
                p[f"prior{j}.{key}"] = Tensor(arr, requires_grad=True, name=f"prior{j}.{key}")
        return cls(config=config, params=p)

    def gdn(self, prefix: str) -> GdnParams:
        return GdnParams(self.params[f"{prefix}.beta_raw"], self.params[f"{prefix}.gamma_raw"])

    def priors(self):
        from .entropy import ChannelDensity, PriorSet

        return PriorSet(
            [
                ChannelDensity(self.params[f"prior{j}.logits"], self.params[f"prior{j}.means"], self.params[f"prior{j}.log_scales"])
                for j in range(self.config.num_priors)
            ]
        )

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def encode_analysis(img: Tensor, model: CodecModel) -> Tensor:
    cfg = model.config
    n, c, h, w = img.shape
    if h % cfg.downscale or w % cfg.downscale:
        raise ValueError(f"image dims {h}x{w} are not multiples of {cfg.downscale}")
    if c != cfg.image_channels:
        raise ad.ShapeMismatch(f"expected {cfg.image_channels} image channels, got {c}")
    p = model.params
    pad = cfg.kernel // 2
    x = img
    for i in range(4):
        x = ad.conv2d(x, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], stride=cfg.stride, pad=pad)
        if i < 3:
            x = gdn_forward(x, model.gdn(f"enc.gdn{i}"))
    return x


def decode_synthesis(latent: Tensor, model: CodecModel) -> Tensor:
    """Map a latent back to image space.  No clamping happens here."""
    cfg = model.config
    if latent.data.ndim != 4 or latent.shape[1] != cfg.latent_channels:
        raise ad.ShapeMismatch(f"latent shape {latent.shape} does not match {cfg.latent_channels} channels")
    p = model.params
    pad = cfg.kernel // 2
    x = latent
    for i in range(4):
        if cfg.decoder_layers == 8:
            x = ad.conv2d(x, p[f"dec.conv{i}.w"], p[f"dec.conv{i}.b"], stride=1, pad=pad)
            x = igdn_forward(x, model.gdn(f"dec.xigdn{i}"))
        x = ad.conv2d_transpose(x, p[f"dec.tconv{i}.w"], p[f"dec.tconv{i}.b"], stride=cfg.stride, pad=pad, out_pad=cfg.stride - 1)
        if i < 3:
            x = igdn_forward(x, model.gdn(f"dec.igdn{i}"))
    return x


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(latent: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Additive uniform noise in ``train`` mode, rounding in ``infer`` mode."""
    if mode == "infer":
        return Tensor(round_half_away(latent.data.astype(np.float64)))
    if mode != "train":
        raise ValueError(f"unknown quantization mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode quantization needs an rng")
    noise = rng.uniform(-0.5, 0.5, size=latent.shape)
    return ad.add(latent, Tensor(noise))
