"""Factorized entropy model: per-channel logistic mixtures over the latent.

The probability of an integer (or noise-relaxed) latent value ``v`` is the
mass the mixture CDF assigns to ``[v - 0.5, v + 0.5]``.  The same densities
yield the differentiable rate term during training and, once quantized to
16-bit frequency tables, drive the range coder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

P_MIN = 1e-9
SCALE_MIN = 1e-4
PRECISION = 16
TOTAL_FREQ = 1 << PRECISION
SUPPORT_LIMIT = 255
TAIL_MASS = 2.0**-16


def init_density_params(channels: int, k: int, offset: int = 0) -> dict[str, np.ndarray]:
    means = np.tile(np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1), (channels, 1))
    log_scales = np.full((channels, k), 0.25 * offset)
    return {
        "logits": np.zeros((channels, k), dtype=np.float32),
        "means": means.astype(np.float32),
        "log_scales": log_scales.astype(np.float32),
    }


@dataclass
class ChannelDensity:
    """Logistic mixture per latent channel; every array has shape (C, K)."""

    logits: Tensor
    means: Tensor
    log_scales: Tensor

    @classmethod
    def from_arrays(cls, logits, means, log_scales, requires_grad: bool = False) -> "ChannelDensity":
        return cls(*(Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad) for a in (logits, means, log_scales)))

    @property
    def channels(self) -> int:
        return self.logits.shape[0]

    def weights(self) -> np.ndarray:
        lg = self.logits.data.astype(np.float64)
        e = np.exp(lg - lg.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def scales(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_scales.data.astype(np.float64)), SCALE_MIN)

    def cdf(self, v: np.ndarray) -> np.ndarray:
        """Mixture CDF at ``v`` of shape (C, ...) broadcastable per channel."""
        w, mu, s = self.weights(), self.means.data.astype(np.float64), self.scales()
        v = np.asarray(v, dtype=np.float64)[..., None]
        extra = (1,) * (v.ndim - 2)
        shape = (w.shape[0],) + extra + (w.shape[1],)
        return (w.reshape(shape) * _sigmoid((v - mu.reshape(shape)) / s.reshape(shape))).sum(axis=-1)

    def pmf(self, v: np.ndarray) -> np.ndarray:
        """Integer-bin probabilities, numerically stable in both tails."""
        w, mu, s = self.weights(), self.means.data.astype(np.float64), self.scales()
        v = np.asarray(v, dtype=np.float64)[..., None]
        extra = (1,) * (v.ndim - 2)
        shape = (w.shape[0],) + extra + (w.shape[1],)
        d = _bin_mass((v + 0.5 - mu.reshape(shape)) / s.reshape(shape), (v - 0.5 - mu.reshape(shape)) / s.reshape(shape))
        return (w.reshape(shape) * d).sum(axis=-1)


@dataclass
class PriorSet:
    priors: list[ChannelDensity]

    def __post_init__(self):
        if not self.priors:
            raise ValueError("a prior set needs at least one density")
        chans = {p.channels for p in self.priors}
        if len(chans) != 1:
            raise ValueError(f"priors disagree on channel count: {sorted(chans)}")

    def __len__(self) -> int:
        return len(self.priors)

    def __getitem__(self, i: int) -> ChannelDensity:
        return self.priors[i]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _bin_mass(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    # evaluate in whichever tail keeps both sigmoids away from 1
    sign = np.where(upper + lower > 0, -1.0, 1.0)
    return np.abs(_sigmoid(sign * upper) - _sigmoid(sign * lower))


def likelihood(latent: Tensor, d: ChannelDensity) -> Tensor:
    """Probability of every latent element under its channel's mixture.

    Differentiable in the latent and in all density parameters.  The result
    is not floored; :func:`rate_bits` applies ``P_MIN`` before the log.
    """
    if latent.data.ndim != 4 or latent.shape[1] != d.channels:
        raise ad.ShapeMismatch(f"latent {latent.shape} does not match a {d.channels}-channel density")
    n, c, h, w = latent.shape
    k = d.logits.shape[1]
    v = latent.data.astype(np.float64)[..., None]  # (n, c, h, w, 1)
    lg = d.logits.data.astype(np.float64)
    wts = np.exp(lg - lg.max(axis=1, keepdims=True))
    wts /= wts.sum(axis=1, keepdims=True)
    ls = d.log_scales.data.astype(np.float64)
    raw_s = np.exp(ls)
    s = np.maximum(raw_s, SCALE_MIN)
    shape = (1, c, 1, 1, k)
    mu_b, s_b, w_b = d.means.data.astype(np.float64).reshape(shape), s.reshape(shape), wts.reshape(shape)
    upper = (v + 0.5 - mu_b) / s_b
    lower = (v - 0.5 - mu_b) / s_b
    comp = _bin_mass(upper, lower)  # (n, c, h, w, k)
    p = (w_b * comp).sum(axis=-1)

    def backward(g):
        su, sl = _sigmoid(upper), _sigmoid(lower)
        du, dl = su * (1.0 - su), sl * (1.0 - sl)
        gk = g[..., None] * w_b  # dL/dcomp weighted
        d_dv = (du - dl) / s_b
        gv = (gk * d_dv).sum(axis=-1)
        gmu = -(gk * d_dv).sum(axis=(0, 2, 3))
        gls = (gk * (-du * upper + dl * lower)).sum(axis=(0, 2, 3))
        gls = np.where(raw_s > SCALE_MIN, gls, 0.0)
        # softmax: dp/dlogit_j = w_j * (comp_j - p)
        glog = (g[..., None] * w_b * (comp - p[..., None])).sum(axis=(0, 2, 3))
        return gv, glog, gmu, gls

    return ad.make_op("likelihood", p, (latent, d.logits, d.means, d.log_scales), backward)


def bits_per_element(latent: Tensor, d: ChannelDensity) -> Tensor:
    p = ad.clamp_min(likelihood(latent, d), P_MIN)
    return ad.scale(ad.log(p), -1.0 / math.log(2.0))


def rate_bits(latent: Tensor, d: ChannelDensity) -> Tensor:
    """Total information content ``sum(-log2 p)`` of the latent, in bits."""
    return ad.sum(bits_per_element(latent, d))


def rate_bits_per_sample(latent: Tensor, d: ChannelDensity) -> Tensor:
    return ad.sum_per_sample(bits_per_element(latent, d))


def select_prior(latent_q: Tensor, priors: PriorSet) -> tuple[int, float]:
    """Index of the prior that codes ``latent_q`` in the fewest bits (ties -> lowest)."""
    best, best_bits = 0, math.inf
    for i, d in enumerate(priors.priors):
        bits = float(rate_bits(Tensor(latent_q.data), d).data)
        if bits < best_bits:
            best, best_bits = i, bits
    return best, best_bits


def prior_signal_bits(num_priors: int) -> int:
    return math.ceil(math.log2(num_priors)) if num_priors > 1 else 0


# ---------------------------------------------------------------- coder tables


@dataclass(frozen=True)
class CdfTable:
    """Quantized cumulative frequencies for one channel.

    Symbols ``0 .. hi-lo`` stand for values ``lo .. hi``; the last symbol is
    the escape used for values outside the support.  ``cum[0] == 0`` and
    ``cum[-1] == 2**16``.
    """

    lo: int
    hi: int
    cum: tuple[int, ...]

    @property
    def num_symbols(self) -> int:
        return len(self.cum) - 1

    @property
    def escape(self) -> int:
        return self.num_symbols - 1

    def freq(self, sym: int) -> int:
        return self.cum[sym + 1] - self.cum[sym]

    def probability(self, value: int) -> float:
        sym = value - self.lo if self.lo <= value <= self.hi else self.escape
        return self.freq(sym) / TOTAL_FREQ


def quantize_pmf(pmf: np.ndarray, total: int = TOTAL_FREQ) -> tuple[int, ...]:
    """Frequencies >= 1 summing to ``total``; returns the cumulative table."""
    pmf = np.clip(np.asarray(pmf, dtype=np.float64), 0.0, None)
    n = len(pmf)
    if n > total:
        raise ValueError("more symbols than frequency slots")
    pmf = pmf / pmf.sum() if pmf.sum() > 0 else np.full(n, 1.0 / n)
    freq = np.floor(pmf * (total - n)).astype(np.int64) + 1
    freq[int(np.argmax(pmf))] += total - int(freq.sum())
    cum = np.concatenate([[0], np.cumsum(freq)])
    return tuple(int(c) for c in cum)


def build_cdf_tables(d: ChannelDensity) -> list[CdfTable]:
    """One coder table per channel with tail mass below 2**-16 outside the support."""
    edges = np.arange(-SUPPORT_LIMIT, SUPPORT_LIMIT + 2, dtype=np.float64) - 0.5
    values = np.arange(-SUPPORT_LIMIT, SUPPORT_LIMIT + 1, dtype=np.float64)
    cdf = d.cdf(np.broadcast_to(edges, (d.channels, edges.size)))
    pmf_all = d.pmf(np.broadcast_to(values, (d.channels, values.size)))
    weights = d.weights()
    tables = []
    for ch in range(d.channels):
        c = cdf[ch]
        # c[i] is the CDF at value (i - SUPPORT_LIMIT) - 0.5
        below = np.nonzero(c < TAIL_MASS / 2)[0]
        lo = int(below[-1]) - SUPPORT_LIMIT if below.size else -SUPPORT_LIMIT
        above = np.nonzero(1.0 - c < TAIL_MASS / 2)[0]
        hi = int(above[0]) - SUPPORT_LIMIT - 1 if above.size else SUPPORT_LIMIT
        if lo > hi:
            centre = float(np.dot(weights[ch], d.means.data[ch]))
            lo = hi = int(np.clip(np.rint(centre), -SUPPORT_LIMIT, SUPPORT_LIMIT))
        lo, hi = max(lo - 1, -SUPPORT_LIMIT), min(hi + 1, SUPPORT_LIMIT)
        pmf = pmf_all[ch, lo + SUPPORT_LIMIT : hi + SUPPORT_LIMIT + 1]
        tail = max(1.0 - float(pmf.sum()), 0.0)
        tables.append(CdfTable(lo, hi, quantize_pmf(np.append(pmf, tail))))
    return tables
