"""Rate-distortion training: loss, lambda schedule, Adam and the training loop."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tape, Tensor
from .codec import CodecConfig, CodecModel, decode_synthesis, encode_analysis, quantize
from .dataset import DataSources, SupervisionMode, sample_batch
from .entropy import ChannelDensity, PriorSet, rate_bits, rate_bits_per_sample
from .kvconfig import load_kv

log = logging.getLogger(__name__)

FULL_SCHEDULE = ((4096.0, 6_000_000), (2048.0, 3_000_000), (1024.0, 3_000_000), (512.0, 3_000_000), (256.0, 3_000_000))
DESK_SCALE = 1e-3
LOG_HEADER = "step,lambda,bpp,mse,loss\n"
PAIRED_TAGS = ("noisy-paired", "ud")


class TrainingAborted(RuntimeError):
    pass


# ------------------------------------------------------------------------ loss


def rd_terms(x_hat: Tensor, x_clean: Tensor, latent_relaxed: Tensor, density: ChannelDensity | PriorSet) -> tuple[Tensor, Tensor]:
    """(rate in bits per pixel, MSE on [0, 1] samples) as differentiable scalars."""
    if x_hat.shape != x_clean.shape:
        raise ad.ShapeMismatch(f"reconstruction {x_hat.shape} vs target {x_clean.shape}")
    n, _, h, w = x_hat.shape
    pixels = n * h * w
    if isinstance(density, PriorSet) and len(density) == 1:
        density = density[0]
    if isinstance(density, ChannelDensity):
        bits = rate_bits(latent_relaxed, density)
    else:
        # every image is charged under whichever prior codes it cheapest
        per_prior = [rate_bits_per_sample(latent_relaxed, d) for d in density.priors]
        table = np.stack([p.data for p in per_prior])
        choice = np.argmin(table, axis=0)
        bits = None
        for m, p in enumerate(per_prior):
            term = ad.sum(ad.mul(p, Tensor((choice == m).astype(np.float64))))
            bits = term if bits is None else ad.add(bits, term)
    rate = ad.scale(bits, 1.0 / pixels)
    dist = ad.mean(ad.square(ad.sub(x_hat, x_clean)))
    return rate, dist


def rd_loss(x_hat: Tensor, x_clean: Tensor, latent_relaxed: Tensor, density, lam: float) -> Tensor:
    """``bpp + lam * MSE(x_hat, x_clean)``; ``x_clean`` is the clean target, not the input."""
    rate, dist = rd_terms(x_hat, x_clean, latent_relaxed, density)
    return ad.add(rate, ad.scale(dist, lam))


# -------------------------------------------------------------------- schedule


def default_schedule(scale: float = 1.0, extended: bool = False, testolina: bool = False) -> list[tuple[float, int]]:
    """4096 -> 256 with halving; the first stage is twice as long as the rest.

    ``extended`` prepends lambda=8192 (and 16384 as well when ``testolina``).
    """
    if not 0.0 < scale <= 1.0:
        raise ValueError("scale must be in (0, 1]")
    stages = list(FULL_SCHEDULE)
    if extended:
        stages.insert(0, (8192.0, 3_000_000))
        if testolina:
            stages.insert(0, (16384.0, 3_000_000))
    return [(lam, max(1, math.ceil(steps * scale - 1e-9))) for lam, steps in stages]


def parse_schedule(text: str) -> list[tuple[float, int]]:
    """``"4096:1200, 2048:600"`` -> [(4096.0, 1200), (2048.0, 600)]."""
    out = []
    for part in str(text).split(","):
        lam, steps = part.strip().split(":")
        out.append((float(lam), int(steps)))
    return out


# ------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: "OrderedDict[str, Tensor]", grads: dict, state: AdamState, lr: float) -> None:
    """One Adam update.  Parameters and moments stay float32 between steps."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise TrainingAborted(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        m = np.zeros(p.shape) if m is None else m.astype(np.float64)
        v = np.zeros(p.shape) if v is None else v.astype(np.float64)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(np.float32)
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)


# ---------------------------------------------------------------------- config


@dataclass
class TrainConfig:
    mode: SupervisionMode
    lambda_schedule: list[tuple[float, int]] = field(default_factory=lambda: default_schedule(1.0))
    lr: float = 1e-4
    seed: int = 0
    crop_size: int = 256
    noisy_per_batch: int = 4
    clean_per_batch: int = 1
    codec: CodecConfig = field(default_factory=CodecConfig)
    checkpoint_every: int = 0
    strict: bool = True
    codec_id: str = ""

    def __post_init__(self):
        if any(lam <= 0 or steps < 1 for lam, steps in self.lambda_schedule):
            raise ValueError("lambda values must be positive and stage lengths >= 1")
        if not self.codec_id:
            self.codec_id = str(self.mode)

    @classmethod
    def desk(cls, mode: SupervisionMode | str, scale: float = DESK_SCALE, **kw) -> "TrainConfig":
        """Small-scale preset: 64px crops and a shortened schedule."""
        if isinstance(mode, str):
            mode = SupervisionMode.parse(mode)
        kw.setdefault("crop_size", 64)
        kw.setdefault("lr", 1e-3)
        kw.setdefault("lambda_schedule", default_schedule(scale))
        return cls(mode=mode, **kw)

    @classmethod
    def from_kv(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        mode = SupervisionMode.parse(str(d.pop("mode")))
        scale = float(d.pop("scale", 1.0))
        extended = bool(d.pop("extended", False))
        sched = d.pop("lambda_schedule", None)
        schedule = parse_schedule(sched) if sched else default_schedule(scale, extended, mode.kind.value == "Testolina")
        codec_keys = CodecConfig.__dataclass_fields__
        codec = CodecConfig(**{k: d.pop(k) for k in list(d) if k in codec_keys})
        known = {k: d.pop(k) for k in list(d) if k in cls.__dataclass_fields__}
        if d:
            raise ValueError(f"unknown training config keys: {sorted(d)}")
        return cls(mode=mode, lambda_schedule=schedule, codec=codec, **known)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        return cls.from_kv(load_kv(path))

    def to_meta(self) -> dict:
        return {
            "mode": str(self.mode),
            "lambda_schedule": [[lam, steps] for lam, steps in self.lambda_schedule],
            "lr": self.lr,
            "seed": self.seed,
            "crop_size": self.crop_size,
            "codec_id": self.codec_id,
        }


# ------------------------------------------------------------------------ loop


@dataclass
class TrainResult:
    checkpoints: list[Path]
    log_path: Path
    final_loss: float


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _state_arrays(opt: AdamState) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for name in opt.m:
        out[f"adam.m.{name}"] = opt.m[name]
        out[f"adam.v.{name}"] = opt.v[name]
    return out


def save_training_state(path, model: CodecModel, opt: AdamState, rng: np.random.Generator, cfg: TrainConfig, stage: int, stage_step: int) -> None:
    meta = {
        "train": cfg.to_meta(),
        "codec_id": cfg.codec_id,
        "stage": stage,
        "stage_step": stage_step,
        "adam_t": opt.t,
        "rng": rng.bit_generator.state,
    }
    ckpt.save_model(path, model, meta, _state_arrays(opt))


def load_training_state(path) -> tuple[CodecModel, AdamState, np.random.Generator, dict]:
    model, meta, extra = ckpt.load_model(path)
    opt = AdamState(t=int(meta.get("adam_t", 0)))
    for key, arr in extra.items():
        if key.startswith("adam.m."):
            opt.m[key[7:]] = arr
        elif key.startswith("adam.v."):
            opt.v[key[7:]] = arr
    rng = np.random.default_rng()
    if "rng" in meta:
        rng.bit_generator.state = meta["rng"]
    return model, opt, rng, meta


def _dump_failure(out_dir: Path, step: int, batch, exc: Exception) -> Path:
    path = out_dir / "nonfinite_dump.json"
    with open(path, "w") as fh:
        json.dump({"step": step, "error": str(exc), "provenance": batch.provenance}, fh, indent=1)
    return path


def _check_targets(batch) -> None:
    for p in batch.provenance:
        if p["tag"] in PAIRED_TAGS and p["target"] == p["input"]:
            raise TrainingAborted(f"noisy capture {p['input']} used as its own target")


def train(
    config: TrainConfig,
    sources: DataSources,
    out_dir: str | os.PathLike,
    resume_from: str | os.PathLike | None = None,
    on_stage_end: Callable[[CodecModel, float, int], None] | None = None,
) -> TrainResult:
    """Run the full lambda schedule, writing one checkpoint per stage.

    ``train_log.csv`` gets one row per step and ``provenance.jsonl`` records
    where every batch element came from.  Each stage starts from the weights
    the previous one finished with.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    prov_path = out / "provenance.jsonl"
    if resume_from:
        model, opt, rng, meta = load_training_state(resume_from)
        stage, stage_step = int(meta["stage"]), int(meta["stage_step"])
        _truncate_logs(log_path, prov_path, model.step)
    else:
        rng = np.random.default_rng(config.seed)
        model = CodecModel.create(config.codec, seed=config.seed)
        opt = AdamState()
        stage, stage_step = 0, 0
        log_path.write_text(LOG_HEADER)
        prov_path.write_text("")
    priors = model.priors()
    checkpoints: list[Path] = []
    loss_value = math.nan
    guard = ad.strict_mode() if config.strict else contextlib.nullcontext()
    with guard, open(log_path, "a") as log_fh, open(prov_path, "a") as prov_fh:
        for si in range(stage, len(config.lambda_schedule)):
            lam, steps = config.lambda_schedule[si]
            model.lam = lam
            start = stage_step if si == stage else 0
            for k in range(start, steps):
                batch = sample_batch(config.mode, sources, config.crop_size, rng, config.noisy_per_batch, config.clean_per_batch)
                _check_targets(batch)
                try:
                    with Tape() as tape:
                        latent = encode_analysis(Tensor(batch.inputs), model)
                        relaxed = quantize(latent, "train", rng)
                        x_hat = decode_synthesis(relaxed, model)
                        rate, dist = rd_terms(x_hat, Tensor(batch.targets), relaxed, priors)
                        loss = ad.add(rate, ad.scale(dist, lam))
                    ad.backward(loss, tape)
                    optimizer_step(model.params, {n: t.grad for n, t in model.params.items()}, opt, config.lr)
                except (ad.NonFiniteError, TrainingAborted) as exc:
                    dump = _dump_failure(out, model.step, batch, exc)
                    raise TrainingAborted(f"non-finite values at step {model.step}; batch provenance in {dump}") from exc
                model.zero_grad()
                model.step += 1
                loss_value = float(loss.data)
                log_fh.write(f"{model.step},{_fmt(lam)},{_fmt(float(rate.data))},{_fmt(float(dist.data))},{_fmt(loss_value)}\n")
                prov_fh.write(json.dumps({"step": model.step, "lambda": lam, "batch": batch.provenance}, sort_keys=True) + "\n")
                if config.checkpoint_every and model.step % config.checkpoint_every == 0:
                    log_fh.flush()
                    prov_fh.flush()
                    save_training_state(out / "state.jdcm", model, opt, rng, config, si, k + 1)
            path = out / f"model_lambda{lam:g}.jdcm"
            save_training_state(path, model, opt, rng, config, si + 1, 0)
            checkpoints.append(path)
            log.info("%s: finished lambda=%g at step %d (loss %.4f)", config.codec_id, lam, model.step, loss_value)
            if on_stage_end is not None:
                on_stage_end(model, lam, si)
    return TrainResult(checkpoints, log_path, loss_value)


def _truncate_logs(log_path: Path, prov_path: Path, step: int) -> None:
    # drop rows written after the checkpoint we resume from
    if log_path.exists():
        lines = log_path.read_text().splitlines(keepends=True)
        kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
        log_path.write_text("".join(kept))
    else:
        log_path.write_text(LOG_HEADER)
    if prov_path.exists():
        kept = [ln for ln in prov_path.read_text().splitlines(keepends=True) if json.loads(ln)["step"] <= step]
        prov_path.write_text("".join(kept))
