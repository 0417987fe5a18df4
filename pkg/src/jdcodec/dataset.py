"""Noisy/clean pair manifests, crop scoring, supervision modes and batches.

Manifests are JSON-lines files, one record per line, with image paths
relative to the manifest's directory.  A record is one of

* ``pair``  - a noisy capture and its clean ground truth of the same scene,
* ``clean`` - a clean image with no noisy counterpart,
* ``ud``    - an input image paired with a denoiser's output.

Scoring fills ``crop_scores`` of pair records with the MS-SSIM between
noisy and clean crops on a non-overlapping grid; the scored manifest is the
score file that threshold filtering and test-set bucketing read.
"""

from __future__ import annotations

import json
import logging
import os
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imaging import CropSpec, ImageF32, extract_crop, load_image, save_image
from .metrics import ms_ssim

log = logging.getLogger(__name__)

ALIGNMENT_FLOOR = 0.3
IMAGE_SUFFIXES = (".ppm", ".png")


class ConfigError(ValueError):
    pass


class UnscoredManifest(ValueError):
    pass


@dataclass(frozen=True)
class CropScore:
    x0: int
    y0: int
    size: int
    ms_ssim: float


@dataclass
class PairRecord:
    scene_id: str
    clean_path: str
    noisy_path: str | None = None
    iso: int | None = None
    kind: str = "pair"
    crop_scores: list[CropScore] = field(default_factory=list)
    noise: tuple[float, float] | None = None
    flag: str | None = None

    @property
    def is_pair(self) -> bool:
        return self.noisy_path is not None

    @property
    def image_score(self) -> float | None:
        if not self.crop_scores:
            return None
        return float(np.mean([c.ms_ssim for c in self.crop_scores]))

    def to_json(self) -> dict:
        d = {"scene": self.scene_id, "kind": self.kind, "clean": self.clean_path, "noisy": self.noisy_path, "iso": self.iso}
        if self.noise is not None:
            d["noise"] = list(self.noise)
        if self.crop_scores:
            d["crop_scores"] = [[c.x0, c.y0, c.size, round(c.ms_ssim, 10)] for c in self.crop_scores]
        if self.flag:
            d["flag"] = self.flag
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PairRecord":
        return cls(
            scene_id=str(d["scene"]),
            clean_path=d["clean"],
            noisy_path=d.get("noisy"),
            iso=d.get("iso"),
            kind=d.get("kind", "pair" if d.get("noisy") else "clean"),
            crop_scores=[CropScore(int(x), int(y), int(s), float(v)) for x, y, s, v in d.get("crop_scores", [])],
            noise=tuple(d["noise"]) if d.get("noise") is not None else None,
            flag=d.get("flag"),
        )


@dataclass
class Manifest:
    root: Path
    records: list[PairRecord]

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        with open(path) as fh:
            records = [PairRecord.from_json(json.loads(line)) for line in fh if line.strip()]
        return cls(path.parent, records)

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        if path.parent.resolve() != self.root.resolve():
            raise ValueError("a manifest must be saved next to the images it references")
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    @property
    def pairs(self) -> list[PairRecord]:
        return [r for r in self.records if r.is_pair]

    @property
    def cleans(self) -> list[PairRecord]:
        return [r for r in self.records if not r.is_pair]


# -------------------------------------------------------------------- scoring


def grid_crops(height: int, width: int, size: int) -> list[CropSpec]:
    return [CropSpec(x0, y0, size) for y0 in range(0, height - size + 1, size) for x0 in range(0, width - size + 1, size)]


def score_record(rec: PairRecord, root: Path, crop_size: int) -> PairRecord:
    if not rec.is_pair:
        return rec
    clean = load_image(root / rec.clean_path)
    noisy = load_image(root / rec.noisy_path)
    if clean.dims != noisy.dims or clean.channels != noisy.channels:
        log.warning("scene %s: clean %s and noisy %s differ in size; not scored", rec.scene_id, clean.dims, noisy.dims)
        return replace(rec, crop_scores=[], flag="dim_mismatch")
    scores = []
    for spec in grid_crops(clean.height, clean.width, crop_size):
        value = ms_ssim(extract_crop(noisy, spec), extract_crop(clean, spec))
        scores.append(CropScore(spec.x0, spec.y0, spec.size, value))
    return replace(rec, crop_scores=scores, flag=None)


def score_pairs(manifest_in: str | os.PathLike, crop_size: int, manifest_out: str | os.PathLike | None = None, workers: int = 1) -> Manifest:
    """Score every pair record on a non-overlapping crop grid and write the result."""
    m = Manifest.load(manifest_in)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(lambda r: score_record(r, m.root, crop_size), m.records))
    else:
        records = [score_record(r, m.root, crop_size) for r in m.records]
    out = Manifest(m.root, records)
    out.save(manifest_out or manifest_in)
    return out


@dataclass(frozen=True)
class EligibleCrop:
    record: PairRecord
    crop: CropScore


def filter_by_threshold(manifest: Manifest | str | os.PathLike, tau: float, alignment_floor: float = ALIGNMENT_FLOOR) -> list[EligibleCrop]:
    """Crops whose noisy/clean MS-SSIM is at least ``tau`` (inclusive)."""
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    pairs = [r for r in manifest.pairs if r.flag is None]
    if any(not r.crop_scores for r in pairs):
        raise UnscoredManifest("manifest has unscored pair records; run score-pairs first")
    kept, suspect = [], 0
    for r in pairs:
        for c in r.crop_scores:
            if c.ms_ssim < alignment_floor:
                suspect += 1
            elif c.ms_ssim >= tau:
                kept.append(EligibleCrop(r, c))
    if suspect:
        log.info("excluded %d crops below the %.2f alignment floor", suspect, alignment_floor)
    return kept


def iso_filter(records: Iterable[PairRecord], max_iso: int, stats: Counter | None = None) -> list[PairRecord]:
    """Keep records whose ISO is known and at most ``max_iso``.

    Skips are tallied into ``stats`` under ``over_iso`` and ``unknown_iso``.
    """
    kept = []
    for r in records:
        if r.iso is None:
            if stats is not None:
                stats["unknown_iso"] += 1
        elif r.iso > max_iso:
            if stats is not None:
                stats["over_iso"] += 1
        else:
            kept.append(r)
    return kept


def add_poisson_gauss_noise(img: ImageF32, a: float, b: float, rng: np.random.Generator) -> ImageF32:
    """Signal-dependent Gaussian noise with variance ``a*x + b``, clamped to [0, 1]."""
    if a < 0 or b < 0:
        raise ValueError("noise parameters must be non-negative")
    x = img.data.astype(np.float64)
    if a == 0 and b == 0:
        return img
    noisy = x + rng.standard_normal(x.shape) * np.sqrt(a * x + b)
    return ImageF32(np.clip(noisy, 0.0, 1.0))


def _images_by_stem(directory: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def build_ud_manifest(input_dir: str | os.PathLike, denoised_dir: str | os.PathLike, manifest_path: str | os.PathLike | None = None) -> Manifest:
    """Pair each input image with the denoiser output of the same file stem."""
    input_dir, denoised_dir = Path(input_dir), Path(denoised_dir)
    root = Path(manifest_path).parent if manifest_path else input_dir.parent
    outputs = _images_by_stem(denoised_dir)
    records = []
    for stem, path in _images_by_stem(input_dir).items():
        target = outputs.get(stem)
        if target is None:
            log.warning("no denoised counterpart for %s; skipped", path.name)
            continue
        records.append(PairRecord(stem, os.path.relpath(target, root), os.path.relpath(path, root), kind="ud"))
    m = Manifest(root, records)
    if manifest_path:
        m.save(manifest_path)
    return m


# ----------------------------------------------------------- supervision modes


class ModeKind(str, Enum):
    JDC_N = "JDC-N"
    JDC_CN = "JDC-CN"
    JDC_CN_THRESH = "JDC-Cn"
    JDC_UD = "JDC-UD"
    TESTOLINA = "Testolina"
    COMPRESSION_ONLY = "CompressionOnly"


TESTOLINA_NOISE = (0.04, 0.0016)  # sigma_p = 0.2, sigma_g = 0.04


@dataclass(frozen=True)
class SupervisionMode:
    kind: ModeKind
    tau: float | None = None
    a: float | None = None
    b: float | None = None

    def __post_init__(self):
        if self.kind is ModeKind.JDC_CN_THRESH and not (self.tau is not None and 0.0 < self.tau < 1.0):
            raise ConfigError("JDC-Cn needs a threshold in (0, 1)")
        if self.kind is ModeKind.TESTOLINA and not (self.a and self.b and self.a > 0 and self.b > 0):
            raise ConfigError("Testolina mode needs noise parameters a, b > 0")

    @classmethod
    def parse(cls, text: str) -> "SupervisionMode":
        t = text.strip()
        low = t.lower().replace("_", "-")
        if low in ("jdc-n", "n"):
            return cls(ModeKind.JDC_N)
        if t in ("JDC-CN", "CN") or low == "jdc-cn-all":
            return cls(ModeKind.JDC_CN)
        m = re.fullmatch(r"(?:jdc-)?cn\(?\s*(0?\.\d+)\s*\)?", low)
        if m:
            return cls(ModeKind.JDC_CN_THRESH, tau=float(m.group(1)))
        if low == "jdc-cn":
            return cls(ModeKind.JDC_CN)
        if low in ("jdc-ud", "ud"):
            return cls(ModeKind.JDC_UD)
        m = re.fullmatch(r"testolina(?:\(\s*([\d.e-]+)\s*,\s*([\d.e-]+)\s*\))?", low)
        if m:
            a, b = (float(m.group(1)), float(m.group(2))) if m.group(1) else TESTOLINA_NOISE
            return cls(ModeKind.TESTOLINA, a=a, b=b)
        if low in ("compressiononly", "compression-only", "compression", "std"):
            return cls(ModeKind.COMPRESSION_ONLY)
        raise ConfigError(f"unknown supervision mode {text!r}")

    def __str__(self) -> str:
        if self.kind is ModeKind.JDC_CN_THRESH:
            return f"JDC-Cn({self.tau:.12g})"
        if self.kind is ModeKind.TESTOLINA:
            return f"Testolina({self.a:.12g},{self.b:.12g})"
        return self.kind.value


@dataclass
class DataSources:
    """Image pools a supervision mode draws from.  Images are cached on first use."""

    pairs: Manifest | None = None
    cleans: list[tuple[Path, PairRecord]] = field(default_factory=list)
    ud: Manifest | None = None
    _cache: dict = field(default_factory=dict, repr=False)
    _eligible: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_manifests(cls, pairs=None, cleans: Sequence = (), ud=None, max_iso: int | None = 200, stats: Counter | None = None) -> "DataSources":
        pm = Manifest.load(pairs) if pairs and not isinstance(pairs, Manifest) else pairs
        um = Manifest.load(ud) if ud and not isinstance(ud, Manifest) else ud
        clean_entries = []
        for c in cleans:
            cm = c if isinstance(c, Manifest) else Manifest.load(c)
            recs = cm.cleans
            if max_iso is not None:
                recs = iso_filter(recs, max_iso, stats)
            clean_entries.extend((cm.root, r) for r in recs)
        return cls(pairs=pm, cleans=clean_entries, ud=um)

    def image(self, path: Path) -> ImageF32:
        key = str(path)
        img = self._cache.get(key)
        if img is None:
            img = self._cache[key] = load_image(path)
        return img

    def eligible(self, tau: float) -> list[EligibleCrop]:
        if tau not in self._eligible:
            self._eligible[tau] = filter_by_threshold(self.pairs, tau)
        return self._eligible[tau]


@dataclass
class TrainBatch:
    inputs: np.ndarray
    targets: np.ndarray
    provenance: list[dict]

    def __len__(self) -> int:
        return len(self.provenance)


def _random_crop(img: ImageF32, size: int, rng: np.random.Generator) -> CropSpec:
    if img.height < size or img.width < size:
        raise ConfigError(f"image {img.width}x{img.height} is smaller than crop size {size}")
    return CropSpec(int(rng.integers(0, img.width - size + 1)), int(rng.integers(0, img.height - size + 1)), size)


def _require(pool, name: str):
    if not pool:
        raise ConfigError(f"the {name} pool is empty")
    return pool


def _paired_element(src: DataSources, rec: PairRecord, root: Path, spec: CropSpec, tag: str, score: float | None = None) -> tuple:
    noisy = extract_crop(src.image(root / rec.noisy_path), spec)
    clean = extract_crop(src.image(root / rec.clean_path), spec)
    prov = {"tag": tag, "scene": rec.scene_id, "input": rec.noisy_path, "target": rec.clean_path, "x0": spec.x0, "y0": spec.y0, "size": spec.size}
    if score is not None:
        prov["score"] = score
    return noisy, clean, prov


def _clean_element(src: DataSources, rng: np.random.Generator, size: int, tag: str = "clean-paired") -> tuple:
    root, rec = src.cleans[int(rng.integers(len(src.cleans)))]
    img = src.image(root / rec.clean_path)
    spec = _random_crop(img, size, rng)
    crop = extract_crop(img, spec)
    prov = {"tag": tag, "scene": rec.scene_id, "input": rec.clean_path, "target": rec.clean_path, "x0": spec.x0, "y0": spec.y0, "size": size}
    return crop, crop, prov


def sample_batch(mode: SupervisionMode, sources: DataSources, crop_size: int, rng: np.random.Generator, noisy_count: int = 4, clean_count: int = 1) -> TrainBatch:
    """Draw one training batch for ``mode``; fully determined by ``rng``."""
    total = noisy_count + clean_count
    elems = []
    kind = mode.kind
    if kind in (ModeKind.JDC_N, ModeKind.JDC_CN):
        pairs = [r for r in _require(sources.pairs.pairs if sources.pairs else [], "noisy-paired") if r.flag is None]
        _require(pairs, "noisy-paired")
        n_noisy = total if kind is ModeKind.JDC_N else noisy_count
        for _ in range(n_noisy):
            rec = pairs[int(rng.integers(len(pairs)))]
            spec = _random_crop(sources.image(sources.pairs.resolve(rec.clean_path)), crop_size, rng)
            elems.append(_paired_element(sources, rec, sources.pairs.root, spec, "noisy-paired"))
        if kind is ModeKind.JDC_CN:
            _require(sources.cleans, "clean")
            elems += [_clean_element(sources, rng, crop_size) for _ in range(clean_count)]
    elif kind is ModeKind.JDC_CN_THRESH:
        if sources.pairs is None:
            raise ConfigError("the noisy-paired pool is empty")
        pool = _require(sources.eligible(mode.tau), f"noisy-paired (MS-SSIM >= {mode.tau:g})")
        _require(sources.cleans, "clean")
        for _ in range(noisy_count):
            e = pool[int(rng.integers(len(pool)))]
            c = e.crop
            if c.size != crop_size:
                raise ConfigError(f"score file crops are {c.size}px, training crops {crop_size}px")
            elems.append(_paired_element(sources, e.record, sources.pairs.root, CropSpec(c.x0, c.y0, c.size), "noisy-paired", c.ms_ssim))
        elems += [_clean_element(sources, rng, crop_size) for _ in range(clean_count)]
    elif kind is ModeKind.JDC_UD:
        recs = _require(sources.ud.records if sources.ud else [], "ud-paired")
        for _ in range(total):
            rec = recs[int(rng.integers(len(recs)))]
            spec = _random_crop(sources.image(sources.ud.resolve(rec.clean_path)), crop_size, rng)
            elems.append(_paired_element(sources, rec, sources.ud.root, spec, "ud"))
    elif kind is ModeKind.TESTOLINA:
        _require(sources.cleans, "clean")
        for _ in range(total):
            crop, _, prov = _clean_element(sources, rng, crop_size, "synthetic")
            noisy = add_poisson_gauss_noise(crop, mode.a, mode.b, rng)
            elems.append((noisy, crop, prov))
    elif kind is ModeKind.COMPRESSION_ONLY:
        _require(sources.cleans, "clean")
        elems = [_clean_element(sources, rng, crop_size, "clean") for _ in range(total)]
    else:  # pragma: no cover
        raise ConfigError(f"unhandled mode {mode}")
    inputs = np.stack([e[0].data for e in elems]).astype(np.float64)
    targets = np.stack([e[1].data for e in elems]).astype(np.float64)
    return TrainBatch(inputs, targets, [e[2] for e in elems])


# ---------------------------------------------------------- synthetic scenes


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    f = f * f * (3 - 2 * f)
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def synthetic_scene(rng: np.random.Generator, size: int) -> ImageF32:
    """Procedural clean image: gradient backdrop, soft shapes, stripes and texture."""
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    ang = rng.uniform(0, 2 * np.pi)
    t = np.clip(0.5 + (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5)), 0, 1)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(int(rng.integers(3, 7))):
        col = rng.uniform(0.05, 0.95, 3)
        cx, cy = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) - r
        else:
            d = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) - r
        alpha = np.clip(0.5 - d * size / 1.5, 0, 1)
        img = img * (1 - alpha) + col[:, None, None] * alpha
    freq = rng.uniform(4, 14)
    theta = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    mask = _smooth_noise(rng, size, 3) > 0.6
    img = img + (stripes - 0.5)[None] * 0.25 * mask[None]
    img = img + (_smooth_noise(rng, size, size // 8) - 0.5)[None] * 0.12
    return ImageF32(np.clip(img, 0.0, 1.0))


def make_synthetic_scene_set(
    out_dir: str | os.PathLike,
    n_scenes: int,
    size: int,
    noise_levels: Sequence[tuple[float, float]],
    seed: int = 0,
    iso: int = 100,
    prefix: str = "scene",
) -> Manifest:
    """Write clean scenes plus one noisy capture per noise level, and a manifest.

    With no noise levels the manifest holds clean-only records tagged with
    ``iso``.
    """
    if size % 16:
        raise ValueError("scene size must be a multiple of 16")
    out = Path(out_dir)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    if noise_levels:
        (out / "noisy").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for s in range(n_scenes):
        scene = f"{prefix}{s:03d}"
        clean = synthetic_scene(rng, size)
        clean_rel = f"clean/{scene}.ppm"
        save_image(clean, out / clean_rel)
        clean = load_image(out / clean_rel)  # noise is applied to the stored 8-bit image
        if not noise_levels:
            records.append(PairRecord(scene, clean_rel, None, iso=iso, kind="clean"))
        for li, (a, b) in enumerate(noise_levels):
            noisy = add_poisson_gauss_noise(clean, a, b, rng)
            noisy_rel = f"noisy/{scene}_n{li}.ppm"
            save_image(noisy, out / noisy_rel)
            records.append(PairRecord(scene, clean_rel, noisy_rel, iso=iso * 2 ** (li + 1), kind="pair", noise=(float(a), float(b))))
    m = Manifest(out, records)
    m.save(out / "manifest.jsonl")
    return m
