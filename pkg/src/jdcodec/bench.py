"""Bitstream container, compress/decompress, and rate-distortion evaluation."""

from __future__ import annotations

import io
import logging
import math
import os
import shutil
import struct
import subprocess
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .autodiff import Tensor
from .codec import CodecModel, decode_synthesis, encode_analysis, quantize
from .dataset import Manifest, PairRecord
from .entropy import build_cdf_tables, rate_bits, select_prior
from .imaging import ImageF32, load_image, pad_to_multiple, save_image, to_batch, unpad
from .metrics import RDPoint, bpp, ms_ssim, psnr
from .rangecoder import Bitstream, DecodeError, rc_decode, rc_encode

log = logging.getLogger(__name__)

MAGIC = b"JDCB"
VERSION = 1
HEADER = struct.Struct("<4sH8sIIIIHHHHI")


class ModelMismatch(ValueError):
    pass


@dataclass(frozen=True)
class JdcHeader:
    model_hash: bytes
    width: int
    height: int
    padded_width: int
    padded_height: int
    latent_shape: tuple[int, int, int]
    prior: int
    payload_len: int

    def pack(self) -> bytes:
        c, h, w = self.latent_shape
        return HEADER.pack(MAGIC, VERSION, self.model_hash, self.width, self.height, self.padded_width, self.padded_height, c, h, w, self.prior, self.payload_len)

    @classmethod
    def unpack(cls, data: bytes) -> "JdcHeader":
        if len(data) < HEADER.size:
            raise DecodeError(f"stream of {len(data)} bytes is shorter than the {HEADER.size}-byte header")
        magic, version, mhash, w, h, pw, ph, c, lh, lw, prior, plen = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise DecodeError("not a JDCB stream")
        if version != VERSION:
            raise DecodeError(f"unsupported stream version {version}")
        return cls(mhash, w, h, pw, ph, (c, lh, lw), prior, plen)


# ------------------------------------------------------------------ codec API


class Codec:
    """A loaded model plus its coder tables, ready to compress and decompress."""

    def __init__(self, model: CodecModel, codec_id: str = ""):
        self.model = model
        self.codec_id = codec_id
        self.hash = ckpt.model_hash(model)
        self.priors = model.priors()
        self._tables: dict[int, list] = {}

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Codec":
        model, meta, _ = ckpt.load_model(path)
        return cls(model, meta.get("codec_id", Path(path).stem))

    @property
    def lam(self) -> float:
        return self.model.lam

    def tables(self, prior: int) -> list:
        if prior not in self._tables:
            self._tables[prior] = build_cdf_tables(self.priors[prior])
        return self._tables[prior]

    def analyse(self, img: ImageF32) -> tuple[np.ndarray, tuple[int, int], ImageF32]:
        """Quantized integer latent (c, h, w) of the padded image."""
        padded, dims = pad_to_multiple(img, self.model.config.downscale)
        latent = encode_analysis(Tensor(to_batch(padded)), self.model)
        q = quantize(latent, "infer")
        return q.data[0].astype(np.int64), dims, padded

    def compress(self, img: ImageF32) -> bytes:
        q, (h, w), padded = self.analyse(img)
        prior, _ = select_prior(Tensor(q[None].astype(np.float64)), self.priors)
        c, lh, lw = q.shape
        per_channel = self.tables(prior)
        tables = [t for t in per_channel for _ in range(lh * lw)]
        payload = rc_encode(q.reshape(-1).tolist(), tables).data
        head = JdcHeader(self.hash, w, h, padded.width, padded.height, (c, lh, lw), prior, len(payload))
        return head.pack() + payload

    def decode_latent(self, data: bytes) -> tuple[JdcHeader, np.ndarray]:
        head = JdcHeader.unpack(data)
        if head.model_hash != self.hash:
            raise ModelMismatch(f"stream was made by model {head.model_hash.hex()}, loaded model is {self.hash.hex()}")
        payload = data[HEADER.size :]
        if len(payload) != head.payload_len:
            raise DecodeError(f"payload is {len(payload)} bytes, header says {head.payload_len}")
        c, lh, lw = head.latent_shape
        if c != self.model.config.latent_channels:
            raise ModelMismatch(f"stream has {c} latent channels, model has {self.model.config.latent_channels}")
        if head.prior >= len(self.priors):
            raise DecodeError(f"prior index {head.prior} out of range")
        per_channel = self.tables(head.prior)
        tables = [t for t in per_channel for _ in range(lh * lw)]
        values = rc_decode(Bitstream(payload), tables, c * lh * lw)
        return head, np.asarray(values, dtype=np.int64).reshape(c, lh, lw)

    def decompress(self, data: bytes) -> ImageF32:
        head, q = self.decode_latent(data)
        x = decode_synthesis(Tensor(q[None].astype(np.float64)), self.model).data[0]
        img = ImageF32.from_array(np.clip(x, 0.0, 1.0).astype(np.float32))
        return unpad(img, (head.height, head.width))

    def estimate_bits(self, img: ImageF32) -> float:
        """Information content of the quantized latent under its chosen prior."""
        q, _, _ = self.analyse(img)
        _, bits = select_prior(Tensor(q[None].astype(np.float64)), self.priors)
        return bits


def compress_file(codec: Codec, src: str | os.PathLike, dst: str | os.PathLike) -> float:
    img = load_image(src)
    data = codec.compress(img)
    tmp = f"{os.fspath(dst)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, dst)
    return bpp(len(data), img.width, img.height)


def decompress_file(codec: Codec, src: str | os.PathLike, dst: str | os.PathLike, bits: int = 8) -> ImageF32:
    with open(src, "rb") as fh:
        data = fh.read()
    img = codec.decompress(data)
    save_image(img, dst, bits=bits)
    return img


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class Bucket:
    """Half-open MS-SSIM interval ``[lo, hi)`` on the noisy input's score."""

    lo: float
    hi: float

    @classmethod
    def parse(cls, text: str) -> "Bucket":
        lo, hi = (float(v) for v in str(text).split(","))
        if lo > hi:
            raise ValueError(f"bucket {text!r} has lo > hi")
        return cls(lo, hi)

    def __contains__(self, score: float) -> bool:
        return self.lo <= score < self.hi

    def label(self) -> str:
        return f"[{self.lo:g},{self.hi:g})"


@dataclass(frozen=True)
class ImageResult:
    scene: str
    input_path: str
    input_score: float
    bpp: float
    ms_ssim: float
    psnr: float


@dataclass
class EvalResult:
    codec_id: str
    lam: float
    bucket: Bucket | None
    images: list[ImageResult]

    @property
    def mean_input_score(self) -> float:
        return float(np.mean([r.input_score for r in self.images])) if self.images else math.nan

    def point(self) -> RDPoint | None:
        if not self.images:
            return None
        finite = [r.psnr for r in self.images if math.isfinite(r.psnr)]
        return RDPoint(
            self.codec_id,
            self.lam,
            float(np.mean([r.bpp for r in self.images])),
            float(np.mean([r.ms_ssim for r in self.images])),
            float(np.mean(finite)) if finite else math.inf,
        )


def select_test_items(manifest: Manifest, bucket: Bucket | None) -> list[tuple[PairRecord, Path, Path, float]]:
    """(record, input path, ground-truth path, input score) for one evaluation.

    Noisy pairs are bucketed by their image score.  Clean-only records take
    part only when no bucket is given and are their own ground truth.
    """
    items = []
    for rec in manifest.records:
        if rec.flag is not None:
            continue
        if rec.is_pair:
            score = rec.image_score
            if score is None:
                if bucket is None:
                    score = math.nan
                else:
                    raise ValueError(f"record {rec.scene_id} has no score; run score-pairs first")
            if bucket is not None and score not in bucket:
                continue
            items.append((rec, manifest.resolve(rec.noisy_path), manifest.resolve(rec.clean_path), score))
        elif bucket is None:
            items.append((rec, manifest.resolve(rec.clean_path), manifest.resolve(rec.clean_path), 1.0))
    return items


def _measure(codec: Codec, input_path: Path, truth_path: Path) -> tuple[float, float, float]:
    # compression sees only the input file; the ground truth is read afterwards
    noisy = load_image(input_path)
    data = codec.compress(noisy)
    recon = codec.decompress(data)
    truth = load_image(truth_path)
    return bpp(len(data), noisy.width, noisy.height), ms_ssim(recon, truth), psnr(recon, truth)


_WORKER_CODEC: Codec | None = None


def _init_worker(path: str) -> None:
    global _WORKER_CODEC
    _WORKER_CODEC = Codec.load(path)


def _measure_in_worker(args) -> tuple[float, float, float]:
    return _measure(_WORKER_CODEC, *args)


def evaluate(codec: Codec, manifest: Manifest | str | os.PathLike, bucket: Bucket | None = None, workers: int = 1, checkpoint_path: str | None = None) -> EvalResult:
    """Compress each bucketed input and score the reconstruction against its clean ground truth."""
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    items = select_test_items(manifest, bucket)
    if not items:
        log.warning("bucket %s selects no images", bucket.label() if bucket else "all")
    jobs = [(inp, truth) for _, inp, truth, _ in items]
    if workers > 1 and checkpoint_path and len(jobs) > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(str(checkpoint_path),)) as pool:
            measured = list(pool.map(_measure_in_worker, jobs))
    else:
        measured = [_measure(codec, *job) for job in jobs]
    results = [
        ImageResult(rec.scene_id, str(inp), score, b, s, p)
        for (rec, inp, _, score), (b, s, p) in zip(items, measured)
    ]
    results.sort(key=lambda r: (r.scene, r.input_path))
    return EvalResult(codec.codec_id, codec.lam, bucket, results)


def rd_points(checkpoints: Sequence[str | os.PathLike], manifest, buckets: Sequence[Bucket | None], workers: int = 1) -> list[tuple[Bucket | None, RDPoint, float]]:
    """One (bucket, point, mean input score) per checkpoint and bucket, sorted by codec then bpp."""
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    out = []
    for path in checkpoints:
        codec = Codec.load(path)
        for b in buckets:
            res = evaluate(codec, manifest, b, workers, str(path))
            pt = res.point()
            if pt is not None:
                out.append((b, pt, res.mean_input_score))
    out.sort(key=lambda t: (t[1].codec, t[0].label() if t[0] else "", t[1].bpp))
    return out


def write_dat(points: Iterable[RDPoint], path: str | os.PathLike) -> None:
    """Whitespace-separated blocks, one per codec, separated by two blank lines."""
    groups: dict[str, list[RDPoint]] = {}
    for p in points:
        groups.setdefault(p.codec, []).append(p)
    blocks = []
    for codec, pts in groups.items():
        lines = [f"# {codec}", "# bpp msssim psnr lambda"]
        lines += [" ".join(p.row()[i] for i in (2, 3, 4, 1)) for p in sorted(pts, key=lambda p: p.bpp)]
        blocks.append("\n".join(lines))
    with open(path, "w") as fh:
        fh.write("\n\n\n".join(blocks) + "\n")


def matched_msssim(points: Sequence[RDPoint], at_bpp: float) -> float:
    """MS-SSIM of a curve at ``at_bpp`` by linear interpolation (clamped at the ends)."""
    pts = sorted(points, key=lambda p: p.bpp)
    return float(np.interp(at_bpp, [p.bpp for p in pts], [p.ms_ssim for p in pts]))


# ----------------------------------------------------------- external codecs


@dataclass(frozen=True)
class ExternalCodec:
    name: str
    binaries: tuple[str, ...]
    roundtrip: Callable[[Path, int, Path], tuple[int, Path]]

    def available(self) -> bool:
        return all(shutil.which(b) for b in self.binaries)


def _run(cmd: list[str]) -> None:
    subprocess.run(cmd, check=True, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)


def _gm_jpeg(src: Path, q: int, work: Path) -> tuple[int, Path]:
    enc, dec = work / "out.jpg", work / "dec.ppm"
    _run(["gm", "convert", str(src), "-quality", str(q), str(enc)])
    _run(["gm", "convert", str(enc), str(dec)])
    return enc.stat().st_size, dec


def _cjxl(src: Path, q: int, work: Path) -> tuple[int, Path]:
    enc, dec = work / "out.jxl", work / "dec.png"
    _run(["cjxl", str(src), str(enc), "-q", str(q)])
    _run(["djxl", str(enc), str(dec)])
    return enc.stat().st_size, dec


def _bpg(src: Path, q: int, work: Path) -> tuple[int, Path]:
    # bpgenc's -q is a quantizer (0 best .. 51 worst); map quality 0..100 onto it
    enc, dec = work / "out.bpg", work / "dec.png"
    qp = int(round(51 - 51 * q / 100))
    png = work / "in.png"
    save_image(load_image(src), png)
    _run(["bpgenc", "-q", str(qp), "-o", str(enc), str(png)])
    _run(["bpgdec", "-o", str(dec), str(enc)])
    return enc.stat().st_size, dec


def _pil_jpeg(src: Path, q: int, work: Path) -> tuple[int, Path]:
    from PIL import Image

    img = load_image(src)
    arr = np.clip(np.rint(img.data.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="JPEG", quality=int(q))
    dec = work / "dec.png"
    Image.open(io.BytesIO(buf.getvalue())).convert("RGB").save(dec)
    return buf.tell(), dec


def _pil_available() -> bool:
    try:
        import PIL  # noqa: F401
    except ImportError:
        return False
    return True


EXTERNAL_CODECS = {
    "jpeg": ExternalCodec("jpeg", ("gm",), _gm_jpeg),
    "jxl": ExternalCodec("jxl", ("cjxl", "djxl"), _cjxl),
    "bpg": ExternalCodec("bpg", ("bpgenc", "bpgdec"), _bpg),
    "pil-jpeg": ExternalCodec("pil-jpeg", (), _pil_jpeg),
}


def external_available(name: str) -> bool:
    codec = EXTERNAL_CODECS[name]
    return _pil_available() if name == "pil-jpeg" else codec.available()


def evaluate_external(name: str, qualities: Sequence[int], manifest, bucket: Bucket | None = None) -> list[RDPoint]:
    """One RD point per quality setting; raises FileNotFoundError when the tool is missing."""
    if name not in EXTERNAL_CODECS:
        raise KeyError(f"unknown external codec {name!r}; choose from {sorted(EXTERNAL_CODECS)}")
    if not external_available(name):
        raise FileNotFoundError(f"{name}: required programs {EXTERNAL_CODECS[name].binaries or ('Pillow',)} not found")
    if not isinstance(manifest, Manifest):
        manifest = Manifest.load(manifest)
    items = select_test_items(manifest, bucket)
    points = []
    for q in qualities:
        rows = []
        for _, inp, truth, _ in items:
            src_img = load_image(inp)
            with tempfile.TemporaryDirectory() as tmp:
                size, dec = EXTERNAL_CODECS[name].roundtrip(Path(inp), int(q), Path(tmp))
                recon = load_image(dec)
            gt = load_image(truth)
            rows.append((bpp(size, src_img.width, src_img.height), ms_ssim(recon, gt), psnr(recon, gt)))
        if rows:
            arr = np.array(rows)
            finite = arr[np.isfinite(arr[:, 2]), 2]
            points.append(RDPoint(name, float(q), float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(finite.mean()) if finite.size else math.inf))
    return points


def latent_rate_bits(codec: Codec, img: ImageF32, prior: int = 0) -> float:
    q, _, _ = codec.analyse(img)
    return float(rate_bits(Tensor(q[None].astype(np.float64)), codec.priors[prior]).data)
