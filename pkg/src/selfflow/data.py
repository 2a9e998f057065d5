"""Procedural labelled 16x16 shape images, tokenized into 4x4 patches.

Every sample is a pure function of (spec, seed, split, index); labels cycle
through the classes (``index % K``) so class counts are balanced exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .rng import stream

CLASS_NAMES = (
    "filled_circle",
    "ring",
    "square",
    "cross",
    "stripes_h",
    "stripes_v",
    "checkerboard",
    "two_blob",
)
SPLITS = {"train": 0, "heldout": 1}
FORMAT_VERSION = 1
NORM_SAMPLES = 10_000


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 16
    patch: int = 4
    num_classes: int = 8
    pixel_noise: float = 0.05
    n_train: int = 10_000
    n_eval: int = 4_096
    norm_mean: float | None = None
    norm_std: float | None = None

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError(f"patch {self.patch} must divide image size {self.image_size}")
        if not 2 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must lie in [2, {len(CLASS_NAMES)}]")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("split sizes must be positive")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch

    @property
    def normalized(self) -> bool:
        return self.norm_mean is not None and self.norm_std is not None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset spec fields: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# rendering


def _soft(x):
    return np.clip(x + 0.5, 0.0, 1.0)


def render(label: int, rng: np.random.Generator, size: int = 16, pixel_noise: float = 0.05) -> np.ndarray:
    """One image in [-1, 1]: background -1, shape at a jittered intensity."""
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2
    cx, cy = c + rng.uniform(-2, 2), c + rng.uniform(-2, 2)
    r = rng.uniform(0.2, 0.36) * size
    intensity = rng.uniform(0.6, 1.0)
    phase = rng.uniform(0, 2 * np.pi)
    period = rng.uniform(3.5, 5.0)
    dx, dy = x - cx, y - cy
    d = np.hypot(dx, dy)
    cheb = np.maximum(np.abs(dx), np.abs(dy))
    name = CLASS_NAMES[label]
    if name == "filled_circle":
        m = _soft(r - d)
    elif name == "ring":
        m = _soft(0.9 - np.abs(d - r))
    elif name == "square":
        m = _soft(0.8 * r - cheb)
    elif name == "cross":
        arm = np.minimum(np.abs(dx), np.abs(dy))
        m = _soft(1.2 - arm) * _soft(r - cheb)
    elif name == "stripes_h":
        m = _soft(2.5 * np.sin(2 * np.pi * y / period + phase))
    elif name == "stripes_v":
        m = _soft(2.5 * np.sin(2 * np.pi * x / period + phase))
    elif name == "checkerboard":
        p = 2 * np.pi / (1.6 * period)
        m = _soft(2.5 * np.sin(p * x + phase) * np.sin(p * y + phase))
    else:
        off = 0.55 * r
        horizontal = rng.random() < 0.5
        ox, oy = (off, 0.0) if horizontal else (0.0, off)
        b = 0.55 * r
        m = np.maximum(_soft(b - np.hypot(dx - ox, dy - oy)), _soft(b - np.hypot(dx + ox, dy + oy)))
    img = -1.0 + 2.0 * intensity * m
    img = img + pixel_noise * rng.standard_normal(img.shape)
    return np.clip(img, -1.0, 1.0)


def tokenize(images: np.ndarray, patch: int = 4) -> np.ndarray:
    """[..., S, S] images -> [..., N, patch*patch] row-major patches."""
    images = np.asarray(images, dtype=np.float64)
    S = images.shape[-1]
    if images.shape[-2] != S or S % patch:
        raise ValueError(f"tokenize: image shape {images.shape[-2:]} not divisible into {patch}x{patch} patches")
    g = S // patch
    lead = images.shape[:-2]
    x = images.reshape(lead + (g, patch, g, patch))
    x = np.moveaxis(x, -3, -2)  # [..., g, g, patch, patch]
    return x.reshape(lead + (g * g, patch * patch))


def detokenize(tokens: np.ndarray, patch: int = 4) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    N, C = tokens.shape[-2:]
    g = int(round(np.sqrt(N)))
    if g * g != N or C != patch * patch:
        raise ValueError(f"detokenize: token shape {tokens.shape[-2:]} incompatible with patch {patch}")
    lead = tokens.shape[:-2]
    x = tokens.reshape(lead + (g, g, patch, patch))
    x = np.moveaxis(x, -2, -3)
    return x.reshape(lead + (g * patch, g * patch))


# --------------------------------------------------------------------------
# generation


def raw_images(spec: DatasetSpec, seed: int, split: str, start: int, stop: int):
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    sid = SPLITS[split]
    imgs = np.empty((stop - start, spec.image_size, spec.image_size))
    labels = np.arange(start, stop) % spec.num_classes
    for j, idx in enumerate(range(start, stop)):
        rng = stream(seed, "data", sid, idx)
        imgs[j] = render(int(labels[j]), rng, spec.image_size, spec.pixel_noise)
    return imgs, labels


def normalize_spec(spec: DatasetSpec, seed: int) -> DatasetSpec:
    """Freeze zero-mean / unit-std pixel statistics from the first 10^4 train samples."""
    if spec.normalized:
        return spec
    imgs, _ = raw_images(spec, seed, "train", 0, NORM_SAMPLES)
    return replace(spec, norm_mean=float(imgs.mean()), norm_std=float(imgs.std()))


def generate(spec: DatasetSpec, seed: int, n: int, split: str, start: int = 0):
    """Normalized tokens [n, N, C] and labels [n] for indices start..start+n-1."""
    if n < 1:
        raise ValueError("generate: n must be >= 1")
    if not spec.normalized:
        spec = normalize_spec(spec, seed)
    imgs, labels = raw_images(spec, seed, split, start, start + n)
    imgs = (imgs - spec.norm_mean) / spec.norm_std
    return tokenize(imgs, spec.patch), labels


def iter_generate(spec: DatasetSpec, seed: int, n: int, split: str, chunk: int = 1024):
    """Stream (tokens, labels) chunks without materializing the split."""
    if not spec.normalized:
        spec = normalize_spec(spec, seed)
    for a in range(0, n, chunk):
        yield generate(spec, seed, min(chunk, n - a), split, start=a)


def to_pixels(tokens: np.ndarray, spec: DatasetSpec) -> np.ndarray:
    if not spec.normalized:
        raise ValueError("to_pixels needs a spec with frozen normalization statistics")
    img = detokenize(tokens, spec.patch)
    return img * spec.norm_std + spec.norm_mean


# --------------------------------------------------------------------------
# file format: u64 header length | JSON header | f32 tokens | u16 labels


def _pack(header: dict, *buffers: bytes) -> bytes:
    h = json.dumps(header, sort_keys=True).encode("utf-8")
    return struct.pack("<Q", len(h)) + h + b"".join(buffers)


def _read_header(f) -> tuple[dict, int]:
    raw = f.read(8)
    if len(raw) < 8:
        raise DatasetFormatError("truncated file: missing header length")
    (n,) = struct.unpack("<Q", raw)
    body = f.read(n)
    if len(body) < n:
        raise DatasetFormatError("truncated file: incomplete header")
    try:
        return json.loads(body.decode("utf-8")), 8 + n
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DatasetFormatError(f"corrupt header: {err}") from None


def write_dataset(path, spec: DatasetSpec, seed: int, split: str, tokens, labels, config_hash: str | None = None):
    tokens = np.asarray(tokens)
    labels = np.asarray(labels)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "seed": int(seed),
        "n": int(tokens.shape[0]),
        "split": split,
        "token_shape": list(tokens.shape[1:]),
    }
    if config_hash:
        header["config_hash"] = config_hash
    blob = _pack(header, tokens.astype("<f4").tobytes(), labels.astype("<u2").tobytes())
    Path(path).write_bytes(blob)
    return header


def read_header(path) -> dict:
    with open(path, "rb") as f:
        header, _ = _read_header(f)
    return header


def spec_diff(a: dict, b: dict) -> dict:
    keys = sorted(set(a) | set(b))
    return {k: (a.get(k), b.get(k)) for k in keys if a.get(k) != b.get(k)}


def read_dataset(path, expect_spec: DatasetSpec | None = None):
    with open(path, "rb") as f:
        header, offset = _read_header(f)
        payload = f.read()
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"format version mismatch: file {header.get('format_version')}, reader {FORMAT_VERSION}"
        )
    if expect_spec is not None:
        diff = spec_diff(expect_spec.to_dict(), header["spec"])
        if diff:
            raise DatasetFormatError(f"dataset spec mismatch (expected, file): {diff}")
    n = header["n"]
    shape = (n, *header["token_shape"])
    n_tok = int(np.prod(shape))
    need = 4 * n_tok + 2 * n
    if len(payload) != need:
        raise DatasetFormatError(f"truncated or oversized payload: {len(payload)} bytes, expected {need}")
    tokens = np.frombuffer(payload, dtype="<f4", count=n_tok).reshape(shape).astype(np.float64)
    labels = np.frombuffer(payload, dtype="<u2", count=n, offset=4 * n_tok).astype(np.int64)
    return header, tokens, labels
