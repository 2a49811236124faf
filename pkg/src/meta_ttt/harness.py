"""Desk-scale data harness: synthetic digit corpus, corruptions, domains.

The corpus container is a directory holding ``manifest.json`` plus two raw
little-endian blobs, ``images.f32`` and ``labels.i32`` — bit-exact and
toolchain-neutral.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

IMAGE_SIZE = 28

CORRUPTION_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "contrast",
    "brightness",
    "pixelate",
)

# severity tables, index 0 = severity 1; calibrated so frozen source-model
# error rises with severity on the digits corpus
SEVERITY_TABLES = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),  # additive sigma
    "shot_noise": (500.0, 250.0, 120.0, 60.0, 25.0),  # photons per unit
    "impulse_noise": (0.01, 0.03, 0.06, 0.10, 0.17),  # flip fraction
    "contrast": (0.75, 0.55, 0.40, 0.30, 0.20),  # scale about the mean
    "brightness": (0.08, 0.16, 0.24, 0.33, 0.45),  # additive offset
    "pixelate": (20, 16, 12, 8, 6),  # downsampled side length
}


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    images: np.ndarray  # float32 [N,1,h,w] in [0,1]
    labels: np.ndarray  # int32 [N]
    class_count: int
    provenance: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise CorpusError("images must be [N,c,h,w]")
        if len(self.labels) != len(self.images):
            raise CorpusError("images/labels length mismatch")
        if not np.isfinite(self.images).all():
            raise CorpusError("non-finite image data")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise CorpusError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise CorpusError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in range(1, 6):
            raise CorpusError("severity must be in 1..5")


def _digit_font(size: int) -> ImageFont.ImageFont:
    try:
        return ImageFont.load_default(size=size)
    except TypeError:  # older Pillow without sized default font
        return ImageFont.load_default()


def generate_digits(n: int, seed: int = 0, class_count: int = 10) -> Corpus:
    """Render jittered digit glyphs: random scale, offset, rotation, intensity."""
    rng = np.random.default_rng(seed)
    big = IMAGE_SIZE * 2
    images = np.empty((n, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    labels = rng.integers(0, class_count, size=n).astype(np.int32)
    fonts = {s: _digit_font(s) for s in range(28, 45)}
    for i in range(n):
        size = int(rng.integers(28, 45))
        angle = float(rng.uniform(-20, 20))
        dx = int(rng.integers(-5, 6))
        dy = int(rng.integers(-5, 6))
        fg = float(rng.uniform(0.7, 1.0))
        bg = float(rng.uniform(0.0, 0.12))
        canvas = Image.new("L", (big, big), 0)
        draw = ImageDraw.Draw(canvas)
        font = fonts[size]
        text = str(labels[i] % 10)
        bbox = draw.textbbox((0, 0), text, font=font)
        x = (big - (bbox[2] - bbox[0])) // 2 - bbox[0] + dx
        y = (big - (bbox[3] - bbox[1])) // 2 - bbox[1] + dy
        draw.text((x, y), text, fill=255, font=font)
        canvas = canvas.rotate(angle, resample=Image.BILINEAR)
        canvas = canvas.resize((IMAGE_SIZE, IMAGE_SIZE), resample=Image.BILINEAR)
        arr = np.asarray(canvas, dtype=np.float32) / 255.0
        # mild per-image sensor noise so the corpus is not unnaturally crisp
        grain = float(rng.uniform(0.0, 0.06))
        arr = bg + arr * (fg - bg) + rng.normal(0.0, grain, size=arr.shape)
        images[i, 0] = np.clip(arr, 0.0, 1.0)
    return Corpus(images=images, labels=labels, class_count=class_count,
                  provenance=f"digits(n={n},seed={seed})")


def save_corpus(corpus: Corpus, path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "shape": list(corpus.images.shape),
        "class_count": corpus.class_count,
        "provenance": corpus.provenance,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    (out / "images.f32").write_bytes(
        np.ascontiguousarray(corpus.images, dtype="<f4").tobytes()
    )
    (out / "labels.i32").write_bytes(
        np.ascontiguousarray(corpus.labels, dtype="<i4").tobytes()
    )
    return out


def load_corpus(spec: str, n: int = 1000, seed: int = 0, class_count: int = 10) -> Corpus:
    """Load a saved container, or run the built-in generator ``"digits"``."""
    if spec == "digits":
        return generate_digits(n, seed=seed, class_count=class_count)
    path = Path(spec)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise CorpusError(f"no corpus container at {path}")
    manifest = json.loads(manifest_path.read_text())
    shape = tuple(manifest["shape"])
    images = np.frombuffer((path / "images.f32").read_bytes(), dtype="<f4")
    if images.size != int(np.prod(shape)):
        raise CorpusError(f"truncated image blob in {path}")
    labels = np.frombuffer((path / "labels.i32").read_bytes(), dtype="<i4")
    return Corpus(
        images=images.reshape(shape).copy(),
        labels=labels.copy(),
        class_count=int(manifest["class_count"]),
        provenance=str(manifest.get("provenance", str(path))),
    )


def _corruption_rng(spec: CorruptionSpec) -> np.random.Generator:
    return np.random.default_rng(
        [spec.seed, spec.severity, CORRUPTION_KINDS.index(spec.kind)]
    )


def corrupt(corpus: Corpus, spec: CorruptionSpec) -> Corpus:
    """Apply one corruption kind at the given severity; labels untouched."""
    rng = _corruption_rng(spec)
    x = corpus.images.astype(np.float64)
    level = SEVERITY_TABLES[spec.kind][spec.severity - 1]
    if spec.kind == "gaussian_noise":
        x = x + rng.normal(0.0, level, size=x.shape)
    elif spec.kind == "shot_noise":
        x = rng.poisson(x * level) / level
    elif spec.kind == "impulse_noise":
        flips = rng.random(x.shape) < level
        salt = rng.random(x.shape) < 0.5
        x = np.where(flips, np.where(salt, 1.0, 0.0), x)
    elif spec.kind == "contrast":
        mean = x.mean(axis=(2, 3), keepdims=True)
        x = mean + level * (x - mean)
    elif spec.kind == "brightness":
        x = x + level
    elif spec.kind == "pixelate":
        side = int(level)
        n, c, h, w = x.shape
        ys = (np.arange(h) * side // h)
        xs = (np.arange(w) * side // w)
        small = np.add.reduceat(
            np.add.reduceat(x, np.flatnonzero(np.r_[1, np.diff(ys)]), axis=2),
            np.flatnonzero(np.r_[1, np.diff(xs)]), axis=3,
        )
        counts = np.outer(np.bincount(ys), np.bincount(xs))
        small = small / counts[None, None]
        x = small[:, :, ys, :][:, :, :, xs]
    out = np.clip(x, 0.0, 1.0).astype(np.float32)
    return Corpus(
        images=out,
        labels=corpus.labels.copy(),
        class_count=corpus.class_count,
        provenance=f"{corpus.provenance}+{spec.kind}@{spec.severity}",
    )


def make_domains(corpus: Corpus, specs: list[CorruptionSpec | None]) -> list[Corpus]:
    """Disjoint round-robin split of the corpus, one transform per domain.

    ``None`` entries keep the split untouched. Needs at least 2 domains so
    leave-one-out iteration is possible.
    """
    if len(specs) < 2:
        raise CorpusError("leave-one-out needs at least 2 domains")
    domains = []
    for d, spec in enumerate(specs):
        idx = np.arange(d, len(corpus), len(specs))
        part = Corpus(
            images=corpus.images[idx].copy(),
            labels=corpus.labels[idx].copy(),
            class_count=corpus.class_count,
            provenance=f"{corpus.provenance}/domain{d}",
        )
        domains.append(part if spec is None else corrupt(part, spec))
    return domains
