"""Deterministic synthetic real/tampered image benchmark.

Real images share one tight distribution: a per-image-centred radial
gradient plus a fixed low-frequency texture field plus a jittered base colour.
Fakes start from a fresh real image and apply one of four tampering families
strictly inside a rectangular mask::

    splice      blended patch from another real image (shifted source)
    warp        sinusoidal displacement field
    colorshift  per-channel gain/offset
    texture     band-limited noise injection

Every sample is a pure function of ``(spec.seed, split, family, index)``.
Images are quantised to 8 bits at generation time, so the PNG round trip is
exact.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import ConfigError, CorruptionError, DataIOError

log = logging.getLogger(__name__)

FAMILIES = ("splice", "warp", "colorshift", "texture")
SPLITS = ("train", "val", "test")
REAL = "none"

_FAMILY_ID = {REAL: 0, **{f: i + 1 for i, f in enumerate(FAMILIES)}}
_SPLIT_ID = {s: i for i, s in enumerate(SPLITS)}

# real-image generator constants
BASE_COLOR = np.array([0.55, 0.45, 0.40])
COLOR_JITTER = 0.015
CHANNEL_GAIN = np.array([1.0, 0.9, 0.8])
GRADIENT_AMPLITUDE = 0.25
CENTER_JITTER = 0.03
WIDTH_RANGE = (0.28, 0.32)
TEXTURE_COMPONENTS = 6
TEXTURE_AMPLITUDE = 0.02
TEXTURE_MAX_FREQ = 4


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    n_train: int = 400
    n_val: int = 100
    n_test: int = 100
    families: tuple[str, ...] = FAMILIES
    seed: int = 0
    tamper_area_frac: tuple[float, float] = (0.05, 0.25)

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(self.families))
        object.__setattr__(self, "tamper_area_frac", tuple(float(v) for v in self.tamper_area_frac))
        if not isinstance(self.image_size, int) or self.image_size < 8:
            raise ConfigError(f"data.image_size must be an integer >= 8, got {self.image_size!r}")
        for name in ("n_train", "n_val", "n_test"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"data.{name} must be a nonnegative integer, got {v!r}")
        if not self.families:
            raise ConfigError("data.families must name at least one family")
        for f in self.families:
            if f not in FAMILIES:
                raise ConfigError(f"data.families: unknown family {f!r}; expected one of {FAMILIES}")
        if len(set(self.families)) != len(self.families):
            raise ConfigError("data.families contains duplicates")
        lo, hi = self.tamper_area_frac
        if not (0.0 < lo <= hi < 1.0):
            raise ConfigError(f"data.tamper_area_frac must satisfy 0 < lo <= hi < 1, got {self.tamper_area_frac}")
        if math.ceil(lo * self.image_size**2) > math.floor(hi * self.image_size**2):
            raise ConfigError("data.tamper_area_frac range admits no integer pixel area at this image size")

    def count(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]

    def to_json(self) -> dict:
        d = asdict(self)
        d["families"] = list(self.families)
        d["tamper_area_frac"] = list(self.tamper_area_frac)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSpec":
        return cls(**{**d, "families": tuple(d["families"]), "tamper_area_frac": tuple(d["tamper_area_frac"])})


@dataclass
class SyntheticSample:
    image: np.ndarray  # (H, W, C) float32, multiples of 1/255
    label: int
    family: str
    mask: np.ndarray  # (H, W) bool
    provenance: tuple[int, str, int]  # (seed, split, index)
    base: Optional[np.ndarray] = None  # untampered source, fakes only


def _rng(spec: SyntheticSpec, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, *key]))


def _check_split(split: str) -> None:
    if split not in _SPLIT_ID:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def texture_field(spec: SyntheticSpec) -> np.ndarray:
    """Fixed zero-mean texture shared by every real image of ``spec``.

    A sum of cosines with integer, nonzero frequencies, so its mean over the
    pixel grid is exactly zero.
    """
    rng = _rng(spec, 7919)
    n = spec.image_size
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    tex = np.zeros((n, n, 3))
    for _ in range(TEXTURE_COMPONENTS):
        while True:
            fy, fx = rng.integers(-TEXTURE_MAX_FREQ, TEXTURE_MAX_FREQ + 1, size=2)
            if fy or fx:
                break
        phase = rng.uniform(0, 2 * np.pi)
        weights = rng.uniform(0.5, 1.0, size=3)
        wave = np.cos(2 * np.pi * (fy * ii + fx * jj) / n + phase)
        tex += TEXTURE_AMPLITUDE * wave[..., None] * weights
    return tex


def target_mean() -> float:
    """Expected pixel mean of a real image (before quantisation).

    The gradient term is centred per image and the texture is zero-mean, so
    only the base colour contributes; its jitter is symmetric.
    """
    return float(BASE_COLOR.mean())


def _real_image(spec: SyntheticSpec, rng: np.random.Generator, tex: np.ndarray) -> np.ndarray:
    n = spec.image_size
    color = BASE_COLOR + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)
    cy, cx = 0.5 + rng.uniform(-CENTER_JITTER, CENTER_JITTER, size=2)
    width = rng.uniform(*WIDTH_RANGE)
    coords = (np.arange(n) + 0.5) / n
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    g = g - g.mean()
    img = color + GRADIENT_AMPLITUDE * g[..., None] * CHANNEL_GAIN + tex
    return quantize(img)


def gen_real(spec: SyntheticSpec, split: str, index: int) -> SyntheticSample:
    _check_split(split)
    rng = _rng(spec, _SPLIT_ID[split], _FAMILY_ID[REAL], index)
    img = _real_image(spec, rng, texture_field(spec))
    mask = np.zeros(img.shape[:2], dtype=bool)
    return SyntheticSample(img, 0, REAL, mask, (spec.seed, split, index))


def sample_rect(
    rng: np.random.Generator, height: int, width: int, frac: tuple[float, float], max_tries: int = 1000
) -> tuple[int, int, int, int]:
    """Random axis-aligned rectangle ``(top, left, h, w)`` whose area fraction is in ``frac``."""
    area = height * width
    lo, hi = frac
    for _ in range(max_tries):
        a = rng.uniform(lo, hi) * area
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        h = int(round(math.sqrt(a * aspect)))
        w = int(round(a / max(h, 1)))
        if not (1 <= h <= height and 1 <= w <= width):
            continue
        if lo <= h * w / area <= hi:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    raise ConfigError(f"could not place a rectangle with area fraction in {frac}")


def _splice(base, rng, spec, tex):
    n = spec.image_size
    donor = _real_image(spec, rng, tex)
    dy, dx = rng.integers(n // 8, n // 2, size=2) * rng.choice([-1, 1], size=2)
    donor = np.roll(donor, (int(dy), int(dx)), axis=(0, 1))
    alpha = rng.uniform(0.7, 1.0)
    return (1 - alpha) * base + alpha * donor


def _warp(base, rng, spec, tex):
    n = spec.image_size
    amp = rng.uniform(1.5, 3.0, size=2)
    period = rng.uniform(6.0, 12.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    ii, jj = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float), indexing="ij")
    src_i = ii + amp[0] * np.sin(2 * np.pi * jj / period[0] + phase[0])
    src_j = jj + amp[1] * np.sin(2 * np.pi * ii / period[1] + phase[1])
    out = np.empty_like(base, dtype=float)
    for c in range(base.shape[2]):
        out[..., c] = map_coordinates(base[..., c].astype(float), [src_i, src_j], order=1, mode="reflect")
    return out


def _colorshift(base, rng, spec, tex):
    gain = rng.uniform(0.85, 1.15, size=3)
    offset = rng.uniform(0.04, 0.10, size=3) * rng.choice([-1.0, 1.0], size=3)
    return base * gain + offset


def _texture(base, rng, spec, tex):
    sigma = rng.uniform(0.7, 1.5)
    amp = rng.uniform(0.04, 0.08)
    noise = gaussian_filter(rng.standard_normal(base.shape), sigma=(sigma, sigma, 0))
    noise /= noise.std() + 1e-12
    return base + amp * noise


_TRANSFORMS = {"splice": _splice, "warp": _warp, "colorshift": _colorshift, "texture": _texture}


def tamper(base: np.ndarray, family: str, rng: np.random.Generator, spec: SyntheticSpec, tex=None):
    """Apply ``family`` inside a fresh random mask; returns ``(image, mask)``."""
    if family not in _TRANSFORMS:
        raise ConfigError(f"unknown family {family!r}; expected one of {FAMILIES}")
    tex = texture_field(spec) if tex is None else tex
    n = spec.image_size
    for _ in range(100):
        top, left, h, w = sample_rect(rng, n, n, spec.tamper_area_frac)
        mask = np.zeros((n, n), dtype=bool)
        mask[top : top + h, left : left + w] = True
        changed = quantize(_TRANSFORMS[family](base.astype(np.float64), rng, spec, tex))
        out = np.where(mask[..., None], changed, base).astype(np.float32)
        if np.any(out != base):
            return out, mask
    raise ConfigError(f"family {family!r} failed to alter the image in 100 draws")


def gen_fake(spec: SyntheticSpec, family: str, split: str, index: int) -> SyntheticSample:
    _check_split(split)
    if family not in spec.families:
        raise ConfigError(f"family {family!r} is not enabled in this spec ({spec.families})")
    rng = _rng(spec, _SPLIT_ID[split], _FAMILY_ID[family], index)
    tex = texture_field(spec)
    base = _real_image(spec, rng, tex)
    img, mask = tamper(base, family, rng, spec, tex)
    return SyntheticSample(img, 1, family, mask, (spec.seed, split, index), base=base)


def augment(image, rng: np.random.Generator):
    """Random horizontal flip (p=0.5) and random erasing (p=0.5).

    ``image`` is channel-first ``(C, H, W)`` (numpy or torch). Erasing fills a
    rectangle covering 2-10 % of the area with one uniform random value.
    """
    flip = rng.random() < 0.5
    erase = rng.random() < 0.5
    out = image
    if flip:
        out = flip_horizontal(out)
    if erase:
        _, h, w = out.shape
        top, left, eh, ew = sample_rect(rng, h, w, (0.02, 0.10))
        out = out.clone() if hasattr(out, "clone") else out.copy()
        out[:, top : top + eh, left : left + ew] = float(rng.uniform(0.0, 1.0))
    return out


def flip_horizontal(image):
    if hasattr(image, "flip"):
        return image.flip(-1)
    return image[..., ::-1].copy()


@dataclass
class SplitData:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    families: np.ndarray  # (N,) str, "none" for reals
    indices: np.ndarray  # (N,) int64
    masks: np.ndarray  # (N, H, W) bool
    paths: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def select(self, family: Optional[str] = None) -> "SplitData":
        """Reals plus the fakes of ``family`` (everything when ``None``)."""
        if family is None:
            return self
        keep = (self.families == REAL) | (self.families == family)
        return self.take(np.flatnonzero(keep))

    def take(self, idx) -> "SplitData":
        idx = np.asarray(idx, dtype=np.int64)
        paths = [self.paths[i] for i in idx] if self.paths else []
        return SplitData(
            self.images[idx], self.labels[idx], self.families[idx], self.indices[idx], self.masks[idx], paths
        )


def iter_split(spec: SyntheticSpec, split: str) -> Iterable[SyntheticSample]:
    n = spec.count(split)
    for i in range(n):
        yield gen_real(spec, split, i)
    for family in spec.families:
        for i in range(n):
            yield gen_fake(spec, family, split, i)


def _stack(samples: Sequence[SyntheticSample], size: int, paths=None) -> SplitData:
    if not samples:
        return SplitData(
            np.zeros((0, 3, size, size), np.float32),
            np.zeros(0, np.int64),
            np.zeros(0, dtype="<U10"),
            np.zeros(0, np.int64),
            np.zeros((0, size, size), bool),
            [],
        )
    return SplitData(
        np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32),
        np.array([s.label for s in samples], dtype=np.int64),
        np.array([s.family for s in samples]),
        np.array([s.provenance[2] for s in samples], dtype=np.int64),
        np.stack([s.mask for s in samples]),
        list(paths or []),
    )


def generate_split(spec: SyntheticSpec, split: str) -> SplitData:
    """In-memory equivalent of writing and reloading one split."""
    return _stack(list(iter_split(spec, split)), spec.image_size)


def _stem(sample: SyntheticSample) -> str:
    name = "real" if sample.family == REAL else sample.family
    return f"{name}_{sample.provenance[2]}"


def write_dataset(spec: SyntheticSpec, out_dir) -> Path:
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "spec.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")
        for split in SPLITS:
            (root / split / "images").mkdir(parents=True, exist_ok=True)
            (root / split / "masks").mkdir(parents=True, exist_ok=True)
            rows = []
            for sample in iter_split(spec, split):
                rel = f"images/{_stem(sample)}.png"
                Image.fromarray(_to_uint8(sample.image)).save(root / split / rel)
                if sample.label == 1:
                    mask = sample.mask.astype(np.uint8) * 255
                    Image.fromarray(mask).save(root / split / "masks" / f"{_stem(sample)}.png")
                rows.append((rel, sample.label, sample.family, sample.provenance[2]))
            with open(root / split / "labels.csv", "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["path", "label", "family", "index"])
                writer.writerows(rows)
    except OSError as exc:
        raise DataIOError(f"failed writing dataset to {root}: {exc}") from exc
    log.info("wrote dataset to %s", root)
    return root


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def read_image(path, size: Optional[int] = None) -> np.ndarray:
    """Load a PNG as ``(C, H, W)`` float32 in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"missing image file: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataIOError(f"cannot decode image {path}: {exc}") from exc
    if size is not None and arr.shape[:2] != (size, size):
        raise ConfigError(f"image {path} is {arr.shape[1]}x{arr.shape[0]}, expected {size}x{size}")
    return arr.transpose(2, 0, 1).copy()


def load_spec(root) -> SyntheticSpec:
    path = Path(root) / "spec.json"
    if not path.is_file():
        raise DataIOError(f"missing dataset spec: {path}")
    return SyntheticSpec.from_json(json.loads(path.read_text()))


def load_split(root, split: str, spec: Optional[SyntheticSpec] = None) -> SplitData:
    root = Path(root)
    spec = spec or load_spec(root)
    index_path = root / split / "labels.csv"
    if not index_path.is_file():
        raise DataIOError(f"missing index file: {index_path}")
    with open(index_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "label", "family", "index"]:
            raise CorruptionError(f"{index_path}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    images, masks, labels, families, indices, paths = [], [], [], [], [], []
    n = spec.image_size
    for row in rows:
        label = int(row["label"])
        family = row["family"]
        if (label == 0) != (family == REAL) or label not in (0, 1):
            raise CorruptionError(f"{index_path}: label {label} inconsistent with family {family!r}")
        img_path = root / split / row["path"]
        if not img_path.is_file():
            raise CorruptionError(f"missing image file: {img_path}")
        images.append(read_image(img_path, n))
        if label == 1:
            mask_path = root / split / "masks" / Path(row["path"]).name
            if not mask_path.is_file():
                raise CorruptionError(f"missing mask file: {mask_path}")
            with Image.open(mask_path) as im:
                mask = np.asarray(im) > 127
            if not mask.any():
                raise CorruptionError(f"{mask_path}: fake sample with an empty mask")
        else:
            mask = np.zeros((n, n), dtype=bool)
        masks.append(mask)
        labels.append(label)
        families.append(family)
        indices.append(int(row["index"]))
        paths.append(row["path"])
    if not rows:
        return _stack([], n)
    return SplitData(
        np.stack(images),
        np.array(labels, dtype=np.int64),
        np.array(families),
        np.array(indices, dtype=np.int64),
        np.stack(masks),
        paths,
    )


def load_dataset(root) -> dict[str, SplitData]:
    root = Path(root)
    if not root.is_dir():
        raise DataIOError(f"dataset directory not found: {root}")
    spec = load_spec(root)
    return {split: load_split(root, split, spec) for split in SPLITS}
