"""Subject domains: synthetic generation, disk I/O, augmentation, sampling.

A subject domain is one person's worth of flattened grayscale images plus
labels when the subject plays the source role. Synthetic subjects share
class base patterns but differ in brightness, contrast, translation, and
noise, which creates a controllable inter-subject shift. The on-disk format
is one directory per subject with `manifest.json` and `samples.csv`
(`label,px0,...,pxN` rows, label -1 when unlabeled).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError
from .nn_core import as_matrix

# subject parameter ranges used by make_benchmark
_SOURCE_BRIGHTNESS = (-0.10, 0.10)
_SOURCE_CONTRAST = (0.85, 1.15)
_SOURCE_TRANSLATION_MAX = 2
_SOURCE_NOISE = (0.03, 0.07)
_TARGET_BRIGHTNESS_MAG = (0.15, 0.30)
_TARGET_CONTRAST_LOW = (0.62, 0.78)
_TARGET_CONTRAST_HIGH = (1.28, 1.45)
_TARGET_TRANSLATION = (3, 4)
_TARGET_NOISE = (0.04, 0.08)
_IRRELEVANT_CONTRAST = 3.0
_IRRELEVANT_NOISE = 0.5


@dataclass
class SubjectDomain:
    """Samples of one subject; labels are present exactly for the source role."""

    subject_id: str
    samples: np.ndarray
    labels: np.ndarray | None
    image_height: int
    image_width: int
    role: str  # "source" | "target"

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValidationError(f"role must be 'source' or 'target', got {self.role!r}")
        self.samples = as_matrix(self.samples, f"samples of {self.subject_id}")
        if self.samples.shape[1] != self.image_height * self.image_width:
            raise ShapeError(
                f"{self.subject_id}: samples have {self.samples.shape[1]} columns, "
                f"expected {self.image_height}x{self.image_width}="
                f"{self.image_height * self.image_width}"
            )
        if self.samples.size and (self.samples.min() < 0.0 or self.samples.max() > 1.0):
            raise ValidationError(f"{self.subject_id}: pixel values outside [0, 1]")
        if self.role == "source":
            if self.labels is None:
                raise ValidationError(f"{self.subject_id}: source domain requires labels")
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.samples.shape[0],):
                raise ShapeError(
                    f"{self.subject_id}: labels shape {self.labels.shape} does not "
                    f"match {self.samples.shape[0]} rows"
                )
            if self.labels.size and self.labels.min() < 0:
                raise ValidationError(f"{self.subject_id}: negative label")
        elif self.labels is not None:
            raise ValidationError(f"{self.subject_id}: target domain must be unlabeled")

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class SubjectSpec:
    """Recipe for one synthetic subject; fully determined by its seed."""

    num_classes: int = 2
    samples_per_class: int = 40
    image_size: tuple[int, int] = (16, 16)
    brightness_offset: float = 0.0
    contrast_gain: float = 1.0
    translation: tuple[int, int] = (0, 0)
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        dx, dy = self.translation
        if self.num_classes < 2 or self.num_classes > 6:
            raise ValidationError(f"num_classes must be in [2, 6], got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ValidationError("samples_per_class must be >= 1")
        if h < 2 or w < 2:
            raise ValidationError(f"image_size too small: {self.image_size}")
        if not self.contrast_gain > 0.0:
            raise ValidationError(f"contrast_gain must be > 0, got {self.contrast_gain}")
        if self.noise_std < 0.0:
            raise ValidationError(f"noise_std must be >= 0, got {self.noise_std}")
        if abs(dx) >= w / 2 or abs(dy) >= h / 2:
            raise ValidationError(
                f"translation {self.translation} too large for image {self.image_size}"
            )


def base_patterns(num_classes: int, height: int, width: int) -> np.ndarray:
    """Per-class base images in [0, 1], shape (num_classes, height, width).

    Class 0 is a left-bright horizontal gradient (horizontally asymmetric, so
    mirroring changes it); class 1 is a centered bright blob (symmetric);
    classes 2..5 are blobs at distinct fixed corners.
    """
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    sigma = min(height, width) / 6.0

    def blob(cy: float, cx: float) -> np.ndarray:
        return np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sigma**2))

    patterns = [np.broadcast_to(1.0 - cols / (width - 1.0), (height, width)).copy()]
    patterns.append(blob((height - 1) / 2.0, (width - 1) / 2.0))
    corners = [
        (height / 4.0, width / 4.0),
        (height / 4.0, 3.0 * width / 4.0),
        (3.0 * height / 4.0, width / 4.0),
        (3.0 * height / 4.0, 3.0 * width / 4.0),
    ]
    for c in range(2, num_classes):
        patterns.append(blob(*corners[c - 2]))
    return np.stack(patterns[:num_classes])


def _translate(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift image content by (dx columns, dy rows) with zero padding."""
    h, w = img.shape
    out = np.zeros_like(img)
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def generate_subject(spec: SubjectSpec, subject_id: str = "subject") -> SubjectDomain:
    """Deterministically generate one labeled subject from its spec.

    Every class contributes exactly samples_per_class rows:
    clip(gain * base + offset + noise, 0, 1), then translated.
    """
    h, w = spec.image_size
    rng = np.random.default_rng(spec.seed)
    patterns = base_patterns(spec.num_classes, h, w)
    dx, dy = spec.translation
    rows = []
    labels = []
    for c in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            img = spec.contrast_gain * patterns[c] + spec.brightness_offset
            if spec.noise_std > 0.0:
                img = img + rng.normal(0.0, spec.noise_std, size=(h, w))
            img = np.clip(img, 0.0, 1.0)
            img = _translate(img, dx, dy)
            rows.append(img.ravel())
            labels.append(c)
    return SubjectDomain(
        subject_id=subject_id,
        samples=np.array(rows),
        labels=np.array(labels),
        image_height=h,
        image_width=w,
        role="source",
    )


def strip_labels(domain: SubjectDomain) -> SubjectDomain:
    """Unlabeled target-role copy of a labeled domain."""
    return SubjectDomain(
        subject_id=domain.subject_id,
        samples=domain.samples.copy(),
        labels=None,
        image_height=domain.image_height,
        image_width=domain.image_width,
        role="target",
    )


def merge_domains(domains: list[SubjectDomain], subject_id: str = "combined") -> SubjectDomain:
    """Concatenate labeled domains into a single source domain (list order kept)."""
    if not domains:
        raise ValidationError("cannot merge an empty domain list")
    h, w = domains[0].image_height, domains[0].image_width
    for d in domains:
        if (d.image_height, d.image_width) != (h, w):
            raise ShapeError(f"{d.subject_id}: image size differs from {h}x{w}")
        if d.labels is None:
            raise ValidationError(f"{d.subject_id}: cannot merge unlabeled domain")
    return SubjectDomain(
        subject_id=subject_id,
        samples=np.vstack([d.samples for d in domains]),
        labels=np.concatenate([d.labels for d in domains]),
        image_height=h,
        image_width=w,
        role="source",
    )


def augment_hflip(domain_or_batch, image_height: int | None = None, image_width: int | None = None):
    """Mirror every image left-right; applying twice restores the input bitwise.

    Accepts a SubjectDomain (geometry from its fields) or a sample matrix
    plus explicit image_height/image_width.
    """
    if isinstance(domain_or_batch, SubjectDomain):
        d = domain_or_batch
        flipped = augment_hflip(d.samples, d.image_height, d.image_width)
        labels = None if d.labels is None else d.labels.copy()
        return SubjectDomain(d.subject_id, flipped, labels, d.image_height, d.image_width, d.role)
    if image_height is None or image_width is None:
        raise ValidationError("image_height and image_width are required for raw matrices")
    batch = as_matrix(domain_or_batch, "batch")
    if batch.shape[1] != image_height * image_width:
        raise ShapeError(
            f"batch has {batch.shape[1]} columns, expected "
            f"{image_height}x{image_width}={image_height * image_width}"
        )
    imgs = batch.reshape(batch.shape[0], image_height, image_width)
    return imgs[:, :, ::-1].reshape(batch.shape[0], -1).copy()


@dataclass
class DomainBatch:
    subject_id: str
    samples: np.ndarray
    labels: np.ndarray | None


def sample_multi_domain_batch(
    domains: list[SubjectDomain], batch_size: int, rng: np.random.Generator
) -> list[DomainBatch]:
    """One batch of exactly batch_size rows per domain.

    Sampling is without replacement when a domain has at least batch_size
    rows (batch_size == rows gives a permutation of all rows) and with
    replacement otherwise. Deterministic given the generator state.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    batches = []
    for d in domains:
        n = d.num_samples
        if n == 0:
            raise ValidationError(f"domain {d.subject_id} has no samples")
        if n >= batch_size:
            idx = rng.choice(n, size=batch_size, replace=False)
        else:
            idx = rng.integers(0, n, size=batch_size)
        labels = None if d.labels is None else d.labels[idx]
        batches.append(DomainBatch(d.subject_id, d.samples[idx], labels))
    return batches


# ---------------------------------------------------------------------------
# on-disk per-subject format


def write_subject_dir(domain: SubjectDomain, path, num_classes: int) -> Path:
    """Write manifest.json plus samples.csv for one subject; returns the dir."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    labeled = domain.labels is not None
    manifest = {
        "subject_id": domain.subject_id,
        "image_height": domain.image_height,
        "image_width": domain.image_width,
        "num_classes": num_classes,
        "labeled": labeled,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    lines = []
    for i in range(domain.num_samples):
        label = int(domain.labels[i]) if labeled else -1
        pixels = ",".join(repr(v) for v in domain.samples[i])
        lines.append(f"{label},{pixels}")
    (out / "samples.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def load_subject_dir(path) -> SubjectDomain:
    """Load one subject directory; row order follows file order."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ValidationError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"malformed manifest {manifest_path}: {e}") from None
    required = ("subject_id", "image_height", "image_width", "num_classes", "labeled")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise ValidationError(f"{manifest_path}: missing manifest fields {missing}")
    h = int(manifest["image_height"])
    w = int(manifest["image_width"])
    num_classes = int(manifest["num_classes"])
    labeled = bool(manifest["labeled"])

    samples_path = root / "samples.csv"
    if not samples_path.is_file():
        raise ValidationError(f"samples file not found: {samples_path}")
    rows = []
    labels = []
    expected = h * w
    with open(samples_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != expected + 1:
                raise ValidationError(
                    f"{samples_path} line {lineno}: expected {expected} pixel values, "
                    f"got {len(parts) - 1}"
                )
            try:
                label = int(parts[0])
                pixels = np.array(parts[1:], dtype=np.float64)
            except ValueError:
                raise ValidationError(f"{samples_path} line {lineno}: malformed number") from None
            if labeled:
                if not 0 <= label < num_classes:
                    raise ValidationError(
                        f"{samples_path} line {lineno}: label {label} outside "
                        f"[0, {num_classes})"
                    )
            elif label != -1:
                raise ValidationError(
                    f"{samples_path} line {lineno}: unlabeled subject must use label -1"
                )
            if pixels.min() < 0.0 or pixels.max() > 1.0:
                raise ValidationError(f"{samples_path} line {lineno}: pixel outside [0, 1]")
            rows.append(pixels)
            labels.append(label)
    if not rows:
        raise ValidationError(f"{samples_path}: no samples")
    return SubjectDomain(
        subject_id=str(manifest["subject_id"]),
        samples=np.array(rows),
        labels=np.array(labels) if labeled else None,
        image_height=h,
        image_width=w,
        role="source" if labeled else "target",
    )


def load_domains_dir(path) -> list[SubjectDomain]:
    """Load a directory of subject subdirectories (or a single subject dir)."""
    root = Path(path)
    if (root / "manifest.json").is_file():
        return [load_subject_dir(root)]
    subdirs = sorted(p for p in root.iterdir() if (p / "manifest.json").is_file())
    if not subdirs:
        raise ValidationError(f"no subject directories under {root}")
    return [load_subject_dir(p) for p in subdirs]


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class DataSpec:
    """Shape of a synthetic multi-subject benchmark."""

    num_sources: int = 12
    num_targets: int = 3
    num_classes: int = 2
    samples_per_class: int = 40
    image_height: int = 16
    image_width: int = 16
    num_irrelevant: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_sources < 1 or self.num_targets < 1:
            raise ValidationError("need at least one source and one target subject")
        if not 0 <= self.num_irrelevant <= self.num_sources:
            raise ValidationError(
                f"num_irrelevant must be in [0, {self.num_sources}], got {self.num_irrelevant}"
            )


@dataclass
class TargetBundle:
    """One target subject: unlabeled adaptation split, its hidden ground
    truth (diagnostics and the supervised upper bound only), and a labeled
    held-out evaluation split drawn from the same subject."""

    subject_id: str
    adapt: SubjectDomain
    adapt_labels: np.ndarray
    eval_set: SubjectDomain


@dataclass
class Benchmark:
    sources: list[SubjectDomain]
    targets: list[TargetBundle]
    spec: DataSpec


def _draw_source_params(rng: np.random.Generator, irrelevant: bool) -> dict:
    t = _SOURCE_TRANSLATION_MAX
    params = {
        "brightness_offset": float(rng.uniform(*_SOURCE_BRIGHTNESS)),
        "contrast_gain": float(rng.uniform(*_SOURCE_CONTRAST)),
        "translation": (int(rng.integers(-t, t + 1)), int(rng.integers(-t, t + 1))),
        "noise_std": float(rng.uniform(*_SOURCE_NOISE)),
    }
    if irrelevant:
        params["contrast_gain"] = _IRRELEVANT_CONTRAST
        params["noise_std"] = _IRRELEVANT_NOISE
    return params


def _draw_target_params(rng: np.random.Generator) -> dict:
    sign = 1.0 if rng.random() < 0.5 else -1.0
    lo, hi = _TARGET_CONTRAST_LOW if rng.random() < 0.5 else _TARGET_CONTRAST_HIGH
    mag_lo, mag_hi = _TARGET_TRANSLATION
    dx = int(rng.integers(mag_lo, mag_hi + 1)) * (1 if rng.random() < 0.5 else -1)
    dy = int(rng.integers(mag_lo, mag_hi + 1)) * (1 if rng.random() < 0.5 else -1)
    return {
        "brightness_offset": float(sign * rng.uniform(*_TARGET_BRIGHTNESS_MAG)),
        "contrast_gain": float(rng.uniform(lo, hi)),
        "translation": (dx, dy),
        "noise_std": float(rng.uniform(*_TARGET_NOISE)),
    }


def make_benchmark(spec: DataSpec) -> Benchmark:
    """Generate the synthetic benchmark: labeled sources plus target bundles.

    The last `num_irrelevant` sources use the extreme contrast/noise preset.
    Everything is determined by spec.seed.
    """
    rng = np.random.default_rng(spec.seed)
    common = {
        "num_classes": spec.num_classes,
        "samples_per_class": spec.samples_per_class,
        "image_size": (spec.image_height, spec.image_width),
    }
    sources = []
    for i in range(spec.num_sources):
        irrelevant = i >= spec.num_sources - spec.num_irrelevant
        params = _draw_source_params(rng, irrelevant)
        sub_seed = int(rng.integers(0, 2**31 - 1))
        sources.append(
            generate_subject(SubjectSpec(seed=sub_seed, **common, **params), f"s{i:02d}")
        )
    targets = []
    for j in range(spec.num_targets):
        params = _draw_target_params(rng)
        adapt_seed = int(rng.integers(0, 2**31 - 1))
        eval_seed = int(rng.integers(0, 2**31 - 1))
        sid = f"t{j:02d}"
        labeled = generate_subject(SubjectSpec(seed=adapt_seed, **common, **params), sid)
        eval_set = generate_subject(SubjectSpec(seed=eval_seed, **common, **params), sid)
        targets.append(
            TargetBundle(
                subject_id=sid,
                adapt=strip_labels(labeled),
                adapt_labels=labeled.labels.copy(),
                eval_set=eval_set,
            )
        )
    return Benchmark(sources=sources, targets=targets, spec=spec)
