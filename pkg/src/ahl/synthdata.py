"""Deterministic synthetic landmark benchmark.

Each image carries one composite figure — an ellipse outline plus a filled
triangle — randomly placed, scaled, and rotated on a noisy background. The
canonical landmark list spans easy high-contrast targets (triangle apex,
ellipse top extremum) and hard low-contrast ones (ellipse centre, figure
centroid, which has no visual marker at all):

    0 ellipse top extremum    4 ellipse bottom extremum
    1 ellipse centre          5 triangle base left
    2 triangle apex           6 triangle base right
    3 figure centroid         7 ellipse right extremum

Images are stored as 16-bit binary PGM (P5, maxval 65535, most significant
byte first) with pixel = value/65535; landmarks as CSV with full decimal
precision. Generated pixels are quantized to the 16-bit grid so that a
save/load round trip is bitwise exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError
from .heatmap import LandmarkSet

Array = np.ndarray

BORDER_MARGIN = 2.0
NOISE_SD = 0.05
ELLIPSE_AXES = (1.0, 0.62)            # canonical semi-axes, units of figure scale
TRIANGLE = ((-0.55, 0.0), (0.45, -0.38), (0.45, 0.38))   # apex, base left, base right
MAX_LANDMARKS = 8

_SAMPLE_STREAM = 11
_AUG_ORDER = ("flip", "translate", "scale", "rotate", "photometric")


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    """One grayscale image with ground-truth landmarks."""

    image: Array                 # (1,H,W) float64 in [0,1]
    landmarks: LandmarkSet
    id: str

    def __post_init__(self) -> None:
        img = self.image
        if img.ndim != 3 or img.shape[0] != 1:
            raise DimensionError(f"Sample {self.id}: image must be (1,H,W), got {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ConfigurationError(f"Sample {self.id}: pixel values outside [0,1]")
        self.landmarks.validate_bounds(img.shape[1], img.shape[2], margin=BORDER_MARGIN)

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[Sample, ...]
    validation: tuple[Sample, ...]
    test: tuple[Sample, ...]
    seed: int | None = None

    def __post_init__(self) -> None:
        ids = [s.id for part in (self.train, self.validation, self.test) for s in part]
        if len(ids) != len(set(ids)):
            raise ConfigurationError("DatasetSplit: sample ids overlap across splits")

    @property
    def all_samples(self) -> tuple[Sample, ...]:
        return self.train + self.validation + self.test


# ---------------------------------------------------------------------------
# Figure geometry
# ---------------------------------------------------------------------------

def _rotation(angle: float) -> Array:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _ellipse_extremum(center: Array, rot: Array, a: float, b: float,
                      axis: int, want_max: bool) -> Array:
    # Extremum of center + R @ (a cos t, b sin t) along one coordinate.
    t = math.atan2(b * rot[axis, 1], a * rot[axis, 0])
    cand = []
    for tt in (t, t + math.pi):
        p = center + rot @ np.array([a * math.cos(tt), b * math.sin(tt)])
        cand.append(p)
    key = 0 if cand[0][axis] >= cand[1][axis] else 1
    return cand[key] if want_max else cand[1 - key]


def _figure_landmarks(center: Array, rot: Array, scale: float) -> Array:
    a, b = ELLIPSE_AXES[0] * scale, ELLIPSE_AXES[1] * scale
    tri = [center + rot @ (np.array(v) * scale) for v in TRIANGLE]
    centroid = (center + tri[0] + tri[1] + tri[2]) / 4.0
    marks = [
        _ellipse_extremum(center, rot, a, b, axis=0, want_max=False),
        center.copy(),
        tri[0],
        centroid,
        _ellipse_extremum(center, rot, a, b, axis=0, want_max=True),
        tri[1],
        tri[2],
        _ellipse_extremum(center, rot, a, b, axis=1, want_max=True),
    ]
    return np.stack(marks)


def _draw_figure(height: int, width: int, center: Array, rot: Array, scale: float) -> Array:
    img = np.zeros((height, width))
    a, b = ELLIPSE_AXES[0] * scale, ELLIPSE_AXES[1] * scale
    t = np.linspace(0.0, 2.0 * math.pi, 1600, endpoint=False)
    ring = center[:, None] + rot @ np.stack([a * np.cos(t), b * np.sin(t)])
    rr = np.clip(np.rint(ring[0]), 0, height - 1).astype(np.intp)
    cc = np.clip(np.rint(ring[1]), 0, width - 1).astype(np.intp)
    img[rr, cc] = 0.85
    tri = np.stack([center + rot @ (np.array(v) * scale) for v in TRIANGLE])
    r0, r1 = int(np.floor(tri[:, 0].min())), int(np.ceil(tri[:, 0].max()))
    c0, c1 = int(np.floor(tri[:, 1].min())), int(np.ceil(tri[:, 1].max()))
    rows, cols = np.mgrid[max(r0, 0):min(r1 + 1, height), max(c0, 0):min(c1 + 1, width)]
    pts = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    inside = np.ones(len(pts), dtype=bool)
    for i in range(3):
        p, q = tri[i], tri[(i + 1) % 3]
        edge = q - p
        rel = pts - p
        cross = edge[0] * rel[:, 1] - edge[1] * rel[:, 0]
        inside &= cross >= 0.0
    patch = img[max(r0, 0):min(r1 + 1, height), max(c0, 0):min(c1 + 1, width)]
    mask = inside.reshape(patch.shape)
    patch[mask] = np.maximum(patch[mask], 0.5)
    return img


def _gen_sample(index: int, height: int, width: int, n_landmarks: int,
                seed: int) -> Sample:
    rng = np.random.default_rng(np.random.SeedSequence((seed, _SAMPLE_STREAM, index)))
    base = min(height, width)
    for _ in range(100):
        scale = rng.uniform(0.16, 0.25) * base
        angle = rng.uniform(0.0, 2.0 * math.pi)
        reach = ELLIPSE_AXES[0] * scale * 1.05
        lo_r, hi_r = BORDER_MARGIN + reach, height - 1 - BORDER_MARGIN - reach
        lo_c, hi_c = BORDER_MARGIN + reach, width - 1 - BORDER_MARGIN - reach
        if lo_r >= hi_r or lo_c >= hi_c:
            continue
        center = np.array([rng.uniform(lo_r, hi_r), rng.uniform(lo_c, hi_c)])
        rot = _rotation(angle)
        marks = _figure_landmarks(center, rot, scale)[:n_landmarks]
        if (marks < BORDER_MARGIN).any() or (marks[:, 0] > height - 1 - BORDER_MARGIN).any() \
                or (marks[:, 1] > width - 1 - BORDER_MARGIN).any():
            continue
        img = _draw_figure(height, width, center, rot, scale)
        img += rng.normal(0.0, NOISE_SD, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        img = np.round(img * 65535.0) / 65535.0
        return Sample(image=img[None], landmarks=LandmarkSet(marks), id=f"img{index:05d}")
    raise ConfigurationError(
        f"gen_dataset: could not place figure within margins after 100 attempts "
        f"({height}x{width}, sample {index})"
    )


def gen_dataset(n: int, height: int, width: int, n_landmarks: int = 4,
                seed: int = 0) -> DatasetSplit:
    """Generate ``n`` samples and split them 60/20/20 in index order."""
    if n < 10:
        raise ConfigurationError(f"gen_dataset: need n >= 10, got {n}")
    if not 1 <= n_landmarks <= MAX_LANDMARKS:
        raise ConfigurationError(
            f"gen_dataset: landmark count must be in [1, {MAX_LANDMARKS}], got {n_landmarks}"
        )
    samples = [_gen_sample(i, height, width, n_landmarks, seed) for i in range(n)]
    n_train = int(n * 0.6)
    n_val = int(n * 0.2)
    return DatasetSplit(
        train=tuple(samples[:n_train]),
        validation=tuple(samples[n_train:n_train + n_val]),
        test=tuple(samples[n_train + n_val:]),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    translate: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    angle: float = 0.0                # radians
    brightness: float = 0.0
    contrast: float = 1.0

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls()


def draw_augment_params(rng: np.random.Generator, height: int, width: int) -> AugmentParams:
    return AugmentParams(
        flip=bool(rng.random() < 0.5),
        translate=(rng.uniform(-0.1 * height, 0.1 * height),
                   rng.uniform(-0.1 * width, 0.1 * width)),
        scale=rng.uniform(0.9, 1.1),
        angle=math.radians(rng.uniform(-15.0, 15.0)),
        brightness=rng.uniform(-0.1, 0.1),
        contrast=rng.uniform(0.9, 1.1),
    )


def _transform_coords(coords: Array, params: AugmentParams, h: int, w: int) -> Array:
    # Each stage is skipped at its neutral parameters so that flip-only or
    # translation-only transforms move coordinates exactly.
    out = coords.copy()
    if params.flip:
        out[:, 1] = (w - 1) - out[:, 1]
    if params.angle != 0.0 or params.scale != 1.0:
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        rot = _rotation(params.angle) * params.scale
        out = (out - centre) @ rot.T + centre
    if params.translate != (0.0, 0.0):
        out = out + np.asarray(params.translate, dtype=np.float64)
    return out


def apply_augment(sample: Sample, params: AugmentParams) -> Sample:
    """Apply one geometric+photometric transform; may violate margins.

    Geometry: horizontal flip first, then rotation and uniform scaling
    about the image centre, then translation. The image is resampled with
    nearest neighbours (out-of-frame pixels become 0); landmark coordinates
    go through the same forward map.
    """
    h, w = sample.height, sample.width
    coords = _transform_coords(sample.landmarks.coords, params, h, w)

    # Inverse map: undo translation, rotate/scale back, undo the flip.
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    src = np.stack([rows.ravel(), cols.ravel()], axis=1)
    if params.translate != (0.0, 0.0):
        src = src - np.asarray(params.translate, dtype=np.float64)
    if params.angle != 0.0 or params.scale != 1.0:
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        inv_rot = _rotation(-params.angle) / params.scale
        src = (src - centre) @ inv_rot.T + centre
    if params.flip:
        src[:, 1] = (w - 1) - src[:, 1]
    sr = np.rint(src[:, 0]).astype(np.intp)
    sc = np.rint(src[:, 1]).astype(np.intp)
    valid = (sr >= 0) & (sr < h) & (sc >= 0) & (sc < w)
    flat = np.zeros(h * w)
    flat[valid] = sample.image[0, sr[valid], sc[valid]]
    img = flat.reshape(h, w) * params.contrast + params.brightness
    img = np.clip(img, 0.0, 1.0)
    return Sample(image=img[None], landmarks=LandmarkSet(coords, sample.landmarks.names),
                  id=sample.id)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Randomly augment; redraw on margin violations, give up after 10."""
    h, w = sample.height, sample.width
    for _ in range(10):
        params = draw_augment_params(rng, h, w)
        cand = _transform_coords(sample.landmarks.coords, params, h, w)
        if (cand >= BORDER_MARGIN).all() \
                and (cand[:, 0] <= h - 1 - BORDER_MARGIN).all() \
                and (cand[:, 1] <= w - 1 - BORDER_MARGIN).all():
            return apply_augment(sample, params)
    return sample


# ---------------------------------------------------------------------------
# Persistence: meta.json + images/<id>.pgm + landmarks.csv
# ---------------------------------------------------------------------------

def _write_pgm(path: Path, image: Array) -> None:
    values = np.round(image[0] * 65535.0).astype(">u2")
    header = f"P5\n{image.shape[2]} {image.shape[1]}\n65535\n".encode("ascii")
    path.write_bytes(header + values.tobytes())


def _read_pgm(path: Path) -> Array:
    raw = path.read_bytes()
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(raw):
            if raw[pos:pos + 1].isspace():
                pos += 1
            elif raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header at byte {start}")
        return raw[start:pos]

    magic = token()
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r} at byte 0)")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header near byte {pos}") from exc
    if maxval != 65535:
        raise FormatError(f"{path}: expected maxval 65535, found {maxval}")
    pos += 1  # single whitespace after maxval
    need = height * width * 2
    if len(raw) - pos < need:
        raise FormatError(
            f"{path}: truncated pixel data at byte {len(raw)} (need {pos + need} bytes)"
        )
    values = np.frombuffer(raw, dtype=">u2", count=height * width, offset=pos)
    return (values.astype(np.float64) / 65535.0).reshape(1, height, width)


def save_dataset(path: str | Path, split: DatasetSplit) -> None:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    sample0 = (split.train or split.validation or split.test)[0]
    meta = {
        "n": len(split.all_samples),
        "height": sample0.height,
        "width": sample0.width,
        "n_landmarks": len(sample0.landmarks),
        "seed": split.seed,
        "splits": {
            "train": [s.id for s in split.train],
            "validation": [s.id for s in split.validation],
            "test": [s.id for s in split.test],
        },
    }
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    lines = ["id,landmark_index,row,col"]
    for sample in split.all_samples:
        _write_pgm(path / "images" / f"{sample.id}.pgm", sample.image)
        for j, (r, c) in enumerate(sample.landmarks.coords):
            lines.append(f"{sample.id},{j},{float(r)!r},{float(c)!r}")
    (path / "landmarks.csv").write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> DatasetSplit:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FormatError(f"{meta_path}: missing dataset metadata")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON at char {exc.pos}") from exc
    marks: dict[str, dict[int, tuple[float, float]]] = {}
    lm_path = path / "landmarks.csv"
    with open(lm_path) as fh:
        header = fh.readline().strip()
        if header != "id,landmark_index,row,col":
            raise FormatError(f"{lm_path}: bad header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            if len(parts) != 4:
                raise FormatError(f"{lm_path}: bad row at line {lineno}: {line!r}")
            try:
                marks.setdefault(parts[0], {})[int(parts[1])] = (float(parts[2]), float(parts[3]))
            except ValueError as exc:
                raise FormatError(f"{lm_path}: bad value at line {lineno}: {line!r}") from exc

    def load_split(ids: list[str]) -> tuple[Sample, ...]:
        out = []
        for sid in ids:
            image = _read_pgm(path / "images" / f"{sid}.pgm")
            if sid not in marks:
                raise FormatError(f"{lm_path}: no landmarks recorded for id {sid!r}")
            by_index = marks[sid]
            coords = np.array([by_index[j] for j in sorted(by_index)])
            out.append(Sample(image=image, landmarks=LandmarkSet(coords), id=sid))
        return tuple(out)

    splits = meta.get("splits", {})
    return DatasetSplit(
        train=load_split(splits.get("train", [])),
        validation=load_split(splits.get("validation", [])),
        test=load_split(splits.get("test", [])),
        seed=meta.get("seed"),
    )
