"""Dataset records, condition-vector coding, directory loading and synthetic domains.

Pixels are float32 arrays of shape (3, H, W) scaled to [-1, 1]. Camera indices
are 0-based internally; filenames on disk carry 1-based cameras
(``0002_c3_000451.jpg`` is camera index 2).
"""

from __future__ import annotations

import enum
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, ValidationError

logger = logging.getLogger(__name__)

SOURCE, TARGET = 0, 1
DEFAULT_SIZE = (256, 128)
FILENAME_RE = re.compile(r"^(?P<pid>\d+)_c(?P<cam>\d+).*\.(jpg|png)$")
IMAGE_SUFFIXES = (".jpg", ".png")
MANIFEST = "manifest.txt"

# Market-1501 / DukeMTMC folder names, tried before the bare split name.
SPLIT_DIRS = {
    "train": ("bounding_box_train", "train"),
    "query": ("query",),
    "gallery": ("bounding_box_test", "gallery"),
}


@dataclass(frozen=True)
class DomainConfig:
    cameras_per_domain: tuple[int, int]
    identity_count_source: int
    sample_counts: tuple[int, int] = (1, 1)
    domain_count: int = 2

    def __post_init__(self):
        if self.domain_count != 2:
            raise ConfigError("only one source and one target domain are supported")
        if len(self.cameras_per_domain) != 2 or len(self.sample_counts) != 2:
            raise ConfigError("cameras_per_domain and sample_counts need one entry per domain")
        counts = (*self.cameras_per_domain, self.identity_count_source, *self.sample_counts)
        if any(int(c) < 1 for c in counts):
            raise ConfigError(f"all DomainConfig counts must be >= 1, got {counts}")

    @property
    def source_cameras(self) -> int:
        return self.cameras_per_domain[SOURCE]

    @property
    def target_cameras(self) -> int:
        return self.cameras_per_domain[TARGET]

    @property
    def camera_total(self) -> int:
        return self.source_cameras + self.target_cameras

    @property
    def condition_dim(self) -> int:
        return self.camera_total + self.domain_count


@dataclass(frozen=True, eq=False)
class ImageRecord:
    pixels: np.ndarray
    person_id: Optional[int]
    camera_index: int
    domain_index: int
    raw_id: Optional[int] = None
    name: str = ""


class Provenance(str, enum.Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"
    TRANSLATED = "translated"


@dataclass(frozen=True, eq=False)
class Dataset:
    records: tuple[ImageRecord, ...]
    config: DomainConfig
    provenance: Provenance = Provenance.REAL

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        domains = {r.domain_index for r in self.records}
        if len(domains) > 1:
            raise ValidationError(f"dataset mixes domains {sorted(domains)}")
        if self.provenance is Provenance.TRANSLATED and domains - {TARGET}:
            raise ValidationError("translated records must carry the target domain index")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def domain_index(self) -> Optional[int]:
        return self.records[0].domain_index if self.records else None

    @property
    def image_shape(self) -> tuple[int, int, int]:
        if not self.records:
            raise DataError("empty dataset has no image shape")
        return self.records[0].pixels.shape

    @property
    def labeled(self) -> bool:
        return bool(self.records) and all(r.person_id is not None for r in self.records)

    def pixel_array(self) -> np.ndarray:
        return np.stack([r.pixels for r in self.records]).astype(np.float32, copy=False)

    def person_ids(self) -> np.ndarray:
        return np.array([-1 if r.person_id is None else r.person_id for r in self.records], dtype=np.int64)

    def camera_indices(self) -> np.ndarray:
        return np.array([r.camera_index for r in self.records], dtype=np.int64)

    def identity_count(self) -> int:
        return len({r.person_id for r in self.records if r.person_id is not None})


# ---------------------------------------------------------------------------
# condition vectors: [source cameras | target cameras | mask], mask slot 0 = source
# ---------------------------------------------------------------------------

def _check_camera(camera_index: int, domain_index: int, config: DomainConfig) -> None:
    if domain_index not in (SOURCE, TARGET):
        raise ValidationError(f"domain index must be 0 or 1, got {domain_index}")
    n = config.cameras_per_domain[domain_index]
    if not 0 <= camera_index < n:
        raise ValidationError(f"camera index {camera_index} out of range for domain {domain_index} ({n} cameras)")


def combined_camera_index(camera_index: int, domain_index: int, config: DomainConfig) -> int:
    """Position of a camera in the joint C_s + C_t label space."""
    _check_camera(camera_index, domain_index, config)
    return camera_index if domain_index == SOURCE else config.source_cameras + camera_index


def split_camera_index(combined: int, config: DomainConfig) -> tuple[int, int]:
    if not 0 <= combined < config.camera_total:
        raise ValidationError(f"combined camera index {combined} outside [0, {config.camera_total})")
    if combined < config.source_cameras:
        return combined, SOURCE
    return combined - config.source_cameras, TARGET


def encode_condition(camera_index: int, domain_index: int, config: DomainConfig) -> np.ndarray:
    vec = np.zeros(config.condition_dim, dtype=np.float32)
    vec[combined_camera_index(camera_index, domain_index, config)] = 1.0
    vec[config.camera_total + domain_index] = 1.0
    return vec


def decode_condition(vec: Sequence[float], config: DomainConfig) -> tuple[int, int]:
    v = np.asarray(vec, dtype=np.float64)
    if v.shape != (config.condition_dim,):
        raise ValidationError(f"condition vector must have length {config.condition_dim}, got {v.shape}")
    ones = v == 1.0
    if not np.all(ones | (v == 0.0)) or ones.sum() != 2:
        raise ValidationError("condition vector must contain exactly two ones and zeros elsewhere")
    mask = v[config.camera_total:]
    if mask.sum() != 1:
        raise ValidationError("mask block must be one-hot")
    domain = int(np.argmax(mask))
    cams = v[: config.camera_total]
    combined = int(np.argmax(cams))
    camera, block = split_camera_index(combined, config)
    if block != domain:
        raise ValidationError(f"active camera block ({block}) disagrees with mask domain ({domain})")
    return camera, domain


def condition_batch(combined: Iterable[int], config: DomainConfig) -> np.ndarray:
    """Stack condition vectors for joint-space camera indices."""
    rows = [encode_condition(*split_camera_index(int(c), config), config) for c in combined]
    return np.stack(rows) if rows else np.zeros((0, config.condition_dim), np.float32)


def sample_random_target_camera(config: DomainConfig, rng: np.random.Generator) -> int:
    return int(rng.integers(config.target_cameras))


# ---------------------------------------------------------------------------
# image io
# ---------------------------------------------------------------------------

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    u = np.rint((np.clip(pixels, -1.0, 1.0) + 1.0) * 127.5)
    return u.astype(np.uint8).transpose(1, 2, 0)


def from_uint8(image: np.ndarray) -> np.ndarray:
    return (image.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).transpose(2, 0, 1).copy()


def read_image(path: Path, size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if (im.height, im.width) != tuple(size):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return from_uint8(np.asarray(im))


def parse_filename(name: str) -> tuple[int, int]:
    """Return (raw person id, 0-based camera) or raise DataError."""
    m = FILENAME_RE.match(name)
    if m is None or int(m.group("cam")) < 1:
        raise DataError(f"filename does not match '<pid>_c<cam>...': {name}")
    return int(m.group("pid")), int(m.group("cam")) - 1


def _resolve_split_dir(path: Path, split: str) -> Path:
    if split not in SPLIT_DIRS:
        raise ConfigError(f"split must be one of {sorted(SPLIT_DIRS)}, got {split!r}")
    for name in SPLIT_DIRS[split]:
        if (path / name).is_dir():
            return path / name
    return path


def load_reid_directory(
    path,
    split: str,
    config: DomainConfig,
    domain_index: int = SOURCE,
    labeled: bool = True,
    size: tuple[int, int] = DEFAULT_SIZE,
    strict: bool = False,
) -> Dataset:
    """Load a Market-style image folder.

    ``train`` identities are remapped to dense 0-based labels in sorted raw-id
    order. ``query``/``gallery`` keep the raw id as label so that the two
    splits stay comparable. ``labeled=False`` drops labels (unlabeled target
    training data); the raw id is still kept on the record.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    folder = _resolve_split_dir(root, split)
    parsed = []
    for f in sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            pid, cam = parse_filename(f.name)
        except DataError:
            if strict:
                raise
            logger.warning("skipping unparseable file %s", f.name)
            continue
        if cam >= config.cameras_per_domain[domain_index]:
            msg = f"{f.name}: camera {cam + 1} exceeds the {config.cameras_per_domain[domain_index]} configured cameras"
            if strict:
                raise DataError(msg)
            logger.warning("skipping %s", msg)
            continue
        parsed.append((f, pid, cam))
    if not parsed:
        raise DataError(f"no parseable images in {folder}")

    dense = {pid: i for i, pid in enumerate(sorted({pid for _, pid, _ in parsed}))}
    records = []
    for f, pid, cam in parsed:
        if not labeled:
            label = None
        elif split == "train":
            label = dense[pid]
        else:
            label = pid
        records.append(ImageRecord(read_image(f, size), label, cam, domain_index, raw_id=pid, name=f.name))
    return Dataset(tuple(records), config, Provenance.REAL)


def write_dataset_dir(dataset: Dataset, path) -> Path:
    """Write PNGs named by the filename grammar plus a manifest.

    Manifest lines: ``<file> <person_id> <camera_index> <domain_index>``,
    person_id = -1 when absent. The first line records the provenance.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# provenance: {dataset.provenance.value}"]
    for i, r in enumerate(dataset.records):
        pid_in_name = r.raw_id if r.raw_id is not None else (r.person_id if r.person_id is not None else 0)
        name = f"{pid_in_name:04d}_c{r.camera_index + 1}_{i:06d}.png"
        Image.fromarray(to_uint8(r.pixels)).save(out / name, optimize=False)
        pid = -1 if r.person_id is None else r.person_id
        lines.append(f"{name} {pid} {r.camera_index} {r.domain_index}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def read_dataset_dir(path, config: DomainConfig, size: Optional[tuple[int, int]] = None) -> Dataset:
    """Inverse of :func:`write_dataset_dir`; labels come from the manifest."""
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DataError(f"missing {MANIFEST} in {root}")
    provenance = Provenance.REAL
    records = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            if "provenance:" in line:
                provenance = Provenance(line.split(":", 1)[1].strip())
            continue
        if not line.strip():
            continue
        name, pid, cam, dom = line.split()
        raw, _ = parse_filename(name)
        image_path = root / name
        if not image_path.is_file():
            raise DataError(f"manifest lists missing file {image_path}")
        if size is None:
            with Image.open(image_path) as im:
                size = (im.height, im.width)
        pid = int(pid)
        records.append(ImageRecord(read_image(image_path, size), None if pid < 0 else pid,
                                   int(cam), int(dom), raw_id=raw, name=name))
    if not records:
        raise DataError(f"manifest in {root} lists no images")
    return Dataset(tuple(records), config, provenance)


# ---------------------------------------------------------------------------
# synthetic domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraStyle:
    hue_shift: float = 0.0          # degrees, rotation about the grey axis
    brightness_gain: float = 1.0
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    noise: float = 0.02


@dataclass(frozen=True)
class SyntheticSpec:
    identity_count: int
    samples_per_identity: int
    cameras: tuple[CameraStyle, ...]
    height: int = 32
    width: int = 16
    identity_offset: int = 0
    domain_index: int = SOURCE
    labeled: bool = True

    @property
    def camera_count(self) -> int:
        return len(self.cameras)


def hue_rotation(degrees: float) -> np.ndarray:
    """RGB rotation about the (1, 1, 1) axis."""
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    m, r = (1 - c) / 3, s / math.sqrt(3)
    return np.array([[c + m, m - r, m + r],
                     [m + r, c + m, m - r],
                     [m - r, m + r, c + m]])


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    import colorsys

    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


@dataclass(frozen=True)
class _Appearance:
    top: np.ndarray
    bottom: np.ndarray
    skin: np.ndarray
    stripe: Optional[np.ndarray]
    bag: Optional[np.ndarray]
    bag_side: int
    build: float


def identity_appearance(identity: int) -> _Appearance:
    """Deterministic clothing layout for a global identity index."""
    rng = np.random.default_rng([identity, 0x1D])
    top = _hsv(rng.random(), rng.uniform(0.55, 1.0), rng.uniform(0.45, 1.0))
    bottom = _hsv(rng.random(), rng.uniform(0.3, 1.0), rng.uniform(0.25, 0.9))
    skin = _hsv(rng.uniform(0.02, 0.1), rng.uniform(0.3, 0.6), rng.uniform(0.5, 0.95))
    stripe = _hsv(rng.random(), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)) if rng.random() < 0.5 else None
    bag = _hsv(rng.random(), rng.uniform(0.4, 1.0), rng.uniform(0.2, 0.9)) if rng.random() < 0.5 else None
    return _Appearance(top, bottom, skin, stripe, bag, int(rng.integers(2)) * 2 - 1, rng.uniform(0.85, 1.15))


def render_person(identity: int, height: int, width: int, rng: np.random.Generator,
                  background=(0.5, 0.5, 0.5)) -> np.ndarray:
    """Unstyled (H, W, 3) rendering in [0, 1] with small pose jitter."""
    app = identity_appearance(identity)
    yy, xx = np.mgrid[0:height, 0:width]
    y = (yy + 0.5) / height + rng.uniform(-0.03, 0.03)
    x = (xx + 0.5) / width
    cx = 0.5 + rng.uniform(-0.08, 0.08)
    half = 0.26 * app.build * rng.uniform(0.92, 1.08)
    side = app.bag_side * (1 if rng.random() < 0.8 else -1)

    img = np.empty((height, width, 3))
    img[:] = background
    legs = (y > 0.55) & (y <= 0.94) & (np.abs(x - cx) <= 0.8 * half)
    img[legs] = app.bottom
    torso = (y > 0.2) & (y <= 0.55) & (np.abs(x - cx) <= half)
    img[torso] = app.top
    if app.stripe is not None:
        img[torso & (y > 0.33) & (y <= 0.43)] = app.stripe
    head = ((x - cx) / 0.16) ** 2 + ((y - 0.11) / 0.09) ** 2 <= 1.0
    img[head] = app.skin
    if app.bag is not None:
        off = side * (x - cx)
        img[(off > half) & (off <= half + 0.2) & (y > 0.3) & (y <= 0.58)] = app.bag
    return img


def apply_camera_style(img: np.ndarray, style: CameraStyle, rng: np.random.Generator) -> np.ndarray:
    out = img @ hue_rotation(style.hue_shift).T
    out = out * style.brightness_gain
    if style.noise > 0:
        out = out + rng.normal(0.0, style.noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_synthetic_domain(spec: SyntheticSpec, seed: int, config: Optional[DomainConfig] = None) -> Dataset:
    """Render ``identity_count * samples_per_identity`` records.

    Samples of one identity cycle through cameras from a random start, so
    every identity is seen by at least two cameras when it has two or more
    samples.
    """
    if spec.camera_count < 2:
        raise ConfigError("synthetic domains need at least 2 cameras")
    if spec.identity_count < 1 or spec.samples_per_identity < 2:
        raise ConfigError("need >= 1 identity and >= 2 samples per identity")
    rng = np.random.default_rng([seed, spec.domain_index, spec.identity_offset])
    records = []
    for local in range(spec.identity_count):
        identity = spec.identity_offset + local
        start = int(rng.integers(spec.camera_count))
        for s in range(spec.samples_per_identity):
            cam = (start + s) % spec.camera_count
            style = spec.cameras[cam]
            base = render_person(identity, spec.height, spec.width, rng, style.background)
            styled = apply_camera_style(base, style, rng)
            pixels = (styled.transpose(2, 0, 1) * 2.0 - 1.0).astype(np.float32)
            records.append(ImageRecord(pixels, local if spec.labeled else None, cam,
                                       spec.domain_index, raw_id=identity))
    if config is None:
        config = DomainConfig(
            cameras_per_domain=(spec.camera_count, spec.camera_count),
            identity_count_source=max(spec.identity_count, 2),
            sample_counts=(len(records), len(records)),
        )
    elif config.cameras_per_domain[spec.domain_index] != spec.camera_count:
        raise ConfigError("synthetic camera count disagrees with the domain config")
    return Dataset(tuple(records), config, Provenance.SYNTHETIC)


def with_config(dataset: Dataset, config: DomainConfig) -> Dataset:
    return Dataset(dataset.records, config, dataset.provenance)


def split_query_gallery(dataset: Dataset) -> tuple[Dataset, Dataset]:
    """First image of every (identity, camera) pair is a query; the rest is gallery."""
    seen, query, gallery = set(), [], []
    for r in dataset.records:
        key = (r.person_id, r.camera_index)
        (gallery if key in seen else query).append(r)
        seen.add(key)
    return (Dataset(tuple(query), dataset.config, dataset.provenance),
            Dataset(tuple(gallery), dataset.config, dataset.provenance))
