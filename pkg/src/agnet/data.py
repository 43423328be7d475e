"""Datasets: manifest ingestion, synthetic image generation, pair sampling
and identity-disjoint splits.

The manifest format is a UTF-8 CSV with the exact header
``image_path,vehicle_id,camera_id,color_id,type_id``.  Labels are
integers; ``-1`` in color_id/type_id marks a record without attribute
annotations (kept for identity and verification training, excluded from
attribute losses).

Synthetic images encode each label visually: color_id picks the dominant
hue from an evenly spaced palette, type_id picks one of six silhouettes
(repeating beyond six), vehicle_id stamps a unique 4x4 glyph in the top
left corner, and camera_id adds a flat integer brightness offset (cycling
every five cameras to stay inside the 8-bit range).  With zero noise, two
images of the same identity differ only by that offset.
"""

from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ManifestError, SamplingError, SplitError

MANIFEST_COLUMNS = ("image_path", "vehicle_id", "camera_id", "color_id",
                    "type_id")
UNLABELED = -1

GLYPH_ON = 230.0
GLYPH_OFF = 25.0
SILHOUETTE_SCALE = 0.55
CAMERA_BRIGHTNESS_STEP = 5.0
CAMERA_CYCLE = 5


@dataclass(frozen=True)
class VehicleRecord:
    """One labeled image."""

    image_path: str
    vehicle_id: int
    camera_id: int
    color_id: int
    type_id: int

    def __post_init__(self):
        if not self.image_path:
            raise ManifestError("image_path must be non-empty")
        if self.vehicle_id < 0 or self.camera_id < 0:
            raise ManifestError("vehicle_id and camera_id must be >= 0")
        if self.color_id < UNLABELED or self.type_id < UNLABELED:
            raise ManifestError("color_id/type_id must be >= -1")

    @property
    def attributes(self):
        return (self.color_id, self.type_id)


@dataclass(frozen=True)
class Dataset:
    """Immutable record list plus label-space sizes (1 + max observed)."""

    records: tuple[VehicleRecord, ...]
    num_identities: int
    num_colors: int
    num_types: int
    num_cameras: int

    @classmethod
    def from_records(cls, records):
        records = tuple(records)
        if not records:
            raise ManifestError("dataset has no records")

        def space(values):
            labeled = [v for v in values if v >= 0]
            return max(labeled) + 1 if labeled else 1

        return cls(
            records=records,
            num_identities=space(r.vehicle_id for r in records),
            num_colors=space(r.color_id for r in records),
            num_types=space(r.type_id for r in records),
            num_cameras=space(r.camera_id for r in records),
        )

    def __len__(self):
        return len(self.records)

    def indices_by_identity(self):
        groups = {}
        for i, r in enumerate(self.records):
            groups.setdefault(r.vehicle_id, []).append(i)
        return groups


@dataclass(frozen=True)
class PairSample:
    """Two records plus their row indices in the parent dataset."""

    a: VehicleRecord
    b: VehicleRecord
    same_id: bool
    a_index: int
    b_index: int

    def __post_init__(self):
        if self.same_id != (self.a.vehicle_id == self.b.vehicle_id):
            raise SamplingError("same_id flag contradicts the vehicle ids")
        if self.a_index == self.b_index:
            raise SamplingError("a pair must not contain the same image twice")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic dataset generator."""

    num_identities: int = 8
    images_per_identity: int = 4
    num_colors: int = 3
    num_types: int = 2
    num_cameras: int = 3
    image_side: int = 32
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_identities", "images_per_identity", "num_colors",
                     "num_types", "num_cameras", "image_side"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.image_side < 16:
            raise ConfigError("image_side must be >= 16 to fit the id glyph")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


def load_manifest(path):
    """Read a manifest CSV into a Dataset, preserving row order."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot open manifest {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        header = [h.strip() for h in header]
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing column(s) "
                                + ", ".join(missing))
        if tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"{path}: header must be exactly "
                f"{','.join(MANIFEST_COLUMNS)}, got {','.join(header)}")
        records = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}:{line_no}: expected "
                                    f"{len(MANIFEST_COLUMNS)} fields, got "
                                    f"{len(row)}")
            values = {}
            for col, raw in zip(MANIFEST_COLUMNS[1:], row[1:]):
                try:
                    values[col] = int(raw)
                except ValueError:
                    raise ManifestError(
                        f"{path}:{line_no}: non-integer {col} value "
                        f"{raw!r}") from None
            try:
                records.append(VehicleRecord(image_path=row[0], **values))
            except ManifestError as exc:
                raise ManifestError(f"{path}:{line_no}: {exc}") from None
        if not records:
            raise ManifestError(f"{path}: manifest contains no data rows")
    return Dataset.from_records(records)


def write_manifest(dataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in dataset.records:
            writer.writerow([r.image_path, r.vehicle_id, r.camera_id,
                             r.color_id, r.type_id])


def color_palette(num_colors):
    """Evenly spaced hues at fixed saturation/value, as (n, 3) in 0..255."""
    colors = []
    for k in range(num_colors):
        rgb = colorsys.hsv_to_rgb(k / num_colors, 0.75, 0.7)
        colors.append([channel * 255.0 for channel in rgb])
    return np.array(colors)


def _silhouette(type_id, side):
    """Boolean mask of the vehicle silhouette for one of six base shapes."""
    centers = (np.arange(side) + 0.5) / side
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    r2 = (xx - 0.5) ** 2 + (yy - 0.5) ** 2
    shape = type_id % 6
    if shape == 0:
        return (np.abs(xx - 0.5) < 0.25) & (np.abs(yy - 0.5) < 0.25)
    if shape == 1:
        return r2 < 0.28 ** 2
    if shape == 2:
        return (yy - 0.5) > np.abs(xx - 0.5)
    if shape == 3:
        return np.abs(yy - 0.5) < 0.15
    if shape == 4:
        return np.abs(xx - 0.5) < 0.15
    return (r2 > 0.15 ** 2) & (r2 < 0.3 ** 2)


def _glyph_cells(vehicle_id):
    bits = (vehicle_id * 40503) & 0xFFFF
    cells = np.zeros((4, 4), dtype=bool)
    for k in range(16):
        cells[k // 4, k % 4] = (bits >> k) & 1
    return cells


def render_image(vehicle_id, color_id, type_id, camera_id, image_side,
                 palette):
    """Noise-free float image (3, side, side) for one record."""
    body = palette[color_id]
    img = np.empty((3, image_side, image_side))
    img[:] = body[:, None, None]
    sil = _silhouette(type_id, image_side)
    img[:, sil] *= SILHOUETTE_SCALE
    region = image_side // 4
    cell = region // 4
    cells = _glyph_cells(vehicle_id)
    for r in range(4):
        for c in range(4):
            value = GLYPH_ON if cells[r, c] else GLYPH_OFF
            img[:, r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = value
    img += CAMERA_BRIGHTNESS_STEP * (camera_id % CAMERA_CYCLE)
    return img


def generate_synthetic(spec):
    """Render a complete labeled dataset; deterministic under spec.seed.

    Identity i gets color ``i % num_colors`` and type ``i % num_types``;
    its j-th image lands on camera ``(i + j) % num_cameras``.  Returns
    (Dataset, images) with images as uint8 of shape (N, 3, side, side),
    row-aligned with the records.
    """
    palette = color_palette(spec.num_colors)
    rng = np.random.default_rng(spec.seed)
    records = []
    images = []
    for i in range(spec.num_identities):
        color = i % spec.num_colors
        vtype = i % spec.num_types
        for j in range(spec.images_per_identity):
            camera = (i + j) % spec.num_cameras
            img = render_image(i, color, vtype, camera, spec.image_side,
                               palette)
            if spec.noise_std > 0:
                img = img + rng.normal(0.0, spec.noise_std, img.shape)
            images.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
            records.append(VehicleRecord(
                image_path=f"images/{i:04d}_{j:02d}.png",
                vehicle_id=i, camera_id=camera, color_id=color,
                type_id=vtype))
    return Dataset.from_records(records), np.stack(images)


def write_synthetic_dataset(dataset, images, out_dir):
    """Save images as PNG plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    for record, img in zip(dataset.records, images):
        path = out_dir / record.image_path
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img.transpose(1, 2, 0), "RGB").save(path)
    manifest_path = out_dir / "manifest.csv"
    write_manifest(dataset, manifest_path)
    return manifest_path


def load_images(dataset, root):
    """Load all record images relative to ``root`` as (N, 3, H, W) uint8."""
    root = Path(root)
    arrays = []
    for record in dataset.records:
        path = root / record.image_path
        try:
            with Image.open(path) as img:
                arrays.append(np.asarray(img.convert("RGB")).transpose(2, 0, 1))
        except OSError as exc:
            raise ManifestError(f"cannot read image {path}: {exc}") from exc
    return np.stack(arrays)


def sample_pairs(dataset, batch_size, positive_fraction, seed):
    """Draw a verification batch: positives first, then negatives.

    round(batch_size * positive_fraction) positive pairs (same identity,
    distinct images), the rest negatives (different identities).
    Deterministic under the seed.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if not 0.0 <= positive_fraction <= 1.0:
        raise ConfigError("positive_fraction must be in [0, 1]")
    n_pos = int(round(batch_size * positive_fraction))
    n_neg = batch_size - n_pos
    groups = dataset.indices_by_identity()
    ids = sorted(groups)
    multi = [v for v in ids if len(groups[v]) >= 2]
    if n_pos > 0 and not multi:
        raise SamplingError("positive pairs requested but no identity has "
                            "two images")
    if n_neg > 0 and len(ids) < 2:
        raise SamplingError("negative pairs requested but dataset has fewer "
                            "than two identities")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pos):
        vid = multi[rng.integers(len(multi))]
        i, j = rng.choice(groups[vid], size=2, replace=False)
        pairs.append(PairSample(dataset.records[i], dataset.records[j],
                                True, int(i), int(j)))
    for _ in range(n_neg):
        va, vb = rng.choice(len(ids), size=2, replace=False)
        i = groups[ids[va]][rng.integers(len(groups[ids[va]]))]
        j = groups[ids[vb]][rng.integers(len(groups[ids[vb]]))]
        pairs.append(PairSample(dataset.records[i], dataset.records[j],
                                False, int(i), int(j)))
    return pairs


def split_train_test(dataset, train_identity_fraction, seed,
                     return_indices=False):
    """Identity-disjoint split; train side gets round(fraction * ids)."""
    if not 0.0 < train_identity_fraction < 1.0:
        raise SplitError("train_identity_fraction must be in (0, 1)")
    groups = dataset.indices_by_identity()
    ids = sorted(groups)
    n_train = int(round(train_identity_fraction * len(ids)))
    if n_train == 0 or n_train == len(ids):
        raise SplitError(f"fraction {train_identity_fraction} leaves one "
                         f"side of a {len(ids)}-identity split empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    train_ids = {ids[k] for k in order[:n_train]}
    train_idx = [i for i, r in enumerate(dataset.records)
                 if r.vehicle_id in train_ids]
    test_idx = [i for i, r in enumerate(dataset.records)
                if r.vehicle_id not in train_ids]
    train = Dataset.from_records(dataset.records[i] for i in train_idx)
    test = Dataset.from_records(dataset.records[i] for i in test_idx)
    if return_indices:
        return train, test, np.array(train_idx), np.array(test_idx)
    return train, test
