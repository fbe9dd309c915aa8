"""Synthetic candidate patches, shift augmentation, scan-grouped folds, and disk I/O.

Nodule patches hold one soft ellipsoidal bright blob whose support is the
exact ground-truth mask.  Non-nodule patches hold vessel-like bright tubes
(or only background), so mean intensity alone does not separate the classes.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, FormatError

NODULE, NON_NODULE, UNLABELED = "nodule", "non-nodule", "unlabeled"
CLASSES = (NODULE, NON_NODULE, UNLABELED)
MANUAL, PSEUDO, SYNTHETIC = "manual", "pseudo", "synthetic-truth"
PROVENANCES = (MANUAL, PSEUDO, SYNTHETIC)
DIRECTIONS = ("+z", "-z", "+y", "-y", "+x", "-x")
SHIFT_SEP = "~"


@dataclass
class CandidateRecord:
    id: str
    scan_id: str
    patch: np.ndarray
    class_label: str
    mask: np.ndarray | None = None
    provenance: str = SYNTHETIC
    round: int | None = None

    def __post_init__(self) -> None:
        if self.class_label not in CLASSES:
            raise DataError(f"{self.id}: unknown class {self.class_label!r}")
        if self.provenance not in PROVENANCES:
            raise DataError(f"{self.id}: unknown provenance {self.provenance!r}")
        if self.mask is not None and self.mask.shape != self.patch.shape:
            raise DataError(f"{self.id}: mask shape {self.mask.shape} != patch shape {self.patch.shape}")

    @property
    def parent_id(self) -> str:
        return self.id.split(SHIFT_SEP, 1)[0]

    @property
    def label_index(self) -> int:
        if self.class_label == UNLABELED:
            raise DataError(f"{self.id}: record has no class label")
        return int(self.class_label == NODULE)

    def check(self) -> None:
        """Raise :class:`DataError` if the record violates a label invariant."""
        if self.mask is None:
            return
        if self.class_label == NON_NODULE and self.mask.any():
            raise DataError(f"{self.id}: non-nodule record has a non-empty mask")
        if self.class_label == NODULE and self.provenance == SYNTHETIC and not self.mask.any():
            raise DataError(f"{self.id}: synthetic nodule has an empty mask")


@dataclass
class Dataset:
    records: list[CandidateRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[CandidateRecord]:
        return iter(self.records)

    def by_id(self) -> dict[str, CandidateRecord]:
        return {r.id: r for r in self.records}

    def scan_ids(self) -> list[str]:
        return sorted({r.scan_id for r in self.records})

    def subset(self, ids: Iterable[str]) -> "Dataset":
        keep = set(ids)
        return Dataset([r for r in self.records if r.id in keep])


@dataclass
class GeneratorConfig:
    n_scans: int = 40
    nodules_per_scan: int = 10
    nonnodules_per_scan: int = 10
    patch_shape: tuple[int, int, int] = (8, 32, 32)
    radius_range: tuple[float, float] = (2.0, 6.0)
    center_jitter: tuple[float, float, float] = (0.5, 2.0, 2.0)
    background: float = 0.2
    noise_sigma: float = 0.06
    noise_smoothing: float = 1.0
    blob_base: float = 0.4
    blob_ramp: float = 0.3
    vessel_prob_nonnodule: float = 0.75
    vessel_prob_nodule: float = 0.2
    vessel_radius: tuple[float, float] = (0.8, 1.6)

    def validate(self) -> None:
        if min(self.n_scans, self.nodules_per_scan, self.nonnodules_per_scan) < 1:
            raise ConfigError("scan and candidate counts must be at least 1")
        if len(self.patch_shape) != 3:
            raise ConfigError("patch_shape must have three extents (z, y, x)")
        r_min, r_max = self.radius_range
        if not 0 < r_min <= r_max:
            raise ConfigError("radius_range must satisfy 0 < min <= max")
        need = int(np.ceil(2 * r_min + 2))
        if min(self.patch_shape) < need:
            raise ConfigError(
                f"patch_shape {tuple(self.patch_shape)} too small for radius {r_min}: every extent must be >= {need}"
            )


def _background(rng: np.random.Generator, shape, cfg: GeneratorConfig) -> np.ndarray:
    noise = gaussian_filter(rng.normal(size=shape), cfg.noise_smoothing, mode="wrap")
    noise *= cfg.noise_sigma / max(noise.std(), 1e-12)
    return cfg.background + noise


def _grid(shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")


def _nodule(rng: np.random.Generator, shape, cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    zz, yy, xx = _grid(shape)
    r_min, r_max = cfg.radius_range
    radii = [rng.uniform(r_min, min(r_max, s / 2.0 - 1.0)) for s in shape]
    centre = [(s - 1) / 2.0 + rng.uniform(-j, j) for s, j in zip(shape, cfg.center_jitter)]
    d2 = sum(((g - c) / r) ** 2 for g, c, r in zip((zz, yy, xx), centre, radii))
    mask = d2 <= 1.0
    intensity = np.where(mask, cfg.blob_base + cfg.blob_ramp * (1.0 - d2), 0.0)
    return intensity, mask


def _vessel(rng: np.random.Generator, shape, cfg: GeneratorConfig) -> np.ndarray:
    """Bright tube through a point near the centre, running mostly in-plane."""
    zz, yy, xx = _grid(shape)
    point = np.array([(s - 1) / 2.0 + rng.uniform(-s / 4.0, s / 4.0) for s in shape])
    theta = rng.uniform(0, np.pi)
    tilt = rng.uniform(-0.3, 0.3)
    direction = np.array([np.sin(tilt), np.cos(tilt) * np.sin(theta), np.cos(tilt) * np.cos(theta)])
    rel = np.stack([zz - point[0], yy - point[1], xx - point[2]])
    along = np.tensordot(direction, rel, axes=1)
    dist2 = (rel**2).sum(axis=0) - along**2
    radius = rng.uniform(*cfg.vessel_radius)
    d2 = dist2 / radius**2
    return np.where(d2 <= 1.0, cfg.blob_base + cfg.blob_ramp * (1.0 - d2), 0.0)


def _scan(seed: int, index: int, cfg: GeneratorConfig) -> list[CandidateRecord]:
    rng = np.random.default_rng([seed, index])
    shape = tuple(cfg.patch_shape)
    scan_id = f"scan{index:04d}"
    out = []
    labels = [NODULE] * cfg.nodules_per_scan + [NON_NODULE] * cfg.nonnodules_per_scan
    for j, label in enumerate(labels):
        vol = _background(rng, shape, cfg)
        if label == NODULE:
            blob, mask = _nodule(rng, shape, cfg)
            if rng.random() < cfg.vessel_prob_nodule:
                vol += _vessel(rng, shape, cfg) * ~mask
            vol += blob
        else:
            mask = np.zeros(shape, dtype=bool)
            if rng.random() < cfg.vessel_prob_nonnodule:
                vol += _vessel(rng, shape, cfg)
        patch = np.clip(vol, 0.0, 1.0).astype(np.float32)
        out.append(CandidateRecord(f"{scan_id}-c{j:03d}", scan_id, patch, label, mask.astype(np.uint8), SYNTHETIC))
    return out


def generate_synthetic(
    seed: int,
    n_scans: int = 40,
    nodules_per_scan: int = 10,
    nonnodules_per_scan: int = 10,
    patch_shape: tuple[int, int, int] = (8, 32, 32),
    cfg: GeneratorConfig | None = None,
) -> Dataset:
    """Deterministic synthetic candidate set; scan ``i`` draws from RNG stream (seed, i)."""
    cfg = replace(
        cfg or GeneratorConfig(),
        n_scans=n_scans,
        nodules_per_scan=nodules_per_scan,
        nonnodules_per_scan=nonnodules_per_scan,
        patch_shape=tuple(patch_shape),
    )
    cfg.validate()
    records: list[CandidateRecord] = []
    for i in range(cfg.n_scans):
        records.extend(_scan(seed, i, cfg))
    return Dataset(records)


# ---------------------------------------------------------------------------
# augmentation


def _shift(vol: np.ndarray, axis: int, offset: int) -> np.ndarray:
    out = np.zeros_like(vol)
    if offset == 0:
        out[...] = vol
        return out
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if offset > 0:
        src[axis], dst[axis] = slice(0, -offset), slice(offset, None)
    else:
        src[axis], dst[axis] = slice(-offset, None), slice(0, offset)
    out[tuple(dst)] = vol[tuple(src)]
    return out


def augment_shift(record: CandidateRecord, direction: str, magnitude: int = 1) -> CandidateRecord:
    """Translate patch and mask together; vacated voxels are zero."""
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    axis = "zyx".index(direction[1])
    if not 0 <= magnitude < record.patch.shape[axis]:
        raise ConfigError(f"shift magnitude {magnitude} out of range for extent {record.patch.shape[axis]}")
    offset = magnitude if direction[0] == "+" else -magnitude
    mask = None if record.mask is None else _shift(record.mask, axis, offset)
    return replace(
        record,
        id=f"{record.id}{SHIFT_SEP}{direction}{magnitude}",
        patch=_shift(record.patch, axis, offset),
        mask=mask,
    )


def balance_by_augmentation(dataset: Dataset, magnitude: int = 1) -> Dataset:
    """Add the six unit-shift variants of every nodule record."""
    out = []
    for r in dataset:
        out.append(r)
        if r.class_label == NODULE:
            out.extend(augment_shift(r, d, magnitude) for d in DIRECTIONS)
    return Dataset(out)


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    k: int
    assignment: dict[str, int]

    def fold_of(self, record_id: str) -> int:
        return self.assignment[record_id]

    def ids_in(self, fold: int) -> list[str]:
        return [i for i, f in self.assignment.items() if f == fold]

    def train_val(self, dataset: Dataset, val_fold: int) -> tuple[Dataset, Dataset]:
        train = [r for r in dataset if self.assignment[r.id] != val_fold]
        val = [r for r in dataset if self.assignment[r.id] == val_fold]
        return Dataset(train), Dataset(val)


def kfold_split(dataset: Dataset, k: int = 10, seed: int = 0) -> FoldSplit:
    """Shuffle scans with a seeded RNG and deal them round-robin into ``k`` folds."""
    scans = dataset.scan_ids()
    if k < 1:
        raise ConfigError("k must be at least 1")
    if len(scans) < k:
        raise ConfigError(f"cannot split {len(scans)} scans into {k} folds")
    order = np.random.default_rng(seed).permutation(len(scans))
    scan_fold = {scans[j]: pos % k for pos, j in enumerate(order)}
    return FoldSplit(k, {r.id: scan_fold[r.scan_id] for r in dataset})


def withhold_masks(dataset: Dataset, labeled_fraction: float, seed: int = 0) -> Dataset:
    """Keep masks on a seeded ``labeled_fraction`` of nodule scans' parents; drop the rest.

    Non-nodule masks (all zero by definition) stay.  Augmented variants
    follow their parent so a hidden mask never leaks through a shifted copy.
    Kept records are flagged manual.
    """
    if not 0.0 <= labeled_fraction <= 1.0:
        raise ConfigError("labeled_fraction must lie in [0, 1]")
    parents = sorted({r.parent_id for r in dataset if r.class_label == NODULE})
    rng = np.random.default_rng(seed)
    n_keep = int(round(labeled_fraction * len(parents)))
    keep = {parents[i] for i in rng.permutation(len(parents))[:n_keep]}
    out = []
    for r in dataset:
        hidden = r.class_label == NODULE and r.parent_id not in keep
        out.append(replace(r, mask=None if hidden else r.mask, provenance=MANUAL))
    return Dataset(out)


# ---------------------------------------------------------------------------
# on-disk format
# volume: "NDLV" | u16 version | u16 dtype code | u32 z, y, x | row-major little-endian voxels

VOLUME_MAGIC = b"NDLV"
VOLUME_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 1, np.dtype("uint8"): 2}
_HEADER = struct.Struct("<4sHH3I")
MANIFEST_FIELDS = ["id", "scan_id", "class", "provenance", "patch_path", "mask_path", "fold"]


def write_volume(path, vol: np.ndarray) -> None:
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise FormatError(f"volumes are 3-D, got shape {vol.shape}")
    code = _CODES.get(vol.dtype)
    if code is None:
        raise FormatError(f"volumes must be float32 or uint8, got {vol.dtype}")
    Path(path).write_bytes(_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, code, *vol.shape)
                           + np.ascontiguousarray(vol, dtype=_DTYPES[code]).tobytes())


def read_volume(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated volume header")
    magic, version, code, z, y, x = _HEADER.unpack_from(blob)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: not a volume file (bad magic)")
    if version != VOLUME_VERSION or code not in _DTYPES:
        raise FormatError(f"{path}: unsupported version {version} or dtype code {code}")
    dt = _DTYPES[code]
    n = z * y * x
    if len(blob) != _HEADER.size + n * dt.itemsize:
        raise FormatError(f"{path}: payload size does not match extents {(z, y, x)}")
    arr = np.frombuffer(blob, dtype=dt, offset=_HEADER.size).reshape(z, y, x)
    return arr.astype(dt.newbyteorder("="))


def write_dataset(dataset: Dataset, out_dir, split: FoldSplit | None = None) -> Path:
    """Write one volume file per patch/mask plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in dataset:
            patch_path = Path("patches") / f"{r.id}.ndlv"
            write_volume(out / patch_path, r.patch.astype(np.float32))
            mask_path = ""
            if r.mask is not None:
                mask_path = str(Path("masks") / f"{r.id}.ndlv")
                write_volume(out / mask_path, r.mask.astype(np.uint8))
            fold = "" if split is None else split.assignment[r.id]
            writer.writerow([r.id, r.scan_id, r.class_label, r.provenance, str(patch_path), mask_path, fold])
    return manifest


def read_dataset(manifest) -> tuple[Dataset, FoldSplit | None]:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no dataset manifest at {manifest}")
    root = manifest.parent
    records, folds = [], {}
    with manifest.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise FormatError(f"{manifest}: header must be {','.join(MANIFEST_FIELDS)}")
        for row in reader:
            mask = read_volume(root / row["mask_path"]) if row["mask_path"] else None
            records.append(CandidateRecord(row["id"], row["scan_id"], read_volume(root / row["patch_path"]),
                                           row["class"], mask, row["provenance"]))
            if row["fold"] != "":
                folds[row["id"]] = int(row["fold"])
    if not records:
        raise DataError(f"{manifest}: dataset is empty")
    split = None
    if folds:
        if len(folds) != len(records):
            raise FormatError(f"{manifest}: fold column is only partially filled")
        split = FoldSplit(max(folds.values()) + 1, folds)
    return Dataset(records), split


def verify_dataset(dataset: Dataset, split: FoldSplit | None = None) -> list[str]:
    """Return a list of invariant violations (empty when the dataset is sound)."""
    problems = []
    ids = [r.id for r in dataset]
    if len(set(ids)) != len(ids):
        problems.append("duplicate record ids")
    for r in dataset:
        try:
            r.check()
        except DataError as exc:
            problems.append(str(exc))
    if split is not None:
        if set(split.assignment) != set(ids):
            problems.append("fold assignment does not cover exactly the dataset ids")
        else:
            scan_fold: dict[str, int] = {}
            for r in dataset:
                f = split.assignment[r.id]
                if scan_fold.setdefault(r.scan_id, f) != f:
                    problems.append(f"scan {r.scan_id} straddles folds")
                parent = r.parent_id
                if parent in split.assignment and split.assignment[parent] != f:
                    problems.append(f"{r.id} is not in its parent's fold")
    return problems
