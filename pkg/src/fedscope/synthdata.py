"""Synthetic hierarchical image data.

Groups play the role of crops and the diseases within a group are the
fine-grained classes. Images are square grayscale in [0, 1], stored flat.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import StorageError, ValidationError
from .seeding import derive_seed, rng_for

USE_CASES = {
    "UC1": "SunnyAngle",
    "UC2": "OvercastNoise",
    "UC3": "Defocus",
    "UC4": "JPEGandCast",
    "UC5": "OffCenter",
}

# Recipe constants; they are echoed into the dataset manifest.
RECIPES = {
    "UC1": {"contrast": 1.2, "brightness": 0.1, "max_shear": 0.25},
    "UC2": {"brightness": -0.15, "contrast": 0.8, "noise_sigma": 0.05},
    "UC3": {"box": 3},
    "UC4": {"levels": 16, "cast": 0.05},
    "UC5": {"max_shift_frac": 0.25},
}


@dataclass(frozen=True)
class DatasetSpec:
    diseases: tuple[int, ...] = (3, 3, 3, 3)
    samples_per_class: int = 300
    side: int = 16
    margin: float = 0.2
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "diseases", tuple(int(d) for d in self.diseases))
        if len(self.diseases) < 1:
            raise ValidationError("diseases: need at least one group (G >= 1)")
        if any(d < 1 for d in self.diseases):
            raise ValidationError("diseases: every group needs at least one disease")
        if sum(self.diseases) < 2:
            raise ValidationError("diseases: total class count must be >= 2")
        if self.margin <= 0:
            raise ValidationError("margin must be > 0")
        if self.noise < 0:
            raise ValidationError("noise must be >= 0")
        if self.samples_per_class < 1:
            raise ValidationError("samples_per_class must be >= 1")
        if self.side < 2:
            raise ValidationError("side must be >= 2")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")

    @property
    def n_groups(self) -> int:
        return len(self.diseases)

    @property
    def n_classes(self) -> int:
        return sum(self.diseases)

    @property
    def n_pixels(self) -> int:
        return self.side * self.side

    @classmethod
    def full_shape(cls, **overrides) -> "DatasetSpec":
        """14 groups and 38 classes, the real dataset's hierarchy."""
        diseases = (4, 2, 1, 4, 1, 2, 2, 2, 1, 1, 2, 1, 5, 10)
        return cls(diseases=diseases, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["diseases"] = list(self.diseases)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        """Accepts ``groups`` plus a scalar ``diseases`` as shorthand for a uniform hierarchy."""
        known = {"groups", "diseases", "samples_per_class", "side", "margin", "noise", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown dataset keys: {sorted(unknown)}")
        kw = dict(d)
        groups = kw.pop("groups", None)
        diseases = kw.get("diseases", 3 if groups is not None else None)
        if groups is not None:
            if int(groups) < 1:
                raise ValidationError(f"groups: need at least one group, got {groups}")
            if isinstance(diseases, int):
                diseases = [diseases] * int(groups)
            elif len(diseases) != int(groups):
                raise ValidationError(f"groups={groups} but diseases lists {len(diseases)} groups")
        if diseases is not None:
            kw["diseases"] = (diseases,) if isinstance(diseases, int) else tuple(diseases)
        return cls(**kw)


@dataclass
class Dataset:
    """Struct-of-arrays sample collection.

    ``ids`` are stable sample identifiers; every ordering-sensitive
    operation sorts on them first.
    """

    spec: DatasetSpec
    images: np.ndarray
    groups: np.ndarray
    diseases: np.ndarray
    ids: np.ndarray
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        self.offsets = np.concatenate([[0], np.cumsum(self.spec.diseases)[:-1]]).astype(np.int64)

    def __len__(self):
        return int(self.ids.size)

    @property
    def classes(self) -> np.ndarray:
        """Flat (group, disease) label."""
        return self.offsets[self.groups] + self.diseases

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.spec, self.images[idx], self.groups[idx], self.diseases[idx], self.ids[idx])

    def with_images(self, images: np.ndarray) -> "Dataset":
        return Dataset(self.spec, images, self.groups, self.diseases, self.ids)

    def sample(self, i: int) -> dict:
        return {"image": self.images[i], "group": int(self.groups[i]), "disease": int(self.diseases[i]),
                "class": int(self.classes[i]), "id": int(self.ids[i])}


def _smooth_pattern(rng: np.random.Generator, side: int, n_waves: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / side
    out = np.zeros((side, side))
    for _ in range(n_waves):
        fx, fy = rng.integers(0, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
    out -= out.mean()
    return (out / (out.std() + 1e-12)).ravel()


# Disease cue strengths, relative to the margin.
PATTERN_GAIN = 0.25
LEVEL_STEP = 0.3


def prototypes(spec: DatasetSpec) -> np.ndarray:
    """One ``(n_pixels,)`` prototype per flat class, clipped to [0, 1].

    A prototype is a smooth group-level pattern plus two disease cues: a
    pixel-scale pattern indexed ``(d + 1) // 2`` and an intensity level
    indexed ``d // 2``. Neighbouring diseases therefore differ in exactly one
    cue (0 and 1 in pattern only, 1 and 2 in level only), so losing either
    fine detail or absolute intensity costs accuracy.
    """
    protos = []
    for g, n_d in enumerate(spec.diseases):
        base = _smooth_pattern(rng_for(spec.seed, "group-pattern", g), spec.side)
        n_levels = (n_d - 1) // 2 + 1
        for d in range(n_d):
            fine = rng_for(spec.seed, "disease-pattern", g, (d + 1) // 2).standard_normal(spec.n_pixels)
            level = d // 2 - (n_levels - 1) / 2
            p = 0.5 + spec.margin * (0.15 * base + PATTERN_GAIN * fine + LEVEL_STEP * level)
            protos.append(np.clip(p, 0.0, 1.0))
    return np.array(protos)


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministic dataset; each sample's noise is seeded from its own id.

    Pixels are rounded through float32 so a dataset written to disk and read
    back is bit-identical to the in-memory one.
    """
    protos = prototypes(spec)
    n = spec.n_classes * spec.samples_per_class
    images = np.empty((n, spec.n_pixels))
    groups = np.empty(n, dtype=np.int64)
    diseases = np.empty(n, dtype=np.int64)
    row = 0
    cls = 0
    for g, n_d in enumerate(spec.diseases):
        for d in range(n_d):
            for k in range(spec.samples_per_class):
                img = protos[cls]
                if spec.noise > 0:
                    img = img + spec.noise * rng_for(spec.seed, "sample-noise", g, d, k).standard_normal(spec.n_pixels)
                images[row] = np.clip(img, 0.0, 1.0)
                groups[row] = g
                diseases[row] = d
                row += 1
            cls += 1
    images = images.astype(np.float32).astype(np.float64)
    return Dataset(spec, images, groups, diseases, np.arange(n, dtype=np.int64))


def _largest_remainder(n: int, fractions: Sequence[Fraction]) -> list[int]:
    quotas = [f * n for f in fractions]
    counts = [int(q) for q in quotas]
    left = n - sum(counts)
    # Ties on the remainder go to the earlier slot (train, then val, then test).
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def split(dataset: Dataset, fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Stratified train/validation/test split -> three Datasets.

    Per class the samples are sorted by id, shuffled with a class-keyed
    generator and cut by largest-remainder rounding.
    """
    fr = [Fraction(str(f)) for f in fractions]
    if len(fr) != 3 or sum(fr) != 1 or any(f < 0 for f in fr):
        raise ValidationError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    classes = dataset.classes
    parts = [[], [], []]
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        if idx.size < 3:
            raise ValidationError(f"class {int(c)} has {idx.size} samples; split needs at least 3")
        idx = idx[np.argsort(dataset.ids[idx], kind="stable")]
        idx = idx[rng_for(seed, "split", int(c)).permutation(idx.size)]
        n_tr, n_va, _ = _largest_remainder(idx.size, fr)
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    out = []
    for p in parts:
        sel = np.concatenate(p) if p else np.array([], dtype=np.int64)
        sel = sel[np.argsort(dataset.ids[sel], kind="stable")]
        out.append(dataset.subset(sel))
    return tuple(out)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    indices: np.ndarray

    def __len__(self):
        return int(self.indices.size)


def partition(train: Dataset, n_clients: int, seed: int = 0) -> list[ClientShard]:
    """Stratified round-robin i.i.d. partition into disjoint client shards.

    Within each class the j-th shuffled sample goes to client ``j % n``, so
    per-class counts differ by at most one and remainders land on the
    lowest client ids. Indices refer to positions in ``train``.
    """
    if n_clients < 1:
        raise ValidationError(f"n_clients must be >= 1, got {n_clients}")
    classes = train.classes
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    smallest = None
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        smallest = idx.size if smallest is None else min(smallest, idx.size)
        idx = idx[np.argsort(train.ids[idx], kind="stable")]
        idx = idx[rng_for(seed, "partition", int(c)).permutation(idx.size)]
        for k in range(n_clients):
            buckets[k].append(idx[k::n_clients])
    if smallest is not None and n_clients > smallest:
        warnings.warn(f"{n_clients} clients exceed the smallest class size ({smallest}); some shards miss classes",
                      stacklevel=2)
    shards = []
    for k, parts in enumerate(buckets):
        sel = np.concatenate(parts) if parts else np.array([], dtype=np.int64)
        shards.append(ClientShard(k, np.sort(sel)))
    return shards


def _as_square(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    side = int(round(np.sqrt(image.size)))
    if side * side != image.size:
        raise ValidationError(f"image of {image.size} pixels is not square")
    return image.reshape(side, side)


def contrast(image, gain: float, pivot: float = 0.5):
    return gain * (np.asarray(image) - pivot) + pivot


def shear_rows(square: np.ndarray, factor: float) -> np.ndarray:
    """Shift row r by round(factor * (r - centre)) pixels, replicating edges."""
    side = square.shape[0]
    cols = np.arange(side)
    out = np.empty_like(square)
    centre = (side - 1) / 2
    for r in range(side):
        shift = int(np.round(factor * (r - centre)))
        out[r] = square[r, np.clip(cols - shift, 0, side - 1)]
    return out


def translate(square: np.ndarray, dx: int, dy: int) -> np.ndarray:
    side_y, side_x = square.shape
    rows = np.clip(np.arange(side_y) - dy, 0, side_y - 1)
    cols = np.clip(np.arange(side_x) - dx, 0, side_x - 1)
    return square[np.ix_(rows, cols)]


def box_blur(square: np.ndarray, size: int = 3) -> np.ndarray:
    r = size // 2
    padded = np.pad(square, r, mode="edge")
    out = np.zeros_like(square)
    h, w = square.shape
    for dy in range(size):
        for dx in range(size):
            out += padded[dy:dy + h, dx:dx + w]
    return out / (size * size)


def quantize(image, levels: int = 16):
    return np.round(np.asarray(image) * (levels - 1)) / (levels - 1)


def corrupt(image: np.ndarray, use_case: str, seed: int = 0) -> np.ndarray:
    """Apply one of the UC1..UC5 degradations to a flat image."""
    uc = str(use_case).upper()
    if uc not in RECIPES:
        raise ValidationError(f"unknown use case {use_case!r}; expected one of {sorted(RECIPES)}")
    flat = np.asarray(image, dtype=np.float64).ravel()
    sq = _as_square(flat)
    side = sq.shape[0]
    rec = RECIPES[uc]
    rng = rng_for(seed, "corrupt", uc)
    if uc == "UC1":
        out = contrast(sq, rec["contrast"]) + rec["brightness"]
        out = shear_rows(out, rng.uniform(-rec["max_shear"], rec["max_shear"]))
    elif uc == "UC2":
        out = contrast(sq + rec["brightness"], rec["contrast"])
        if rec["noise_sigma"] > 0:
            out = out + rec["noise_sigma"] * rng.standard_normal(sq.shape)
    elif uc == "UC3":
        out = box_blur(sq, rec["box"])
    elif uc == "UC4":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out = quantize(sq, rec["levels"]) + sign * rec["cast"]
    else:
        m = int(rec["max_shift_frac"] * side)
        dx, dy = rng.integers(-m, m + 1, size=2)
        out = translate(sq, int(dx), int(dy))
    return np.clip(out, 0.0, 1.0).ravel()


def corrupt_dataset(dataset: Dataset, use_case: str, seed: int = 0) -> Dataset:
    """Corrupt every image with a per-sample seed derived from its id."""
    imgs = np.array([corrupt(img, use_case, derive_seed(seed, "uc-sample", int(i)))
                     for img, i in zip(dataset.images, dataset.ids)])
    return dataset.with_images(imgs.reshape(dataset.images.shape))


# On-disk format, little-endian:
#   b"FSDS" | u32 version | u32 G | u32 D_g * G | u32 side | u64 N
#   | f32 pixels N x side^2 (row-major) | i32 (group, disease, class) N x 3
MAGIC = b"FSDS"
VERSION = 1


def save(dataset: Dataset, path) -> dict:
    """Write the binary file plus a ``.json`` manifest; returns the manifest."""
    path = Path(path)
    spec = dataset.spec
    header = MAGIC + struct.pack("<II", VERSION, spec.n_groups)
    header += struct.pack(f"<{spec.n_groups}I", *spec.diseases)
    header += struct.pack("<IQ", spec.side, len(dataset))
    labels = np.stack([dataset.groups, dataset.diseases, dataset.classes], axis=1).astype("<i4")
    payload = header + dataset.images.astype("<f4").tobytes() + labels.tobytes()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
        manifest = {
            "format": "FSDS",
            "version": VERSION,
            "spec": spec.to_dict(),
            "seed": spec.seed,
            "n_samples": len(dataset),
            "use_cases": {k: {"name": USE_CASES[k], **RECIPES[k]} for k in RECIPES},
            "sha256": hashlib.sha256(payload).hexdigest(),
        }
        manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write dataset to {path}: {exc}") from exc
    return manifest


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def load(path) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read dataset {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise ValidationError(f"{path} is not an FSDS file")
    version, n_groups = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValidationError(f"unsupported FSDS version {version}")
    pos = 12
    diseases = struct.unpack_from(f"<{n_groups}I", raw, pos)
    pos += 4 * n_groups
    side, n = struct.unpack_from("<IQ", raw, pos)
    pos += 12
    n_pix = side * side
    images = np.frombuffer(raw, dtype="<f4", count=n * n_pix, offset=pos).reshape(n, n_pix).astype(np.float64)
    pos += 4 * n * n_pix
    labels = np.frombuffer(raw, dtype="<i4", count=n * 3, offset=pos).reshape(n, 3).astype(np.int64)
    spec_kw = {}
    mpath = manifest_path(path)
    if mpath.exists():
        spec_kw = json.loads(mpath.read_text())["spec"]
    spec_kw.update(diseases=tuple(diseases), side=side)
    spec = DatasetSpec.from_dict(spec_kw)
    return Dataset(spec, images, labels[:, 0], labels[:, 1], np.arange(n, dtype=np.int64))
