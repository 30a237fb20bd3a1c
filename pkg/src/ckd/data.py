"""Datasets: Gaussian-cluster synthetic data, the CIFAR-100 binary layout, batching.

CIFAR-100 binary records are 3074 bytes: coarse label, fine label, then the
1024-byte R, G and B planes (32x32, row-major). ``cifar_to_dataset`` scales
pixels to [0, 1] and standardises each channel with the constants below.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import Xoshiro256, mix_seed

RECORD_BYTES = 3074
PIXEL_BYTES = 3072
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)
SYNTH_MAGIC = b"CKDS"


class DataFormatError(ValueError):
    pass


class TruncatedRecordError(DataFormatError):
    def __init__(self, offset: int, length: int):
        super().__init__(f"truncated record at byte offset {offset} ({length} trailing bytes)")
        self.offset = offset


class CorruptRecordError(DataFormatError):
    def __init__(self, offset: int, msg: str):
        super().__init__(f"corrupt record at byte offset {offset}: {msg}")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        f.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)
        if f.ndim != 2 or y.ndim != 1 or f.shape[0] != y.shape[0]:
            raise ValueError(f"features {f.shape} and labels {y.shape} disagree")
        if f.shape[0] < 1:
            raise ValueError("empty dataset")
        if np.any(y < 0) or np.any(y >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    class_count: int = 8
    per_class: int = 500
    dim: int = 16
    center_scale: float = 3.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2 or self.per_class < 2 or self.dim < 2:
            raise ValueError("need class_count, per_class and dim all >= 2")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Gaussian clusters: ``per_class`` train and ceil(per_class/5) test points per class."""
    rng = Xoshiro256(spec.seed)
    c, d = spec.class_count, spec.dim
    centers = rng.uniform(-spec.center_scale, spec.center_scale, c * d).reshape(c, d)
    m_test = math.ceil(spec.per_class / 5)

    def draw(m: int) -> Dataset:
        noise = rng.normal(c * m * d).reshape(c, m, d) * spec.noise_sigma
        x = (centers[:, None, :] + noise).reshape(c * m, d)
        y = np.repeat(np.arange(c), m)
        return Dataset(x, y, c)

    train = draw(spec.per_class)
    test = draw(m_test)
    return train, test


def batch_iter(data: Dataset, B: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Full batches of a fresh per-epoch permutation; the ragged tail is dropped."""
    n = len(data)
    if not 1 <= B <= n:
        raise ValueError(f"batch size {B} outside [1, {n}]")
    perm = Xoshiro256(mix_seed(seed, epoch)).permutation(n)
    for k in range(n // B):
        yield perm[k * B : (k + 1) * B]


def write_synthetic(data: Dataset, path) -> None:
    n, d = data.features.shape
    with open(path, "wb") as fh:
        fh.write(SYNTH_MAGIC + struct.pack("<III", n, d, data.class_count))
        fh.write(data.features.astype("<f8").tobytes())
        fh.write(data.labels.astype("<u2").tobytes())


def read_synthetic(path) -> Dataset:
    blob = Path(path).read_bytes()
    if blob[:4] != SYNTH_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 16:
        raise DataFormatError(f"{path}: truncated header")
    n, d, c = struct.unpack_from("<III", blob, 4)
    want = 16 + 8 * n * d + 2 * n
    if len(blob) != want:
        raise DataFormatError(f"{path}: expected {want} bytes, found {len(blob)}")
    feats = np.frombuffer(blob, dtype="<f8", count=n * d, offset=16).reshape(n, d)
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=16 + 8 * n * d)
    return Dataset(feats.astype(np.float64), labels.astype(np.int64), c)


@dataclass(frozen=True)
class CifarRecord:
    coarse_label: int
    fine_label: int
    pixels: bytes

    def __post_init__(self):
        if len(self.pixels) != PIXEL_BYTES:
            raise ValueError(f"need {PIXEL_BYTES} pixel bytes, got {len(self.pixels)}")
        if not (0 <= self.fine_label < 100 and 0 <= self.coarse_label < 20):
            raise ValueError(f"labels out of range: coarse={self.coarse_label} fine={self.fine_label}")


def parse_cifar100(blob: bytes) -> list[CifarRecord]:
    blob = bytes(blob)
    full, tail = divmod(len(blob), RECORD_BYTES)
    if tail:
        offset = full * RECORD_BYTES
        raise TruncatedRecordError(offset, tail)
    records = []
    for k in range(full):
        off = k * RECORD_BYTES
        coarse, fine = blob[off], blob[off + 1]
        if fine >= 100:
            raise CorruptRecordError(off, f"fine label {fine} >= 100")
        if coarse >= 20:
            raise CorruptRecordError(off, f"coarse label {coarse} >= 20")
        records.append(CifarRecord(coarse, fine, blob[off + 2 : off + RECORD_BYTES]))
    return records


def serialize_cifar100(records) -> bytes:
    return b"".join(bytes((r.coarse_label, r.fine_label)) + r.pixels for r in records)


def cifar_to_dataset(records) -> Dataset:
    if not records:
        raise ValueError("no records")
    raw = np.frombuffer(b"".join(r.pixels for r in records), dtype=np.uint8)
    x = raw.reshape(len(records), 3, 1024).astype(np.float64) / 255.0
    x = (x - np.array(CIFAR100_MEAN)[None, :, None]) / np.array(CIFAR100_STD)[None, :, None]
    labels = np.array([r.fine_label for r in records])
    return Dataset(x.reshape(len(records), PIXEL_BYTES), labels, 100)


def load_cifar100(root) -> tuple[Dataset, Dataset]:
    """Read ``train.bin`` and ``test.bin`` from a CIFAR-100 binary directory."""
    root = Path(root)
    train = parse_cifar100((root / "train.bin").read_bytes())
    test = parse_cifar100((root / "test.bin").read_bytes())
    return cifar_to_dataset(train), cifar_to_dataset(test)
