"""Datasets and the non-IID partition constructions.

Covers CIFAR-10 binary ingestion, desk-scale synthetic image and role-text
generators, grayscale conversion, and four partition schemes: color-skew
(2 collaborators, disjoint class halves, asymmetric grayscaling), per-class
Dirichlet imbalance, label-exclusive, and group-key sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, InputError
from .rng import Rng

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixel bytes

# Luminance coefficients; blue is the exact complement so a second conversion
# multiplies by exactly 1.0 and grayscaling is idempotent in float arithmetic.
_LUMA_R = 0.299
_LUMA_G = 0.587
_LUMA_B = 1.0 - _LUMA_R - _LUMA_G


@dataclass(frozen=True)
class Dataset:
    """Feature tensors with class labels and optional per-sample group keys."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    group_keys: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.labels.shape[0]:
            raise InputError("features and labels disagree on sample count")
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        if self.group_keys is not None and len(self.group_keys) != len(self):
            raise InputError("group_keys must align with samples")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])


@dataclass(frozen=True)
class Partition:
    """One collaborator's sample indices plus per-sample grayscale marks."""

    collaborator_id: int
    sample_indices: np.ndarray
    grayscale: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self) -> None:
        idx = np.asarray(self.sample_indices, dtype=np.int64)
        object.__setattr__(self, "sample_indices", idx)
        gray = np.asarray(self.grayscale, dtype=bool)
        if gray.size == 0:
            gray = np.zeros(idx.size, dtype=bool)
        object.__setattr__(self, "grayscale", gray)
        if len(np.unique(idx)) != idx.size:
            raise InputError(f"partition {self.collaborator_id} has duplicate indices")
        if gray.shape != idx.shape:
            raise InputError("grayscale marks must align with sample indices")

    def __len__(self) -> int:
        return int(self.sample_indices.size)


@dataclass(frozen=True)
class PartitionSet:
    """Disjoint partitions of one dataset under a named scheme."""

    dataset: Dataset
    scheme: str
    params: dict[str, str]
    partitions: tuple[Partition, ...]

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for p in self.partitions:
            if p.sample_indices.size and int(p.sample_indices.max()) >= len(self.dataset):
                raise InputError(f"partition {p.collaborator_id} indexes beyond the dataset")
            as_set = set(p.sample_indices.tolist())
            if seen & as_set:
                raise InputError("partitions overlap")
            seen |= as_set

    def sample_weights(self) -> np.ndarray:
        """p_k: partition sizes normalized to sum to 1."""
        sizes = np.array([len(p) for p in self.partitions], dtype=np.float64)
        return sizes / sizes.sum()


def materialize(dataset: Dataset, partition: Partition) -> tuple[np.ndarray, np.ndarray]:
    """Local training arrays for one collaborator, grayscale marks applied."""
    feats = dataset.features[partition.sample_indices].copy()
    if partition.grayscale.any():
        feats[partition.grayscale] = to_grayscale(feats[partition.grayscale])
    return feats, dataset.labels[partition.sample_indices].copy()


def to_grayscale(features: np.ndarray) -> np.ndarray:
    """Replicate the luminance of a 3-channel image into all three channels.

    Accepts a single (3, h, w) image or any batch (..., 3, h, w).
    """
    feats = np.asarray(features)
    if feats.ndim < 3 or feats.shape[-3] != 3:
        raise InputError(f"grayscale needs 3-channel images, got shape {feats.shape}")
    f64 = feats.astype(np.float64)
    luma = (
        _LUMA_R * f64[..., 0, :, :]
        + _LUMA_G * f64[..., 1, :, :]
        + _LUMA_B * f64[..., 2, :, :]
    )
    out = np.repeat(luma[..., None, :, :], 3, axis=-3)
    return out.astype(np.float32)


def load_cifar10_binary(paths: list[str | Path]) -> Dataset:
    """Read CIFAR-10 batch files (3073-byte records, channel-planar RGB)."""
    all_feats = []
    all_labels = []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
            raise FormatError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0].astype(np.int64)
        if labels.max() > 9:
            raise FormatError(f"{path}: label byte {labels.max()} out of range 0..9")
        feats = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        all_feats.append(feats)
        all_labels.append(labels)
    return Dataset(np.concatenate(all_feats), np.concatenate(all_labels), num_classes=10)


def gen_synthetic_images(
    n: int, num_classes: int, shape: tuple[int, int, int], seed: int, noise: float = 0.12
) -> Dataset:
    """Class-conditional Gaussian blobs around per-class template images.

    Each class owns a blocky luminance pattern plus a class-dependent color
    cast, so both texture and color carry label signal (the color part is what
    grayscale skewing destroys). Classes are balanced within +-1 sample.
    """
    channels, height, width = shape
    if n < num_classes:
        raise ConfigurationError("need at least one sample per class")
    if height % 4 or width % 4:
        raise ConfigurationError("synthetic image sides must be multiples of 4")
    gen = Rng(seed, 0).generator()

    templates = np.empty((num_classes, channels, height, width))
    for c in range(num_classes):
        pattern = gen.uniform(0.0, 1.0, (1, 4, 4))
        pattern = np.kron(pattern, np.ones((1, height // 4, width // 4)))
        cast = gen.uniform(-0.25, 0.25, (channels, 1, 1))
        templates[c] = np.clip(0.3 + 0.4 * pattern + cast, 0.0, 1.0)

    counts = np.full(num_classes, n // num_classes)
    counts[: n % num_classes] += 1
    feats = np.empty((n, channels, height, width), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    pos = 0
    for c in range(num_classes):
        k = int(counts[c])
        blob = templates[c] + noise * gen.standard_normal((k, channels, height, width))
        feats[pos : pos + k] = np.clip(blob, 0.0, 1.0).astype(np.float32)
        labels[pos : pos + k] = c
        pos += k
    order = gen.permutation(n)
    return Dataset(feats[order], labels[order], num_classes)


def partition_color_skew(dataset: Dataset, skew_fraction: float, rng: Rng) -> PartitionSet:
    """Two collaborators holding disjoint class halves; `skew_fraction` of the
    first collaborator's samples (and its complement of the second's) are
    marked for grayscale conversion."""
    if dataset.num_classes % 2:
        raise ConfigurationError("color-skew split needs an even number of classes")
    if not 0.5 <= skew_fraction <= 1.0:
        raise ConfigurationError(f"skew_fraction {skew_fraction} outside [0.5, 1.0]")
    half = dataset.num_classes // 2
    gen = rng.generator()
    partitions = []
    for cid, (lo, hi) in enumerate([(0, half), (half, dataset.num_classes)]):
        idx = np.flatnonzero((dataset.labels >= lo) & (dataset.labels < hi))
        frac = skew_fraction if cid == 0 else 1.0 - skew_fraction
        marked = int(round(frac * idx.size))
        gray = np.zeros(idx.size, dtype=bool)
        gray[gen.permutation(idx.size)[:marked]] = True
        partitions.append(Partition(cid, idx, gray))
    return PartitionSet(
        dataset, "color_skew", {"skew_fraction": repr(skew_fraction)}, tuple(partitions)
    )


def _apportion(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing to `total`, proportional by largest remainder."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def partition_class_imbalance(
    dataset: Dataset, num_collaborators: int, alpha: float, rng: Rng
) -> PartitionSet:
    """Dirichlet(alpha) share of every class per collaborator; the whole
    dataset is assigned and every collaborator ends up non-empty."""
    if num_collaborators < 2:
        raise ConfigurationError("need at least 2 collaborators")
    if alpha <= 0:
        raise ConfigurationError("alpha must be > 0")
    if len(dataset) < num_collaborators:
        raise ConfigurationError(
            f"{len(dataset)} samples cannot cover {num_collaborators} collaborators"
        )
    gen = rng.generator()
    assigned: list[list[int]] = [[] for _ in range(num_collaborators)]
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[gen.permutation(idx.size)]
        props = gen.dirichlet(np.full(num_collaborators, alpha))
        counts = _apportion(idx.size, props)
        start = 0
        for k in range(num_collaborators):
            assigned[k].extend(idx[start : start + counts[k]].tolist())
            start += int(counts[k])
    # Dirichlet draws can leave a collaborator empty; top it up from the largest.
    for k in range(num_collaborators):
        if not assigned[k]:
            donor = max(range(num_collaborators), key=lambda j: len(assigned[j]))
            assigned[k].append(assigned[donor].pop())
    partitions = tuple(
        Partition(k, np.sort(np.array(assigned[k], dtype=np.int64)))
        for k in range(num_collaborators)
    )
    return PartitionSet(
        dataset,
        "class_imbalance",
        {"num_collaborators": str(num_collaborators), "alpha": repr(alpha)},
        partitions,
    )


def partition_label_exclusive(dataset: Dataset, rng: Rng) -> PartitionSet:
    """One collaborator per class, holding all and only that class's samples."""
    partitions = tuple(
        Partition(c, np.flatnonzero(dataset.labels == c))
        for c in range(dataset.num_classes)
    )
    return PartitionSet(dataset, "label_exclusive", {}, partitions)


def partition_by_group(
    dataset: Dataset, min_points: int, sample_count: int, rng: Rng
) -> PartitionSet:
    """Sample `sample_count` group-keyed candidates holding >= min_points samples."""
    if dataset.group_keys is None:
        raise ConfigurationError("dataset carries no group keys")
    keys = np.array(dataset.group_keys)
    survivors = [
        key for key in sorted(set(dataset.group_keys))
        if int((keys == key).sum()) >= min_points
    ]
    if len(survivors) < sample_count:
        raise ConfigurationError(
            f"only {len(survivors)} groups hold >= {min_points} samples, "
            f"cannot sample {sample_count}"
        )
    gen = rng.generator()
    chosen = sorted(gen.choice(len(survivors), size=sample_count, replace=False).tolist())
    partitions = tuple(
        Partition(cid, np.flatnonzero(keys == survivors[g]))
        for cid, g in enumerate(chosen)
    )
    return PartitionSet(
        dataset,
        "by_group",
        {"min_points": str(min_points), "sample_count": str(sample_count)},
        partitions,
    )


def gen_role_text(
    num_roles: int, chars_per_role: int, vocab: str, rng: Rng, window: int = 8
) -> Dataset:
    """Synthetic next-character corpus: one Markov source per speaking role.

    Every sample is a one-hot window of `window` characters (flattened) with
    the following character as its label; group_key identifies the role.
    """
    v = len(vocab)
    if v < 8:
        raise ConfigurationError("vocabulary must hold at least 8 characters")
    if len(set(vocab)) != v:
        raise ConfigurationError("vocabulary characters must be unique")
    if chars_per_role <= window:
        raise ConfigurationError(f"chars_per_role must exceed the window of {window}")
    gen = rng.generator()
    eye = np.eye(v, dtype=np.float32)

    feats_parts = []
    labels_parts = []
    keys: list[str] = []
    for role in range(num_roles):
        # Role-specific char preferences sharpen the rows so unigram
        # distributions differ clearly across roles.
        preference = gen.uniform(0.0, 1.0, v) ** 3
        trans = gen.uniform(0.0, 1.0, (v, v)) * preference[None, :] + 1e-3
        trans /= trans.sum(axis=1, keepdims=True)
        cumulative = np.cumsum(trans, axis=1)
        chars = np.empty(chars_per_role, dtype=np.int64)
        chars[0] = gen.integers(v)
        draws = gen.uniform(0.0, 1.0, chars_per_role - 1)
        for t in range(1, chars_per_role):
            chars[t] = np.searchsorted(cumulative[chars[t - 1]], draws[t - 1])
        n_windows = chars_per_role - window
        windows = np.lib.stride_tricks.sliding_window_view(chars[:-1], window)
        feats_parts.append(eye[windows].reshape(n_windows, window * v))
        labels_parts.append(chars[window:])
        keys.extend([f"role{role:03d}"] * n_windows)
    return Dataset(
        np.concatenate(feats_parts),
        np.concatenate(labels_parts),
        num_classes=v,
        group_keys=tuple(keys),
    )


def write_partition_set(pset: PartitionSet, path: str | Path) -> None:
    """Replayable text export: scheme, parameters, per-collaborator indices and marks."""
    lines = ["FDNC-PARTITIONS 1", f"scheme {pset.scheme}"]
    for key in sorted(pset.params):
        lines.append(f"param {key} {pset.params[key]}")
    lines.append(f"collaborators {len(pset.partitions)}")
    for p in pset.partitions:
        lines.append(f"collaborator {p.collaborator_id}")
        lines.append("indices " + " ".join(map(str, p.sample_indices.tolist())))
        lines.append("grayscale " + "".join("1" if g else "0" for g in p.grayscale))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_partition_set(path: str | Path, dataset: Dataset) -> PartitionSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "FDNC-PARTITIONS 1":
        raise FormatError(f"{path}: missing FDNC-PARTITIONS header")
    scheme = ""
    params: dict[str, str] = {}
    partitions: list[Partition] = []
    current_id: int | None = None
    indices: np.ndarray | None = None
    gray: np.ndarray | None = None

    def flush() -> None:
        if current_id is None:
            return
        if indices is None:
            raise FormatError(f"{path}: collaborator {current_id} lacks an indices line")
        marks = gray if gray is not None else np.zeros(indices.size, dtype=bool)
        partitions.append(Partition(current_id, indices, marks))

    for line in lines[1:]:
        if not line.strip():
            continue
        head, _, rest = line.partition(" ")
        if head == "scheme":
            scheme = rest
        elif head == "param":
            key, _, value = rest.partition(" ")
            params[key] = value
        elif head == "collaborators":
            continue
        elif head == "collaborator":
            flush()
            current_id = int(rest)
            indices, gray = None, None
        elif head == "indices":
            indices = np.array([int(x) for x in rest.split()], dtype=np.int64)
        elif head == "grayscale":
            gray = np.array([ch == "1" for ch in rest], dtype=bool)
        else:
            raise FormatError(f"{path}: unknown line '{head}'")
    flush()
    return PartitionSet(dataset, scheme, params, tuple(partitions))
