"""Labeled image datasets, class presets, and the 2-D toy mixture."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audit import AccessLog
from .errors import InvalidArgument

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
SVHN_CLASSES = tuple(str(d) for d in range(10))


@dataclass(frozen=True)
class ClassPreset:
    name: str
    class_names: tuple[str, ...]
    public: frozenset[int]

    @property
    def private(self) -> frozenset[int]:
        return frozenset(range(len(self.class_names))) - self.public


PRESETS = {
    "cifar10": ClassPreset(
        "cifar10", CIFAR10_CLASSES,
        frozenset(CIFAR10_CLASSES.index(c) for c in ("automobile", "bird", "cat", "deer", "dog")),
    ),
    "svhn": ClassPreset("svhn", SVHN_CLASSES, frozenset({1, 5, 7, 8, 9})),
    "toy": ClassPreset("toy", tuple(f"c{k}" for k in range(6)), frozenset({0, 2, 4})),
}


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images of shape (n, h, w, c) in [0, 1] with integer labels in [0, K)."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int
    class_names: tuple[str, ...] | None = None
    # positions in the source dataset this one was cut from
    indices: np.ndarray | None = None

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or min(images.shape[1:], default=0) <= 0:
            raise InvalidArgument(f"images must have shape (n, h, w, c), got {images.shape}")
        if len(images) != len(labels):
            raise InvalidArgument("images and labels differ in length")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidArgument(f"labels must lie in [0, {self.num_classes})")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise InvalidArgument("image values must lie in [0, 1]")
        indices = np.arange(len(labels)) if self.indices is None else np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "images", images.astype(np.float32, copy=False))
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "indices", indices)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, positions, name: str | None = None) -> "LabeledDataset":
        positions = np.asarray(positions, dtype=np.int64)
        return LabeledDataset(
            self.images[positions], self.labels[positions], name or self.name,
            self.num_classes, self.class_names, self.indices[positions],
        )

    def class_ids(self, names_or_ids) -> frozenset[int]:
        """Resolve class names (or integer strings) to ids."""
        out = set()
        for item in names_or_ids:
            if isinstance(item, (int, np.integer)):
                out.add(int(item))
            elif self.class_names and item in self.class_names:
                out.add(self.class_names.index(item))
            elif str(item).lstrip("-").isdigit():
                out.add(int(item))
            else:
                raise InvalidArgument(f"unknown class {item!r}")
        return frozenset(out)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


class AuditedDataset:
    """Read-recording proxy around a dataset (LabeledDataset or LatentDataset)."""

    _TRACKED = {"images", "labels", "vectors", "subset", "take"}

    def __init__(self, inner, log: AccessLog | None = None):
        object.__setattr__(self, "_inner", inner)
        object.__setattr__(self, "log", log if log is not None else AccessLog())

    def __getattr__(self, name):
        if name in self._TRACKED:
            self.log.record()
        return getattr(self._inner, name)

    def __len__(self):
        return len(self._inner)


def to_signed(images: np.ndarray) -> np.ndarray:
    """[0, 1] pixels to the generators' [-1, 1] range."""
    return images * 2.0 - 1.0


def to_unit(images: np.ndarray) -> np.ndarray:
    return np.clip((images + 1.0) / 2.0, 0.0, 1.0)


def toy_layout(n_classes: int = 6):
    """Class centers and spreads for the toy mixture, in [0, 1]^2.

    Even classes (the public preset) are broad blobs near the middle; odd
    classes are tight blobs further out, inside the region the broad ones
    cover, so a generator fit to the public classes can reach them.
    """
    k = np.arange(n_classes)
    angles = np.radians(90.0 + 360.0 * (k // 2) / max(1, (n_classes + 1) // 2) - 60.0 * (k % 2 == 0))
    radius = np.where(k % 2 == 0, 0.15, 0.25)
    centers = 0.5 + radius[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    stds = np.where(k % 2 == 0, 0.12, 0.04)
    return centers, stds


def make_toy_mixture(n_train: int, n_test: int, n_classes: int = 6,
                     seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Gaussian mixture in the plane, stored as 1x1 two-channel images."""
    rng = np.random.default_rng(seed)
    centers, stds = toy_layout(n_classes)
    names = tuple(f"c{k}" for k in range(n_classes))

    def draw(n, name):
        labels = rng.integers(0, n_classes, size=n)
        pts = centers[labels] + stds[labels, None] * rng.standard_normal((n, 2))
        pts = np.clip(pts, 0.0, 1.0).reshape(n, 1, 1, 2)
        return LabeledDataset(pts, labels, name, n_classes, names)

    return draw(n_train, "toy-train"), draw(n_test, "toy-test")


def load_npz(path: str | Path) -> tuple[LabeledDataset, LabeledDataset | None]:
    """Read ``train_images``/``train_labels`` (and optional ``test_*``, ``class_names``).

    uint8 images are scaled to [0, 1].
    """
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    names = tuple(str(s) for s in arrays["class_names"]) if "class_names" in arrays else None

    def build(split):
        images = arrays[f"{split}_images"]
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / 255.0
        labels = arrays[f"{split}_labels"].astype(np.int64)
        k = len(names) if names else int(labels.max()) + 1
        return LabeledDataset(images, labels, f"{path.stem}-{split}", k, names)

    train = build("train")
    test = build("test") if "test_images" in arrays else None
    if test is not None and test.num_classes != train.num_classes:
        test = LabeledDataset(test.images, test.labels, test.name, train.num_classes, names)
    return train, test


def save_npz(path: str | Path, train: LabeledDataset, test: LabeledDataset | None = None) -> None:
    arrays = {"train_images": train.images, "train_labels": train.labels}
    if test is not None:
        arrays.update(test_images=test.images, test_labels=test.labels)
    if train.class_names:
        arrays["class_names"] = np.array(train.class_names)
    np.savez(path, **arrays)


TOY_DEFAULTS = {"n_train": 6000, "n_test": 2000, "seed": 0}


def resolve_dataset(spec: str) -> tuple[LabeledDataset, LabeledDataset | None]:
    """``toy`` (optionally ``toy:n_train=..,n_test=..,seed=..``) or a path to an .npz file."""
    if spec == "toy" or spec.startswith("toy:"):
        params = dict(TOY_DEFAULTS)
        if ":" in spec:
            for kv in spec.split(":", 1)[1].split(","):
                k, v = kv.split("=")
                params[k.strip()] = int(v)
        return make_toy_mixture(params["n_train"], params["n_test"], seed=params["seed"])
    path = Path(spec)
    if not path.exists():
        raise InvalidArgument(f"dataset {spec!r} is neither 'toy' nor an existing .npz file")
    return load_npz(path)
