"""Private latent vectors and their on-disk layout."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True, eq=False)
class LatentDataset:
    vectors: np.ndarray
    labels: np.ndarray | None
    source_generator_checksum: str
    method: str
    mse: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float32)
        if v.ndim != 2:
            raise InvalidArgument(f"latent vectors must be (n, d), got shape {v.shape}")
        if not np.isfinite(v).all():
            raise InvalidArgument("latent vectors must be finite")
        object.__setattr__(self, "vectors", v)
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.mse is not None:
            object.__setattr__(self, "mse", np.asarray(self.mse, dtype=np.float32))

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def take(self, indices) -> np.ndarray:
        return self.vectors[np.asarray(indices, dtype=np.int64)]

    def checksum(self) -> str:
        h = hashlib.sha256(self.vectors.astype("<f4").tobytes())
        if self.labels is not None:
            h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()


FILES = ("header.json", "vectors.f32", "labels.i64", "mse.f32")


def write_latents(latents: LatentDataset, out_dir: str | Path) -> list[str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n, d = latents.vectors.shape
    header = {"dim": d, "count": n, "generator_checksum": latents.source_generator_checksum,
              "method": latents.method, "has_labels": latents.labels is not None,
              "has_mse": latents.mse is not None, "dtype": "float32-le"}
    (out_dir / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    (out_dir / "vectors.f32").write_bytes(latents.vectors.astype("<f4").tobytes())
    written = ["header.json", "vectors.f32"]
    if latents.labels is not None:
        (out_dir / "labels.i64").write_bytes(latents.labels.astype("<i8").tobytes())
        written.append("labels.i64")
    if latents.mse is not None:
        (out_dir / "mse.f32").write_bytes(latents.mse.astype("<f4").tobytes())
        written.append("mse.f32")
    return written


def read_latents(in_dir: str | Path) -> LatentDataset:
    in_dir = Path(in_dir)
    header = json.loads((in_dir / "header.json").read_text())
    n, d = header["count"], header["dim"]
    vectors = np.frombuffer((in_dir / "vectors.f32").read_bytes(), dtype="<f4").reshape(n, d)
    labels = (np.frombuffer((in_dir / "labels.i64").read_bytes(), dtype="<i8")
              if header["has_labels"] else None)
    mse = np.frombuffer((in_dir / "mse.f32").read_bytes(), dtype="<f4") if header["has_mse"] else None
    return LatentDataset(vectors, labels, header["generator_checksum"], header["method"], mse)
