"""Release of synthetic images: prior -> G_ds -> G_p.

Pure post-processing of the DP generator, so the release inherits its
(epsilon, delta) unchanged. Inputs are two checkpoints and a seed; nothing
here can reach the private split.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidArgument, ProvenanceError
from .manifest import RunManifest, config_hash
from .nets import parameter_checksum, torch_generator


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    """Generated images in the generators' [-1, 1] range, shape (n, h, w, c)."""

    images: np.ndarray

    def __len__(self):
        return len(self.images)

    def checksum(self) -> str:
        return hashlib.sha256(self.images.astype("<f4").tobytes()).hexdigest()


@torch.no_grad()
def synthesize(g_ds, g_p, n: int, seed: int, upstream: RunManifest | None, batch_size: int = 1024):
    """Sample ``n`` images. ``upstream`` is the DP-training manifest whose privacy record is carried over."""
    if upstream is None or not isinstance(upstream.privacy, dict):
        raise ProvenanceError("synthesis needs the manifest of the DP latent generator")
    if tuple(g_ds.output_shape) != (g_p.latent_dim,):
        raise InvalidArgument(f"G_ds emits {tuple(g_ds.output_shape)}, G_p expects latent dim {g_p.latent_dim}")
    if n < 0:
        raise InvalidArgument("sample count must be nonnegative")
    # all draws up front so the latents do not depend on batch_size
    z_all = torch.randn(n, g_ds.latent_dim, generator=torch_generator(seed))
    chunks = [g_p(g_ds(z_all[start:start + batch_size])).float().numpy() for start in range(0, n, batch_size)]
    images = np.concatenate(chunks) if chunks else np.zeros((0, *g_p.output_shape), np.float32)
    data = SyntheticDataset(images.astype(np.float32))
    manifest = RunManifest(
        stage="synthesize",
        config_hash=config_hash({"n": n, "seed": seed, "g_ds": parameter_checksum(g_ds),
                                 "g_p": parameter_checksum(g_p)}),
        inputs={"g_ds": parameter_checksum(g_ds), "g_p": parameter_checksum(g_p)},
        privacy=copy.deepcopy(upstream.privacy),
        seeds={"synthesis": seed},
        parents=[upstream.id],
        stats={"count": n, "archive_checksum": data.checksum()},
    )
    return data, manifest


def write_archive(data: SyntheticDataset, out_dir: str | Path, quantize: bool = False) -> list[str]:
    """Shape header plus raw little-endian float32 (or uint8 in [0, 255] with ``quantize``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {"shape": list(data.images.shape), "range": "[-1, 1]",
              "dtype": "uint8" if quantize else "float32-le"}
    (out_dir / "images.json").write_text(json.dumps(header, sort_keys=True) + "\n")
    if quantize:
        raw = np.round((data.images + 1.0) * 127.5).clip(0, 255).astype(np.uint8).tobytes()
        name = "images.u8"
    else:
        raw = data.images.astype("<f4").tobytes()
        name = "images.f32"
    (out_dir / name).write_bytes(raw)
    return ["images.json", name]


def read_archive(in_dir: str | Path) -> SyntheticDataset:
    in_dir = Path(in_dir)
    header = json.loads((in_dir / "images.json").read_text())
    shape = tuple(header["shape"])
    if header["dtype"] == "uint8":
        images = np.frombuffer((in_dir / "images.u8").read_bytes(), np.uint8).reshape(shape)
        images = images.astype(np.float32) / 127.5 - 1.0
    else:
        images = np.frombuffer((in_dir / "images.f32").read_bytes(), "<f4").reshape(shape).copy()
    return SyntheticDataset(images)
