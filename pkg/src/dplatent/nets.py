"""Generator / discriminator modules, the latent prior, and checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument


@dataclass(frozen=True)
class LatentPrior:
    """Standard normal prior over R^dim."""

    dim: int

    def log_density(self, z: torch.Tensor) -> torch.Tensor:
        return -0.5 * self.dim * math.log(2 * math.pi) - 0.5 * (z * z).sum(dim=-1)

    def density(self, z: torch.Tensor) -> torch.Tensor:
        return self.log_density(z).exp()


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % 2**63)
    return g


def sample_prior(prior: LatentPrior, n: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    if n < 1:
        raise InvalidArgument(f"sample count must be positive, got {n}")
    return torch.randn(n, prior.dim, generator=torch_generator(seed), dtype=dtype)


def _mlp(sizes, act=nn.LeakyReLU, slope=0.2):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(act(slope))
    return nn.Sequential(*layers)


class _DCGenBody(nn.Module):
    def __init__(self, latent_dim: int, channels: int, width: int = 64):
        super().__init__()
        self.width = width
        self.fc = nn.Linear(latent_dim, 4 * 4 * 4 * width)
        self.up = nn.Sequential(
            nn.BatchNorm2d(4 * width), nn.ReLU(),
            nn.ConvTranspose2d(4 * width, 2 * width, 4, 2, 1), nn.BatchNorm2d(2 * width), nn.ReLU(),
            nn.ConvTranspose2d(2 * width, width, 4, 2, 1), nn.BatchNorm2d(width), nn.ReLU(),
            nn.ConvTranspose2d(width, channels, 4, 2, 1),
        )

    def forward(self, z):
        x = self.fc(z).view(-1, 4 * self.width, 4, 4)
        return self.up(x).permute(0, 2, 3, 1)


class _DCCriticBody(nn.Module):
    def __init__(self, channels: int, width: int = 64):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(channels, width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 4, 2, 1), nn.LeakyReLU(0.2),
        )
        self.fc = nn.Linear(4 * 4 * 4 * width, 1)

    def forward(self, x):
        h = self.conv(x.permute(0, 3, 1, 2))
        return self.fc(h.flatten(1))


def _arch_id(arch: dict) -> str:
    return json.dumps(arch, sort_keys=True, separators=(",", ":"))


class Generator(nn.Module):
    """Maps (n, latent_dim) latents to (n, *output_shape) outputs.

    ``head="tanh"`` bounds image generators to [-1, 1]; latent-space
    generators use a linear head.
    """

    def __init__(self, latent_dim: int, output_shape, arch: dict | None = None):
        super().__init__()
        arch = dict(arch or {"kind": "mlp", "hidden": 64, "depth": 3, "head": "tanh"})
        self.latent_dim = int(latent_dim)
        self.output_shape = tuple(int(s) for s in output_shape)
        self.arch = arch
        out = int(np.prod(self.output_shape))
        if arch["kind"] == "mlp":
            self.body = _mlp([self.latent_dim] + [arch["hidden"]] * (arch["depth"] - 1) + [out])
        elif arch["kind"] == "dcgan":
            if self.output_shape[:2] != (32, 32):
                raise InvalidArgument("dcgan generator produces 32x32 images")
            self.body = _DCGenBody(self.latent_dim, self.output_shape[2], arch.get("width", 64))
        else:
            raise InvalidArgument(f"unknown generator kind {arch['kind']!r}")
        self.head = arch.get("head", "tanh")

    @property
    def arch_id(self) -> str:
        return _arch_id(self.arch)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = self.body(z).reshape(z.shape[0], *self.output_shape)
        return torch.tanh(x) if self.head == "tanh" else x

    def freeze(self) -> "Generator":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


class LambdaGenerator(nn.Module):
    """Wraps a fixed function of z; used for analytic toys and debug stubs."""

    def __init__(self, fn, latent_dim: int, output_shape, arch_id: str = "lambda"):
        super().__init__()
        self.fn = fn
        self.latent_dim = int(latent_dim)
        self.output_shape = tuple(output_shape)
        self.arch_id = arch_id
        self.arch = {"kind": "lambda", "name": arch_id}

    def forward(self, z):
        return self.fn(z).reshape(z.shape[0], *self.output_shape)

    def freeze(self):
        return self


def identity_generator(dim: int) -> LambdaGenerator:
    return LambdaGenerator(lambda z: z, dim, (dim,), "identity")


class Discriminator(nn.Module):
    """``vanilla`` mode returns probabilities; ``wasserstein`` returns raw critic scores."""

    def __init__(self, input_shape, mode: str = "wasserstein", arch: dict | None = None):
        super().__init__()
        if mode not in ("vanilla", "wasserstein"):
            raise InvalidArgument(f"unknown discriminator mode {mode!r}")
        arch = dict(arch or {"kind": "mlp", "hidden": 64, "depth": 3})
        self.input_shape = tuple(int(s) for s in input_shape)
        self.mode = mode
        self.arch = arch
        if arch["kind"] == "mlp":
            self.body = _mlp([int(np.prod(self.input_shape))] + [arch["hidden"]] * (arch["depth"] - 1) + [1])
        elif arch["kind"] == "dcgan":
            self.body = _DCCriticBody(self.input_shape[2], arch.get("width", 64))
        else:
            raise InvalidArgument(f"unknown discriminator kind {arch['kind']!r}")

    @property
    def arch_id(self) -> str:
        return _arch_id({**self.arch, "mode": self.mode})

    def score(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-activation output, shape (n,)."""
        if self.arch["kind"] == "mlp":
            x = x.reshape(x.shape[0], -1)
        return self.body(x).reshape(-1)

    def forward(self, x):
        s = self.score(x)
        return torch.sigmoid(s) if self.mode == "vanilla" else s

    @torch.no_grad()
    def clip_weights(self, c: float) -> None:
        for p in self.parameters():
            p.clamp_(-c, c)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, module: nn.Module, role: str, config_hash: str = "") -> str:
    """Write a generator/discriminator checkpoint; returns the parameter checksum."""
    if isinstance(module, Generator):
        meta = {"role": role, "type": "generator", "arch": module.arch, "latent_dim": module.latent_dim,
                "output_shape": list(module.output_shape)}
    elif isinstance(module, Discriminator):
        meta = {"role": role, "type": "discriminator", "arch": module.arch, "mode": module.mode,
                "input_shape": list(module.input_shape)}
    else:
        raise InvalidArgument(f"cannot checkpoint {type(module).__name__}")
    checksum = parameter_checksum(module)
    meta.update(arch_id=module.arch_id, config_hash=config_hash, param_checksum=checksum)
    torch.save({"meta": meta, "state_dict": module.state_dict()}, path)
    return checksum


def load_checkpoint(path: str | Path):
    blob = torch.load(path, map_location="cpu", weights_only=True)
    meta = blob["meta"]
    if meta["type"] == "generator":
        module = Generator(meta["latent_dim"], meta["output_shape"], meta["arch"])
    else:
        module = Discriminator(meta["input_shape"], meta["mode"], meta["arch"])
    module.load_state_dict(blob["state_dict"])
    module.eval()
    return module, meta
