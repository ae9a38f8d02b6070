"""Per-sample clipping and the Gaussian sum query used by DP-SGD."""
from __future__ import annotations

import numpy as np
import torch

from ..errors import ContractViolation, InvalidArgument
from .noise import GaussianStream


def flatten_per_sample(grads) -> torch.Tensor:
    """Concatenate a sequence of (n, *param_shape) gradients into one (n, p) matrix."""
    grads = list(grads)
    n = grads[0].shape[0]
    return torch.cat([g.reshape(n, -1) for g in grads], dim=1)


def _rows(batch):
    """(n, p) view; explicit p so that empty batches reshape too."""
    return batch.reshape(batch.shape[0], int(np.prod(batch.shape[1:])))


def _norms(batch):
    if isinstance(batch, torch.Tensor):
        return torch.linalg.vector_norm(_rows(batch), dim=1)
    return np.linalg.norm(_rows(np.asarray(batch)), axis=1)


def clip_per_sample(per_sample_grads, clip_norm: float):
    """Scale each row ``g_i`` by ``min(1, C / ||g_i||)``. Accepts torch or numpy batches."""
    if not clip_norm > 0:
        raise InvalidArgument(f"clip_norm must be positive, got {clip_norm}")
    g = per_sample_grads
    if isinstance(g, torch.Tensor):
        # float64 so that rows near the bound still land inside it after the cast back
        flat = _rows(g).double()
        norm = torch.linalg.vector_norm(flat, dim=1, keepdim=True)
        factor = torch.where(norm > clip_norm, clip_norm / norm, torch.ones_like(norm))
        return (flat * factor).to(g.dtype).reshape(g.shape)
    g = np.asarray(g, dtype=np.float64)
    flat = _rows(g)
    norm = np.linalg.norm(flat, axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        factor = np.where(norm > 0, np.minimum(1.0, clip_norm / norm), 1.0)
    return (flat * factor).reshape(g.shape)


def privatize_sum(clipped_batch, clip_norm: float, noise_multiplier: float,
                  stream: GaussianStream, tol: float = 1e-6):
    """Sum of clipped rows plus N(0, (sigma*C)^2) noise on every coordinate.

    ``clipped_batch`` has shape (n, ...); an empty batch must still carry the
    trailing shape, e.g. (0, p).
    """
    if noise_multiplier < 0:
        raise InvalidArgument("noise_multiplier must be nonnegative")
    norms = _norms(clipped_batch)
    bound = clip_norm * (1 + tol) + tol
    if len(norms) and float(norms.max()) > bound:
        raise ContractViolation(f"input row with norm {float(norms.max()):.6g} exceeds clip bound {clip_norm}")
    shape = tuple(clipped_batch.shape[1:])
    noise = stream.normal(shape, std=noise_multiplier * clip_norm) if noise_multiplier > 0 else np.zeros(shape)
    if isinstance(clipped_batch, torch.Tensor):
        total = clipped_batch.sum(dim=0)
        return total + torch.as_tensor(noise, dtype=total.dtype, device=total.device)
    return np.asarray(clipped_batch, dtype=np.float64).sum(axis=0) + noise
