"""Latent-space inversion of a frozen generator.

Two objectives over a latent ``z`` for a target ``x``, with
``f(z) = ||G(z) - x||^2``:

* GOMI: reconstruction error divided by the standard normal density. The
  ``literal-ratio`` form is ``f(z) * exp(||z||^2 / 2)`` (the constant
  ``(2 pi)^(-d/2)`` dropped); the default ``log-surrogate`` form is
  ``log(f(z) + e) + ||z||^2 / 2``, which has the same minimizers and does not
  overflow for large latent dimension.
* MI: ``f(z)`` restricted to the ball ``||z|| <= ||z0||`` for a fresh prior draw ``z0``.

Both are minimized per restart with Adam, bias-corrected, for a fixed
iteration count; the restart with the lowest final objective wins.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import LabeledDataset, to_signed
from .errors import BatchFailure, InvalidArgument, InversionFailure
from .latents import LatentDataset
from .manifest import RunManifest, config_hash
from .nets import parameter_checksum, torch_generator

log = logging.getLogger(__name__)

FORMS = ("literal-ratio", "log-surrogate")


@dataclass
class InversionConfig:
    iterations: int = 1000
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    objective_form: str = "log-surrogate"
    restarts: int = 4
    seed: int = 0
    chunk_size: int = 512

    def validate(self):
        if self.iterations < 1 or self.restarts < 1:
            raise InvalidArgument("iterations and restarts must be at least 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidArgument("Adam betas must lie in [0, 1)")
        if not (self.learning_rate > 0 and self.eps > 0):
            raise InvalidArgument("learning rate and eps must be positive")
        if self.objective_form not in FORMS:
            raise InvalidArgument(f"objective_form must be one of {FORMS}")


@dataclass
class InversionResult:
    z_s: np.ndarray
    initial_objective: float
    final_objective: float
    reconstruction_mse: float
    restart_index: int
    fallback: bool = False


def _residual(gen, z, x):
    return ((gen(z) - x) ** 2).reshape(z.shape[0], -1).sum(dim=1)


def _log_max(dtype) -> float:
    return math.log(torch.finfo(dtype).max) - 1.0


def _gomi_rows(f, z, form, eps, overflow=None):
    """Row objectives; rows flagged in ``overflow`` use the log form."""
    sq = 0.5 * (z * z).sum(dim=1)
    log_form = torch.log(f + eps) + sq
    if form == "log-surrogate":
        return log_form, torch.ones_like(sq, dtype=torch.bool)
    with torch.no_grad():
        too_big = torch.log(f.detach().clamp_min(torch.finfo(f.dtype).tiny)) + sq.detach() > _log_max(f.dtype)
        if overflow is not None:
            too_big = too_big | overflow
    literal = f * torch.exp(torch.where(too_big, torch.zeros_like(sq), sq))
    return torch.where(too_big, log_form, literal), too_big


def gomi_objective(z, gen, x_s, form: str = "log-surrogate", eps: float = 1e-8,
                   diagnostics: dict | None = None) -> torch.Tensor:
    """GOMI objective for one latent (shape (d,)) or a batch (n, d) against matching targets."""
    if form not in FORMS:
        raise InvalidArgument(f"objective form must be one of {FORMS}")
    single = z.dim() == 1
    z2 = z.reshape(1, -1) if single else z
    if z2.shape[1] != gen.latent_dim:
        raise InvalidArgument(f"latent has dim {z2.shape[1]}, generator expects {gen.latent_dim}")
    x = torch.as_tensor(x_s, dtype=z.dtype)
    if x.dim() == len(gen.output_shape):
        x = x.unsqueeze(0)
    values, fell_back = _gomi_rows(_residual(gen, z2, x), z2, form, eps)
    if form == "literal-ratio" and bool(fell_back.any()):
        log.warning("exp(||z||^2/2) overflows; using the log-surrogate objective")
        if diagnostics is not None:
            diagnostics["fallback"] = True
    return values[0] if single else values


def project_ball(z: torch.Tensor, radius: torch.Tensor) -> torch.Tensor:
    """Radial projection of each row onto ``||z|| <= radius``."""
    norm = z.norm(dim=1, keepdim=True)
    r = radius.reshape(-1, 1)
    scale = torch.where(norm > r, r / norm, torch.ones_like(norm))
    return z * scale


def _stream_seed(seed: int, image_index: int, restart: int) -> int:
    digest = hashlib.sha256(f"inv:{seed}:{image_index}:{restart}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _initial_latents(dim, indices, restarts, seed, dtype):
    rows = [torch.randn(dim, generator=torch_generator(_stream_seed(seed, int(i), r)), dtype=dtype)
            for i in indices for r in range(restarts)]
    return torch.stack(rows)


def _adam_inversion(gen, targets, z_init, config, method):
    """Run Adam independently on every row. Returns z, initial, final objectives, fallback flags."""
    z = z_init.clone()
    radius = z_init.norm(dim=1) if method == "mi" else None
    m = torch.zeros_like(z)
    v = torch.zeros_like(z)
    b1, b2, lr, e = config.beta1, config.beta2, config.learning_rate, config.eps
    overflow = torch.zeros(z.shape[0], dtype=torch.bool)

    def evaluate(z_eval, grad):
        z_eval = z_eval.detach().requires_grad_(grad)
        f = _residual(gen, z_eval, targets)
        if method == "mi":
            obj = f
        else:
            obj, flags = _gomi_rows(f, z_eval, config.objective_form, e, overflow)
            if config.objective_form == "literal-ratio":
                overflow.logical_or_(flags)
        if not grad:
            return obj.detach(), None
        g, = torch.autograd.grad(obj.sum(), z_eval)
        return obj.detach(), g

    with torch.no_grad():
        initial, _ = evaluate(z, False)
    for i in range(1, config.iterations + 1):
        _, g = evaluate(z, True)
        with torch.no_grad():
            m.mul_(b1).add_((1 - b1) * g)
            v.mul_(b2).add_((1 - b2) * g * g)
            m_hat = m / (1 - b1**i)
            v_hat = v / (1 - b2**i)
            z = z - lr * m_hat / (v_hat.sqrt() + e)
            if method == "mi":
                z = project_ball(z, radius)
    final, _ = evaluate(z, False)
    return z.detach(), initial, final, overflow.clone()


def _invert_rows(gen, targets, indices, config, method, init=None):
    """Invert ``targets`` (k, *out_shape); returns per-row results (None on failure)."""
    k = targets.shape[0]
    dtype = next((p.dtype for p in gen.parameters()), targets.dtype)
    targets = targets.to(dtype)
    restarts = 1 if init is not None else config.restarts
    if init is not None:
        z0 = torch.as_tensor(init, dtype=dtype).reshape(k, gen.latent_dim)
    else:
        z0 = _initial_latents(gen.latent_dim, indices, restarts, config.seed, dtype)
    rep_targets = targets.repeat_interleave(restarts, dim=0)
    z, initial, final, fell_back = _adam_inversion(gen, rep_targets, z0, config, method)
    if config.objective_form == "literal-ratio" and method == "gomi" and bool(fell_back.any()):
        log.warning("%d inversion runs fell back to the log-surrogate objective", int(fell_back.sum()))

    z = z.reshape(k, restarts, -1)
    initial = initial.reshape(k, restarts)
    final = final.reshape(k, restarts)
    fell_back = fell_back.reshape(k, restarts)
    with torch.no_grad():
        mse_all = _residual(gen, z.reshape(k * restarts, -1), rep_targets).reshape(k, restarts)
    pixels = int(np.prod(targets.shape[1:]))
    results = []
    for row in range(k):
        ok = torch.isfinite(final[row])
        if not bool(ok.any()):
            results.append(None)
            continue
        masked = torch.where(ok, final[row], torch.full_like(final[row], math.inf))
        best = int(torch.argmin(masked))
        results.append(InversionResult(
            z_s=z[row, best].cpu().numpy(),
            initial_objective=float(initial[row, best]),
            final_objective=float(final[row, best]),
            reconstruction_mse=float(mse_all[row, best]) / pixels,
            restart_index=best,
            fallback=bool(fell_back[row, best]),
        ))
    return results


def _single(gen, x_s, config, method, init, image_index):
    config.validate()
    x = torch.as_tensor(np.asarray(x_s)).reshape(1, *gen.output_shape)
    result = _invert_rows(gen, x, [image_index], config, method, init)[0]
    if result is None:
        raise InversionFailure("every restart ended with a non-finite objective",
                               {"method": method, "image_index": image_index, "restarts": config.restarts})
    return result


def invert_gomi(gen, x_s, config: InversionConfig | None = None, init=None, image_index: int = 0) -> InversionResult:
    """GOMI inversion of one target. ``init`` forces the starting latent (single restart)."""
    return _single(gen, x_s, config or InversionConfig(), "gomi", init, image_index)


def invert_mi(gen, x_s, config: InversionConfig | None = None, init=None, image_index: int = 0) -> InversionResult:
    """Projected-Adam MI baseline; ``init`` (if given) also sets the constraint radius."""
    return _single(gen, x_s, config or InversionConfig(), "mi", init, image_index)


def invert_batch(gen, d_s: LabeledDataset, method: str = "gomi", config: InversionConfig | None = None,
                 max_failure_rate: float = 0.10):
    """Invert every private image independently. Returns (LatentDataset, RunManifest)."""
    if method not in ("gomi", "mi"):
        raise InvalidArgument(f"unknown inversion method {method!r}")
    config = config or InversionConfig()
    config.validate()
    gen_checksum = parameter_checksum(gen)
    images = d_s.images
    labels = d_s.labels
    n = len(labels)
    results: list[InversionResult | None] = []
    for start in range(0, n, config.chunk_size):
        stop = min(start + config.chunk_size, n)
        x = torch.as_tensor(to_signed(images[start:stop]))
        x = x.reshape(stop - start, *gen.output_shape)
        results.extend(_invert_rows(gen, x, range(start, stop), config, method))

    failed = [i for i, r in enumerate(results) if r is None]
    if n and len(failed) / n > max_failure_rate:
        raise BatchFailure(f"{len(failed)} of {n} inversions failed")
    kept = [r for r in results if r is not None]
    keep_idx = [i for i, r in enumerate(results) if r is not None]
    d = gen.latent_dim
    latents = LatentDataset(
        np.stack([r.z_s for r in kept]).astype(np.float32) if kept else np.zeros((0, d), np.float32),
        labels[keep_idx] if n else np.zeros(0, np.int64),
        gen_checksum, method,
        np.array([r.reconstruction_mse for r in kept], dtype=np.float32),
    )
    mse = latents.mse
    manifest = RunManifest(
        stage="invert",
        config_hash=config_hash({"method": method, **asdict(config)}),
        inputs={"generator": gen_checksum, "d_s": d_s.checksum()},
        privacy="private",
        seeds={"inversion": config.seed},
        stats={
            "method": method, "config": asdict(config), "count": len(kept), "failures": failed,
            "mse_mean": float(mse.mean()) if len(mse) else None,
            "mse_median": float(np.median(mse)) if len(mse) else None,
            "mse_max": float(mse.max()) if len(mse) else None,
            "fallbacks": sum(r.fallback for r in kept),
            "latents_checksum": latents.checksum(),
        },
    )
    return latents, manifest
