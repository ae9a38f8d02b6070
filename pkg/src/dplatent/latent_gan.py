"""Differentially private WGAN over private latent vectors.

Only critic updates touch private latents; each one clips per-sample
gradients and adds Gaussian noise to their sum. Generator updates see critic
scores on generated samples only. Privacy is charged to the accountant
before the steps it covers run (write-ahead), so a crash never under-reports.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch.func import functional_call, grad, vmap

from . import audit
from .dp import (GaussianStream, RdpAccountant, clip_per_sample, fresh_state, max_steps_for_budget,
                 noise_for_budget, privatize_sum)
from .dp.rdp import DEFAULT_ORDERS
from .errors import BudgetExhausted, InvalidArgument, TrainingFailure
from .gan import make_optimizer
from .manifest import RunManifest, config_hash, privacy_record
from .nets import Discriminator, Generator, parameter_checksum, torch_generator

log = logging.getLogger(__name__)


@dataclass
class DpGanConfig:
    inner_latent_dim: int = 16
    hidden: int = 64
    depth: int = 3
    critic_steps: int = 5
    batch_size: int = 64
    lr_g: float = 5e-4
    lr_d: float = 5e-4
    optimizer: str = "rmsprop"
    weight_clip: float = 0.05
    clip_norm: float = 1.0
    # None: calibrate the smallest multiplier that affords max_steps within the budget
    noise_multiplier: float | None = 1.1
    delta: float = 1e-5
    epsilon_budget: float = 10.0
    # cap on critic (private) steps; None means spend the whole budget
    max_steps: int | None = None
    account_every: int = 50
    seed: int = 0
    noise_seed: int | None = None
    debug: bool = False

    def validate(self):
        if self.inner_latent_dim < 1 or self.critic_steps < 1 or self.batch_size < 1:
            raise InvalidArgument("inner_latent_dim, critic_steps and batch_size must be positive")
        if not self.clip_norm > 0:
            raise InvalidArgument("clip_norm must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise InvalidArgument("max_steps must be positive")
        if self.account_every < 1:
            raise InvalidArgument("account_every must be positive")
        if not 0 < self.delta < 1:
            raise InvalidArgument("delta must lie in (0, 1)")
        if self.noise_multiplier is None:
            if self.max_steps is None or not (0 <= self.epsilon_budget < math.inf):
                raise InvalidArgument("a calibrated noise multiplier needs max_steps and a finite budget")
            return
        if self.noise_multiplier < 0:
            raise InvalidArgument("noise_multiplier must be nonnegative")
        if self.noise_multiplier == 0 and (math.isfinite(self.epsilon_budget) or self.max_steps is None):
            raise InvalidArgument("sigma = 0 is the non-private debug mode: it needs epsilon_budget = inf and max_steps")
        if self.noise_multiplier > 0 and not (self.epsilon_budget >= 0 and math.isfinite(self.epsilon_budget)):
            raise InvalidArgument("epsilon_budget must be finite and nonnegative when sigma > 0")


def _per_sample_critic_grads(critic, params, real, fake):
    """Gradient of f(fake_i) - f(real_i) for every pair, flattened to (B, p)."""

    def loss_one(p, r, f):
        out = functional_call(critic, p, (torch.stack([r, f]),))
        return out[1] - out[0]

    grads = vmap(grad(loss_one), in_dims=(None, 0, 0))(params, real, fake)
    return torch.cat([grads[k].reshape(real.shape[0], -1) for k in params], dim=1)


def _assign_flat_grad(module, flat):
    offset = 0
    for p in module.parameters():
        k = p.numel()
        p.grad = flat[offset:offset + k].reshape(p.shape).to(p.dtype).clone()
        offset += k


def train_dp_latent_gan(latents, config: DpGanConfig, audit_log_path: str | Path | None = None):
    """Returns (G_ds, final AccountantState, RunManifest)."""
    config.validate()
    n = len(latents)
    if n == 0:
        raise InvalidArgument("latent dataset is empty")
    d = latents.dim
    q = min(1.0, config.batch_size / n)
    sigma = config.noise_multiplier
    if sigma is None:
        if config.epsilon_budget <= 0:
            raise BudgetExhausted("epsilon budget 0 does not cover a single step")
        sigma = noise_for_budget(config.epsilon_budget, config.delta, q, config.max_steps)
    private = sigma > 0

    if private:
        budget_steps = max_steps_for_budget(config.epsilon_budget, config.delta, q, sigma)
        if budget_steps == 0:
            raise BudgetExhausted(f"epsilon budget {config.epsilon_budget} does not cover a single step "
                                  f"(q={q:.4g}, sigma={sigma})")
        total = budget_steps if config.max_steps is None else min(budget_steps, config.max_steps)
    else:
        budget_steps = None
        total = config.max_steps

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen = Generator(config.inner_latent_dim, (d,),
                        {"kind": "mlp", "hidden": config.hidden, "depth": config.depth, "head": "linear"})
        critic = Discriminator((d,), "wasserstein", {"kind": "mlp", "hidden": config.hidden, "depth": config.depth})
    opt_g = make_optimizer(config.optimizer, gen.parameters(), config.lr_g)
    opt_d = make_optimizer(config.optimizer, critic.parameters(), config.lr_d)
    rng = torch_generator(config.seed + 7)
    stream = GaussianStream(config.noise_seed)
    accountant = RdpAccountant(config.delta, fresh_state(DEFAULT_ORDERS),
                               Path(audit_log_path) if audit_log_path else None)
    expected_batch = q * n
    done = 0
    critic_losses = []

    def fail(msg):
        raise TrainingFailure(msg, checkpoint=gen, accountant=accountant.snapshot())

    while done < total:
        chunk = min(config.account_every, total - done)
        if private:
            accountant.step(q, sigma, chunk)
        for _ in range(chunk):
            with audit.phase("critic-update"):
                mask = stream.uniform(n) < q
                idx = np.flatnonzero(mask)
                real = torch.as_tensor(latents.take(idx))
            z = torch.randn(len(idx), config.inner_latent_dim, generator=rng)
            with torch.no_grad():
                fake = gen(z)
            params = {k: v.detach() for k, v in critic.named_parameters()}
            p_total = sum(v.numel() for v in params.values())
            if len(idx):
                per_sample = _per_sample_critic_grads(critic, params, real, fake)
                with torch.no_grad():
                    batch_loss = float((critic(fake) - critic(real)).mean())
            else:
                per_sample = torch.zeros(0, p_total)
                batch_loss = 0.0
            clipped = clip_per_sample(per_sample, config.clip_norm)
            noisy = privatize_sum(clipped, config.clip_norm, sigma, stream)
            if not torch.isfinite(noisy).all() or not math.isfinite(batch_loss):
                fail(f"critic objective diverged after {done} private steps")
            opt_d.zero_grad()
            _assign_flat_grad(critic, noisy / expected_batch)
            opt_d.step()
            critic.clip_weights(config.weight_clip)
            critic_losses.append(batch_loss)
            done += 1

            if done % config.critic_steps == 0:
                with audit.phase("generator-update"):
                    z = torch.randn(config.batch_size, config.inner_latent_dim, generator=rng)
                    loss_g = -critic(gen(z)).mean()
                    opt_g.zero_grad()
                    loss_g.backward()
                    opt_g.step()
                    critic.zero_grad(set_to_none=True)
                    if not math.isfinite(loss_g.item()):
                        fail(f"generator objective diverged after {done} private steps")

    gen.freeze()
    state = accountant.snapshot()
    if private:
        eps = accountant.epsilon()
        record = privacy_record(state, config.delta, eps, sigma=sigma, clip_norm=config.clip_norm,
                                q=q, epsilon_budget=config.epsilon_budget)
    else:
        record = {"epsilon": math.inf, "delta": config.delta, "sigma": 0.0, "clip_norm": config.clip_norm,
                  "q": q, "steps": 0, "epsilon_budget": math.inf, "accountant": state.to_dict(),
                  "mode": "non-private debug", "private_steps_run": done}
    seeds = {"train": config.seed}
    if config.noise_seed is not None:
        seeds["noise"] = config.noise_seed if config.debug else "redacted"
    tail = critic_losses[-100:]
    manifest = RunManifest(
        stage="train-dp",
        config_hash=config_hash(config),
        inputs={"latents": latents.checksum()},
        privacy=record,
        seeds=seeds,
        stats={"config": asdict(config), "critic_steps_run": done, "budget_steps": budget_steps,
               "final_critic_loss": float(np.mean(tail)) if tail else None,
               "generator_checksum": parameter_checksum(gen), "latent_count": n},
    )
    return gen, state, manifest
