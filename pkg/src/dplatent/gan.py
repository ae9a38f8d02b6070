"""GAN objectives and non-private training of the public generator."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import LabeledDataset, to_signed
from .errors import InvalidArgument, TrainingFailure
from .manifest import RunManifest, config_hash
from .nets import Discriminator, Generator, parameter_checksum, torch_generator

log = logging.getLogger(__name__)


def _check_batches(real, fake):
    if real.shape[1:] != fake.shape[1:]:
        raise InvalidArgument(f"real batch {tuple(real.shape)} and generated batch {tuple(fake.shape)} differ in shape")


@torch.no_grad()
def gan_value(disc, gen, real_batch, z_batch, floor: float = 1e-12, diagnostics: dict | None = None) -> float:
    """mean log C(x) + mean log(1 - C(G(z))) for a probability-valued discriminator."""
    if getattr(disc, "mode", "vanilla") != "vanilla":
        raise InvalidArgument("gan_value needs a vanilla (probability) discriminator")
    fake = gen(z_batch)
    _check_batches(real_batch, fake)
    p_real = disc(real_batch).double()
    p_fake = disc(fake).double()
    clamped = int(((p_real <= floor) | (p_real >= 1 - floor)).sum() + ((p_fake <= floor) | (p_fake >= 1 - floor)).sum())
    if clamped:
        log.warning("clamped %d discriminator outputs at the floor %g", clamped, floor)
    if diagnostics is not None:
        diagnostics["clamped"] = clamped
    p_real = p_real.clamp(floor, 1 - floor)
    p_fake = p_fake.clamp(floor, 1 - floor)
    return float(p_real.log().mean() + torch.log1p(-p_fake).mean())


@torch.no_grad()
def wgan_value(critic, gen, real_batch, z_batch) -> float:
    """mean f(x) - mean f(G(z))."""
    if getattr(critic, "mode", "wasserstein") != "wasserstein":
        raise InvalidArgument("wgan_value needs a wasserstein critic")
    fake = gen(z_batch)
    _check_batches(real_batch, fake)
    return float(critic(real_batch).double().mean() - critic(fake).double().mean())


@dataclass
class GanConfig:
    mode: str = "wasserstein"
    latent_dim: int = 64
    steps: int = 2000
    batch_size: int = 64
    critic_steps: int = 5
    lr_g: float = 5e-5
    lr_d: float = 5e-5
    optimizer: str = "rmsprop"
    # "clip" or "gp"
    lipschitz: str = "clip"
    clip_value: float = 0.01
    gp_weight: float = 10.0
    arch: str = "mlp"
    hidden: int = 64
    depth: int = 3
    width: int = 64
    seed: int = 0
    log_every: int = 0

    def validate(self):
        if self.mode not in ("vanilla", "wasserstein"):
            raise InvalidArgument(f"unknown GAN mode {self.mode!r}")
        if self.lipschitz not in ("clip", "gp"):
            raise InvalidArgument(f"unknown Lipschitz enforcement {self.lipschitz!r}")
        if self.latent_dim < 1 or self.steps < 0 or self.batch_size < 1 or self.critic_steps < 1:
            raise InvalidArgument("latent_dim, batch_size, critic_steps must be positive and steps nonnegative")


def build_pair(config: GanConfig, image_shape, out_head: str = "tanh"):
    if config.arch == "dcgan":
        g_arch = {"kind": "dcgan", "width": config.width, "head": out_head}
        d_arch = {"kind": "dcgan", "width": config.width}
    else:
        g_arch = {"kind": "mlp", "hidden": config.hidden, "depth": config.depth, "head": out_head}
        d_arch = {"kind": "mlp", "hidden": config.hidden, "depth": config.depth}
    return (Generator(config.latent_dim, image_shape, g_arch),
            Discriminator(image_shape, config.mode, d_arch))


def make_optimizer(name: str, params, lr: float):
    if name == "rmsprop":
        return torch.optim.RMSprop(params, lr=lr)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, betas=(0.5, 0.9))
    raise InvalidArgument(f"unknown optimizer {name!r}")


def _gradient_penalty(critic, real, fake, gen_rng):
    eps = torch.rand(real.shape[0], *([1] * (real.dim() - 1)), generator=gen_rng)
    mix = (eps * real + (1 - eps) * fake).requires_grad_(True)
    grad, = torch.autograd.grad(critic(mix).sum(), mix, create_graph=True)
    return ((grad.flatten(1).norm(dim=1) - 1) ** 2).mean()


def _critic_loss(config, disc, real, fake):
    if config.mode == "wasserstein":
        return disc(fake).mean() - disc(real).mean()
    s_real, s_fake = disc.score(real), disc.score(fake)
    return (torch.nn.functional.softplus(-s_real).mean() + torch.nn.functional.softplus(s_fake).mean())


def _gen_loss(config, disc, fake):
    if config.mode == "wasserstein":
        return -disc(fake).mean()
    return torch.nn.functional.softplus(-disc.score(fake)).mean()


def train_public_gan(d_p: LabeledDataset, config: GanConfig):
    """Non-private GAN training on the public split. Returns (G_p, critic, manifest)."""
    config.validate()
    real_all = torch.as_tensor(to_signed(d_p.images))
    if len(real_all) == 0:
        raise InvalidArgument("public dataset is empty")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen, disc = build_pair(config, d_p.image_shape)
    rng = torch_generator(config.seed + 1)
    opt_g = make_optimizer(config.optimizer, gen.parameters(), config.lr_g)
    opt_d = make_optimizer(config.optimizer, disc.parameters(), config.lr_d)
    n = len(real_all)
    last_good = (copy.deepcopy(gen.state_dict()), copy.deepcopy(disc.state_dict()))
    trace = []

    for step in range(config.steps):
        for _ in range(config.critic_steps):
            idx = torch.randint(0, n, (config.batch_size,), generator=rng)
            real = real_all[idx]
            z = torch.randn(config.batch_size, config.latent_dim, generator=rng)
            with torch.no_grad():
                fake = gen(z)
            loss_d = _critic_loss(config, disc, real, fake)
            if config.mode == "wasserstein" and config.lipschitz == "gp":
                loss_d = loss_d + config.gp_weight * _gradient_penalty(disc, real, fake, rng)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            if config.mode == "wasserstein" and config.lipschitz == "clip":
                disc.clip_weights(config.clip_value)
        z = torch.randn(config.batch_size, config.latent_dim, generator=rng)
        loss_g = _gen_loss(config, disc, gen(z))
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()

        ld, lg = loss_d.item(), loss_g.item()
        if not (math.isfinite(ld) and math.isfinite(lg)):
            gen.load_state_dict(last_good[0])
            disc.load_state_dict(last_good[1])
            raise TrainingFailure(f"objective diverged at step {step}", checkpoint=(gen, disc))
        if step % 100 == 0:
            last_good = (copy.deepcopy(gen.state_dict()), copy.deepcopy(disc.state_dict()))
        if config.log_every and step % config.log_every == 0:
            log.info("public gan step %d critic %.4f gen %.4f", step, ld, lg)
        trace.append((ld, lg))

    gen.freeze()
    disc.eval()
    tail = np.array(trace[-100:]) if trace else np.zeros((0, 2))
    manifest = RunManifest(
        stage="train-public",
        config_hash=config_hash(config),
        inputs={"d_p": d_p.checksum()},
        privacy="public",
        seeds={"train": config.seed},
        stats={
            "steps": config.steps,
            "final_critic_loss": float(tail[:, 0].mean()) if len(tail) else None,
            "final_generator_loss": float(tail[:, 1].mean()) if len(tail) else None,
            "generator_checksum": parameter_checksum(gen),
            "config": asdict(config),
        },
    )
    return gen, disc, manifest
