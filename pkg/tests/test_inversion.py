import math

import numpy as np
import pytest
import torch

from dplatent.data import LabeledDataset, to_unit
from dplatent.errors import BatchFailure, InvalidArgument, InversionFailure
from dplatent.inversion import (InversionConfig, gomi_objective, invert_batch, invert_gomi, invert_mi,
                                project_ball)
from dplatent.latents import read_latents, write_latents
from dplatent.nets import LambdaGenerator

from conftest import cubic_generator, toy_generator_2d

D = torch.float64


def affine_generator():
    return LambdaGenerator(lambda z: 2 * z + 1, 1, (1,), "affine")


def scalar_gomi_literal(g, x, z):
    """Independent scalar evaluation of the literal-ratio objective."""
    return (g(z) - x) ** 2 * math.exp(z * z / 2)


def test_zero_latent_literal_is_residual():
    gen = affine_generator()
    z = torch.zeros(1, dtype=D)
    assert gomi_objective(z, gen, torch.tensor([3.0], dtype=D), "literal-ratio").item() == pytest.approx(4.0)


def test_realizable_target_values(gen2d):
    z = torch.tensor([0.3, -0.7], dtype=D)
    with torch.no_grad():
        x = gen2d(z.reshape(1, -1))[0]
    assert gomi_objective(z, gen2d, x, "literal-ratio").item() == 0.0
    expected = math.log(1e-8) + 0.5 * (0.3**2 + 0.7**2)
    assert gomi_objective(z, gen2d, x, "log-surrogate", eps=1e-8).item() == pytest.approx(expected, abs=1e-12)


def test_affine_example():
    value = gomi_objective(torch.tensor([0.5], dtype=D), affine_generator(), torch.tensor([3.0], dtype=D),
                           "literal-ratio").item()
    assert value == pytest.approx(scalar_gomi_literal(lambda z: 2 * z + 1, 3.0, 0.5), rel=1e-12)
    # G(0.5) = 2, so f = 1 and the objective is exp(1/8)
    assert value == pytest.approx(math.exp(0.125), rel=1e-12)


def test_overflow_falls_back_to_log():
    diag = {}
    z = torch.tensor([40.0], dtype=D)
    x = torch.tensor([0.0], dtype=D)
    value = gomi_objective(z, affine_generator(), x, "literal-ratio", diagnostics=diag)
    assert diag["fallback"] is True
    assert value.item() == pytest.approx(math.log(81**2 + 1e-8) + 800.0)


def test_objective_dim_mismatch(gen2d):
    with pytest.raises(InvalidArgument):
        gomi_objective(torch.zeros(3, dtype=D), gen2d, torch.zeros(1, 1, 2, dtype=D))
    with pytest.raises(InvalidArgument):
        gomi_objective(torch.zeros(2, dtype=D), gen2d, torch.zeros(1, 1, 2, dtype=D), form="ratio")


@pytest.mark.parametrize("form", ["literal-ratio", "log-surrogate"])
@pytest.mark.parametrize("gen", [cubic_generator(), affine_generator(),
                                 LambdaGenerator(lambda z: torch.sin(3 * z) + 0.5 * z, 1, (1,))])
def test_gradient_matches_finite_differences(gen, form):
    rng = np.random.default_rng(0)
    x = torch.tensor([0.6], dtype=D)
    h = 1e-6
    for z0 in rng.uniform(-2, 2, size=20):
        z = torch.tensor([z0], dtype=D, requires_grad=True)
        g, = torch.autograd.grad(gomi_objective(z, gen, x, form), z)
        f = lambda v: gomi_objective(torch.tensor([v], dtype=D), gen, x, form).item()
        fd = (f(z0 + h) - f(z0 - h)) / (2 * h)
        assert abs(g.item() - fd) <= 1e-4 * max(abs(fd), 1e-3)


def test_exact_fixed_point(gen2d):
    z_star = np.array([0.4, -1.1])
    with torch.no_grad():
        x = gen2d(torch.tensor(z_star, dtype=D).reshape(1, 2))[0].numpy()
    cfg = InversionConfig(iterations=200, objective_form="literal-ratio")
    res = invert_gomi(gen2d, x, cfg, init=z_star)
    assert np.array_equal(res.z_s, z_star)
    assert res.reconstruction_mse == 0.0
    assert res.final_objective == 0.0


def grid_optimum(g, x, lo=-5.0, hi=5.0, step=1e-4):
    z = np.arange(lo, hi + step / 2, step)
    values = (g(z) - x) ** 2 * np.exp(z * z / 2)
    return float(values.min()), float(z[np.argmin(values)])


def test_cubic_matches_grid_search():
    best, _ = grid_optimum(lambda z: z**3 - z, 0.6)
    cfg = InversionConfig(iterations=1000, restarts=8, objective_form="literal-ratio", seed=0)
    res = invert_gomi(cubic_generator(), np.array([0.6]), cfg)
    assert abs(res.final_objective - best) <= 1e-3


def test_forms_share_argmin():
    # literal and log-surrogate objectives on a non-realizable 1-D target
    g = lambda z: np.tanh(z) * 0.5
    z = np.arange(-5, 5, 1e-4)
    f = (g(z) - 0.8) ** 2
    literal = f * np.exp(z * z / 2)
    surrogate = np.log(f + 1e-8) + z * z / 2
    assert abs(z[np.argmin(literal)] - z[np.argmin(surrogate)]) <= 1e-4


def test_restart_selection_is_minimum():
    cfg = InversionConfig(iterations=150, restarts=5, objective_form="literal-ratio", seed=3)
    gen = cubic_generator()
    res = invert_gomi(gen, np.array([0.6]), cfg)
    from dplatent.inversion import _initial_latents
    inits = _initial_latents(1, [0], 5, 3, torch.float32)
    singles = [invert_gomi(gen, np.array([0.6]), cfg, init=z0.numpy()).final_objective for z0 in inits]
    assert res.final_objective == pytest.approx(min(singles), rel=1e-5, abs=1e-12)
    assert res.restart_index == int(np.argmin(singles))


def test_all_restarts_nan():
    gen = LambdaGenerator(lambda z: z * float("nan"), 1, (1,))
    with pytest.raises(InversionFailure) as err:
        invert_gomi(gen, np.array([0.1]), InversionConfig(iterations=3, restarts=2))
    assert err.value.diagnostics["restarts"] == 2


def test_projection_examples():
    z = torch.tensor([[3.0, 4.0], [0.3, 0.4]], dtype=D)
    out = project_ball(z, torch.tensor([2.5, 2.5], dtype=D))
    assert out[0].norm().item() == pytest.approx(2.5, abs=1e-15)
    assert torch.allclose(out[0], z[0] * 0.5)
    assert torch.equal(out[1], z[1])


def test_mi_stays_in_ball(gen2d):
    rng = np.random.default_rng(1)
    cfg = InversionConfig(iterations=200)
    for _ in range(10):
        z0 = rng.standard_normal(2)
        x = rng.uniform(-1, 1, (1, 1, 2))
        res = invert_mi(gen2d, x, cfg, init=z0)
        assert np.linalg.norm(res.z_s) <= np.linalg.norm(z0) + 1e-6


def test_config_validation():
    for bad in (dict(iterations=0), dict(beta1=1.0), dict(beta2=-0.1), dict(learning_rate=0), dict(eps=0),
                dict(objective_form="exact")):
        with pytest.raises(InvalidArgument):
            InversionConfig(**bad).validate()


def realizable(gen, n, seed):
    z = torch.randn(n, gen.latent_dim, generator=torch.Generator().manual_seed(seed), dtype=D)
    with torch.no_grad():
        x = gen(z).numpy()
    return LabeledDataset(to_unit(x).astype(np.float32), np.zeros(n, np.int64), "realizable", 1)


def test_batch_realizable_targets(gen2d):
    d_s = realizable(gen2d, 100, 0)
    latents, manifest = invert_batch(gen2d, d_s, "gomi", InversionConfig(iterations=300))
    assert len(latents) == 100
    assert manifest.stats["failures"] == []
    assert np.median(latents.mse) < 1e-4
    assert manifest.privacy == "private"


def test_batch_empty(gen2d):
    d_s = realizable(gen2d, 1, 0).subset([])
    latents, manifest = invert_batch(gen2d, d_s, "mi", InversionConfig(iterations=5))
    assert len(latents) == 0 and latents.dim == 2
    assert manifest.stats["count"] == 0


def test_batch_deterministic(gen2d, tmp_path):
    d_s = realizable(gen2d, 20, 1)
    cfg = InversionConfig(iterations=50, seed=7)
    a, _ = invert_batch(gen2d, d_s, "gomi", cfg)
    b, _ = invert_batch(gen2d, d_s, "gomi", cfg)
    write_latents(a, tmp_path / "a")
    write_latents(b, tmp_path / "b")
    for name in ("vectors.f32", "labels.i64", "mse.f32", "header.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert read_latents(tmp_path / "a").checksum() == a.checksum()


def test_chunking_does_not_change_results(gen2d):
    d_s = realizable(gen2d, 9, 2)
    a, _ = invert_batch(gen2d, d_s, "gomi", InversionConfig(iterations=40, chunk_size=512))
    b, _ = invert_batch(gen2d, d_s, "gomi", InversionConfig(iterations=40, chunk_size=4))
    assert np.allclose(a.vectors, b.vectors, atol=1e-6)


def test_batch_failure_rate():
    gen = LambdaGenerator(lambda z: z * float("nan"), 2, (1, 1, 2))
    d_s = LabeledDataset(np.full((5, 1, 1, 2), 0.5, np.float32), np.zeros(5, np.int64), "nan", 1)
    with pytest.raises(BatchFailure):
        invert_batch(gen, d_s, "gomi", InversionConfig(iterations=2, restarts=1))


def test_unknown_method(gen2d):
    with pytest.raises(InvalidArgument):
        invert_batch(gen2d, realizable(gen2d, 2, 0), "encoder")
