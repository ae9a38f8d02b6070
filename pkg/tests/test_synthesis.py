import numpy as np
import pytest
import torch

from dplatent.dp import fresh_state, rdp_step, rdp_to_dp
from dplatent.errors import InvalidArgument, ProvenanceError
from dplatent.manifest import RunManifest, privacy_record
from dplatent.nets import Generator, identity_generator
from dplatent.synthesis import read_archive, synthesize, write_archive


def public_gen(d=3):
    torch.manual_seed(0)
    return Generator(d, (2, 2, 1), {"kind": "mlp", "hidden": 16, "depth": 2, "head": "tanh"}).freeze()


def dp_manifest():
    state = rdp_step(fresh_state(), 0.05, 1.2, 300)
    record = privacy_record(state, 1e-5, rdp_to_dp(state, 1e-5), sigma=1.2, clip_norm=1.0, q=0.05,
                            epsilon_budget=10.0)
    return RunManifest(stage="train-dp", config_hash="c" * 64, inputs={}, privacy=record, seeds={"train": 0})


def test_empty_release():
    data, m = synthesize(identity_generator(3), public_gen(), 0, 0, dp_manifest())
    assert data.images.shape == (0, 2, 2, 1)
    assert m.stats["count"] == 0


def test_identity_stub_reproduces_prior_sampling():
    g_p = public_gen()
    data, _ = synthesize(identity_generator(3), g_p, 1000, 1, dp_manifest())
    with torch.no_grad():
        direct = g_p(torch.randn(1000, 3, generator=torch.Generator().manual_seed(99))).numpy()
    assert abs(data.images.mean() - direct.mean()) < 0.05


def test_privacy_record_carried_unchanged():
    upstream = dp_manifest()
    before = upstream.to_dict()["privacy"]
    _, m = synthesize(identity_generator(3), public_gen(), 50, 0, upstream)
    assert m.privacy == before
    assert m.privacy is not upstream.privacy
    assert m.privacy["epsilon"] == upstream.privacy["epsilon"]
    assert m.parents == [upstream.id]


def test_missing_upstream():
    with pytest.raises(ProvenanceError):
        synthesize(identity_generator(3), public_gen(), 5, 0, None)
    public_only = RunManifest(stage="train-public", config_hash="x", inputs={}, privacy="public", seeds={})
    with pytest.raises(ProvenanceError):
        synthesize(identity_generator(3), public_gen(), 5, 0, public_only)


def test_dimension_mismatch():
    with pytest.raises(InvalidArgument):
        synthesize(identity_generator(4), public_gen(3), 5, 0, dp_manifest())


def test_range_and_determinism(tmp_path):
    g_ds = Generator(2, (3,), {"kind": "mlp", "hidden": 8, "depth": 2, "head": "linear"}).freeze()
    a, _ = synthesize(g_ds, public_gen(), 3000, 5, dp_manifest())
    b, _ = synthesize(g_ds, public_gen(), 3000, 5, dp_manifest())
    rebatched, _ = synthesize(g_ds, public_gen(), 3000, 5, dp_manifest(), batch_size=700)
    assert np.allclose(rebatched.images, a.images, atol=1e-6)
    assert a.images.min() >= -1 and a.images.max() <= 1
    write_archive(a, tmp_path / "a")
    write_archive(b, tmp_path / "b")
    assert (tmp_path / "a" / "images.f32").read_bytes() == (tmp_path / "b" / "images.f32").read_bytes()
    c, _ = synthesize(g_ds, public_gen(), 3000, 6, dp_manifest())
    assert c.checksum() != a.checksum()


def test_archive_roundtrip(tmp_path):
    data, _ = synthesize(identity_generator(3), public_gen(), 40, 0, dp_manifest())
    write_archive(data, tmp_path / "f")
    assert np.array_equal(read_archive(tmp_path / "f").images, data.images)
    write_archive(data, tmp_path / "q", quantize=True)
    back = read_archive(tmp_path / "q").images
    assert np.max(np.abs(back - data.images)) <= 1 / 127.5
