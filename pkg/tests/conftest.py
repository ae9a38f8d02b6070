import dataclasses

import numpy as np
import pytest
import torch

from dplatent.data import LabeledDataset, make_toy_mixture
from dplatent.nets import Generator, LambdaGenerator


def toy_generator_2d(seed: int = 0) -> Generator:
    """Small fixed MLP from a 2-D latent to a 2-D "image"."""
    torch.manual_seed(seed)
    gen = Generator(2, (1, 1, 2), {"kind": "mlp", "hidden": 16, "depth": 3, "head": "tanh"})
    return gen.double().freeze()


def cubic_generator() -> LambdaGenerator:
    return LambdaGenerator(lambda z: z**3 - z, 1, (1,), "cubic")


def blank_dataset(labels, num_classes, shape=(1, 1, 2), name="blank") -> LabeledDataset:
    labels = np.asarray(labels, dtype=np.int64)
    return LabeledDataset(np.full((len(labels), *shape), 0.5, np.float32), labels, name, num_classes)


@pytest.fixture(scope="session")
def toy_source():
    return make_toy_mixture(1200, 600, seed=0)


@pytest.fixture
def gen2d():
    return toy_generator_2d()


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """One full toy pipeline run shared by the pipeline, manifest and audit tests."""
    from dplatent.pipeline import run_pipeline

    run_dir = tmp_path_factory.mktemp("toy-run")
    report = run_pipeline("toy", run_dir)
    return run_dir, report


def tainted_run(run_dir, config="toy"):
    """Run the pipeline with every D_s and latent read logged, wherever it happens.

    Returns (report, d_s_log, latent_log).
    """
    from dplatent import pipeline
    from dplatent.audit import AccessLog
    from dplatent.data import AuditedDataset

    d_s_log, latent_log = AccessLog(), AccessLog()
    real_read_split, real_read_latents = pipeline.read_split, pipeline.read_latents

    def read_split(*a, **kw):
        split = real_read_split(*a, **kw)
        return dataclasses.replace(split, d_s=AuditedDataset(split.d_s, d_s_log))

    def read_latents(*a, **kw):
        return AuditedDataset(real_read_latents(*a, **kw), latent_log)

    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(pipeline, "read_split", read_split)
        mp.setattr(pipeline, "read_latents", read_latents)
        report = pipeline.run_pipeline(config, run_dir)
    return report, d_s_log, latent_log


ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, status, detail: str, seconds: float) -> None:
    """status is True/False for a checked criterion or a string such as "N/A"."""
    word = status if isinstance(status, str) else ("PASS" if status else "FAIL")
    ACCEPTANCE_LINES.append(f"{word:4s}  {criterion}: {detail} [{seconds:.1f}s]")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
