import copy
import json
import shutil

import pytest

from dplatent import pipeline
from dplatent.data import to_signed
from dplatent.dp import fresh_state, rdp_step, rdp_to_dp
from dplatent.errors import BudgetExhausted, InvalidArgument, ProvenanceError
from dplatent.evaluation import downstream_precision
from dplatent.manifest import load_run, verify_manifest_chain
from dplatent.partition import split_test_private

from conftest import tainted_run


def test_toy_report(toy_run):
    run_dir, report = toy_run
    assert list(report["stages"]) == list(pipeline.STAGES)
    priv = report["privacy"]
    replay = rdp_to_dp(rdp_step(fresh_state(), priv["q"], priv["sigma"], priv["steps"]), priv["delta"])
    assert replay == priv["epsilon"] <= 10.0
    assert json.loads((run_dir / "report.json").read_text())["checksum"] == report["checksum"]


def test_rerun_reuses_cached_stages(toy_run):
    run_dir, report = toy_run
    again = pipeline.run_pipeline("toy", run_dir)
    assert again["checksum"] == report["checksum"]
    # nothing re-read private data: every stage came from the cache
    assert all(not reads for reads in again["access"].values())


def test_fresh_rerun_is_deterministic_and_private_reads_stay_put(toy_run, tmp_path):
    report, d_s_log, latent_log = tainted_run(tmp_path / "again")
    assert report["checksum"] == toy_run[1]["checksum"]
    assert d_s_log.reads_outside(("invert",)) == {}
    assert d_s_log.reads["invert"] > 0
    assert latent_log.reads_outside(("train-dp",)) == {}
    assert set(latent_log.phases()) == {"train-dp/critic-update"}


def test_zero_budget_halts_at_train_dp(toy_run, tmp_path):
    run_dir = tmp_path / "run"
    shutil.copytree(toy_run[0], run_dir)
    cfg = copy.deepcopy(pipeline.TOY_CONFIG)
    cfg["dp_gan"]["epsilon_budget"] = 0.0
    with pytest.raises(BudgetExhausted):
        pipeline.run_pipeline(cfg, run_dir)
    stages = {m.stage for _, m in load_run(run_dir).values()}
    assert {"partition", "train-public", "invert"} <= stages
    assert verify_manifest_chain(run_dir) == []


def test_failed_dp_run_is_not_silently_retried(toy_run, tmp_path):
    run_dir = tmp_path / "run"
    shutil.copytree(toy_run[0], run_dir)
    (dp_dir,) = [p for p in run_dir.iterdir() if p.name.startswith("train-dp-")]
    out = tmp_path / "retry"
    out.mkdir()
    (out / "failure.json").write_text("{}")
    cfg = pipeline._dataclass_from(pipeline.DpGanConfig, pipeline.TOY_CONFIG["dp_gan"])
    with pytest.raises(ProvenanceError):
        pipeline.stage_train_dp(next(run_dir.glob("invert-*")), out, cfg)


def test_real_data_ceiling(toy_run):
    run_dir, report = toy_run
    split, test, _ = pipeline._load_split(next(run_dir.glob("partition-*")))
    private_test = split_test_private(test, split.private_classes)
    clf = pipeline._dataclass_from(pipeline.ClassifierConfig, pipeline.TOY_CONFIG["classifier"])
    ceiling = downstream_precision(to_signed(split.d_s.images), split.d_s.labels, private_test,
                                   split.private_classes, clf)
    assert ceiling.macro >= report["scores"]["precision_macro"] - 0.02


def test_unknown_config_key():
    cfg = copy.deepcopy(pipeline.TOY_CONFIG)
    cfg["dp_gan"]["sigma"] = 1.0
    with pytest.raises(InvalidArgument):
        pipeline.run_pipeline(cfg, "/nonexistent/should-not-be-created")


def test_yaml_config(tmp_path):
    import yaml

    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"dataset": "toy", "preset": "toy", "dp_gan": {"epsilon_budget": 5.0}}))
    cfg = pipeline.load_config(path)
    assert cfg["dp_gan"]["epsilon_budget"] == 5.0
    path.write_text("- just\n- a list\n")
    with pytest.raises(InvalidArgument):
        pipeline.load_config(path)


def test_cache_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(pipeline.CACHE_ENV, str(tmp_path))
    assert pipeline.cache_root() == tmp_path
