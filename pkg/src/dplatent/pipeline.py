"""Stage runners and the end-to-end pipeline.

Each stage reads its inputs from upstream stage directories, writes its
artifacts plus ``manifest.json`` into its own directory, and returns the
manifest. ``run_pipeline`` chains the stages under one run directory; stage
directories are keyed by a hash of (stage config, parent manifest ids), so an
identical stage is reused instead of recomputed.
"""
from __future__ import annotations

import copy
import functools
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import audit
from .audit import AccessLog
from .data import PRESETS, AuditedDataset, resolve_dataset, to_signed
from .errors import InvalidArgument, ProvenanceError, TrainingFailure
from .evaluation import ClassifierConfig, FeatureBackbone, score_release, train_label_classifier
from .gan import GanConfig, train_public_gan
from .inversion import InversionConfig, invert_batch
from .latent_gan import DpGanConfig, train_dp_latent_gan
from .latents import read_latents, write_latents
from .manifest import RunManifest, canonical_json, config_hash, file_checksum, privacy_record
from .nets import load_checkpoint, parameter_checksum, save_checkpoint
from .partition import partition_dataset, read_split, split_test_private, write_split
from .synthesis import read_archive, synthesize, write_archive

log = logging.getLogger(__name__)

CACHE_ENV = "DPLATENT_CACHE"
STAGES = ("partition", "train-public", "invert", "train-dp", "synthesize", "evaluate")

TOY_CONFIG = {
    "dataset": "toy",
    "preset": "toy",
    "label_fraction": 1 / 3,
    "stratified": False,
    "seed": 0,
    "public_gan": {"latent_dim": 8, "steps": 1500, "critic_steps": 3, "batch_size": 64, "lr_g": 1e-3,
                   "lr_d": 1e-3, "clip_value": 0.1, "hidden": 32, "depth": 3},
    "inversion": {"method": "gomi", "iterations": 300, "restarts": 4},
    "dp_gan": {"inner_latent_dim": 2, "hidden": 32, "batch_size": 64, "lr_g": 1e-3, "lr_d": 1e-3,
               "noise_multiplier": None, "clip_norm": 1.0, "epsilon_budget": 10.0, "delta": 1e-5,
               "max_steps": 1500, "noise_seed": 0, "debug": True},
    "synthesis": {"n": 10_000},
    "classifier": {"hidden": 32, "steps": 400, "batch_size": 128},
}


def cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "dplatent"))


def load_config(path_or_name) -> dict:
    """A YAML/JSON config file, or the name of a built-in config (``toy``)."""
    if isinstance(path_or_name, dict):
        return copy.deepcopy(path_or_name)
    if path_or_name == "toy":
        return copy.deepcopy(TOY_CONFIG)
    import yaml

    text = Path(path_or_name).read_text()
    cfg = yaml.safe_load(text)
    if not isinstance(cfg, dict):
        raise InvalidArgument(f"config {path_or_name} is not a mapping")
    return cfg


def _dataclass_from(cls, values: dict | None, **overrides):
    values = dict(values or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise InvalidArgument(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


@functools.lru_cache(maxsize=8)
def _dataset(spec: str):
    return resolve_dataset(spec)


def _dataset_spec(spec: str) -> str:
    if spec == "toy" or spec.startswith("toy:"):
        return spec
    return str(Path(spec).resolve())


def _stage_key(stage: str, config, parents: list[str]) -> str:
    return config_hash({"stage": stage, "config": config, "parents": sorted(parents)})


def _finish(manifest: RunManifest, key: str, parents: list[str], out_dir: Path, outputs) -> RunManifest:
    manifest.config_hash = key
    manifest.parents = list(parents)
    manifest.add_outputs(out_dir, *outputs)
    manifest.write(out_dir)
    return manifest


def _load_split(split_dir: Path):
    m = RunManifest.read(split_dir)
    spec = m.stats["dataset_spec"]
    train, test = _dataset(spec)
    return read_split(split_dir, train), test, m


# --- stages -----------------------------------------------------------------

def stage_partition(dataset: str, out_dir, public_classes=None, preset: str | None = None,
                    label_fraction: float = 1 / 3, seed: int = 0, stratified: bool = False) -> RunManifest:
    spec = _dataset_spec(dataset)
    train, test = _dataset(spec)
    if public_classes is None:
        if preset is None:
            raise InvalidArgument("give public classes or a class preset")
        public_classes = sorted(PRESETS[preset].public)
    public = sorted(train.class_ids(public_classes))
    split = partition_dataset(train, public, label_fraction, seed, stratified)
    out_dir = Path(out_dir)
    write_split(split, out_dir)
    cfg = {"dataset": spec, "public_classes": public, "label_fraction": label_fraction,
           "seed": seed, "stratified": stratified}
    manifest = RunManifest(stage="partition", config_hash="", inputs={"dataset": train.checksum()},
                           privacy="private", seeds={"partition": seed},
                           stats={"dataset_spec": spec, **split.manifest(),
                                  "test_count": len(test) if test is not None else 0})
    return _finish(manifest, _stage_key("partition", cfg, []), [], out_dir,
                   ["d_l.idx", "d_p.idx", "d_s.idx", "split.json"])


def stage_train_public(split_dir, out_dir, gan_config: GanConfig) -> RunManifest:
    split, _, parent = _load_split(Path(split_dir))
    gen, disc, manifest = train_public_gan(split.d_p, gan_config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    key = _stage_key("train-public", asdict(gan_config), [parent.id])
    save_checkpoint(out_dir / "generator.pt", gen, "public-generator", key)
    save_checkpoint(out_dir / "critic.pt", disc, "public-critic", key)
    return _finish(manifest, key, [parent.id], out_dir, ["generator.pt", "critic.pt"])


def stage_invert(public_dir, split_dir, out_dir, method: str, inv_config: InversionConfig,
                 d_s_log: AccessLog | None = None) -> RunManifest:
    split, _, split_m = _load_split(Path(split_dir))
    gen, _ = load_checkpoint(Path(public_dir) / "generator.pt")
    gen.freeze()
    public_m = RunManifest.read(public_dir)
    d_s = AuditedDataset(split.d_s, d_s_log)
    with audit.phase("invert"):
        latents, manifest = invert_batch(gen, d_s, method, inv_config)
    out_dir = Path(out_dir)
    written = write_latents(latents, out_dir)
    parents = [public_m.id, split_m.id]
    key = _stage_key("invert", {"method": method, **asdict(inv_config)}, parents)
    return _finish(manifest, key, parents, out_dir, written)


def stage_train_dp(latents_dir, out_dir, dp_config: DpGanConfig,
                   latents_log: AccessLog | None = None) -> RunManifest:
    latents_dir, out_dir = Path(latents_dir), Path(out_dir)
    parent = RunManifest.read(latents_dir)
    key = _stage_key("train-dp", asdict(dp_config), [parent.id])
    failure = out_dir / "failure.json"
    if failure.exists():
        raise ProvenanceError(f"{out_dir} records a failed DP run whose privacy is already spent; "
                              "remove it explicitly before retraining")
    out_dir.mkdir(parents=True, exist_ok=True)
    audit_log = out_dir / "accountant.jsonl"
    if audit_log.exists():
        audit_log.unlink()
    latents = AuditedDataset(read_latents(latents_dir), latents_log)
    try:
        with audit.phase("train-dp"):
            gen, state, manifest = train_dp_latent_gan(latents, dp_config, audit_log)
    except TrainingFailure as exc:
        if exc.accountant is not None:
            q = min(1.0, dp_config.batch_size / len(latents))
            from .dp import rdp_to_dp
            eps = rdp_to_dp(exc.accountant, dp_config.delta)
            sigma = exc.accountant.history[-1][1] if exc.accountant.history else dp_config.noise_multiplier
            record = privacy_record(exc.accountant, dp_config.delta, eps, sigma=sigma,
                                    clip_norm=dp_config.clip_norm, q=q, epsilon_budget=dp_config.epsilon_budget)
            failure.write_text(json.dumps({"error": str(exc), "privacy_spent": record}, indent=2, default=str))
        raise
    save_checkpoint(out_dir / "generator.pt", gen, "dp-latent-generator", key)
    outputs = ["generator.pt"] + (["accountant.jsonl"] if audit_log.exists() else [])
    return _finish(manifest, key, [parent.id], out_dir, outputs)


def stage_synthesize(dp_dir, public_dir, out_dir, n: int, seed: int, quantize: bool = False) -> RunManifest:
    dp_dir, public_dir, out_dir = Path(dp_dir), Path(public_dir), Path(out_dir)
    upstream = RunManifest.read(dp_dir) if (dp_dir / "manifest.json").exists() else None
    g_ds, _ = load_checkpoint(dp_dir / "generator.pt")
    g_p, _ = load_checkpoint(public_dir / "generator.pt")
    public_m = RunManifest.read(public_dir)
    with audit.phase("synthesize"):
        data, manifest = synthesize(g_ds.freeze(), g_p.freeze(), n, seed, upstream)
    written = write_archive(data, out_dir, quantize)
    parents = [upstream.id, public_m.id]
    key = _stage_key("synthesize", {"n": n, "seed": seed, "quantize": quantize}, parents)
    return _finish(manifest, key, parents, out_dir, written)


def stage_evaluate(synthetic_dir, split_dir, out_dir, clf_config: ClassifierConfig,
                   backbone_path=None) -> tuple[RunManifest, dict]:
    synthetic_dir, out_dir = Path(synthetic_dir), Path(out_dir)
    syn_m = RunManifest.read(synthetic_dir)
    split, test, split_m = _load_split(Path(split_dir))
    if test is None:
        raise InvalidArgument("dataset has no test split to evaluate against")
    private_test = split_test_private(test, split.private_classes)
    data = read_archive(synthetic_dir)
    with audit.phase("evaluate"):
        if backbone_path:
            backbone = torch.load(backbone_path, map_location="cpu", weights_only=False)
        else:
            backbone = train_label_classifier(split.d_l, clf_config)
        scores = score_release(backbone, data.images, private_test, split.private_classes, clf_config)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "scores": scores,
        "privacy": syn_m.privacy,
        "private_classes": sorted(split.private_classes),
        "lineage": {"synthesize": syn_m.id, "partition": split_m.id},
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
    parents = [syn_m.id, split_m.id]
    key = _stage_key("evaluate", {"classifier": asdict(clf_config), "backbone": str(backbone_path)}, parents)
    manifest = RunManifest(stage="evaluate", config_hash=key, inputs={"synthetic": syn_m.stats["archive_checksum"]},
                           privacy=copy.deepcopy(syn_m.privacy), seeds={"classifier": clf_config.seed},
                           stats={"backbone_checksum": scores["backbone"]["checksum"]})
    return _finish(manifest, key, parents, out_dir, ["report.json"]), report


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(type(obj).__name__)


# --- pipeline -----------------------------------------------------------------

def _cached(run_dir: Path, stage: str, key: str, runner):
    out_dir = run_dir / f"{stage}-{key[:12]}"
    if (out_dir / "manifest.json").exists():
        m = RunManifest.read(out_dir)
        if all(file_checksum(out_dir / name) == digest for name, digest in m.outputs.items()):
            log.info("reusing %s", out_dir.name)
            return out_dir, m
    out_dir.mkdir(parents=True, exist_ok=True)
    log.info("running %s", out_dir.name)
    return out_dir, runner(out_dir)


def run_pipeline(config, run_dir=None) -> dict:
    """partition -> train-public -> invert -> train-dp -> synthesize -> evaluate.

    Returns the final report. Stage failures propagate after the completed
    stages' artifacts are on disk.
    """
    cfg = load_config(config)
    run_dir = Path(run_dir) if run_dir else cache_root() / "runs" / config_hash(cfg)[:16]
    run_dir.mkdir(parents=True, exist_ok=True)
    seed = int(cfg.get("seed", 0))
    logs = {"d_s": AccessLog(), "latents": AccessLog()}

    gan_cfg = _dataclass_from(GanConfig, cfg.get("public_gan"), seed=cfg.get("public_gan", {}).get("seed", seed))
    inv_values = dict(cfg.get("inversion") or {})
    method = inv_values.pop("method", "gomi")
    inv_cfg = _dataclass_from(InversionConfig, inv_values, seed=inv_values.get("seed", seed))
    dp_values = dict(cfg.get("dp_gan") or {})
    if dp_values.get("epsilon_budget") in ("inf", "infinity", float("inf")):
        dp_values["epsilon_budget"] = math.inf
    dp_cfg = _dataclass_from(DpGanConfig, dp_values, seed=dp_values.get("seed", seed))
    syn = cfg.get("synthesis") or {}
    clf_cfg = _dataclass_from(ClassifierConfig, cfg.get("classifier"), seed=cfg.get("classifier", {}).get("seed", seed))

    spec = _dataset_spec(cfg["dataset"])
    train, _ = _dataset(spec)
    public = cfg.get("public_classes")
    if public is None:
        public = sorted(PRESETS[cfg["preset"]].public)
    public = sorted(train.class_ids(public))
    part_cfg = {"dataset": spec, "public_classes": public, "label_fraction": cfg.get("label_fraction", 1 / 3),
                "seed": cfg.get("partition_seed", seed), "stratified": cfg.get("stratified", False)}

    stages = {}
    key = _stage_key("partition", part_cfg, [])
    split_dir, split_m = _cached(run_dir, "partition", key, lambda d: stage_partition(
        spec, d, public, None, part_cfg["label_fraction"], part_cfg["seed"], part_cfg["stratified"]))
    stages["partition"] = split_m.id

    key = _stage_key("train-public", asdict(gan_cfg), [split_m.id])
    public_dir, public_m = _cached(run_dir, "train-public", key,
                                   lambda d: stage_train_public(split_dir, d, gan_cfg))
    stages["train-public"] = public_m.id

    key = _stage_key("invert", {"method": method, **asdict(inv_cfg)}, [public_m.id, split_m.id])
    inv_dir, inv_m = _cached(run_dir, "invert", key, lambda d: stage_invert(
        public_dir, split_dir, d, method, inv_cfg, logs["d_s"]))
    stages["invert"] = inv_m.id

    key = _stage_key("train-dp", asdict(dp_cfg), [inv_m.id])
    dp_dir, dp_m = _cached(run_dir, "train-dp", key,
                           lambda d: stage_train_dp(inv_dir, d, dp_cfg, logs["latents"]))
    stages["train-dp"] = dp_m.id

    n, syn_seed = int(syn.get("n", 10_000)), int(syn.get("seed", seed))
    quantize = bool(syn.get("quantize", False))
    key = _stage_key("synthesize", {"n": n, "seed": syn_seed, "quantize": quantize}, [dp_m.id, public_m.id])
    syn_dir, syn_m = _cached(run_dir, "synthesize", key,
                             lambda d: stage_synthesize(dp_dir, public_dir, d, n, syn_seed, quantize))
    stages["synthesize"] = syn_m.id

    key = _stage_key("evaluate", {"classifier": asdict(clf_cfg), "backbone": "None"}, [syn_m.id, split_m.id])
    eval_dir, eval_m = _cached(run_dir, "evaluate", key,
                               lambda d: stage_evaluate(syn_dir, split_dir, d, clf_cfg)[0])
    stages["evaluate"] = eval_m.id
    stage_report = json.loads((eval_dir / "report.json").read_text())

    report = {
        "stages": stages,
        "scores": stage_report["scores"],
        "privacy": {k: v for k, v in dp_m.privacy.items() if k != "accountant"},
        "inversion": {"method": method, "mse_mean": inv_m.stats["mse_mean"], "count": inv_m.stats["count"]},
    }
    report["checksum"] = hashlib.sha256(canonical_json(report).encode()).hexdigest()
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    # access logs only cover stages executed in this call (cached stages read nothing)
    report["access"] = {name: dict(lg.reads) for name, lg in logs.items()}
    return report
