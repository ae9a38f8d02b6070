"""Labeling / public / private split of a labeled training set."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .errors import EmptyResultError, InvalidArgument


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    d_l: LabeledDataset
    d_p: LabeledDataset
    d_s: LabeledDataset
    public_classes: frozenset[int]
    private_classes: frozenset[int]
    seed: int
    label_fraction: float
    stratified: bool = False
    source_name: str = ""

    def index_lists(self) -> dict[str, np.ndarray]:
        return {"d_l": np.sort(self.d_l.indices), "d_p": np.sort(self.d_p.indices),
                "d_s": np.sort(self.d_s.indices)}

    def manifest(self) -> dict:
        lists = {k: _index_text(v) for k, v in self.index_lists().items()}
        return {
            "dataset": self.source_name,
            "seed": self.seed,
            "label_fraction": self.label_fraction,
            "stratified": self.stratified,
            "public_classes": sorted(self.public_classes),
            "private_classes": sorted(self.private_classes),
            "counts": {"d_l": len(self.d_l), "d_p": len(self.d_p), "d_s": len(self.d_s)},
            "checksums": {k: hashlib.sha256(t.encode()).hexdigest() for k, t in lists.items()},
        }


def _index_text(idx: np.ndarray) -> str:
    return "".join(f"{int(i)}\n" for i in idx)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def partition_dataset(source: LabeledDataset, public_classes, label_fraction: float = 1 / 3,
                      seed: int = 0, stratified: bool = False) -> DatasetSplit:
    """Draw ``D_l`` at random, then route the remainder to ``D_p``/``D_s`` by class.

    With ``stratified=True`` the labeling set keeps class proportions (largest
    remainder allocation, so its size still equals ``round(fraction * n)``).
    """
    if not 0.0 < label_fraction < 1.0:
        raise InvalidArgument(f"label_fraction must lie in (0, 1), got {label_fraction}")
    universe = frozenset(range(source.num_classes))
    public = source.class_ids(public_classes)
    if not public <= universe:
        raise InvalidArgument(f"public classes {sorted(public - universe)} are outside the class universe")
    if not public or public == universe:
        raise InvalidArgument("public_classes must be a nonempty strict subset of the class universe")
    private = universe - public

    n = len(source)
    n_l = _round_half_up(label_fraction * n)
    rng = np.random.default_rng(seed)
    if stratified:
        chosen = _stratified_draw(source.labels, n_l, rng)
    else:
        chosen = rng.choice(n, size=n_l, replace=False)
    in_l = np.zeros(n, dtype=bool)
    in_l[chosen] = True
    is_public = np.isin(source.labels, sorted(public))

    d_l = source.subset(np.flatnonzero(in_l), f"{source.name}/d_l")
    d_p = source.subset(np.flatnonzero(~in_l & is_public), f"{source.name}/d_p")
    d_s = source.subset(np.flatnonzero(~in_l & ~is_public), f"{source.name}/d_s")
    return DatasetSplit(d_l, d_p, d_s, public, private, seed, label_fraction, stratified, source.name)


def _stratified_draw(labels: np.ndarray, n_l: int, rng: np.random.Generator) -> np.ndarray:
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * n_l / len(labels)
    take = np.floor(quota).astype(int)
    short = n_l - take.sum()
    take[np.argsort(-(quota - take), kind="stable")[:short]] += 1
    picks = [rng.choice(np.flatnonzero(labels == c), size=k, replace=False)
             for c, k in zip(classes, take)]
    return np.concatenate(picks) if picks else np.empty(0, dtype=np.int64)


def split_test_private(test: LabeledDataset, private_classes) -> LabeledDataset:
    private = test.class_ids(private_classes)
    if not private:
        raise InvalidArgument("private_classes must be nonempty")
    keep = np.flatnonzero(np.isin(test.labels, sorted(private)))
    if keep.size == 0:
        raise EmptyResultError("no test example carries a private label; check the class preset")
    return test.subset(keep, f"{test.name}/private")


def write_split(split: DatasetSplit, out_dir: str | Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key, idx in split.index_lists().items():
        p = out_dir / f"{key}.idx"
        p.write_text(_index_text(idx))
        paths[key] = p
    p = out_dir / "split.json"
    p.write_text(json.dumps(split.manifest(), indent=2, sort_keys=True) + "\n")
    paths["split"] = p
    return paths


def read_split(split_dir: str | Path, source: LabeledDataset) -> DatasetSplit:
    split_dir = Path(split_dir)
    meta = json.loads((split_dir / "split.json").read_text())
    parts = {}
    for key in ("d_l", "d_p", "d_s"):
        text = (split_dir / f"{key}.idx").read_text()
        if hashlib.sha256(text.encode()).hexdigest() != meta["checksums"][key]:
            raise InvalidArgument(f"{key}.idx does not match the split checksum")
        idx = np.array([int(s) for s in text.split()], dtype=np.int64)
        parts[key] = source.subset(idx, f"{source.name}/{key}")
    return DatasetSplit(parts["d_l"], parts["d_p"], parts["d_s"],
                        frozenset(meta["public_classes"]), frozenset(meta["private_classes"]),
                        meta["seed"], meta["label_fraction"], meta["stratified"], meta["dataset"])
