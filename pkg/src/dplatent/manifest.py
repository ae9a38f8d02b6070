"""Run manifests: per-stage provenance records and chain verification."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ManifestFormatError

MANIFEST_NAME = "manifest.json"
POST_PROCESSING = ("synthesize", "evaluate")
PRIVATE_TRAINING = ("train-dp",)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def config_hash(config) -> str:
    if hasattr(config, "__dataclass_fields__"):
        config = asdict(config)
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def file_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    stage: str
    config_hash: str
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    # "public", "private" (unreleasable data, no DP), or a DP record
    privacy: dict | str = "public"
    seeds: dict = field(default_factory=dict)
    parents: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=lambda: {"created": time.time()})

    @property
    def id(self) -> str:
        return f"{self.stage}-{self.config_hash[:12]}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["id"] = self.id
        return d

    def add_outputs(self, stage_dir: str | Path, *names: str) -> None:
        for name in names:
            self.outputs[name] = file_checksum(Path(stage_dir) / name)

    def write(self, stage_dir: str | Path) -> Path:
        path = Path(stage_dir) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            d = json.loads(path.read_text())
            d.pop("id", None)
            return cls(**d)
        except (OSError, ValueError, TypeError) as exc:
            raise ManifestFormatError(f"unreadable manifest {path}: {exc}") from exc


def privacy_record(accountant_state, delta: float, epsilon: float, *, sigma: float, clip_norm: float,
                   q: float, epsilon_budget: float) -> dict:
    from .dp.rdp import ADJACENCY, CONVERSION

    return {
        "epsilon": epsilon, "delta": delta, "sigma": sigma, "clip_norm": clip_norm, "q": q,
        "steps": accountant_state.steps_taken, "epsilon_budget": epsilon_budget,
        "accountant": accountant_state.to_dict(), "conversion": CONVERSION, "adjacency": ADJACENCY,
    }


def replay_epsilon(record: dict) -> float:
    """Recompute epsilon from the recorded composition history."""
    from .dp.rdp import AccountantState, rdp_to_dp

    if record.get("sigma") == 0:
        return math.inf
    state = AccountantState.from_dict(record["accountant"])
    if state.steps_taken != record["steps"]:
        raise ValueError("step count disagrees with history")
    return rdp_to_dp(state, record["delta"])


def load_run(run_dir: str | Path) -> dict[str, tuple[Path, RunManifest]]:
    """All manifests under ``run_dir`` keyed by manifest id."""
    found = {}
    for path in sorted(Path(run_dir).rglob(MANIFEST_NAME)):
        m = RunManifest.read(path)
        found[m.id] = (path.parent, m)
    return found


def _records_equal(a, b) -> bool:
    return canonical_json(a) == canonical_json(b)


def verify_manifest_chain(run_dir: str | Path) -> list[str]:
    """Return a list of violations; an empty list means the chain is intact."""
    run = load_run(run_dir)
    if not run:
        raise ManifestFormatError(f"no manifest found under {run_dir}")
    violations = []

    for mid, (stage_dir, m) in run.items():
        for parent in m.parents:
            if parent not in run:
                violations.append(f"{mid}: parent {parent} missing from run")
        for name, digest in m.outputs.items():
            p = stage_dir / name
            if not p.exists():
                violations.append(f"{mid}: output {name} missing")
            elif file_checksum(p) != digest:
                violations.append(f"{mid}: checksum mismatch for output {name}")
        if isinstance(m.privacy, dict):
            try:
                eps = replay_epsilon(m.privacy)
            except (KeyError, ValueError, TypeError) as exc:
                violations.append(f"{mid}: accountant replay failed ({exc})")
            else:
                if not _close(eps, m.privacy["epsilon"]):
                    violations.append(f"{mid}: accountant replay gives epsilon {eps!r}, "
                                      f"manifest reports {m.privacy['epsilon']!r}")
                budget = m.privacy.get("epsilon_budget")
                if budget is not None and eps > budget:
                    violations.append(f"{mid}: epsilon {eps!r} exceeds budget {budget!r}")

    # lineage must be acyclic
    state = {}

    def visit(node, trail):
        if state.get(node) == "done" or node not in run:
            return
        if state.get(node) == "open":
            violations.append("lineage cycle: " + " -> ".join(trail + [node]))
            return
        state[node] = "open"
        for parent in run[node][1].parents:
            visit(parent, trail + [node])
        state[node] = "done"

    for mid in run:
        visit(mid, [])
    if any(v.startswith("lineage cycle") for v in violations):
        return violations

    for mid, (_, m) in run.items():
        if m.stage not in POST_PROCESSING:
            continue
        upstream = _nearest_private_record(mid, run)
        if upstream is None:
            violations.append(f"{mid}: post-processing stage without a DP-trained ancestor")
        elif not _records_equal(upstream, m.privacy):
            violations.append(f"{mid}: privacy record mutated in post-processing stage")
    return violations


def _nearest_private_record(mid, run):
    queue, seen = list(run[mid][1].parents), set()
    while queue:
        node = queue.pop(0)
        if node in seen or node not in run:
            continue
        seen.add(node)
        m = run[node][1]
        if m.stage in PRIVATE_TRAINING:
            return m.privacy
        queue.extend(m.parents)
    return None


def _close(a: float, b: float) -> bool:
    if math.isinf(a) or math.isinf(b):
        return a == b
    return abs(a - b) <= 1e-12 * max(1.0, abs(b))
