"""Labeling classifier, feature backbone, and the scoring protocol for releases."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.metrics import precision_score
from torch import nn

from .data import LabeledDataset, to_signed
from .errors import DegenerateTrainingError, InvalidArgument
from .metrics import GaussianSummary, fid, inception_score
from .nets import parameter_checksum, torch_generator

log = logging.getLogger(__name__)


@dataclass
class ClassifierConfig:
    hidden: int = 64
    width: int = 32
    steps: int = 1000
    batch_size: int = 128
    lr: float = 1e-3
    holdout_fraction: float = 0.1
    seed: int = 0


class FeatureBackbone(nn.Module):
    """K-way classifier whose penultimate activations serve as FID features."""

    def __init__(self, input_shape, num_classes: int, config: ClassifierConfig):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        h, w, c = self.input_shape
        if h >= 8 and w >= 8:
            self.kind = "cnn"
            k = config.width
            self.features_net = nn.Sequential(
                nn.Conv2d(c, k, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
                nn.Conv2d(k, 2 * k, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
                nn.Flatten(), nn.Linear(2 * k * (h // 4) * (w // 4), config.hidden), nn.ReLU(),
            )
        else:
            self.kind = "mlp"
            self.features_net = nn.Sequential(
                nn.Flatten(), nn.Linear(h * w * c, config.hidden), nn.ReLU(),
                nn.Linear(config.hidden, config.hidden), nn.ReLU(),
            )
        self.head = nn.Linear(config.hidden, num_classes)
        self.arch_id = f"{self.kind}-h{config.hidden}-k{num_classes}"
        self.provenance: dict = {}

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "cnn":
            x = x.permute(0, 3, 1, 2)
        return self.features_net(x)

    def forward(self, x):
        return self.head(self.features(x))

    @torch.no_grad()
    def predict(self, images_signed: np.ndarray, batch_size: int = 2048):
        """(logits, features) for images already in [-1, 1]."""
        self.eval()
        logits, feats = [], []
        for start in range(0, len(images_signed), batch_size):
            x = torch.as_tensor(images_signed[start:start + batch_size], dtype=torch.float32)
            f = self.features(x)
            feats.append(f.numpy())
            logits.append(self.head(f).numpy())
        if not logits:
            m = self.head.in_features
            return np.zeros((0, self.num_classes)), np.zeros((0, m))
        return np.concatenate(logits).astype(np.float64), np.concatenate(feats).astype(np.float64)

    def checksum(self) -> str:
        return parameter_checksum(self)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _fit(model, images_signed, labels, config: ClassifierConfig):
    x_all = torch.as_tensor(images_signed, dtype=torch.float32)
    y_all = torch.as_tensor(labels, dtype=torch.long)
    rng = torch_generator(config.seed + 11)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    model.train()
    for _ in range(config.steps):
        idx = torch.randint(0, len(y_all), (min(config.batch_size, len(y_all)),), generator=rng)
        loss = nn.functional.cross_entropy(model(x_all[idx]), y_all[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


def train_label_classifier(d_l: LabeledDataset, config: ClassifierConfig | None = None) -> FeatureBackbone:
    """Train the labeling classifier on ``D_l``; held-out accuracy goes into ``provenance``."""
    config = config or ClassifierConfig()
    if len(d_l) == 0:
        raise InvalidArgument("labeling set is empty")
    missing = sorted(set(range(d_l.num_classes)) - set(np.unique(d_l.labels).tolist()))
    if missing:
        raise InvalidArgument(f"labeling set lacks classes {missing}")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(d_l))
    n_hold = int(round(config.holdout_fraction * len(d_l)))
    hold, train = order[:n_hold], order[n_hold:]
    x = to_signed(d_l.images)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = FeatureBackbone(d_l.image_shape, d_l.num_classes, config)
    _fit(model, x[train], d_l.labels[train], config)
    acc = None
    if n_hold:
        logits, _ = model.predict(x[hold])
        acc = float((logits.argmax(axis=1) == d_l.labels[hold]).mean())
    model.provenance = {"trained_on": d_l.name, "train_count": int(len(train)), "holdout_count": int(n_hold),
                        "holdout_accuracy": acc, "config": asdict(config)}
    return model


def assign_labels(probs_or_logits: np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve to the lowest class id."""
    return np.asarray(probs_or_logits).argmax(axis=1)


def label_synthetic(backbone: FeatureBackbone, images_signed: np.ndarray):
    """Returns (labels, confidence) for generated images in [-1, 1]."""
    logits, _ = backbone.predict(images_signed)
    probs = softmax(logits)
    labels = assign_labels(logits)
    return labels, probs[np.arange(len(labels)), labels] if len(labels) else np.zeros(0)


def macro_precision(y_true, y_pred, classes) -> tuple[float, dict[int, float]]:
    classes = sorted(int(c) for c in classes)
    per = precision_score(y_true, y_pred, labels=classes, average=None, zero_division=0)
    return float(np.mean(per)), {c: float(p) for c, p in zip(classes, per)}


@dataclass
class PrecisionReport:
    macro: float
    per_class: dict


def downstream_precision(images_signed: np.ndarray, labels: np.ndarray, private_test: LabeledDataset,
                         private_classes, config: ClassifierConfig | None = None) -> PrecisionReport:
    """Train a fresh classifier on labeled synthetic data; macro precision on the private test split."""
    config = config or ClassifierConfig()
    private = sorted(int(c) for c in private_classes)
    covered = set(np.unique(labels).tolist()) & set(private)
    if len(covered) < 2:
        raise DegenerateTrainingError(f"synthetic labels cover {len(covered)} private classes; need at least 2")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = FeatureBackbone(private_test.image_shape, private_test.num_classes, config)
    _fit(model, images_signed, labels, config)
    logits, _ = model.predict(to_signed(private_test.images))
    macro, per = macro_precision(private_test.labels, assign_labels(logits), private)
    return PrecisionReport(macro, per)


def feature_summary(backbone: FeatureBackbone, images_signed: np.ndarray) -> GaussianSummary:
    _, feats = backbone.predict(images_signed)
    return GaussianSummary.from_features(feats)


def score_release(backbone: FeatureBackbone, synthetic_signed: np.ndarray, private_test: LabeledDataset,
                  private_classes, config: ClassifierConfig | None = None) -> dict:
    """FID and IS against the private-class test images, plus downstream precision."""
    logits, feats = backbone.predict(synthetic_signed)
    _, real_feats = backbone.predict(to_signed(private_test.images))
    labels = assign_labels(logits)
    report = {
        "fid": fid(GaussianSummary.from_features(feats), GaussianSummary.from_features(real_feats)),
        "inception_score": inception_score(softmax(logits)),
        "synthetic_count": int(len(synthetic_signed)),
        "real_count": int(len(private_test)),
        "backbone": {"arch_id": backbone.arch_id, "checksum": backbone.checksum(),
                     "provenance": backbone.provenance},
        "label_histogram": {int(k): int(v) for k, v in zip(*np.unique(labels, return_counts=True))},
    }
    try:
        prec = downstream_precision(synthetic_signed, labels, private_test, private_classes, config)
        report["precision_macro"] = prec.macro
        report["precision_per_class"] = prec.per_class
    except DegenerateTrainingError as exc:
        log.warning("downstream classification skipped: %s", exc)
        report["precision_macro"] = None
        report["precision_error"] = str(exc)
    return report
