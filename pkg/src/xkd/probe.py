"""Frozen-feature evaluation: extraction, linear probing, late fusion.

Features are the mean of the last-layer patch tokens (CLS excluded) of a
full, unmasked, unaugmented global view. The probe is a single multinomial
logistic layer trained by full-batch gradient descent on standardized
features; it is deliberately implemented in plain numpy, independent of the
autograd engine it evaluates.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autograd import ContractError
from .backbone import encode
from .views_tokens import embed, patchify

SOURCES = ("student-video", "teacher-video", "student-audio", "teacher-audio", "fused")


@dataclass
class FeatureMatrix:
    features: np.ndarray  # (clips, width)
    labels: np.ndarray  # (clips,)
    source: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"feature matrix {self.features.shape} does not align with labels {self.labels.shape}"
            )
        if not np.isfinite(self.features).all():
            raise ContractError("feature matrix contains non-finite entries")


@dataclass
class ProbeConfig:
    steps: int = 600
    lr: float = 0.5
    weight_decay: float = 1e-4
    seed: int = 0


def extract_features(embed_params, encoder_params, clips, modality, patch, source="", workers=1):
    """Mean-of-patch-token features of the raw (unaugmented) global views.

    ``workers`` > 1 extracts clips in a thread pool (pure, read-only forward
    passes on frozen parameters); results keep clip order either way.
    """

    def one(clip):
        view = clip.video if modality == "video" else clip.audio
        batch = patchify(view, modality, patch)
        seq = embed(batch, embed_params, drop_masked=False)
        out = encode(encoder_params, seq)
        return out.tokens.data.mean(axis=0)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, clips))
    else:
        rows = [one(clip) for clip in clips]
    return FeatureMatrix(
        features=np.stack(rows),
        labels=np.array([c.label for c in clips]),
        source=source or f"{modality}",
    )


def features_from_models(models, clips, modality, role, patch, workers=1):
    """Convenience wrapper: role is "student" or "teacher"."""
    if role not in ("student", "teacher"):
        raise ContractError(f"role must be student or teacher, got {role!r}")
    embed_params = getattr(models, f"{role}_embed")[modality]
    encoder_params = getattr(models, f"{role}_encoder")[modality]
    return extract_features(
        embed_params, encoder_params, clips, modality, patch, source=f"{role}-{modality}", workers=workers
    )


def late_fusion(video: FeatureMatrix, audio: FeatureMatrix) -> FeatureMatrix:
    """Columnwise concatenation of row-aligned feature matrices."""
    if video.features.shape[0] != audio.features.shape[0]:
        raise ContractError(
            f"late_fusion: row counts differ, {video.features.shape[0]} vs {audio.features.shape[0]}"
        )
    if not np.array_equal(video.labels, audio.labels):
        raise ContractError("late_fusion: label sequences differ; matrices are not row-aligned")
    return FeatureMatrix(
        features=np.concatenate([video.features, audio.features], axis=1),
        labels=video.labels.copy(),
        source="fused",
    )


def linear_probe(train: FeatureMatrix, test: FeatureMatrix, cfg: ProbeConfig | None = None) -> float:
    """Multinomial-logistic probe on frozen features; returns top-1 accuracy.

    Full-batch gradient descent from a zero init on train-standardized
    features, fixed step budget, L2 weight decay. Deterministic.
    """
    cfg = cfg or ProbeConfig()
    if train.features.shape[1] != test.features.shape[1]:
        raise ContractError(
            f"probe: train width {train.features.shape[1]} != test width {test.features.shape[1]}"
        )
    classes = np.unique(train.labels)
    if classes.size < 2:
        raise ContractError("probe: training set has a single class")

    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    x = (train.features - mu) / sd
    x_test = (test.features - mu) / sd

    class_index = {c: i for i, c in enumerate(classes)}
    y = np.zeros((x.shape[0], classes.size))
    y[np.arange(x.shape[0]), [class_index[c] for c in train.labels]] = 1.0

    w = np.zeros((x.shape[1], classes.size))
    b = np.zeros(classes.size)
    n = x.shape[0]
    for _ in range(cfg.steps):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - y) / n
        w -= cfg.lr * (x.T @ delta + cfg.weight_decay * w)
        b -= cfg.lr * delta.sum(axis=0)

    pred = classes[np.argmax(x_test @ w + b, axis=1)]
    return float(np.mean(pred == test.labels))


def features_to_csv(fm: FeatureMatrix, path) -> None:
    """Write features as CSV with header clip_id,label,f0..fD-1."""
    width = fm.features.shape[1]
    header = "clip_id,label," + ",".join(f"f{i}" for i in range(width))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i, (row, label) in enumerate(zip(fm.features, fm.labels)):
            fh.write(f"{i},{label}," + ",".join(repr(float(v)) for v in row) + "\n")
