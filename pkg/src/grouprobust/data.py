"""Datasets, the ground-truth labelling function, CSV ingestion and splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    instances: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.instances.ndim != 2:
            if self.instances.size == 0:
                self.instances = self.instances.reshape(0, 0)
            else:
                raise DatasetError(f"instances must be 2-D, got shape {self.instances.shape}")
        if len(self.instances) != len(self.labels):
            raise DatasetError("instances and labels differ in length")
        if self.class_count < 1:
            raise DatasetError("class_count must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError("labels must lie in [0, class_count)")
        if self.instances.size and (self.instances.min() < 0.0 or self.instances.max() > 1.0):
            raise DatasetError("feature values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.instances.shape[1]

    def subset(self, idx, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.instances[idx].reshape(len(idx), self.instances.shape[1]),
            self.labels[idx],
            self.class_count,
            name or self.name,
        )

    def indices_of(self, classes) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, list(classes)))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass
class GroundTruth:
    """The deterministic labelling function ``f``.

    Synthetic data carries one centroid per class and labels any point by its
    nearest centroid. Ingested data carries the labelled members themselves;
    a point is labelled only if it lies within ``stability_radius`` (L-inf) of
    a member, and takes that member's label.
    """

    centroids: np.ndarray | None = None
    members: np.ndarray | None = None
    member_labels: np.ndarray | None = None
    stability_radius: float = 0.0
    margin: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.centroids is not None:
            self.centroids = np.asarray(self.centroids, dtype=np.float64)
            c = self.centroids
            if len(c) < 2:
                raise DatasetError("need at least two centroids")
            diffs = c[:, None, :] - c[None, :, :]
            dist = np.sqrt((diffs ** 2).sum(-1))
            np.fill_diagonal(dist, np.inf)
            self.margin = float(dist.min())
        elif self.members is None:
            raise DatasetError("ground truth needs centroids or labelled members")
        else:
            self.members = np.asarray(self.members, dtype=np.float64)
            self.member_labels = np.asarray(self.member_labels, dtype=np.int64)

    @classmethod
    def from_dataset(cls, data: LabeledDataset, stability_radius: float) -> "GroundTruth":
        return cls(members=data.instances, member_labels=data.labels, stability_radius=stability_radius)

    def classify(self, x) -> int | None:
        x = np.asarray(x, dtype=np.float64)
        if self.centroids is not None:
            d2 = ((self.centroids - x) ** 2).sum(axis=1)
            return int(np.argmin(d2))  # argmin keeps the lowest index on ties
        dist = np.abs(self.members - x).max(axis=1)
        i = int(np.argmin(dist))
        if dist[i] > self.stability_radius + 1e-12:
            return None
        return int(self.member_labels[i])

    def to_dict(self) -> dict:
        if self.centroids is not None:
            return {"kind": "centroids", "centroids": self.centroids.tolist(), "margin": self.margin}
        return {"kind": "members", "stability_radius": self.stability_radius, "count": len(self.members)}


def ground_truth_class(gt: GroundTruth, x) -> int | None:
    return gt.classify(x)


def synth_clusters(
    class_count: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int,
    centroid_low: float = 0.2,
    centroid_high: float = 0.8,
) -> tuple[LabeledDataset, GroundTruth]:
    """Gaussian blobs around seeded random centroids, clipped to [0, 1]."""
    if class_count < 2 or dim < 1 or per_class < 1:
        raise DatasetError("need class_count >= 2, dim >= 1, per_class >= 1")
    if spread < 0:
        raise DatasetError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    centroids = rng.uniform(centroid_low, centroid_high, size=(class_count, dim))
    labels = np.repeat(np.arange(class_count), per_class)
    noise = rng.normal(0.0, 1.0, size=(len(labels), dim)) * spread
    instances = np.clip(centroids[labels] + noise, 0.0, 1.0)
    data = LabeledDataset(instances, labels, class_count, name=f"synth-{class_count}x{dim}-s{seed}")
    return data, GroundTruth(centroids=centroids)


def load_csv(path, name: str | None = None) -> LabeledDataset:
    """Read ``label,f0,f1,...`` rows. Errors name the 1-based file line."""
    path = Path(path)
    rows, labels = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise DatasetError(f"{path}: header must start with 'label'")
        width = len(header) - 1
        if width < 1:
            raise DatasetError(f"{path}: no feature columns")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width + 1:
                raise DatasetError(f"{path}: row {lineno}: expected {width + 1} fields, got {len(row)}")
            try:
                label = int(row[0])
                feats = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DatasetError(f"{path}: row {lineno}: {exc}") from None
            if label < 0:
                raise DatasetError(f"{path}: row {lineno}: negative label {label}")
            for j, v in enumerate(feats):
                if not (0.0 <= v <= 1.0) or math.isnan(v):
                    raise DatasetError(f"{path}: row {lineno}: feature f{j}={v} outside [0, 1]")
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    return LabeledDataset(np.array(rows), np.array(labels), max(labels) + 1, name or path.stem)


def write_csv(data: LabeledDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{j}" for j in range(data.dim)])
        for x, y in zip(data.instances, data.labels):
            w.writerow([int(y)] + [repr(float(v)) for v in x])


def split(data: LabeledDataset, fractions=(0.7, 0.2, 0.1), seed: int = 0):
    """Stratified seeded split into (train, test, validation).

    Per class, counts are ``floor(n * f)`` with the remainder assigned to the
    parts with the largest fractional shares.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be three non-negative reals summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for c in range(data.class_count):
        idx = np.flatnonzero(data.labels == c)
        if len(idx) == 0:
            continue
        if np.all(fr > 0) and len(idx) < 3:
            raise DatasetError(f"class {c} has {len(idx)} instances; need >= 3 for a three-way split")
        idx = rng.permutation(idx)
        raw = len(idx) * fr
        counts = np.floor(raw + 1e-9).astype(int)
        short = len(idx) - counts.sum()
        for j in np.argsort(-(raw - counts), kind="stable")[:short]:
            counts[j] += 1
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j in range(3):
            parts[j].extend(idx[bounds[j]:bounds[j + 1]].tolist())
    names = ("train", "test", "val")
    return tuple(data.subset(np.array(p, dtype=np.int64), f"{data.name}-{n}") for p, n in zip(parts, names))
