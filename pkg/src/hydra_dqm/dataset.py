"""Training-manifest construction: weighting, strategic under-sampling,
and seeded stratified train/validation splitting.

All three stages are pure, deterministic functions of their inputs and a
seed, so a training run can be reproduced bit-for-bit from its recorded
split config.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .catalog import Catalog, ImageFilter
from .errors import ClassTooSmall, EmptyClass

CSV_HEADER = ("image_id", "path", "class", "weight")


@dataclass(frozen=True)
class ManifestRow:
    image_id: int
    path: str
    class_name: str
    weight: int = 1

    def __post_init__(self) -> None:
        if self.weight < 1:
            raise ValueError("weight must be >= 1")


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.95
    seed: int = 0
    undersample_ratio: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.undersample_ratio < 1.0:
            raise ValueError("undersample_ratio must be >= 1.0")

    def to_dict(self) -> dict:
        return {
            "train_fraction": self.train_fraction,
            "seed": self.seed,
            "undersample_ratio": self.undersample_ratio,
        }


def build_manifest(
    catalog: Catalog,
    plot_type: str,
    class_weights: dict[str, int] | None = None,
) -> list[ManifestRow]:
    """Expanded manifest for a plot type: one row per (image, replication).

    The class comes from the image's effective label; a per-class weight
    replicates rare-class rows so they pull harder during training.
    Raises EmptyClass when any declared class has no labeled example.
    """
    weights = class_weights or {}
    class_set = catalog.get_class_set(plot_type)
    labeled = catalog.query_images(ImageFilter(plot_type=plot_type, labeled=True))
    seen_classes = {label for _, label in labeled}
    for class_name in class_set.classes:
        if class_name not in seen_classes:
            raise EmptyClass(f"class {class_name!r} of {plot_type!r} has no labeled images")
    rows: list[ManifestRow] = []
    for ref, label in labeled:
        weight = int(weights.get(label, 1))
        row = ManifestRow(ref.image_id, catalog.resolve_path(ref.image_id), label, weight)
        rows.extend([row] * weight)
    return rows


def class_counts(manifest: Sequence[ManifestRow]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for row in manifest:
        counts[row.class_name] = counts.get(row.class_name, 0) + 1
    return counts


def strategic_undersample(
    manifest: Sequence[ManifestRow], seed: int, ratio: float = 1.0
) -> list[ManifestRow]:
    """Randomly discard rows from over-represented classes.

    Every class is capped at ceil(ratio * m) rows, m being the smallest
    class count, by seeded uniform sampling without replacement. The
    smallest class is never touched; survivors keep manifest order.
    """
    if ratio < 1.0:
        raise ValueError("ratio must be >= 1.0")
    counts = class_counts(manifest)
    if not counts:
        return []
    cap = math.ceil(ratio * min(counts.values()))
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    keep = np.ones(len(manifest), dtype=bool)
    by_class: dict[str, list[int]] = {}
    for idx, row in enumerate(manifest):
        by_class.setdefault(row.class_name, []).append(idx)
    for class_name in sorted(by_class):
        indices = by_class[class_name]
        if len(indices) > cap:
            survivors = rng.choice(len(indices), size=cap, replace=False)
            drop = set(indices) - {indices[i] for i in survivors}
            for idx in drop:
                keep[idx] = False
    return [row for idx, row in enumerate(manifest) if keep[idx]]


def split_shuffle(
    manifest: Sequence[ManifestRow], config: SplitConfig
) -> tuple[list[ManifestRow], list[ManifestRow]]:
    """Stratified split into (train, validation), both seeded-shuffled.

    Per class: floor(n * train_fraction) rows train, clamped so at least
    one row lands on each side (the confusion matrix needs every true
    class represented in validation). Raises ClassTooSmall below 2 rows.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    by_class: dict[str, list[int]] = {}
    for idx, row in enumerate(manifest):
        by_class.setdefault(row.class_name, []).append(idx)
    train_idx: list[int] = []
    val_idx: list[int] = []
    for class_name in sorted(by_class):
        indices = by_class[class_name]
        n = len(indices)
        if n < 2:
            raise ClassTooSmall(f"class {class_name!r} has {n} row(s); need >= 2")
        order = rng.permutation(n)
        n_train = min(max(int(math.floor(n * config.train_fraction)), 1), n - 1)
        train_idx.extend(indices[i] for i in order[:n_train])
        val_idx.extend(indices[i] for i in order[n_train:])
    train_order = rng.permutation(len(train_idx))
    val_order = rng.permutation(len(val_idx))
    train = [manifest[train_idx[i]] for i in train_order]
    val = [manifest[val_idx[i]] for i in val_order]
    return train, val


def manifest_to_csv(manifest: Iterable[ManifestRow], fh: IO[str]) -> None:
    """Audit export, header ``image_id,path,class,weight``."""
    writer = csv.writer(fh)
    writer.writerow(CSV_HEADER)
    for row in manifest:
        writer.writerow([row.image_id, row.path, row.class_name, row.weight])
