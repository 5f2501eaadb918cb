"""Post-training analysis over persisted inference records.

The centerpiece is per-class confirmation-threshold calibration: given a
target false-positive alarm rate, pick for every alarm class the smallest
threshold whose replayed false-positive rate on the calibration set stays
at or under the target. Candidate thresholds sit immediately above each
observed confidence (plus zero), which makes the search exact and cheap
to verify by brute force.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .catalog import Catalog, ImageFilter, StoredInference
from .classifier import get_backend
from .errors import NoLabeledData, NoValidationData

HISTOGRAM_BINS = 20


@dataclass(frozen=True)
class DisagreementRow:
    image_id: int
    ground_truth: str
    predicted_class: str
    confidence: float

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "ground_truth": self.ground_truth,
            "predicted_class": self.predicted_class,
            "confidence": self.confidence,
        }


@dataclass(frozen=True)
class ConfusionCell:
    count: int
    histogram: tuple[int, ...]  # HISTOGRAM_BINS bins over [0, 1]
    mean_confidence: float


@dataclass(frozen=True)
class AugmentedConfusionMatrix:
    """Counts per (truth, prediction) cell plus the distribution of the
    predicted-class confidence inside each cell."""

    class_names: tuple[str, ...]
    cells: dict[str, dict[str, ConfusionCell]]

    def to_json_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "cells": {
                t: {
                    p: {
                        "count": cell.count,
                        "mean_confidence": cell.mean_confidence,
                        "histogram": list(cell.histogram),
                    }
                    for p, cell in row.items()
                }
                for t, row in self.cells.items()
            },
        }


@dataclass(frozen=True)
class ThresholdTable:
    model_id: int
    entries: dict[str, float]
    target_fpr: float

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "entries": dict(self.entries),
            "target_fpr": self.target_fpr,
        }


def confidence_bin(confidence: float) -> int:
    """Bin index over [0,1): [i/20, (i+1)/20), last bin closed at 1.0."""
    return min(int(confidence * HISTOGRAM_BINS), HISTOGRAM_BINS - 1)


def infer_all(catalog: Catalog, model_id: int, image_filter: ImageFilter | None = None) -> int:
    """Run the model's backend over every matching image of its plot type
    and persist one inference record per image (re-runs replace)."""
    model = catalog.get_model(model_id)
    backend = get_backend(model.backend)
    handle = backend.load(model.blob)
    base = image_filter or ImageFilter()
    merged = ImageFilter(
        plot_type=model.plot_type,
        run_period=base.run_period,
        run_range=base.run_range,
        labeled=base.labeled,
        time_range=base.time_range,
    )
    count = 0
    for ref, _ in catalog.query_images(merged):
        path = catalog.resolve_path(ref.image_id)
        with open(path, "rb") as fh:
            vector = backend.infer(handle, fh.read())
        predicted, _ = vector.argmax()
        catalog.record_inference(model_id, ref.image_id, vector.entries, predicted)
        count += 1
    return count


def _labeled_records(catalog: Catalog, model_id: int) -> list[tuple[StoredInference, str]]:
    """Stored inferences joined with the image's effective label."""
    catalog.get_model(model_id)  # raises UnknownModel
    out = []
    for record in catalog.inferences_for_model(model_id):
        label = catalog.effective_label(record.image_id)
        if label is not None:
            out.append((record, label))
    return out


def disagreement_report(catalog: Catalog, model_id: int) -> list[DisagreementRow]:
    """Labeled images where the model and ground truth disagree, most
    confident errors first (those deserve expert review first)."""
    rows = []
    for record, truth in _labeled_records(catalog, model_id):
        if record.predicted_class != truth:
            confidence = dict(record.confidence_vector)[record.predicted_class]
            rows.append(DisagreementRow(record.image_id, truth, record.predicted_class, confidence))
    rows.sort(key=lambda r: (-r.confidence, r.image_id))
    return rows


def confusion_with_confidence(catalog: Catalog, model_id: int) -> AugmentedConfusionMatrix:
    model = catalog.get_model(model_id)
    labeled = _labeled_records(catalog, model_id)
    if not labeled:
        raise NoLabeledData(f"model {model_id} has no labeled inference records")
    names = model.class_names
    sums: dict[tuple[str, str], float] = {}
    counts: dict[tuple[str, str], int] = {}
    hists: dict[tuple[str, str], list[int]] = {}
    for record, truth in labeled:
        confidence = dict(record.confidence_vector)[record.predicted_class]
        key = (truth, record.predicted_class)
        counts[key] = counts.get(key, 0) + 1
        sums[key] = sums.get(key, 0.0) + confidence
        hists.setdefault(key, [0] * HISTOGRAM_BINS)[confidence_bin(confidence)] += 1
    cells: dict[str, dict[str, ConfusionCell]] = {}
    for truth in names:
        cells[truth] = {}
        for predicted in names:
            key = (truth, predicted)
            n = counts.get(key, 0)
            cells[truth][predicted] = ConfusionCell(
                count=n,
                histogram=tuple(hists.get(key, [0] * HISTOGRAM_BINS)),
                mean_confidence=(sums[key] / n) if n else 0.0,
            )
    return AugmentedConfusionMatrix(names, cells)


def _fpr(
    false_positive_confidences: Sequence[float], threshold: float, n_negative: int
) -> float:
    firing = sum(1 for c in false_positive_confidences if c >= threshold)
    return firing / n_negative


def calibrate_thresholds(
    catalog: Catalog,
    model_id: int,
    alarm_classes: Iterable[str],
    target_fpr: float,
) -> ThresholdTable:
    """Per-class confirmation thresholds hitting the target false-positive rate.

    For alarm class a, FPR(a, t) counts truly-non-alarm images predicted a
    with confidence >= t, over all truly-non-alarm images. The chosen
    threshold is the smallest candidate achieving FPR <= target; candidates
    are 0 plus the value immediately above each observed confidence for a
    (a threshold equal to an observed confidence would still fire on it, so
    candidates sit one float step above). FPR just above the maximum
    observed confidence is 0, hence a solution always exists.
    """
    if not 0.0 < target_fpr < 1.0:
        raise ValueError("target_fpr must be in (0, 1)")
    alarm = list(alarm_classes)
    model = catalog.get_model(model_id)
    labeled = _labeled_records(catalog, model_id)
    if not labeled:
        raise NoValidationData(f"model {model_id} has no labeled inference records")
    negatives = [(rec, truth) for rec, truth in labeled if truth not in alarm]
    n_negative = len(negatives)
    if n_negative == 0:
        raise NoValidationData("no truly-non-alarm images to measure a false-positive rate on")
    entries: dict[str, float] = {}
    for class_name in model.class_names:
        if class_name not in alarm:
            entries[class_name] = 0.0
            continue
        observed = sorted(
            dict(rec.confidence_vector)[class_name]
            for rec, _ in labeled
            if rec.predicted_class == class_name
        )
        fp_confidences = [
            dict(rec.confidence_vector)[class_name]
            for rec, truth in negatives
            if rec.predicted_class == class_name
        ]
        candidates = [0.0] + [math.nextafter(c, math.inf) for c in observed]
        threshold = None
        for candidate in candidates:
            if _fpr(fp_confidences, candidate, n_negative) <= target_fpr:
                threshold = candidate
                break
        # A candidate above the max observed confidence always has FPR 0, so
        # the search can only fail past 1.0, i.e. a false positive at exactly
        # 1.0 that the target forbids. That cannot occur with softmax outputs.
        assert threshold is not None and threshold <= 1.0, "unachievable target_fpr"
        entries[class_name] = threshold
    table = ThresholdTable(model_id=model_id, entries=entries, target_fpr=target_fpr)
    catalog.save_thresholds(model_id, table.entries, target_fpr)
    return table
