"""Live operation: classify new images, gate alarms, sample, serve views.

The gate rule: a non-alarm argmax is Ok; an alarm-class argmax raises an
Alarm only when its confidence clears that class's confirmation
threshold, otherwise the image is Flagged for future labeling. Every
processed image independently joins the unbiased audit sample with a
fixed probability drawn from a dedicated seeded RNG stream.

Models are cached per plot type (reloaded when a newer model appears);
threshold tables are read fresh from the store on every decision, so a
recalibration takes effect atomically on the next image.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timedelta

from .catalog import Catalog, ImageRef, OperationalRecord, to_iso, utcnow
from .classifier import ConfidenceVector, get_backend
from .errors import ClassMismatch, CorruptImage, RootUnreachable

logger = logging.getLogger(__name__)

DECISION_OK = "Ok"
DECISION_ALARM = "Alarm"
DECISION_FLAGGED = "Flagged"
DECISION_NO_MODEL = "NoModel"


@dataclass(frozen=True)
class GateDecision:
    kind: str
    class_name: str | None = None

    def __post_init__(self) -> None:
        if self.kind in (DECISION_ALARM, DECISION_FLAGGED) and not self.class_name:
            raise ValueError(f"{self.kind} must carry an alarm class")


@dataclass(frozen=True)
class SampleConfig:
    sample_rate: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.sample_rate <= 1.0:
            raise ValueError("sample_rate must be in [0, 1]")


@dataclass(frozen=True)
class StatusEntry:
    plot_type: str
    image_id: int
    predicted_class: str | None
    confidence: float
    decision: str
    decided_at: datetime
    highlight: bool  # true iff decision is Alarm

    def to_dict(self) -> dict:
        return {
            "plot_type": self.plot_type,
            "image_id": self.image_id,
            "predicted_class": self.predicted_class,
            "confidence": self.confidence,
            "decision": self.decision,
            "decided_at": to_iso(self.decided_at),
            "highlight": self.highlight,
        }


def decide(
    vector: ConfidenceVector,
    thresholds: dict[str, float],
    alarm_classes: set[str] | frozenset[str] | list[str],
) -> GateDecision:
    """Apply confirmation thresholds to one confidence vector."""
    vector_classes = {name for name, _ in vector.entries}
    if vector_classes != set(thresholds):
        raise ClassMismatch(f"vector classes {sorted(vector_classes)} vs table {sorted(thresholds)}")
    predicted, confidence = vector.argmax()
    if predicted not in set(alarm_classes):
        return GateDecision(DECISION_OK)
    if confidence >= thresholds[predicted]:
        return GateDecision(DECISION_ALARM, predicted)
    return GateDecision(DECISION_FLAGGED, predicted)


class Gatekeeper:
    """Watches roots, processes images, and serves the monitoring views."""

    def __init__(
        self,
        catalog: Catalog,
        sample_config: SampleConfig | None = None,
        log_path: str | None = None,
    ):
        self.catalog = catalog
        self.sample_config = sample_config or SampleConfig()
        self.log_path = log_path
        self._sample_rng = random.Random(self.sample_config.seed)
        self._handles: dict[int, object] = {}  # model_id -> backend handle
        self._lock = threading.Lock()
        self._stop = threading.Event()

    # ------------------------------------------------------------------
    # processing
    # ------------------------------------------------------------------

    def _handle_for(self, model_id: int):
        with self._lock:
            if model_id not in self._handles:
                model = self.catalog.get_model(model_id)
                backend = get_backend(model.backend)
                self._handles[model_id] = (backend, backend.load(model.blob))
            return self._handles[model_id]

    def process_image(self, image_id: int) -> OperationalRecord:
        """Classify one registered image, decide, sample, persist, log."""
        image = self.catalog.get_image(image_id)
        model = self.catalog.latest_model(image.plot_type)
        note = None
        vector_entries: tuple[tuple[str, float], ...] = ()
        if model is None:
            decision = GateDecision(DECISION_NO_MODEL)
            confidence = 0.0
            predicted = None
            model_id = None
        else:
            model_id = model.model_id
            try:
                backend, handle = self._handle_for(model.model_id)
                path = self.catalog.resolve_path(image_id)
                with open(path, "rb") as fh:
                    vector = backend.infer(handle, fh.read())
            except (CorruptImage, OSError) as exc:
                decision = GateDecision(DECISION_NO_MODEL)
                confidence = 0.0
                predicted = None
                note = f"unreadable image: {exc}"
            else:
                vector_entries = vector.entries
                stored = self.catalog.get_thresholds(model.model_id)
                if stored is not None:
                    thresholds = stored[0]
                else:
                    thresholds = {name: 0.0 for name in model.class_names}
                alarm_classes = set(self.catalog.get_class_set(image.plot_type).alarm_classes)
                decision = decide(vector, thresholds, alarm_classes)
                predicted, confidence = vector.argmax()
        sampled = self._sample_rng.random() < self.sample_config.sample_rate
        record = self.catalog.record_operational(
            image_id=image_id,
            model_id=model_id,
            confidence_vector=vector_entries,
            decision=decision.kind,
            alarm_class=decision.class_name,
            sampled=sampled,
            note=note,
        )
        self._append_log(image, predicted, confidence, decision, sampled, record.decided_at)
        return record

    def _append_log(
        self,
        image: ImageRef,
        predicted: str | None,
        confidence: float,
        decision: GateDecision,
        sampled: bool,
        decided_at: datetime,
    ) -> None:
        """One tab-separated line per image:
        ISO8601  image_id  plot_type  predicted  confidence  decision  sampled"""
        if not self.log_path:
            return
        line = "\t".join(
            [
                to_iso(decided_at),
                str(image.image_id),
                image.plot_type,
                predicted if predicted is not None else "-",
                f"{confidence:.6f}",
                decision.kind,
                "true" if sampled else "false",
            ]
        )
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    # ------------------------------------------------------------------
    # watching
    # ------------------------------------------------------------------

    def poll_once(self, root_ids: list[str]) -> list[OperationalRecord]:
        """One watch cycle: scan roots, then process every image that has
        no operational record yet (catalog idempotence dedups rescans)."""
        for root_id in root_ids:
            try:
                self.catalog.scan_root(root_id)
            except RootUnreachable as exc:
                logger.warning("root %s unreachable, will retry next poll: %s", root_id, exc)
        records = []
        for image in self.catalog.unprocessed_images():
            records.append(self.process_image(image.image_id))
        return records

    def watch(self, root_ids: list[str], poll_interval: float = 60.0) -> None:
        """Poll until stop() is called. Blocks the calling thread."""
        if poll_interval < 1.0:
            raise ValueError("poll_interval must be >= 1 s")
        self._stop.clear()
        while not self._stop.is_set():
            started = time.monotonic()
            records = self.poll_once(root_ids)
            if records:
                logger.info("processed %d new image(s)", len(records))
            elapsed = time.monotonic() - started
            self._stop.wait(timeout=max(0.0, poll_interval - elapsed))

    def stop(self) -> None:
        self._stop.set()

    # ------------------------------------------------------------------
    # views
    # ------------------------------------------------------------------

    def latest_status(self) -> list[StatusEntry]:
        """Most recent decision per plot type, the security-camera view."""
        entries = []
        for plot_type, record in self.catalog.latest_operational_per_plot_type():
            if record.confidence_vector:
                vector = ConfidenceVector(record.confidence_vector)
                predicted, confidence = vector.argmax()
            else:
                predicted, confidence = None, 0.0
            entries.append(
                StatusEntry(
                    plot_type=plot_type,
                    image_id=record.image_id,
                    predicted_class=predicted,
                    confidence=confidence,
                    decision=record.decision,
                    decided_at=record.decided_at,
                    highlight=record.decision == DECISION_ALARM,
                )
            )
        return entries

    def trailing_view(
        self, window: timedelta = timedelta(hours=24), now: datetime | None = None
    ) -> list[OperationalRecord]:
        """Alarm and Flagged records inside [now - window, now], newest first."""
        if window <= timedelta(0):
            raise ValueError("window must be positive")
        end = now or utcnow()
        return self.catalog.operational_in_window(
            end - window, end, (DECISION_ALARM, DECISION_FLAGGED)
        )

    def sampled_queue(self) -> list[int]:
        """Sampled images still awaiting an expert label, chronological."""
        return self.catalog.sampled_unlabeled_images()
