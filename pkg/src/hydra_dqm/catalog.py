"""Two-arm persistent store backed by a single SQLite database.

Arm A is the archive: every ingested image, every label ever submitted
(append-only), trained models, analysis inference records, and threshold
tables. Arm B is operational: one record per live gatekeeper decision.
Both arms live in one database file so cross-arm queries are plain joins
and writes share one transaction mechanism.

Concurrency: one connection guarded by an RLock serializes all access;
handles may be shared freely across threads.
"""

from __future__ import annotations

import json
import os
import re
import sqlite3
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Iterable

from .errors import (
    MalformedRunNumber,
    RootUnreachable,
    UnknownClass,
    UnknownImage,
    UnknownModel,
    UnknownRoot,
)

DEFAULT_CLASSES = ("Good", "Bad", "NoData")
DEFAULT_ALARM_CLASSES = ("Bad",)

# Trailing ISO-8601 basic UTC token in archived filenames,
# e.g. fcal_occupancy_20200827T031500Z.png
_FILENAME_TS = re.compile(r"_(\d{8}T\d{6}Z)\.png$", re.IGNORECASE)

_SCHEMA = """
-- arm A: archive (training/testing basis)
CREATE TABLE IF NOT EXISTS roots (
    root_id   TEXT PRIMARY KEY,
    base_path TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS images (
    image_id    INTEGER PRIMARY KEY AUTOINCREMENT,
    root_id     TEXT NOT NULL REFERENCES roots(root_id),
    run_period  TEXT NOT NULL,
    run_number  INTEGER NOT NULL CHECK (run_number >= 1),
    plot_type   TEXT NOT NULL,
    filename    TEXT NOT NULL,
    captured_at TEXT NOT NULL,
    UNIQUE (root_id, run_period, run_number, plot_type, filename)
);
CREATE INDEX IF NOT EXISTS idx_images_plot_time
    ON images (plot_type, captured_at, image_id);
CREATE TABLE IF NOT EXISTS labels (
    label_id   INTEGER PRIMARY KEY AUTOINCREMENT,
    image_id   INTEGER NOT NULL REFERENCES images(image_id),
    class_name TEXT NOT NULL,
    labeler    TEXT NOT NULL,
    labeled_at TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_labels_image ON labels (image_id, labeled_at, label_id);
CREATE TABLE IF NOT EXISTS class_sets (
    plot_type     TEXT PRIMARY KEY,
    classes       TEXT NOT NULL,
    alarm_classes TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS users (
    user     TEXT PRIMARY KEY,
    is_admin INTEGER NOT NULL DEFAULT 0,
    token    TEXT UNIQUE
);
CREATE TABLE IF NOT EXISTS permissions (
    user      TEXT NOT NULL,
    plot_type TEXT NOT NULL,
    UNIQUE (user, plot_type)
);
CREATE TABLE IF NOT EXISTS models (
    model_id     INTEGER PRIMARY KEY AUTOINCREMENT,
    plot_type    TEXT NOT NULL,
    backend      TEXT NOT NULL,
    created_at   TEXT NOT NULL,
    class_names  TEXT NOT NULL,
    blob         BLOB NOT NULL,
    train_config TEXT NOT NULL,
    split_config TEXT NOT NULL,
    metrics      TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS inferences (
    model_id          INTEGER NOT NULL REFERENCES models(model_id),
    image_id          INTEGER NOT NULL REFERENCES images(image_id),
    confidence_vector TEXT NOT NULL,
    predicted_class   TEXT NOT NULL,
    inferred_at       TEXT NOT NULL,
    PRIMARY KEY (model_id, image_id)
);
CREATE TABLE IF NOT EXISTS thresholds (
    model_id   INTEGER PRIMARY KEY REFERENCES models(model_id),
    entries    TEXT NOT NULL,
    target_fpr REAL NOT NULL,
    created_at TEXT NOT NULL
);

-- arm B: operations (live decisions, alarms, samples)
CREATE TABLE IF NOT EXISTS operational_records (
    record_id         INTEGER PRIMARY KEY AUTOINCREMENT,
    image_id          INTEGER NOT NULL,
    model_id          INTEGER,
    confidence_vector TEXT NOT NULL,
    decision          TEXT NOT NULL,
    alarm_class       TEXT,
    sampled           INTEGER NOT NULL,
    decided_at        TEXT NOT NULL,
    note              TEXT
);
CREATE INDEX IF NOT EXISTS idx_oprec_time ON operational_records (decided_at, record_id);
CREATE INDEX IF NOT EXISTS idx_oprec_image ON operational_records (image_id);
"""


def utcnow() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


def to_iso(ts: datetime) -> str:
    """Seconds-precision UTC ISO-8601, the canonical stored form."""
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0).strftime("%Y-%m-%dT%H:%M:%SZ")


def from_iso(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)


@dataclass(frozen=True)
class FilesystemRoot:
    root_id: str
    base_path: str


@dataclass(frozen=True)
class ImageRef:
    image_id: int
    root_id: str
    run_period: str
    run_number: int
    plot_type: str
    filename: str
    captured_at: datetime

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "root_id": self.root_id,
            "run_period": self.run_period,
            "run_number": self.run_number,
            "plot_type": self.plot_type,
            "filename": self.filename,
            "captured_at": to_iso(self.captured_at),
        }


@dataclass(frozen=True)
class LabelRecord:
    label_id: int
    image_id: int
    class_name: str
    labeler: str
    labeled_at: datetime

    def to_dict(self) -> dict[str, Any]:
        return {
            "label_id": self.label_id,
            "image_id": self.image_id,
            "class_name": self.class_name,
            "labeler": self.labeler,
            "labeled_at": to_iso(self.labeled_at),
        }


@dataclass(frozen=True)
class ClassSet:
    plot_type: str
    classes: tuple[str, ...] = DEFAULT_CLASSES
    alarm_classes: tuple[str, ...] = DEFAULT_ALARM_CLASSES


@dataclass(frozen=True)
class ModelRecord:
    model_id: int
    plot_type: str
    backend: str
    created_at: datetime
    class_names: tuple[str, ...]
    blob: bytes
    train_config: dict[str, Any]
    split_config: dict[str, Any]
    metrics: dict[str, Any]

    def to_dict(self, with_blob: bool = False) -> dict[str, Any]:
        out = {
            "model_id": self.model_id,
            "plot_type": self.plot_type,
            "backend": self.backend,
            "created_at": to_iso(self.created_at),
            "class_names": list(self.class_names),
            "train_config": self.train_config,
            "split_config": self.split_config,
            "metrics": self.metrics,
        }
        if with_blob:
            out["blob"] = self.blob
        return out


@dataclass(frozen=True)
class StoredInference:
    image_id: int
    model_id: int
    confidence_vector: tuple[tuple[str, float], ...]
    predicted_class: str
    inferred_at: datetime


@dataclass(frozen=True)
class OperationalRecord:
    record_id: int
    image_id: int
    model_id: int | None
    confidence_vector: tuple[tuple[str, float], ...]
    decision: str  # Ok | Alarm | Flagged | NoModel
    alarm_class: str | None
    sampled: bool
    decided_at: datetime
    note: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "image_id": self.image_id,
            "model_id": self.model_id,
            "confidence_vector": [[c, p] for c, p in self.confidence_vector],
            "decision": self.decision,
            "alarm_class": self.alarm_class,
            "sampled": self.sampled,
            "decided_at": to_iso(self.decided_at),
            "note": self.note,
        }


@dataclass(frozen=True)
class ImageFilter:
    """Optional predicates for query_images; None means no constraint."""
    plot_type: str | None = None
    run_period: str | None = None
    run_range: tuple[int, int] | None = None
    labeled: bool | None = None
    time_range: tuple[datetime, datetime] | None = None


class Catalog:
    """Handle to the two-arm store. Safe to share across threads."""

    def __init__(self, db_path: str | os.PathLike = ":memory:"):
        self.db_path = str(db_path)
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(self.db_path, check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        with self._lock:
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute("PRAGMA synchronous=NORMAL")
            self._conn.executescript(_SCHEMA)
            self._conn.commit()

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def __enter__(self) -> "Catalog":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    # ------------------------------------------------------------------
    # roots
    # ------------------------------------------------------------------

    def add_root(self, root_id: str, base_path: str) -> FilesystemRoot:
        base_path = os.path.abspath(base_path)
        with self._lock:
            self._conn.execute(
                "INSERT INTO roots (root_id, base_path) VALUES (?, ?) "
                "ON CONFLICT(root_id) DO UPDATE SET base_path = excluded.base_path",
                (root_id, base_path),
            )
            self._conn.commit()
        return FilesystemRoot(root_id, base_path)

    def get_root(self, root_id: str) -> FilesystemRoot:
        with self._lock:
            row = self._conn.execute(
                "SELECT root_id, base_path FROM roots WHERE root_id = ?", (root_id,)
            ).fetchone()
        if row is None:
            raise UnknownRoot(root_id)
        return FilesystemRoot(row["root_id"], row["base_path"])

    def list_roots(self) -> list[FilesystemRoot]:
        with self._lock:
            rows = self._conn.execute("SELECT root_id, base_path FROM roots ORDER BY root_id").fetchall()
        return [FilesystemRoot(r["root_id"], r["base_path"]) for r in rows]

    # ------------------------------------------------------------------
    # images
    # ------------------------------------------------------------------

    def register_image(
        self,
        root_id: str,
        run_period: str,
        run_number: int,
        plot_type: str,
        filename: str,
        captured_at: datetime,
    ) -> ImageRef:
        """Idempotent: re-registering an identical tuple returns the existing row."""
        if run_number < 1:
            raise MalformedRunNumber(f"run_number must be >= 1, got {run_number}")
        if not filename:
            raise ValueError("filename must be non-empty")
        self.get_root(root_id)  # raises UnknownRoot
        iso = to_iso(captured_at)
        with self._lock:
            self._conn.execute(
                "INSERT OR IGNORE INTO images "
                "(root_id, run_period, run_number, plot_type, filename, captured_at) "
                "VALUES (?, ?, ?, ?, ?, ?)",
                (root_id, run_period, run_number, plot_type, filename, iso),
            )
            self._conn.commit()
            row = self._conn.execute(
                "SELECT * FROM images WHERE root_id=? AND run_period=? AND run_number=? "
                "AND plot_type=? AND filename=?",
                (root_id, run_period, run_number, plot_type, filename),
            ).fetchone()
        return self._image_from_row(row)

    @staticmethod
    def _image_from_row(row: sqlite3.Row) -> ImageRef:
        return ImageRef(
            image_id=row["image_id"],
            root_id=row["root_id"],
            run_period=row["run_period"],
            run_number=row["run_number"],
            plot_type=row["plot_type"],
            filename=row["filename"],
            captured_at=from_iso(row["captured_at"]),
        )

    def get_image(self, image_id: int) -> ImageRef:
        with self._lock:
            row = self._conn.execute(
                "SELECT * FROM images WHERE image_id = ?", (image_id,)
            ).fetchone()
        if row is None:
            raise UnknownImage(str(image_id))
        return self._image_from_row(row)

    def resolve_path(self, image_id: int) -> str:
        """Rebuild the absolute file path from stored metadata.

        Layout (bit-exact): <base_path>/<run_period>/Run<NNNNNN>/<filename>
        """
        image = self.get_image(image_id)
        root = self.get_root(image.root_id)
        return os.path.join(
            root.base_path, image.run_period, f"Run{image.run_number:06d}", image.filename
        )

    def query_images(
        self,
        filter: ImageFilter | None = None,
        order: str = "asc",
        page_index: int | None = None,
        page_size: int | None = None,
    ) -> list[tuple[ImageRef, str | None]]:
        """Images with their effective label (None when unlabeled).

        Sorted by (captured_at, image_id), ascending unless order="desc".
        ``labeled=False`` selects images with zero label records.
        """
        f = filter or ImageFilter()
        clauses, params = [], []
        if f.plot_type is not None:
            clauses.append("i.plot_type = ?")
            params.append(f.plot_type)
        if f.run_period is not None:
            clauses.append("i.run_period = ?")
            params.append(f.run_period)
        if f.run_range is not None:
            clauses.append("i.run_number BETWEEN ? AND ?")
            params.extend([f.run_range[0], f.run_range[1]])
        if f.time_range is not None:
            clauses.append("i.captured_at BETWEEN ? AND ?")
            params.extend([to_iso(f.time_range[0]), to_iso(f.time_range[1])])
        if f.labeled is True:
            clauses.append("EXISTS (SELECT 1 FROM labels l WHERE l.image_id = i.image_id)")
        elif f.labeled is False:
            clauses.append("NOT EXISTS (SELECT 1 FROM labels l WHERE l.image_id = i.image_id)")
        where = ("WHERE " + " AND ".join(clauses)) if clauses else ""
        direction = "DESC" if order == "desc" else "ASC"
        sql = (
            f"SELECT i.*, "
            f"(SELECT class_name FROM labels l WHERE l.image_id = i.image_id "
            f" ORDER BY l.labeled_at DESC, l.label_id DESC LIMIT 1) AS effective_label "
            f"FROM images i {where} "
            f"ORDER BY i.captured_at {direction}, i.image_id {direction}"
        )
        if page_size is not None:
            sql += " LIMIT ? OFFSET ?"
            params.extend([page_size, (page_index or 0) * page_size])
        with self._lock:
            rows = self._conn.execute(sql, params).fetchall()
        return [(self._image_from_row(r), r["effective_label"]) for r in rows]

    def count_images(self, filter: ImageFilter | None = None) -> int:
        return len(self.query_images(filter))

    # ------------------------------------------------------------------
    # labels
    # ------------------------------------------------------------------

    def record_label(
        self,
        image_id: int,
        class_name: str,
        labeler: str,
        labeled_at: datetime | None = None,
    ) -> LabelRecord:
        """Append one label record; history is never mutated or deleted."""
        image = self.get_image(image_id)
        class_set = self.get_class_set(image.plot_type)
        if class_name not in class_set.classes:
            raise UnknownClass(f"{class_name!r} not in classes of {image.plot_type!r}")
        iso = to_iso(labeled_at or utcnow())
        with self._lock:
            cur = self._conn.execute(
                "INSERT INTO labels (image_id, class_name, labeler, labeled_at) VALUES (?, ?, ?, ?)",
                (image_id, class_name, labeler, iso),
            )
            self._conn.commit()
            label_id = cur.lastrowid
        return LabelRecord(label_id, image_id, class_name, labeler, from_iso(iso))

    def record_labels_bulk(
        self, image_ids: Iterable[int], class_name: str, labeler: str,
        labeled_at: datetime | None = None,
    ) -> int:
        """One transaction, one label record per image. Caller validates class."""
        iso = to_iso(labeled_at or utcnow())
        rows = [(iid, class_name, labeler, iso) for iid in image_ids]
        with self._lock:
            self._conn.executemany(
                "INSERT INTO labels (image_id, class_name, labeler, labeled_at) VALUES (?, ?, ?, ?)",
                rows,
            )
            self._conn.commit()
        return len(rows)

    def effective_label(self, image_id: int) -> str | None:
        """Latest label wins; ties on labeled_at broken by larger label_id."""
        with self._lock:
            row = self._conn.execute(
                "SELECT class_name FROM labels WHERE image_id = ? "
                "ORDER BY labeled_at DESC, label_id DESC LIMIT 1",
                (image_id,),
            ).fetchone()
        return row["class_name"] if row else None

    def label_count(self, image_id: int | None = None) -> int:
        with self._lock:
            if image_id is None:
                row = self._conn.execute("SELECT COUNT(*) AS n FROM labels").fetchone()
            else:
                row = self._conn.execute(
                    "SELECT COUNT(*) AS n FROM labels WHERE image_id = ?", (image_id,)
                ).fetchone()
        return row["n"]

    # ------------------------------------------------------------------
    # class sets and users
    # ------------------------------------------------------------------

    def set_class_set(
        self, plot_type: str, classes: Iterable[str], alarm_classes: Iterable[str]
    ) -> ClassSet:
        classes = tuple(classes)
        alarm = tuple(alarm_classes)
        if not classes or len(set(classes)) != len(classes):
            raise ValueError("classes must be non-empty and unique")
        if not set(alarm) <= set(classes):
            raise ValueError("alarm_classes must be a subset of classes")
        with self._lock:
            self._conn.execute(
                "INSERT INTO class_sets (plot_type, classes, alarm_classes) VALUES (?, ?, ?) "
                "ON CONFLICT(plot_type) DO UPDATE SET classes=excluded.classes, "
                "alarm_classes=excluded.alarm_classes",
                (plot_type, json.dumps(list(classes)), json.dumps(list(alarm))),
            )
            self._conn.commit()
        return ClassSet(plot_type, classes, alarm)

    def get_class_set(self, plot_type: str) -> ClassSet:
        """Declared set, or the default (Good/Bad/NoData, alarm on Bad)."""
        with self._lock:
            row = self._conn.execute(
                "SELECT classes, alarm_classes FROM class_sets WHERE plot_type = ?",
                (plot_type,),
            ).fetchone()
        if row is None:
            return ClassSet(plot_type)
        return ClassSet(
            plot_type,
            tuple(json.loads(row["classes"])),
            tuple(json.loads(row["alarm_classes"])),
        )

    def known_plot_type(self, plot_type: str) -> bool:
        """A plot type is known once it has a declared class set or any image."""
        with self._lock:
            declared = self._conn.execute(
                "SELECT 1 FROM class_sets WHERE plot_type = ?", (plot_type,)
            ).fetchone()
            if declared:
                return True
            seen = self._conn.execute(
                "SELECT 1 FROM images WHERE plot_type = ? LIMIT 1", (plot_type,)
            ).fetchone()
        return seen is not None

    def ensure_user(self, user: str, is_admin: bool = False, token: str | None = None) -> None:
        with self._lock:
            self._conn.execute(
                "INSERT INTO users (user, is_admin, token) VALUES (?, ?, ?) "
                "ON CONFLICT(user) DO UPDATE SET is_admin=excluded.is_admin, "
                "token=COALESCE(excluded.token, users.token)",
                (user, int(is_admin), token),
            )
            self._conn.commit()

    def is_admin(self, user: str) -> bool:
        with self._lock:
            row = self._conn.execute("SELECT is_admin FROM users WHERE user = ?", (user,)).fetchone()
        return bool(row and row["is_admin"])

    def user_for_token(self, token: str) -> tuple[str, bool] | None:
        """(user, is_admin) for a bearer token, or None."""
        with self._lock:
            row = self._conn.execute(
                "SELECT user, is_admin FROM users WHERE token = ?", (token,)
            ).fetchone()
        return (row["user"], bool(row["is_admin"])) if row else None

    def grant_permission(self, user: str, plot_type: str) -> None:
        with self._lock:
            self._conn.execute(
                "INSERT OR IGNORE INTO permissions (user, plot_type) VALUES (?, ?)",
                (user, plot_type),
            )
            self._conn.commit()

    def has_permission(self, user: str, plot_type: str) -> bool:
        with self._lock:
            row = self._conn.execute(
                "SELECT 1 FROM permissions WHERE user = ? AND plot_type = ?",
                (user, plot_type),
            ).fetchone()
        return row is not None

    def permission_count(self, user: str, plot_type: str) -> int:
        with self._lock:
            row = self._conn.execute(
                "SELECT COUNT(*) AS n FROM permissions WHERE user = ? AND plot_type = ?",
                (user, plot_type),
            ).fetchone()
        return row["n"]

    # ------------------------------------------------------------------
    # models / inferences / thresholds (arm A analytics)
    # ------------------------------------------------------------------

    def save_model(
        self,
        plot_type: str,
        backend: str,
        class_names: Iterable[str],
        blob: bytes,
        train_config: dict[str, Any],
        split_config: dict[str, Any],
        metrics: dict[str, Any],
        created_at: datetime | None = None,
    ) -> ModelRecord:
        iso = to_iso(created_at or utcnow())
        with self._lock:
            cur = self._conn.execute(
                "INSERT INTO models (plot_type, backend, created_at, class_names, blob, "
                "train_config, split_config, metrics) VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    plot_type, backend, iso, json.dumps(list(class_names)),
                    blob, json.dumps(train_config), json.dumps(split_config),
                    json.dumps(metrics),
                ),
            )
            self._conn.commit()
            model_id = cur.lastrowid
        return self.get_model(model_id)

    @staticmethod
    def _model_from_row(row: sqlite3.Row) -> ModelRecord:
        return ModelRecord(
            model_id=row["model_id"],
            plot_type=row["plot_type"],
            backend=row["backend"],
            created_at=from_iso(row["created_at"]),
            class_names=tuple(json.loads(row["class_names"])),
            blob=row["blob"],
            train_config=json.loads(row["train_config"]),
            split_config=json.loads(row["split_config"]),
            metrics=json.loads(row["metrics"]),
        )

    def get_model(self, model_id: int) -> ModelRecord:
        with self._lock:
            row = self._conn.execute("SELECT * FROM models WHERE model_id = ?", (model_id,)).fetchone()
        if row is None:
            raise UnknownModel(str(model_id))
        return self._model_from_row(row)

    def latest_model(self, plot_type: str) -> ModelRecord | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT * FROM models WHERE plot_type = ? ORDER BY model_id DESC LIMIT 1",
                (plot_type,),
            ).fetchone()
        return self._model_from_row(row) if row else None

    def list_models(self) -> list[ModelRecord]:
        """Newest first."""
        with self._lock:
            rows = self._conn.execute("SELECT * FROM models ORDER BY model_id DESC").fetchall()
        return [self._model_from_row(r) for r in rows]

    def record_inference(
        self,
        model_id: int,
        image_id: int,
        confidence_vector: Iterable[tuple[str, float]],
        predicted_class: str,
        inferred_at: datetime | None = None,
    ) -> None:
        """Upsert: re-running inference replaces the (model, image) record."""
        vec = [[c, float(p)] for c, p in confidence_vector]
        iso = to_iso(inferred_at or utcnow())
        with self._lock:
            self._conn.execute(
                "INSERT INTO inferences (model_id, image_id, confidence_vector, predicted_class, inferred_at) "
                "VALUES (?, ?, ?, ?, ?) "
                "ON CONFLICT(model_id, image_id) DO UPDATE SET "
                "confidence_vector=excluded.confidence_vector, "
                "predicted_class=excluded.predicted_class, inferred_at=excluded.inferred_at",
                (model_id, image_id, json.dumps(vec), predicted_class, iso),
            )
            self._conn.commit()

    def inferences_for_model(self, model_id: int) -> list[StoredInference]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT * FROM inferences WHERE model_id = ? ORDER BY image_id", (model_id,)
            ).fetchall()
        return [
            StoredInference(
                image_id=r["image_id"],
                model_id=r["model_id"],
                confidence_vector=tuple((c, p) for c, p in json.loads(r["confidence_vector"])),
                predicted_class=r["predicted_class"],
                inferred_at=from_iso(r["inferred_at"]),
            )
            for r in rows
        ]

    def inference_count(self, model_id: int) -> int:
        with self._lock:
            row = self._conn.execute(
                "SELECT COUNT(*) AS n FROM inferences WHERE model_id = ?", (model_id,)
            ).fetchone()
        return row["n"]

    def save_thresholds(self, model_id: int, entries: dict[str, float], target_fpr: float) -> None:
        self.get_model(model_id)
        with self._lock:
            self._conn.execute(
                "INSERT INTO thresholds (model_id, entries, target_fpr, created_at) VALUES (?, ?, ?, ?) "
                "ON CONFLICT(model_id) DO UPDATE SET entries=excluded.entries, "
                "target_fpr=excluded.target_fpr, created_at=excluded.created_at",
                (model_id, json.dumps(entries), target_fpr, to_iso(utcnow())),
            )
            self._conn.commit()

    def get_thresholds(self, model_id: int) -> tuple[dict[str, float], float] | None:
        """(entries, target_fpr) or None when never calibrated."""
        with self._lock:
            row = self._conn.execute(
                "SELECT entries, target_fpr FROM thresholds WHERE model_id = ?", (model_id,)
            ).fetchone()
        if row is None:
            return None
        return json.loads(row["entries"]), row["target_fpr"]

    # ------------------------------------------------------------------
    # arm B: operational records
    # ------------------------------------------------------------------

    def record_operational(
        self,
        image_id: int,
        model_id: int | None,
        confidence_vector: Iterable[tuple[str, float]],
        decision: str,
        alarm_class: str | None,
        sampled: bool,
        decided_at: datetime | None = None,
        note: str | None = None,
    ) -> OperationalRecord:
        vec = [(c, float(p)) for c, p in confidence_vector]
        if decision != "NoModel":
            total = sum(p for _, p in vec)
            if any(p < 0.0 or p > 1.0 for _, p in vec) or abs(total - 1.0) > 1e-6:
                raise ValueError(f"confidence vector must be probabilities summing to 1, got {vec}")
        iso = to_iso(decided_at or utcnow())
        with self._lock:
            cur = self._conn.execute(
                "INSERT INTO operational_records "
                "(image_id, model_id, confidence_vector, decision, alarm_class, sampled, decided_at, note) "
                "VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    image_id, model_id, json.dumps([[c, p] for c, p in vec]),
                    decision, alarm_class, int(sampled), iso, note,
                ),
            )
            self._conn.commit()
            record_id = cur.lastrowid
        return OperationalRecord(
            record_id, image_id, model_id, tuple(vec), decision, alarm_class,
            sampled, from_iso(iso), note,
        )

    @staticmethod
    def _oprec_from_row(row: sqlite3.Row) -> OperationalRecord:
        return OperationalRecord(
            record_id=row["record_id"],
            image_id=row["image_id"],
            model_id=row["model_id"],
            confidence_vector=tuple((c, p) for c, p in json.loads(row["confidence_vector"])),
            decision=row["decision"],
            alarm_class=row["alarm_class"],
            sampled=bool(row["sampled"]),
            decided_at=from_iso(row["decided_at"]),
            note=row["note"],
        )

    def operational_records(self) -> list[OperationalRecord]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT * FROM operational_records ORDER BY record_id"
            ).fetchall()
        return [self._oprec_from_row(r) for r in rows]

    def has_operational_record(self, image_id: int) -> bool:
        with self._lock:
            row = self._conn.execute(
                "SELECT 1 FROM operational_records WHERE image_id = ? LIMIT 1", (image_id,)
            ).fetchone()
        return row is not None

    def unprocessed_images(self) -> list[ImageRef]:
        """Registered images with no operational record yet, chronological."""
        with self._lock:
            rows = self._conn.execute(
                "SELECT i.* FROM images i WHERE NOT EXISTS "
                "(SELECT 1 FROM operational_records o WHERE o.image_id = i.image_id) "
                "ORDER BY i.captured_at, i.image_id"
            ).fetchall()
        return [self._image_from_row(r) for r in rows]

    def latest_operational_per_plot_type(self) -> list[tuple[str, OperationalRecord]]:
        """Most recent arm-B record for each plot type, sorted by plot type."""
        with self._lock:
            rows = self._conn.execute(
                "SELECT i.plot_type AS plot_type, o.* FROM operational_records o "
                "JOIN images i ON i.image_id = o.image_id "
                "WHERE o.record_id = ("
                "  SELECT o2.record_id FROM operational_records o2 "
                "  JOIN images i2 ON i2.image_id = o2.image_id "
                "  WHERE i2.plot_type = i.plot_type "
                "  ORDER BY o2.decided_at DESC, o2.record_id DESC LIMIT 1"
                ") ORDER BY i.plot_type"
            ).fetchall()
        return [(r["plot_type"], self._oprec_from_row(r)) for r in rows]

    def operational_in_window(
        self, start: datetime, end: datetime, decisions: Iterable[str]
    ) -> list[OperationalRecord]:
        """Arm-B records with decided_at in [start, end], newest first."""
        kinds = list(decisions)
        marks = ",".join("?" * len(kinds))
        with self._lock:
            rows = self._conn.execute(
                f"SELECT * FROM operational_records WHERE decided_at BETWEEN ? AND ? "
                f"AND decision IN ({marks}) ORDER BY decided_at DESC, record_id DESC",
                [to_iso(start), to_iso(end), *kinds],
            ).fetchall()
        return [self._oprec_from_row(r) for r in rows]

    def sampled_unlabeled_images(self) -> list[int]:
        """Distinct sampled image ids with no label yet, chronological."""
        with self._lock:
            rows = self._conn.execute(
                "SELECT DISTINCT i.image_id AS image_id, i.captured_at AS captured_at "
                "FROM operational_records o JOIN images i ON i.image_id = o.image_id "
                "WHERE o.sampled = 1 AND NOT EXISTS "
                "(SELECT 1 FROM labels l WHERE l.image_id = i.image_id) "
                "ORDER BY i.captured_at, i.image_id"
            ).fetchall()
        return [r["image_id"] for r in rows]

    # ------------------------------------------------------------------
    # filesystem scan
    # ------------------------------------------------------------------

    def scan_root(self, root_id: str) -> list[ImageRef]:
        """Walk a root's on-disk layout and register every PNG not yet cataloged.

        Expected layout: <base_path>/<run_period>/Run<NNNNNN>/<plot>_<ISO8601Z>.png.
        captured_at comes from the trailing filename timestamp, falling back to
        the file's mtime; plot type is the filename stem before that token.
        Returns only the newly registered images.
        """
        root = self.get_root(root_id)
        if not os.path.isdir(root.base_path):
            raise RootUnreachable(root.base_path)
        new_refs = []
        for period_entry in sorted(os.scandir(root.base_path), key=lambda e: e.name):
            if not period_entry.is_dir():
                continue
            for run_entry in sorted(os.scandir(period_entry.path), key=lambda e: e.name):
                if not run_entry.is_dir() or not re.fullmatch(r"Run\d{6,}", run_entry.name):
                    continue
                run_number = int(run_entry.name[3:])
                for file_entry in sorted(os.scandir(run_entry.path), key=lambda e: e.name):
                    if not file_entry.is_file() or not file_entry.name.lower().endswith(".png"):
                        continue
                    plot_type, captured_at = parse_plot_filename(file_entry.path)
                    before = self._image_id_of(
                        root_id, period_entry.name, run_number, plot_type, file_entry.name
                    )
                    ref = self.register_image(
                        root_id, period_entry.name, run_number, plot_type,
                        file_entry.name, captured_at,
                    )
                    if before is None:
                        new_refs.append(ref)
        return new_refs

    def _image_id_of(
        self, root_id: str, run_period: str, run_number: int, plot_type: str, filename: str
    ) -> int | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT image_id FROM images WHERE root_id=? AND run_period=? AND run_number=? "
                "AND plot_type=? AND filename=?",
                (root_id, run_period, run_number, plot_type, filename),
            ).fetchone()
        return row["image_id"] if row else None


def parse_plot_filename(path: str) -> tuple[str, datetime]:
    """(plot_type, captured_at) for an archived PNG.

    The plot type is the filename stem up to the trailing basic-format
    ISO-8601 UTC token; when the token is absent the whole stem is the
    plot type and the file's modification time is used.
    """
    name = os.path.basename(path)
    m = _FILENAME_TS.search(name)
    if m:
        ts = datetime.strptime(m.group(1), "%Y%m%dT%H%M%SZ").replace(tzinfo=timezone.utc)
        return name[: m.start()], ts
    stem = name[:-4] if name.lower().endswith(".png") else name
    mtime = os.path.getmtime(path)
    return stem, datetime.fromtimestamp(mtime, tz=timezone.utc).replace(microsecond=0)
