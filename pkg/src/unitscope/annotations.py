"""Append-only annotation log and the lexicon overlap report.

One JSON record per line is the single source of truth: session state and
the report are both pure functions of the replayed log. Appends are fsynced
before being acknowledged, so an acknowledged annotation survives a crash.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field

from .errors import AnnotationLogError, UnitscopeError, ValidationError
from .lexicon import CANCER_ASSOCIATIONS, NO_CATEGORY, Lexicon

logger = logging.getLogger(__name__)

DESCRIPTION_SUMMARY_CHARS = 120


class AnnotationConflict(UnitscopeError):
    """Same annotation_id replayed with a different body."""


@dataclass(frozen=True)
class UnitRef:
    model: str
    layer: str
    unit_index: int


@dataclass(frozen=True)
class Phenomenon:
    description: str
    lexicon_category: str  # a lexicon category id, or "none"
    cancer_association: str  # benign | malignant | unclear | none


@dataclass
class Annotation:
    annotation_id: str
    unit: UnitRef
    reader_id: str
    recognizable: bool
    phenomena: tuple[Phenomenon, ...]
    timestamp: float

    def payload(self):
        """The idempotence identity: everything except the timestamp."""
        return (self.unit, self.reader_id, self.recognizable, self.phenomena)


def validate_annotation(annotation: Annotation, lexicon: Lexicon) -> None:
    if not annotation.annotation_id:
        raise ValidationError("annotation_id must be nonempty")
    if not annotation.reader_id:
        raise ValidationError("reader_id must be nonempty")
    if not annotation.recognizable and annotation.phenomena:
        raise ValidationError("unrecognizable units must not list phenomena")
    for p in annotation.phenomena:
        if not p.description.strip():
            raise ValidationError("phenomenon description must be nonempty")
        if p.cancer_association not in CANCER_ASSOCIATIONS:
            raise ValidationError(
                f"cancer_association must be one of {CANCER_ASSOCIATIONS}, got {p.cancer_association!r}"
            )
        if p.lexicon_category != NO_CATEGORY and not lexicon.has_category(p.lexicon_category):
            raise ValidationError(f"unknown lexicon category {p.lexicon_category!r}")


def annotation_to_record(a: Annotation) -> dict:
    return {
        "annotation_id": a.annotation_id,
        "unit": {"model": a.unit.model, "layer": a.unit.layer, "unit_index": a.unit.unit_index},
        "reader_id": a.reader_id,
        "recognizable": a.recognizable,
        "phenomena": [
            {
                "description": p.description,
                "lexicon_category": p.lexicon_category,
                "cancer_association": p.cancer_association,
            }
            for p in a.phenomena
        ],
        "timestamp": a.timestamp,
    }


def annotation_from_record(record: dict) -> Annotation:
    unit = record["unit"]
    return Annotation(
        annotation_id=str(record["annotation_id"]),
        unit=UnitRef(str(unit["model"]), str(unit["layer"]), int(unit["unit_index"])),
        reader_id=str(record["reader_id"]),
        recognizable=bool(record["recognizable"]),
        phenomena=tuple(
            Phenomenon(
                description=str(p["description"]),
                lexicon_category=str(p.get("lexicon_category", NO_CATEGORY)),
                cancer_association=str(p["cancer_association"]),
            )
            for p in record.get("phenomena", [])
        ),
        timestamp=float(record["timestamp"]),
    )


def load_annotation_log(path) -> list[Annotation]:
    """Replays the log. A torn final line is dropped with a warning; earlier
    corruption is an error. Duplicate ids collapse to the first occurrence."""
    if not os.path.exists(path):
        return []
    with open(path, "rb") as fh:
        raw = fh.read()
    annotations: list[Annotation] = []
    seen: set[str] = set()
    lines = raw.split(b"\n")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            record = json.loads(line.decode("utf-8"))
            annotation = annotation_from_record(record)
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            rest = b"".join(lines[i + 1 :]).strip()
            if not rest:
                logger.warning("annotation log %s: dropping torn trailing record (%s)", path, exc)
                break
            raise AnnotationLogError(f"{path}: corrupt record on line {i + 1}: {exc}") from exc
        if annotation.annotation_id in seen:
            continue
        seen.add(annotation.annotation_id)
        annotations.append(annotation)
    return annotations


class AnnotationStore:
    """In-memory view over the append-only log, with serialized durable appends."""

    def __init__(self, path, lexicon: Lexicon):
        self.path = str(path)
        self.lexicon = lexicon
        self._lock = threading.Lock()
        self._by_id: dict[str, Annotation] = {}
        for a in load_annotation_log(self.path):
            self._by_id[a.annotation_id] = a

    def __len__(self):
        return len(self._by_id)

    def annotations(self) -> list[Annotation]:
        return list(self._by_id.values())

    def get(self, annotation_id: str) -> Annotation | None:
        return self._by_id.get(annotation_id)

    def append(self, annotation: Annotation) -> tuple[Annotation, bool]:
        """Validates and durably appends; returns (record, created).

        Replaying an identical body returns the stored record; a different
        body under the same id raises AnnotationConflict.
        """
        validate_annotation(annotation, self.lexicon)
        with self._lock:
            existing = self._by_id.get(annotation.annotation_id)
            if existing is not None:
                if existing.payload() == annotation.payload():
                    return existing, False
                raise AnnotationConflict(
                    f"annotation {annotation.annotation_id} already stored with a different body"
                )
            line = json.dumps(annotation_to_record(annotation)) + "\n"
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            self._by_id[annotation.annotation_id] = annotation
            return annotation, True

    def annotations_for(self, unit: UnitRef, reader_id: str | None = None) -> list[Annotation]:
        out = []
        for a in self._by_id.values():
            if a.unit == unit and (reader_id is None or a.reader_id == reader_id):
                out.append(a)
        return out

    def completed_units(self, reader_id: str) -> set[UnitRef]:
        return {a.unit for a in self._by_id.values() if a.reader_id == reader_id}


def _unit_key(unit: UnitRef):
    return (unit.model, unit.layer, unit.unit_index)


def compute_report(annotations, lexicon: Lexicon) -> dict:
    """Lexicon overlap report: per group, the distinct annotated units (union
    over readers) plus the underlying rows; with counts of unrecognizable and
    multi-phenomenon (entangled) units."""
    per_group_units: dict[str, set] = {g["id"]: set() for g in lexicon.groups}
    per_group_rows: dict[str, list] = {g["id"]: [] for g in lexicon.groups}
    unrecognizable: set = set()
    entangled: set = set()
    all_units: set = set()

    ordered = sorted(
        annotations, key=lambda a: (_unit_key(a.unit), a.reader_id, a.timestamp, a.annotation_id)
    )
    for a in ordered:
        key = _unit_key(a.unit)
        all_units.add(key)
        if not a.recognizable:
            unrecognizable.add(key)
        if len(a.phenomena) >= 2:
            entangled.add(key)
        for p in a.phenomena:
            group = lexicon.group_of(p.lexicon_category)
            if group is None:
                continue
            per_group_units[group].add(key)
            per_group_rows[group].append(
                {
                    "model": a.unit.model,
                    "layer": a.unit.layer,
                    "unit_index": a.unit.unit_index,
                    "description": p.description[:DESCRIPTION_SUMMARY_CHARS],
                    "cancer_association": p.cancer_association,
                    "reader_id": a.reader_id,
                }
            )
    return {
        "groups": [
            {
                "group": g["id"],
                "display_name": g["display_name"],
                "unit_count": len(per_group_units[g["id"]]),
                "rows": per_group_rows[g["id"]],
            }
            for g in lexicon.groups
        ],
        "unrecognizable_units": len(unrecognizable),
        "entangled_units": len(entangled),
        "units_annotated": len(all_units),
        "annotation_count": len(list(annotations)),
    }


def format_report_table(report: dict) -> str:
    """Human-readable rendering of a report document."""
    lines = []
    lines.append(f"units annotated:      {report['units_annotated']}")
    lines.append(f"annotations:          {report['annotation_count']}")
    lines.append(f"unrecognizable units: {report['unrecognizable_units']}")
    lines.append(f"entangled units:      {report['entangled_units']}")
    lines.append("")
    header = f"{'category':<32}{'units':>6}"
    lines.append(header)
    lines.append("-" * len(header))
    for group in report["groups"]:
        lines.append(f"{group['display_name']:<32}{group['unit_count']:>6}")
        for row in group["rows"]:
            unit = f"{row['model']}/{row['layer']}/{row['unit_index']:04d}"
            lines.append(
                f"    {unit:<28}{row['reader_id']:<12}{row['cancer_association']:<10}"
                f"{row['description']}"
            )
    return "\n".join(lines) + "\n"
