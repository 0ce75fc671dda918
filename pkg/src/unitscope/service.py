"""HTTP survey service: serves the unit catalog and montages, accepts
structured expert reports, and computes the lexicon overlap report.

State model: the catalog is immutable after load; annotations live in an
append-only log (AnnotationStore) and every acknowledged POST is durable
before the response is sent.
"""

from __future__ import annotations

import os
import time
import uuid

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .annotations import (
    Annotation,
    AnnotationConflict,
    AnnotationStore,
    Phenomenon,
    UnitRef,
    annotation_to_record,
    compute_report,
)
from .dissect import load_catalog_dir
from .errors import ValidationError
from .lexicon import Lexicon, load_lexicon


# ---------------------------------------------------------------------------
# wire models
# ---------------------------------------------------------------------------

class PhenomenonIn(BaseModel):
    description: str
    lexicon_category: str = "none"
    cancer_association: str


class AnnotationIn(BaseModel):
    annotation_id: str = Field(default_factory=lambda: str(uuid.uuid4()))
    reader_id: str
    recognizable: bool
    phenomena: list[PhenomenonIn] = []


class PhenomenonOut(BaseModel):
    description: str
    lexicon_category: str
    cancer_association: str


class AnnotationOut(BaseModel):
    annotation_id: str
    unit_id: str
    reader_id: str
    recognizable: bool
    phenomena: list[PhenomenonOut]
    timestamp: float


class UnitSummary(BaseModel):
    unit_id: str
    montage_url: str
    complete: bool


class PatchEntry(BaseModel):
    patch_id: str
    score: float
    case_id: str
    context_url: str
    x0: int
    y0: int
    w: int
    h: int
    argmax_row: int
    argmax_col: int


class UnitDetail(BaseModel):
    unit_id: str
    layer: str
    unit_index: int
    threshold: float
    montage_url: str
    patches: list[PatchEntry]
    annotations: list[AnnotationOut]


class HealthOut(BaseModel):
    status: str
    units: int


# ---------------------------------------------------------------------------
# app state
# ---------------------------------------------------------------------------

class ServiceState:
    def __init__(self, catalog_dir=None, log_path=None, lexicon: Lexicon | None = None):
        self.catalog_dir = catalog_dir
        self.doc = None
        self.units_by_id = {}
        self.lexicon = lexicon
        self.store: AnnotationStore | None = None
        if catalog_dir is not None:
            self.doc = load_catalog_dir(catalog_dir)
            self.units_by_id = {u["unit_id"]: u for u in self.doc["units"]}
        if log_path is not None:
            if lexicon is None:
                raise ValidationError("a lexicon is required to open the annotation log")
            self.store = AnnotationStore(log_path, lexicon)

    @property
    def ready(self) -> bool:
        return self.doc is not None and self.store is not None

    def survey_order(self) -> list[str]:
        ids = self.doc.get("survey_units") or [u["unit_id"] for u in self.doc["units"]]
        return list(ids)

    def unit_ref(self, unit: dict) -> UnitRef:
        return UnitRef(self.doc["model_id"], self.doc["layer"], unit["unit_index"])


def _annotation_out(state: ServiceState, a: Annotation) -> AnnotationOut:
    record = annotation_to_record(a)
    from .dissect import unit_id_str

    return AnnotationOut(
        annotation_id=record["annotation_id"],
        unit_id=unit_id_str(a.unit.layer, a.unit.unit_index),
        reader_id=record["reader_id"],
        recognizable=record["recognizable"],
        phenomena=[PhenomenonOut(**p) for p in record["phenomena"]],
        timestamp=record["timestamp"],
    )


def create_app(catalog_dir=None, log_path=None, lexicon_path=None, ui_dir=None) -> FastAPI:
    lexicon = load_lexicon(lexicon_path) if lexicon_path else None
    state = ServiceState(catalog_dir, log_path, lexicon)
    app = FastAPI(title="unitscope survey service")
    app.state.service = state

    @app.exception_handler(RequestValidationError)
    async def bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    def require_ready() -> ServiceState:
        if not state.ready:
            raise HTTPException(status_code=503, detail="catalog not loaded")
        return state

    @app.get("/api/health", response_model=HealthOut)
    def health():
        s = require_ready()
        return HealthOut(status="ok", units=len(s.doc["units"]))

    @app.get("/api/lexicon")
    def get_lexicon():
        s = require_ready()
        return s.lexicon.to_json()

    @app.get("/api/units", response_model=list[UnitSummary])
    def list_units(reader_id: str = ""):
        s = require_ready()
        completed = s.store.completed_units(reader_id) if reader_id else set()
        out = []
        for uid in s.survey_order():
            unit = s.units_by_id[uid]
            out.append(
                UnitSummary(
                    unit_id=uid,
                    montage_url=f"/assets/{unit['montage']}",
                    complete=s.unit_ref(unit) in completed,
                )
            )
        return out

    @app.get("/api/units/{unit_id}", response_model=UnitDetail)
    def unit_detail(unit_id: str, reader_id: str = ""):
        s = require_ready()
        unit = s.units_by_id.get(unit_id)
        if unit is None or unit_id not in set(s.survey_order()):
            raise HTTPException(status_code=404, detail=f"unknown unit {unit_id!r}")
        patches = []
        for entry in unit["top"]:
            case = s.doc["cases"][entry["case_id"]]
            patches.append(
                PatchEntry(
                    patch_id=entry["patch_id"],
                    score=entry["score"],
                    case_id=entry["case_id"],
                    context_url=f"/assets/{case['context']}",
                    x0=entry["x0"],
                    y0=entry["y0"],
                    w=entry["w"],
                    h=entry["h"],
                    argmax_row=entry["argmax_row"],
                    argmax_col=entry["argmax_col"],
                )
            )
        prior = (
            s.store.annotations_for(s.unit_ref(unit), reader_id) if reader_id else []
        )
        return UnitDetail(
            unit_id=unit_id,
            layer=s.doc["layer"],
            unit_index=unit["unit_index"],
            threshold=unit["threshold"],
            montage_url=f"/assets/{unit['montage']}",
            patches=patches,
            annotations=[_annotation_out(s, a) for a in prior],
        )

    @app.post("/api/units/{unit_id}/annotations", response_model=AnnotationOut, status_code=201)
    def post_annotation(unit_id: str, body: AnnotationIn):
        s = require_ready()
        unit = s.units_by_id.get(unit_id)
        if unit is None or unit_id not in set(s.survey_order()):
            raise HTTPException(status_code=404, detail=f"unknown unit {unit_id!r}")
        annotation = Annotation(
            annotation_id=body.annotation_id,
            unit=s.unit_ref(unit),
            reader_id=body.reader_id,
            recognizable=body.recognizable,
            phenomena=tuple(
                Phenomenon(p.description, p.lexicon_category, p.cancer_association)
                for p in body.phenomena
            ),
            timestamp=time.time(),
        )
        try:
            stored, created = s.store.append(annotation)
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except AnnotationConflict as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        out = _annotation_out(s, stored)
        if created:
            return out
        return JSONResponse(status_code=200, content=out.model_dump())

    @app.get("/api/report")
    def report():
        s = require_ready()
        return compute_report(s.store.annotations(), s.lexicon)

    if catalog_dir is not None:
        app.mount("/assets", StaticFiles(directory=str(catalog_dir)), name="assets")
    if ui_dir is not None and os.path.isdir(ui_dir):
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app
