"""Unit probing over a patch corpus.

For every unit (channel) of a convolutional layer, records the per-patch
maximum activation as the unit's score, keeps the k top-scoring patches with
their feature maps and argmax locations, and derives a per-unit threshold as
the empirical upper quantile of the score stream. Thresholded, upsampled
feature maps segment the patches for montage rendering.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ValidationError
from .model import Model, _forward_batch
from .tensor import _bilinear_resize
from .train import _assemble_inputs

DEFAULT_K = 12
DEFAULT_QUANTILE = 0.005
DIM_FACTOR = 0.4  # intensity kept by pixels outside the unit's mask
SEPARATOR_PX = 2


def unit_id_str(layer_id: str, unit_index: int) -> str:
    return f"{layer_id}_{unit_index:04d}"


@dataclass
class TopPatch:
    score: float
    patch_id: str
    argmax: tuple[int, int]  # (row, col) in feature-map coordinates
    feature_map: np.ndarray  # [H',W'] float32


@dataclass
class UnitRecord:
    layer_id: str
    unit_index: int
    top_k: list[TopPatch]
    threshold: float
    positive_fraction: float | None = None

    @property
    def unit_id(self) -> str:
        return unit_id_str(self.layer_id, self.unit_index)


@dataclass
class SegmentedPatchView:
    patch_id: str
    overlay: np.ndarray  # [s,s] floats in [0,1]
    mask: np.ndarray  # bool [s,s]


@dataclass
class UnitCatalog:
    model_id: str
    layer_id: str
    k: int
    quantile: float
    units: list[UnitRecord]
    survey_units: list[str] = field(default_factory=list)


def compute_threshold(scores, q: float) -> float:
    """Smallest retained sample such that the fraction of samples strictly
    above it is <= q."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValidationError("cannot compute a threshold from an empty sample set")
    if not 0 < q < 1:
        raise ValidationError(f"quantile must be in (0,1), got {q}")
    a = np.sort(scores)
    n = a.size
    above = n - np.searchsorted(a, a, side="right")
    ok = np.nonzero(above / n <= q)[0]
    return float(a[ok[0]])


def probe(model: Model, layer_id: str, patches, k: int = DEFAULT_K,
          quantile: float = DEFAULT_QUANTILE, spatial_stats: bool = False,
          batch_size: int = 64) -> UnitCatalog:
    """Scores every unit of a conv layer on every patch and keeps the top k.

    Scores stream into the threshold estimator; with spatial_stats=True the
    estimator sees every spatial activation instead of per-patch maxima.
    Results are independent of the input patch ordering (canonicalized by
    patch_id; score ties break toward the lexicographically smaller id).
    """
    layer = model.layer(layer_id)
    if layer.kind != "conv":
        raise ValidationError(
            f"layer {layer_id!r} has kind {layer.kind!r}: unit probing applies only to "
            f"convolutional layers (spatial feature maps are required)"
        )
    if not patches:
        raise ValidationError("probe needs a nonempty patch corpus")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if not 0 < quantile < 1:
        raise ValidationError(f"quantile must be in (0,1), got {quantile}")

    patches = sorted(patches, key=lambda p: p.patch_id)
    xs = _assemble_inputs(patches, model.input_shape)
    n_units, fh, fw = model.output_shape(layer_id)

    # pass 1: per-patch unit scores (plus spatial values when requested)
    scores = np.empty((len(patches), n_units), dtype=np.float32)
    spatial_chunks = [] if spatial_stats else None
    for start in range(0, len(patches), batch_size):
        xb = xs[start : start + batch_size]
        _, captures, _ = _forward_batch(model, xb, capture_ids={layer_id})
        fmap = captures[layer_id]  # [N, U, fh, fw]
        scores[start : start + len(xb)] = fmap.max(axis=(2, 3))
        if spatial_stats:
            spatial_chunks.append(fmap.reshape(len(xb), n_units, fh * fw))

    # top-k per unit: score descending, patch_id ascending on ties
    kept = min(k, len(patches))
    top_indices = np.empty((n_units, kept), dtype=np.intp)
    for u in range(n_units):
        order = np.argsort(-scores[:, u], kind="stable")
        top_indices[u] = order[:kept]

    thresholds = np.empty(n_units, dtype=np.float64)
    if spatial_stats:
        spatial = np.concatenate(spatial_chunks, axis=0)
        for u in range(n_units):
            thresholds[u] = compute_threshold(spatial[:, u, :].ravel(), quantile)
        del spatial, spatial_chunks
    else:
        for u in range(n_units):
            thresholds[u] = compute_threshold(scores[:, u], quantile)

    # pass 2: re-forward only the retained patches to capture their maps
    needed = sorted(set(top_indices.ravel().tolist()))
    maps: dict[int, np.ndarray] = {}
    for start in range(0, len(needed), batch_size):
        sel = needed[start : start + batch_size]
        _, captures, _ = _forward_batch(model, xs[sel], capture_ids={layer_id})
        for row, patch_idx in enumerate(sel):
            maps[patch_idx] = captures[layer_id][row]

    units = []
    for u in range(n_units):
        top = []
        for patch_idx in top_indices[u]:
            fmap = maps[patch_idx][u].copy()
            flat_arg = int(np.argmax(fmap))  # first max: row-major tie order
            top.append(
                TopPatch(
                    score=float(scores[patch_idx, u]),
                    patch_id=patches[patch_idx].patch_id,
                    argmax=(flat_arg // fw, flat_arg % fw),
                    feature_map=fmap,
                )
            )
        units.append(
            UnitRecord(layer_id=layer_id, unit_index=u, top_k=top, threshold=float(thresholds[u]))
        )
    return UnitCatalog(model_id="", layer_id=layer_id, k=k, quantile=quantile, units=units)


def segment_patch(patch, feature_map: np.ndarray, threshold: float) -> SegmentedPatchView:
    """Overlay of the patch with the unit's active region at full intensity
    and the rest dimmed to 40%."""
    pixels = patch.pixels.data[0]
    up = _bilinear_resize(feature_map.astype(np.float64), pixels.shape[0], pixels.shape[1])
    mask = up > threshold
    overlay = np.where(mask, pixels, pixels * DIM_FACTOR).astype(np.float32)
    return SegmentedPatchView(patch_id=patch.patch_id, overlay=overlay, mask=mask)


def montage_grid(n_cells: int) -> tuple[int, int]:
    cols = max(1, math.ceil(math.sqrt(n_cells)))
    rows = math.ceil(n_cells / cols)
    return rows, cols


def render_montage(unit_record: UnitRecord, patches_by_id: dict) -> np.ndarray:
    """uint8 grid image of the unit's segmented top patches, score order,
    row-major, 2px separators (also framing the border)."""
    if not unit_record.top_k:
        raise ValidationError(f"unit {unit_record.unit_id}: no retained patches to render")
    views = []
    for entry in unit_record.top_k:
        patch = patches_by_id.get(entry.patch_id)
        if patch is None:
            raise ValidationError(
                f"unit {unit_record.unit_id}: patch pixels missing for {entry.patch_id!r}"
            )
        views.append(segment_patch(patch, entry.feature_map, unit_record.threshold))
    cell = views[0].overlay.shape[0]
    if any(v.overlay.shape != (cell, cell) for v in views):
        raise ValidationError("montage cells must share one patch size")
    rows, cols = montage_grid(len(views))
    sep = SEPARATOR_PX
    canvas = np.full(
        (rows * cell + (rows + 1) * sep, cols * cell + (cols + 1) * sep), 255, dtype=np.uint8
    )
    for i, view in enumerate(views):
        r, c = divmod(i, cols)
        y = sep + r * (cell + sep)
        x = sep + c * (cell + sep)
        canvas[y : y + cell, x : x + cell] = np.clip(
            np.round(view.overlay * 255.0), 0, 255
        ).astype(np.uint8)
    # unfilled trailing cells stay blank
    return canvas


def rank_units(catalog: UnitCatalog, patch_labels: dict) -> list[str]:
    """Unit ids ordered by the cancer-positive fraction of their top patches
    (descending; ties by unit index). Also fills each record's statistic."""
    ranked = []
    for record in catalog.units:
        fractions = []
        for entry in record.top_k:
            if entry.patch_id not in patch_labels:
                raise ValidationError(f"no label for retained patch {entry.patch_id!r}")
            fractions.append(1.0 if patch_labels[entry.patch_id] else 0.0)
        record.positive_fraction = float(np.mean(fractions)) if fractions else 0.0
        ranked.append(record)
    ranked.sort(key=lambda r: (-r.positive_fraction, r.unit_index))
    return [r.unit_id for r in ranked]


def select_survey_units(ranked_units: list[str], n: int, seed: int) -> list[str]:
    """ceil(n/2) from the top of the ranking plus floor(n/2) sampled from the
    rest, presented in randomized order."""
    if n < 1:
        raise ValidationError(f"survey size must be >= 1, got {n}")
    if n > len(ranked_units):
        raise ValidationError(f"survey size {n} exceeds unit count {len(ranked_units)}")
    n_top = math.ceil(n / 2)
    rng = np.random.default_rng(seed)
    top = list(ranked_units[:n_top])
    rest = list(ranked_units[n_top:])
    n_rest = n - n_top
    if n_rest:
        chosen = rng.choice(len(rest), size=n_rest, replace=False)
        top.extend(rest[i] for i in chosen)
    perm = rng.permutation(len(top))
    return [top[i] for i in perm]


# ---------------------------------------------------------------------------
# catalog directory: catalog.json + montages/ + contexts/
# ---------------------------------------------------------------------------

CATALOG_FILENAME = "catalog.json"


def build_catalog_document(catalog: UnitCatalog, patches_by_id: dict, cases_by_id: dict,
                           extra: dict | None = None) -> dict:
    """JSON-ready catalog document with patch rects and case references the
    survey service needs."""
    referenced_cases = {}
    units_json = []
    for record in catalog.units:
        top = []
        for entry in record.top_k:
            patch = patches_by_id[entry.patch_id]
            case = cases_by_id[patch.source_case_id]
            referenced_cases[case.case_id] = case
            top.append(
                {
                    "patch_id": entry.patch_id,
                    "score": entry.score,
                    "argmax_row": entry.argmax[0],
                    "argmax_col": entry.argmax[1],
                    "case_id": patch.source_case_id,
                    "x0": patch.rect.x0,
                    "y0": patch.rect.y0,
                    "w": patch.rect.w,
                    "h": patch.rect.h,
                    "label": bool(patch.label),
                }
            )
        units_json.append(
            {
                "unit_index": record.unit_index,
                "unit_id": record.unit_id,
                "threshold": record.threshold,
                "positive_fraction": record.positive_fraction,
                "montage": f"montages/{record.unit_id}.png",
                "top": top,
            }
        )
    cases_json = {
        cid: {
            "height": case.image.shape[1],
            "width": case.image.shape[2],
            "context": f"contexts/{cid}.png",
        }
        for cid, case in sorted(referenced_cases.items())
    }
    doc = {
        "format_version": 1,
        "model_id": catalog.model_id,
        "layer": catalog.layer_id,
        "k": catalog.k,
        "quantile": catalog.quantile,
        "units": units_json,
        "survey_units": list(catalog.survey_units),
        "cases": cases_json,
    }
    if extra:
        doc.update(extra)
    return doc


def write_catalog_dir(catalog: UnitCatalog, patches_by_id: dict, cases_by_id: dict,
                      out_dir, extra: dict | None = None) -> dict:
    """Writes catalog.json, one montage PNG per unit, and one context PNG per
    referenced case. Returns the catalog document."""
    from .data import write_png  # local import: data also imports tensor

    doc = build_catalog_document(catalog, patches_by_id, cases_by_id, extra)
    os.makedirs(os.path.join(out_dir, "montages"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "contexts"), exist_ok=True)
    for record in catalog.units:
        img = render_montage(record, patches_by_id)
        Image.fromarray(img, mode="L").save(
            os.path.join(out_dir, "montages", f"{record.unit_id}.png"), format="PNG"
        )
    for cid in doc["cases"]:
        write_png(os.path.join(out_dir, "contexts", f"{cid}.png"), cases_by_id[cid].image.data[0])
    with open(os.path.join(out_dir, CATALOG_FILENAME), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return doc


def load_catalog_dir(catalog_dir) -> dict:
    """Loads and validates a catalog directory for serving or reporting."""
    path = os.path.join(catalog_dir, CATALOG_FILENAME)
    if not os.path.isfile(path):
        raise ValidationError(f"no {CATALOG_FILENAME} in {catalog_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
    if doc.get("format_version") != 1:
        raise ValidationError(f"{path}: unsupported catalog format_version")
    unit_ids = set()
    for unit in doc.get("units", []):
        unit_ids.add(unit["unit_id"])
        montage = os.path.join(catalog_dir, unit["montage"])
        if not os.path.isfile(montage):
            raise ValidationError(f"missing montage file {unit['montage']}")
        for entry in unit["top"]:
            case = doc["cases"].get(entry["case_id"])
            if case is None:
                raise ValidationError(f"patch {entry['patch_id']}: unknown case {entry['case_id']}")
            if (
                entry["x0"] < 0
                or entry["y0"] < 0
                or entry["x0"] + entry["w"] > case["width"]
                or entry["y0"] + entry["h"] > case["height"]
            ):
                raise ValidationError(
                    f"patch {entry['patch_id']}: rect outside case bounds "
                    f"({case['width']}x{case['height']})"
                )
    for cid, case in doc.get("cases", {}).items():
        if not os.path.isfile(os.path.join(catalog_dir, case["context"])):
            raise ValidationError(f"missing context image {case['context']}")
    for sid in doc.get("survey_units", []):
        if sid not in unit_ids:
            raise ValidationError(f"survey unit {sid!r} not present in catalog")
    return doc
