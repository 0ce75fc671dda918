"""Cases, patches, and splits.

A Case is one grayscale scan plus its lesion mask. Patches are square
windows cut on a sliding grid (window 25% of the short image side, stride
50% of the window), resized to the network input size, and labeled positive
when they contain at least 30% of some lesion or are at least 30% covered
by lesion pixels. Splits are grouped by patient so no patient straddles
train/val/test.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ValidationError
from .tensor import Tensor, _bilinear_resize

IMAGE_LABELS = ("cancerous", "normal", "benign", "benign_without_callback")

NETWORK_INPUT_SIZE = 128
WINDOW_FRAC = 0.25
STRIDE_FRAC = 0.5
MIN_WINDOW = 16


@dataclass
class Case:
    case_id: str
    patient_id: str
    image: Tensor  # [1,H,W], values in [0,1]
    lesion_mask: np.ndarray  # bool [H,W]
    image_label: str

    def __post_init__(self):
        if self.image_label not in IMAGE_LABELS:
            raise ValidationError(f"unknown image_label {self.image_label!r}")
        if self.image.data.ndim != 3 or self.image.shape[0] != 1:
            raise ValidationError(f"case image must be [1,H,W], got {self.image.shape}")
        if self.lesion_mask.shape != self.image.shape[1:]:
            raise ValidationError(
                f"mask dims {self.lesion_mask.shape} != image dims {self.image.shape[1:]}"
            )
        if self.lesion_mask.dtype != bool:
            self.lesion_mask = self.lesion_mask.astype(bool)
        if self.lesion_mask.any() and self.image_label == "normal":
            raise ValidationError("case labeled normal but lesion mask is nonempty")


@dataclass(frozen=True)
class PatchRect:
    x0: int
    y0: int
    w: int
    h: int


@dataclass
class Patch:
    rect: PatchRect
    pixels: Tensor  # [1,s,s]
    label: bool
    source_case_id: str
    patch_id: str


@dataclass
class SplitAssignment:
    by_patient: dict[str, str]
    seed: int

    def split_of(self, case: Case) -> str:
        return self.by_patient[case.patient_id]

    def cases_in(self, cases, split: str):
        return [c for c in cases if self.by_patient[c.patient_id] == split]


class _LesionIndex:
    """One connected-component pass over a mask, reused across many rects."""

    def __init__(self, lesion_mask: np.ndarray):
        self.mask = lesion_mask
        self.labels, self.count = ndimage.label(lesion_mask)
        self.totals = np.bincount(self.labels.ravel(), minlength=self.count + 1)

    def rect_is_positive(self, rect: PatchRect) -> bool:
        h, w = self.mask.shape
        if rect.x0 < 0 or rect.y0 < 0 or rect.x0 + rect.w > w or rect.y0 + rect.h > h:
            raise ValidationError(f"rect {rect} outside mask bounds {w}x{h}")
        window = self.mask[rect.y0 : rect.y0 + rect.h, rect.x0 : rect.x0 + rect.w]
        inside_total = int(window.sum())
        if inside_total == 0:
            return False
        # integer arithmetic keeps the >= 30% boundary exact
        if inside_total * 10 >= 3 * rect.w * rect.h:
            return True
        insides = np.bincount(
            self.labels[rect.y0 : rect.y0 + rect.h, rect.x0 : rect.x0 + rect.w].ravel(),
            minlength=self.count + 1,
        )
        for lesion in range(1, self.count + 1):
            if insides[lesion] * 10 >= 3 * self.totals[lesion]:
                return True
        return False


def label_patch(rect: PatchRect, lesion_mask: np.ndarray) -> bool:
    """Positive iff some lesion is >=30% inside the rect, or the rect is
    >=30% covered by lesion pixels. Comparisons are inclusive; lesions are
    4-connected mask components."""
    return _LesionIndex(lesion_mask).rect_is_positive(rect)


def extract_patches(case: Case, window_frac: float = WINDOW_FRAC,
                    stride_frac: float = STRIDE_FRAC,
                    out_size: int = NETWORK_INPUT_SIZE) -> list[Patch]:
    """Square sliding-window patches fully inside the image, row-major order."""
    _, h, w = case.image.shape
    win = int(window_frac * min(h, w))
    if win < MIN_WINDOW:
        raise ValidationError(
            f"case {case.case_id}: window {win}px below minimum {MIN_WINDOW}px "
            f"(image {h}x{w}, window_frac {window_frac})"
        )
    stride = max(1, int(stride_frac * win))
    img = case.image.data[0]
    lesions = _LesionIndex(case.lesion_mask)
    patches = []
    for y0 in range(0, h - win + 1, stride):
        for x0 in range(0, w - win + 1, stride):
            rect = PatchRect(x0=x0, y0=y0, w=win, h=win)
            crop = img[y0 : y0 + win, x0 : x0 + win]
            if win != out_size:
                crop = _bilinear_resize(crop, out_size, out_size)
            patches.append(
                Patch(
                    rect=rect,
                    pixels=Tensor(crop[None]),
                    label=lesions.rect_is_positive(rect),
                    source_case_id=case.case_id,
                    patch_id=f"{case.case_id}:{x0},{y0}",
                )
            )
    return patches


def expected_patch_grid(h: int, w: int, window_frac: float = WINDOW_FRAC,
                        stride_frac: float = STRIDE_FRAC) -> tuple[int, int]:
    win = int(window_frac * min(h, w))
    stride = max(1, int(stride_frac * win))
    return (h - win) // stride + 1, (w - win) // stride + 1


def split_dataset(cases, seed: int) -> SplitAssignment:
    """Patient-grouped 80/10/10 split, deterministic in the seed."""
    patients = sorted({c.patient_id for c in cases})
    if len(patients) < 3:
        raise ValidationError(f"need at least 3 patients to split, got {len(patients)}")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n = len(patients)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    by_patient = {}
    for i, pid in enumerate(order):
        if i < n_train:
            by_patient[pid] = "train"
        elif i < n_train + n_val:
            by_patient[pid] = "val"
        else:
            by_patient[pid] = "test"
    return SplitAssignment(by_patient=by_patient, seed=seed)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

SYNTH_SIZE = 256


def _stamp_mass(rng, img, mask):
    ax = rng.uniform(8.0, 24.0)
    ay = rng.uniform(8.0, 24.0)
    margin = 28
    cx = rng.uniform(margin, SYNTH_SIZE - margin)
    cy = rng.uniform(margin, SYNTH_SIZE - margin)
    boost = rng.uniform(0.3, 0.6)
    ys = np.arange(SYNTH_SIZE)[:, None]
    xs = np.arange(SYNTH_SIZE)[None, :]
    support = ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
    img[support] += boost
    mask |= support


def _stamp_calcification(rng, img, mask):
    # beaded chain: 2x2 bright dots stepping 2px along one axis with +-1px
    # lateral jitter, so consecutive dots stay 4-connected
    n_dots = int(rng.integers(5, 13))
    margin = 32
    y = int(rng.integers(margin, SYNTH_SIZE - margin))
    x = int(rng.integers(margin, SYNTH_SIZE - margin))
    direction = int(rng.integers(0, 4))  # 0:+y 1:-y 2:+x 3:-x
    for _ in range(n_dots):
        boost = rng.uniform(0.4, 0.6)
        img[y : y + 2, x : x + 2] += boost
        mask[y : y + 2, x : x + 2] = True
        jitter = int(rng.integers(-1, 2))
        if direction == 0:
            y, x = y + 2, x + jitter
        elif direction == 1:
            y, x = y - 2, x + jitter
        elif direction == 2:
            y, x = y + jitter, x + 2
        else:
            y, x = y + jitter, x - 2


def generate_synthetic_case(seed, positive: bool, case_id: str | None = None,
                            patient_id: str | None = None) -> Case:
    """Deterministic 256x256 case: low-frequency background texture, plus
    1-3 lesions (bright masses or calcification chains) when positive.

    seed may be an int or a sequence of ints (e.g. [corpus_seed, case_index])."""
    entropy = [int(s) for s in seed] if isinstance(seed, (list, tuple)) else [int(seed)]
    rng = np.random.default_rng(entropy + [int(positive)])
    # background stays well below lesion intensities so lesions are the
    # dominant brightness structure (keeps the desk-scale task learnable
    # at the fixed fine-tuning hyperparameters)
    coarse = rng.uniform(0.2, 0.38, size=(9, 9))
    img = _bilinear_resize(coarse, SYNTH_SIZE, SYNTH_SIZE)
    img += rng.uniform(-0.015, 0.015, size=(SYNTH_SIZE, SYNTH_SIZE))
    mask = np.zeros((SYNTH_SIZE, SYNTH_SIZE), dtype=bool)
    if positive:
        for _ in range(int(rng.integers(1, 4))):
            if rng.random() < 0.75:
                _stamp_mass(rng, img, mask)
            else:
                _stamp_calcification(rng, img, mask)
    np.clip(img, 0.0, 1.0, out=img)
    case_id = case_id or "syn" + "_".join(str(s) for s in entropy)
    return Case(
        case_id=case_id,
        patient_id=patient_id or case_id,
        image=Tensor(img[None].astype(np.float32)),
        lesion_mask=mask,
        image_label="cancerous" if positive else "normal",
    )


# ---------------------------------------------------------------------------
# file I/O: PGM (P5, 8-bit), PNG grayscale, case index
# ---------------------------------------------------------------------------

def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM from float values in [0,1]."""
    data = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Reads binary 8-bit PGM; returns floats in [0,1] (normalized by maxval)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM (P5) file")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ValidationError(f"{path}: bad PGM header: {exc}") from exc
    if not 0 < maxval <= 255:
        raise ValidationError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
    body = raw[pos : pos + w * h]
    if len(body) != w * h:
        raise ValidationError(f"{path}: PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float32) / maxval


def read_image(path) -> np.ndarray:
    """Grayscale image as floats in [0,1]; PGM and PNG supported."""
    path = str(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        return read_pgm(path)
    if ext == ".png":
        try:
            with Image.open(path) as im:
                if im.mode in ("I;16", "I"):
                    arr = np.asarray(im, dtype=np.float64) / 65535.0
                else:
                    arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise ValidationError(f"{path}: unreadable PNG: {exc}") from exc
        return arr.astype(np.float32)
    raise ValidationError(f"{path}: unsupported image format {ext!r} (PGM or PNG)")


def write_png(path, values: np.ndarray) -> None:
    data = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_case(image_path, mask_path, metadata: dict) -> Case:
    """Reads image and mask files; mask binarized at 0.5."""
    img = read_image(image_path)
    mask = read_image(mask_path)
    if mask.shape != img.shape:
        raise ValidationError(
            f"mask dims {mask.shape} ({mask_path}) != image dims {img.shape} ({image_path})"
        )
    return Case(
        case_id=str(metadata["case_id"]),
        patient_id=str(metadata["patient_id"]),
        image=Tensor(img[None]),
        lesion_mask=mask >= 0.5,
        image_label=str(metadata["image_label"]),
    )


def save_case(case: Case, out_dir) -> dict:
    """Writes <out>/images/<id>.pgm and <out>/masks/<id>.pgm; returns the
    index record with paths relative to out_dir."""
    images_dir = os.path.join(out_dir, "images")
    masks_dir = os.path.join(out_dir, "masks")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    image_rel = os.path.join("images", f"{case.case_id}.pgm")
    mask_rel = os.path.join("masks", f"{case.case_id}.pgm")
    write_pgm(os.path.join(out_dir, image_rel), case.image.data[0])
    write_pgm(os.path.join(out_dir, mask_rel), case.lesion_mask.astype(np.float32))
    return {
        "case_id": case.case_id,
        "patient_id": case.patient_id,
        "image_path": image_rel,
        "mask_path": mask_rel,
        "image_label": case.image_label,
    }


def write_case_index(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def read_case_index(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: bad index record: {exc}") from exc
            missing = {"case_id", "patient_id", "image_path", "mask_path", "image_label"} - set(record)
            if missing:
                raise ValidationError(f"{path}:{lineno}: index record missing {sorted(missing)}")
            records.append(record)
    return records


def load_cases_from_index(index_path) -> list[Case]:
    base = os.path.dirname(os.path.abspath(index_path))
    cases = []
    for record in read_case_index(index_path):
        cases.append(
            load_case(
                os.path.join(base, record["image_path"]),
                os.path.join(base, record["mask_path"]),
                record,
            )
        )
    return cases
