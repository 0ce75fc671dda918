"""Portable chain models: an ordered layer list plus a flat float32 weight blob.

The on-disk form is a pair of files: a JSON manifest (.netm) describing the
layer chain and where each tensor lives in the blob, and the blob itself
(.netw): raw little-endian float32, tensors concatenated in manifest order,
row-major, no header. save->load round-trips bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ManifestError, ShapeError, ValidationError, WeightBlobError
from .tensor import (
    ConvSpec,
    Tensor,
    _batchnorm_grad_input_batch,
    _batchnorm_inference_batch,
    _conv2d_backward_batch,
    _conv2d_batch,
    _fc_backward_batch,
    _fc_batch,
    _global_avgpool_batch,
    _global_avgpool_grad_batch,
    _maxpool2_batch,
    _maxpool2_grad_batch,
    _maxpool2_relu_grad_batch,
    _relu,
    _relu_grad,
)

FORMAT_VERSION = 1

LAYER_KINDS = ("conv", "relu", "maxpool2", "global_avgpool", "fc", "batchnorm")

# fixed per-kind tensor order inside the blob
WEIGHT_ORDER = {
    "conv": ("weight", "bias"),
    "fc": ("weight", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "var"),
}


@dataclass(frozen=True)
class FcSpec:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class BatchnormSpec:
    channels: int
    eps: float


@dataclass
class LayerDesc:
    id: str
    kind: str
    spec: object = None  # ConvSpec | FcSpec | BatchnormSpec | None


@dataclass
class ActivationCapture:
    layer_id: str
    tensor: Tensor


@dataclass
class Model:
    layers: list[LayerDesc]
    input_shape: tuple[int, int, int]
    weights: dict[str, dict[str, np.ndarray]]
    class_count: int = 2
    layer_shapes: dict[str, tuple] = field(default_factory=dict, repr=False)

    def layer(self, layer_id: str) -> LayerDesc:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise ValidationError(f"no layer with id {layer_id!r}")

    def output_shape(self, layer_id: str) -> tuple:
        return self.layer_shapes[layer_id]


def expected_weight_shapes(layer: LayerDesc) -> dict[str, tuple[int, ...]]:
    if layer.kind == "conv":
        s = layer.spec
        return {
            "weight": (s.out_channels, s.in_channels, s.kernel_h, s.kernel_w),
            "bias": (s.out_channels,),
        }
    if layer.kind == "fc":
        s = layer.spec
        return {"weight": (s.out_features, s.in_features), "bias": (s.out_features,)}
    if layer.kind == "batchnorm":
        c = layer.spec.channels
        return {name: (c,) for name in WEIGHT_ORDER["batchnorm"]}
    return {}


def _shape_after(layer: LayerDesc, shape: tuple) -> tuple:
    kind = layer.kind
    if kind == "conv":
        if len(shape) != 3:
            raise ShapeError(f"layer {layer.id}: conv needs [C,H,W] input, got {shape}")
        if shape[0] != layer.spec.in_channels:
            raise ShapeError(
                f"layer {layer.id}: expects {layer.spec.in_channels} channels, gets {shape[0]}"
            )
        oh, ow = layer.spec.output_hw(shape[1], shape[2])
        return (layer.spec.out_channels, oh, ow)
    if kind == "relu":
        return shape
    if kind == "maxpool2":
        if len(shape) != 3:
            raise ShapeError(f"layer {layer.id}: maxpool2 needs [C,H,W] input, got {shape}")
        if shape[1] % 2 or shape[2] % 2:
            raise ShapeError(f"layer {layer.id}: maxpool2 needs even dims, got {shape[1]}x{shape[2]}")
        return (shape[0], shape[1] // 2, shape[2] // 2)
    if kind == "global_avgpool":
        if len(shape) != 3:
            raise ShapeError(f"layer {layer.id}: global_avgpool needs [C,H,W] input, got {shape}")
        return (shape[0],)
    if kind == "fc":
        if len(shape) != 1:
            raise ShapeError(f"layer {layer.id}: fc needs a vector input, got {shape}")
        if shape[0] != layer.spec.in_features:
            raise ShapeError(
                f"layer {layer.id}: fc expects {layer.spec.in_features} features, gets {shape[0]}"
            )
        return (layer.spec.out_features,)
    if kind == "batchnorm":
        if len(shape) != 3:
            raise ShapeError(f"layer {layer.id}: batchnorm needs [C,H,W] input, got {shape}")
        if shape[0] != layer.spec.channels:
            raise ShapeError(
                f"layer {layer.id}: batchnorm expects {layer.spec.channels} channels, gets {shape[0]}"
            )
        return shape
    raise ManifestError(f"unknown layer kind {kind!r}")


def validate_model(model: Model) -> Model:
    """Eagerly shape-checks the whole chain and records per-layer output shapes."""
    if not model.layers:
        raise ManifestError("model has no layers (no output layer)")
    if model.class_count != 2:
        raise ManifestError(f"class_count must be 2, got {model.class_count}")
    if len(model.input_shape) != 3 or any(int(s) < 1 for s in model.input_shape):
        raise ManifestError(f"input_shape must be [C,H,W] positive, got {model.input_shape}")
    seen = set()
    for layer in model.layers:
        if layer.id in seen:
            raise ManifestError(f"duplicate layer id {layer.id!r}")
        seen.add(layer.id)
        if layer.kind not in LAYER_KINDS:
            raise ManifestError(f"layer {layer.id}: unknown kind {layer.kind!r}")
        expected = expected_weight_shapes(layer)
        have = model.weights.get(layer.id, {})
        if set(have) != set(expected):
            raise ManifestError(
                f"layer {layer.id}: weights {sorted(have)} do not match required {sorted(expected)}"
            )
        for name, shape in expected.items():
            arr = have[name]
            if tuple(arr.shape) != shape:
                raise ShapeError(
                    f"layer {layer.id}: tensor {name} has shape {tuple(arr.shape)}, expected {shape}"
                )
            if arr.dtype != np.float32:
                raise ValidationError(f"layer {layer.id}: tensor {name} must be float32")
            if not np.isfinite(arr).all():
                raise ValidationError(f"layer {layer.id}: tensor {name} contains non-finite values")
        if layer.kind == "batchnorm" and (model.weights[layer.id]["var"] < 0).any():
            raise ValidationError(f"layer {layer.id}: negative variance")
    shape = tuple(int(s) for s in model.input_shape)
    model.layer_shapes = {}
    for layer in model.layers:
        shape = _shape_after(layer, shape)
        model.layer_shapes[layer.id] = shape
    if shape != (model.class_count,):
        raise ShapeError(
            f"chain output shape {shape} does not produce {model.class_count} class logits"
        )
    return model


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _spec_to_json(layer: LayerDesc):
    if layer.kind == "conv":
        s = layer.spec
        return {
            "kernel_h": s.kernel_h,
            "kernel_w": s.kernel_w,
            "stride": s.stride,
            "padding": s.padding,
            "in_channels": s.in_channels,
            "out_channels": s.out_channels,
        }
    if layer.kind == "fc":
        return {"in_features": layer.spec.in_features, "out_features": layer.spec.out_features}
    if layer.kind == "batchnorm":
        return {"channels": layer.spec.channels, "eps": layer.spec.eps}
    return None


def _spec_from_json(kind: str, raw, layer_id: str):
    try:
        if kind == "conv":
            return ConvSpec(
                kernel_h=int(raw["kernel_h"]),
                kernel_w=int(raw["kernel_w"]),
                stride=int(raw["stride"]),
                padding=int(raw["padding"]),
                in_channels=int(raw["in_channels"]),
                out_channels=int(raw["out_channels"]),
            )
        if kind == "fc":
            return FcSpec(int(raw["in_features"]), int(raw["out_features"]))
        if kind == "batchnorm":
            return BatchnormSpec(int(raw["channels"]), float(raw["eps"]))
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"layer {layer_id}: bad {kind} spec: {exc}") from exc
    if raw not in (None, {}):
        raise ManifestError(f"layer {layer_id}: kind {kind!r} takes no spec")
    return None


def save_model(model: Model) -> tuple[str, bytes]:
    """Canonical (manifest_text, weight_blob) pair; stable bytes for equal models."""
    validate_model(model)
    blob = bytearray()
    layers_json = []
    for layer in model.layers:
        entry = {"id": layer.id, "kind": layer.kind}
        spec = _spec_to_json(layer)
        if spec is not None:
            entry["spec"] = spec
        order = WEIGHT_ORDER.get(layer.kind, ())
        if order:
            weights = {}
            for name in order:
                arr = np.ascontiguousarray(model.weights[layer.id][name], dtype="<f4")
                weights[name] = {"shape": list(arr.shape), "offset": len(blob)}
                blob.extend(arr.tobytes())
            entry["weights"] = weights
        layers_json.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "layers": layers_json,
    }
    return json.dumps(manifest, indent=2) + "\n", bytes(blob)


def load_model(manifest_text: str, weight_blob: bytes) -> Model:
    """Parses and validates a manifest/blob pair; blob must be exactly consumed."""
    try:
        manifest = json.loads(manifest_text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ManifestError("manifest root must be an object")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ManifestError(f"unsupported format_version {version!r}")
    for key in ("input_shape", "layers"):
        if key not in manifest:
            raise ManifestError(f"manifest missing {key!r}")
    input_shape = tuple(int(s) for s in manifest["input_shape"])
    class_count = int(manifest.get("class_count", 2))

    layers: list[LayerDesc] = []
    weights: dict[str, dict[str, np.ndarray]] = {}
    cursor = 0
    for raw in manifest["layers"]:
        if not isinstance(raw, dict) or "id" not in raw or "kind" not in raw:
            raise ManifestError(f"malformed layer record: {raw!r}")
        layer = LayerDesc(id=str(raw["id"]), kind=str(raw["kind"]))
        if layer.kind not in LAYER_KINDS:
            raise ManifestError(f"layer {layer.id}: unknown kind {layer.kind!r}")
        layer.spec = _spec_from_json(layer.kind, raw.get("spec"), layer.id)
        layers.append(layer)
        order = WEIGHT_ORDER.get(layer.kind, ())
        declared = raw.get("weights", {})
        if set(declared) != set(order):
            raise ManifestError(
                f"layer {layer.id}: declares tensors {sorted(declared)}, expected {sorted(order)}"
            )
        if not order:
            continue
        expected = expected_weight_shapes(layer)
        weights[layer.id] = {}
        for name in order:
            ref = declared[name]
            shape = tuple(int(s) for s in ref["shape"])
            offset = int(ref["offset"])
            if shape != expected[name]:
                raise ShapeError(
                    f"layer {layer.id}: tensor {name} declares shape {shape}, expected {expected[name]}"
                )
            if offset != cursor:
                raise WeightBlobError(
                    f"layer {layer.id}: tensor {name} at byte offset {offset}, expected {cursor}"
                )
            nbytes = int(np.prod(shape)) * 4
            if offset + nbytes > len(weight_blob):
                raise WeightBlobError(
                    f"blob too short: tensor {layer.id}.{name} needs bytes "
                    f"[{offset}, {offset + nbytes}), blob has {len(weight_blob)}"
                )
            arr = np.frombuffer(weight_blob, dtype="<f4", count=int(np.prod(shape)), offset=offset)
            weights[layer.id][name] = arr.reshape(shape).astype(np.float32)
            cursor = offset + nbytes
    if cursor != len(weight_blob):
        raise WeightBlobError(
            f"blob has {len(weight_blob) - cursor} trailing bytes after offset {cursor}"
        )
    model = Model(layers=layers, input_shape=input_shape, weights=weights, class_count=class_count)
    return validate_model(model)


def save_model_files(model: Model, base_path) -> tuple[str, str]:
    """Writes <base>.netm and <base>.netw; returns the two paths."""
    manifest_text, blob = save_model(model)
    manifest_path = f"{base_path}.netm"
    blob_path = f"{base_path}.netw"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write(manifest_text)
    with open(blob_path, "wb") as fh:
        fh.write(blob)
    return manifest_path, blob_path


def load_model_files(base_path) -> Model:
    with open(f"{base_path}.netm", "r", encoding="utf-8") as fh:
        manifest_text = fh.read()
    with open(f"{base_path}.netw", "rb") as fh:
        blob = fh.read()
    return load_model(manifest_text, blob)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _forward_batch(model: Model, xb: np.ndarray, capture_ids=frozenset(), keep_cache=False):
    """Batched forward pass. Returns (logits [N,2], captures dict, cache list).

    The cache holds what each layer's backward needs, in layer order.
    """
    captures = {}
    cache = [] if keep_cache else None
    out = xb
    for pos, layer in enumerate(model.layers):
        kind = layer.kind
        if kind == "conv":
            s = layer.spec
            w = model.weights[layer.id]
            if keep_cache:
                cache.append(("conv", layer.id, out))
            out = _conv2d_batch(out, w["weight"], w["bias"], s.stride, s.padding)
        elif kind == "relu":
            if keep_cache and pos > 0:
                np.maximum(out, 0, out=out)  # pos>0: array is layer-owned
            else:
                out = _relu(out)
            if keep_cache:
                cache.append(("relu", layer.id, out))
        elif kind == "maxpool2":
            out, idx = _maxpool2_batch(out)
            if keep_cache:
                cache.append(("maxpool2", layer.id, idx))
        elif kind == "global_avgpool":
            hw = out.shape[2], out.shape[3]
            out = _global_avgpool_batch(out)
            if keep_cache:
                cache.append(("global_avgpool", layer.id, hw))
        elif kind == "fc":
            w = model.weights[layer.id]
            if keep_cache:
                cache.append(("fc", layer.id, out))
            out = _fc_batch(out, w["weight"], w["bias"])
        elif kind == "batchnorm":
            w = model.weights[layer.id]
            out = _batchnorm_inference_batch(
                out, w["mean"], w["var"], w["gamma"], w["beta"], layer.spec.eps
            )
            if keep_cache:
                cache.append(("batchnorm", layer.id, None))
        if layer.id in capture_ids:
            captures[layer.id] = out.copy()
    return out, captures, cache


def _backward_batch(model: Model, cache, grad_logits: np.ndarray):
    """Backpropagates grad_logits through the cached forward pass.

    Returns {layer_id: {tensor_name: grad}} for conv and fc layers. Batchnorm
    statistics and affine parameters are frozen (inference-only support).
    """
    grads: dict[str, dict[str, np.ndarray]] = {}
    g = grad_logits
    i = len(model.layers) - 1
    while i >= 0:
        layer = model.layers[i]
        kind, _, saved = cache[i]
        assert kind == layer.kind
        if kind == "conv":
            w = model.weights[layer.id]["weight"]
            need_gx = i > 0
            gx, gw, gb = _conv2d_backward_batch(
                g, saved, w, layer.spec.stride, layer.spec.padding, need_grad_input=need_gx
            )
            grads[layer.id] = {"weight": gw, "bias": gb}
            g = gx
        elif kind == "relu":
            g = _relu_grad(g, saved)
        elif kind == "maxpool2":
            if i > 0 and model.layers[i - 1].kind == "relu":
                relu_out = cache[i - 1][2]
                g = _maxpool2_relu_grad_batch(g, saved, relu_out)
                i -= 1  # relu backward folded in
            else:
                g = _maxpool2_grad_batch(g, saved)
        elif kind == "global_avgpool":
            h, w = saved
            g = _global_avgpool_grad_batch(g, h, w)
        elif kind == "fc":
            w = model.weights[layer.id]["weight"]
            gx, gw, gb = _fc_backward_batch(g, saved, w)
            grads[layer.id] = {"weight": gw, "bias": gb}
            g = gx
        elif kind == "batchnorm":
            w = model.weights[layer.id]
            g = _batchnorm_grad_input_batch(g, w["var"], w["gamma"], layer.spec.eps)
        i -= 1
    return grads


def forward(model: Model, x: Tensor, capture_ids=frozenset()):
    """Runs the chain on one input; returns (logits, captures in layer order)."""
    capture_ids = frozenset(capture_ids)
    known = {layer.id for layer in model.layers}
    unknown = capture_ids - known
    if unknown:
        raise ValidationError(f"unknown capture layer ids: {sorted(unknown)}")
    if tuple(x.shape) != tuple(model.input_shape):
        raise ShapeError(f"input shape {x.shape} != model input shape {tuple(model.input_shape)}")
    out, captures, _ = _forward_batch(model, x.data[None], capture_ids)
    ordered = [
        ActivationCapture(layer.id, Tensor(captures[layer.id][0]))
        for layer in model.layers
        if layer.id in captures
    ]
    return Tensor(out[0]), ordered


def trainable_parameters(model: Model):
    """Ordered (layer_id, tensor_name, array) triples updated by the optimizer."""
    out = []
    for layer in model.layers:
        if layer.kind in ("conv", "fc"):
            for name in WEIGHT_ORDER[layer.kind]:
                out.append((layer.id, name, model.weights[layer.id][name]))
    return out


def parameter_count(model: Model) -> int:
    return sum(arr.size for _, _, arr in trainable_parameters(model))


def copy_model(model: Model) -> Model:
    weights = {lid: {k: v.copy() for k, v in w.items()} for lid, w in model.weights.items()}
    return validate_model(
        Model(
            layers=[LayerDesc(l.id, l.kind, l.spec) for l in model.layers],
            input_shape=tuple(model.input_shape),
            weights=weights,
            class_count=model.class_count,
        )
    )
