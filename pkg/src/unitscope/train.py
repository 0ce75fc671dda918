"""SGD fine-tuning of the patch classifier, plus AUC evaluation.

Defaults follow the training recipe the platform standardizes on: learning
rate 1e-4, momentum 0.9, weight decay 1e-4. Training is deterministic given
the seed: patches are canonicalized by patch_id, shuffles come from one
seeded generator, and every reduction runs in a fixed order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingDiverged, ValidationError
from .model import (
    ConvSpec,
    LayerDesc,
    Model,
    _backward_batch,
    _forward_batch,
    copy_model,
    trainable_parameters,
    validate_model,
)
from .model import FcSpec
from .tensor import _softmax_xent_batch


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    rng_seed: int = 1
    # lesion patches are rare (<10% of windows); without reweighting the
    # head spends the whole run fitting the class prior instead of ranking
    class_balanced: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class MomentumState:
    """Per-parameter velocity tensors, zero-initialized lazily."""

    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def get(self, key: str, like: np.ndarray) -> np.ndarray:
        v = self.velocity.get(key)
        if v is None:
            v = np.zeros_like(like)
            self.velocity[key] = v
        return v


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    val_auc: float | None = None


@dataclass
class EvalResult:
    auc: float
    n_pos: int
    n_neg: int
    scores: list[float]
    patch_ids: list[str]


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: MomentumState, config: TrainConfig) -> None:
    """Classical momentum SGD with L2 folded into the gradient, in place.

    v <- momentum*v + (g + weight_decay*w);  w <- w - lr*v
    """
    for key, w in params.items():
        g = grads[key]
        if w.shape != g.shape:
            raise ShapeError(f"parameter {key}: weight shape {w.shape} != grad shape {g.shape}")
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for parameter {key}")
        v = state.get(key, w)
        g_eff = g if config.weight_decay == 0 else g + np.float32(config.weight_decay) * w
        v *= np.float32(config.momentum)
        v += g_eff
        w -= np.float32(config.learning_rate) * v


def _assemble_inputs(patches, input_shape) -> np.ndarray:
    c, h, w = input_shape
    xs = np.empty((len(patches), c, h, w), dtype=np.float32)
    for i, patch in enumerate(patches):
        px = patch.pixels.data
        if px.shape == (c, h, w):
            xs[i] = px
        elif px.shape == (1, h, w) and c == 3:
            xs[i] = np.repeat(px, 3, axis=0)  # grayscale replicated for RGB models
        else:
            raise ShapeError(
                f"patch {patch.patch_id}: pixels {px.shape} incompatible with model input {input_shape}"
            )
    return xs


def train(model: Model, patches, config: TrainConfig, val_patches=None):
    """Trains a copy of the model; returns (trained_model, per-epoch stats).

    Patches are processed in seeded-shuffled minibatches over the canonical
    (patch_id-sorted) order, so the result depends only on the patch set and
    the seed.
    """
    if not patches:
        raise ValidationError("training set is empty")
    patches = sorted(patches, key=lambda p: p.patch_id)
    labels_all = np.array([1 if p.label else 0 for p in patches], dtype=np.intp)
    if labels_all.min() == labels_all.max():
        raise ValidationError("training set contains a single class; need both labels")

    model = copy_model(model)
    xs = _assemble_inputs(patches, model.input_shape)
    params = {f"{lid}.{name}": arr for lid, name, arr in trainable_parameters(model)}
    state = MomentumState()
    rng = np.random.default_rng(config.rng_seed)
    curve: list[EpochStats] = []

    # gradient weights per class (recorded losses stay unweighted)
    class_weight = np.ones(2, dtype=np.float64)
    if config.class_balanced:
        n_pos = int(labels_all.sum())
        n_neg = len(labels_all) - n_pos
        class_weight = np.array(
            [len(labels_all) / (2.0 * n_neg), len(labels_all) / (2.0 * n_pos)]
        )

    for epoch in range(config.epochs):
        perm = rng.permutation(len(patches))
        loss_sum = 0.0
        for start in range(0, len(perm), config.batch_size):
            sel = perm[start : start + config.batch_size]
            xb = xs[sel]
            yb = labels_all[sel]
            logits, _, cache = _forward_batch(model, xb, keep_cache=True)
            losses, grad_logits = _softmax_xent_batch(logits, yb)
            loss_sum += float(losses.sum())
            grad_logits *= class_weight[yb][:, None]
            grad_logits = (grad_logits / len(sel)).astype(np.float32)
            layer_grads = _backward_batch(model, cache, grad_logits)
            grads = {
                f"{lid}.{name}": g
                for lid, named in layer_grads.items()
                for name, g in named.items()
            }
            sgd_step(params, grads, state, config)
        stats = EpochStats(epoch=epoch, mean_loss=loss_sum / len(patches))
        if val_patches:
            result = evaluate_model(model, val_patches)
            stats.val_auc = result.auc
        curve.append(stats)
    return model, curve


def predict_scores(model: Model, patches, batch_size: int = 64) -> np.ndarray:
    """Cancer-positive probability (softmax of the positive logit) per patch."""
    xs = _assemble_inputs(patches, model.input_shape)
    out = np.empty(len(patches), dtype=np.float64)
    for start in range(0, len(patches), batch_size):
        xb = xs[start : start + batch_size]
        logits, _, _ = _forward_batch(model, xb)
        z = logits.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        out[start : start + len(xb)] = e[:, 1] / e.sum(axis=1)
    return out


def evaluate_auc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties: P(score_pos > score_neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) != len(labels):
        raise ValidationError("scores and labels differ in length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos < 1 or n_neg < 1:
        raise ValidationError(f"AUC needs both classes; got {n_pos} positive, {n_neg} negative")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate_model(model: Model, patches, batch_size: int = 64) -> EvalResult:
    scores = predict_scores(model, patches, batch_size)
    labels = [1 if p.label else 0 for p in patches]
    auc = evaluate_auc(scores, labels)
    return EvalResult(
        auc=auc,
        n_pos=sum(labels),
        n_neg=len(labels) - sum(labels),
        scores=[float(s) for s in scores],
        patch_ids=[p.patch_id for p in patches],
    )


def write_metrics(curve, path) -> None:
    """Newline-delimited {epoch, mean_loss, val_auc} records."""
    with open(path, "w", encoding="utf-8") as fh:
        for stats in curve:
            fh.write(
                json.dumps(
                    {"epoch": stats.epoch, "mean_loss": stats.mean_loss, "val_auc": stats.val_auc}
                )
                + "\n"
            )


DISSECT_LAYER_DEFAULT = "conv3"


def build_dissectnet_t(seed: int) -> Model:
    """The small trainable network: 3 conv/relu/pool stages, GAP, 2-way head.

    He-style seeded initialization; input 1x128x128; the final conv layer
    ("conv3") is the default dissection target.
    """
    rng = np.random.default_rng(seed)

    def he_conv(c_out, c_in, k):
        std = np.sqrt(2.0 / (c_in * k * k))
        return (rng.standard_normal((c_out, c_in, k, k)) * std).astype(np.float32)

    def he_fc(m, n):
        return (rng.standard_normal((m, n)) * np.sqrt(2.0 / n)).astype(np.float32)

    layers = [
        LayerDesc("conv1", "conv", ConvSpec(3, 3, 1, 1, 1, 8)),
        LayerDesc("relu1", "relu"),
        LayerDesc("pool1", "maxpool2"),
        LayerDesc("conv2", "conv", ConvSpec(3, 3, 1, 1, 8, 16)),
        LayerDesc("relu2", "relu"),
        LayerDesc("pool2", "maxpool2"),
        LayerDesc("conv3", "conv", ConvSpec(3, 3, 1, 1, 16, 32)),
        LayerDesc("relu3", "relu"),
        LayerDesc("pool3", "maxpool2"),
        LayerDesc("gap", "global_avgpool"),
        LayerDesc("fc", "fc", FcSpec(32, 2)),
    ]
    weights = {
        "conv1": {"weight": he_conv(8, 1, 3), "bias": np.zeros(8, np.float32)},
        "conv2": {"weight": he_conv(16, 8, 3), "bias": np.zeros(16, np.float32)},
        "conv3": {"weight": he_conv(32, 16, 3), "bias": np.zeros(32, np.float32)},
        "fc": {"weight": he_fc(2, 32), "bias": np.zeros(2, np.float32)},
    }
    return validate_model(Model(layers=layers, input_shape=(1, 128, 128), weights=weights))
