"""Dense numeric primitives for the adaptation models.

A model is a small fully connected feature extractor (affine layers, each
followed by ReLU) plus two affine classifier heads that read the shared
features: one head for labeled source subjects, one for pseudo-labeled
target samples. All arithmetic is float64 and single threaded; forward
passes are pure functions of (parameters, input), so repeated calls are
bitwise identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError, TrainingError, ValidationError

CHECKPOINT_FORMAT_VERSION = 1


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array and require all entries finite."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


@dataclass
class AffineLayer:
    """One affine map y = x @ w + b; w is (in_dim, out_dim), b is (out_dim,)."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.ndim != 1 or self.b.shape[0] != self.w.shape[1]:
            raise ShapeError(
                f"affine layer shapes inconsistent: w{self.w.shape}, b{self.b.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w.shape[1]

    def copy(self) -> "AffineLayer":
        return AffineLayer(self.w.copy(), self.b.copy())


def _check_finite_params(layer: AffineLayer, name: str) -> None:
    if not np.all(np.isfinite(layer.w)):
        raise ValidationError(f"{name}.w contains non-finite entries")
    if not np.all(np.isfinite(layer.b)):
        raise ValidationError(f"{name}.b contains non-finite entries")


@dataclass
class ModelState:
    """Parameters of the extractor and both classifier heads.

    Treated as immutable after construction; `sgd_step` returns a new state.
    """

    extractor_layers: list[AffineLayer]
    source_head: AffineLayer
    target_head: AffineLayer

    def __post_init__(self):
        if not self.extractor_layers:
            raise ValidationError("extractor needs at least one layer")
        for i, layer in enumerate(self.extractor_layers):
            _check_finite_params(layer, f"extractor[{i}]")
            if i > 0 and layer.in_dim != self.extractor_layers[i - 1].out_dim:
                raise ShapeError(
                    f"extractor layer {i} expects in_dim="
                    f"{self.extractor_layers[i - 1].out_dim}, got {layer.in_dim}"
                )
        feat = self.extractor_layers[-1].out_dim
        for name, head in (("source_head", self.source_head), ("target_head", self.target_head)):
            _check_finite_params(head, name)
            if head.in_dim != feat:
                raise ShapeError(f"{name} expects in_dim={feat}, got {head.in_dim}")
        if self.source_head.w.shape != self.target_head.w.shape:
            raise ShapeError(
                f"heads must have identical shapes: "
                f"{self.source_head.w.shape} vs {self.target_head.w.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.extractor_layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.extractor_layers[-1].out_dim

    @property
    def num_classes(self) -> int:
        return self.source_head.out_dim

    def copy(self) -> "ModelState":
        return ModelState(
            [layer.copy() for layer in self.extractor_layers],
            self.source_head.copy(),
            self.target_head.copy(),
        )

    def head(self, which: str) -> AffineLayer:
        if which == "source":
            return self.source_head
        if which == "target":
            return self.target_head
        raise ValidationError(f"unknown head {which!r}, expected 'source' or 'target'")


@dataclass
class GradientSet:
    """One gradient buffer per parameter buffer of a ModelState."""

    extractor_layers: list[AffineLayer]
    source_head: AffineLayer
    target_head: AffineLayer

    @classmethod
    def zeros_for(cls, model: ModelState) -> "GradientSet":
        def z(layer: AffineLayer) -> AffineLayer:
            return AffineLayer(np.zeros_like(layer.w), np.zeros_like(layer.b))

        return cls([z(l) for l in model.extractor_layers], z(model.source_head), z(model.target_head))


def _xavier_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> AffineLayer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return AffineLayer(w, np.zeros(fan_out))


def init_model(
    input_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    hidden_dims: tuple[int, ...] = (64,),
    feature_dim: int = 32,
) -> ModelState:
    """Build a fresh model with uniform Xavier weights and zero biases.

    Draw order is fixed (extractor layers, then source head, then target
    head) so a given generator state always yields the same model.
    """
    if input_dim < 1 or num_classes < 2 or feature_dim < 1:
        raise ValidationError(
            f"bad model dims: input_dim={input_dim}, num_classes={num_classes}, "
            f"feature_dim={feature_dim}"
        )
    dims = [input_dim, *hidden_dims, feature_dim]
    extractor = [_xavier_layer(rng, dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    source_head = _xavier_layer(rng, feature_dim, num_classes)
    target_head = _xavier_layer(rng, feature_dim, num_classes)
    return ModelState(extractor, source_head, target_head)


def _forward_cached(model: ModelState, batch: np.ndarray):
    """Forward through the extractor keeping per-layer inputs and ReLU masks."""
    inputs = []
    masks = []
    h = batch
    for layer in model.extractor_layers:
        inputs.append(h)
        z = h @ layer.w + layer.b
        mask = z > 0.0
        h = np.where(mask, z, 0.0)
        masks.append(mask)
    return inputs, masks, h


def forward_features(model: ModelState, batch) -> np.ndarray:
    """Map a batch of input rows to feature rows through the affine/ReLU chain."""
    batch = as_matrix(batch, "batch")
    if batch.shape[0] == 0:
        raise ValidationError("batch has 0 rows")
    if batch.shape[1] != model.input_dim:
        raise ShapeError(
            f"batch has {batch.shape[1]} columns but model input_dim is {model.input_dim}"
        )
    _, _, features = _forward_cached(model, batch)
    return features


def forward_logits(head: AffineLayer, features) -> np.ndarray:
    """Apply one classifier head to feature rows."""
    features = as_matrix(features, "features")
    if features.shape[1] != head.in_dim:
        raise ShapeError(
            f"features have {features.shape[1]} columns but head expects {head.in_dim}"
        )
    return features @ head.w + head.b


def softmax(logits) -> np.ndarray:
    """Row-wise softmax, stabilized by max subtraction."""
    logits = as_matrix(logits, "logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of the true class, plus the logit gradient.

    Args:
        probs: (rows, classes) normalized probabilities (softmax output).
        labels: integer class index per row.

    Returns:
        (loss, grad_logits) where grad_logits = (probs - one_hot) / rows, the
        exact gradient of the loss with respect to the pre-softmax logits.
    """
    probs = as_matrix(probs, "probs")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != probs.shape[0]:
        raise ShapeError(
            f"labels must be 1-D with length {probs.shape[0]}, got shape {labels.shape}"
        )
    if probs.shape[0] == 0:
        raise ValidationError("cross_entropy on 0 rows")
    labels = labels.astype(np.int64)
    n, c = probs.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(
            f"label out of range: found {int(labels.min())}..{int(labels.max())}, "
            f"expected [0, {c})"
        )
    picked = probs[np.arange(n), labels]
    # floor avoids log(0); probs <= 1 keeps the loss non-negative
    loss = float(np.mean(-np.log(np.maximum(picked, 1e-300))))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def head_backward(
    head: AffineLayer, features: np.ndarray, grad_logits: np.ndarray
) -> tuple[AffineLayer, np.ndarray]:
    """Gradients of an affine head: returns (parameter grads, feature grad)."""
    grad_logits = as_matrix(grad_logits, "grad_logits")
    if grad_logits.shape != (features.shape[0], head.out_dim):
        raise ShapeError(
            f"grad_logits shape {grad_logits.shape} does not match "
            f"({features.shape[0]}, {head.out_dim})"
        )
    gw = features.T @ grad_logits
    gb = grad_logits.sum(axis=0)
    return AffineLayer(gw, gb), grad_logits @ head.w.T


def backward(
    model: ModelState,
    batch,
    upstream_feature_grad,
    grad_source_logits=None,
    grad_target_logits=None,
) -> GradientSet:
    """Exact analytic gradients for every parameter buffer.

    `upstream_feature_grad` is d(loss)/d(features) from terms that act on the
    features directly (e.g. a discrepancy loss); per-head logit gradients may
    be passed as well and are chained through the heads into the features
    before the extractor backward pass. Contributions sum.
    """
    batch = as_matrix(batch, "batch")
    if batch.shape[0] == 0:
        raise ValidationError("batch has 0 rows")
    if batch.shape[1] != model.input_dim:
        raise ShapeError(
            f"batch has {batch.shape[1]} columns but model input_dim is {model.input_dim}"
        )
    inputs, masks, features = _forward_cached(model, batch)
    g = as_matrix(upstream_feature_grad, "upstream_feature_grad")
    if g.shape != features.shape:
        raise ShapeError(
            f"upstream_feature_grad shape {g.shape} does not match features "
            f"shape {features.shape}"
        )
    g = g.copy()

    grads = GradientSet.zeros_for(model)
    if grad_source_logits is not None:
        grads.source_head, gfeat = head_backward(model.source_head, features, grad_source_logits)
        g += gfeat
    if grad_target_logits is not None:
        grads.target_head, gfeat = head_backward(model.target_head, features, grad_target_logits)
        g += gfeat

    for i in range(len(model.extractor_layers) - 1, -1, -1):
        gz = np.where(masks[i], g, 0.0)
        grads.extractor_layers[i] = AffineLayer(inputs[i].T @ gz, gz.sum(axis=0))
        g = gz @ model.extractor_layers[i].w.T
    return grads


def sgd_step(model: ModelState, grads: GradientSet, lr: float) -> ModelState:
    """Return a new ModelState with every parameter moved by -lr * gradient."""
    if lr < 0.0:
        raise ValidationError(f"learning rate must be >= 0, got {lr}")
    if len(grads.extractor_layers) != len(model.extractor_layers):
        raise ShapeError(
            f"gradient has {len(grads.extractor_layers)} extractor layers, "
            f"model has {len(model.extractor_layers)}"
        )

    def step(param: AffineLayer, grad: AffineLayer, name: str) -> AffineLayer:
        if param.w.shape != grad.w.shape or param.b.shape != grad.b.shape:
            raise ShapeError(
                f"gradient for {name} has shape w{grad.w.shape}/b{grad.b.shape}, "
                f"expected w{param.w.shape}/b{param.b.shape}"
            )
        if not (np.all(np.isfinite(grad.w)) and np.all(np.isfinite(grad.b))):
            raise TrainingError(f"non-finite gradient in buffer {name}")
        return AffineLayer(param.w - lr * grad.w, param.b - lr * grad.b)

    extractor = [
        step(p, g, f"extractor[{i}]")
        for i, (p, g) in enumerate(zip(model.extractor_layers, grads.extractor_layers))
    ]
    return ModelState(
        extractor,
        step(model.source_head, grads.source_head, "source_head"),
        step(model.target_head, grads.target_head, "target_head"),
    )


def with_target_head_from_source(model: ModelState) -> ModelState:
    """Copy of the model whose target head starts as a clone of the source head."""
    return replace(model, target_head=model.source_head.copy())


def save_checkpoint(model: ModelState, path, config_hash: str = "") -> None:
    """Write all parameter buffers to a single .npz file with shape headers.

    Layout: `meta` holds a JSON string with the format version, config hash
    and layer count; each buffer is stored under `extractor{i}_w/b`,
    `source_head_w/b`, `target_head_w/b`. float64 round-trips bitwise.
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config_hash": config_hash,
        "num_extractor_layers": len(model.extractor_layers),
    }
    arrays = {"meta": np.array(json.dumps(meta))}
    for i, layer in enumerate(model.extractor_layers):
        arrays[f"extractor{i}_w"] = layer.w
        arrays[f"extractor{i}_b"] = layer.b
    arrays["source_head_w"] = model.source_head.w
    arrays["source_head_b"] = model.source_head.b
    arrays["target_head_w"] = model.target_head.w
    arrays["target_head_b"] = model.target_head.b
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> tuple[ModelState, str]:
    """Load a checkpoint written by `save_checkpoint`; returns (model, config_hash)."""
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise ValidationError(f"checkpoint not found: {path}") from None
    try:
        meta = json.loads(str(data["meta"]))
    except KeyError:
        raise ValidationError(f"not a model checkpoint (no meta entry): {path}") from None
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint format version {meta.get('format_version')!r}"
        )
    n = int(meta["num_extractor_layers"])
    extractor = [AffineLayer(data[f"extractor{i}_w"], data[f"extractor{i}_b"]) for i in range(n)]
    model = ModelState(
        extractor,
        AffineLayer(data["source_head_w"], data["source_head_b"]),
        AffineLayer(data["target_head_w"], data["target_head_b"]),
    )
    return model, str(meta.get("config_hash", ""))
