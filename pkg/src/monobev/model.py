"""Per-cell classification: handcrafted features, focal loss, linear heads.

The classifier is deliberately shallow.  Images are expanded into a small
bank of colour/texture channels; linear heads score those channels per
pixel (producing class heatmaps that get warped into the grid) and per
cell (consuming the aggregated grid channels).  Both stages train with a
focal loss so the rare classes are not drowned out by background, using
closed-form gradients with respect to the pre-activation scores.

Training alternates the two stages each epoch: pixel heads update on
image-space labels, then their refreshed heatmaps are re-projected by the
caller-supplied assembler and the cell heads update on grid labels.  No
gradient flows back through the warp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, EmptyMaskError, ShapeMismatchError

#: Number of channels produced by the full image feature bank.
FEATURE_BANK_SIZE = 11

_PROB_FLOOR = 1e-7


def _box_mean(values: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 window, edges clamped, via an integral image."""
    padded = np.pad(values, radius + 1, mode="edge")
    integral = padded.cumsum(axis=0).cumsum(axis=1)
    size = 2 * radius + 1
    h, w = values.shape
    total = (
        integral[size:, size:][:h, :w]
        - integral[:-size, size:][:h, :w]
        - integral[size:, :-size][:h, :w]
        + integral[:-size, :-size][:h, :w]
    )
    return total / float(size * size)


def extract_features(
    image: np.ndarray, feature_count: int = 8, window: int = 5
) -> np.ndarray:
    """Expand an (H, W, 3) image into the first ``feature_count`` bank channels.

    Channel order is fixed: red, green, blue, horizontal then vertical
    luminance gradient magnitude, per-colour window means, per-colour
    window standard deviations (11 channels total).  The raw colours come
    first so a truncated prefix stays linearly expressive; ``window`` is
    the odd pixel span of the local statistics, clamped at the borders.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError(f"expected an (H, W, 3) image, got {image.shape}")
    if not 3 <= feature_count <= FEATURE_BANK_SIZE:
        raise ValueError(f"feature_count must be in 3..{FEATURE_BANK_SIZE}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd pixel span")

    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    luma = 0.299 * r + 0.587 * g + 0.114 * b
    grad_x = np.abs(np.gradient(luma, axis=1))
    grad_y = np.abs(np.gradient(luma, axis=0))
    radius = window // 2
    means = [_box_mean(channel, radius) for channel in (r, g, b)]
    stds = [
        np.sqrt(np.maximum(_box_mean(channel * channel, radius) - mean * mean, 0.0))
        for channel, mean in zip((r, g, b), means)
    ]

    bank = np.stack([r, g, b, grad_x, grad_y, *means, *stds], axis=-1)
    return bank[..., :feature_count]


def class_frequency_alpha(labels: np.ndarray, mask=None, floor: float = 0.05) -> np.ndarray:
    """Per-class focal weights ``1 - frequency``, clipped away from 0 and 1.

    ``labels`` is (..., C) binary; frequencies count masked-in elements only.
    """
    labels = np.asarray(labels, dtype=float)
    flat = labels.reshape(-1, labels.shape[-1])
    if mask is not None:
        flat = flat[np.asarray(mask, dtype=bool).reshape(-1)]
    count = max(1, flat.shape[0])
    freq = flat.sum(axis=0) / count
    return np.clip(1.0 - freq, floor, 1.0 - floor)


def _as_alpha(alpha, n_classes: int) -> np.ndarray:
    if alpha is None:
        return np.full(n_classes, 0.25)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim == 0:
        return np.full(n_classes, float(alpha))
    if alpha.shape != (n_classes,):
        raise ShapeMismatchError(f"alpha must be scalar or ({n_classes},)")
    return alpha


def focal_loss(logits, targets, kind: str, gamma: float = 2.0, alpha=None, mask=None):
    """Focal loss and its gradient with respect to the logits.

    ``kind`` selects independent-sigmoid (multi-label) or softmax (one-hot)
    scoring.  Returns ``(mean_loss, grad)`` where ``grad`` has the shape of
    ``logits`` and already includes the mean reduction, so a gradient step
    is ``weights -= lr * X.T @ grad``.  Masked-out rows contribute nothing
    to either output.  With ``gamma == 0`` the loss reduces to the
    alpha-weighted cross entropy.
    """
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if logits.shape != targets.shape:
        raise ShapeMismatchError(f"logits {logits.shape} vs targets {targets.shape}")
    flat_z = logits.reshape(-1, logits.shape[-1])
    flat_y = targets.reshape(-1, targets.shape[-1])
    n, c = flat_z.shape
    alpha = _as_alpha(alpha, c)

    if mask is None:
        keep = np.ones(n, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool).reshape(-1)
        if keep.shape[0] != n:
            raise ShapeMismatchError("mask does not match the leading logits shape")
    if not keep.any():
        raise EmptyMaskError("no active cells to score")

    grad = np.zeros_like(flat_z)
    z = flat_z[keep]
    y = flat_y[keep]

    if kind == "sigmoid":
        p = np.clip(1.0 / (1.0 + np.exp(-z)), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
        p_t = np.where(y > 0.5, p, 1.0 - p)
        a_t = np.where(y > 0.5, alpha, 1.0 - alpha)
        loss_terms = -a_t * (1.0 - p_t) ** gamma * np.log(p_t)
        # d/dz[-a (1-pt)^g log pt] with pt = sigma(z) for positives and
        # 1 - sigma(z) for negatives; the sign flips with the label.
        core = (1.0 - p_t) ** gamma * (gamma * p_t * np.log(p_t) - (1.0 - p_t))
        sign = np.where(y > 0.5, 1.0, -1.0)
        grad_kept = a_t * core * sign
        denom = max(1, int(keep.sum()) * c)
    elif kind == "softmax":
        # Non-finite logits (a diverged model) propagate NaN probabilities,
        # which the caller turns into a DivergenceError.
        with np.errstate(invalid="ignore"):
            shifted = z - z.max(axis=-1, keepdims=True)
            expz = np.exp(shifted)
            p = expz / expz.sum(axis=-1, keepdims=True)
        t_idx = np.argmax(y, axis=-1)
        rows = np.arange(len(t_idx))
        p_t = np.clip(p[rows, t_idx], _PROB_FLOOR, 1.0 - _PROB_FLOOR)
        a_t = alpha[t_idx]
        loss_terms = -a_t * (1.0 - p_t) ** gamma * np.log(p_t)
        core = (1.0 - p_t) ** (gamma - 1.0) * (gamma * p_t * np.log(p_t) - (1.0 - p_t))
        one_hot = np.zeros_like(p)
        one_hot[rows, t_idx] = 1.0
        grad_kept = (a_t * core)[:, None] * (one_hot - p)
        denom = max(1, int(keep.sum()))
    else:
        raise ValueError(f"unknown loss kind {kind!r}")

    loss = float(loss_terms.sum()) / denom
    grad[keep] = grad_kept / denom
    return loss, grad.reshape(logits.shape)


@dataclass(eq=False)
class LinearHead:
    """Affine scorer over feature channels with a fixed activation kind."""

    weights: np.ndarray  # (features, classes)
    bias: np.ndarray  # (classes,)
    kind: str  # "sigmoid" | "softmax"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.kind not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeMismatchError("weights must be (features, classes) with matching bias")

    @classmethod
    def zeros(cls, n_features: int, n_classes: int, kind: str) -> "LinearHead":
        return cls(np.zeros((n_features, n_classes)), np.zeros(n_classes), kind)

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.shape[-1] != self.n_features:
            raise ShapeMismatchError(
                f"head expects {self.n_features} features, got {features.shape[-1]}"
            )
        return features @ self.weights + self.bias

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        z = self.logits(features)
        if self.kind == "sigmoid":
            return 1.0 / (1.0 + np.exp(-z))
        shifted = z - z.max(axis=-1, keepdims=True)
        expz = np.exp(shifted)
        return expz / expz.sum(axis=-1, keepdims=True)

    def step(self, features, targets, mask=None, lr: float = 0.2,
             gamma: float = 2.0, alpha=None) -> float:
        """One full-batch gradient step; returns the pre-step loss."""
        features = np.asarray(features, dtype=float).reshape(-1, self.n_features)
        z = features @ self.weights + self.bias
        targets = np.asarray(targets, dtype=float).reshape(-1, self.n_classes)
        loss, grad = focal_loss(z, targets, self.kind, gamma=gamma, alpha=alpha, mask=mask)
        self.weights -= lr * (features.T @ grad)
        self.bias -= lr * grad.sum(axis=0)
        if not np.isfinite(loss) or not np.isfinite(self.weights).all():
            raise DivergenceError(f"training diverged (loss {loss})")
        return loss


@dataclass(eq=False)
class SampleBatch:
    """Flattened supervision rows for one head update.

    ``supervise_objects`` marks whether the object head trains on this
    batch; pixel batches set it only for the reference frame, whose object
    positions match the grid labels (objects move between frames, the
    static layout does not).
    """

    features: np.ndarray  # (N, F)
    static_labels: np.ndarray  # (N, C_S)
    object_labels: np.ndarray  # (N, C_O + 1)
    mask: np.ndarray  # (N,) bool
    supervise_objects: bool = True


@dataclass(eq=False)
class TrainingSample:
    """One scene's supervision: pixel batches plus a grid assembler.

    ``assemble`` is called once per epoch with the current pixel-heatmap
    function (or None when the model has no pixel heads) and must return a
    :class:`SampleBatch` over grid cells.  Keeping the projection behind a
    callback means no gradient can leak through it.
    """

    image_batches: list
    assemble: object  # callable: heatmap_fn | None -> SampleBatch


@dataclass(eq=False)
class Model:
    """Linear heads for both stages; either stage may be absent."""

    feature_count: int
    image_static: LinearHead | None = None
    image_object: LinearHead | None = None
    bev_static: LinearHead | None = None
    bev_object: LinearHead | None = None

    @property
    def has_image_heads(self) -> bool:
        return self.image_static is not None and self.image_object is not None

    @property
    def has_bev_heads(self) -> bool:
        return self.bev_static is not None and self.bev_object is not None

    def image_heatmaps(self, features: np.ndarray):
        """Per-pixel class probabilities (static multi-label, object one-hot)."""
        return (
            self.image_static.probabilities(features),
            self.image_object.probabilities(features),
        )


def new_model(
    feature_count: int,
    n_static: int,
    n_objects: int,
    bev_channels: int | None,
    with_image_heads: bool = True,
) -> Model:
    """Fresh zero-initialised heads; ``bev_channels`` None skips that stage."""
    model = Model(feature_count=feature_count)
    if with_image_heads:
        model.image_static = LinearHead.zeros(feature_count, n_static, "sigmoid")
        model.image_object = LinearHead.zeros(feature_count, n_objects + 1, "softmax")
    if bev_channels is not None:
        model.bev_static = LinearHead.zeros(bev_channels, n_static, "sigmoid")
        model.bev_object = LinearHead.zeros(bev_channels, n_objects + 1, "softmax")
    return model


@dataclass
class TrainConfig:
    """Optimisation knobs.

    ``site_weights`` scales the (image-static, image-object, grid) loss
    sites in the descent objective; the sites touch disjoint parameters,
    so the weights act as per-site learning-rate multipliers.
    """

    epochs: int = 100
    lr: float = 1.0
    gamma: float = 2.0
    alpha_floor: float = 0.01
    site_weights: tuple = (1.0, 1.0, 1.0)


def _stack_labels(batches, field):
    parts = [getattr(b, field).reshape(-1, getattr(b, field).shape[-1]) for b in batches]
    masks = [np.asarray(b.mask, dtype=bool).reshape(-1) for b in batches]
    return np.concatenate(parts), np.concatenate(masks)


def _forward_loss(head, batch_features, targets, mask, gamma, alpha) -> float:
    """Loss at the current parameters, no update."""
    features = np.asarray(batch_features, dtype=float).reshape(-1, head.n_features)
    targets = np.asarray(targets, dtype=float).reshape(-1, head.n_classes)
    loss, _ = focal_loss(features @ head.weights + head.bias, targets,
                         head.kind, gamma=gamma, alpha=alpha, mask=mask)
    return loss


def train(model: Model, samples, config: TrainConfig | None = None) -> dict:
    """Alternating training of the pixel and cell stages.

    Returns a history dict of per-epoch mean losses per site.  Class
    weights derive from label frequencies gathered in a pre-pass (grid
    labels do not depend on the head values, so assembling once with the
    untrained heads is sound).  Every pixel batch supervises the static
    head; only batches flagged ``supervise_objects`` feed the object head.
    With ``epochs == 0`` the history holds a single evaluation of the
    untouched model.
    """
    config = config or TrainConfig()
    w_img_static, w_img_object, w_bev = (float(w) for w in config.site_weights)
    heatmap_fn = model.image_heatmaps if model.has_image_heads else None

    image_batches = [b for s in samples for b in s.image_batches]
    object_batches = [b for b in image_batches if b.supervise_objects]
    if model.has_image_heads:
        if not image_batches or not object_batches:
            raise ValueError("model has pixel heads but no pixel batches were given")
        img_static_alpha = class_frequency_alpha(
            *_stack_labels(image_batches, "static_labels"), config.alpha_floor)
        img_object_alpha = class_frequency_alpha(
            *_stack_labels(object_batches, "object_labels"), config.alpha_floor)
    if model.has_bev_heads:
        first_pass = [s.assemble(heatmap_fn) for s in samples]
        bev_static_alpha = class_frequency_alpha(
            *_stack_labels(first_pass, "static_labels"), config.alpha_floor)
        bev_object_alpha = class_frequency_alpha(
            *_stack_labels(first_pass, "object_labels"), config.alpha_floor)

    history = {"image_static": [], "image_object": [], "bev_static": [], "bev_object": []}

    if config.epochs == 0:
        if model.has_image_heads:
            history["image_static"].append(float(np.mean([
                _forward_loss(model.image_static, b.features, b.static_labels,
                              b.mask, config.gamma, img_static_alpha)
                for b in image_batches])))
            history["image_object"].append(float(np.mean([
                _forward_loss(model.image_object, b.features, b.object_labels,
                              b.mask, config.gamma, img_object_alpha)
                for b in object_batches])))
        if model.has_bev_heads:
            history["bev_static"].append(float(np.mean([
                _forward_loss(model.bev_static, b.features, b.static_labels,
                              b.mask, config.gamma, bev_static_alpha)
                for b in first_pass])))
            history["bev_object"].append(float(np.mean([
                _forward_loss(model.bev_object, b.features, b.object_labels,
                              b.mask, config.gamma, bev_object_alpha)
                for b in first_pass])))
        return {k: v for k, v in history.items() if v}

    for _ in range(config.epochs):
        if model.has_image_heads:
            losses_s, losses_o = [], []
            for batch in image_batches:
                losses_s.append(
                    model.image_static.step(
                        batch.features, batch.static_labels, batch.mask,
                        lr=config.lr * w_img_static, gamma=config.gamma,
                        alpha=img_static_alpha,
                    )
                )
                if batch.supervise_objects:
                    losses_o.append(
                        model.image_object.step(
                            batch.features, batch.object_labels, batch.mask,
                            lr=config.lr * w_img_object, gamma=config.gamma,
                            alpha=img_object_alpha,
                        )
                    )
            history["image_static"].append(float(np.mean(losses_s)))
            history["image_object"].append(float(np.mean(losses_o)))

        if model.has_bev_heads:
            losses_s, losses_o = [], []
            for sample in samples:
                batch = sample.assemble(heatmap_fn)
                losses_s.append(
                    model.bev_static.step(
                        batch.features, batch.static_labels, batch.mask,
                        lr=config.lr * w_bev, gamma=config.gamma,
                        alpha=bev_static_alpha,
                    )
                )
                losses_o.append(
                    model.bev_object.step(
                        batch.features, batch.object_labels, batch.mask,
                        lr=config.lr * w_bev, gamma=config.gamma,
                        alpha=bev_object_alpha,
                    )
                )
            history["bev_static"].append(float(np.mean(losses_s)))
            history["bev_object"].append(float(np.mean(losses_o)))
    return {k: v for k, v in history.items() if v}


def _head_to_dict(head):
    if head is None:
        return None
    return {
        "weights": head.weights.tolist(),
        "bias": head.bias.tolist(),
        "kind": head.kind,
    }


def _head_from_dict(doc):
    if doc is None:
        return None
    return LinearHead(np.array(doc["weights"], dtype=float),
                      np.array(doc["bias"], dtype=float), doc["kind"])


def model_to_dict(model: Model) -> dict:
    return {
        "feature_count": int(model.feature_count),
        "image_static": _head_to_dict(model.image_static),
        "image_object": _head_to_dict(model.image_object),
        "bev_static": _head_to_dict(model.bev_static),
        "bev_object": _head_to_dict(model.bev_object),
    }


def model_from_dict(doc: dict) -> Model:
    return Model(
        feature_count=int(doc["feature_count"]),
        image_static=_head_from_dict(doc.get("image_static")),
        image_object=_head_from_dict(doc.get("image_object")),
        bev_static=_head_from_dict(doc.get("bev_static")),
        bev_object=_head_from_dict(doc.get("bev_object")),
    )
