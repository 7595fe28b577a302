"""Attention maps and their agreement with expert masks.

Grad-CAM weights come from the spatial mean of d(class score)/d(feature
maps) at the model's "cam_target" activation. Scoring-time maps are
min-max normalized to unit range; the differentiable training loss uses
the raw map rescaled by its max, with the channel weights treated as
constants (no second-order terms).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    add_const,
    backward,
    channel_mix,
    divide,
    divide_rows,
    mean_batch,
    mul_const,
    positive_or_one,
    relu,
    scale,
    spatial_max,
    sum_all,
    sum_spatial,
    take_column,
    upsample_bilinear,
)

Grid = np.ndarray


@dataclass(frozen=True)
class AttentionMap:
    """Per-sample 2-d saliency grid at input resolution."""

    grid: Grid
    normalization: str = "unit"  # "raw" | "unit"

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        object.__setattr__(self, "grid", g)
        if g.ndim != 2:
            raise DimensionError(f"attention map must be 2-d, got {g.shape}")
        if np.any(g < 0):
            raise ContractError("attention map entries must be nonnegative")
        if self.normalization == "unit":
            mx = g.max() if g.size else 0.0
            if mx > 0 and abs(mx - 1.0) > 1e-12:
                raise ContractError("unit-range map must peak at 1 unless identically zero")
        elif self.normalization != "raw":
            raise ContractError(f"unknown normalization tag {self.normalization!r}")


@dataclass(frozen=True)
class ExpertMask:
    """Expert-annotated relevance grid with entries in [0, 1]."""

    grid: Grid

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        object.__setattr__(self, "grid", g)
        if g.ndim != 2:
            raise DimensionError(f"expert mask must be 2-d, got {g.shape}")
        if np.any(g < 0) or np.any(g > 1):
            raise ContractError("expert mask entries must lie in [0, 1]")


def _grid(m) -> Grid:
    if isinstance(m, (AttentionMap, ExpertMask)):
        return m.grid
    return np.asarray(m, dtype=np.float64)


def dice(a, b) -> float:
    """Soft Dice overlap 2*sum(a*b) / (sum(a) + sum(b)) in [0, 1].

    Two all-zero grids agree perfectly and score 1.
    """
    ga, gb = _grid(a), _grid(b)
    if ga.shape != gb.shape:
        raise DimensionError(f"dice: shapes {ga.shape} vs {gb.shape}")
    denom = ga.sum() + gb.sum()
    if denom == 0.0:
        return 1.0
    return float(2.0 * (ga * gb).sum() / denom)


def cam_weights(model, cam_data: np.ndarray, classes, head: str,
                protos: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-channel weights: spatial mean of d(score_k)/d(cam activation).

    Uses a scratch tape over a constant copy of the model so parameter
    grad buffers are never touched. One backward serves the whole batch
    because each sample's class score depends only on its own activation.
    """
    const = model.constant_copy()
    tape = Tape()
    a = Tensor(cam_data)
    tape.watch(a)
    emb = const.embed_from_cam(tape, a)
    scores = const.head_scores(tape, emb, head=head, protos=protos)
    total = sum_all(tape, take_column(tape, scores, np.atleast_1d(classes)))
    backward(tape, total)
    return a.grad.mean(axis=(2, 3))


def cam_from_activations(model, a_data: np.ndarray, classes, out_h: int, out_w: int,
                         head: str = "linear", protos: Optional[np.ndarray] = None,
                         normalized: bool = True) -> np.ndarray:
    """Attention grids from precomputed cam activations (B,C,h,w)."""
    w = cam_weights(model, a_data, classes, head, protos)
    raw = np.einsum("bc,bchw->bhw", w, a_data)
    np.maximum(raw, 0.0, out=raw)
    up = upsample_bilinear(None, Tensor(raw), out_h, out_w).data
    if not normalized:
        return up
    mn = up.min(axis=(1, 2), keepdims=True)
    mx = up.max(axis=(1, 2), keepdims=True)
    span = mx - mn
    flat = span[:, 0, 0] <= 0.0  # all-constant maps normalize to zero
    span[flat] = 1.0
    out = (up - mn) / span
    out[flat] = 0.0
    return out


def grad_cam_batch(model, images: np.ndarray, classes, head: str = "linear",
                   protos: Optional[np.ndarray] = None, normalized: bool = True) -> np.ndarray:
    """(B,1,H,W) images -> (B,H,W) attention grids for per-sample classes."""
    images = np.asarray(images, dtype=np.float64)
    a_data = model.trunk(None, Tensor(images)).data
    h, wdt = images.shape[-2:]
    return cam_from_activations(model, a_data, classes, h, wdt,
                                head=head, protos=protos, normalized=normalized)


def grad_cam(model, image: np.ndarray, k: int, head: str = "linear",
             protos: Optional[np.ndarray] = None) -> AttentionMap:
    """Unit-range class activation map for class ``k`` of one image."""
    if not 0 <= k < model.n_classes:
        raise ContractError(f"class index {k} out of range for {model.n_classes} classes")
    image = np.asarray(image, dtype=np.float64)
    single = image[None] if image.ndim == 3 else image
    grid = grad_cam_batch(model, single, [k], head=head, protos=protos)[0]
    return AttentionMap(grid=grid, normalization="unit")


def misalignment(model, image, esm, head: str = "linear",
                 protos: Optional[np.ndarray] = None,
                 cam_threshold: Optional[float] = None) -> tuple[float, int]:
    """1 - Dice(CAM of the predicted class, expert mask), plus the prediction.

    Argmax ties break toward the lowest class index. ``cam_threshold``
    switches the soft map to a binary one for ablations.
    """
    from .model import predict_proba  # local import to avoid a cycle

    p = predict_proba(model, image, head=head, protos=protos)
    y_hat = int(np.argmax(p))
    cam = grad_cam(model, image, y_hat, head=head, protos=protos)
    grid = cam.grid if cam_threshold is None else (cam.grid >= cam_threshold).astype(np.float64)
    esm_grid = _grid(esm)
    if esm_grid.shape != grid.shape:
        raise DimensionError(f"mask shape {esm_grid.shape} does not match image {grid.shape}")
    return 1.0 - dice(grid, esm_grid), y_hat


def explanation_loss_from_cam(tape: Optional[Tape], model, cam: Tensor, classes,
                              masks: np.ndarray, head: str = "linear",
                              protos: Optional[np.ndarray] = None,
                              frozen_weights: Optional[np.ndarray] = None) -> Tensor:
    """Differentiable mean (1 - Dice) between true-class CAMs and masks.

    ``cam`` is the on-tape cam_target activation (B,C,h,w); ``masks`` is
    the constant (B,H,W) stack. Channel weights are held constant, so
    gradients flow only through the feature maps; the raw map is rescaled
    by its spatial max where positive.
    """
    classes = np.atleast_1d(np.asarray(classes, dtype=np.intp))
    masks = np.asarray(masks, dtype=np.float64)
    if frozen_weights is None:
        w = cam_weights(model, cam.data, classes, head, protos)
    else:
        w = np.asarray(frozen_weights, dtype=np.float64)
    raw = relu(tape, channel_mix(tape, cam, w))
    up = upsample_bilinear(tape, raw, masks.shape[1], masks.shape[2])
    peak = spatial_max(tape, up)
    norm = divide_rows(tape, up, positive_or_one(tape, peak))
    inter = sum_spatial(tape, mul_const(tape, norm, masks))
    mask_sums = masks.sum(axis=(1, 2))
    denom = positive_or_one(tape, add_const(tape, sum_spatial(tape, norm), mask_sums))
    dice_vec = divide(tape, scale(tape, inter, 2.0), denom)
    # an empty mask facing an all-zero map is perfect agreement (dice 1)
    empty_both = (mask_sums == 0.0) & (peak.data <= 0.0)
    if np.any(empty_both):
        dice_vec = add_const(tape, dice_vec, empty_both.astype(np.float64))
    return mean_batch(tape, add_const(tape, scale(tape, dice_vec, -1.0), 1.0))


def explanation_loss(tape: Optional[Tape], model, image, y_true: int, esm,
                     head: str = "linear", protos: Optional[np.ndarray] = None) -> Tensor:
    """Single-sample differentiable Dice loss for the true class."""
    image = np.asarray(image, dtype=np.float64)
    x = Tensor(image[None] if image.ndim == 3 else image)
    cam = model.trunk(tape, x)
    return explanation_loss_from_cam(tape, model, cam, [y_true], _grid(esm)[None],
                                     head=head, protos=protos)


def write_pgm(grid, path) -> None:
    """Dump a [0,1] grid as a portable graymap (P2), round-half-up to 0-255."""
    g = _grid(grid)
    if g.ndim != 2:
        raise DimensionError(f"pgm export expects a 2-d grid, got {g.shape}")
    q = np.clip(np.floor(g * 255.0 + 0.5), 0, 255).astype(int)
    lines = [f"P2\n{g.shape[1]} {g.shape[0]}\n255\n"]
    for row in q:
        lines.append(" ".join(str(v) for v in row) + "\n")
    with open(path, "w") as fh:
        fh.writelines(lines)
