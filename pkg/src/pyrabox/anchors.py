"""Anchor grids, pyramid-anchor labeling and regression target coding."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as _t
from .boxes import BoxPx, iou, iou_matrix, scale_box, to_array
from .tensor import ContractError

NUM_LAYERS = 6
BASE_STRIDE = 4
# taps 0..3 are reached through 2x2 pooling only; the input must divide evenly down to them
POOLED_STRIDE = 32
MIN_FACE_SIDE = 8.0
LOG_CLAMP = 10.0


class ConfigError(ContractError):
    """Invalid configuration values or combinations."""


@dataclass(frozen=True)
class AnchorLayerSpec:
    index: int
    stride: int
    scale: int


def layer_specs(num_layers: int = NUM_LAYERS) -> list:
    """Scale-equitable anchors: stride 2^(2+i), side 2^(4+i) = 4 * stride."""
    return [AnchorLayerSpec(i, BASE_STRIDE * 2 ** i, 2 ** (4 + i)) for i in range(num_layers)]


def feature_size(input_size: int, stride: int) -> int:
    # stride-2 3x3 pad-1 convs round up past the pooled taps
    return -(-input_size // stride)


@dataclass
class AnchorGrid:
    input_size: int
    specs: list
    sizes: list  # per layer (rows, cols)
    boxes: np.ndarray  # (A, 4) xywh, layer-major then row-major
    offsets: list  # start index of each layer in ``boxes``

    def __len__(self) -> int:
        return len(self.boxes)

    def layer_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i] + self.sizes[i][0] * self.sizes[i][1])

    def layer_boxes(self, i: int) -> list:
        return [BoxPx(*row) for row in self.boxes[self.layer_slice(i)].tolist()]

    def layer_of(self) -> np.ndarray:
        out = np.empty(len(self.boxes), dtype=np.int64)
        for i in range(len(self.specs)):
            out[self.layer_slice(i)] = i
        return out

    def records(self) -> Iterator[dict]:
        for spec, (rows, cols), off in zip(self.specs, self.sizes, self.offsets):
            for r in range(rows):
                for c in range(cols):
                    x, y = self.boxes[off + r * cols + c, :2]
                    yield {"layer": spec.index, "row": r, "col": c, "x_min": float(x), "y_min": float(y), "side": spec.scale}


def build_grid(config=None, input_size: int | None = None) -> AnchorGrid:
    """One square anchor per feature cell per layer, centred on the cell."""
    if input_size is None:
        input_size = config.input_size
    specs = list(getattr(config, "anchor_layers", None) or layer_specs())
    if input_size <= 0 or input_size % POOLED_STRIDE:
        raise ConfigError(f"input size {input_size} must be a positive multiple of {POOLED_STRIDE}")
    chunks, sizes, offsets = [], [], []
    total = 0
    for spec in specs:
        n = feature_size(input_size, spec.stride)
        centers = (np.arange(n) + 0.5) * spec.stride
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        half = spec.scale / 2
        arr = np.stack(
            [cx.ravel() - half, cy.ravel() - half, np.full(n * n, spec.scale, float), np.full(n * n, spec.scale, float)],
            axis=1,
        )
        chunks.append(arr)
        sizes.append((n, n))
        offsets.append(total)
        total += n * n
    return AnchorGrid(input_size, specs, sizes, np.concatenate(chunks), offsets)


# ---------------------------------------------------------------------------
# labeling


@dataclass(frozen=True)
class ContextTransform:
    """Per-level context-box transform; the shifts may depend on the base target.

    delta_x = dx + dx_tw * t_w and delta_y = dy + dy_th * t_h.
    """

    dx: float = 0.0
    dy: float = 0.0
    s_w: float = 1.0
    s_h: float = 1.0
    dx_tw: float = 0.0
    dy_th: float = 0.0


def default_context_params(K: int = 2) -> list:
    params = [ContextTransform() for _ in range(min(K, 2) + 1)]
    if K >= 2:
        params[2] = ContextTransform(dy_th=1.0, s_w=7 / 8, s_h=1.0)
    params += [ContextTransform() for _ in range(K - 2)]
    return params


@dataclass
class PyramidAnchorConfig:
    s_pa: float = 2.0
    K: int = 2
    threshold: float = 0.35
    lambda_cls_reg: float = 1.0
    lambda_k: list = field(default_factory=lambda: [1.0, 0.5, 0.25])
    variance: tuple = (1.0, 1.0)
    context: list | None = None
    neg_pos_ratio: float = 3.0
    hard_negative_mining: bool = True
    min_face_side: float = MIN_FACE_SIDE

    def __post_init__(self):
        if self.context is None:
            self.context = default_context_params(self.K)
        self.lambda_k = [float(v) for v in self.lambda_k]
        self.validate()

    def validate(self) -> None:
        if not self.s_pa > 1:
            raise ConfigError(f"s_pa must exceed 1, got {self.s_pa}")
        if self.K < 0:
            raise ConfigError(f"K must be non-negative, got {self.K}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if len(self.lambda_k) != self.K + 1:
            raise ConfigError(f"lambda_k needs {self.K + 1} entries, got {len(self.lambda_k)}")
        # zero lambda_k switches a context branch off; negatives are rejected
        if self.lambda_cls_reg <= 0 or any(v < 0 for v in self.lambda_k):
            raise ConfigError("loss weights must be positive")
        if len(self.context) != self.K + 1:
            raise ConfigError("one context transform is required per pyramid level")


@dataclass
class PyramidLabelSet:
    """Per level k: labels (1 positive, 0 negative, -1 ignored), targets and matches."""

    labels: np.ndarray  # (K+1, A) int8
    targets: np.ndarray  # (K+1, A, 4); zero where not positive
    matched: np.ndarray  # (K+1, A) face index or -1

    @property
    def K(self) -> int:
        return self.labels.shape[0] - 1

    def positives(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels[k] == 1)

    def p_star(self, k: int) -> np.ndarray:
        return (self.labels[k] == 1).astype(np.int8)


def face_size(w: float, h: float) -> float:
    return math.sqrt(w * h)


def pyramid_label_literal(anchor: BoxPx, face: BoxPx, k: int, s_pa: float, threshold: float) -> int:
    """Down-sample the anchor region by s_pa^k and compare it to the face."""
    return int(iou(scale_box(anchor, s_pa ** -k), face) > threshold)


def pyramid_label_scaled(anchor: BoxPx, face: BoxPx, k: int, s_pa: float, threshold: float) -> int:
    """Equivalent form: enlarge the face by s_pa^k instead."""
    return int(iou(anchor, scale_box(face, s_pa ** k)) > threshold)


def label_pyramid(grid: AnchorGrid, faces: Sequence[BoxPx], cfg: PyramidAnchorConfig) -> PyramidLabelSet:
    anchors = grid.boxes
    A = len(anchors)
    K = cfg.K
    labels = np.zeros((K + 1, A), dtype=np.int8)
    targets = np.zeros((K + 1, A, 4), dtype=np.float64)
    matched = np.full((K + 1, A), -1, dtype=np.int64)
    if len(faces) == 0:
        return PyramidLabelSet(labels, targets, matched)

    face_arr = to_array(faces)
    ignored = np.sqrt(face_arr[:, 2] * face_arr[:, 3]) < cfg.min_face_side
    valid = np.flatnonzero(~ignored)
    for k in range(K + 1):
        scaled = face_arr * cfg.s_pa ** k
        ious = iou_matrix(anchors, scaled)
        ious_valid = ious[:, valid]
        if valid.size:
            best_col = ious_valid.argmax(axis=1)  # lowest face index wins ties
            best = ious_valid[np.arange(A), best_col]
            best_face = valid[best_col]
            pos = best > cfg.threshold
        else:
            best_face = np.full(A, -1)
            pos = np.zeros(A, dtype=bool)
        match = np.where(pos, best_face, -1)
        if k == 0:
            _guarantee_best_anchor(ious, valid, match)
            pos = match >= 0
        if ignored.any():
            near_ignored = (ious[:, ignored] > cfg.threshold).any(axis=1)
            labels[k, near_ignored & ~pos] = -1
        labels[k, pos] = 1
        matched[k] = match
        if pos.any():
            idx = np.flatnonzero(pos)
            targets[k, idx] = encode_targets_array(anchors[idx], face_arr[match[idx]], k, cfg)
    return PyramidLabelSet(labels, targets, matched)


def _guarantee_best_anchor(ious: np.ndarray, valid: np.ndarray, match: np.ndarray) -> None:
    forced: set = set()
    for f in valid:
        if np.any(match == f):
            continue
        col = ious[:, f]
        for a in np.argsort(-col, kind="stable"):
            if a not in forced and col[a] > 0:
                match[a] = f
                forced.add(int(a))
                break


# ---------------------------------------------------------------------------
# regression targets


def _base_encode(anchors: np.ndarray, faces: np.ndarray, variance=(1.0, 1.0)) -> np.ndarray:
    acx = anchors[:, 0] + anchors[:, 2] / 2
    acy = anchors[:, 1] + anchors[:, 3] / 2
    fcx = faces[:, 0] + faces[:, 2] / 2
    fcy = faces[:, 1] + faces[:, 3] / 2
    with np.errstate(divide="ignore"):
        t = np.stack(
            [
                (fcx - acx) / anchors[:, 2] / variance[0],
                (fcy - acy) / anchors[:, 3] / variance[0],
                np.log(faces[:, 2] / anchors[:, 2]) / variance[1],
                np.log(faces[:, 3] / anchors[:, 3]) / variance[1],
            ],
            axis=1,
        )
    return t


def context_transform(t: np.ndarray, k: int, s_pa: float, params: ContextTransform) -> np.ndarray:
    """Map base face targets to the level-k context targets (identity at k=0)."""
    t = np.asarray(t, dtype=np.float64)
    tx, ty, tw, th = t[..., 0], t[..., 1], t[..., 2], t[..., 3]
    s = s_pa ** k
    delta_x = params.dx + params.dx_tw * tw
    delta_y = params.dy + params.dy_th * th
    return np.stack(
        [
            tx + (1 - s) / 2 * tw * params.s_w + delta_x,
            ty + (1 - s) / 2 * th * params.s_h + delta_y,
            s * tw * params.s_w - 2 * delta_x,
            s * th * params.s_h - 2 * delta_y,
        ],
        axis=-1,
    )


def encode_targets_array(anchors: np.ndarray, faces: np.ndarray, k: int, cfg: PyramidAnchorConfig) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if np.any(anchors[:, 2] * anchors[:, 3] <= 0):
        raise ContractError("anchor with non-positive area")
    base = _base_encode(anchors, np.asarray(faces, dtype=np.float64).reshape(-1, 4), cfg.variance)
    return context_transform(base, k, cfg.s_pa, cfg.context[k])


def encode_targets(anchor: BoxPx, face: BoxPx, k: int, params: ContextTransform | None = None,
                   s_pa: float = 2.0, variance=(1.0, 1.0)) -> np.ndarray:
    if anchor.width * anchor.height <= 0:
        raise ContractError(f"anchor with non-positive area: {anchor}")
    if params is None:
        params = default_context_params(max(k, 2))[k]
    base = _base_encode(to_array([anchor]), to_array([face]), variance)
    return context_transform(base, k, s_pa, params)[0]


def decode_array(anchors: np.ndarray, t: np.ndarray, variance=(1.0, 1.0)) -> np.ndarray:
    """Invert the base (k = 0) parameterisation for many anchors at once."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    if np.any(anchors[:, 2] * anchors[:, 3] <= 0):
        raise ContractError("anchor with non-positive area")
    tw = t[:, 2] * variance[1]
    th = t[:, 3] * variance[1]
    over = (np.abs(tw) > LOG_CLAMP) | (np.abs(th) > LOG_CLAMP)
    if over.any():
        if _t._settings.checked:
            warnings.warn(f"{int(over.sum())} size offsets clamped to +-{LOG_CLAMP}", RuntimeWarning, stacklevel=2)
        tw = np.clip(tw, -LOG_CLAMP, LOG_CLAMP)
        th = np.clip(th, -LOG_CLAMP, LOG_CLAMP)
    cx = anchors[:, 0] + anchors[:, 2] / 2 + t[:, 0] * variance[0] * anchors[:, 2]
    cy = anchors[:, 1] + anchors[:, 3] / 2 + t[:, 1] * variance[0] * anchors[:, 3]
    w = anchors[:, 2] * np.exp(tw)
    h = anchors[:, 3] * np.exp(th)
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)


def decode_box(anchor: BoxPx, t, variance=(1.0, 1.0)) -> BoxPx:
    return BoxPx(*decode_array(to_array([anchor]), np.asarray(t, dtype=np.float64), variance)[0].tolist())
