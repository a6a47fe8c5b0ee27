"""SGD training, face-branch inference and PR/AP evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .anchors import AnchorGrid, build_grid, decode_array, label_pyramid
from .boxes import BoxPx, Detection, iou_matrix, nms, to_array
from .config import LrSchedule, NetworkConfig
from .data import (SampleRecord, TrainCrop, baseline_augment, data_anchor_sample, letterbox,
                   resize_to_input)
from .loss import LossBreakdown, multi_level_loss
from .network import HeadLayout, face_probability, forward, init_params

log = logging.getLogger(__name__)

MOMENTUM = 0.9
WEIGHT_DECAY = 5e-4
PIXEL_MEAN = 127.5
PIXEL_SCALE = 1 / 128.0


class NumericError(FloatingPointError):
    """Non-finite loss or gradient during training."""


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Piecewise-constant rate; steps past the last boundary keep the final rate."""
    for bound, (_, lr) in zip(schedule.boundaries(), schedule.segments):
        if step < bound:
            return lr
    return schedule.segments[-1][1]


def _decays(name: str) -> bool:
    return not (name.endswith(".b") or name.endswith(".gamma"))


@dataclass
class TrainState:
    cfg: NetworkConfig
    params: dict
    momentum: dict
    step: int = 0
    seed: int = 0
    grid: AnchorGrid | None = None

    @classmethod
    def create(cls, cfg: NetworkConfig, params: dict | None = None, seed: int | None = None) -> "TrainState":
        params = init_params(cfg) if params is None else params
        mom = {k: np.zeros_like(v.data) for k, v in params.items()}
        return cls(cfg, params, mom, 0, cfg.seed if seed is None else seed, build_grid(cfg))


def to_input(images: Sequence[np.ndarray]) -> np.ndarray:
    """(H, W, 3) uint8 images -> normalised NCHW batch in the engine dtype."""
    arr = np.stack(images).astype(T.default_dtype())
    return np.ascontiguousarray(((arr - PIXEL_MEAN) * PIXEL_SCALE).transpose(0, 3, 1, 2))


def make_crop(rec: SampleRecord, cfg: NetworkConfig, rng: np.random.Generator) -> TrainCrop:
    """Baseline augmentation, then data-anchor-sampling or a plain resize to the input."""
    rec = baseline_augment(rec, rng)
    if rec.faces and rng.random() < cfg.sampling_prob:
        return data_anchor_sample(rec, rng, crop_side=cfg.input_size)
    return resize_to_input(rec, cfg.input_size)


def clip_scale(params: dict, max_norm: float | None) -> float:
    """Factor that brings the global gradient norm down to ``max_norm`` (1 if already below)."""
    if not max_norm:
        return 1.0
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float(np.dot(p.grad.ravel().astype(np.float64), p.grad.ravel().astype(np.float64)))
    norm = np.sqrt(sq)
    return 1.0 if norm <= max_norm else float(max_norm / norm)


def train_step(state: TrainState, batch: Sequence[TrainCrop], lr: float | None = None,
               momentum: float = MOMENTUM, weight_decay: float = WEIGHT_DECAY) -> tuple:
    """One forward/backward/SGD update; gradients are averaged over the batch.

    With ``clip_grad_norm`` set in the config the data gradient is rescaled to
    at most that global norm before weight decay and momentum are applied.
    """
    if not batch:
        raise T.ContractError("empty batch")
    cfg = state.cfg
    grid = state.grid or build_grid(cfg)
    labels = [label_pyramid(grid, c.faces, cfg.pyramid) for c in batch]
    x = T.Tensor(to_input([c.image for c in batch]))
    for p in state.params.values():
        p.grad = None
    heads = forward(state.params, cfg, x)
    breakdown = multi_level_loss(heads, labels, cfg.pyramid)
    _check_finite(breakdown)
    T.backward(breakdown.total)
    rate = lr_at(state.step, cfg.lr_schedule) if lr is None else lr
    for name, p in state.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for {name} at step {state.step}")
    clip = clip_scale(state.params, cfg.clip_grad_norm)
    for name, p in state.params.items():
        if p.grad is None:
            continue
        g = p.grad if clip == 1.0 else p.grad * np.float32(clip)
        if weight_decay and _decays(name):
            g = g + weight_decay * p.data
        v = state.momentum[name]
        v *= momentum
        v -= rate * g
        p.data += v
    state.step += 1
    return state, breakdown


def _check_finite(b: LossBreakdown) -> None:
    for k, br in enumerate(b.branches):
        for term in ("cls_term", "reg_term"):
            if not np.isfinite(getattr(br, term)):
                raise NumericError(f"non-finite {term[:3]} loss in branch k={k}")
    if not np.isfinite(b.value):
        raise NumericError("non-finite total loss")


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def train(cfg: NetworkConfig, records: Sequence[SampleRecord], steps: int, seed: int | None = None,
          state: TrainState | None = None, callback: Callable | None = None, log_every: int = 50) -> tuple:
    """Single-producer, deterministic training loop over shuffled records."""
    seed = cfg.seed if seed is None else seed
    state = state or TrainState.create(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    usable = [r for r in records if r.faces]
    if not usable:
        raise T.ContractError("no training records with faces")
    history = TrainLog()
    t0 = time.perf_counter()
    order = rng.permutation(len(usable))
    cursor = 0
    for _ in range(steps):
        batch = []
        for _ in range(cfg.batch_size):
            if cursor == len(order):
                order, cursor = rng.permutation(len(usable)), 0
            batch.append(make_crop(usable[order[cursor]], cfg, rng))
            cursor += 1
        state, br = train_step(state, batch)
        history.steps.append(state.step)
        history.losses.append(br.value)
        if log_every and state.step % log_every == 0:
            log.info("step %d loss %.4f lr %g", state.step, br.value, lr_at(state.step - 1, cfg.lr_schedule))
        if callback is not None:
            callback(state, br)
    history.seconds = time.perf_counter() - t0
    return state, history


# ---------------------------------------------------------------------------
# inference


def _face_outputs(heads: list) -> tuple:
    probs, regs = [], []
    for tap, hm in enumerate(heads):
        d = hm.data
        n = d.shape[0]
        probs.append(face_probability(d, tap).reshape(n, -1))
        lay = HeadLayout(tap, 0)
        s, ln = lay.reg_slice(0)
        regs.append(d[:, s:s + ln].transpose(0, 2, 3, 1).reshape(n, -1, 4))
    return np.concatenate(probs, axis=1), np.concatenate(regs, axis=1)


def infer_batch(params: dict, cfg: NetworkConfig, images: Sequence[np.ndarray], score_threshold: float = 0.05,
                nms_threshold: float = 0.3, top_k: int = 750, grid: AnchorGrid | None = None) -> list:
    """Face-branch detections for each image, in that image's pixel coordinates."""
    grid = grid or build_grid(cfg)
    boxed, scales = zip(*(letterbox(im, cfg.input_size) for im in images))
    with T.no_grad():
        heads = forward(params, cfg, T.Tensor(to_input(boxed)))
    probs, regs = _face_outputs(heads)
    out = []
    for i, im in enumerate(images):
        h, w = im.shape[:2]
        keep = np.flatnonzero(probs[i] > score_threshold)
        if keep.size > top_k:
            keep = keep[np.argsort(-probs[i][keep], kind="stable")[:top_k]]
        boxes = decode_array(grid.boxes[keep], regs[i][keep], cfg.pyramid.variance) / scales[i]
        dets = []
        for b, s in zip(boxes, probs[i][keep]):
            x0, y0 = max(b[0], 0.0), max(b[1], 0.0)
            x1, y1 = min(b[0] + b[2], w), min(b[1] + b[3], h)
            if x1 > x0 and y1 > y0:
                dets.append(Detection(BoxPx(x0, y0, x1 - x0, y1 - y0), float(s), 0))
        out.append(nms(dets, nms_threshold))
    return out


def infer(params: dict, cfg: NetworkConfig, image: np.ndarray, score_threshold: float = 0.05,
          nms_threshold: float = 0.3, **kw) -> list:
    return infer_batch(params, cfg, [image], score_threshold, nms_threshold, **kw)[0]


def write_detections(path, names: Sequence[str], dets: Sequence[Sequence[Detection]]) -> None:
    lines = []
    for name, ds in zip(names, dets):
        for d in ds:
            b = d.box
            lines.append(f"{name} {b.x_min:.3f} {b.y_min:.3f} {b.width:.3f} {b.height:.3f} {d.score:.6f}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_detections(path) -> dict:
    from .data import ParseError

    out: dict = {}
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(f"expected 6 fields, got {len(parts)}", no, path)
        try:
            x, y, w, h, s = (float(p) for p in parts[1:])
        except ValueError:
            raise ParseError("non-numeric detection field", no, path) from None
        if w < 0 or h < 0:
            raise ParseError("negative detection extent", no, path)
        out.setdefault(parts[0], []).append(Detection(BoxPx(x, y, w, h), s, 0))
    return out


# ---------------------------------------------------------------------------
# evaluation

SIZE_BUCKETS = {"small": (0.0, 32.0 ** 2), "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, float("inf"))}


@dataclass
class EvalReport:
    recall: list
    precision: list
    ap: float
    bucket_ap: dict = field(default_factory=dict)
    num_gt: int = 0
    num_det: int = 0

    def to_csv(self) -> str:
        rows = ["recall,precision"]
        rows += [f"{r:.6f},{p:.6f}" for r, p in zip(self.recall, self.precision)]
        rows.append(f"AP,{self.ap:.6f}")
        return "\n".join(rows) + "\n"


def _match(dets_per_image, gts_per_image, iou_thr):
    """Greedy VOC matching by descending score; returns per-detection records."""
    flat = []
    for img, dets in enumerate(dets_per_image):
        for j, d in enumerate(dets):
            flat.append((d.score, img, j, d))
    # stable: equal scores keep image/detection order
    flat.sort(key=lambda r: -r[0])
    taken = [np.zeros(len(g), dtype=bool) for g in gts_per_image]
    gt_arrays = [to_array(g) for g in gts_per_image]
    out = []
    for score, img, _, d in flat:
        g = gt_arrays[img]
        hit = -1
        if len(g):
            ious = iou_matrix(to_array([d.box]), g)[0]
            best = int(np.argmax(ious))
            if ious[best] >= iou_thr and not taken[img][best]:
                taken[img][best] = True
                hit = best
        out.append((score, img, hit, d))
    return out


def _ap_from_flags(flags: list, npos: int) -> tuple:
    """Exact continuous-interpolation AP (rational arithmetic) plus the PR points."""
    if npos == 0:
        return [], [], 0.0
    tp = fp = 0
    rec, prec = [], []
    for f in flags:
        if f:
            tp += 1
        else:
            fp += 1
        rec.append(Fraction(tp, npos))
        prec.append(Fraction(tp, tp + fp))
    env = prec[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = Fraction(0)
    prev = Fraction(0)
    for r, p in zip(rec, env):
        if r != prev:
            ap += (r - prev) * p
            prev = r
    return [float(r) for r in rec], [float(p) for p in prec], float(ap)


def evaluate(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[Sequence[BoxPx]],
             iou_thr: float = 0.5) -> EvalReport:
    if len(dets_per_image) != len(gts_per_image):
        raise T.ContractError("detections and ground truth cover different image counts")
    matches = _match(dets_per_image, gts_per_image, iou_thr)
    npos = sum(len(g) for g in gts_per_image)
    rec, prec, ap = _ap_from_flags([hit >= 0 for _, _, hit, _ in matches], npos)
    report = EvalReport(rec, prec, ap, num_gt=npos, num_det=len(matches))
    for name, (lo, hi) in SIZE_BUCKETS.items():
        in_bucket = [[lo <= b.area < hi for b in g] for g in gts_per_image]
        flags = []
        for _, img, hit, d in matches:
            if hit >= 0:
                if in_bucket[img][hit]:
                    flags.append(True)
            elif lo <= d.box.area < hi:
                flags.append(False)
        n_b = sum(sum(b) for b in in_bucket)
        report.bucket_ap[name] = _ap_from_flags(flags, n_b)[2] if n_b else float("nan")
    return report
