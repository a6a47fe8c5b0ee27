"""Finite-difference gradient suite and quick invariant self-tests."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .anchors import AnchorGrid, AnchorLayerSpec, PyramidAnchorConfig, label_pyramid
from .boxes import BoxPx
from .loss import multi_level_loss
from .network import HEAD_CHANNELS, _cpm_params, build_cpm, build_lfpn

Builder = Callable[[np.random.Generator], tuple]


def _weighted(y: T.Tensor, r: np.ndarray) -> T.Tensor:
    """Scalar probe sum(y * r) with a fixed random weighting."""
    return T.sum(T.mul(y, r))


def _probe(rng, shape):
    return rng.standard_normal(shape)


def _away_from(rng, shape, kinks, margin=1e-3):
    """Random values kept at least ``margin`` from every kink point."""
    v = rng.standard_normal(shape)
    for k in kinks:
        close = np.abs(v - k) < margin
        v[close] += np.where(v[close] >= k, margin, -margin) * 2
    return v


def b_conv2d(rng):
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    dil = int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    oh = T.conv_out_size(7, k, stride, pad, dil)
    r = _probe(rng, (2, 4, oh, oh))
    return (lambda x, w, b: _weighted(T.conv2d(x, w, b, stride, pad, dil), r)), {"x": x, "w": w, "b": b}


def b_relu(rng):
    x = _away_from(rng, (2, 3, 4, 4), [0.0])
    r = _probe(rng, x.shape)
    return (lambda x: _weighted(T.relu(x), r)), {"x": x}


def b_arith(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((1, 3, 1, 4))
    r = _probe(rng, a.shape)
    return (lambda a, b: _weighted(T.sub(T.mul(T.add(a, b), b), a), r)), {"a": a, "b": b}


def b_structural(rng):
    x = rng.standard_normal((2, 5, 3, 3))
    rows = rng.integers(0, 18, size=12)
    r = _probe(rng, (12, 3))

    def fn(x):
        y = T.concat([T.slice_axis(x, 1, 0, 2), T.slice_axis(x, 1, 3, 5)], axis=1)
        y = T.reshape(T.transpose(y, (0, 2, 3, 1)), (18, 4))
        y = T.slice_axis(T.take_rows(y, rows), 1, 1, 4)
        return _weighted(y, r)

    return fn, {"x": x}


def b_maxpool(rng):
    # distinct values make the argmax unambiguous under small perturbations
    x = rng.permutation(2 * 2 * 6 * 7).reshape(2, 2, 6, 7) * 0.01 + rng.uniform(0, 1e-3, (2, 2, 6, 7))
    r = _probe(rng, (2, 2, 3, 3))
    return (lambda x: _weighted(T.maxpool2x(x), r)), {"x": x}


def b_upsample(rng):
    mode = "nearest" if rng.random() < 0.5 else "bilinear"
    x = rng.standard_normal((2, 3, 3, 4))
    r = _probe(rng, (2, 3, 6, 8))
    return (lambda x: _weighted(T.upsample2x(x, mode), r)), {"x": x}


def b_l2_rescale(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    g = rng.uniform(0.5, 2.0, 4)
    r = _probe(rng, x.shape)
    return (lambda x, g: _weighted(T.l2_rescale(x, g), r)), {"x": x, "g": g}


def b_softmax(rng):
    x = rng.standard_normal((2, 6, 3, 3))
    r = _probe(rng, x.shape)
    return (lambda x: _weighted(T.softmax_channels(x, 2), r)), {"x": x}


def b_log_softmax(rng):
    x = rng.standard_normal((7, 2)) * 3
    r = _probe(rng, x.shape)
    return (lambda x: _weighted(T.log_softmax(x, axis=1), r)), {"x": x}


def b_group_max(rng):
    x = rng.permutation(2 * 6 * 3 * 3).reshape(2, 6, 3, 3) * 0.01
    r = _probe(rng, (2, 1, 3, 3))
    return (lambda x: _weighted(T.channel_group_max(x, 1, 3), r)), {"x": x}


def b_smooth_l1(rng):
    x = _away_from(rng, (5, 4), [-1.0, 1.0]) * 1.5
    r = _probe(rng, x.shape)
    return (lambda x: _weighted(T.smooth_l1(x), r)), {"x": x}


def _cpm_inputs(rng, cin=8, width=8, hw=6):
    params: dict = {}
    with T.precision(np.float64):
        _cpm_params(params, rng, "c", cin, width, gain=1.0)
    # random biases keep pre-activations off the ReLU kink at exactly zero
    inputs = {k.replace(".", "_"): (rng.standard_normal(v.shape) * 0.5 if k.endswith(".b") else v.data)
              for k, v in params.items()}
    inputs["x"] = rng.standard_normal((1, cin, hw, hw))
    return inputs


def _rebuild(kw: dict) -> dict:
    return {k.replace("_", "."): v for k, v in kw.items() if k != "x"}


def b_cpm(rng):
    inputs = _cpm_inputs(rng)
    r = _probe(rng, (1, 8, 6, 6))
    return (lambda **kw: _weighted(build_cpm(_rebuild(kw), "c", kw["x"]), r)), inputs


def b_lfpn(rng):
    """Top-down merge over three taps, alternating merge and upsample modes by seed."""
    merge = "add" if rng.random() < 0.5 else "mul"
    mode = "nearest" if rng.random() < 0.5 else "bilinear"
    inputs = {f"f{i}": rng.standard_normal((1, 3, 8 >> i, 8 >> i)) for i in range(3)}
    for i, k in (("lat2", 1), ("lat1", 1), ("lat0", 1), ("smooth1", 3), ("smooth0", 3)):
        inputs[f"lfpn_{i}_w"] = rng.standard_normal((4, 3 if i.startswith("lat") else 4, k, k)) * 0.5
        inputs[f"lfpn_{i}_b"] = rng.standard_normal(4) * 0.1
    r = [_probe(rng, (1, 4, 8 >> i, 8 >> i)) for i in range(2)]

    def fn(**kw):
        feats = [kw.pop(f"f{i}") for i in range(3)]
        out = build_lfpn(_rebuild(kw), feats, 2, merge, mode)
        return T.add(_weighted(out[0], r[0]), _weighted(out[1], r[1]))

    return fn, inputs


def _tiny_grid(sizes=((4, 4), (2, 2)), strides=(4, 8), scales=(8.0, 16.0)) -> AnchorGrid:
    boxes, specs = [], []
    for i, ((h, w), s, a) in enumerate(zip(sizes, strides, scales)):
        specs.append(AnchorLayerSpec(i, s, a))
        for row in range(h):
            for col in range(w):
                cx, cy = (col + 0.5) * s, (row + 0.5) * s
                boxes.append((cx - a / 2, cy - a / 2, a, a))
    arr = np.array(boxes, dtype=np.float64)
    offsets = np.cumsum([0] + [h * w for h, w in sizes])
    return AnchorGrid(input_size=16, specs=specs, sizes=list(sizes), boxes=arr, offsets=offsets)


def b_loss(rng):
    grid = _tiny_grid()
    cfg = PyramidAnchorConfig(threshold=0.3, min_face_side=1)
    labels = label_pyramid(grid, [BoxPx(2, 2, 7, 7), BoxPx(8, 5, 6, 7)], cfg)
    maps = {"m0": rng.standard_normal((1, HEAD_CHANNELS, 4, 4)), "m1": rng.standard_normal((1, HEAD_CHANNELS, 2, 2))}
    return (lambda m0, m1: multi_level_loss([m0, m1], labels, cfg).total), maps


def b_cpm_loss(rng):
    """CPM feeding a prediction head feeding the multi-level loss."""
    inputs = _cpm_inputs(rng, cin=4, width=8, hw=4)
    inputs["head_w"] = rng.standard_normal((HEAD_CHANNELS, 8, 3, 3)) * 0.2
    inputs["head_b"] = np.zeros(HEAD_CHANNELS)
    grid = _tiny_grid(sizes=((4, 4),), strides=(4,), scales=(8.0,))
    cfg = PyramidAnchorConfig(threshold=0.3, min_face_side=1)
    labels = label_pyramid(grid, [BoxPx(3, 2, 6, 7)], cfg)

    def fn(**kw):
        hw, hb = kw.pop("head_w"), kw.pop("head_b")
        feat = build_cpm(_rebuild(kw), "c", kw["x"])
        return multi_level_loss([T.conv2d(feat, hw, hb, 1, 1)], labels, cfg).total

    return fn, inputs


BUILDERS: dict[str, Builder] = {
    "conv2d": b_conv2d,
    "relu": b_relu,
    "add_sub_mul": b_arith,
    "structural": b_structural,
    "maxpool2x": b_maxpool,
    "upsample2x": b_upsample,
    "l2_rescale": b_l2_rescale,
    "softmax_channels": b_softmax,
    "log_softmax": b_log_softmax,
    "channel_group_max": b_group_max,
    "smooth_l1": b_smooth_l1,
    "lfpn": b_lfpn,
    "cpm": b_cpm,
    "loss": b_loss,
    "cpm_loss": b_cpm_loss,
}


@dataclass
class SuiteRow:
    op: str
    seeds: int
    max_error: float
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures


def run_gradcheck_suite(seeds=range(20), ops=None, tolerance: float = 1e-4, max_coords: int | None = 12) -> tuple:
    """Check every op over every seed; returns (rows, seconds).

    Each input is probed at up to ``max_coords`` seeded entries (None: all).
    """
    t0 = time.perf_counter()
    rows = []
    for op in ops or BUILDERS:
        worst, bad = 0.0, []
        for s in seeds:
            rep = T.gradcheck(BUILDERS[op], seed=int(s), tolerance=tolerance, max_coords=max_coords)
            worst = max(worst, rep.max_error)
            if not rep.passed:
                bad.append(int(s))
        rows.append(SuiteRow(op, len(list(seeds)), worst, bad))
    return rows, time.perf_counter() - t0


def format_rows(rows) -> str:
    lines = [f"{'op':<18} {'seeds':>5} {'max_rel_err':>12}  status"]
    for r in rows:
        status = "ok" if r.passed else f"FAIL seeds={r.failures}"
        lines.append(f"{r.op:<18} {r.seeds:>5} {r.max_error:>12.3e}  {status}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# independent reference implementations


def raster_iou(a: tuple, b: tuple) -> float:
    """IoU of integer xywh boxes by counting covered unit pixels."""
    x0 = int(min(a[0], b[0]))
    y0 = int(min(a[1], b[1]))
    x1 = int(max(a[0] + a[2], b[0] + b[2]))
    y1 = int(max(a[1] + a[3], b[1] + b[3]))
    ys, xs = np.mgrid[y0:y1, x0:x1]

    def cover(r):
        return (xs >= r[0]) & (xs < r[0] + r[2]) & (ys >= r[1]) & (ys < r[1] + r[3])

    ma, mb = cover(a), cover(b)
    union = int((ma | mb).sum())
    return int((ma & mb).sum()) / union if union else 0.0


def nms_reference(boxes: list, scores: list, threshold: float) -> list:
    """Quadratic greedy NMS over plain tuples; returns kept indices in score order."""
    def iou_t(a, b):
        ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
        iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
        inter = ix * iy
        union = a[2] * a[3] + b[2] * b[3] - inter
        return inter / union if union > 0 else 0.0

    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    alive = [True] * len(boxes)
    keep = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if alive[j] and iou_t(boxes[i], boxes[j]) > threshold:
                alive[j] = False
    return keep


def context_oracle(t: tuple, k: int) -> tuple:
    """Closed-form level-k targets with the default transform parameters substituted by hand."""
    tx, ty, tw, th = t
    if k == 0:
        return (tx, ty, tw, th)
    if k == 1:
        return (tx - tw / 2, ty - th / 2, 2 * tw, 2 * th)
    if k == 2:
        return (tx - 21 / 16 * tw, ty - th / 2, 7 / 2 * tw, 2 * th)
    raise ValueError("closed forms exist for k <= 2 only")


# ---------------------------------------------------------------------------
# self-test


def _check_gradients():
    rows, secs = run_gradcheck_suite(seeds=range(2))
    bad = [r.op for r in rows if not r.passed]
    return not bad, f"{len(rows)} ops x 2 seeds in {secs:.1f}s" + (f"; failing {bad}" if bad else "")


def _check_label_rule():
    from .anchors import pyramid_label_literal, pyramid_label_scaled

    rng = np.random.default_rng(0)
    for _ in range(2000):
        a = BoxPx(*rng.integers(0, 200, 2), *rng.integers(1, 300, 2))
        f = BoxPx(*rng.integers(0, 200, 2), *rng.integers(1, 100, 2))
        k = int(rng.integers(0, 3))
        if pyramid_label_literal(a, f, k, 2.0, 0.35) != pyramid_label_scaled(a, f, k, 2.0, 0.35):
            return False, f"mismatch for anchor {a} face {f} k={k}"
    return True, "2000 random triples agree"


def _check_context():
    from .anchors import encode_targets

    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        a = BoxPx(*rng.uniform(0, 100, 2), *rng.uniform(4, 200, 2))
        f = BoxPx(*rng.uniform(0, 100, 2), *rng.uniform(4, 200, 2))
        base = encode_targets(a, f, 0)
        for k in (1, 2):
            worst = max(worst, float(np.max(np.abs(encode_targets(a, f, k) - context_oracle(tuple(base), k)))))
    return worst < 1e-12, f"max deviation {worst:.1e}"


def _check_receptive_fields():
    from .config import full_config
    from .network import receptive_field, select_lfpn_start

    cfg = full_config()
    got = [receptive_field(cfg, t)[1] for t in range(1, 6)]
    want = [0.16875, 0.35625, 0.53125, 0.73125, 1.13125]
    ok = got == want and select_lfpn_start(cfg) == 3
    return ok, "ratios " + ", ".join(f"{v:g}" for v in got)


def _check_iou_nms():
    from .boxes import Detection, iou, nms

    rng = np.random.default_rng(2)
    for _ in range(100):
        a = tuple(int(v) for v in (*rng.integers(0, 20, 2), *rng.integers(0, 12, 2)))
        b = tuple(int(v) for v in (*rng.integers(0, 20, 2), *rng.integers(0, 12, 2)))
        if abs(iou(BoxPx(*a), BoxPx(*b)) - raster_iou(a, b)) > 1e-9:
            return False, f"IoU mismatch {a} {b}"
    boxes = [tuple(float(v) for v in (*rng.uniform(0, 50, 2), *rng.uniform(5, 30, 2))) for _ in range(60)]
    scores = [float(s) for s in rng.integers(0, 20, 60) / 20]
    dets = [Detection(BoxPx(*b), s) for b, s in zip(boxes, scores)]
    kept = nms(dets, 0.4)
    ref = [dets[i] for i in nms_reference(boxes, scores, 0.4)]
    return [id(d) for d in kept] == [id(d) for d in ref], f"{len(kept)} of 60 kept"


def _check_ap_fixture():
    from .boxes import Detection
    from .train import evaluate

    gts = [[BoxPx(0, 0, 10, 10), BoxPx(20, 0, 10, 10)]]
    dets = [[Detection(BoxPx(0, 0, 10, 10), 0.9), Detection(BoxPx(50, 50, 10, 10), 0.8),
             Detection(BoxPx(20, 0, 10, 10), 0.7)]]
    ap = evaluate(dets, gts).ap
    return ap == 5 / 6, f"AP {ap!r}"


def _check_round_trips():
    import tempfile
    from pathlib import Path

    from .config import toy_config
    from .data import parse_annotations, serialize_annotations
    from .network import init_params, load_model, save_model

    params = init_params(toy_config(), seed=3)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.pybx"
        save_model(params, path)
        back = load_model(path)
    same = set(back) == set(params) and all(
        back[k].data.dtype == params[k].data.dtype and back[k].data.tobytes() == params[k].data.tobytes() for k in params)
    text = "a.ppm\n2\n1 2 3 4\n5.5 6 7 8\nb.ppm\n0\n0 0 0 0\n"
    ann_ok = serialize_annotations(parse_annotations(text=text)) == text
    return same and ann_ok, f"model {'ok' if same else 'differs'}, annotations {'ok' if ann_ok else 'differ'}"


def _check_sampler():
    from .data import draw_scale

    rng = np.random.default_rng(4)
    counts = np.bincount([draw_scale(140.0, rng).i_target for _ in range(10000)], minlength=5)
    freq = counts / counts.sum()
    forced = draw_scale(140.0, rng, i_target=1, s_target=32.0).s_star
    ok = bool(np.all(np.abs(freq - 0.2) <= 0.02)) and abs(forced - 32 / 140) < 1e-12
    return ok, "frequencies " + " ".join(f"{v:.3f}" for v in freq)


SELFTESTS = {
    "gradients": _check_gradients,
    "pyramid_label_rule": _check_label_rule,
    "context_targets": _check_context,
    "receptive_fields": _check_receptive_fields,
    "iou_and_nms": _check_iou_nms,
    "ap_fixture": _check_ap_fixture,
    "round_trips": _check_round_trips,
    "anchor_sampler": _check_sampler,
}


def run_selftest() -> list:
    """Run every invariant check; returns (name, passed, detail) rows."""
    rows = []
    for name, fn in SELFTESTS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is reported, not raised
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        rows.append((name, bool(ok), detail))
    return rows
