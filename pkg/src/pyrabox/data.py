"""Annotation and PPM I/O, baseline augmentation, data-anchor-sampling."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .anchors import layer_specs
from .boxes import BoxPx
from .tensor import ContractError


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        where = f"{path}:" if path is not None else ""
        where += f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class FormatError(ValueError):
    pass


@dataclass
class SampleRecord:
    image: np.ndarray | None  # (H, W, 3) uint8
    faces: list
    source_path: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class SamplerDraw:
    s_face: float
    i_anchor: int
    i_target: int
    s_target: float
    s_star: float


@dataclass
class TrainCrop:
    image: np.ndarray
    faces: list
    provenance: SamplerDraw | None = None
    scale: float = 1.0
    selected: int | None = None


# ---------------------------------------------------------------------------
# annotations


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def parse_annotations(path=None, text: str | None = None) -> list:
    """Read WIDER-style blocks: path line, count line, ``count`` box lines.

    Attribute columns after ``x y w h`` are ignored; a zero count consumes one
    placeholder line. Zero-area boxes are dropped.
    """
    if text is None:
        text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    records = []
    i = 0
    n = len(lines)
    while i < n:
        if not lines[i].strip():
            i += 1
            continue
        img_path = lines[i].strip()
        i += 1
        if i >= n:
            raise ParseError(f"missing face count after {img_path!r}", i + 1, path)
        try:
            count = int(lines[i].strip())
        except ValueError:
            raise ParseError(f"malformed face count {lines[i].strip()!r}", i + 1, path) from None
        if count < 0:
            raise ParseError(f"negative face count {count}", i + 1, path)
        i += 1
        faces = []
        for j in range(max(count, 1)):
            if i >= n:
                if count == 0:
                    break
                raise ParseError(f"truncated block for {img_path!r}: expected {count} boxes, found {j}", i + 1, path)
            parts = lines[i].split()
            if count == 0:
                i += 1
                break
            if len(parts) < 4:
                raise ParseError(f"expected 'x y w h', got {lines[i].strip()!r}", i + 1, path)
            try:
                x, y, w, h = (float(p) for p in parts[:4])
            except ValueError:
                raise ParseError(f"non-numeric box field in {lines[i].strip()!r}", i + 1, path) from None
            if w < 0 or h < 0:
                raise ParseError(f"negative box extent in {lines[i].strip()!r}", i + 1, path)
            if w > 0 and h > 0:
                faces.append(BoxPx(x, y, w, h))
            i += 1
        records.append(SampleRecord(None, faces, img_path))
    return records


def serialize_annotations(records: Sequence[SampleRecord]) -> str:
    out = io.StringIO()
    for rec in records:
        out.write(f"{rec.source_path}\n{len(rec.faces)}\n")
        if not rec.faces:
            out.write("0 0 0 0\n")
        for b in rec.faces:
            out.write(" ".join(_fmt(v) for v in b.as_tuple()) + "\n")
    return out.getvalue()


def write_annotations(records: Sequence[SampleRecord], path) -> None:
    Path(path).write_text(serialize_annotations(records), encoding="utf-8")


# ---------------------------------------------------------------------------
# PPM


def _ppm_tokens(buf: bytes, count: int) -> tuple:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def load_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _ppm_tokens(buf, 4)
    if magic != b"P6":
        raise FormatError(f"{path}: unsupported PPM magic {magic.decode(errors='replace')!r} (need P6)")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    need = w * h * 3
    data = buf[pos:pos + need]
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise FormatError(f"write_ppm needs an (H, W, 3) uint8 array, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes())


def load_records(annotations, images_root) -> list:
    recs = parse_annotations(annotations)
    root = Path(images_root)
    for r in recs:
        r.image = load_ppm(root / r.source_path)
    return recs


# ---------------------------------------------------------------------------
# geometry helpers


def transform_boxes(faces: Sequence[BoxPx], scale: float, x0: float, y0: float, side_w: float, side_h: float) -> tuple:
    """Scale, shift by -(x0, y0) and clip; drop boxes whose centre leaves the window.

    Returns the kept boxes and their indices in ``faces``.
    """
    kept, idx = [], []
    for i, b in enumerate(faces):
        bx, by = b.x_min * scale - x0, b.y_min * scale - y0
        bw, bh = b.width * scale, b.height * scale
        cx, cy = bx + bw / 2, by + bh / 2
        if not (0 <= cx < side_w and 0 <= cy < side_h):
            continue
        x1, y1 = max(bx, 0.0), max(by, 0.0)
        x2, y2 = min(bx + bw, side_w), min(by + bh, side_h)
        if x2 > x1 and y2 > y1:
            kept.append(BoxPx(x1, y1, x2 - x1, y2 - y1))
            idx.append(i)
    return kept, idx


def resample_window(image: np.ndarray, scale: float, x0: float, y0: float, out_w: int, out_h: int, fill) -> np.ndarray:
    """Window [x0, x0+out_w) x [y0, y0+out_h) of the image resized by ``scale``.

    Only the covered source region is resampled; the rest is ``fill``.
    """
    h, w = image.shape[:2]
    canvas = np.empty((out_h, out_w, 3), dtype=np.uint8)
    canvas[:] = np.asarray(fill, dtype=np.uint8)
    rw, rh = w * scale, h * scale
    dx0, dy0 = max(0, math.ceil(-x0)), max(0, math.ceil(-y0))
    dx1 = min(out_w, math.floor(rw - x0))
    dy1 = min(out_h, math.floor(rh - y0))
    if dx1 <= dx0 or dy1 <= dy0:
        return canvas
    box = ((x0 + dx0) / scale, (y0 + dy0) / scale, (x0 + dx1) / scale, (y0 + dy1) / scale)
    box = (max(box[0], 0.0), max(box[1], 0.0), min(box[2], float(w)), min(box[3], float(h)))
    patch = Image.fromarray(image).resize((dx1 - dx0, dy1 - dy0), Image.BILINEAR, box=box)
    canvas[dy0:dy1, dx0:dx1] = np.asarray(patch)
    return canvas


def mean_color(image: np.ndarray) -> np.ndarray:
    return np.round(image.reshape(-1, 3).mean(axis=0)).astype(np.uint8)


def letterbox(image: np.ndarray, size: int) -> tuple:
    """Aspect-preserving resize into a size x size canvas (top-left aligned, mean padded).

    Returns the canvas and the applied scale.
    """
    h, w = image.shape[:2]
    scale = size / max(h, w)
    if h == w == size:
        return image.copy(), 1.0
    return resample_window(image, scale, 0.0, 0.0, size, size, mean_color(image)), scale


# ---------------------------------------------------------------------------
# data-anchor-sampling

ANCHOR_SCALES = tuple(s.scale for s in layer_specs())


def nearest_anchor_index(s_face: float, scales=ANCHOR_SCALES) -> int:
    return int(np.argmin([abs(s - s_face) for s in scales]))


def target_indices(i_anchor: int, num_layers: int = len(ANCHOR_SCALES)) -> list:
    return list(range(min(num_layers - 1, i_anchor + 1) + 1))


def draw_scale(s_face: float, rng: np.random.Generator, i_target: int | None = None,
               s_target: float | None = None, scales=ANCHOR_SCALES) -> SamplerDraw:
    """Pick a target anchor level at or below one above the nearest level, then a size around it."""
    if s_face <= 0:
        raise ContractError(f"face size must be positive, got {s_face}")
    i_anchor = nearest_anchor_index(s_face, scales)
    choices = target_indices(i_anchor, len(scales))
    if i_target is None:
        i_target = int(choices[rng.integers(len(choices))])
    elif i_target not in choices:
        raise ContractError(f"target index {i_target} not in {choices}")
    if s_target is None:
        s_i = scales[i_target]
        s_target = float(rng.uniform(s_i / 2, s_i * 2))
    return SamplerDraw(float(s_face), i_anchor, i_target, float(s_target), float(s_target) / float(s_face))


def data_anchor_sample(rec: SampleRecord, rng: np.random.Generator, crop_side: int = 640,
                       draw: SamplerDraw | None = None, face_index: int | None = None) -> TrainCrop:
    """Resize the image so a random face lands near a random anchor scale, then crop around it."""
    if not rec.faces:
        raise ContractError("data-anchor-sampling needs at least one face")
    if face_index is None:
        face_index = int(rng.integers(len(rec.faces)))
    face = rec.faces[face_index]
    if draw is None:
        draw = draw_scale(math.sqrt(face.width * face.height), rng)
    scale = draw.s_star
    # keep the chosen face inside the crop
    scale = min(scale, crop_side / max(face.width, face.height))
    h, w = rec.image.shape[:2]
    fx0, fy0 = face.x_min * scale, face.y_min * scale
    fx1, fy1 = fx0 + face.width * scale, fy0 + face.height * scale
    x0 = _window_origin(rng, fx0, fx1, w * scale, crop_side)
    y0 = _window_origin(rng, fy0, fy1, h * scale, crop_side)
    img = resample_window(rec.image, scale, x0, y0, crop_side, crop_side, mean_color(rec.image))
    faces, idx = transform_boxes(rec.faces, scale, x0, y0, crop_side, crop_side)
    sel = idx.index(face_index) if face_index in idx else None
    return TrainCrop(img, faces, draw, scale, sel)


def _window_origin(rng, f0: float, f1: float, extent: float, crop: int) -> float:
    lo = max(min(0.0, extent - crop), f1 - crop)
    hi = min(max(0.0, extent - crop), f0)
    lo_i, hi_i = math.ceil(lo), math.floor(hi)
    if lo_i <= hi_i:
        return float(rng.integers(lo_i, hi_i + 1))
    return (lo + hi) / 2 if lo <= hi else f0 - (crop - (f1 - f0)) / 2


# ---------------------------------------------------------------------------
# baseline augmentation


def flip_boxes(faces: Sequence[BoxPx], width: float) -> list:
    return [BoxPx(width - b.x_max, b.y_min, b.width, b.height) for b in faces]


def jitter_bytes(image: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    return np.clip(np.round(image.astype(np.float64) * alpha + beta), 0, 255).astype(np.uint8)


def baseline_augment(rec: SampleRecord, rng: np.random.Generator, p: float = 0.5) -> SampleRecord:
    """Flip, brightness/contrast jitter and a square crop, each with probability ``p``."""
    img, faces = rec.image, list(rec.faces)
    fire = rng.random(3) < p
    alpha, beta = rng.uniform(0.8, 1.2), rng.uniform(-16, 16)
    crop_frac = rng.uniform(0.5, 1.0)
    pos = rng.random(2)
    if fire[0]:
        img = img[:, ::-1].copy()
        faces = flip_boxes(faces, img.shape[1])
    if fire[1]:
        img = jitter_bytes(img, alpha, beta)
    if fire[2]:
        h, w = img.shape[:2]
        side = max(1, int(crop_frac * min(h, w)))
        x0 = int(pos[0] * (w - side + 1))
        y0 = int(pos[1] * (h - side + 1))
        img = img[y0:y0 + side, x0:x0 + side].copy()
        faces, _ = transform_boxes(faces, 1.0, x0, y0, side, side)
    if img is rec.image:
        return replace(rec, faces=faces)
    return replace(rec, image=img, faces=faces)


def resize_to_input(rec: SampleRecord, size: int) -> TrainCrop:
    """Plain letterbox of a whole record to the network input."""
    img, scale = letterbox(rec.image, size)
    faces, _ = transform_boxes(rec.faces, scale, 0.0, 0.0, size, size)
    return TrainCrop(img, faces, None, scale)


# ---------------------------------------------------------------------------
# sampling report

SIZE_BINS = (0, 8, 16, 32, 64, 128, 256, 512, 1024, math.inf)


@dataclass
class SampleReport:
    edges: tuple
    pre: np.ndarray
    post: np.ndarray
    pre_mean: float
    post_mean: float

    def mass_below(self, size: float) -> tuple:
        lo = np.array(self.edges[:-1])
        sel = lo < size
        pre = self.pre[sel].sum() / max(self.pre.sum(), 1)
        post = self.post[sel].sum() / max(self.post.sum(), 1)
        return float(pre), float(post)

    @property
    def small_mass_increased(self) -> bool:
        pre, post = self.mass_below(64)
        return post > pre

    def check(self) -> None:
        """Faces all >= 64 px before sampling must gain mass below 64 px."""
        lo = np.array(self.edges[:-1])
        if self.pre[lo < 64].sum() == 0 and not self.small_mass_increased:
            raise AssertionError("data-anchor-sampling did not increase the share of faces below 64 px")

    def to_csv(self) -> str:
        rows = ["size_lo,size_hi,pre_count,post_count,pre_frac,post_frac"]
        tp, tq = max(self.pre.sum(), 1), max(self.post.sum(), 1)
        for lo, hi, a, b in zip(self.edges[:-1], self.edges[1:], self.pre, self.post):
            rows.append(f"{lo},{hi},{int(a)},{int(b)},{a / tp:.6f},{b / tq:.6f}")
        rows.append(f"mean,,{self.pre_mean:.6f},{self.post_mean:.6f},,")
        return "\n".join(rows) + "\n"


def sample_report(draws: Sequence[SamplerDraw], edges=SIZE_BINS) -> SampleReport:
    if not draws:
        raise ContractError("sample_report needs at least one draw")
    pre = np.array([d.s_face for d in draws])
    post = np.array([d.s_target for d in draws])
    hp, _ = np.histogram(pre, bins=np.array(edges, dtype=float))
    hq, _ = np.histogram(post, bins=np.array(edges, dtype=float))
    return SampleReport(tuple(edges), hp, hq, float(pre.mean()), float(post.mean()))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    size: int = 160
    min_side: int = 12
    max_side: int = 96
    max_faces: int = 3
    min_faces: int = 1


def paint_face(img: np.ndarray, x: int, y: int, side: int, rng: np.random.Generator) -> None:
    """A smooth, bright square with two dark eyes and a mouth bar."""
    skin = rng.uniform(170, 240, size=3)
    yy, xx = np.mgrid[0:side, 0:side] / side
    shade = 1.0 - 0.25 * ((xx - 0.5) ** 2 + (yy - 0.5) ** 2)
    patch = skin[None, None, :] * shade[..., None] + rng.normal(0, 4, size=(side, side, 3))
    dark = rng.uniform(10, 60, size=3)
    eye_r = 0.1
    for ex in (0.3, 0.7):
        m = (xx - ex) ** 2 + (yy - 0.35) ** 2 < eye_r ** 2
        patch[m] = dark
    mouth = (np.abs(yy - 0.72) < 0.06) & (np.abs(xx - 0.5) < 0.22)
    patch[mouth] = dark
    img[y:y + side, x:x + side] = np.clip(patch, 0, 255).astype(np.uint8)


def synthetic_record(rng: np.random.Generator, spec: SyntheticSpec = SyntheticSpec(), name: str = "") -> SampleRecord:
    s = spec.size
    img = rng.integers(0, 256, size=(s, s, 3), dtype=np.uint8)
    n_faces = int(rng.integers(spec.min_faces, spec.max_faces + 1))
    faces: list = []
    for _ in range(n_faces):
        for _attempt in range(50):
            side = int(rng.integers(spec.min_side, min(spec.max_side, s) + 1))
            x = int(rng.integers(0, s - side + 1))
            y = int(rng.integers(0, s - side + 1))
            cand = BoxPx(x, y, side, side)
            if all(_separated(cand, f) for f in faces):
                faces.append(cand)
                paint_face(img, x, y, side, rng)
                break
    return SampleRecord(img, faces, name)


def _separated(a: BoxPx, b: BoxPx, gap: float = 2.0) -> bool:
    return (a.x_max + gap <= b.x_min or b.x_max + gap <= a.x_min or
            a.y_max + gap <= b.y_min or b.y_max + gap <= a.y_min)


def synthetic_dataset(n: int, seed: int, spec: SyntheticSpec = SyntheticSpec(), prefix: str = "img") -> list:
    rng = np.random.default_rng(seed)
    return [synthetic_record(rng, spec, f"{prefix}/{i:05d}.ppm") for i in range(n)]
