"""Backbone, low-level feature pyramid, context-sensitive predict modules and heads."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import NetworkConfig
from .tensor import DimensionError, Tensor

HEAD_CHANNELS = 20
L2_GAMMA_INIT = 20.0
L2_TAPS = (0, 1, 2)
TAP_NAMES = ("conv3_3", "conv4_3", "conv5_3", "conv_fc7", "conv6_2", "conv7_2")


class BuildError(DimensionError):
    """Raised when feature maps cannot be wired together."""


class ModelFormatError(ValueError):
    """Raised for malformed or incompatible model files."""


# ---------------------------------------------------------------------------
# layout


@dataclass(frozen=True)
class HeadLayout:
    """Channel layout of one tap's 20-channel prediction map."""

    tap: int
    input_size: int

    @property
    def cp(self) -> int:
        return 1 if self.tap == 0 else 3

    @property
    def cn(self) -> int:
        return 4 - self.cp

    @property
    def size(self) -> int:
        return -(-self.input_size // 2 ** (2 + self.tap))

    @property
    def channels(self) -> int:
        return self.cp + self.cn + 2 + 2 + 4 + 4 + 4

    def cls_slice(self, k: int) -> tuple:
        """(start, length) of the two raw class channels for k = 1 (head) or 2 (body)."""
        return (4 + 2 * (k - 1), 2)

    def reg_slice(self, k: int) -> tuple:
        return (8 + 4 * k, 4)


# ---------------------------------------------------------------------------
# backbone description and receptive fields


def backbone_layers(cfg: NetworkConfig) -> list:
    """(name, kind, out_channels, kernel, stride, pad) in execution order; taps flagged by name."""
    s = cfg.stage_channels
    fc = cfg.fc_channels
    e6, e7 = cfg.extra_channels
    layers = []
    for stage, (n_convs, ch) in enumerate(zip((2, 2, 3, 3, 3), s), start=1):
        for j in range(1, n_convs + 1):
            layers.append((f"conv{stage}_{j}", "conv", ch, 3, 1, 1))
        layers.append((f"pool{stage}", "pool", None, 2, 2, 0))
    layers += [
        ("fc6", "conv", fc, 3, 1, 1),
        ("fc7", "conv", fc, 1, 1, 0),
        ("conv6_1", "conv", max(1, e6 // 2), 1, 1, 0),
        ("conv6_2", "conv", e6, 3, 2, 1),
        ("conv7_1", "conv", max(1, e7 // 2), 1, 1, 0),
        ("conv7_2", "conv", e7, 3, 2, 1),
    ]
    return layers


# backbone layer that feeds each tap
TAP_LAYERS = ("conv3_3", "conv4_3", "conv5_3", "fc7", "conv6_2", "conv7_2")


def tap_channels(cfg: NetworkConfig) -> list:
    chans = {name: ch for name, kind, ch, *_ in backbone_layers(cfg) if kind == "conv"}
    return [chans[n] for n in TAP_LAYERS]


def rf_of_chain(chain) -> int:
    """Receptive field of a stack of (kernel, stride, dilation) layers."""
    rf, jump = 1, 1
    for k, s, d in chain:
        rf += (k - 1) * d * jump
        jump *= s
    return rf


def receptive_field(cfg: NetworkConfig, tap: int) -> tuple:
    """Receptive field of the 3x3 prediction on top of a backbone tap.

    Returns ``(rf_pixels, rf_pixels / input_size)``.
    """
    if tap not in range(6):
        raise ValueError(f"tap must be 0..5, got {tap}")
    chain = []
    for name, kind, _, k, s, _ in backbone_layers(cfg):
        chain.append((k, s, 1))
        if name == TAP_LAYERS[tap]:
            break
    chain.append((3, 1, 1))
    rf = rf_of_chain(chain)
    return rf, rf / cfg.input_size


def select_lfpn_start(cfg: NetworkConfig) -> int:
    """Tap whose receptive field is closest to half the input; deeper tap on ties."""
    if cfg.lfpn_start != "auto":
        return int(cfg.lfpn_start)
    best, best_d = 0, float("inf")
    for tap in range(6):
        d = abs(receptive_field(cfg, tap)[1] - 0.5)
        if d <= best_d:
            best, best_d = tap, d
    return best


def tap_sizes(cfg: NetworkConfig) -> list:
    return [HeadLayout(t, cfg.input_size).size for t in range(6)]


# ---------------------------------------------------------------------------
# parameters


def xavier_uniform(rng: np.random.Generator, shape: tuple, gain: float = 1.0) -> np.ndarray:
    o, i, kh, kw = shape
    fan_in, fan_out = i * kh * kw, o * kh * kw
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _conv_params(params: dict, rng, name: str, cin: int, cout: int, k: int, gain: float = 1.0, zero: bool = False) -> None:
    dt = T.default_dtype()
    w = np.zeros((cout, cin, k, k)) if zero else xavier_uniform(rng, (cout, cin, k, k), gain)
    params[f"{name}.w"] = Tensor(w.astype(dt), requires_grad=True, name=f"{name}.w")
    params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dt), requires_grad=True, name=f"{name}.b")


def cpm_mid(width: int) -> int:
    return max(4, width // 4)


def _cpm_params(params: dict, rng, prefix: str, cin: int, width: int, zero_branches: bool = False,
                gain: float = 1.0) -> None:
    mid = cpm_mid(width)
    _conv_params(params, rng, f"{prefix}.proj", cin, width, 1, gain)
    branch_io = {"b3": (cin, width // 2), "t1": (cin, width // 4), "b5": (width // 4, width // 4),
                 "t2": (width // 4, width // 4), "b7": (width // 4, width // 4)}
    for name, (bi, bo) in branch_io.items():
        p = f"{prefix}.{name}"
        _conv_params(params, rng, f"{p}.reduce", bi, mid, 1, gain, zero=zero_branches)
        _conv_params(params, rng, f"{p}.conv", mid, mid, 3, gain, zero=zero_branches)
        _conv_params(params, rng, f"{p}.expand", mid, bo, 1, gain, zero=zero_branches)


RELU_GAIN = float(np.sqrt(2.0))
HEAD_GAIN = 0.1


def init_params(cfg: NetworkConfig, seed: int | None = None, gain: float = RELU_GAIN) -> dict:
    """Fan-average uniform weights scaled by ``gain``, zero biases, L2 gammas of 20.

    The default gain compensates for ReLU halving the signal variance, which keeps
    deep taps alive when training from scratch. Prediction heads start small so the
    initial logits and offsets sit near zero.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params: dict = {}
    cin = 3
    for name, kind, cout, k, _, _ in backbone_layers(cfg):
        if kind != "conv":
            continue
        _conv_params(params, rng, name, cin, cout, k, gain)
        cin = cout
    chans = tap_channels(cfg)
    start = select_lfpn_start(cfg)
    width = cfg.lfpn_width
    if start > 0:
        _conv_params(params, rng, f"lfpn.lat{start}", chans[start], width, 1, gain)
    for i in range(start - 1, -1, -1):
        _conv_params(params, rng, f"lfpn.lat{i}", chans[i], width, 1, gain)
        _conv_params(params, rng, f"lfpn.smooth{i}", width, width, 3, gain)
    out_ch = detection_channels(cfg)
    dt = T.default_dtype()
    for t in L2_TAPS:
        params[f"l2norm{t}.gamma"] = Tensor(np.full(out_ch[t], L2_GAMMA_INIT, dtype=dt), requires_grad=True,
                                             name=f"l2norm{t}.gamma")
    for t in range(6):
        _cpm_params(params, rng, f"cpm{t}", out_ch[t], cfg.cpm_width, gain=gain)
        _conv_params(params, rng, f"head{t}", cfg.cpm_width, HEAD_CHANNELS, 3, HEAD_GAIN)
    return params


def detection_channels(cfg: NetworkConfig) -> list:
    """Channels of each detection layer after the feature pyramid."""
    chans = tap_channels(cfg)
    start = select_lfpn_start(cfg)
    return [cfg.lfpn_width if i < start else chans[i] for i in range(6)]


# ---------------------------------------------------------------------------
# forward pieces


def _conv(params: dict, name: str, x: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    w = params[f"{name}.w"]
    k = w.shape[2]
    return T.conv2d(x, w, params[f"{name}.b"], stride=stride, pad=(k // 2 if pad is None else pad))


def forward_backbone(params: dict, cfg: NetworkConfig, x: Tensor) -> list:
    """Run the VGG16-style backbone; returns the six tap feature maps."""
    taps = []
    for name, kind, _, _, stride, pad in backbone_layers(cfg):
        if kind == "pool":
            x = T.maxpool2x(x)
        else:
            x = T.relu(_conv(params, name, x, stride, pad))
        if name in TAP_LAYERS:
            taps.append(x)
    return taps


def build_lfpn(params: dict, features: list, start: int, merge: str = "add", upsample: str = "nearest") -> list:
    """Top-down merge from ``start`` down to tap 0; deeper taps (and ``start`` itself) pass through."""
    if start not in range(len(features)):
        raise BuildError(f"LFPN start {start} outside 0..{len(features) - 1}")
    out = list(features)
    if start == 0:
        return out
    running = _conv(params, f"lfpn.lat{start}", features[start])
    for i in range(start - 1, -1, -1):
        lateral = _conv(params, f"lfpn.lat{i}", features[i])
        up = T.upsample2x(running, upsample)
        if up.shape[2:] != lateral.shape[2:]:
            raise BuildError(
                f"upsampled map {up.shape[2:]} does not match tap {i} size {lateral.shape[2:]}; "
                "tap sizes above the LFPN start must be even"
            )
        running = T.add(lateral, up) if merge == "add" else T.mul(lateral, up)
        out[i] = _conv(params, f"lfpn.smooth{i}", running)
    return out


def _bottleneck(params: dict, prefix: str, x: Tensor) -> Tensor:
    h = T.relu(_conv(params, f"{prefix}.reduce", x))
    h = T.relu(_conv(params, f"{prefix}.conv", h))
    return _conv(params, f"{prefix}.expand", h)


def build_cpm(params: dict, prefix: str, x: Tensor) -> Tensor:
    """Context branches with 3/5/7 receptive fields, concatenated and added to a 1x1 projection."""
    width = params[f"{prefix}.proj.w"].shape[0]
    if width % 4:
        raise BuildError(f"CPM width {width} is not divisible by 4")
    proj = _conv(params, f"{prefix}.proj", x)
    b3 = T.relu(_bottleneck(params, f"{prefix}.b3", x))
    t1 = T.relu(_bottleneck(params, f"{prefix}.t1", x))
    b5 = T.relu(_bottleneck(params, f"{prefix}.b5", t1))
    t2 = T.relu(_bottleneck(params, f"{prefix}.t2", t1))
    b7 = T.relu(_bottleneck(params, f"{prefix}.b7", t2))
    return T.add(T.concat([b3, b5, b7], axis=1), proj)


def detection_layers(params: dict, cfg: NetworkConfig, x: Tensor) -> list:
    taps = forward_backbone(params, cfg, x)
    feats = build_lfpn(params, taps, select_lfpn_start(cfg), cfg.lfpn_merge, cfg.upsample)
    for t in L2_TAPS:
        feats[t] = T.l2_rescale(feats[t], params[f"l2norm{t}.gamma"])
    return feats


def forward_heads(params: dict, cpm_outputs: list) -> list:
    return [_conv(params, f"head{t}", f) for t, f in enumerate(cpm_outputs)]


def forward(params: dict, cfg: NetworkConfig, images) -> list:
    """Images (N, 3, S, S) -> six raw head maps (N, 20, h_l, w_l)."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise DimensionError(f"expected input (N, 3, {cfg.input_size}, {cfg.input_size}), got {x.shape}")
    feats = detection_layers(params, cfg, x)
    cpm = [build_cpm(params, f"cpm{t}", f) for t, f in enumerate(feats)]
    return forward_heads(params, cpm)


def face_scores(head_map: Tensor, tap: int) -> tuple:
    """Max-in-out: (positive, negative) face logits, each (N, 1, h, w)."""
    lay = HeadLayout(tap, 0)
    pos = T.channel_group_max(head_map, 0, lay.cp)
    neg = T.channel_group_max(head_map, lay.cp, lay.cn)
    return pos, neg


def face_probability(head_map: np.ndarray, tap: int) -> np.ndarray:
    """Softmax face probability per cell, (N, h, w), computed without recording."""
    lay = HeadLayout(tap, 0)
    pos = head_map[:, : lay.cp].max(axis=1)
    neg = head_map[:, lay.cp : lay.cp + lay.cn].max(axis=1)
    m = np.maximum(pos, neg)
    ep, en = np.exp(pos - m), np.exp(neg - m)
    return ep / (ep + en)


# ---------------------------------------------------------------------------
# model files

MAGIC = b"PYBX"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_model(params: dict, path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, t in params.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ModelFormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError(f"truncated model file at offset {self.pos} while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_model(path, expected=None) -> dict:
    """Read a model file; ``expected`` (names or a params dict) rejects extra or missing tensors."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r} at offset 0")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version} at offset 4")
    params: dict = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        if name in params:
            raise ModelFormatError(f"duplicate tensor name {name!r}")
        code, rank = r.unpack("<BB", f"header of {name!r}")
        if code not in _DTYPES:
            raise ModelFormatError(f"unknown dtype code {code} for {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize, f"values of {name!r}"), dtype=dt).reshape(dims)
        params[name] = Tensor(arr.astype(dt.newbyteorder("="), copy=True), requires_grad=True, name=name, dtype=arr.dtype.newbyteorder("="))
    if r.pos != len(r.buf):
        raise ModelFormatError(f"{len(r.buf) - r.pos} trailing bytes after offset {r.pos}")
    if expected is not None:
        names = set(expected)
        extra = sorted(set(params) - names)
        missing = sorted(names - set(params))
        if extra:
            raise ModelFormatError(f"unknown tensors in model file: {', '.join(extra)}")
        if missing:
            raise ModelFormatError(f"missing tensors in model file: {', '.join(missing)}")
        if isinstance(expected, dict):
            for name, ref in expected.items():
                if tuple(params[name].shape) != tuple(np.shape(ref.data if isinstance(ref, Tensor) else ref)):
                    raise ModelFormatError(f"tensor {name!r} has shape {params[name].shape}, config expects "
                                           f"{tuple(np.shape(ref.data if isinstance(ref, Tensor) else ref))}")
    return params
