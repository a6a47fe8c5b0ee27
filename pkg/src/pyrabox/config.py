"""Declarative network/training configuration and its JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .anchors import ConfigError, PyramidAnchorConfig, layer_specs

FULL_STAGE_CHANNELS = (64, 128, 256, 512, 512)
FULL_FC_CHANNELS = 1024
FULL_EXTRA_CHANNELS = (512, 256)

# every accepted JSON key with its default (full-scale values)
DEFAULTS = {
    "input_size": 640,
    "width_factor": 1.0,
    "lfpn_start": "auto",
    "lfpn_merge": "add",
    "cpm_width": 512,
    "s_pa": 2.0,
    "K": 2,
    "threshold": 0.35,
    "lambda": 1.0,
    "lambda_k": [1.0, 0.5, 0.25],
    "variance": [1.0, 1.0],
    "lr_schedule": {"segments": [[80000, 1e-3], [20000, 1e-4], [20000, 1e-5]], "divisor": 1},
    "batch_size": 16,
    "seed": 0,
    "upsample": "nearest",
    "hard_negative_mining": True,
    "sampling_prob": 1.0,
    "clip_grad_norm": None,
}

KEY_HELP = {
    "input_size": "square network input side in pixels (multiple of 32)",
    "width_factor": "channel multiplier applied to the VGG16-style backbone",
    "lfpn_start": '"auto" or tap index 0..5 where the top-down path starts',
    "lfpn_merge": '"add" or "mul" merge of lateral and upsampled maps',
    "cpm_width": "output channels of each context-sensitive predict module (multiple of 4)",
    "s_pa": "pyramid-anchor stride",
    "K": "number of context levels above the face level",
    "threshold": "IoU threshold for positive anchors",
    "lambda": "classification/regression balance",
    "lambda_k": "per-level loss weights (K+1 values)",
    "variance": "target scaling for (centre, size) offsets",
    "lr_schedule": "piecewise-constant [[steps, lr], ...] with a step divisor",
    "batch_size": "images per SGD step",
    "seed": "global RNG seed",
    "upsample": '"nearest" or "bilinear" top-down upsampling',
    "hard_negative_mining": "select negatives 3:1 by loss (false: use all negatives)",
    "sampling_prob": "probability of data-anchor-sampling per training image",
    "clip_grad_norm": "rescale gradients to at most this global norm (null: off)",
}


@dataclass
class LrSchedule:
    segments: list
    divisor: float = 1.0

    def boundaries(self) -> list:
        out, acc = [], 0.0
        for steps, _ in self.segments:
            acc += steps / self.divisor
            out.append(acc)
        return out

    @classmethod
    def parse(cls, raw) -> "LrSchedule":
        if isinstance(raw, LrSchedule):
            return raw
        if isinstance(raw, dict):
            unknown = set(raw) - {"segments", "divisor"}
            if unknown:
                raise ConfigError(f"unknown lr_schedule key: {sorted(unknown)[0]}")
            segs, div = raw.get("segments", DEFAULTS["lr_schedule"]["segments"]), raw.get("divisor", 1)
        else:
            segs, div = raw, 1
        segs = [[float(s), float(lr)] for s, lr in segs]
        if not segs or any(s <= 0 or lr < 0 for s, lr in segs) or div <= 0:
            raise ConfigError("lr_schedule needs positive segment lengths and a positive divisor")
        return cls(segs, float(div))

    def to_json(self) -> dict:
        return {"segments": [[s, lr] for s, lr in self.segments], "divisor": self.divisor}


def _scaled(c: int, f: float) -> int:
    return max(1, int(round(c * f)))


@dataclass
class NetworkConfig:
    input_size: int = 640
    width_factor: float = 1.0
    lfpn_start: object = "auto"
    lfpn_merge: str = "add"
    cpm_width: int = 512
    upsample: str = "nearest"
    pyramid: PyramidAnchorConfig = field(default_factory=PyramidAnchorConfig)
    lr_schedule: LrSchedule = field(default_factory=lambda: LrSchedule.parse(DEFAULTS["lr_schedule"]))
    batch_size: int = 16
    seed: int = 0
    sampling_prob: float = 1.0
    clip_grad_norm: float | None = None

    def __post_init__(self):
        self.validate()

    @property
    def stage_channels(self) -> list:
        return [_scaled(c, self.width_factor) for c in FULL_STAGE_CHANNELS]

    @property
    def fc_channels(self) -> int:
        return _scaled(FULL_FC_CHANNELS, self.width_factor)

    @property
    def extra_channels(self) -> list:
        return [_scaled(c, self.width_factor) for c in FULL_EXTRA_CHANNELS]

    @property
    def lfpn_width(self) -> int:
        return self.stage_channels[2]

    @property
    def anchor_layers(self) -> list:
        return layer_specs()

    @property
    def num_taps(self) -> int:
        return 6

    def validate(self) -> None:
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.width_factor <= 0:
            raise ConfigError("width_factor must be positive")
        if self.lfpn_start != "auto" and self.lfpn_start not in range(6):
            raise ConfigError(f'lfpn_start must be "auto" or 0..5, got {self.lfpn_start!r}')
        if self.lfpn_merge not in ("add", "mul"):
            raise ConfigError(f"lfpn_merge must be add or mul, got {self.lfpn_merge!r}")
        if self.upsample not in ("nearest", "bilinear"):
            raise ConfigError(f"upsample must be nearest or bilinear, got {self.upsample!r}")
        if self.cpm_width <= 0 or self.cpm_width % 4:
            raise ConfigError(f"cpm_width must be a positive multiple of 4, got {self.cpm_width}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not 0 <= self.sampling_prob <= 1:
            raise ConfigError("sampling_prob must lie in [0, 1]")
        if self.clip_grad_norm is not None and self.clip_grad_norm <= 0:
            raise ConfigError("clip_grad_norm must be positive or null")

    # -- JSON -------------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "NetworkConfig":
        unknown = [k for k in raw if k not in DEFAULTS]
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        v = {**DEFAULTS, **raw}
        pyramid = PyramidAnchorConfig(
            s_pa=float(v["s_pa"]),
            K=int(v["K"]),
            threshold=float(v["threshold"]),
            lambda_cls_reg=float(v["lambda"]),
            lambda_k=list(v["lambda_k"]),
            variance=tuple(float(x) for x in v["variance"]),
            hard_negative_mining=bool(v["hard_negative_mining"]),
        )
        return cls(
            input_size=int(v["input_size"]),
            width_factor=float(v["width_factor"]),
            lfpn_start=v["lfpn_start"],
            lfpn_merge=v["lfpn_merge"],
            cpm_width=int(v["cpm_width"]),
            upsample=v["upsample"],
            pyramid=pyramid,
            lr_schedule=LrSchedule.parse(v["lr_schedule"]),
            batch_size=int(v["batch_size"]),
            seed=int(v["seed"]),
            sampling_prob=float(v["sampling_prob"]),
            clip_grad_norm=None if v["clip_grad_norm"] is None else float(v["clip_grad_norm"]),
        )

    def to_dict(self) -> dict:
        p = self.pyramid
        return {
            "input_size": self.input_size,
            "width_factor": self.width_factor,
            "lfpn_start": self.lfpn_start,
            "lfpn_merge": self.lfpn_merge,
            "cpm_width": self.cpm_width,
            "s_pa": p.s_pa,
            "K": p.K,
            "threshold": p.threshold,
            "lambda": p.lambda_cls_reg,
            "lambda_k": list(p.lambda_k),
            "variance": list(p.variance),
            "lr_schedule": self.lr_schedule.to_json(),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "upsample": self.upsample,
            "hard_negative_mining": p.hard_negative_mining,
            "sampling_prob": self.sampling_prob,
            "clip_grad_norm": self.clip_grad_norm,
        }


PRESET_DIR = Path(__file__).parent / "configs"


def load_config(path_or_name) -> NetworkConfig:
    """Load a JSON config file, or a bundled preset by name ("toy", "full")."""
    p = Path(path_or_name)
    if not p.exists() and (PRESET_DIR / f"{path_or_name}.json").exists():
        p = PRESET_DIR / f"{path_or_name}.json"
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return NetworkConfig.from_dict(raw)


def full_config() -> NetworkConfig:
    return load_config("full")


def toy_config(**overrides) -> NetworkConfig:
    cfg = load_config("toy").to_dict()
    cfg.update(overrides)
    return NetworkConfig.from_dict(cfg)
