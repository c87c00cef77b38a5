"""Siamese differentiable augmentation.

One sampled :class:`AugmentInstance` is applied unchanged to the real and the
synthetic batch of an iteration, so both branches see the same geometric and
photometric transform. Scale and rotation are fused into a single bilinear
resampling with zero padding; translation is an integer shift with zero fill.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError

OPS = ("flip", "crop", "scale", "rotate", "brightness")

# Upper bounds of each strength parameter.
MAX_CROP_PAD = 1 / 8
MAX_SCALE = 0.5
MAX_ROTATE_DEG = 15.0
MAX_BRIGHTNESS = 0.5


@dataclass(frozen=True)
class AugmentPolicy:
    ops: tuple = ("crop", "scale", "rotate", "flip", "brightness")
    enabled: bool = True
    flip_prob: float = 0.5
    crop_pad: float = 0.125  # fraction of the image side
    scale: float = 0.2  # factors drawn from [1 - scale, 1 + scale]
    rotate_deg: float = 15.0
    brightness: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        self.validate()

    def validate(self):
        for op in self.ops:
            if op not in OPS:
                raise ConfigError(f"unknown augmentation op {op!r}", field="augment.ops")
        if len(set(self.ops)) != len(self.ops):
            raise ConfigError("augmentation ops must be unique", field="augment.ops")
        checks = [
            ("flip_prob", self.flip_prob, 1.0),
            ("crop_pad", self.crop_pad, MAX_CROP_PAD),
            ("scale", self.scale, MAX_SCALE),
            ("rotate_deg", self.rotate_deg, MAX_ROTATE_DEG),
            ("brightness", self.brightness, MAX_BRIGHTNESS),
        ]
        for name, value, upper in checks:
            if not 0 <= value <= upper:
                raise ConfigError(f"{name}={value} outside [0, {upper}]", field=f"augment.{name}")

    def to_dict(self):
        d = asdict(self)
        d["ops"] = list(self.ops)
        return d


@dataclass(frozen=True)
class AugmentInstance:
    """Concrete transform parameters; identity by default."""

    flip: bool = False
    shift: tuple = (0, 0)  # (dy, dx) in pixels
    scale: tuple = (1.0, 1.0)  # (sy, sx)
    angle_deg: float = 0.0
    brightness: float = 0.0
    image_shape: tuple | None = field(default=None, compare=True)

    @property
    def is_identity(self) -> bool:
        return (
            not self.flip
            and tuple(self.shift) == (0, 0)
            and tuple(self.scale) == (1.0, 1.0)
            and self.angle_deg == 0.0
            and self.brightness == 0.0
        )


def sample_augmentation(policy: AugmentPolicy, rng: np.random.Generator, image_shape=None) -> AugmentInstance:
    """Draw one instance. Every op consumes rng draws even when disabled in ``ops``,
    so adding an op to a policy does not reshuffle the others."""
    shape = tuple(image_shape) if image_shape is not None else None
    if not policy.enabled:
        return AugmentInstance(image_shape=shape)

    u_flip = rng.random()
    u_shift = rng.uniform(-1.0, 1.0, size=2)
    u_scale = rng.uniform(-1.0, 1.0, size=2)
    u_rot = rng.uniform(-1.0, 1.0)
    u_bright = rng.uniform(-1.0, 1.0)

    kwargs = {}
    if "flip" in policy.ops:
        kwargs["flip"] = bool(u_flip < policy.flip_prob)
    if "crop" in policy.ops:
        if shape is None:
            raise ContractError("crop augmentation needs image_shape to size the shift")
        max_shift = np.floor(policy.crop_pad * np.array(shape[1:]))
        kwargs["shift"] = tuple(int(v) for v in np.round(u_shift * max_shift))
    if "scale" in policy.ops:
        kwargs["scale"] = tuple(float(1.0 + policy.scale * v) for v in u_scale)
    if "rotate" in policy.ops:
        kwargs["angle_deg"] = float(policy.rotate_deg * u_rot)
    if "brightness" in policy.ops:
        kwargs["brightness"] = float(policy.brightness * u_bright)
    return AugmentInstance(image_shape=shape, **kwargs)


def _affine(batch: torch.Tensor, scale, angle_deg: float) -> torch.Tensor:
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    sy, sx = scale
    mat = torch.tensor(
        [[sx * cos, sy * sin, 0.0], [-sx * sin, sy * cos, 0.0]], dtype=batch.dtype, device=batch.device
    )
    grid = F.affine_grid(mat.expand(batch.shape[0], 2, 3), list(batch.shape), align_corners=False)
    return F.grid_sample(batch, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _shift(batch: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    h, w = batch.shape[-2:]
    py, px = abs(dy), abs(dx)
    padded = F.pad(batch, (px, px, py, py))
    return padded[..., py - dy:py - dy + h, px - dx:px - dx + w]


def apply(instance: AugmentInstance, batch: torch.Tensor) -> torch.Tensor:
    """Apply ``instance`` to a ``(N, C, H, W)`` tensor; differentiable in ``batch``."""
    if batch.ndim != 4:
        raise ContractError(f"expected a 4-D batch, got shape {tuple(batch.shape)}")
    if instance.image_shape is not None and tuple(batch.shape[1:]) != tuple(instance.image_shape):
        raise ContractError(
            f"batch image shape {tuple(batch.shape[1:])} does not match instance shape {instance.image_shape}"
        )
    if instance.is_identity:
        return batch
    out = batch
    if tuple(instance.scale) != (1.0, 1.0) or instance.angle_deg != 0.0:
        out = _affine(out, instance.scale, instance.angle_deg)
    if tuple(instance.shift) != (0, 0):
        out = _shift(out, *instance.shift)
    if instance.flip:
        out = torch.flip(out, dims=(3,))
    if instance.brightness != 0.0:
        out = out + instance.brightness
    return out
