"""Trainable projectors that map teacher stage features into student stage geometry.

Each projector adjusts channels and spatial dims of one teacher stage feature
to match the paired student stage. The default is a lightweight three-layer
convolutional block: 3x3 conv (in -> hidden) + ReLU, 3x3 conv (hidden ->
hidden) + ReLU + bilinear resize to the target spatial size, then a 1x1 conv
(hidden -> out). Ablation variants: a flattened linear map, resize + 1x1
conv, a two-conv block, and a 4x-wide three-conv block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

PROJECTOR_KINDS = ("linear", "resize_1x1", "conv2", "conv3_default", "wide_conv3")


@dataclass(frozen=True)
class ProjectorSpec:
    """Architecture of one reprogramming projector.

    out dims must equal the paired student stage's feature dims.
    hidden_width defaults to out_channels (4x that for wide_conv3).
    """

    kind: str
    in_channels: int
    out_channels: int
    in_hw: Tuple[int, int]
    out_hw: Tuple[int, int]
    hidden_width: Optional[int] = None

    def __post_init__(self):
        if self.kind not in PROJECTOR_KINDS:
            raise ValueError(f"unknown projector kind {self.kind!r}; expected one of {PROJECTOR_KINDS}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")
        object.__setattr__(self, "in_hw", tuple(int(v) for v in self.in_hw))
        object.__setattr__(self, "out_hw", tuple(int(v) for v in self.out_hw))
        if any(v <= 0 for v in self.in_hw + self.out_hw):
            raise ValueError("spatial sizes must be positive")
        if self.hidden_width is not None and self.hidden_width <= 0:
            raise ValueError("hidden_width must be positive")

    @property
    def hidden(self) -> int:
        if self.hidden_width is not None:
            return self.hidden_width
        return 4 * self.out_channels if self.kind == "wide_conv3" else self.out_channels

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "in_hw": list(self.in_hw),
            "out_hw": list(self.out_hw),
            "hidden_width": self.hidden_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectorSpec":
        return cls(
            kind=d["kind"],
            in_channels=int(d["in_channels"]),
            out_channels=int(d["out_channels"]),
            in_hw=tuple(d["in_hw"]),
            out_hw=tuple(d["out_hw"]),
            hidden_width=d.get("hidden_width"),
        )


class Projector(nn.Module):
    """One trainable reprogramming block; built via ``build_projector``."""

    def __init__(self, spec: ProjectorSpec):
        super().__init__()
        self.spec = spec
        c_in, c_out, h = spec.in_channels, spec.out_channels, spec.hidden
        if spec.kind == "linear":
            in_dim = c_in * spec.in_hw[0] * spec.in_hw[1]
            out_dim = c_out * spec.out_hw[0] * spec.out_hw[1]
            self.linear = nn.Linear(in_dim, out_dim)
        elif spec.kind == "resize_1x1":
            self.proj = nn.Conv2d(c_in, c_out, 1)
        elif spec.kind == "conv2":
            self.conv1 = nn.Conv2d(c_in, h, 3, padding=1)
            self.conv2 = nn.Conv2d(h, c_out, 3, padding=1)
        else:  # conv3_default / wide_conv3
            self.conv1 = nn.Conv2d(c_in, h, 3, padding=1)
            self.conv2 = nn.Conv2d(h, h, 3, padding=1)
            self.proj = nn.Conv2d(h, c_out, 1)

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _resize(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-2:]) == self.spec.out_hw:
            return x
        return F.interpolate(x, size=self.spec.out_hw, mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != spec.in_channels or tuple(x.shape[-2:]) != spec.in_hw:
            raise ValueError(
                f"projector expects (B, {spec.in_channels}, {spec.in_hw[0]}, {spec.in_hw[1]}), "
                f"got {tuple(x.shape)}"
            )
        if spec.kind == "linear":
            out = self.linear(x.flatten(1))
            return out.view(x.shape[0], spec.out_channels, *spec.out_hw)
        if spec.kind == "resize_1x1":
            return self.proj(self._resize(x))
        if spec.kind == "conv2":
            return self.conv2(self._resize(F.relu(self.conv1(x))))
        x = F.relu(self.conv1(x))
        x = self._resize(F.relu(self.conv2(x)))
        return self.proj(x)


def build_projector(spec: ProjectorSpec, seed: int) -> Projector:
    """Instantiate a projector with deterministic seed-derived initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Projector(spec)


def reprogram(projector: Projector, f_teacher: torch.Tensor) -> torch.Tensor:
    """Map a teacher stage feature into the paired student stage's geometry."""
    return projector(f_teacher)


def identity_projector(channels: int, hw: Tuple[int, int]) -> Projector:
    """resize_1x1 projector with equal in/out dims initialized to the exact identity."""
    spec = ProjectorSpec("resize_1x1", channels, channels, hw, hw)
    proj = build_projector(spec, seed=0)
    with torch.no_grad():
        proj.proj.weight.copy_(torch.eye(channels).view(channels, channels, 1, 1))
        proj.proj.bias.zero_()
    return proj


def count_params(spec: ProjectorSpec) -> int:
    """Analytic trainable-parameter count implied by a spec (weights + biases)."""
    c_in, c_out, h = spec.in_channels, spec.out_channels, spec.hidden
    if spec.kind == "linear":
        in_dim = c_in * spec.in_hw[0] * spec.in_hw[1]
        out_dim = c_out * spec.out_hw[0] * spec.out_hw[1]
        return in_dim * out_dim + out_dim
    if spec.kind == "resize_1x1":
        return c_in * c_out + c_out
    if spec.kind == "conv2":
        return (9 * c_in * h + h) + (9 * h * c_out + c_out)
    return (9 * c_in * h + h) + (9 * h * h + h) + (h * c_out + c_out)


def count_flops(spec: ProjectorSpec) -> int:
    """Multiply-accumulate count of one forward pass at spec dims.

    Convolution MACs are K_h * K_w * C_in * C_out * H_out * W_out at the
    spatial size where the layer runs; bilinear resizing is not counted.
    """
    c_in, c_out, h = spec.in_channels, spec.out_channels, spec.hidden
    in_px = spec.in_hw[0] * spec.in_hw[1]
    out_px = spec.out_hw[0] * spec.out_hw[1]
    if spec.kind == "linear":
        return (c_in * in_px) * (c_out * out_px)
    if spec.kind == "resize_1x1":
        return c_in * c_out * out_px
    if spec.kind == "conv2":
        return 9 * c_in * h * in_px + 9 * h * c_out * out_px
    return 9 * c_in * h * in_px + 9 * h * h * in_px + h * c_out * out_px
