"""Toy teacher/student architectures and deterministic synthetic tasks.

Two mismatched model families: a hierarchical conv net whose stages change
channel count and spatial size (CNN-like), and a flat patch-token mixer whose
blocks all share one resolution (ViT-like). Tasks are generated analytically:
classification images carry one parametric shape with a per-class texture and
palette; segmentation images carry one geometric object with an exact binary
mask rasterized from its parameters. A broad multi-class pretraining split
stands in for foundation-model pretraining; the downstream split draws a
class subset under a style shift (rotation offset plus palette drift).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .staging import BlockSequence

MODEL_FAMILIES = ("conv_hierarchical", "patch_flat")
TASK_KINDS = ("classification", "segmentation")

SHAPES = ("disk", "square", "triangle", "ring")
TEXTURES = ("plain", "striped")

# Evenly spread base palette, one color per pretraining class.
_PALETTE = np.array(
    [
        [0.90, 0.25, 0.20],
        [0.20, 0.85, 0.30],
        [0.25, 0.35, 0.95],
        [0.90, 0.80, 0.20],
        [0.80, 0.25, 0.85],
        [0.20, 0.85, 0.85],
        [0.95, 0.55, 0.20],
        [0.60, 0.60, 0.60],
    ]
)


class PretrainingError(RuntimeError):
    """Teacher failed to reach the pretraining quality threshold in budget."""


# ---------------------------------------------------------------------------
# Task specification and generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Parameters of one synthetic broad-pretraining / narrow-downstream task."""

    kind: str = "classification"
    image_size: Tuple[int, int] = (32, 32)
    channels: int = 3
    n_classes: int = 3
    pretrain_classes: int = 8
    style_shift: float = 0.35
    n_train: int = 96
    n_test: int = 300
    n_pretrain: int = 1600
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.n_classes > self.pretrain_classes:
            raise ValueError(
                f"downstream classes ({self.n_classes}) exceed pretraining classes "
                f"({self.pretrain_classes})"
            )
        if self.pretrain_classes > len(_PALETTE):
            raise ValueError(f"at most {len(_PALETTE)} pretraining classes supported")
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")
        if not 0.0 <= self.style_shift <= 1.0:
            raise ValueError("style_shift must lie in [0, 1]")
        if not 1 <= self.channels <= 3:
            raise ValueError("channels must be 1..3")
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "image_size": list(self.image_size),
            "channels": self.channels,
            "n_classes": self.n_classes,
            "pretrain_classes": self.pretrain_classes,
            "style_shift": self.style_shift,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_pretrain": self.n_pretrain,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass
class Split:
    """One dataset split: images (n, C, H, W) float32 in [0, 1] plus targets.

    labels are class ids for classification and binary (n, H, W) masks for
    segmentation; object_params keeps the generating parameters of each
    sample so masks can be re-rasterized independently.
    """

    images: np.ndarray
    labels: np.ndarray
    object_params: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.images)

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        if self.object_params is not None:
            h.update(self.object_params.tobytes())
        return h.hexdigest()


@dataclass
class TaskData:
    """All splits of one generated task plus the downstream->pretrain class map."""

    spec: SyntheticTaskSpec
    pretrain_train: Split
    pretrain_heldout: Split
    train: Split
    test: Split
    class_map: list  # downstream label k corresponds to pretraining class class_map[k]


def rasterize_mask(params: np.ndarray, hw: Tuple[int, int]) -> np.ndarray:
    """Exact binary mask of the object described by an 8-float parameter row.

    params = [shape_idx, tex_idx, cx, cy, rx, ry, theta, freq]; the region
    inequality is evaluated at integer pixel centers.
    """
    shape = SHAPES[int(params[0])]
    cx, cy, rx, ry, theta = params[2], params[3], params[4], params[5], params[6]
    yy, xx = np.mgrid[0 : hw[0], 0 : hw[1]].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    un, vn = u / rx, v / ry
    if shape == "disk":
        inside = un**2 + vn**2 <= 1.0
    elif shape == "square":
        inside = np.maximum(np.abs(un), np.abs(vn)) <= 1.0
    elif shape == "triangle":
        inside = (vn >= -1.0) & (vn <= 1.0 - 2.0 * np.abs(un))
    else:  # ring
        r = np.sqrt(un**2 + vn**2)
        inside = (r >= 0.5) & (r <= 1.0)
    return inside.astype(np.uint8)


def _sample_object(rng: np.random.Generator, cls: int, hw, style_shift: float) -> np.ndarray:
    """Draw object parameters for one sample of a pretraining class."""
    shape_idx = cls // len(TEXTURES)
    tex_idx = cls % len(TEXTURES)
    h, w = hw
    scale = rng.uniform(0.26, 0.38)
    rx = scale * w
    ry = rx * rng.uniform(0.8, 1.25)
    cx = w / 2 + rng.uniform(-0.08, 0.08) * w
    cy = h / 2 + rng.uniform(-0.08, 0.08) * h
    theta = rng.uniform(-0.25, 0.25) + style_shift * (math.pi / 4)
    freq = rng.uniform(0.9, 1.1) * (2 * math.pi / (0.30 * w))
    return np.array([shape_idx, tex_idx, cx, cy, rx, ry, theta, freq], dtype=np.float64)


def _shifted_palette(cls: int, style_shift: float) -> np.ndarray:
    base = _PALETTE[cls]
    return (1 - style_shift) * base + style_shift * np.roll(base, 1)


def _render(params: np.ndarray, cls: int, spec: SyntheticTaskSpec, rng, styled: bool) -> np.ndarray:
    """Render one image from object parameters; returns (C, H, W) float32."""
    h, w = spec.image_size
    shift = spec.style_shift if styled else 0.0
    mask = rasterize_mask(params, (h, w)).astype(np.float64)
    color = _shifted_palette(cls, shift)[: spec.channels]

    if spec.kind == "classification":
        background = rng.uniform(0.0, 0.18, size=(spec.channels, h, w))
    else:
        # Smooth low-frequency background so segmentation is nontrivial.
        coarse = rng.uniform(0.05, 0.45, size=(spec.channels, h // 8 + 1, w // 8 + 1))
        background = np.stack(
            [np.kron(c, np.ones((8, 8)))[:h, :w] for c in coarse]
        )

    fill = np.ones((h, w))
    if TEXTURES[int(params[1])] == "striped":
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        dx, dy = xx - params[2], yy - params[3]
        u = np.cos(params[6]) * dx + np.sin(params[6]) * dy
        fill = 0.55 + 0.45 * np.sign(np.sin(params[7] * u))

    img = background * (1 - mask) + mask * fill * color[:, None, None]
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _generate_split(
    spec: SyntheticTaskSpec, classes: list, n: int, stream: int, styled: bool
) -> Split:
    images = np.empty((n, spec.channels, *spec.image_size), dtype=np.float32)
    params = np.empty((n, 8), dtype=np.float64)
    shift = spec.style_shift if styled else 0.0
    if spec.kind == "classification":
        labels = np.empty(n, dtype=np.int64)
    else:
        labels = np.empty((n, *spec.image_size), dtype=np.uint8)
    for i in range(n):
        rng = np.random.default_rng([spec.seed, stream, i])
        local = int(rng.integers(len(classes)))
        cls = classes[local]
        p = _sample_object(rng, cls, spec.image_size, shift)
        params[i] = p
        images[i] = _render(p, cls, spec, rng, styled)
        if spec.kind == "classification":
            labels[i] = local
        else:
            labels[i] = rasterize_mask(p, spec.image_size)
    return Split(images=images, labels=labels, object_params=params)


def generate_task(spec: SyntheticTaskSpec) -> TaskData:
    """Generate pretraining and downstream splits, fully determined by spec.seed."""
    all_classes = list(range(spec.pretrain_classes))
    picker = np.random.default_rng([spec.seed, 999])
    class_map = [int(c) for c in picker.choice(spec.pretrain_classes, spec.n_classes, replace=False)]

    n_heldout = max(64, spec.n_pretrain // 8)
    return TaskData(
        spec=spec,
        pretrain_train=_generate_split(spec, all_classes, spec.n_pretrain, 0, styled=False),
        pretrain_heldout=_generate_split(spec, all_classes, n_heldout, 1, styled=False),
        train=_generate_split(spec, class_map, spec.n_train, 2, styled=True),
        test=_generate_split(spec, class_map, spec.n_test, 3, styled=True),
        class_map=class_map,
    )


def save_dataset(data: TaskData, root) -> Path:
    """Persist a task as a manifest plus per-split array files."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = {
        "pretrain_train": data.pretrain_train,
        "pretrain_heldout": data.pretrain_heldout,
        "train": data.train,
        "test": data.test,
    }
    manifest = {
        "spec": data.spec.to_dict(),
        "class_map": data.class_map,
        "hashes": {name: s.sha256() for name, s in splits.items()},
    }
    for name, s in splits.items():
        arrays = {"images": s.images, "labels": s.labels}
        if s.object_params is not None:
            arrays["object_params"] = s.object_params
        np.savez(root / f"{name}.npz", **arrays)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_dataset(root) -> TaskData:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    spec = SyntheticTaskSpec.from_dict(manifest["spec"])

    def read(name):
        with np.load(root / f"{name}.npz") as z:
            return Split(
                images=z["images"],
                labels=z["labels"],
                object_params=z["object_params"] if "object_params" in z else None,
            )

    data = TaskData(
        spec=spec,
        pretrain_train=read("pretrain_train"),
        pretrain_heldout=read("pretrain_heldout"),
        train=read("train"),
        test=read("test"),
        class_map=manifest["class_map"],
    )
    for name, s in [
        ("pretrain_train", data.pretrain_train),
        ("pretrain_heldout", data.pretrain_heldout),
        ("train", data.train),
        ("test", data.test),
    ]:
        if s.sha256() != manifest["hashes"][name]:
            raise ValueError(f"split {name} does not match its manifest hash")
    return data


# ---------------------------------------------------------------------------
# Model building
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of one block-decomposable toy network."""

    family: str
    depth: int
    width: int
    head: str  # classifier | mask
    in_channels: int = 3
    image_size: Tuple[int, int] = (32, 32)
    n_outputs: int = 8
    patch: int = 4  # patch_flat stem stride

    def __post_init__(self):
        if self.family not in MODEL_FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.head not in ("classifier", "mask"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be positive")
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "depth": self.depth,
            "width": self.width,
            "head": self.head,
            "in_channels": self.in_channels,
            "image_size": list(self.image_size),
            "n_outputs": self.n_outputs,
            "patch": self.patch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


class _ConvBlock(nn.Module):
    """3x3 conv + GroupNorm + ReLU, halving spatial size while spatial > 2."""

    def __init__(self, c_in, c_out, pool):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(1, c_out)
        self.pool = pool

    def forward(self, x):
        x = F.relu(self.norm(self.conv(x)))
        if self.pool:
            x = F.max_pool2d(x, 2)
        return x


class _MixerBlock(nn.Module):
    """Token mixer at constant resolution: depthwise 3x3 + pointwise 1x1, residual."""

    def __init__(self, c):
        super().__init__()
        self.dw = nn.Conv2d(c, c, 3, padding=1, groups=c)
        self.pw = nn.Conv2d(c, c, 1)
        self.norm = nn.GroupNorm(1, c)

    def forward(self, x):
        return self.norm(F.relu(x + self.pw(F.relu(self.dw(x)))))


class _StemmedBlock(nn.Module):
    """Patch-embedding stem fused with the first mixer block."""

    def __init__(self, in_channels, c, patch):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, c, patch, stride=patch)
        self.mixer = _MixerBlock(c)

    def forward(self, x):
        return self.mixer(self.stem(x))


class _ClassifierHead(nn.Module):
    def __init__(self, c, n_outputs):
        super().__init__()
        self.fc = nn.Linear(c, n_outputs)

    def forward(self, x):
        return self.fc(x.mean(dim=(2, 3)))


class _MaskHead(nn.Module):
    """1x1 conv to 2 logit channels, bilinearly upsampled to image size."""

    def __init__(self, c, image_size):
        super().__init__()
        self.proj = nn.Conv2d(c, 2, 1)
        self.image_size = image_size

    def forward(self, x):
        x = self.proj(x)
        if tuple(x.shape[-2:]) != self.image_size:
            x = F.interpolate(x, size=self.image_size, mode="bilinear", align_corners=False)
        return x


def conv_channels(spec: ModelSpec) -> list:
    """Per-block channel counts for a conv_hierarchical model."""
    return [spec.width * 2 ** min(b, 3) for b in range(spec.depth)]


def build_model(spec: ModelSpec, seed: int) -> BlockSequence:
    """Build a block-decomposable network with deterministic initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if spec.family == "conv_hierarchical":
            chans = conv_channels(spec)
            blocks = []
            h = min(spec.image_size)
            prev = spec.in_channels
            for c in chans:
                pool = h > 2
                blocks.append(_ConvBlock(prev, c, pool))
                if pool:
                    h //= 2
                prev = c
            final_c = chans[-1]
        else:
            blocks = [_StemmedBlock(spec.in_channels, spec.width, spec.patch)]
            blocks += [_MixerBlock(spec.width) for _ in range(spec.depth - 1)]
            final_c = spec.width
        if spec.head == "classifier":
            head = _ClassifierHead(final_c, spec.n_outputs)
        else:
            head = _MaskHead(final_c, spec.image_size)
        return BlockSequence(blocks, head=head)


def stage_feature_dims(spec: ModelSpec, boundaries) -> list:
    """(C, H, W) of the feature tapped after each boundary block."""
    dims = []
    if spec.family == "conv_hierarchical":
        chans = conv_channels(spec)
        h = min(spec.image_size)
        hw = []
        for _ in chans:
            if h > 2:
                h //= 2
            hw.append(h)
        for b in boundaries:
            dims.append((chans[b], hw[b], hw[b]))
    else:
        h = spec.image_size[0] // spec.patch
        w = spec.image_size[1] // spec.patch
        for _ in boundaries:
            dims.append((spec.width, h, w))
    return dims


# ---------------------------------------------------------------------------
# Teacher pretraining and evaluation
# ---------------------------------------------------------------------------


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None):
    """Index batches over n samples, shuffled when an rng is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate_accuracy(model: nn.Module, split: Split, batch_size: int = 128) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for idx in batches(len(split), batch_size):
            logits = model(torch.from_numpy(split.images[idx]))
            correct += int((logits.argmax(dim=1).numpy() == split.labels[idx]).sum())
    return correct / len(split)


def evaluate_dice(model: nn.Module, split: Split, batch_size: int = 64) -> float:
    """Mean hard-Dice of thresholded foreground predictions against the masks."""
    model.eval()
    scores = []
    with torch.no_grad():
        for idx in batches(len(split), batch_size):
            logits = model(torch.from_numpy(split.images[idx]))
            pred = (logits.softmax(dim=1)[:, 1] > 0.5).float()
            target = torch.from_numpy(split.labels[idx]).float()
            inter = (pred * target).sum(dim=(1, 2))
            total = pred.sum(dim=(1, 2)) + target.sum(dim=(1, 2))
            scores.append(((2 * inter + 1) / (total + 1)).numpy())
    return float(np.concatenate(scores).mean())


def evaluate_metric(model: nn.Module, split: Split, kind: str) -> float:
    return evaluate_accuracy(model, split) if kind == "classification" else evaluate_dice(model, split)


def supervised_loss(logits: torch.Tensor, target: torch.Tensor, kind: str) -> torch.Tensor:
    """Task loss: cross-entropy for classification, Dice for segmentation."""
    from . import kernels

    if kind == "classification":
        return kernels.cross_entropy(logits, target)
    return kernels.dice_loss(logits.softmax(dim=1)[:, 1], target)


def pretrain_teacher(
    teacher: BlockSequence,
    train_split: Split,
    heldout_split: Split,
    kind: str,
    epochs: int = 12,
    batch_size: int = 64,
    lr: float = 3e-3,
    threshold: Optional[float] = None,
    seed: int = 0,
) -> dict:
    """Train the teacher on the broad pretraining split, then freeze it.

    With epochs > 0 the held-out metric must reach the quality threshold
    (accuracy 0.90 for classification, Dice 0.85 for segmentation) or
    PretrainingError is raised. Returns a checkpoint dict with the frozen
    state and the held-out metric.
    """
    if threshold is None:
        threshold = 0.90 if kind == "classification" else 0.85
    opt = torch.optim.AdamW(teacher.parameters(), lr=lr)
    order_rng = np.random.default_rng([seed, 17])
    teacher.train()
    for _ in range(epochs):
        for idx in batches(len(train_split), batch_size, order_rng):
            x = torch.from_numpy(train_split.images[idx])
            y = torch.from_numpy(train_split.labels[idx])
            loss = supervised_loss(teacher(x), y, kind)
            opt.zero_grad()
            loss.backward()
            opt.step()
    metric = evaluate_metric(teacher, heldout_split, kind)
    if epochs > 0 and metric < threshold:
        raise PretrainingError(
            f"teacher reached {metric:.3f} on held-out pretraining data "
            f"(< {threshold}) after {epochs} epochs"
        )
    teacher.freeze()
    return {
        "state": {k: v.clone() for k, v in teacher.state_dict().items()},
        "heldout_metric": metric,
        "epochs": epochs,
    }


def linear_probe_accuracy(
    backbone_feats_train: np.ndarray,
    labels_train: np.ndarray,
    backbone_feats_test: np.ndarray,
    labels_test: np.ndarray,
    ridge: float = 1e-3,
) -> float:
    """Accuracy of a closed-form ridge regression probe on pooled features."""
    x = backbone_feats_train
    y = np.eye(int(labels_train.max()) + 1)[labels_train]
    w = np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)
    pred = (backbone_feats_test @ w).argmax(axis=1)
    return float((pred == labels_test).mean())


def pooled_backbone_features(model: BlockSequence, split: Split, batch_size: int = 128) -> np.ndarray:
    """Globally averaged final backbone features for every sample in a split."""
    feats = []
    with torch.no_grad():
        for idx in batches(len(split), batch_size):
            x = torch.from_numpy(split.images[idx])
            for block in model.blocks:
                x = block(x)
            feats.append(x.mean(dim=(2, 3)).numpy())
    return np.concatenate(feats)
