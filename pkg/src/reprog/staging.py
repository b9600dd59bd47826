"""Stage partitioning of block-decomposed networks and teacher-to-student pairing.

A network is modeled as an ordered list of opaque blocks plus an optional
output head. A StagePlan groups consecutive blocks into N coarse stages by
recording the (0-indexed) index of each stage's last block; stage features
are tapped after those blocks. The pairing permutation says which student
stage slot each teacher stage feeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import torch
import torch.nn as nn

PAIRING_STRATEGIES = ("identity", "reverse", "shift_right")


class BlockSequence(nn.Module):
    """Ordered computation blocks with an optional task head.

    Students carry a head; a frozen teacher used purely as a feature source
    does not. ``forward`` runs all blocks and the head when present.
    """

    def __init__(self, blocks: Sequence[nn.Module], head: Optional[nn.Module] = None):
        super().__init__()
        if len(blocks) == 0:
            raise ValueError("BlockSequence needs at least one block")
        self.blocks = nn.ModuleList(blocks)
        self.head = head

    def __len__(self) -> int:
        return len(self.blocks)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        if self.head is not None:
            x = self.head(x)
        return x

    def freeze(self) -> "BlockSequence":
        """Disable gradients and switch to eval mode; returns self."""
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


@dataclass(frozen=True)
class StagePlan:
    """Coarse N-stage grouping of one model's blocks.

    boundaries[k] is the 0-indexed last block of stage k+1; features are
    tapped after those blocks. pairing is 1-based: pairing[i-1] is the
    student stage slot that teacher stage i feeds (identity for plans that
    describe a student).
    """

    n_stages: int
    boundaries: tuple = ()
    pairing: tuple = field(default=())

    def __post_init__(self):
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        bounds = tuple(int(b) for b in self.boundaries)
        if len(bounds) != self.n_stages:
            raise ValueError(f"need {self.n_stages} boundaries, got {len(bounds)}")
        if any(b < 0 for b in bounds):
            raise ValueError(f"negative block index in boundaries {bounds}")
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ValueError(f"boundaries must be strictly increasing, got {bounds}")
        pairing = tuple(int(p) for p in self.pairing) or make_pairing(self.n_stages, "identity")
        if sorted(pairing) != list(range(1, self.n_stages + 1)):
            raise ValueError(f"pairing {pairing} is not a permutation of 1..{self.n_stages}")
        object.__setattr__(self, "boundaries", bounds)
        object.__setattr__(self, "pairing", pairing)

    def with_pairing(self, pairing) -> "StagePlan":
        return replace(self, pairing=tuple(pairing))

    def to_dict(self) -> dict:
        return {
            "n_stages": self.n_stages,
            "boundaries": list(self.boundaries),
            "pairing": list(self.pairing),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls(
            n_stages=int(d["n_stages"]),
            boundaries=tuple(d["boundaries"]),
            pairing=tuple(d.get("pairing", ())),
        )


def partition(
    model: BlockSequence, n_stages: int, boundaries: Optional[Sequence[int]] = None
) -> StagePlan:
    """Group a model's blocks into N consecutive stages.

    With explicit boundaries they are validated and taken verbatim (the
    last boundary may fall before the final block, which taps an earlier
    feature and leaves trailing blocks unused). Otherwise stages are
    near-even: boundary_k = ceil(k * B / N) - 1 for k = 1..N over B blocks,
    so every stage gets floor(B/N) or ceil(B/N) blocks.
    """
    n_blocks = len(model)
    if n_stages > n_blocks:
        raise ValueError(f"cannot split {n_blocks} blocks into {n_stages} stages")
    if boundaries is None:
        boundaries = tuple(math.ceil(k * n_blocks / n_stages) - 1 for k in range(1, n_stages + 1))
    else:
        boundaries = tuple(int(b) for b in boundaries)
        if any(b >= n_blocks for b in boundaries):
            raise ValueError(f"boundary out of range for {n_blocks} blocks: {boundaries}")
    return StagePlan(n_stages=n_stages, boundaries=boundaries)


def make_pairing(n_stages: int, strategy: str) -> tuple:
    """Teacher-stage to student-slot permutation (1-based).

    identity: i -> i; reverse: i -> N+1-i; shift_right: i -> (i mod N) + 1.
    """
    if n_stages < 1:
        raise ValueError("n_stages must be >= 1")
    if strategy == "identity":
        return tuple(range(1, n_stages + 1))
    if strategy == "reverse":
        return tuple(range(n_stages, 0, -1))
    if strategy == "shift_right":
        return tuple((i % n_stages) + 1 for i in range(1, n_stages + 1))
    raise ValueError(f"unknown pairing strategy {strategy!r}; expected one of {PAIRING_STRATEGIES}")


def stage_outputs(model: BlockSequence, plan: StagePlan, x: torch.Tensor) -> list:
    """Feature maps tapped after each stage's last block, in stage order.

    Runs blocks 0..boundaries[-1] once and collects the N boundary
    activations. The head is never applied.
    """
    features = []
    bound_set = set(plan.boundaries)
    for idx, block in enumerate(model.blocks):
        x = block(x)
        if idx in bound_set:
            features.append(x)
        if idx == plan.boundaries[-1]:
            break
    return features
