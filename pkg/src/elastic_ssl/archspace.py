"""Elastic architecture space: descriptors, sampling, and analytic cost models.

A descriptor fixes the stem width, the per-stage 3x3 widths, and the per-stage
block counts of a four-stage bottleneck network.  The space constrains each of
those nine integers to an arithmetic grid (min, max, step).  Cost models count
multiply-accumulates and parameters analytically so candidates can be bucketed
into budget groups without instantiating anything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

STAGE_COUNT = 4
STAGE_STRIDES = (1, 2, 2, 2)

# Stem layouts.  "small" keeps full resolution for 32x32-class inputs; the
# "imagenet" layout halves twice (7x7 stride-2 conv, then 3x3 stride-2 pool).
STEM_SMALL = "small"
STEM_IMAGENET = "imagenet"

_BN_EPS = 1e-5


class DescriptorError(ValueError):
    """A descriptor is structurally broken or outside its space."""


class BudgetExhaustedError(RuntimeError):
    """Rejection sampling failed to land inside the budget window."""

    def __init__(self, window: tuple[int, int], tries: int):
        super().__init__(
            f"no descriptor with FLOPs in [{window[0]}, {window[1]}) "
            f"after {tries} tries"
        )
        self.window = window
        self.tries = tries


class GroupRangeError(ValueError):
    """A FLOPs value falls outside the configured group boundaries."""


@dataclass(frozen=True)
class ArchDescriptor:
    """One architecture: stem width, four stage widths, four stage depths."""

    stem_width: int
    stage_widths: tuple[int, int, int, int]
    stage_depths: tuple[int, int, int, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "stem_width", int(self.stem_width))
        if len(self.stage_widths) != STAGE_COUNT or len(self.stage_depths) != STAGE_COUNT:
            raise DescriptorError(
                f"expected {STAGE_COUNT} stage widths and depths, got "
                f"{len(self.stage_widths)} and {len(self.stage_depths)}"
            )
        bad = [v for v in (self.stem_width, *self.stage_widths, *self.stage_depths) if v < 1]
        if bad:
            raise DescriptorError(f"widths and depths must be positive, got {bad}")

    def to_dict(self) -> dict:
        return {
            "stem_width": self.stem_width,
            "stage_widths": list(self.stage_widths),
            "stage_depths": list(self.stage_depths),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "ArchDescriptor":
        required = {"stem_width", "stage_widths", "stage_depths"}
        unknown = set(record) - required
        if unknown:
            raise DescriptorError(f"unknown descriptor keys: {sorted(unknown)}")
        missing = required - set(record)
        if missing:
            raise DescriptorError(f"missing descriptor keys: {sorted(missing)}")
        return cls(
            stem_width=record["stem_width"],
            stage_widths=tuple(record["stage_widths"]),
            stage_depths=tuple(record["stage_depths"]),
        )


@dataclass(frozen=True)
class DimRange:
    """Arithmetic grid for one dimension: {min, min+step, ..., max}."""

    min: int
    max: int
    step: int

    def __post_init__(self) -> None:
        if self.min < 1 or self.max < self.min or self.step < 1:
            raise ValueError(f"bad dimension range {self}")
        if (self.max - self.min) % self.step != 0:
            raise ValueError(
                f"(max - min) must be divisible by step, got {self}"
            )

    @property
    def count(self) -> int:
        return (self.max - self.min) // self.step + 1

    def choices(self) -> tuple[int, ...]:
        return tuple(range(self.min, self.max + 1, self.step))

    def contains(self, value: int) -> bool:
        return (
            self.min <= value <= self.max
            and (value - self.min) % self.step == 0
        )

    def sample(self, rng: np.random.Generator) -> int:
        return self.min + self.step * int(rng.integers(0, self.count))

    def midpoint(self) -> int:
        # Grid point nearest the arithmetic middle, rounding down on ties.
        return self.min + self.step * ((self.count - 1) // 2)

    def to_dict(self) -> dict:
        return {"min": self.min, "max": self.max, "step": self.step}

    @classmethod
    def from_dict(cls, record: dict) -> "DimRange":
        unknown = set(record) - {"min", "max", "step"}
        if unknown:
            raise ValueError(f"unknown range keys: {sorted(unknown)}")
        return cls(int(record["min"]), int(record["max"]), int(record["step"]))


@dataclass(frozen=True)
class Validity:
    """Validation verdict; `violations` maps field path -> message."""

    ok: bool
    violations: dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class ModelSpace:
    """The searchable grid plus the fixed structural conventions."""

    stem: DimRange
    widths: tuple[DimRange, DimRange, DimRange, DimRange]
    depths: tuple[DimRange, DimRange, DimRange, DimRange]
    expansion: int = 4
    input_resolution: int = 32
    stem_plan: str = STEM_SMALL

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "depths", tuple(self.depths))
        if len(self.widths) != STAGE_COUNT or len(self.depths) != STAGE_COUNT:
            raise ValueError(f"expected {STAGE_COUNT} width and depth ranges")
        if self.expansion < 1:
            raise ValueError(f"expansion must be positive, got {self.expansion}")
        if self.input_resolution < 8:
            raise ValueError(f"input resolution too small: {self.input_resolution}")
        if self.stem_plan not in (STEM_SMALL, STEM_IMAGENET):
            raise ValueError(f"unknown stem plan {self.stem_plan!r}")

    # -- enumeration helpers -------------------------------------------------

    def largest(self) -> ArchDescriptor:
        return ArchDescriptor(
            self.stem.max,
            tuple(r.max for r in self.widths),
            tuple(r.max for r in self.depths),
        )

    def smallest(self) -> ArchDescriptor:
        return ArchDescriptor(
            self.stem.min,
            tuple(r.min for r in self.widths),
            tuple(r.min for r in self.depths),
        )

    def midpoint(self) -> ArchDescriptor:
        return ArchDescriptor(
            self.stem.midpoint(),
            tuple(r.midpoint() for r in self.widths),
            tuple(r.midpoint() for r in self.depths),
        )

    def subnet_count(self) -> int:
        n = self.stem.count
        for r in (*self.widths, *self.depths):
            n *= r.count
        return n

    # -- validation and sampling --------------------------------------------

    def validate(self, d: ArchDescriptor) -> Validity:
        violations: dict[str, str] = {}
        if not self.stem.contains(d.stem_width):
            violations["stem_width"] = (
                f"{d.stem_width} not in grid {self.stem.to_dict()}"
            )
        for i in range(STAGE_COUNT):
            if not self.widths[i].contains(d.stage_widths[i]):
                violations[f"stage_widths[{i}]"] = (
                    f"{d.stage_widths[i]} not in grid {self.widths[i].to_dict()}"
                )
            if not self.depths[i].contains(d.stage_depths[i]):
                violations[f"stage_depths[{i}]"] = (
                    f"{d.stage_depths[i]} not in grid {self.depths[i].to_dict()}"
                )
        return Validity(ok=not violations, violations=violations)

    def require_valid(self, d: ArchDescriptor) -> None:
        verdict = self.validate(d)
        if not verdict.ok:
            raise DescriptorError(f"invalid descriptor: {verdict.violations}")

    def sample(self, rng: np.random.Generator) -> ArchDescriptor:
        """Uniform draw per dimension; draw order: stem, widths, depths."""
        stem = self.stem.sample(rng)
        widths = tuple(r.sample(rng) for r in self.widths)
        depths = tuple(r.sample(rng) for r in self.depths)
        return ArchDescriptor(stem, widths, depths)

    def sample_in_budget(
        self,
        rng: np.random.Generator,
        budget: "BudgetSpec",
        max_tries: int = 1000,
    ) -> ArchDescriptor:
        """Rejection-sample until flops() lands in [budget.lower, budget.upper)."""
        if max_tries < 1:
            raise ValueError(f"max_tries must be positive, got {max_tries}")
        for _ in range(max_tries):
            d = self.sample(rng)
            f = flops(
                d,
                self.input_resolution,
                expansion=self.expansion,
                stem_plan=self.stem_plan,
            )
            if budget.lower <= f < budget.upper:
                return d
        raise BudgetExhaustedError((budget.lower, budget.upper), max_tries)

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "stem": self.stem.to_dict(),
            "stage_widths": [r.to_dict() for r in self.widths],
            "stage_depths": [r.to_dict() for r in self.depths],
            "expansion": self.expansion,
            "input_resolution": self.input_resolution,
            "stem_plan": self.stem_plan,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "ModelSpace":
        known = {
            "stem", "stage_widths", "stage_depths",
            "expansion", "input_resolution", "stem_plan",
        }
        unknown = set(record) - known
        if unknown:
            raise ValueError(f"unknown model-space keys: {sorted(unknown)}")
        return cls(
            stem=DimRange.from_dict(record["stem"]),
            widths=tuple(DimRange.from_dict(r) for r in record["stage_widths"]),
            depths=tuple(DimRange.from_dict(r) for r in record["stage_depths"]),
            expansion=int(record.get("expansion", 4)),
            input_resolution=int(record.get("input_resolution", 32)),
            stem_plan=record.get("stem_plan", STEM_SMALL),
        )


def desk_space() -> ModelSpace:
    """Default small-input space; every subnet trains in CPU minutes."""
    return ModelSpace(
        stem=DimRange(16, 32, 8),
        widths=(
            DimRange(16, 32, 8),
            DimRange(32, 64, 16),
            DimRange(64, 128, 32),
            DimRange(128, 256, 64),
        ),
        depths=(
            DimRange(1, 2, 1),
            DimRange(1, 3, 1),
            DimRange(2, 6, 1),
            DimRange(1, 2, 1),
        ),
        expansion=4,
        input_resolution=32,
        stem_plan=STEM_SMALL,
    )


def paper_space() -> ModelSpace:
    """Large-input space used only for cost-model parity checks."""
    return ModelSpace(
        stem=DimRange(32, 64, 16),
        widths=(
            DimRange(48, 80, 16),
            DimRange(96, 160, 32),
            DimRange(192, 320, 64),
            DimRange(384, 640, 128),
        ),
        depths=(
            DimRange(2, 4, 1),
            DimRange(2, 6, 2),
            DimRange(5, 29, 2),
            DimRange(2, 4, 1),
        ),
        expansion=4,
        input_resolution=224,
        stem_plan=STEM_IMAGENET,
    )


# ---------------------------------------------------------------------------
# Analytic cost models.
#
# Convention: one multiply-accumulate counts as one FLOP; only convolutions and
# linear layers are counted.  The bottleneck keeps the original layout: the
# first 1x1 conv (and the downsample projection) carry the stage stride.
# ---------------------------------------------------------------------------

def _conv_out(h: int, kernel: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - kernel) // stride + 1


def _resolve_stem_plan(stem_plan: str | None, input_resolution: int) -> str:
    if stem_plan is not None:
        return stem_plan
    return STEM_IMAGENET if input_resolution >= 64 else STEM_SMALL


def flops(
    d: ArchDescriptor,
    input_resolution: int = 224,
    *,
    expansion: int = 4,
    stem_plan: str | None = None,
    projection: tuple[int, int] | None = (512, 128),
    head: int | None = None,
    detail: bool = False,
) -> int | dict:
    """Multiply-accumulate count for one descriptor at a square resolution.

    `projection` counts the two-layer embedding head; passing `head` counts a
    classifier of that width instead (the projector is dropped at deployment).
    `stem_plan=None` picks "imagenet" at >=64 px and "small" below.
    With `detail=True` returns a component breakdown instead of the total.
    """
    plan = _resolve_stem_plan(stem_plan, input_resolution)
    h = input_resolution
    if plan == STEM_IMAGENET:
        h = _conv_out(h, 7, 2, 3)
        stem = 49 * 3 * d.stem_width * h * h
        h = _conv_out(h, 3, 2, 1)  # max-pool, no MACs
    else:
        h = _conv_out(h, 3, 1, 1)
        stem = 9 * 3 * d.stem_width * h * h
    stage_convs = 0
    downsample = 0
    cin = d.stem_width
    for i in range(STAGE_COUNT):
        w = d.stage_widths[i]
        out = w * expansion
        for b in range(d.stage_depths[i]):
            stride = STAGE_STRIDES[i] if b == 0 else 1
            h_out = _conv_out(h, 1, stride, 0)
            stage_convs += cin * w * h_out * h_out          # 1x1 reduce (strided)
            stage_convs += 9 * w * w * h_out * h_out        # 3x3
            stage_convs += w * out * h_out * h_out          # 1x1 expand
            if b == 0:
                downsample += cin * out * h_out * h_out     # shortcut projection
            cin = out
            h = h_out
    head_macs = 0
    if head is not None:
        head_macs = cin * head
    elif projection is not None:
        hidden, embed = projection
        head_macs = cin * hidden + hidden * embed
    parts = {
        "stem": stem,
        "stage_convs": stage_convs,
        "downsample": downsample,
        "head": head_macs,
        "total": stem + stage_convs + downsample + head_macs,
    }
    return parts if detail else parts["total"]


def params(
    d: ArchDescriptor,
    head: int | None = None,
    *,
    expansion: int = 4,
    stem_plan: str = STEM_SMALL,
    projection: tuple[int, int] | None = (512, 128),
    detail: bool = False,
) -> int | dict:
    """Learnable parameter count (conv weights, norm affine pairs, head).

    With `head=None` the network ends in the two-layer projection head used
    during contrastive training.  With `head=k` a k-way classifier replaces
    the projector, which is what a deployed backbone carries.
    """
    stem_kernel = 7 if stem_plan == STEM_IMAGENET else 3
    stem = stem_kernel * stem_kernel * 3 * d.stem_width
    norm = 2 * d.stem_width
    stage_convs = 0
    downsample = 0
    cin = d.stem_width
    for i in range(STAGE_COUNT):
        w = d.stage_widths[i]
        out = w * expansion
        for b in range(d.stage_depths[i]):
            stage_convs += cin * w + 9 * w * w + w * out
            norm += 2 * w + 2 * w + 2 * out
            if b == 0:
                downsample += cin * out
                norm += 2 * out
            cin = out
    head_params = 0
    if head is not None:
        head_params = cin * head + head
    elif projection is not None:
        hidden, embed = projection
        head_params = cin * hidden + hidden + hidden * embed + embed
    parts = {
        "stem": stem,
        "stage_convs": stage_convs,
        "downsample": downsample,
        "norm": norm,
        "head": head_params,
        "total": stem + stage_convs + downsample + norm + head_params,
    }
    return parts if detail else parts["total"]


# ---------------------------------------------------------------------------
# Budget groups.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BudgetSpec:
    """A FLOPs window [lower, upper) plus optional group boundaries."""

    lower: int
    upper: int
    boundaries: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        if self.lower < 0 or self.upper <= self.lower:
            raise ValueError(f"need 0 <= lower < upper, got [{self.lower}, {self.upper})")
        if self.boundaries:
            if len(self.boundaries) < 2:
                raise ValueError("need at least two boundaries to form a group")
            if any(b >= a for b, a in zip(self.boundaries, self.boundaries[1:])):
                raise ValueError(f"boundaries must be strictly ascending: {self.boundaries}")

    @classmethod
    def from_boundaries(cls, boundaries: "list[int] | tuple[int, ...]") -> "BudgetSpec":
        boundaries = tuple(int(b) for b in boundaries)
        if len(boundaries) < 2:
            raise ValueError("need at least two boundaries")
        return cls(boundaries[0], boundaries[-1], boundaries)

    def window_label(self) -> str:
        return f"{format_flops(self.lower)}~{format_flops(self.upper)}"


def format_flops(value: int) -> str:
    """Compact label for a FLOPs count: 3_000_000_000 -> '3G'."""
    value = int(value)
    for unit, scale in (("G", 10**9), ("M", 10**6), ("K", 10**3)):
        if value >= scale and value % scale == 0:
            return f"{value // scale}{unit}"
    return str(value)


def parse_flops(text: str) -> int:
    """Inverse of format_flops; accepts '3.5G', '40M', '1000'."""
    text = text.strip()
    scale = 1
    if text and text[-1].upper() in "GMK":
        scale = {"G": 10**9, "M": 10**6, "K": 10**3}[text[-1].upper()]
        text = text[:-1]
    try:
        return int(round(float(text) * scale))
    except ValueError as exc:
        raise ValueError(f"cannot parse FLOPs value {text!r}") from exc


def group_of(f: int, budget: BudgetSpec) -> str:
    """Label of the half-open group [b_i, b_{i+1}) containing `f`."""
    bounds = budget.boundaries
    if len(bounds) < 2:
        raise GroupRangeError("budget has no group boundaries")
    if f < bounds[0] or f >= bounds[-1]:
        raise GroupRangeError(
            f"{f} outside grouped range [{bounds[0]}, {bounds[-1]})"
        )
    idx = int(np.searchsorted(np.asarray(bounds), f, side="right")) - 1
    return f"{format_flops(bounds[idx])}~{format_flops(bounds[idx + 1])}"


def resnet50_descriptor() -> ArchDescriptor:
    """The classic 4-stage bottleneck reference point."""
    return ArchDescriptor(64, (64, 128, 256, 512), (3, 4, 6, 3))
