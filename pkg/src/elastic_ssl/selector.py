"""Label-free, task-aware architecture selection.

Candidates are scored by how closely their features agree with the frozen
teacher's on the target data.  Agreement is measured on the features a task
consumes: the pooled embedding for classification, single or multiple stage
maps for dense tasks.  Stage-map agreement compares spatial relation
matrices, which makes it invariant to channel permutations and orthogonal
channel transforms, so student and teacher channel counts may differ.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .archspace import (
    ArchDescriptor,
    BudgetSpec,
    GroupRangeError,
    flops,
    group_of,
    params,
)
from .augment import standardize
from .seeding import STREAM_SEARCH, stream_rng
from .supernet import (
    STUDENT,
    TEACHER,
    FeatureBundle,
    SupernetState,
    calibrate_norm_stats,
    forward,
)


class TaskKind(str, Enum):
    """Downstream task families and the features they consume."""

    CLASSIFICATION = "classification"
    DETECTION_C4 = "detection-c4"
    DETECTION_FPN = "detection-fpn"
    SEGMENTATION = "segmentation"

    @property
    def feature_plan(self) -> tuple[str, ...]:
        return _FEATURE_PLANS[self]


_FEATURE_PLANS = {
    TaskKind.CLASSIFICATION: ("z",),
    TaskKind.DETECTION_C4: ("C5",),
    TaskKind.DETECTION_FPN: ("C2", "C3", "C4", "C5"),
    TaskKind.SEGMENTATION: ("C4", "C5"),
}


@dataclass(frozen=True)
class RelationMatrix:
    """Row-stochastic spatial affinity of one feature map."""

    values: np.ndarray  # [HW, HW], float64
    temperature: float

    @property
    def rows(self) -> int:
        return self.values.shape[0]


def _as_channels_by_positions(feature_map) -> np.ndarray:
    """[C, H, W] or [C, HW] -> float64 [C, HW]."""
    array = (
        feature_map.detach().numpy()
        if isinstance(feature_map, Tensor)
        else np.asarray(feature_map)
    )
    if array.ndim == 3:
        array = array.reshape(array.shape[0], -1)
    if array.ndim != 2:
        raise ValueError(f"expected [C, H, W] or [C, HW], got shape {array.shape}")
    return array.astype(np.float64)


def _log_relation(matrix: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise log-softmax of the scaled Gram matrix of spatial columns."""
    logits = matrix.T @ matrix / temperature
    logits -= logits.max(axis=1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def relation_matrix(feature_map, temperature: float) -> RelationMatrix:
    """Softmax affinities between all spatial positions of one map."""
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    columns = _as_channels_by_positions(feature_map)
    if columns.shape[1] < 1:
        raise ValueError("feature map has no spatial positions")
    return RelationMatrix(
        values=np.exp(_log_relation(columns, temperature)),
        temperature=temperature,
    )


def similarity_from_relations(student_rel: np.ndarray, teacher_rel: np.ndarray) -> float:
    """Negative mean teacher->student row cross-entropy; 0 only when both are
    the identity relation, and maximal exactly at student == teacher."""
    student_rel = np.asarray(student_rel, dtype=np.float64)
    teacher_rel = np.asarray(teacher_rel, dtype=np.float64)
    if student_rel.shape != teacher_rel.shape:
        raise ValueError(
            f"relation shapes differ: {student_rel.shape} vs {teacher_rel.shape}"
        )
    hw = student_rel.shape[0]
    with np.errstate(divide="ignore"):
        log_student = np.log(student_rel)
    log_student = np.where(teacher_rel > 0, log_student, 0.0)
    return float((teacher_rel * log_student).sum() / hw)


def relation_similarity(student_map, teacher_map, temperature: float) -> float:
    """Relation agreement of two maps over the same spatial grid.

    Computed from log-softmax directly for numerical safety; channel counts
    may differ, spatial extents must match.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    student = _as_channels_by_positions(student_map)
    teacher = _as_channels_by_positions(teacher_map)
    if student.shape[1] != teacher.shape[1]:
        raise ValueError(
            f"spatial extents differ: {student.shape[1]} vs {teacher.shape[1]}"
        )
    hw = student.shape[1]
    log_student = _log_relation(student, temperature)
    teacher_rel = np.exp(_log_relation(teacher, temperature))
    return float((teacher_rel * log_student).sum() / hw)


def embedding_similarity(z_s, z_t) -> float:
    """Cosine similarity; inputs are normalized defensively."""
    a = np.asarray(z_s.detach().numpy() if isinstance(z_s, Tensor) else z_s, dtype=np.float64)
    b = np.asarray(z_t.detach().numpy() if isinstance(z_t, Tensor) else z_t, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"expected equal-length vectors, got {a.shape} and {b.shape}")
    norms = np.linalg.norm(a) * np.linalg.norm(b)
    if norms == 0:
        raise ValueError("zero vector has no direction")
    return float(a @ b / norms)


def task_similarity(
    task: TaskKind,
    student: FeatureBundle,
    teacher: FeatureBundle,
    relation_temperature: float = 0.2,
) -> np.ndarray:
    """Per-image agreement on the features the task consumes.

    Both bundles are batched; returns a float64 [B] vector.  For multi-stage
    plans the per-stage relation similarities are averaged.
    """
    task = TaskKind(task)
    count = len(student)
    if len(teacher) != count:
        raise ValueError(f"batch sizes differ: {count} vs {len(teacher)}")
    scores = np.zeros(count, dtype=np.float64)
    if task is TaskKind.CLASSIFICATION:
        for i in range(count):
            scores[i] = embedding_similarity(student.z[i], teacher.z[i])
        return scores
    plan = task.feature_plan
    for i in range(count):
        per_stage = [
            relation_similarity(
                student.stages[name][i], teacher.stages[name][i], relation_temperature
            )
            for name in plan
        ]
        scores[i] = float(np.mean(per_stage))
    return scores


# ---------------------------------------------------------------------------
# Search.
# ---------------------------------------------------------------------------

@dataclass
class SearchSpec:
    """What to search: task, budget window, candidate count, target data."""

    task: TaskKind
    budget: BudgetSpec
    dataset: "object"  # DatasetHandle; images drive scoring and calibration
    candidates: int = 100
    relation_temperature: float = 0.2
    seed: int = 0
    batch_size: int = 64
    calibration_passes: int = 1
    max_sample_tries: int = 1000
    hw_cap: "int | None" = None

    def __post_init__(self) -> None:
        self.task = TaskKind(self.task)
        if self.candidates < 1:
            raise ValueError(f"candidates must be >= 1, got {self.candidates}")
        if self.relation_temperature <= 0:
            raise ValueError("relation_temperature must be > 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.calibration_passes < 1:
            raise ValueError("calibration_passes must be >= 1")
        if self.hw_cap is not None and self.hw_cap < 1:
            raise ValueError(f"hw_cap must be positive, got {self.hw_cap}")


@dataclass(frozen=True)
class SearchEntry:
    descriptor: ArchDescriptor
    score: float
    flops: int
    params: int
    group: str

    def to_dict(self) -> dict:
        return {
            "descriptor": self.descriptor.to_dict(),
            "score": self.score,
            "flops": self.flops,
            "params": self.params,
            "group": self.group,
        }


@dataclass
class SearchResult:
    """Candidates ranked by agreement score, best first."""

    task: str
    budget: dict
    entries: list[SearchEntry]
    seed: int

    @property
    def winner(self) -> SearchEntry:
        return self.entries[0]

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "budget": self.budget,
            "seed": self.seed,
            "winner": self.winner.to_dict(),
            "entries": [e.to_dict() for e in self.entries],
        }

    def save(self, path: "str | Path") -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        )

    @classmethod
    def load(cls, path: "str | Path") -> "SearchResult":
        record = json.loads(Path(path).read_text())
        entries = [
            SearchEntry(
                descriptor=ArchDescriptor.from_dict(e["descriptor"]),
                score=e["score"],
                flops=e["flops"],
                params=e["params"],
                group=e["group"],
            )
            for e in record["entries"]
        ]
        return cls(
            task=record["task"],
            budget=record["budget"],
            entries=entries,
            seed=record["seed"],
        )


def _iter_batches(images: np.ndarray, batch_size: int):
    for start in range(0, images.shape[0], batch_size):
        yield torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))


def _subsample_positions(bundle: FeatureBundle, plan: tuple[str, ...],
                         hw_cap: "int | None", seed: int) -> FeatureBundle:
    """Optional uniform-grid spatial thinning to bound relation-matrix size."""
    if hw_cap is None:
        return bundle
    stages = dict(bundle.stages)
    for name in plan:
        if name == "z" or name not in stages:
            continue
        m = stages[name]
        b, c, h, w = m.shape
        if h * w <= hw_cap:
            continue
        flat = m.reshape(b, c, h * w)
        stride = int(np.ceil(h * w / hw_cap))
        offset = int(stream_rng(seed, STREAM_SEARCH, stride).integers(0, stride))
        stages[name] = flat[:, :, offset::stride].unsqueeze(-1)
    return FeatureBundle(z=bundle.z, stages=stages)


def cache_teacher_features(
    state: SupernetState,
    spec: SearchSpec,
    batches: "list[Tensor] | None" = None,
) -> list[FeatureBundle]:
    """Calibrated teacher features over the target dataset, one bundle per batch.

    Only the features the task plan needs are kept (plus the embedding), since
    the cache spans the whole dataset.
    """
    if batches is None:
        images = standardize(torch.from_numpy(spec.dataset.images)).numpy()
        batches = list(_iter_batches(images, spec.batch_size))
    if not batches:
        raise ValueError("target dataset is empty")
    largest = state.space.largest()
    calibrate_norm_stats(
        state, largest, batches, passes=spec.calibration_passes, branch=TEACHER
    )
    plan = spec.task.feature_plan
    cached = []
    with torch.no_grad():
        for batch in batches:
            bundle = forward(state, TEACHER, largest, batch)
            cached.append(_strip(bundle, plan, spec))
    return cached


def _strip(bundle: FeatureBundle, plan: tuple[str, ...], spec: SearchSpec) -> FeatureBundle:
    """Keep only the features the plan needs (memory: the cache spans the dataset)."""
    bundle = _subsample_positions(bundle, plan, spec.hw_cap, spec.seed)
    stages = {name: bundle.stages[name] for name in plan if name != "z"}
    return FeatureBundle(z=bundle.z, stages=stages)


def score_candidates(
    state: SupernetState,
    spec: SearchSpec,
    descriptors: "list[ArchDescriptor]",
) -> np.ndarray:
    """Teacher-agreement score of each descriptor over the target dataset.

    Per candidate: calibrate its norm statistics on the target data, embed the
    dataset in inference mode, and sum the per-image task similarities.  The
    per-image accumulation is index-aligned, so scores do not depend on the
    iteration order of the dataset.
    """
    images = standardize(torch.from_numpy(spec.dataset.images)).numpy()
    batches = list(_iter_batches(images, spec.batch_size))
    if not batches:
        raise ValueError("target dataset is empty")
    teacher_cache = cache_teacher_features(state, spec, batches)
    plan = spec.task.feature_plan
    scores = np.zeros(len(descriptors), dtype=np.float64)
    for idx, descriptor in enumerate(descriptors):
        calibrate_norm_stats(
            state, descriptor, batches, passes=spec.calibration_passes, branch=STUDENT
        )
        per_image = np.zeros(images.shape[0], dtype=np.float64)
        cursor = 0
        with torch.no_grad():
            for batch, teacher_bundle in zip(batches, teacher_cache):
                student_bundle = _strip(
                    forward(state, STUDENT, descriptor, batch), plan, spec
                )
                sims = task_similarity(
                    spec.task, student_bundle, teacher_bundle, spec.relation_temperature
                )
                per_image[cursor : cursor + len(sims)] = sims
                cursor += len(sims)
        scores[idx] = float(per_image.sum())
    return scores


def search(
    state: SupernetState,
    spec: SearchSpec,
    rng: "np.random.Generator | None" = None,
) -> SearchResult:
    """Sample candidates inside the budget window and rank them by score.

    Ties keep sampling order (stable sort).  Deterministic given spec.seed.
    """
    if rng is None:
        rng = stream_rng(spec.seed, STREAM_SEARCH)
    space = state.space
    descriptors = [
        space.sample_in_budget(rng, spec.budget, spec.max_sample_tries)
        for _ in range(spec.candidates)
    ]
    scores = score_candidates(state, spec, descriptors)
    order = np.argsort(-scores, kind="stable")
    entries = []
    for idx in order:
        d = descriptors[idx]
        f = flops(
            d, space.input_resolution,
            expansion=space.expansion, stem_plan=space.stem_plan,
        )
        try:
            group = group_of(f, spec.budget)
        except GroupRangeError:
            group = spec.budget.window_label()
        entries.append(
            SearchEntry(
                descriptor=d,
                score=float(scores[idx]),
                flops=f,
                params=params(d, expansion=space.expansion, stem_plan=space.stem_plan),
                group=group,
            )
        )
    return SearchResult(
        task=spec.task.value,
        budget={
            "lower": spec.budget.lower,
            "upper": spec.budget.upper,
            "boundaries": list(spec.budget.boundaries),
        },
        entries=entries,
        seed=spec.seed,
    )
