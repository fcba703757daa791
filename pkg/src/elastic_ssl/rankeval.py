"""Does the label-free selection metric predict downstream quality?

Linear probes frozen subnet features on a labeled dataset, then rank-
correlates probe accuracy against the selector's agreement score over a set
of subnets spread across the budget range.  Also hosts the paired ablation
that retrains the supernet with the teacher architecture tied to the student
instead of fixed at the largest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from scipy import stats as scipy_stats

from .archspace import ArchDescriptor, BudgetExhaustedError, BudgetSpec, ModelSpace, flops
from .augment import standardize
from .seeding import STREAM_RANK, stream_rng
from .supernet import (
    STUDENT,
    SupernetState,
    build_supernet,
    calibrate_norm_stats,
    forward,
)
from .training import TrainConfig, train
from .selector import SearchSpec, score_candidates


def spearman(a, b) -> float:
    """Rank correlation with average-rank tie handling.

    Raises on length mismatch, fewer than two pairs, or constant input (the
    correlation is undefined there).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"expected equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError(f"need at least two pairs, got {a.size}")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValueError("constant input: rank correlation is undefined")
    rank_a = scipy_stats.rankdata(a)
    rank_b = scipy_stats.rankdata(b)
    return float(np.corrcoef(rank_a, rank_b)[0, 1])


@dataclass(frozen=True)
class ProbeConfig:
    """Deterministic full-batch softmax regression on frozen features."""

    epochs: int = 100
    learning_rate: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128  # forward batching only; the probe itself is full-batch
    calibration_passes: int = 1
    seed: int = 0

    def validate(self) -> list[str]:
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.calibration_passes < 1:
            problems.append("calibration_passes must be >= 1")
        return problems

    def require_valid(self) -> None:
        problems = self.validate()
        if problems:
            raise ValueError("invalid probe config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict) -> "ProbeConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(record) - known
        if unknown:
            raise ValueError(f"unknown probe-config keys: {sorted(unknown)}")
        return cls(**record)


def _pooled_features(state: SupernetState, d: ArchDescriptor,
                     images: np.ndarray, batch_size: int) -> np.ndarray:
    """Frozen pre-projection representation: GAP over the last stage map."""
    rows = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = torch.from_numpy(np.ascontiguousarray(images[start : start + batch_size]))
            bundle = forward(state, STUDENT, d, batch)
            rows.append(bundle.stages["C5"].mean(dim=(2, 3)).numpy())
    return np.concatenate(rows).astype(np.float64)


def _softmax_probe(train_x, train_y, eval_x, eval_y, config: ProbeConfig) -> float:
    """Zero-initialized full-batch gradient descent; no stochastic element."""
    classes = int(train_y.max()) + 1
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0)
    std[std < 1e-8] = 1.0
    train_x = (train_x - mean) / std
    eval_x = (eval_x - mean) / std
    n, dim = train_x.shape
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), train_y] = 1.0
    weights = np.zeros((dim, classes))
    bias = np.zeros(classes)
    vel_w = np.zeros_like(weights)
    vel_b = np.zeros_like(bias)
    for epoch in range(config.epochs):
        lr = config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / config.epochs))
        logits = train_x @ weights + bias
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        residual = (probs - onehot) / n
        grad_w = train_x.T @ residual + config.weight_decay * weights
        grad_b = residual.sum(axis=0)
        vel_w = config.momentum * vel_w - lr * grad_w
        vel_b = config.momentum * vel_b - lr * grad_b
        weights += vel_w
        bias += vel_b
    predictions = (eval_x @ weights + bias).argmax(axis=1)
    return float((predictions == eval_y).mean())


def linear_probe(
    state: SupernetState,
    d: ArchDescriptor,
    train_data,
    eval_data,
    config: "ProbeConfig | None" = None,
) -> float:
    """Held-out accuracy of a linear classifier on frozen pooled features.

    Calibrates the subnet's norm statistics on the probe training images
    first; the backbone receives no gradient.  Bit-deterministic for a given
    state and data.
    """
    config = config or ProbeConfig()
    config.require_valid()
    for handle, role in ((train_data, "train"), (eval_data, "eval")):
        if handle.labels is None:
            raise ValueError(f"{role} split has no labels")
    if len(np.unique(train_data.labels)) < 2:
        raise ValueError("probe needs at least two classes")
    train_images = standardize(torch.from_numpy(train_data.images)).numpy()
    eval_images = standardize(torch.from_numpy(eval_data.images)).numpy()
    calibration = [
        torch.from_numpy(np.ascontiguousarray(train_images[s : s + config.batch_size]))
        for s in range(0, train_images.shape[0], config.batch_size)
    ]
    calibrate_norm_stats(state, d, calibration, passes=config.calibration_passes)
    train_x = _pooled_features(state, d, train_images, config.batch_size)
    eval_x = _pooled_features(state, d, eval_images, config.batch_size)
    return _softmax_probe(
        train_x, np.asarray(train_data.labels), eval_x, np.asarray(eval_data.labels), config
    )


# ---------------------------------------------------------------------------
# Ranking power of the selection metric.
# ---------------------------------------------------------------------------

@dataclass
class RankReport:
    """Per-subnet metric/accuracy pairs and their rank correlation."""

    task: str
    rows: list[dict]
    spearman_rho: float
    seed: int
    config_digest: str

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "spearman_rho": self.spearman_rho,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "rows": self.rows,
        }

    def save(self, path: "str | Path") -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def save_table(self, path: "str | Path") -> None:
        lines = ["descriptor\tflops\tmetric\taccuracy"]
        for row in self.rows:
            d = row["descriptor"]
            lines.append(
                f"{d['stem_width']}/{d['stage_widths']}/{d['stage_depths']}"
                f"\t{row['flops']}\t{row['metric']:.6f}\t{row['accuracy']:.6f}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def save_plot(self, path: "str | Path") -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        metric = [row["metric"] for row in self.rows]
        accuracy = [row["accuracy"] for row in self.rows]
        ax.scatter(metric, accuracy)
        ax.set_xlabel("selection metric")
        ax.set_ylabel("probe accuracy")
        ax.set_title(f"rank correlation {self.spearman_rho:.3f}")
        fig.tight_layout()
        # Strip writer metadata so repeated runs emit identical bytes.
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)


def sample_across_budgets(
    space: ModelSpace,
    budget: BudgetSpec,
    count: int,
    rng: np.random.Generator,
    max_tries: int = 1000,
) -> list[ArchDescriptor]:
    """Round-robin the budget groups so samples cover the FLOPs range.

    Groups that rejection sampling cannot hit fall back to the full window.
    """
    windows: list[BudgetSpec] = []
    if len(budget.boundaries) >= 2:
        for lo, hi in zip(budget.boundaries, budget.boundaries[1:]):
            windows.append(BudgetSpec(lo, hi))
    else:
        windows.append(BudgetSpec(budget.lower, budget.upper))
    out: list[ArchDescriptor] = []
    for i in range(count):
        window = windows[i % len(windows)]
        try:
            out.append(space.sample_in_budget(rng, window, max_tries))
        except BudgetExhaustedError:
            out.append(
                space.sample_in_budget(rng, BudgetSpec(budget.lower, budget.upper), max_tries)
            )
    return out


def ranking_experiment(
    state: SupernetState,
    spec: SearchSpec,
    train_data,
    eval_data,
    n_subnets: int = 12,
    probe: "ProbeConfig | None" = None,
    config_digest: str = "",
) -> RankReport:
    """Metric-vs-probe rank agreement over subnets spread across budgets.

    The metric column is produced by the same scoring path the search uses,
    on spec.dataset; probes are trained on `train_data` and scored on
    `eval_data`.
    """
    if n_subnets < 2:
        raise ValueError(f"need at least two subnets, got {n_subnets}")
    probe = probe or ProbeConfig()
    rng = stream_rng(spec.seed, STREAM_RANK)
    descriptors = sample_across_budgets(
        state.space, spec.budget, n_subnets, rng, spec.max_sample_tries
    )
    metric = score_candidates(state, spec, descriptors)
    accuracy = np.array(
        [linear_probe(state, d, train_data, eval_data, probe) for d in descriptors]
    )
    rho = spearman(metric, accuracy)
    rows = [
        {
            "descriptor": d.to_dict(),
            "flops": flops(
                d, state.space.input_resolution,
                expansion=state.space.expansion, stem_plan=state.space.stem_plan,
            ),
            "metric": float(metric[i]),
            "accuracy": float(accuracy[i]),
        }
        for i, d in enumerate(descriptors)
    ]
    return RankReport(
        task=spec.task.value,
        rows=rows,
        spearman_rho=rho,
        seed=spec.seed,
        config_digest=config_digest,
    )


# ---------------------------------------------------------------------------
# Fixed-teacher ablation.
# ---------------------------------------------------------------------------

@dataclass
class AblationReport:
    """Paired probe accuracies: teacher fixed at largest vs mirroring."""

    descriptor: dict
    rows: list[dict]
    median_delta: float

    def to_dict(self) -> dict:
        return {
            "descriptor": self.descriptor,
            "median_delta": self.median_delta,
            "rows": self.rows,
        }

    def save(self, path: "str | Path") -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def fixed_teacher_ablation(
    space: ModelSpace,
    ssl_images: np.ndarray,
    probe_train,
    probe_eval,
    train_config: TrainConfig,
    probe_config: "ProbeConfig | None" = None,
    seeds: tuple = (0, 1, 2),
    descriptor: "ArchDescriptor | None" = None,
    embed_dim: int = 128,
    projection_hidden: int = 512,
) -> AblationReport:
    """Train both arms per seed, then probe one canonical mid-size subnet.

    Everything except the teacher-architecture rule is identical within a
    seed, so the per-seed delta isolates the fixed-teacher effect.
    """
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    probe_config = probe_config or ProbeConfig()
    target = descriptor or space.midpoint()
    rows = []
    for seed in seeds:
        accuracies = {}
        for fixed in (True, False):
            config = replace(train_config, seed=int(seed), fixed_teacher=fixed)
            state = build_supernet(
                space,
                embed_dim=embed_dim,
                seed=int(seed),
                projection_hidden=projection_hidden,
            )
            train(state, ssl_images, config)
            accuracies[fixed] = linear_probe(
                state, target, probe_train, probe_eval, probe_config
            )
        rows.append(
            {
                "seed": int(seed),
                "fixed_accuracy": accuracies[True],
                "unfixed_accuracy": accuracies[False],
                "delta": accuracies[True] - accuracies[False],
            }
        )
    return AblationReport(
        descriptor=target.to_dict(),
        rows=rows,
        median_delta=float(np.median([row["delta"] for row in rows])),
    )
