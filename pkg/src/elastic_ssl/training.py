"""Siamese self-supervised training of the elastic supernet.

Each iteration: augment one batch into two views, embed the target view once
with the frozen largest-architecture teacher, embed the online view with a
small set of sampled subnets plus the largest, sum the criterion losses, take
a single optimizer step, enqueue the teacher keys, then advance the teacher
EMA.  All randomness is a pure function of (seed, iteration), so resuming
from a checkpoint is bit-compatible with an uninterrupted run.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .archspace import ArchDescriptor, ModelSpace
from .augment import augment_batch
from .container import read_container, write_container
from .seeding import (
    STREAM_ARCH,
    STREAM_AUG,
    STREAM_BATCH,
    STREAM_QUEUE,
    stream_rng,
)
from .supernet import (
    FeatureBundle,
    SupernetState,
    build_supernet,
    ema_update,
)

CHECKPOINT_NAME = "checkpoint.escf"
LOSS_CURVE_NAME = "losses.csv"


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of the contrastive supernet trainer."""

    temperature: float = 0.2
    ema_momentum: float = 0.999
    queue_capacity: int = 4096
    batch_size: int = 256
    learning_rate: float = 0.03
    weight_decay: float = 7.5e-5
    momentum: float = 0.9
    iterations: int = 500
    sampled_subnets: int = 2
    seed: int = 0
    criterion: str = "infonce"
    fixed_teacher: bool = True
    checkpoint_interval: int = 0

    def validate(self) -> list[str]:
        problems = []
        if not self.temperature > 0:
            problems.append(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            problems.append(f"ema_momentum must lie in [0, 1], got {self.ema_momentum}")
        if self.queue_capacity < 1:
            problems.append(f"queue_capacity must be >= 1, got {self.queue_capacity}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.batch_size > self.queue_capacity:
            problems.append(
                f"batch_size ({self.batch_size}) cannot exceed queue capacity "
                f"({self.queue_capacity})"
            )
        if self.learning_rate < 0:
            problems.append(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.iterations < 0:
            problems.append(f"iterations must be >= 0, got {self.iterations}")
        if self.sampled_subnets < 0:
            problems.append(f"sampled_subnets must be >= 0, got {self.sampled_subnets}")
        if not self.criterion:
            problems.append("criterion name is empty")
        if self.checkpoint_interval < 0:
            problems.append(
                f"checkpoint_interval must be >= 0, got {self.checkpoint_interval}"
            )
        return problems

    def require_valid(self) -> None:
        problems = self.validate()
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(record) - known
        if unknown:
            raise ValueError(f"unknown train-config keys: {sorted(unknown)}")
        return cls(**record)


class KeyQueue:
    """Fixed-capacity FIFO of unit-norm negative keys (a ring buffer)."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError(f"bad queue shape: capacity={capacity}, dim={dim}")
        self.capacity = capacity
        self.dim = dim
        self._data = torch.zeros(capacity, dim)
        self._size = 0
        self._head = 0
        self.total_enqueued = 0

    def __len__(self) -> int:
        return self._size

    @classmethod
    def warmed(cls, capacity: int, dim: int, rng: np.random.Generator) -> "KeyQueue":
        """Queue prefilled to capacity with random unit vectors."""
        queue = cls(capacity, dim)
        vectors = rng.normal(size=(capacity, dim))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        queue.enqueue(torch.from_numpy(vectors.astype(np.float32)))
        return queue

    def enqueue(self, keys: Tensor) -> None:
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ValueError(
                f"expected [B, {self.dim}] keys, got {tuple(keys.shape)}"
            )
        count = keys.shape[0]
        if count < 1 or count > self.capacity:
            raise ValueError(
                f"batch of {count} keys does not fit capacity {self.capacity}"
            )
        keys = keys.detach().to(torch.float32)
        norms = keys.norm(dim=1)
        if not torch.all((norms - 1.0).abs() <= 1e-4):
            raise ValueError("queue keys must be unit-norm")
        slots = (self._head + torch.arange(count)) % self.capacity
        self._data[slots] = keys
        self._head = (self._head + count) % self.capacity
        self._size = min(self._size + count, self.capacity)
        self.total_enqueued += count

    def snapshot(self) -> Tensor:
        """Entries ordered oldest to newest; a copy, safe to hold."""
        if self._size < self.capacity:
            return self._data[: self._size].clone()
        return torch.cat([self._data[self._head :], self._data[: self._head]]).clone()


def info_nce(
    z_s: Tensor,
    z_t: Tensor,
    queue: "KeyQueue | Tensor",
    temperature: float,
) -> Tensor:
    """Contrastive loss with one positive pair and queued negatives.

    Accepts single vectors [D] or batches [B, D]; a batch returns the mean of
    the per-sample losses.  z_t and the queue never receive gradients.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    snapshot = queue.snapshot() if isinstance(queue, KeyQueue) else queue
    if snapshot is None or snapshot.numel() == 0:
        raise ValueError("negative queue is empty")
    single = z_s.ndim == 1
    zs = z_s.unsqueeze(0) if single else z_s
    zt = z_t.unsqueeze(0) if single else z_t
    if zs.shape != zt.shape:
        raise ValueError(f"shape mismatch: {tuple(zs.shape)} vs {tuple(zt.shape)}")
    positive = (zs * zt.detach()).sum(dim=1, keepdim=True)
    negatives = zs @ snapshot.detach().to(zs.dtype).T
    logits = torch.cat([positive, negatives], dim=1) / temperature
    loss = torch.logsumexp(logits, dim=1) - logits[:, 0]
    return loss.mean()


# ---------------------------------------------------------------------------
# Criterion registry: (teacher_z, student bundle, queue snapshot, temperature)
# -> scalar loss.  Dense criteria can use the stage maps in the bundle.
# ---------------------------------------------------------------------------

CriterionFn = Callable[[Tensor, FeatureBundle, Tensor, float], Tensor]

_CRITERIA: dict[str, CriterionFn] = {}


def register_criterion(name: str, fn: "CriterionFn | None" = None):
    """Register a loss under `name`; usable as a decorator."""

    def _register(f: CriterionFn) -> CriterionFn:
        _CRITERIA[name] = f
        return f

    return _register(fn) if fn is not None else _register


def get_criterion(name: str) -> CriterionFn:
    try:
        return _CRITERIA[name]
    except KeyError:
        raise ValueError(
            f"unknown criterion {name!r}; registered: {sorted(_CRITERIA)}"
        ) from None


def list_criteria() -> list[str]:
    return sorted(_CRITERIA)


@register_criterion("infonce")
def _infonce_criterion(
    teacher_z: Tensor, student: FeatureBundle, snapshot: Tensor, temperature: float
) -> Tensor:
    return info_nce(student.z, teacher_z, snapshot, temperature)


# ---------------------------------------------------------------------------
# Stepping.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepReport:
    """What one iteration did: sampled subnets and their losses."""

    iteration: int
    omega: tuple[ArchDescriptor, ...]
    losses: tuple[float, ...]
    total: float
    learning_rate: float


def cosine_lr(base_lr: float, iteration: int, total_iterations: int) -> float:
    if total_iterations <= 0:
        return base_lr
    frac = min(max(iteration / total_iterations, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def ensure_queue(state: SupernetState, config: TrainConfig) -> KeyQueue:
    """Attach the warm-started negative queue on first use."""
    if state.queue is None:
        rng = stream_rng(config.seed, STREAM_QUEUE)
        state.queue = KeyQueue.warmed(config.queue_capacity, state.embed_dim, rng)
    return state.queue


def make_optimizer(state: SupernetState, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        state.student.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def sample_omega(state: SupernetState, config: TrainConfig, iteration: int
                 ) -> tuple[ArchDescriptor, ...]:
    """Subnets trained this iteration: independent draws plus the largest."""
    rng = stream_rng(config.seed, STREAM_ARCH, iteration)
    sampled = tuple(state.space.sample(rng) for _ in range(config.sampled_subnets))
    return (*sampled, state.space.largest())


def train_step(
    state: SupernetState,
    images: Tensor,
    config: TrainConfig,
    optimizer: torch.optim.Optimizer,
) -> StepReport:
    """One full iteration on a raw [B, 3, H, W] batch in [0, 1]."""
    config.require_valid()
    queue = ensure_queue(state, config)
    iteration = state.iteration
    largest = state.space.largest()

    if isinstance(images, np.ndarray):
        images = torch.from_numpy(np.ascontiguousarray(images))
    aug_rng = stream_rng(config.seed, STREAM_AUG, iteration)
    view_s, view_t = augment_batch(images, aug_rng)
    omega = sample_omega(state, config, iteration)

    with torch.no_grad():
        z_largest = state.teacher(view_t, largest, train_norm=True).z
        teacher_z: dict[ArchDescriptor, Tensor] = {}
        for arch in omega:
            if config.fixed_teacher or arch == largest:
                teacher_z[arch] = z_largest
            elif arch not in teacher_z:
                # Ablation arm: the teacher mirrors the student architecture.
                teacher_z[arch] = state.teacher(view_t, arch, train_norm=True).z

    snapshot = queue.snapshot()
    criterion = get_criterion(config.criterion)
    losses: list[float] = []
    total: Tensor | None = None
    for arch in omega:
        bundle = state.student(view_s, arch, train_norm=True)
        loss = criterion(teacher_z[arch], bundle, snapshot, config.temperature)
        losses.append(float(loss.detach()))
        total = loss if total is None else total + loss

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    queue.enqueue(z_largest)
    ema_update(state, config.ema_momentum)
    state.iteration = iteration + 1
    return StepReport(
        iteration=iteration,
        omega=omega,
        losses=tuple(losses),
        total=float(sum(losses)),
        learning_rate=optimizer.param_groups[0]["lr"],
    )


def batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> np.ndarray:
    """Deterministic shuffled-batch schedule; a pure function of the inputs."""
    per_epoch = n // batch_size
    if per_epoch < 1:
        raise ValueError(f"dataset of {n} images smaller than one batch ({batch_size})")
    epoch, slot = divmod(iteration, per_epoch)
    perm = stream_rng(seed, STREAM_BATCH, epoch).permutation(n)
    return perm[slot * batch_size : (slot + 1) * batch_size]


@dataclass
class TrainResult:
    state: SupernetState
    reports: list[StepReport]
    checkpoint_path: "Path | None" = None


def train(
    state: SupernetState,
    images: np.ndarray,
    config: TrainConfig,
    run_dir: "str | Path | None" = None,
    optimizer_momentum: "dict | None" = None,
) -> TrainResult:
    """Run iterations state.iteration..config.iterations over `images`.

    `images` is the raw [N, 3, H, W] float array in [0, 1].  When `run_dir`
    is given, appends the loss curve and writes interval/final checkpoints.
    """
    config.require_valid()
    ensure_queue(state, config)
    optimizer = make_optimizer(state, config)
    if optimizer_momentum:
        _restore_momentum(state, optimizer, optimizer_momentum)
    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
    reports: list[StepReport] = []
    n = images.shape[0]
    for iteration in range(state.iteration, config.iterations):
        for group in optimizer.param_groups:
            group["lr"] = cosine_lr(config.learning_rate, iteration, config.iterations)
        batch = torch.from_numpy(
            np.ascontiguousarray(images[batch_indices(config.seed, iteration, n, config.batch_size)])
        )
        report = train_step(state, batch, config, optimizer)
        reports.append(report)
        if run_path is not None:
            _append_loss_row(run_path / LOSS_CURVE_NAME, report, config)
            if (
                config.checkpoint_interval > 0
                and report.iteration + 1 < config.iterations
                and (report.iteration + 1) % config.checkpoint_interval == 0
            ):
                save_checkpoint(
                    run_path / f"checkpoint-{report.iteration + 1:06d}.escf",
                    state, config, optimizer,
                )
    checkpoint_path = None
    if run_path is not None:
        checkpoint_path = run_path / CHECKPOINT_NAME
        save_checkpoint(checkpoint_path, state, config, optimizer)
    return TrainResult(state=state, reports=reports, checkpoint_path=checkpoint_path)


def _append_loss_row(path: Path, report: StepReport, config: TrainConfig) -> None:
    new_file = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            subnet_cols = [f"loss_{i}" for i in range(config.sampled_subnets)]
            writer.writerow(["iteration", *subnet_cols, "loss_largest", "total"])
        writer.writerow(
            [report.iteration, *[f"{v:.8f}" for v in report.losses], f"{report.total:.8f}"]
        )


def read_loss_curve(path: "str | Path") -> np.ndarray:
    """Load the totals column of a loss curve as a float array."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(row["total"]) for row in rows])


# ---------------------------------------------------------------------------
# Checkpointing.
# ---------------------------------------------------------------------------

def _restore_momentum(state: SupernetState, optimizer: torch.optim.SGD,
                      buffers: dict) -> None:
    named = dict(state.student.named_parameters())
    for name, values in buffers.items():
        param = named.get(name)
        if param is None:
            raise ValueError(f"momentum buffer for unknown parameter {name!r}")
        optimizer.state[param] = {
            "momentum_buffer": torch.from_numpy(np.asarray(values, dtype=np.float32).copy())
        }


def save_checkpoint(
    path: "str | Path",
    state: SupernetState,
    config: "TrainConfig | None" = None,
    optimizer: "torch.optim.Optimizer | None" = None,
) -> None:
    """Full training state: both parameter sets, queue, momentum, counters."""
    tensors: dict[str, np.ndarray] = {}
    for name, param in state.student.named_parameters():
        tensors[f"student/{name}"] = param.detach().numpy()
    for name, param in state.teacher.named_parameters():
        tensors[f"teacher/{name}"] = param.detach().numpy()
    queue_meta = None
    if state.queue is not None:
        tensors["queue/entries"] = state.queue._data.numpy()
        queue_meta = {
            "capacity": state.queue.capacity,
            "dim": state.queue.dim,
            "size": len(state.queue),
            "head": state.queue._head,
            "total_enqueued": state.queue.total_enqueued,
        }
    if optimizer is not None:
        named = list(state.student.named_parameters())
        for name, param in named:
            entry = optimizer.state.get(param)
            if entry and entry.get("momentum_buffer") is not None:
                tensors[f"optimizer/{name}/momentum"] = (
                    entry["momentum_buffer"].detach().numpy()
                )
    meta = {
        "kind": "checkpoint",
        "space": state.space.to_dict(),
        "embed_dim": state.embed_dim,
        "projection_hidden": state.student.projection_hidden,
        "seed": state.seed,
        "iteration": state.iteration,
        "queue": queue_meta,
        "train_config": config.to_dict() if config is not None else None,
    }
    write_container(path, meta, tensors)


def load_checkpoint(path: "str | Path") -> tuple[SupernetState, dict]:
    """Rebuild a SupernetState; returns (state, extras).

    extras carries "optimizer_momentum" (name -> array, possibly empty) and
    "train_config" (dict or None) for resumption.
    """
    meta, tensors = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path} is not a checkpoint container")
    space = ModelSpace.from_dict(meta["space"])
    state = build_supernet(
        space,
        embed_dim=meta["embed_dim"],
        seed=meta["seed"],
        projection_hidden=meta.get("projection_hidden", 512),
    )
    with torch.no_grad():
        for branch, net in (("student", state.student), ("teacher", state.teacher)):
            for name, param in net.named_parameters():
                key = f"{branch}/{name}"
                if key not in tensors:
                    raise ValueError(f"checkpoint missing tensor {key!r}")
                param.copy_(torch.from_numpy(tensors[key]))
    state.iteration = int(meta["iteration"])
    queue_meta = meta.get("queue")
    if queue_meta is not None:
        queue = KeyQueue(queue_meta["capacity"], queue_meta["dim"])
        queue._data = torch.from_numpy(tensors["queue/entries"].copy())
        queue._size = int(queue_meta["size"])
        queue._head = int(queue_meta["head"])
        queue.total_enqueued = int(queue_meta["total_enqueued"])
        state.queue = queue
    momentum = {}
    prefix = "optimizer/"
    for key, value in tensors.items():
        if key.startswith(prefix) and key.endswith("/momentum"):
            momentum[key[len(prefix) : -len("/momentum")]] = value
    extras = {
        "optimizer_momentum": momentum,
        "train_config": meta.get("train_config"),
    }
    return state, extras
