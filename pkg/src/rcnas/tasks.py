"""Task settings, the data / attack / architecture buffers, and the per-instance
Lipschitz (LIPS) and inference-cost (CT) profiles of a task."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .arch import NetworkDescriptor, cost_model
from .attacks import AttackSpec, attack
from .data import DatasetSplits

# FLOPs budgets paired with the registered teachers
TEACHER_BUDGETS = {
    "WRN-28-10": 5e9,
    "WRN-34-12": 10e9,
    "WRN-46-14": 20e9,
    "WRN-70-16": 40e9,
}


@dataclass(frozen=True)
class TaskSetting:
    dataset_id: str
    attack_id: str
    teacher: NetworkDescriptor
    budget_CB: float

    def __post_init__(self):
        if not self.budget_CB > 0:
            raise ValueError("budget_CB must be positive")

    def digest(self) -> str:
        payload = json.dumps([self.dataset_id, self.attack_id, self.teacher.to_json(), float(self.budget_CB)])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class BufferSet:
    """Data, attack and architecture buffers; ``budgets`` maps descriptor digests to CB."""

    data_buffer: list
    attack_buffer: list
    arch_buffer: list
    teacher_pool: tuple = ()
    budgets: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, datasets, attacks, teachers, budgets) -> "BufferSet":
        teachers = tuple(teachers)
        if not teachers:
            raise ValueError("the architecture buffer needs at least one teacher")
        budgets = [float(b) for b in budgets]
        if len(budgets) != len(teachers):
            raise ValueError("one budget per teacher is required")
        return cls(
            data_buffer=list(datasets),
            attack_buffer=list(attacks),
            arch_buffer=list(teachers),
            teacher_pool=teachers,
            budgets={t.digest(): b for t, b in zip(teachers, budgets)},
        )

    def reset_architectures(self) -> None:
        pool_digests = {t.digest() for t in self.teacher_pool}
        self.arch_buffer = list(self.teacher_pool)
        self.budgets = {k: v for k, v in self.budgets.items() if k in pool_digests}

    def budget_for(self, desc: NetworkDescriptor) -> float:
        try:
            return self.budgets[desc.digest()]
        except KeyError:
            raise KeyError(f"no budget paired with architecture {desc.digest()}") from None


def push_architecture(buffers: BufferSet, desc: NetworkDescriptor, budget: float | None = None) -> BufferSet:
    """Append a descriptor; a new entry inherits ``budget`` as its paired CB."""
    buffers.arch_buffer.append(desc)
    if budget is not None:
        buffers.budgets.setdefault(desc.digest(), float(budget))
    return buffers


def _pick(buffer, rng, name):
    if not buffer:
        raise ValueError(f"cannot sample from an empty {name} buffer")
    return buffer[int(rng.integers(len(buffer)))]


def sample_dataset(buffers: BufferSet, rng: np.random.Generator) -> str:
    return _pick(buffers.data_buffer, rng, "data")


def sample_attack(buffers: BufferSet, rng: np.random.Generator) -> str:
    return _pick(buffers.attack_buffer, rng, "attack")


def sample_task(buffers: BufferSet, rng: np.random.Generator, dataset_id: str | None = None,
                attack_id: str | None = None) -> TaskSetting:
    """Uniform, independent draws from each buffer; fixed ids skip their draw."""
    if dataset_id is None:
        dataset_id = sample_dataset(buffers, rng)
    if attack_id is None:
        attack_id = sample_attack(buffers, rng)
    teacher = _pick(buffers.arch_buffer, rng, "architecture")
    return TaskSetting(dataset_id, attack_id, teacher, buffers.budget_for(teacher))


@dataclass
class TaskEmbeddings:
    lips: np.ndarray  # raw per-instance Lipschitz ratios
    ct: np.ndarray    # raw per-instance GFLOPs
    degenerate: int = 0

    def __post_init__(self):
        if len(self.lips) != len(self.ct):
            raise ValueError("lips and ct must have the same length")
        if not (np.isfinite(self.lips).all() and np.isfinite(self.ct).all()):
            raise ValueError("task embeddings must be finite")


def lipschitz_profile(model, x: torch.Tensor, x_adv: torch.Tensor) -> tuple[np.ndarray, int]:
    """||f(x_adv) - f(x)||_1 / ||x_adv - x||_inf per instance; zero denominators give 0."""
    with torch.no_grad():
        num = (model(x_adv) - model(x)).abs().flatten(1).sum(1).double()
    den = (x_adv - x).abs().flatten(1).max(1).values.double()
    degenerate = den == 0
    lips = torch.where(degenerate, torch.zeros_like(num), num / torch.where(degenerate, 1.0, den))
    return lips.numpy(), int(degenerate.sum())


def task_embeddings(task: TaskSetting, trained_teacher, splits: DatasetSplits, seed: int = 0,
                    batch_size: int = 256, spec: AttackSpec | None = None) -> TaskEmbeddings:
    spec = spec or AttackSpec.from_id(task.attack_id)
    g = torch.Generator().manual_seed(seed)
    trained_teacher.eval()
    lips, degenerate = [], 0
    ev = splits.eval
    for i in range(0, len(ev), batch_size):
        x, y = ev.x[i:i + batch_size], ev.y[i:i + batch_size]
        adv = attack(trained_teacher, x, y, spec, g).inputs
        part, d = lipschitz_profile(trained_teacher, x, adv)
        lips.append(part)
        degenerate += d
    gflops = cost_model(task.teacher.with_head(splits.num_classes, splits.resolution)).flops / 1e9
    return TaskEmbeddings(np.concatenate(lips), np.full(len(ev), gflops), degenerate)


@dataclass
class Standardizer:
    """Pooled mean / std used to standardise LIPS or CT vectors before encoding."""

    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, vectors, floor: float = 1e-8) -> "Standardizer":
        flat = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in vectors])
        std = float(flat.std())
        return cls(float(flat.mean()), std if std > floor else 1.0)

    def __call__(self, v) -> np.ndarray:
        return (np.asarray(v, dtype=np.float64) - self.mean) / self.std
