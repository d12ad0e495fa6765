"""Reward, annealing, REINFORCE updates and the meta-training / fine-tuning loops."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .arch import CompressionAction, CostReport, NetworkDescriptor, StageAction, apply_action, cost_model
from .attacks import AttackSpec
from .data import DatasetSplits, load_dataset
from .encoder import StateEmbedding, StateEncoder, encode_state, parameter_digest, stage_encodings
from .policy import ActionSample, PolicyNet, density_sum, load_policy, log_prob, sample, save_policy
from .tasks import BufferSet, TaskEmbeddings, TaskSetting, push_architecture, sample_attack, sample_dataset, sample_task, task_embeddings
from .training import ATConfig, EvalResult, ModelCache

log = logging.getLogger(__name__)


def anneal(m: int, total: int) -> float:
    if not 0 <= m <= total:
        raise ValueError(f"iteration {m} outside [0, {total}]")
    return max(0.0, 1.0 - m / total)


@dataclass(frozen=True)
class RewardRecord:
    C: float
    zeta_RL: float
    budget_CB: float
    anneal_eps: float
    acc_RL: float
    acc_teacher: float
    reward: float
    within_budget: bool


def compute_reward(acc_rl: float, acc_teacher: float, student_cost: CostReport, teacher_cost: CostReport,
                   budget_CB: float, anneal_eps: float, c_definition: str = "removed",
                   currency: str = "flops") -> RewardRecord:
    """C(2-C) * acc_rl / acc_teacher within budget, eps * (that + 1) - 1 otherwise.

    C is clipped into [0, 1] so that a student larger than its teacher earns no
    compression credit; this keeps the reward bounded below by -1.
    """
    if acc_teacher <= 0:
        raise ValueError("teacher accuracy is zero: reward normalisation undefined")
    if currency == "flops":
        size_ratio = student_cost.flops / teacher_cost.flops
    elif currency == "params":
        size_ratio = student_cost.params / teacher_cost.params
    else:
        raise ValueError(f"unknown cost currency {currency!r}")
    if c_definition == "removed":
        C = 1.0 - size_ratio
    elif c_definition == "remaining":
        C = size_ratio
    else:
        raise ValueError(f"unknown c_definition {c_definition!r}")
    C = min(max(C, 0.0), 1.0)
    zeta = float(student_cost.flops)
    score = C * (2.0 - C) * (acc_rl / acc_teacher)
    within = zeta <= budget_CB
    # eps * (score + 1) - 1 rearranged so both endpoints are exact in floating point
    reward = score if within else anneal_eps * score - (1.0 - anneal_eps)
    return RewardRecord(C, zeta, float(budget_CB), anneal_eps, acc_rl, acc_teacher, reward, within)


@dataclass
class TrajectoryStep:
    task: TaskSetting
    state: StateEmbedding
    sample: ActionSample
    reward: RewardRecord


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    max_len: Optional[int] = None

    def append(self, step: TrajectoryStep):
        if self.max_len is not None and len(self.steps) >= self.max_len:
            raise ValueError("trajectory is full")
        self.steps.append(step)

    def __len__(self):
        return len(self.steps)


def pg_objective(traj: Trajectory, policy: PolicyNet, pg_form: str = "reinforce") -> torch.Tensor:
    total = torch.zeros((), dtype=torch.float64)
    for step in traj.steps:
        out = policy(step.state.per_stage)
        term = log_prob(out, step.sample) if pg_form == "reinforce" else density_sum(out, step.sample)
        total = total + step.reward.reward * term
    return total


def vpg_update(traj: Trajectory, policy: PolicyNet, lr: float, pg_form: str = "reinforce",
               optimizer: torch.optim.Optimizer | None = None) -> PolicyNet:
    """One synchronous ascent step on sum_t r_t * log pi(a_t | s_t).

    Without ``optimizer`` the step is plain gradient ascent with rate ``lr``;
    otherwise the negated gradient is handed to ``optimizer`` (its own rate applies).
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    params = [p for p in policy.parameters()]
    grads = torch.autograd.grad(pg_objective(traj, policy, pg_form), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    if not all(torch.isfinite(g).all() for g in grads):
        for t, step in enumerate(traj.steps):
            single = Trajectory([step])
            gs = torch.autograd.grad(pg_objective(single, policy, pg_form), params, allow_unused=True)
            if not all(g is None or torch.isfinite(g).all() for g in gs):
                raise FloatingPointError(f"non-finite policy gradient at step {t}")
        raise FloatingPointError("non-finite policy gradient")
    if optimizer is not None:
        for p, g in zip(params, grads):
            p.grad = -g
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)
        return policy
    with torch.no_grad():
        for p, g in zip(params, grads):
            p.add_(lr * g)
    return policy


def make_optimizer(policy: PolicyNet, cfg: "RLConfig"):
    if cfg.optimizer == "sgd":
        return None
    return torch.optim.Adam(policy.parameters(), lr=cfg.policy_lr)


@dataclass(frozen=True)
class RLConfig:
    meta_iterations: int = 100
    steps_per_iteration: int = 5
    finetune_iterations: int = 10
    policy_lr: float = 1e-3
    reward_epochs: int = 5  # epochs of the candidate training behind each reward
    seed: int = 0
    c_definition: str = "removed"
    cost_currency: str = "flops"
    pg_form: str = "reinforce"
    optimizer: str = "adam"

    def __post_init__(self):
        if min(self.meta_iterations, self.steps_per_iteration, self.finetune_iterations) < 1:
            raise ValueError("iteration and step counts must be >= 1")
        if self.policy_lr <= 0:
            raise ValueError("policy_lr must be positive")
        if self.pg_form not in ("reinforce", "literal"):
            raise ValueError("pg_form must be 'reinforce' or 'literal'")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


class Workbench:
    """Registries plus the dataset, trained-model and embedding caches used by the RL loops."""

    def __init__(self, datasets, attacks, teachers, budgets, teacher_at: ATConfig, reward_at: ATConfig,
                 eval_size: int = 256, data_dir=None, cache_dir=None, robust_block=None, split_seed: int = 0):
        self.datasets = list(datasets)
        self.attacks = list(attacks)
        self.teachers = list(teachers)
        self.budgets = [float(b) for b in budgets]
        self.teacher_at = teacher_at
        self.reward_at = reward_at
        self.eval_size = eval_size
        self.data_dir = data_dir
        self.split_seed = split_seed
        kwargs = {} if robust_block is None else {"robust_block": robust_block}
        self.cache = ModelCache(cache_dir, **kwargs)
        self._splits: dict[str, DatasetSplits] = {}
        self._emb: dict[tuple, TaskEmbeddings] = {}

    def buffers(self) -> BufferSet:
        return BufferSet.initialize(self.datasets, self.attacks, self.teachers, self.budgets)

    def splits(self, dataset_id: str) -> DatasetSplits:
        if dataset_id not in self._splits:
            self._splits[dataset_id] = load_dataset(dataset_id, self.eval_size, self.split_seed, self.data_dir)
        return self._splits[dataset_id]

    def head(self, desc: NetworkDescriptor, dataset_id: str) -> NetworkDescriptor:
        s = self.splits(dataset_id)
        return desc.with_head(s.num_classes, s.resolution)

    def teacher(self, task: TaskSetting):
        splits = self.splits(task.dataset_id)
        return self.cache.train_and_evaluate(self.head(task.teacher, task.dataset_id), splits,
                                             self.teacher_at, AttackSpec.from_id(task.attack_id),
                                             self.split_seed)

    def embeddings(self, task: TaskSetting) -> TaskEmbeddings:
        key = (task.teacher.digest(), task.dataset_id, task.attack_id)
        if key not in self._emb:
            model, _ = self.teacher(task)
            headed = TaskSetting(task.dataset_id, task.attack_id, self.head(task.teacher, task.dataset_id),
                                 task.budget_CB)
            self._emb[key] = task_embeddings(headed, model, self.splits(task.dataset_id), seed=self.split_seed)
        return self._emb[key]

    def state(self, task: TaskSetting, encoder: StateEncoder) -> StateEmbedding:
        return encode_state(stage_encodings(task.teacher), self.embeddings(task), encoder,
                            provenance=(task.digest(), task.teacher.digest()))

    def candidate(self, desc: NetworkDescriptor, task: TaskSetting) -> EvalResult:
        _, ev = self.cache.train_and_evaluate(self.head(desc, task.dataset_id), self.splits(task.dataset_id),
                                              self.reward_at, AttackSpec.from_id(task.attack_id),
                                              self.split_seed)
        return ev

    def cost(self, desc: NetworkDescriptor, dataset_id: str) -> CostReport:
        return cost_model(self.head(desc, dataset_id))

    def encoder_samples(self) -> list[tuple[torch.Tensor, TaskEmbeddings]]:
        """(stage encodings, task embeddings) over the full teacher x dataset x attack pool."""
        out = []
        for teacher, budget in zip(self.teachers, self.budgets):
            for d in self.datasets:
                for a in self.attacks:
                    out.append((stage_encodings(teacher), self.embeddings(TaskSetting(d, a, teacher, budget))))
        return out


def _record(m, t, task, student, rec: RewardRecord, s_cost, t_cost, action: CompressionAction):
    return {
        "iter": m,
        "step": t,
        "task": {
            "dataset": task.dataset_id,
            "attack": task.attack_id,
            "teacher_hash": task.teacher.digest(),
            "budget": task.budget_CB,
        },
        "task_hash": task.digest(),
        "action": action.to_dict(),
        "teacher": task.teacher.to_dict(),
        "student": student.to_dict(),
        "costs": {
            "flops": s_cost.flops,
            "params": s_cost.params,
            "zeta": rec.zeta_RL,
            "per_stage_flops": list(s_cost.per_stage_flops),
            "teacher_flops": t_cost.flops,
            "teacher_per_stage_flops": list(t_cost.per_stage_flops),
        },
        "C": rec.C,
        "eps": rec.anneal_eps,
        "acc_rl": rec.acc_RL,
        "acc_teacher": rec.acc_teacher,
        "reward": rec.reward,
        "within_budget": rec.within_budget,
        "skipped": False,
    }


def _skipped(m, t, task: Optional[TaskSetting], exc: Exception):
    return {
        "iter": m,
        "step": t,
        "task": None if task is None else {
            "dataset": task.dataset_id,
            "attack": task.attack_id,
            "teacher_hash": task.teacher.digest(),
            "budget": task.budget_CB,
        },
        "task_hash": None if task is None else task.digest(),
        "skipped": True,
        "error": f"{type(exc).__name__}: {exc}",
    }


class RunLog:
    """Append-only records.jsonl writer; with no path records are only kept in memory."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, rec: dict):
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")


def score_action(bench: Workbench, task: TaskSetting, act: CompressionAction, eps: float, cfg: RLConfig):
    """Train, evaluate and reward the student obtained by applying ``act`` to the task's teacher."""
    _, teacher_eval = bench.teacher(task)
    student = apply_action(task.teacher, act)
    ev = bench.candidate(student, task)
    s_cost = bench.cost(student, task.dataset_id)
    t_cost = bench.cost(task.teacher, task.dataset_id)
    rec = compute_reward(ev.robust_accuracy, teacher_eval.robust_accuracy, s_cost, t_cost,
                         task.budget_CB, eps, cfg.c_definition, cfg.cost_currency)
    return student, rec, s_cost, t_cost


def _policy_step(bench, encoder, policy, opt, task, eps, cfg, gen):
    state = bench.state(task, encoder)
    out = policy(state.per_stage)
    smp = sample(out, gen)
    student, rec, s_cost, t_cost = score_action(bench, task, smp.action, eps, cfg)
    vpg_update(Trajectory([TrajectoryStep(task, state, smp, rec)]), policy, cfg.policy_lr, cfg.pg_form, opt)
    return student, rec, s_cost, t_cost, smp


@dataclass
class MetaResult:
    policy: PolicyNet
    records: list
    buffer_lengths: list
    checkpoint: Optional[Path] = None


def meta_train(cfg: RLConfig, bench: Workbench, encoder: StateEncoder, policy: PolicyNet,
               run_dir: str | Path | None = None) -> MetaResult:
    """Meta RL training: dataset and attack drawn per iteration, teacher per step."""
    if not encoder.frozen:
        raise RuntimeError("the state encoder must be pre-trained and frozen before RL")
    run_dir = Path(run_dir) if run_dir is not None else None
    runlog = RunLog(run_dir / "records.jsonl" if run_dir else None)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    enc_digest = parameter_digest(encoder)
    opt = make_optimizer(policy, cfg)
    buffers = bench.buffers()
    lengths = []
    M, T = cfg.meta_iterations, cfg.steps_per_iteration
    for m in range(1, M + 1):
        buffers.reset_architectures()
        dataset_id = sample_dataset(buffers, rng)
        attack_id = sample_attack(buffers, rng)
        eps = anneal(m, M)
        for t in range(1, T + 1):
            task = None
            try:
                task = sample_task(buffers, rng, dataset_id, attack_id)
                student, rec, s_cost, t_cost, smp = _policy_step(bench, encoder, policy, opt, task, eps, cfg, gen)
                push_architecture(buffers, student, task.budget_CB)
                runlog.write(_record(m, t, task, student, rec, s_cost, t_cost, smp.action))
            except Exception as exc:
                log.warning("iteration %d step %d skipped: %s", m, t, exc)
                runlog.write(_skipped(m, t, task, exc))
            if parameter_digest(encoder) != enc_digest:
                raise RuntimeError("state encoder parameters changed during RL")
        lengths.append(len(buffers.arch_buffer))
    ckpt = None
    if run_dir is not None:
        ckpt = run_dir / "policy.ckpt"
        save_policy(policy, ckpt)
    return MetaResult(policy, runlog.records, lengths, ckpt)


@dataclass
class FineTuneResult:
    policy: PolicyNet
    best: Optional[NetworkDescriptor]
    records: list


def fine_tune(meta_checkpoint, target: TaskSetting, cfg: RLConfig, bench: Workbench,
              encoder: StateEncoder, run_dir: str | Path | None = None) -> FineTuneResult:
    """Adapt a (meta-trained) policy to one fixed task with T = 1 for M~ iterations."""
    if isinstance(meta_checkpoint, (str, Path)):
        policy = load_policy(meta_checkpoint)
    else:
        policy = copy.deepcopy(meta_checkpoint)
    if not encoder.frozen:
        raise RuntimeError("the state encoder must be pre-trained and frozen before RL")
    run_dir = Path(run_dir) if run_dir is not None else None
    runlog = RunLog(run_dir / "records.jsonl" if run_dir else None)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(policy, cfg)
    buffers = BufferSet.initialize([target.dataset_id], [target.attack_id], [target.teacher], [target.budget_CB])
    best, best_reward = None, -np.inf
    M = cfg.finetune_iterations
    for m in range(1, M + 1):
        try:
            student, rec, s_cost, t_cost, smp = _policy_step(bench, encoder, policy, opt, target, anneal(m, M), cfg, gen)
            push_architecture(buffers, student, target.budget_CB)
            runlog.write(_record(m, 1, target, student, rec, s_cost, t_cost, smp.action))
            if rec.reward > best_reward:
                best, best_reward = student, rec.reward
        except Exception as exc:
            log.warning("fine-tune iteration %d skipped: %s", m, exc)
            runlog.write(_skipped(m, 1, target, exc))
    if run_dir is not None:
        save_policy(policy, run_dir / "policy.ckpt")
    return FineTuneResult(policy, best, runlog.records)


def random_action(n_stages: int, rng: np.random.Generator) -> CompressionAction:
    keep = 1.0 - rng.random((n_stages, 2))  # uniform on (0, 1]
    bits = rng.random((n_stages, 2)) < 0.5
    return CompressionAction(tuple(
        StageAction(float(k[0]), float(k[1]), bool(b[0]), bool(b[1])) for k, b in zip(keep, bits)
    ))


def random_baseline(target: TaskSetting, cfg: RLConfig, bench: Workbench, seed: int = 0) -> list[dict]:
    """Uniformly random actions scored with the fine-tuning reward schedule."""
    rng = np.random.default_rng(seed)
    M = cfg.finetune_iterations
    records = []
    for m in range(1, M + 1):
        act = random_action(target.teacher.n_stages, rng)
        student, rec, s_cost, t_cost = score_action(bench, target, act, anneal(m, M), cfg)
        records.append(_record(m, 1, target, student, rec, s_cost, t_cost, act))
    return records


def within_budget_fraction(records, max_eps: float = 0.0) -> float:
    done = [r for r in records if not r["skipped"] and r["eps"] <= max_eps]
    if not done:
        return float("nan")
    return sum(r["within_budget"] for r in done) / len(done)
