"""Sparse-coding sandbox for the dense-mixture argument.

Data follow x = M z + noise with k-sparse z and an orthonormal dictionary M.
A two-layer symmetric ReLU network is trained clean for T steps, then
adversarially (l2 ball of radius tau) for T' more, in two arms that share
initialisation and noise: the uncompressed arm ("U") and a compressed arm
("RL-C") in which the neurons with the weakest dominant-feature projection are
zeroed and frozen when the adversarial phase starts.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F


def random_dictionary(D: int, seed: int = 0) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((D, D)))
    return q * np.sign(np.diag(r))


@dataclass
class SparseCodingConfig:
    D: int = 64
    k: int = 3
    sigma_x: float = 0.05
    n: int = 1000
    seed: int = 0
    M: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not 1 <= self.k <= self.D:
            raise ValueError("sparsity k must satisfy 1 <= k <= D")
        if self.M is None:
            self.M = random_dictionary(self.D, self.seed)
        self.M = np.asarray(self.M, dtype=np.float64)
        if self.M.shape != (self.D, self.D):
            raise ValueError(f"dictionary must be {self.D}x{self.D}")
        if np.abs(self.M.T @ self.M - np.eye(self.D)).max() > 1e-8:
            raise ValueError("dictionary columns must be orthonormal")


@dataclass
class SparseCodingData:
    x: np.ndarray       # (n, D)
    y: np.ndarray       # (n,) in {-1, +1}
    z: np.ndarray       # (n, D), exactly k nonzeros per row
    M: np.ndarray
    planted: np.ndarray  # labelling functional on z


def generate(cfg: SparseCodingConfig) -> SparseCodingData:
    """k-sparse Rademacher codes, x = M z + N(0, sigma_x^2 I), y = sign(<w, z>)."""
    rng = np.random.default_rng(cfg.seed + 1)
    z = np.zeros((cfg.n, cfg.D))
    for row in z:
        support = rng.choice(cfg.D, size=cfg.k, replace=False)
        row[support] = rng.choice([-1.0, 1.0], size=cfg.k)
    w = rng.choice([-1.0, 1.0], size=cfg.D)
    y = np.where(z @ w >= 0, 1.0, -1.0)
    x = z @ cfg.M.T
    if cfg.sigma_x > 0:
        x = x + cfg.sigma_x * rng.standard_normal(x.shape)
    return SparseCodingData(x, y, z, cfg.M, w)


@dataclass
class ToyNetConfig:
    width: int = 128
    bias: float = 0.05
    sigma_p: float = 0.01
    init_scale: float = 0.01
    lr: float = 0.5
    attack_steps: int = 5


@dataclass
class ToyNetState:
    theta: torch.Tensor  # (N, D)
    bias: float
    sigma_p: float

    @property
    def width(self) -> int:
        return self.theta.shape[0]


@dataclass
class Decomposition:
    g: np.ndarray       # pure (dominant-column) components, (N, D)
    v: np.ndarray       # dense mixtures, (N, D)
    j_star: np.ndarray  # dominant column per neuron, (N,)

    def max_mixture(self) -> float:
        return float(np.linalg.norm(self.v, axis=1).max())


def decompose(theta, M: np.ndarray) -> Decomposition:
    theta = theta.theta if isinstance(theta, ToyNetState) else theta
    theta = np.asarray(theta.detach().numpy() if torch.is_tensor(theta) else theta, dtype=np.float64)
    coef = theta @ M  # <Theta_i, M_j>
    j = np.abs(coef).argmax(axis=1)
    c = coef[np.arange(len(theta)), j]
    g = c[:, None] * M[:, j].T
    return Decomposition(g, theta - g, j)


def pythagorean_error(theta: np.ndarray, dec: Decomposition) -> float:
    lhs = (dec.g ** 2).sum(1) + (dec.v ** 2).sum(1)
    return float(np.abs(lhs - (theta ** 2).sum(1)).max())


def network(theta, x, rho, bias):
    """sum_i ReLU(<theta_i, x> + rho_i - b) - ReLU(-<theta_i, x> + rho_i - b)."""
    pre = x @ theta.T
    return (F.relu(pre + rho - bias) - F.relu(-pre + rho - bias)).sum(1)


def _loss(theta, x, y, rho, bias):
    return F.softplus(-y * network(theta, x, rho, bias)).mean()


def _l2_attack(theta, x, y, rho, bias, tau, steps):
    delta = torch.zeros_like(x)
    if tau == 0:
        return delta
    step = 2.5 * tau / steps
    for _ in range(steps):
        delta.requires_grad_(True)
        (g,) = torch.autograd.grad(_loss(theta, x + delta, y, rho, bias), delta)
        g = g / g.norm(dim=1, keepdim=True).clamp_min(1e-12)
        delta = delta.detach() + step * g
        norm = delta.norm(dim=1, keepdim=True)
        delta = delta * torch.clamp(tau / norm.clamp_min(1e-12), max=1.0)
    return delta.detach()


@dataclass
class ArmTrace:
    max_mixture: list
    pythagorean_max_error: float
    final_theta: np.ndarray
    pruned: list


def _run_arm(data: SparseCodingData, net: ToyNetConfig, T: int, T_adv: int, tau: float,
             compression: float, seed: int) -> ArmTrace:
    x = torch.from_numpy(data.x)
    y = torch.from_numpy(data.y)
    D = x.shape[1]
    g = torch.Generator().manual_seed(seed)
    theta = net.init_scale * torch.randn(net.width, D, generator=g, dtype=torch.float64)
    mask = torch.ones(net.width, 1, dtype=torch.float64)
    trace, worst, pruned = [], 0.0, []

    def log_step():
        nonlocal worst
        th = theta.numpy()
        dec = decompose(th, data.M)
        worst = max(worst, pythagorean_error(th, dec))
        trace.append(dec.max_mixture())

    log_step()
    for t in range(T + T_adv):
        if t == T and compression > 0:
            dec = decompose(theta.numpy(), data.M)
            strength = np.abs((theta.numpy() @ data.M)[np.arange(net.width), dec.j_star])
            n_prune = math.ceil(compression * net.width)
            pruned = sorted(int(i) for i in np.argsort(strength, kind="stable")[:n_prune])
            mask[pruned] = 0.0
            theta = theta * mask
        rho = net.sigma_p * torch.randn(len(x), net.width, generator=g, dtype=torch.float64)
        inputs = x
        if t >= T:
            inputs = x + _l2_attack(theta, x, y, rho, net.bias, tau, net.attack_steps)
        theta = theta.detach().requires_grad_(True)
        loss = _loss(theta, inputs, y, rho, net.bias)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"toy network diverged at step {t}")
        (grad,) = torch.autograd.grad(loss, theta)
        theta = (theta - net.lr * grad * mask).detach()
        log_step()
    return ArmTrace(trace, worst, theta.numpy(), pruned)


@dataclass
class MixtureReport:
    seed: int
    T: int
    T_prime: int
    tau: float
    lr: float
    compression: float
    trajectory_U: list
    trajectory_RLC: list
    pythagorean_max_error: float
    pruned: list

    @property
    def final_U(self) -> float:
        return self.trajectory_U[-1]

    @property
    def final_RLC(self) -> float:
        return self.trajectory_RLC[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["final_max_v"] = {"U": self.final_U, "RL-C": self.final_RLC}
        return d


def train_arms(data: SparseCodingData, net: ToyNetConfig, T: int, T_prime: int, tau: float,
               compression: float, seed: int = 0) -> MixtureReport:
    if not 0 <= compression < 1:
        raise ValueError("compression must lie in [0, 1)")
    if T < 1 or T_prime < 1:
        raise ValueError("T and T' must be >= 1")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    u = _run_arm(data, net, T, T_prime, tau, 0.0, seed)
    c = _run_arm(data, net, T, T_prime, tau, compression, seed)
    return MixtureReport(seed, T, T_prime, tau, net.lr, compression, u.max_mixture, c.max_mixture,
                         max(u.pythagorean_max_error, c.pythagorean_max_error), c.pruned)


def run_seeds(sc: SparseCodingConfig, net: ToyNetConfig, T: int, T_prime: int, tau: float,
              compression: float, seeds, out_dir: str | Path | None = None) -> list[MixtureReport]:
    """One report per seed; each seed draws its own dictionary, data and initialisation."""
    reports = []
    for seed in seeds:
        cfg = SparseCodingConfig(sc.D, sc.k, sc.sigma_x, sc.n, seed)
        reports.append(train_arms(generate(cfg), net, T, T_prime, tau, compression, seed))
    if out_dir is not None:
        write_reports(reports, out_dir)
    return reports


def write_reports(reports, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        (out / f"{r.seed}.json").write_text(json.dumps(r.to_dict(), indent=1))
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "arm", "final_max_v", "T", "T_prime", "tau", "compression"])
        for r in reports:
            for arm, v in (("U", r.final_U), ("RL-C", r.final_RLC)):
                w.writerow([r.seed, arm, repr(v), r.T, r.T_prime, r.tau, r.compression])


def median_direction(reports) -> tuple[float, float]:
    return (float(np.median([r.final_RLC for r in reports])),
            float(np.median([r.final_U for r in reports])))
