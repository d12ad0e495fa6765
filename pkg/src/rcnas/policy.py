"""Multi-head actor: shared extractor, per-stage diagonal-Gaussian head for the
(width, depth) keep fractions and Bernoulli head for the (downsample, robust) bits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .arch import CompressionAction, StageAction

POLICY_FORMAT = "rcnas-policy"
POLICY_VERSION = 1

VAR_FLOOR = 1e-4
PROB_CLAMP = 1e-6
_LOG_2PI = math.log(2 * math.pi)


@dataclass
class PolicyOutput:
    mean: torch.Tensor  # (N, 2)
    var: torch.Tensor   # (N, 2), > 0
    prob: torch.Tensor  # (N, 2), in (0, 1)


@dataclass
class ActionSample:
    action: CompressionAction
    raw_gauss: torch.Tensor  # alpha, (N, 2)
    bits: torch.Tensor       # beta, (N, 2) in {0, 1}
    log_prob: float


class PolicyNet(nn.Module):
    def __init__(self, d_state: int = 64, hidden: int = 64, seed: int = 0):
        super().__init__()
        self.d_state = d_state
        self.hidden = hidden
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.extractor = nn.Sequential(
                nn.Linear(d_state, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh()
            )
            self.mean_head = nn.Linear(hidden, 2)
            self.var_head = nn.Linear(hidden, 2)
            self.bern_head = nn.Linear(hidden, 2)
        self.double()

    def forward(self, states: torch.Tensor) -> PolicyOutput:
        feat = self.extractor(states)
        mean = self.mean_head(feat)
        var = F.softplus(self.var_head(feat)) + VAR_FLOOR
        prob = torch.sigmoid(self.bern_head(feat)).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
        out = PolicyOutput(mean, var, prob)
        for name in ("mean", "var", "prob"):
            if not torch.isfinite(getattr(out, name)).all():
                raise FloatingPointError(f"non-finite policy {name}")
        return out


def forward(policy: PolicyNet, state) -> PolicyOutput:
    states = state.per_stage if hasattr(state, "per_stage") else state
    if not torch.isfinite(states).all():
        raise ValueError("policy input state is not finite")
    return policy(states)


def gaussian_log_density(alpha, mean, var):
    return -0.5 * (_LOG_2PI + torch.log(var) + (alpha - mean) ** 2 / var)


def bernoulli_log_mass(bits, prob):
    return bits * torch.log(prob) + (1 - bits) * torch.log1p(-prob)


def log_prob(out: PolicyOutput, sample: ActionSample) -> torch.Tensor:
    """Joint log-density over all stages and heads, in alpha space; differentiable."""
    if ((out.prob <= 0) | (out.prob >= 1)).any():
        raise ValueError("Bernoulli probabilities must lie strictly inside (0, 1)")
    return (gaussian_log_density(sample.raw_gauss, out.mean, out.var).sum()
            + bernoulli_log_mass(sample.bits, out.prob).sum())


def density_sum(out: PolicyOutput, sample: ActionSample) -> torch.Tensor:
    """Sum over stages of N(alpha_i) + Ber(beta_i) as densities (not logs)."""
    gauss = gaussian_log_density(sample.raw_gauss, out.mean, out.var).sum(1).exp()
    bern = bernoulli_log_mass(sample.bits, out.prob).sum(1).exp()
    return (gauss + bern).sum()


def sample(out: PolicyOutput, generator: torch.Generator | None = None,
           noise: torch.Tensor | None = None, uniforms: torch.Tensor | None = None) -> ActionSample:
    """alpha = mu + sigma * xi, beta ~ Ber(p); ``noise`` / ``uniforms`` override the draws."""
    with torch.no_grad():
        mean, var, prob = out.mean.detach(), out.var.detach(), out.prob.detach()
        if noise is None:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        if uniforms is None:
            uniforms = torch.rand(prob.shape, generator=generator, dtype=prob.dtype)
        alpha = mean + var.sqrt() * noise
        bits = (uniforms < prob).to(prob.dtype)
        # sigmoid underflows to 0 below alpha ~ -745; keep fractions must stay > 0
        keep = torch.sigmoid(alpha).clamp_min(torch.finfo(alpha.dtype).tiny)
    stages = tuple(
        StageAction(float(k[0]), float(k[1]), bool(b[0]), bool(b[1])) for k, b in zip(keep, bits)
    )
    s = ActionSample(CompressionAction(stages), alpha, bits, 0.0)
    with torch.no_grad():
        s.log_prob = float(log_prob(PolicyOutput(mean, var, prob), s))
    return s


def save_policy(policy: PolicyNet, path: str | Path) -> None:
    torch.save({
        "format": POLICY_FORMAT,
        "version": POLICY_VERSION,
        "config": {"d_state": policy.d_state, "hidden": policy.hidden},
        "state_dict": policy.state_dict(),
    }, path)


def load_policy(path: str | Path) -> PolicyNet:
    ckpt = torch.load(path, weights_only=True)
    if ckpt.get("format") != POLICY_FORMAT or ckpt.get("version") != POLICY_VERSION:
        raise ValueError(f"{path} is not a version-{POLICY_VERSION} policy checkpoint")
    policy = PolicyNet(**ckpt["config"])
    policy.load_state_dict(ckpt["state_dict"])
    return policy
