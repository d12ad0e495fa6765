"""l-inf adversarial example generation: FGSM, PGD, margin-loss (CW) PGD and
externally registered providers."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_RADIUS = 8 / 255
BALL_TOL = 1e-6

_DEFAULT_STEPS = {"pgd": 20, "cw": 40}
_DEFAULT_LOSS = {"fgsm": "cross_entropy", "pgd": "cross_entropy", "cw": "cw_margin"}
_ID_PATTERN = re.compile(r"^(clean|fgsm|pgd|cw)(\d*)$")


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "pgd"
    radius: float = DEFAULT_RADIUS
    steps: Optional[int] = None
    step_size: Optional[float] = None
    loss: Optional[str] = None
    random_start: bool = True

    def __post_init__(self):
        if not (self.kind in ("clean", "fgsm", "pgd", "cw") or self.kind.startswith("external:")):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.radius < 0:
            raise ValueError("attack radius must be >= 0")
        if self.steps is None:
            object.__setattr__(self, "steps", _DEFAULT_STEPS.get(self.kind, 1))
        if self.kind in ("pgd", "cw") and self.steps < 1:
            raise ValueError("iterative attacks need steps >= 1")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.radius / 4)
        if self.loss is None:
            object.__setattr__(self, "loss", _DEFAULT_LOSS.get(self.kind, "cross_entropy"))
        if self.loss not in ("cross_entropy", "cw_margin", "kl"):
            raise ValueError(f"unknown attack loss {self.loss!r}")

    @property
    def id(self) -> str:
        if self.kind in ("pgd", "cw"):
            return f"{self.kind}{self.steps}"
        return self.kind

    @classmethod
    def from_id(cls, attack_id: str, radius: float = DEFAULT_RADIUS) -> "AttackSpec":
        """'clean', 'fgsm', 'pgd20', 'cw40', 'pgd' (default steps) or 'external:<name>'."""
        if attack_id.startswith("external:"):
            return cls(kind=attack_id, radius=radius)
        m = _ID_PATTERN.match(attack_id)
        if m is None:
            raise ValueError(f"unknown attack id {attack_id!r}")
        kind, steps = m.group(1), m.group(2)
        return cls(kind=kind, radius=radius, steps=int(steps) if steps else None)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "radius": self.radius,
            "steps": self.steps,
            "step_size": self.step_size,
            "loss": self.loss,
            "random_start": self.random_start,
        }


@dataclass
class AdvBatch:
    inputs: torch.Tensor
    deltas: torch.Tensor
    success_mask: torch.Tensor


ExternalProvider = Callable[[nn.Module, torch.Tensor, torch.Tensor, AttackSpec], object]
_EXTERNAL: dict[str, ExternalProvider] = {}


def register_external(name: str, provider: ExternalProvider) -> None:
    """provider(model, x, y, spec) returns an AdvBatch or a perturbed input tensor."""
    if not callable(provider):
        raise TypeError("provider must be callable")
    _EXTERNAL[name] = provider


def unregister_external(name: str) -> None:
    _EXTERNAL.pop(name, None)


def registered_externals() -> list[str]:
    return sorted(_EXTERNAL)


def _objective(logits, y, loss, clean_probs):
    if loss == "cross_entropy":
        return F.cross_entropy(logits, y, reduction="sum")
    if loss == "cw_margin":
        true = logits.gather(1, y[:, None]).squeeze(1)
        other = logits.clone()
        other.scatter_(1, y[:, None], float("-inf"))
        return (other.max(dim=1).values - true).sum()
    return F.kl_div(F.log_softmax(logits, dim=1), clean_probs, reduction="sum")


def _check_grad(grad):
    bad = ~torch.isfinite(grad.flatten(1)).all(dim=1)
    if bad.any():
        raise FloatingPointError(f"non-finite attack gradient at batch index {int(bad.nonzero()[0])}")


def _sign_ascent(model, x, y, spec, generator):
    eps = spec.radius
    clean_probs = None
    if spec.loss == "kl":
        with torch.no_grad():
            clean_probs = F.softmax(model(x), dim=1)
    if spec.kind == "fgsm":
        steps, step_size, start = 1, eps, False
    else:
        steps, step_size, start = spec.steps, spec.step_size, spec.random_start
    delta = torch.zeros_like(x)
    if start and eps > 0:
        delta = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * eps
        delta = (x + delta).clamp(0, 1) - x
    for _ in range(steps):
        delta.requires_grad_(True)
        obj = _objective(model(x + delta), y, spec.loss, clean_probs)
        (grad,) = torch.autograd.grad(obj, delta)
        _check_grad(grad)
        delta = delta.detach() + step_size * grad.sign()
        delta = delta.clamp(-eps, eps)
        delta = (x + delta).clamp(0, 1) - x
    return (x + delta.detach()).clamp(0, 1)


def validate(x: torch.Tensor, adv: torch.Tensor, radius: float) -> None:
    if adv.shape != x.shape:
        raise ValueError(f"adversarial batch shape {tuple(adv.shape)} != input shape {tuple(x.shape)}")
    if not torch.isfinite(adv).all():
        raise ValueError("adversarial batch contains non-finite values")
    linf = (adv - x).abs().flatten(1).max(dim=1).values
    if (linf > radius + BALL_TOL).any():
        i = int((linf > radius + BALL_TOL).nonzero()[0])
        raise ValueError(f"perturbation at batch index {i} leaves the l-inf ball: {float(linf[i]):.3g} > {radius:.3g}")
    if adv.min() < 0 or adv.max() > 1:
        raise ValueError("adversarial pixels fall outside [0, 1]")


def _perturb(model, x, y, spec, generator):
    if spec.kind == "clean":
        return x.clone()
    if spec.kind.startswith("external:"):
        name = spec.kind.split(":", 1)[1]
        if name not in _EXTERNAL:
            raise KeyError(f"no external attack {name!r}; registered: {registered_externals()}")
        out = _EXTERNAL[name](model, x, y, spec)
        adv = out.inputs if isinstance(out, AdvBatch) else out
        return adv.detach()
    with torch.enable_grad():
        return _sign_ascent(model, x, y, spec, generator)


def perturb(model: nn.Module, x: torch.Tensor, y: torch.Tensor, spec: AttackSpec,
            generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Validated adversarial inputs only; the model runs in eval mode throughout."""
    was_training = model.training
    model.eval()
    try:
        adv = _perturb(model, x, y, spec, generator)
        validate(x, adv, spec.radius)
    finally:
        model.train(was_training)
    return adv


def attack(model: nn.Module, x: torch.Tensor, y: torch.Tensor, spec: AttackSpec,
           generator: Optional[torch.Generator] = None) -> AdvBatch:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            clean_pred = model(x).argmax(dim=1)
        adv = _perturb(model, x, y, spec, generator)
        validate(x, adv, spec.radius)
        with torch.no_grad():
            success = model(adv).argmax(dim=1) != clean_pred
    finally:
        model.train(was_training)
    return AdvBatch(inputs=adv, deltas=adv - x, success_mask=success)


def with_radius(spec: AttackSpec, radius: float) -> AttackSpec:
    return replace(spec, radius=radius, step_size=radius / 4)
