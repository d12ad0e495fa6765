"""TRADES adversarial training, robust evaluation and a content-addressed cache of
trained models."""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F

from .arch import DEFAULT_ROBUST_BLOCK, NetworkDescriptor, materialize
from .attacks import AttackSpec, perturb
from .data import DatasetSplits, LabeledImages

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} in epoch {epoch}")
        self.epoch = epoch


def _default_inner():
    return AttackSpec(kind="pgd", steps=10, loss="kl")


@dataclass(frozen=True)
class ATConfig:
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    trades_beta: float = 6.0
    inner_attack: AttackSpec = field(default_factory=_default_inner)
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.trades_beta < 0:
            raise ValueError("trades_beta must be >= 0")
        if isinstance(self.inner_attack, dict):
            object.__setattr__(self, "inner_attack", AttackSpec(**self.inner_attack))

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "trades_beta": self.trades_beta,
            "inner_attack": self.inner_attack.to_dict(),
            "seed": self.seed,
            "augment": self.augment,
        }


@dataclass(frozen=True)
class EvalResult:
    clean_accuracy: float
    robust_accuracy: float
    attack_id: str
    n_items: int

    def to_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "robust_accuracy": self.robust_accuracy,
            "attack_id": self.attack_id,
            "n_items": self.n_items,
        }


def _augment(x, g):
    """Random horizontal flip and 4-pixel pad-and-crop."""
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=g) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(3), x)
    padded = F.pad(x, (4, 4, 4, 4), mode="reflect")
    dx = torch.randint(0, 9, (n,), generator=g)
    dy = torch.randint(0, 9, (n,), generator=g)
    return torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])


def trades_train(desc: NetworkDescriptor, splits: DatasetSplits, cfg: ATConfig,
                 robust_block: str = DEFAULT_ROBUST_BLOCK, history: Optional[list] = None):
    """CE(f(x), y) + beta * KL(f(x) || f(x_adv)), x_adv maximising the KL term.

    When ``history`` is a list, one dict per optimisation step (epoch, loss, kl)
    is appended to it.
    """
    desc = desc.with_head(splits.num_classes, splits.resolution)
    model = materialize(desc, seed=cfg.seed, robust_block=robust_block)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    g_shuffle = torch.Generator().manual_seed(cfg.seed)
    g_attack = torch.Generator().manual_seed(cfg.seed + 1)
    data = splits.train
    n = len(data)
    use_adv = cfg.trades_beta > 0 and cfg.inner_attack.kind != "clean"
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=g_shuffle)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            x, y = data.x[idx], data.y[idx]
            if cfg.augment:
                x = _augment(x, g_shuffle)
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            kl = torch.zeros(())
            if use_adv:
                x_adv = perturb(model, x, y, cfg.inner_attack, g_attack)
                kl = F.kl_div(F.log_softmax(model(x_adv), dim=1), F.softmax(logits, dim=1),
                              reduction="batchmean")
                loss = loss + cfg.trades_beta * kl
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, float(loss))
            opt.zero_grad()
            loss.backward()
            opt.step()
            if history is not None:
                history.append({"epoch": epoch, "loss": float(loss.detach()), "kl": float(kl.detach())})
    model.eval()
    return model


@torch.no_grad()
def predict(model, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    model.eval()
    return torch.cat([model(x[i:i + batch_size]).argmax(1) for i in range(0, len(x), batch_size)])


def evaluate(model, split: LabeledImages, spec: AttackSpec, seed: int = 0,
             batch_size: int = 256) -> EvalResult:
    if len(split) == 0:
        raise ValueError("cannot evaluate on an empty split")
    g = torch.Generator().manual_seed(seed)
    model.eval()
    clean = robust = 0
    for i in range(0, len(split), batch_size):
        x, y = split.x[i:i + batch_size], split.y[i:i + batch_size]
        with torch.no_grad():
            clean += int((model(x).argmax(1) == y).sum())
        if spec.kind == "clean":
            adv = x
        else:
            adv = perturb(model, x, y, spec, g)
        with torch.no_grad():
            robust += int((model(adv).argmax(1) == y).sum())
    n = len(split)
    return EvalResult(clean / n, robust / n, spec.id, n)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def cache_key(desc: NetworkDescriptor, dataset_id: str, cfg: ATConfig,
              robust_block: str = DEFAULT_ROBUST_BLOCK, split_seed: int = 0) -> tuple[str, dict]:
    inputs = {
        "descriptor": desc.to_dict(),
        "dataset": dataset_id,
        "split_seed": split_seed,
        "at_config": cfg.to_dict(),
        "robust_block": robust_block,
        "version": CHECKPOINT_VERSION,
    }
    return hashlib.sha256(_canonical(inputs).encode()).hexdigest()[:20], inputs


@dataclass
class _Entry:
    model: torch.nn.Module
    evals: dict


class ModelCache:
    """Trained models keyed by the hash of everything that determines them.

    With a root directory, entries persist as ``<root>/<key>/{model.ckpt, eval.json,
    inputs.json}``; a stored entry whose recomputed hash disagrees with its key
    is discarded and retrained.
    """

    def __init__(self, root: str | Path | None = None, robust_block: str = DEFAULT_ROBUST_BLOCK):
        self.root = Path(root) if root is not None else None
        self.robust_block = robust_block
        self._mem: dict[str, _Entry] = {}
        self.hits = 0
        self.misses = 0

    def _load(self, key: str, desc, splits):
        d = self.root / key
        try:
            inputs = json.loads((d / "inputs.json").read_text())
            if hashlib.sha256(_canonical(inputs).encode()).hexdigest()[:20] != key:
                raise ValueError("hash mismatch")
            ckpt = torch.load(d / "model.ckpt", weights_only=True)
            if ckpt.get("version") != CHECKPOINT_VERSION or ckpt.get("key") != key:
                raise ValueError("checkpoint header mismatch")
            model = materialize(desc.with_head(splits.num_classes, splits.resolution),
                                robust_block=self.robust_block)
            model.load_state_dict(ckpt["state_dict"])
            model.eval()
            evals = {}
            if (d / "eval.json").is_file():
                raw = json.loads((d / "eval.json").read_text())
                evals = {k: EvalResult(**v) for k, v in raw.items()}
            return _Entry(model, evals)
        except Exception as exc:  # corrupted entry: drop it and retrain
            log.warning("discarding cache entry %s: %s", key, exc)
            shutil.rmtree(d, ignore_errors=True)
            return None

    def _store(self, key: str, inputs: dict, entry: _Entry):
        d = self.root / key
        d.mkdir(parents=True, exist_ok=True)
        (d / "inputs.json").write_text(_canonical(inputs))
        torch.save({"version": CHECKPOINT_VERSION, "key": key, "state_dict": entry.model.state_dict()},
                   d / "model.ckpt")
        self._store_evals(key, entry)

    def _store_evals(self, key, entry):
        if self.root is None:
            return
        payload = {k: v.to_dict() for k, v in sorted(entry.evals.items())}
        (self.root / key / "eval.json").write_text(json.dumps(payload, indent=1))

    def _entry(self, desc, splits, cfg, split_seed):
        key, inputs = cache_key(desc, splits.identifier, cfg, self.robust_block, split_seed)
        entry = self._mem.get(key)
        if entry is None and self.root is not None and (self.root / key).is_dir():
            entry = self._load(key, desc, splits)
        if entry is None:
            self.misses += 1
            model = trades_train(desc, splits, cfg, self.robust_block)
            entry = _Entry(model, {})
            if self.root is not None:
                self._store(key, inputs, entry)
        else:
            self.hits += 1
        self._mem[key] = entry
        return key, entry

    def train_and_evaluate(self, desc: NetworkDescriptor, splits: DatasetSplits, cfg: ATConfig,
                           spec: AttackSpec, split_seed: int = 0):
        key, entry = self._entry(desc, splits, cfg, split_seed)
        if spec.id not in entry.evals:
            entry.evals[spec.id] = evaluate(entry.model, splits.eval, spec, seed=cfg.seed)
            self._store_evals(key, entry)
        return entry.model, entry.evals[spec.id]


def teacher_stats(task, splits: DatasetSplits, cfg: ATConfig, cache: ModelCache, split_seed: int = 0):
    """The adversarially trained teacher of ``task`` and its eval-set accuracy under the task's attack."""
    return cache.train_and_evaluate(task.teacher, splits, cfg, AttackSpec.from_id(task.attack_id),
                                    split_seed)
