"""RL state encoder: a bidirectional LSTM over stage encodings fused with the task's
LIPS / CT profiles through one perceptron per stage, pre-trained as an autoencoder."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .arch import NetworkDescriptor
from .tasks import Standardizer, TaskEmbeddings

ENCODER_FORMAT = "rcnas-encoder"
ENCODER_VERSION = 1

DEPTH_NORM = 16.0
WIDTH_NORM = 1024.0


def stage_encodings(desc: NetworkDescriptor, normalize: bool = True) -> torch.Tensor:
    """(n_stages, 4) rows of (depth, width, downsample, robust_block)."""
    rows = [[s.depth, s.width, float(s.downsample), float(s.robust_block)] for s in desc.stages]
    enc = torch.tensor(rows, dtype=torch.float64)
    if normalize:
        enc[:, 0] /= DEPTH_NORM
        enc[:, 1] /= WIDTH_NORM
    return enc


def _pooled(v: np.ndarray) -> np.ndarray:
    return np.array([v.mean(), v.std(), v.min(), v.max()])


@dataclass
class StateEmbedding:
    per_stage: torch.Tensor  # (n_stages, d_s)
    provenance: tuple = ()

    @property
    def n_stages(self) -> int:
        return self.per_stage.shape[0]


def _mlp(d_in, d_hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class StateEncoder(nn.Module):
    """s^i = MLP_i(concat(LIPS, H_i^F, H_i^B, CT)); the decoder is used only in pre-training."""

    def __init__(self, n_stages: int = 3, eval_size: int = 256, hidden: int = 32, d_state: int = 64,
                 mlp_hidden: int = 128, lips_mode: str = "full", seed: int = 0):
        super().__init__()
        if lips_mode not in ("full", "pooled"):
            raise ValueError("lips_mode must be 'full' or 'pooled'")
        self.n_stages = n_stages
        self.eval_size = eval_size
        self.hidden = hidden
        self.d_state = d_state
        self.mlp_hidden = mlp_hidden
        self.lips_mode = lips_mode
        self.embed_width = eval_size if lips_mode == "full" else 4
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.lstm = nn.LSTM(4, hidden, batch_first=True, bidirectional=True)
            fuse_in = 2 * self.embed_width + 2 * hidden
            self.fusion = nn.ModuleList(_mlp(fuse_in, mlp_hidden, d_state) for _ in range(n_stages))
            self.decoder = _mlp(d_state, mlp_hidden, 2 * self.embed_width + 4)
        self.double()
        self.lips_norm = Standardizer()
        self.ct_norm = Standardizer()
        self.frozen = False

    def profiles(self, emb: TaskEmbeddings) -> tuple[torch.Tensor, torch.Tensor]:
        lips = self.lips_norm(emb.lips)
        ct = self.ct_norm(emb.ct)
        if self.lips_mode == "pooled":
            lips, ct = _pooled(lips), _pooled(ct)
        elif len(lips) != self.eval_size:
            raise ValueError(f"expected {self.eval_size}-wide profiles, got {len(lips)}")
        return torch.from_numpy(np.asarray(lips, dtype=np.float64)), torch.from_numpy(np.asarray(ct, dtype=np.float64))

    def forward(self, enc: torch.Tensor, lips: torch.Tensor, ct: torch.Tensor) -> torch.Tensor:
        """enc (B, N, 4), lips/ct (B, L) -> states (B, N, d_state)."""
        n = enc.shape[1]
        if n > self.n_stages:
            raise ValueError(f"encoder built for {self.n_stages} stages, got {n}")
        h, _ = self.lstm(enc)
        fwd, bwd = h[..., :self.hidden], h[..., self.hidden:]
        states = [
            self.fusion[i](torch.cat([lips, fwd[:, i], bwd[:, i], ct], dim=-1)) for i in range(n)
        ]
        return torch.stack(states, dim=1)

    def reconstruction_target(self, enc, lips, ct):
        n = enc.shape[1]
        return torch.cat([lips[:, None].expand(-1, n, -1), enc, ct[:, None].expand(-1, n, -1)], dim=-1)

    def freeze(self) -> "StateEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self


def encode_state(encodings: torch.Tensor, emb: TaskEmbeddings, encoder: StateEncoder,
                 provenance: tuple = ()) -> StateEmbedding:
    if len(encodings) < 1:
        raise ValueError("at least one stage encoding is required")
    lips, ct = encoder.profiles(emb)
    with torch.no_grad():
        s = encoder(encodings[None], lips[None], ct[None])[0]
    bad = ~torch.isfinite(s).all(dim=1)
    if bad.any():
        raise FloatingPointError(f"non-finite state for stage {int(bad.nonzero()[0])}")
    return StateEmbedding(s, provenance)


class EncoderDiverged(RuntimeError):
    pass


def pretrain(samples: Sequence[tuple[torch.Tensor, TaskEmbeddings]], encoder: StateEncoder,
             steps: int = 1000, lr: float = 1e-3, refit_norms: bool = True):
    """Fit the autoencoder on (stage encodings, embeddings) pairs, then freeze.

    Returns the per-step loss history. Samples are grouped by stage count so that
    each group is a dense batch.
    """
    if not samples:
        raise ValueError("pre-training needs at least one sample")
    if encoder.frozen:
        raise RuntimeError("encoder is frozen")
    if refit_norms:
        encoder.lips_norm = Standardizer.fit([e.lips for _, e in samples])
        encoder.ct_norm = Standardizer.fit([e.ct for _, e in samples])
    groups: dict[int, list] = {}
    for enc, emb in samples:
        lips, ct = encoder.profiles(emb)
        groups.setdefault(len(enc), []).append((enc, lips, ct))
    batches = [tuple(torch.stack(col) for col in zip(*g)) for _, g in sorted(groups.items())]
    total = sum(len(b[0]) for b in batches)

    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    encoder.train()
    history = []
    for step in range(steps):
        loss = 0.0
        for enc, lips, ct in batches:
            recon = encoder.decoder(encoder(enc, lips, ct))
            target = encoder.reconstruction_target(enc, lips, ct)
            loss = loss + ((recon - target) ** 2).mean() * (len(enc) / total)
        if not torch.isfinite(loss):
            raise EncoderDiverged(f"non-finite reconstruction loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    encoder.freeze()
    return history


def reconstruction_loss(samples, encoder: StateEncoder) -> float:
    total, count = 0.0, 0
    with torch.no_grad():
        for enc, emb in samples:
            lips, ct = encoder.profiles(emb)
            recon = encoder.decoder(encoder(enc[None], lips[None], ct[None]))
            total += float(((recon - encoder.reconstruction_target(enc[None], lips[None], ct[None])) ** 2).mean())
            count += 1
    return total / count


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_encoder(encoder: StateEncoder, path: str | Path) -> None:
    torch.save({
        "format": ENCODER_FORMAT,
        "version": ENCODER_VERSION,
        "config": {
            "n_stages": encoder.n_stages,
            "eval_size": encoder.eval_size,
            "hidden": encoder.hidden,
            "d_state": encoder.d_state,
            "mlp_hidden": encoder.mlp_hidden,
            "lips_mode": encoder.lips_mode,
        },
        "norms": [encoder.lips_norm.mean, encoder.lips_norm.std, encoder.ct_norm.mean, encoder.ct_norm.std],
        "frozen": encoder.frozen,
        "state_dict": encoder.state_dict(),
    }, path)


def load_encoder(path: str | Path, d_state: int | None = None, eval_size: int | None = None) -> StateEncoder:
    ckpt = torch.load(path, weights_only=False)
    if ckpt.get("format") != ENCODER_FORMAT or ckpt.get("version") != ENCODER_VERSION:
        raise ValueError(f"{path} is not a version-{ENCODER_VERSION} encoder checkpoint")
    cfg = ckpt["config"]
    if d_state is not None and cfg["d_state"] != d_state:
        raise ValueError(f"checkpoint state width {cfg['d_state']} != requested {d_state}")
    if eval_size is not None and cfg["eval_size"] != eval_size:
        raise ValueError(f"checkpoint eval_size {cfg['eval_size']} != requested {eval_size}")
    enc = StateEncoder(**cfg)
    enc.load_state_dict(ckpt["state_dict"])
    lm, ls, cm, cs = ckpt["norms"]
    enc.lips_norm, enc.ct_norm = Standardizer(lm, ls), Standardizer(cm, cs)
    if ckpt["frozen"]:
        enc.freeze()
    return enc
