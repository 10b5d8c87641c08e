"""Recurrent localization policy and REINFORCE training with an entropy bonus."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import env as envlib
from . import seeding
from .embed import NonFiniteLoss, OrdinalEmbedder, ShapeMismatch, boxes_tensor, prototype, to_tensor
from .geom import NUM_ACTIONS

log = logging.getLogger(__name__)


class DegenerateBatch(UserWarning):
    pass


@dataclass
class PolicyArch:
    input_dim: int = 64 * 7 * 7
    hidden: int = 256
    num_actions: int = NUM_ACTIONS


class Policy(nn.Module):
    """GRU controller over RoI features with a linear head producing 14 action logits."""

    def __init__(self, arch: PolicyArch | None = None):
        super().__init__()
        self.arch = arch or PolicyArch()
        # RoI features are non-negative with a large fan-in; normalising them keeps
        # Adam steps from saturating the recurrent gates
        self.norm = nn.LayerNorm(self.arch.input_dim)
        self.cell = nn.GRUCell(self.arch.input_dim, self.arch.hidden)
        self.head = nn.Linear(self.arch.hidden, self.arch.num_actions)

    def initial_hidden(self, n: int) -> torch.Tensor:
        return torch.zeros(n, self.arch.hidden)

    def forward(self, roi: torch.Tensor, hidden: torch.Tensor):
        x = roi.reshape(roi.shape[0], -1)
        if x.shape[1] != self.arch.input_dim or hidden.shape[-1] != self.arch.hidden:
            raise ShapeMismatch(f"policy got input {tuple(x.shape)} / hidden {tuple(hidden.shape)}")
        hidden = self.cell(self.norm(x), hidden)
        return self.head(hidden), hidden


def policy_step(policy: Policy, roi: torch.Tensor, hidden: torch.Tensor):
    return policy(roi, hidden)


@dataclass
class Trajectory:
    actions: np.ndarray  # (T, N)
    log_probs: torch.Tensor  # (T, N)
    entropies: torch.Tensor  # (T, N)
    rewards: np.ndarray  # (T, N)
    boxes: np.ndarray  # (T + 1, N, 4)

    @property
    def length(self) -> int:
        return self.actions.shape[0]


def entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum(-1)


def sample_trajectory(policy: Policy, model: OrdinalEmbedder, state: envlib.EnvState, spec: envlib.RewardSpec,
                      generator: torch.Generator | None = None, greedy: bool = False,
                      logits_hook: Callable[[torch.Tensor], torch.Tensor] | None = None) -> Trajectory:
    """Run ``state.horizon - state.t`` steps; sampling unless ``greedy`` (argmax, lowest code on ties)."""
    hidden = policy.initial_hidden(state.size)
    actions, logps, ents, rewards, boxes = [], [], [], [], [state.boxes]
    while state.t < state.horizon:
        roi = envlib.roi_features(model, state)
        logits, hidden = policy(roi, hidden)
        if logits_hook is not None:
            logits = logits_hook(logits)
        logp_all = F.log_softmax(logits, dim=-1)
        if greedy:
            a = logits.argmax(dim=-1)
        else:
            a = torch.multinomial(logp_all.exp(), 1, generator=generator)[:, 0]
        state, r = envlib.step(state, a.numpy(), spec, model)
        actions.append(a.numpy())
        logps.append(logp_all.gather(1, a[:, None])[:, 0])
        ents.append(-(logp_all.exp() * logp_all).sum(-1))
        rewards.append(r)
        boxes.append(state.boxes)
    return Trajectory(np.stack(actions), torch.stack(logps), torch.stack(ents), np.stack(rewards), np.stack(boxes))


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """``G_t = sum_{t' >= t} gamma^(t'-t) R_t'`` along the first axis."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(r)
    acc = np.zeros_like(r[0]) if r.ndim > 1 else 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def policy_loss(log_probs: torch.Tensor, entropies: torch.Tensor, returns, lambda2: float) -> torch.Tensor:
    """REINFORCE with a per-step batch-mean baseline, minus ``lambda2`` times the mean entropy.

    ``log_probs``, ``entropies`` and ``returns`` are ``(T, N)``. With ``N == 1`` the
    baseline is undefined and taken as zero.
    """
    g = torch.as_tensor(np.asarray(returns), dtype=log_probs.dtype)
    if g.shape[1] == 1:
        warnings.warn("single-trajectory batch: baseline undefined, using 0", DegenerateBatch, stacklevel=2)
        baseline = torch.zeros_like(g)
    else:
        baseline = g.mean(dim=1, keepdim=True)
    adv = g - baseline
    return -(adv * log_probs).mean() - lambda2 * entropies.mean()


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    batch_size: int = 10
    horizon: int = envlib.HORIZON
    gamma: float = 0.99
    lambda2: float = 6.0
    lr: float = 1e-4
    epochs: int = 120
    exemplary_size: int = 5
    rollouts_per_image: int = 4
    reward: str = "ordinal"  # ordinal | iou_signed | iou_unsigned
    alpha: float = 0.2
    grad_clip: float = 10.0
    arch: PolicyArch = field(default_factory=PolicyArch)

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = PolicyArch(**self.arch)
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if self.batch_size < 1 or self.rollouts_per_image < 1:
            raise ValueError("batch_size and rollouts_per_image must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.reward not in ("ordinal", "iou_signed", "iou_unsigned"):
            raise ValueError(f"unknown reward {self.reward!r}")


def _freeze(model: OrdinalEmbedder) -> None:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)


def reinforce(policy: Policy, model: OrdinalEmbedder, images: torch.Tensor, cfg: TrainConfig, seed: int,
              prototype_fn: Callable, gt: Optional[np.ndarray] = None, log_path: Path | None = None,
              stage: str = "stage2") -> List[dict]:
    """Shared policy-gradient loop used by training, adaptation and fine-tuning.

    ``prototype_fn(batch_indices, rng)`` returns the reward anchor for one minibatch.
    Only ``policy`` is updated.
    """
    _freeze(model)
    opt = torch.optim.Adam(policy.parameters(), lr=cfg.lr)
    rng = seeding.rng(seed, stage, "batches")
    gen = seeding.torch_generator(seed, stage, "rollout")
    history = []
    n = images.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        stats = {"loss": 0.0, "return": 0.0, "entropy": 0.0}
        steps = 0
        for start in range(0, n, cfg.batch_size):
            sel = np.repeat(order[start:start + cfg.batch_size], cfg.rollouts_per_image)
            if cfg.reward == "ordinal":
                spec = envlib.OrdinalReward(prototype_fn(sel, rng))
            elif cfg.reward == "iou_signed":
                spec = envlib.IoUSigned(gt[sel])
            else:
                spec = envlib.IoUUnsigned(gt[sel])
            state = envlib.reset(model, images[torch.as_tensor(sel)], cfg.horizon, cfg.alpha)
            traj = sample_trajectory(policy, model, state, spec, gen)
            returns = discounted_returns(traj.rewards, cfg.gamma)
            loss = policy_loss(traj.log_probs, traj.entropies, returns, cfg.lambda2)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"{stage} epoch {epoch}: non-finite policy loss")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(policy.parameters(), cfg.grad_clip)
            opt.step()
            steps += 1
            stats["loss"] += loss.detach().item()
            stats["return"] += float(traj.rewards.sum(0).mean())
            stats["entropy"] += traj.entropies.detach().mean().item()
        entry = {"stage": stage, "epoch": epoch, **{k: v / max(steps, 1) for k, v in stats.items()}}
        history.append(entry)
        log.debug("%s", entry)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(entry) + "\n")
    return history


@torch.no_grad()
def gt_embeddings(model: OrdinalEmbedder, samples) -> torch.Tensor:
    x = to_tensor([s.image for s in samples])
    return model.embed_boxes(model.encode(x), boxes_tensor([s.gt_box for s in samples]))


def train_stage2(cfg: TrainConfig, dataset: Sequence, model: OrdinalEmbedder, seed: int = 0,
                 policy: Policy | None = None, log_path: Path | None = None):
    """Train a fresh policy on annotated images with the prototype reward.

    Each minibatch draws its exemplary subset from training images outside the
    minibatch, so the anchor never comes from an image being localized.
    """
    torch.manual_seed(seeding.derive_seed(seed, "init", "policy"))
    policy = policy or Policy(cfg.arch)
    images = to_tensor([s.image for s in dataset])
    gt = np.array([s.gt_box.to_list() for s in dataset])
    g_emb = gt_embeddings(model, dataset) if cfg.reward == "ordinal" else None
    n = len(dataset)

    def proto(sel, rng):
        rest = np.setdiff1d(np.arange(n), sel)
        if len(rest) == 0:
            rest = np.arange(n)
        pick = rng.choice(rest, size=min(cfg.exemplary_size, len(rest)), replace=False)
        return prototype(g_emb[torch.as_tensor(pick)])

    history = reinforce(policy, model, images, cfg, seed, proto, gt, log_path, "stage2")
    return policy, history


# ---------------------------------------------------------------------------
# Evaluation


@torch.no_grad()
def localize(policy: Policy, model: OrdinalEmbedder, images, horizon: int = envlib.HORIZON,
             alpha: float = 0.2, batch: int = 256) -> np.ndarray:
    """Greedy episodes from the whole image; returns final boxes ``(N, 4)``."""
    if not isinstance(images, torch.Tensor):
        images = to_tensor(list(images))
    out = []
    for start in range(0, images.shape[0], batch):
        x = images[start:start + batch]
        state = envlib.reset(model, x, horizon, alpha)
        traj = sample_trajectory(policy, model, state, None, greedy=True)
        out.append(traj.boxes[-1])
    return np.concatenate(out)


def param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def clone_policy(policy: Policy) -> Policy:
    return copy.deepcopy(policy)
