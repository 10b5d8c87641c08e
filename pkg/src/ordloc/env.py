"""Bounding-box MDP over a batch of images.

A state holds ``N`` independent episodes that advance in lockstep, which is how
rollouts are generated during training; a single episode is simply ``N = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .embed import OrdinalEmbedder, ShapeMismatch, to_tensor
from .geom import DEFAULT_ALPHA, MIN_BOX_SIZE, Action, Box, apply_actions, iou_many

HORIZON = 10


class EpisodeExhausted(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class OrdinalReward:
    """Decrease in embedding distance to ``prototype``. Never sees ground truth."""

    prototype: torch.Tensor


@dataclass(frozen=True)
class IoUSigned:
    gt: np.ndarray  # (N, 4)


@dataclass(frozen=True)
class IoUUnsigned:
    gt: np.ndarray  # (N, 4)


RewardSpec = Union[OrdinalReward, IoUSigned, IoUUnsigned]


@dataclass(frozen=True)
class EnvState:
    images: torch.Tensor  # (N, 1, H, W)
    features: torch.Tensor  # (N, C, h, w), computed once per episode
    boxes: np.ndarray  # (N, 4)
    t: int = 0
    horizon: int = HORIZON
    alpha: float = DEFAULT_ALPHA
    min_size: float = MIN_BOX_SIZE
    dist: Optional[torch.Tensor] = None  # cached distance of current boxes to the prototype

    @property
    def size(self) -> int:
        return self.boxes.shape[0]

    @property
    def bounds(self):
        return self.images.shape[-1], self.images.shape[-2]

    def box(self, i: int = 0) -> Box:
        return Box.from_array(self.boxes[i])


@torch.no_grad()
def reset(model: OrdinalEmbedder, images, horizon: int = HORIZON, alpha: float = DEFAULT_ALPHA,
          min_size: float = MIN_BOX_SIZE) -> EnvState:
    """Start episodes from the whole-image box. ``images`` are uint8 arrays or a float tensor."""
    if not isinstance(images, torch.Tensor):
        if isinstance(images, np.ndarray) and images.ndim == 2:
            images = [images]
        images = to_tensor(list(images))
    if images.dim() != 4 or images.shape[1] != 1:
        raise ShapeMismatch(f"expected (N, 1, H, W) images, got {tuple(images.shape)}")
    n, _, h, w = images.shape
    feats = model.encode(images)
    boxes = np.tile(np.array([0.0, 0.0, float(w), float(h)]), (n, 1))
    return EnvState(images, feats, boxes, 0, horizon, alpha, min_size)


@torch.no_grad()
def box_embeddings(model: OrdinalEmbedder, state: EnvState, boxes: np.ndarray | None = None) -> torch.Tensor:
    boxes = state.boxes if boxes is None else boxes
    return model.embed_boxes(state.features, torch.as_tensor(boxes, dtype=state.features.dtype))


@torch.no_grad()
def roi_features(model: OrdinalEmbedder, state: EnvState) -> torch.Tensor:
    return model.pool(state.features, torch.as_tensor(state.boxes, dtype=state.features.dtype))


@torch.no_grad()
def prototype_distance(model: OrdinalEmbedder, state: EnvState, prototype: torch.Tensor,
                       boxes: np.ndarray | None = None) -> torch.Tensor:
    emb = box_embeddings(model, state, boxes)
    return torch.linalg.vector_norm(emb - prototype.to(emb.dtype), dim=-1)


@torch.no_grad()
def step(state: EnvState, actions, spec: Optional[RewardSpec], model: OrdinalEmbedder | None = None):
    """Apply one action per episode; returns ``(next_state, rewards (N,) float64 array)``.

    ``spec=None`` yields zero rewards (evaluation rollouts).
    """
    if state.t >= state.horizon:
        raise EpisodeExhausted(f"episode already ran {state.horizon} steps")
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    if actions.shape[0] != state.size:
        raise ShapeMismatch(f"{actions.shape[0]} actions for {state.size} episodes")
    w, h = state.bounds
    new_boxes = apply_actions(state.boxes, actions, state.alpha, w, h, state.min_size)
    dist = None
    if spec is None:
        rewards = np.zeros(state.size)
    elif isinstance(spec, OrdinalReward):
        prev = state.dist if state.dist is not None else prototype_distance(model, state, spec.prototype)
        dist = prototype_distance(model, state, spec.prototype, new_boxes)
        rewards = (prev.double() - dist.double()).numpy()
    elif isinstance(spec, (IoUSigned, IoUUnsigned)):
        gt = np.asarray(spec.gt, dtype=np.float64).reshape(-1, 4)
        delta = iou_many(new_boxes, gt) - iou_many(state.boxes, gt)
        rewards = np.sign(delta) if isinstance(spec, IoUSigned) else delta
    else:
        raise TypeError(f"unknown reward spec {spec!r}")
    stay = actions == int(Action.STAY)
    rewards = np.where(stay, 0.0, rewards)
    if dist is not None and stay.any():
        # keep the cache bit-identical for unchanged boxes
        dist = torch.where(torch.as_tensor(stay), prev, dist)
    return replace(state, boxes=new_boxes, t=state.t + 1, dist=dist), rewards


@torch.no_grad()
def endpoint_distance_gap(model: OrdinalEmbedder, images, boxes_start: np.ndarray, boxes_end: np.ndarray,
                          prototype: torch.Tensor) -> np.ndarray:
    """``d(b_0, c) - d(b_T, c)`` recomputed from the two endpoints only."""
    state = reset(model, images)
    d0 = prototype_distance(model, state, prototype, boxes_start)
    d1 = prototype_distance(model, state, prototype, boxes_end)
    return (d0.double() - d1.double()).numpy()


def rollout_rewards_total(rewards: Sequence) -> np.ndarray:
    """Undiscounted return of each episode from ``(T, N)`` per-step rewards."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim == 1:
        return r.sum()
    return r.sum(axis=0)
