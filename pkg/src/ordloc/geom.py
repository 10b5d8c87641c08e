"""Bounding-box arithmetic: IoU, the discrete action set and perturbed-box sampling.

Boxes are ``(x_min, y_min, x_max, y_max)`` in continuous pixel coordinates with
the origin at the top-left corner. The vectorised helpers operate on ``(N, 4)``
float arrays; :class:`Box` is the scalar value type used at API boundaries.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

MIN_BOX_SIZE = 8.0
DEFAULT_ALPHA = 0.2


class SamplingExhausted(RuntimeError):
    """No admissible box pair was found within the try budget."""


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {tuple(self)}")

    def __iter__(self):
        return iter((self.x_min, self.y_min, self.x_max, self.y_max))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array(tuple(self), dtype=np.float64)

    def to_list(self) -> list:
        return [float(v) for v in self]

    @classmethod
    def from_array(cls, a: Iterable[float]) -> "Box":
        x0, y0, x1, y1 = (float(v) for v in a)
        return cls(x0, y0, x1, y1)

    @classmethod
    def full(cls, width: float, height: float) -> "Box":
        return cls(0.0, 0.0, float(width), float(height))

    def inside(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


class Action(enum.IntEnum):
    """The 14 discrete box transformations. Integer codes are stable."""

    SCALE_TOP_LEFT = 0
    SCALE_TOP_RIGHT = 1
    SCALE_BOTTOM_LEFT = 2
    SCALE_BOTTOM_RIGHT = 3
    SCALE_CENTER = 4
    MOVE_LEFT = 5
    MOVE_RIGHT = 6
    MOVE_UP = 7
    MOVE_DOWN = 8
    ENLARGE_WIDTH = 9
    ENLARGE_HEIGHT = 10
    REDUCE_WIDTH = 11
    REDUCE_HEIGHT = 12
    STAY = 13


NUM_ACTIONS = len(Action)


class PerturbScheme(enum.Enum):
    RANDOM = "random"
    GROUPED = "grouped"


@dataclass
class PerturbConfig:
    scheme: PerturbScheme = PerturbScheme.GROUPED
    num_groups: int = 10
    max_tries: int = 1000
    min_scale: float = 0.3
    max_scale: float = 1.5

    def __post_init__(self):
        if isinstance(self.scheme, str):
            self.scheme = PerturbScheme(self.scheme)
        if self.num_groups < 2:
            raise ValueError("num_groups must be >= 2")
        if not 0 < self.min_scale <= self.max_scale:
            raise ValueError("need 0 < min_scale <= max_scale")

    def group_of(self, iou_value: float) -> int:
        return min(int(np.floor(iou_value * self.num_groups)), self.num_groups - 1)


# ---------------------------------------------------------------------------
# IoU


def iou_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of two broadcastable ``(..., 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def iou(a: Box, b: Box) -> float:
    return float(iou_many(a.as_array(), b.as_array()))


# ---------------------------------------------------------------------------
# Actions


def _fit(x0, x1, limit, min_size):
    """Clip an interval to ``[0, limit]`` and grow it back to ``min_size`` if needed."""
    x0 = np.clip(x0, 0.0, limit)
    x1 = np.clip(x1, 0.0, limit)
    size = np.minimum(np.maximum(x1 - x0, min_size), limit)
    center = np.clip((x0 + x1) / 2, size / 2, limit - size / 2)
    short = (x1 - x0) < size
    x0 = np.where(short, center - size / 2, x0)
    x1 = np.where(short, center + size / 2, x1)
    return x0, x1


def apply_actions(boxes: np.ndarray, actions: np.ndarray, alpha: float, width: float,
                  height: float, min_size: float = MIN_BOX_SIZE) -> np.ndarray:
    """Vectorised :func:`apply_action` over ``(N, 4)`` boxes and ``(N,)`` action codes.

    Moves translate by ``alpha`` of the box side and are clamped so the box keeps its
    size inside the image. Scalings shrink both sides by ``1 - alpha`` about the named
    corner (or the center); enlarge/reduce change one side by ``alpha`` about the center.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    actions = np.asarray(actions).reshape(-1)
    x0, y0, x1, y1 = boxes.T.copy()
    w, h = x1 - x0, y1 - y0
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    nw, nh = w * (1 - alpha), h * (1 - alpha)
    out = boxes.copy()

    def put(mask, a, b, c, d):
        out[mask] = np.stack([a[mask], b[mask], c[mask], d[mask]], axis=1)

    A = Action
    put(actions == A.SCALE_TOP_LEFT, x0, y0, x0 + nw, y0 + nh)
    put(actions == A.SCALE_TOP_RIGHT, x1 - nw, y0, x1, y0 + nh)
    put(actions == A.SCALE_BOTTOM_LEFT, x0, y1 - nh, x0 + nw, y1)
    put(actions == A.SCALE_BOTTOM_RIGHT, x1 - nw, y1 - nh, x1, y1)
    put(actions == A.SCALE_CENTER, cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2)
    dx = alpha * w
    dy = alpha * h
    # translations keep the box size, so clamp the offset instead of clipping the box
    sx_r = np.minimum(dx, width - x1)
    sx_l = np.minimum(dx, x0)
    sy_d = np.minimum(dy, height - y1)
    sy_u = np.minimum(dy, y0)
    put(actions == A.MOVE_LEFT, x0 - sx_l, y0, x1 - sx_l, y1)
    put(actions == A.MOVE_RIGHT, x0 + sx_r, y0, x1 + sx_r, y1)
    put(actions == A.MOVE_UP, x0, y0 - sy_u, x1, y1 - sy_u)
    put(actions == A.MOVE_DOWN, x0, y0 + sy_d, x1, y1 + sy_d)
    put(actions == A.ENLARGE_WIDTH, cx - w * (1 + alpha) / 2, y0, cx + w * (1 + alpha) / 2, y1)
    put(actions == A.ENLARGE_HEIGHT, x0, cy - h * (1 + alpha) / 2, x1, cy + h * (1 + alpha) / 2)
    put(actions == A.REDUCE_WIDTH, cx - w * (1 - alpha) / 2, y0, cx + w * (1 - alpha) / 2, y1)
    put(actions == A.REDUCE_HEIGHT, x0, cy - h * (1 - alpha) / 2, x1, cy + h * (1 - alpha) / 2)

    moved = actions != A.STAY
    nx0, nx1 = _fit(out[:, 0], out[:, 2], width, min_size)
    ny0, ny1 = _fit(out[:, 1], out[:, 3], height, min_size)
    fitted = np.stack([nx0, ny0, nx1, ny1], axis=1)
    out[moved] = fitted[moved]
    return out


def apply_action(box: Box, action: Action, alpha: float = DEFAULT_ALPHA,
                 bounds: Tuple[float, float] = (84, 84), min_size: float = MIN_BOX_SIZE) -> Box:
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if Action(action) == Action.STAY:
        return box
    out = apply_actions(box.as_array()[None], np.array([int(action)]), alpha, *bounds, min_size=min_size)
    return Box.from_array(out[0])


# ---------------------------------------------------------------------------
# Box perturbation


def _random_boxes(g: np.ndarray, n: int, width: float, height: float, cfg: PerturbConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """Boxes with sides scaled from ``g`` and placed uniformly inside the image."""
    gw, gh = g[2] - g[0], g[3] - g[1]
    w = np.minimum(gw * rng.uniform(cfg.min_scale, cfg.max_scale, n), width)
    h = np.minimum(gh * rng.uniform(cfg.min_scale, cfg.max_scale, n), height)
    x0 = rng.uniform(0, 1, n) * (width - w)
    y0 = rng.uniform(0, 1, n) * (height - h)
    return np.stack([x0, y0, x0 + w, y0 + h], axis=1)


def _local_boxes(g: np.ndarray, n: int, spread: float, width: float, height: float,
                 cfg: PerturbConfig, rng: np.random.Generator) -> np.ndarray:
    """Boxes jittered around ``g``; ``spread`` in (0, 1] controls the perturbation size."""
    gw, gh = g[2] - g[0], g[3] - g[1]
    lo, hi = np.log(cfg.min_scale), np.log(cfg.max_scale)
    s = rng.uniform(0, spread, (n, 1))
    sw = np.exp(np.clip(rng.uniform(-1, 1, n)[:, None] * s * 1.2, lo, hi))[:, 0]
    sh = np.exp(np.clip(rng.uniform(-1, 1, n)[:, None] * s * 1.2, lo, hi))[:, 0]
    w = np.minimum(gw * sw, width)
    h = np.minimum(gh * sh, height)
    cx = (g[0] + g[2]) / 2 + rng.uniform(-1, 1, n) * s[:, 0] * gw
    cy = (g[1] + g[3]) / 2 + rng.uniform(-1, 1, n) * s[:, 0] * gh
    x0 = np.clip(cx - w / 2, 0, width - w)
    y0 = np.clip(cy - h / 2, 0, height - h)
    return np.stack([x0, y0, x0 + w, y0 + h], axis=1)


def sample_pair_random(g: Box, bounds: Tuple[float, float], rng: np.random.Generator,
                       cfg: PerturbConfig | None = None) -> Tuple[Box, Box]:
    """Two uniformly placed boxes with distinct IoU to ``g`` (larger-IoU box first)."""
    cfg = cfg or PerturbConfig(scheme=PerturbScheme.RANDOM)
    garr = g.as_array()
    for _ in range(cfg.max_tries):
        pair = _random_boxes(garr, 2, *bounds, cfg=cfg, rng=rng)
        ious = iou_many(pair, garr)
        if ious[0] != ious[1]:
            if ious[0] < ious[1]:
                pair = pair[::-1]
            return Box.from_array(pair[0]), Box.from_array(pair[1])
    raise SamplingExhausted(f"no pair with distinct IoU after {cfg.max_tries} tries")


def sample_box_in_group(g: Box, group: int, bounds: Tuple[float, float], cfg: PerturbConfig,
                        rng: np.random.Generator, chunk: int = 50) -> Box:
    """Rejection-sample one box whose IoU with ``g`` lies in ``[group/M, (group+1)/M)``."""
    garr = g.as_array()
    lo, hi = group / cfg.num_groups, (group + 1) / cfg.num_groups
    # local jitter reaches the high-IoU groups, uniform placement the low ones
    spread = min(1.0, 1.5 * (1.0 - lo))
    tried = 0
    while tried < cfg.max_tries:
        n = min(chunk, cfg.max_tries - tried)
        cands = np.concatenate([
            _local_boxes(garr, n - n // 2, spread, *bounds, cfg=cfg, rng=rng),
            _random_boxes(garr, n // 2, *bounds, cfg=cfg, rng=rng),
        ])
        tried += n
        ious = iou_many(cands, garr)
        hit = np.flatnonzero((ious >= lo) & (ious < hi))
        if hit.size:
            return Box.from_array(cands[hit[0]])
    raise SamplingExhausted(f"IoU group [{lo:.2f}, {hi:.2f}) not reached in {cfg.max_tries} tries")


def sample_pair_grouped(g: Box, bounds: Tuple[float, float], cfg: PerturbConfig,
                        rng: np.random.Generator) -> Tuple[Box, Box]:
    """Pick two distinct IoU groups, then one box from each; higher-IoU box first."""
    gi, gj = rng.choice(cfg.num_groups, size=2, replace=False)
    hi_group, lo_group = max(gi, gj), min(gi, gj)
    first = sample_box_in_group(g, int(hi_group), bounds, cfg, rng)
    second = sample_box_in_group(g, int(lo_group), bounds, cfg, rng)
    return first, second


def sample_pair(g: Box, bounds: Tuple[float, float], cfg: PerturbConfig,
                rng: np.random.Generator) -> Tuple[Box, Box]:
    if cfg.scheme == PerturbScheme.GROUPED:
        return sample_pair_grouped(g, bounds, cfg, rng)
    return sample_pair_random(g, bounds, rng, cfg)
