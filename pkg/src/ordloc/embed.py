"""Ordinal embedding stack: RoI encoder, projection head, decoder, losses and Stage-1 training."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import seeding
from .data import CANVAS, ImageSample
from .geom import (Box, PerturbConfig, SamplingExhausted, _local_boxes, _random_boxes, iou_many,
                   sample_box_in_group, sample_pair_grouped)

log = logging.getLogger(__name__)


class ShapeMismatch(ValueError):
    pass


class EmptySet(ValueError):
    pass


class InsufficientBatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class AnchorMode(str, enum.Enum):
    SELF = "self"
    PROTO = "proto"
    SHUFFLE_SELF = "shuffle_self"
    SHUFFLE_PROTO = "shuffle_proto"


@dataclass
class EmbedArch:
    channels: Tuple[int, int, int] = (16, 32, 64)
    pool_size: int = 7
    hidden: int = 256
    embed_dim: int = 64
    image_size: int = CANVAS
    sampling_ratio: int = 2

    @property
    def feature_size(self) -> int:
        size = self.image_size
        for _ in self.channels:
            size = math.ceil(size / 2)
        return size

    @property
    def roi_dim(self) -> int:
        return self.channels[-1] * self.pool_size ** 2


# ---------------------------------------------------------------------------
# Networks


class Encoder(nn.Module):
    def __init__(self, channels=(16, 32, 64)):
        super().__init__()
        layers, c_in = [], 1
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.ReLU()]
            c_in = c
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeMismatch(f"expected (N, 1, H, W) images, got {tuple(x.shape)}")
        return self.net(x)


class Decoder(nn.Module):
    """Transposed-convolution mirror of :class:`Encoder`."""

    def __init__(self, channels=(16, 32, 64), image_size: int = CANVAS):
        super().__init__()
        sizes = [image_size]
        for _ in channels:
            sizes.append(math.ceil(sizes[-1] / 2))
        layers = []
        rev = list(channels[::-1]) + [1]
        for k in range(len(channels)):
            s_in, s_out = sizes[-1 - k], sizes[-2 - k]
            out_pad = s_out - ((s_in - 1) * 2 - 2 + 3)
            layers.append(nn.ConvTranspose2d(rev[k], rev[k + 1], 3, stride=2, padding=1, output_padding=out_pad))
            layers.append(nn.ReLU() if k < len(channels) - 1 else nn.Sigmoid())
        self.net = nn.Sequential(*layers)

    def forward(self, f):
        return self.net(f)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, hidden: int = 256, out_dim: int = 64):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, pooled):
        x = pooled.reshape(pooled.shape[0], -1)
        if x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"projection expects {self.in_dim} inputs, got {x.shape[1]}")
        return self.fc2(F.relu(self.fc1(x)))


def roi_align(features: torch.Tensor, boxes: torch.Tensor, batch_idx: Optional[torch.Tensor] = None,
              image_size: float = CANVAS, output_size: int = 7, sampling_ratio: int = 2) -> torch.Tensor:
    """Bilinear RoI pooling without coordinate quantisation.

    ``boxes`` are ``(K, 4)`` image-space coordinates, mapped to the feature map by
    ``H / image_size``. Each of the ``P x P`` bins averages ``S x S`` bilinear samples
    at regularly spaced points; feature cell ``i`` is centred at continuous position
    ``i + 0.5``. Boxes are clipped to the map before pooling.
    """
    n, c, h, w = features.shape
    boxes = torch.as_tensor(boxes, dtype=features.dtype).reshape(-1, 4)
    k = boxes.shape[0]
    if batch_idx is None:
        if n != k and n != 1:
            raise ShapeMismatch("batch_idx required when feature and box counts differ")
        batch_idx = torch.arange(k) if n == k else torch.zeros(k, dtype=torch.long)
    P, S = output_size, sampling_ratio
    scale_x, scale_y = w / image_size, h / image_size
    x0 = (boxes[:, 0] * scale_x).clamp(0, w)
    x1 = (boxes[:, 2] * scale_x).clamp(0, w)
    y0 = (boxes[:, 1] * scale_y).clamp(0, h)
    y1 = (boxes[:, 3] * scale_y).clamp(0, h)
    frac = (torch.arange(P * S, dtype=features.dtype) + 0.5) / (P * S)
    xs = x0[:, None] + frac[None] * (x1 - x0)[:, None] - 0.5
    ys = y0[:, None] + frac[None] * (y1 - y0)[:, None] - 0.5
    xs = xs.clamp(0, w - 1)
    ys = ys.clamp(0, h - 1)
    xl = xs.floor().long().clamp(max=w - 1)
    yl = ys.floor().long().clamp(max=h - 1)
    xh = (xl + 1).clamp(max=w - 1)
    yh = (yl + 1).clamp(max=h - 1)
    ax = (xs - xl.to(xs.dtype))[:, None, :]
    ay = (ys - yl.to(ys.dtype))[:, :, None]

    flat = features[batch_idx].reshape(k, c, h * w)

    def gather(yi, xi):
        idx = (yi[:, :, None] * w + xi[:, None, :]).reshape(k, 1, -1).expand(k, c, -1)
        return flat.gather(2, idx).reshape(k, c, P * S, P * S)

    top = gather(yl, xl) * (1 - ax)[:, None] + gather(yl, xh) * ax[:, None]
    bot = gather(yh, xl) * (1 - ax)[:, None] + gather(yh, xh) * ax[:, None]
    samples = top * (1 - ay)[:, None] + bot * ay[:, None]
    return samples.reshape(k, c, P, S, P, S).mean(dim=(3, 5))


class OrdinalEmbedder(nn.Module):
    """Encoder, decoder and projection head sharing one architecture record."""

    def __init__(self, arch: EmbedArch | None = None):
        super().__init__()
        self.arch = arch or EmbedArch()
        a = self.arch
        self.encoder = Encoder(a.channels)
        self.decoder = Decoder(a.channels, a.image_size)
        self.projection = ProjectionHead(a.roi_dim, a.hidden, a.embed_dim)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def pool(self, features, boxes, batch_idx=None):
        return roi_align(features, boxes, batch_idx, self.arch.image_size, self.arch.pool_size,
                         self.arch.sampling_ratio)

    def project(self, pooled):
        return self.projection(pooled)

    def embed_boxes(self, features, boxes, batch_idx=None):
        return self.project(self.pool(features, boxes, batch_idx))


def to_tensor(images) -> torch.Tensor:
    """uint8 ``(N, H, W)`` (or list of such) to float ``(N, 1, H, W)`` in [0, 1]."""
    arr = np.stack([np.asarray(i) for i in images]) if isinstance(images, (list, tuple)) else np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(arr.astype(np.float32) / 255.0)[:, None]


def boxes_tensor(boxes: Sequence[Box]) -> torch.Tensor:
    return torch.tensor([b.to_list() for b in boxes], dtype=torch.float32)


@torch.no_grad()
def embed_box(model: OrdinalEmbedder, image: np.ndarray, box: Box) -> torch.Tensor:
    """Embedding of one box in one image: encode, pool, project."""
    x = to_tensor(image).to(next(model.parameters()).dtype)
    feats = model.encode(x)
    return model.embed_boxes(feats, torch.tensor([box.to_list()], dtype=x.dtype))[0]


def crop_canvas(crop_img: np.ndarray, size: int = CANVAS) -> Tuple[np.ndarray, Box]:
    """Paste a bare crop at the top-left of a zero canvas."""
    h, w = crop_img.shape
    canvas = np.zeros((size, size), dtype=np.uint8)
    canvas[:h, :w] = crop_img
    return canvas, Box(0.0, 0.0, float(w), float(h))


@torch.no_grad()
def embed_crops(model: OrdinalEmbedder, crops: Sequence[np.ndarray]) -> torch.Tensor:
    placed = [crop_canvas(c) for c in crops]
    x = to_tensor([p[0] for p in placed])
    return model.embed_boxes(model.encode(x), boxes_tensor([p[1] for p in placed]))


# ---------------------------------------------------------------------------
# Losses


def triplet_loss(a: torch.Tensor, p: torch.Tensor, n: torch.Tensor, margin: float) -> torch.Tensor:
    """Hinge ``max(m + d(a, p) - d(a, n), 0)`` per row (or scalar for 1-D inputs)."""
    if a.shape != p.shape or a.shape != n.shape:
        raise ShapeMismatch("triplet members must have equal shapes")
    return F.relu(margin + torch.linalg.vector_norm(a - p, dim=-1) - torch.linalg.vector_norm(a - n, dim=-1))


def reconstruction_loss(decoder: nn.Module, features: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
    recon = decoder(features)
    if recon.shape != images.shape:
        raise ShapeMismatch(f"decoded {tuple(recon.shape)} vs input {tuple(images.shape)}")
    return F.mse_loss(recon, images)


def contrastive_loss(c3: torch.Tensor, c4: torch.Tensor, margin: float) -> torch.Tensor:
    return F.relu(margin - torch.linalg.vector_norm(c3 - c4, dim=-1))


def prototype(embeddings) -> torch.Tensor:
    if isinstance(embeddings, torch.Tensor):
        if embeddings.dim() != 2 or embeddings.shape[0] == 0:
            raise EmptySet("prototype of an empty set")
        return embeddings.mean(dim=0)
    if len(embeddings) == 0:
        raise EmptySet("prototype of an empty set")
    return torch.stack(list(embeddings)).mean(dim=0)


def batch_anchors(mode: AnchorMode, g_emb: torch.Tensor) -> torch.Tensor:
    """Anchor embedding for every instance of a batch.

    The batch is partitioned into two halves. ``PROTO`` uses the mean of the
    instance's own half, ``SHUFFLE_PROTO`` the mean of the other half,
    ``SHUFFLE_SELF`` the next instance's embedding (cyclically).
    """
    mode = AnchorMode(mode)
    b = g_emb.shape[0]
    if mode == AnchorMode.SELF:
        return g_emb
    if mode == AnchorMode.PROTO and b == 1:
        return g_emb
    if b < 2:
        raise InsufficientBatch(f"{mode.value} anchors need at least 2 instances")
    if mode == AnchorMode.SHUFFLE_SELF:
        return g_emb.roll(-1, dims=0)
    half = b // 2
    first, second = g_emb[:half].mean(0), g_emb[half:].mean(0)
    in_first = (torch.arange(b) < half)[:, None]
    if mode == AnchorMode.PROTO:
        return torch.where(in_first, first, second)
    return torch.where(in_first, second, first)


def select_anchor(mode: AnchorMode, g_emb: torch.Tensor, index: int) -> torch.Tensor:
    return batch_anchors(mode, g_emb)[index]


# ---------------------------------------------------------------------------
# Box banks for fast grouped sampling


def box_bank(g: Box, bounds, cfg: PerturbConfig, rng: np.random.Generator,
             per_group: int = 32, candidates: int = 4000) -> List[np.ndarray]:
    """Dense boxes around ``g`` split into IoU groups, ``per_group`` boxes each.

    Underpopulated groups are topped up by rejection sampling.
    """
    garr = g.as_array()
    spreads = rng.uniform(0.0, 1.0, candidates)
    cands = np.concatenate([
        _local_boxes_mixed(garr, spreads, bounds, cfg, rng),
        _random_boxes(garr, candidates // 2, *bounds, cfg=cfg, rng=rng),
    ])
    groups = np.minimum((iou_many(cands, garr) * cfg.num_groups).astype(int), cfg.num_groups - 1)
    bank = []
    for k in range(cfg.num_groups):
        members = cands[groups == k]
        if len(members) >= per_group:
            members = members[rng.choice(len(members), per_group, replace=False)]
        else:
            extra = [sample_box_in_group(g, k, bounds, cfg, rng).as_array()
                     for _ in range(per_group - len(members))]
            members = np.concatenate([members, np.array(extra).reshape(-1, 4)])
        bank.append(members)
    return bank


def _local_boxes_mixed(garr, spreads, bounds, cfg, rng):
    out = np.empty((len(spreads), 4))
    for lo in np.linspace(0, 1, 11)[:-1]:
        sel = (spreads >= lo) & (spreads < lo + 0.1)
        if sel.any():
            out[sel] = _local_boxes(garr, int(sel.sum()), lo + 0.1, *bounds, cfg=cfg, rng=rng)
    return out


def sample_bank_pairs(bank: List[np.ndarray], k: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """``k`` (higher-IoU, lower-IoU) box pairs drawn from distinct groups of ``bank``."""
    m = len(bank)
    pos, neg = np.empty((k, 4)), np.empty((k, 4))
    for i in range(k):
        a, b = rng.choice(m, size=2, replace=False)
        hi, lo = max(a, b), min(a, b)
        pos[i] = bank[hi][rng.integers(len(bank[hi]))]
        neg[i] = bank[lo][rng.integers(len(bank[lo]))]
    return pos, neg


# ---------------------------------------------------------------------------
# Stage 1


@dataclass
class Stage1Config:
    lambda1: float = 0.1
    margin: float = 60.0
    anchor_mode: AnchorMode = AnchorMode.SHUFFLE_PROTO
    batch_size: int = 10
    epochs: int = 100
    lr: float = 1e-3
    pairs_per_image: int = 8
    selective: bool = False
    margin1: float = 10.0
    margin2: float = 320.0
    lambda_trip: float = 1.0
    lambda_contr: float = 1.0
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    arch: EmbedArch = field(default_factory=EmbedArch)

    def __post_init__(self):
        self.anchor_mode = AnchorMode(self.anchor_mode)
        if isinstance(self.perturb, dict):
            self.perturb = PerturbConfig(**self.perturb)
        if isinstance(self.arch, dict):
            self.arch = EmbedArch(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.arch.items()})
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.selective and not self.margin2 > self.margin1 > 0:
            raise ValueError("selective mode needs margin2 > margin1 > 0")


def stage1_loss(model: OrdinalEmbedder, cfg: Stage1Config, images: torch.Tensor, g_boxes: torch.Tensor,
                pos: torch.Tensor, neg: torch.Tensor) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Reconstruction plus ``lambda1`` times the mean triplet loss for one batch.

    ``pos``/``neg`` are ``(B, K, 4)`` box pairs, positive being the higher-IoU box.
    """
    feats = model.encode(images)
    rec = reconstruction_loss(model.decoder, feats, images)
    if cfg.lambda1 == 0:
        return rec, {"reconstruct": rec.item(), "triplet": 0.0}
    b, k = pos.shape[:2]
    g_emb = model.embed_boxes(feats, g_boxes)
    idx = torch.arange(b).repeat_interleave(k)
    p_emb = model.embed_boxes(feats, pos.reshape(-1, 4), idx)
    n_emb = model.embed_boxes(feats, neg.reshape(-1, 4), idx)
    anchors = batch_anchors(cfg.anchor_mode, g_emb)[idx]
    trip = triplet_loss(anchors, p_emb, n_emb, cfg.margin).mean()
    return rec + cfg.lambda1 * trip, {"reconstruct": rec.item(), "triplet": trip.item()}


def selective_loss(model: OrdinalEmbedder, cfg: Stage1Config, images: torch.Tensor,
                   g_boxes: Dict[int, torch.Tensor], pos: Dict[int, torch.Tensor],
                   neg: Dict[int, torch.Tensor]) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Two-class objective: per-digit triplets around batch class centers plus a center-separation hinge."""
    feats = model.encode(images)
    rec = reconstruction_loss(model.decoder, feats, images)
    centers, trip = {}, 0.0
    for d in sorted(g_boxes):
        b, k = pos[d].shape[:2]
        idx = torch.arange(b).repeat_interleave(k)
        centers[d] = model.embed_boxes(feats, g_boxes[d]).mean(0)
        p_emb = model.embed_boxes(feats, pos[d].reshape(-1, 4), idx)
        n_emb = model.embed_boxes(feats, neg[d].reshape(-1, 4), idx)
        trip = trip + triplet_loss(centers[d].expand_as(p_emb), p_emb, n_emb, cfg.margin1).mean()
    d3, d4 = sorted(centers)
    contr = contrastive_loss(centers[d3], centers[d4], cfg.margin2)
    loss = rec + cfg.lambda_trip * trip + cfg.lambda_contr * contr
    return loss, {"reconstruct": rec.item(), "triplet": float(trip.detach()) if torch.is_tensor(trip) else trip, "contrastive": contr.item()}


def train_stage1(cfg: Stage1Config, dataset: Sequence, seed: int = 0,
                 model: OrdinalEmbedder | None = None) -> Tuple[OrdinalEmbedder, List[dict]]:
    """Train encoder, decoder and projection head; returns the model and per-epoch log."""
    if len(dataset) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(seeding.derive_seed(seed, "init", "stage1"))
    model = model or OrdinalEmbedder(cfg.arch)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = seeding.rng(seed, "stage1")
    bounds = (cfg.arch.image_size, cfg.arch.image_size)
    images = to_tensor([s.image for s in dataset])
    if cfg.selective:
        digits = sorted(dataset[0].boxes)
        gts = {d: [s.boxes[d] for s in dataset] for d in digits}
    else:
        digits = [None]
        gts = {None: [s.gt_box for s in dataset]}
    history = []
    for epoch in range(cfg.epochs):
        banks = {d: [box_bank(g, bounds, cfg.perturb, rng) for g in gts[d]] for d in digits}
        order = rng.permutation(len(dataset))
        totals: Dict[str, float] = {}
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            pos, neg, gb = {}, {}, {}
            for d in digits:
                pairs = [sample_bank_pairs(banks[d][i], cfg.pairs_per_image, rng) for i in sel]
                pos[d] = torch.tensor(np.stack([p for p, _ in pairs]), dtype=torch.float32)
                neg[d] = torch.tensor(np.stack([n for _, n in pairs]), dtype=torch.float32)
                gb[d] = boxes_tensor([gts[d][i] for i in sel])
            x = images[torch.as_tensor(sel)]
            if cfg.selective:
                loss, parts = selective_loss(model, cfg, x, gb, pos, neg)
            else:
                loss, parts = stage1_loss(model, cfg, x, gb[None], pos[None], neg[None])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}: non-finite loss {parts}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
            totals["loss"] = totals.get("loss", 0.0) + loss.item()
            for key, v in parts.items():
                totals[key] = totals.get(key, 0.0) + v
        entry = {"epoch": epoch, **{k: v / steps for k, v in totals.items()}}
        history.append(entry)
        log.debug("stage1 %s", entry)
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# OrdAcc


@torch.no_grad()
def ord_acc(embed_fn, dataset: Sequence[ImageSample], cfg: PerturbConfig | None = None,
            passes: int = 10, seed: int = 0, bounds=(CANVAS, CANVAS)) -> float:
    """Fraction of grouped box pairs whose embedding-distance order matches their IoU order.

    ``embed_fn(sample_index, boxes (K, 4) array) -> (K, M) tensor`` embeds boxes of one
    image; an :class:`OrdinalEmbedder` is wrapped automatically. The anchor is the
    instance's own ground-truth embedding; ties count as incorrect.
    """
    cfg = cfg or PerturbConfig()
    if isinstance(embed_fn, OrdinalEmbedder):
        embed_fn = _model_embed_fn(embed_fn, dataset)
    rng = seeding.rng(seed, "ordacc")
    correct = total = skipped = 0
    for i, s in enumerate(dataset):
        boxes = []
        for _ in range(passes):
            try:
                bj, bk = sample_pair_grouped(s.gt_box, bounds, cfg, rng)
            except SamplingExhausted:
                skipped += 1
                continue
            boxes += [bj.to_list(), bk.to_list()]
        if not boxes:
            continue
        emb = embed_fn(i, np.array([s.gt_box.to_list()] + boxes))
        d = torch.linalg.vector_norm(emb[1:] - emb[0], dim=-1).reshape(-1, 2)
        correct += int((d[:, 0] < d[:, 1]).sum())
        total += d.shape[0]
    if skipped:
        log.warning("ord_acc: %d pairs skipped after sampling exhaustion", skipped)
    return correct / total if total else float("nan")


def _model_embed_fn(model: OrdinalEmbedder, dataset):
    images = to_tensor([s.image for s in dataset])

    def fn(i, boxes):
        feats = model.encode(images[i:i + 1])
        return model.embed_boxes(feats, torch.tensor(boxes, dtype=torch.float32))

    return fn
