"""Localization metrics, the proposal-ranking baseline and multi-run reports."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from . import seeding
from .data import CANVAS
from .embed import OrdinalEmbedder, to_tensor
from .geom import MIN_BOX_SIZE, Box, PerturbConfig, iou_many, sample_box_in_group, SamplingExhausted

log = logging.getLogger(__name__)


class LengthMismatch(ValueError):
    pass


class DegenerateInput(ValueError):
    pass


class EmptyProposals(ValueError):
    pass


def _as_boxes(boxes) -> np.ndarray:
    if len(boxes) and isinstance(boxes[0], Box):
        return np.array([b.to_list() for b in boxes])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def corloc(predicted, gt, threshold: float = 0.5) -> float:
    """Fraction of predictions with IoU >= ``threshold`` against their ground truth."""
    p, g = _as_boxes(predicted), _as_boxes(gt)
    if len(p) != len(g):
        raise LengthMismatch(f"{len(p)} predictions vs {len(g)} ground-truth boxes")
    if len(p) == 0:
        return float("nan")
    return float(np.mean(iou_many(p, g) >= threshold))


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"shapes {x.shape} and {y.shape} differ")
    if len(x) < 2:
        raise LengthMismatch("need at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInput("rank correlation undefined for a constant input")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.clip((rx @ ry) / math.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Proposal ranking baseline


@dataclass
class ProposalGrid:
    scales: tuple = (20, 28, 40, 56)
    stride: float = 0.25  # fraction of the box side
    aspects: tuple = (1.0,)
    min_size: float = MIN_BOX_SIZE


def grid_proposals(width: int = CANVAS, height: int = CANVAS, grid: ProposalGrid | None = None) -> List[Box]:
    """Boxes of every scale/aspect at stride offsets from the origin, clipped and deduplicated."""
    grid = grid or ProposalGrid()
    seen, out = set(), []
    for s in grid.scales:
        for a in grid.aspects:
            bw, bh = s * math.sqrt(a), s / math.sqrt(a)
            sx, sy = grid.stride * bw, grid.stride * bh
            for y in np.arange(0.0, height, sy):
                for x in np.arange(0.0, width, sx):
                    box = (float(x), float(y), float(min(x + bw, width)), float(min(y + bh, height)))
                    if box[2] - box[0] < grid.min_size or box[3] - box[1] < grid.min_size:
                        continue
                    if box not in seen:
                        seen.add(box)
                        out.append(Box(*box))
    return out


@torch.no_grad()
def rank_localize(model: OrdinalEmbedder, image: np.ndarray, prototype: torch.Tensor,
                  proposals: Sequence[Box]) -> Box:
    """Proposal closest to ``prototype`` in embedding space (earliest index on ties)."""
    if len(proposals) == 0:
        raise EmptyProposals("no proposals to rank")
    feats = model.encode(to_tensor(image))
    boxes = torch.tensor([b.to_list() for b in proposals], dtype=feats.dtype)
    emb = model.embed_boxes(feats, boxes, torch.zeros(len(proposals), dtype=torch.long))
    d = torch.linalg.vector_norm(emb - prototype.to(emb.dtype), dim=-1)
    return proposals[int(torch.argmin(d))]


@dataclass
class StudyConfig:
    boxes_per_image: int = 20
    anchor: str = "prototype"  # prototype | instance
    perturb: PerturbConfig = field(default_factory=PerturbConfig)


@torch.no_grad()
def distance_iou_pairs(model: OrdinalEmbedder, dataset, cfg: StudyConfig | None = None, seed: int = 0,
                       prototype: torch.Tensor | None = None):
    """Pooled (embedding distance, IoU) pairs over boxes spread across all IoU groups."""
    cfg = cfg or StudyConfig()
    rng = seeding.rng(seed, "rank-study")
    bounds = (CANVAS, CANVAS)
    dists, ious = [], []
    for s in dataset:
        boxes = []
        for k in range(cfg.boxes_per_image):
            group = k % cfg.perturb.num_groups
            try:
                boxes.append(sample_box_in_group(s.gt_box, group, bounds, cfg.perturb, rng).to_list())
            except SamplingExhausted:
                continue
        boxes = np.array(boxes)
        feats = model.encode(to_tensor(s.image))
        allb = torch.tensor(np.vstack([s.gt_box.to_list(), boxes]), dtype=feats.dtype)
        emb = model.embed_boxes(feats, allb, torch.zeros(len(allb), dtype=torch.long))
        anchor = emb[0] if (cfg.anchor == "instance" or prototype is None) else prototype
        dists.append(torch.linalg.vector_norm(emb[1:] - anchor, dim=-1).numpy())
        ious.append(iou_many(boxes, s.gt_box.as_array()))
    return np.concatenate(dists), np.concatenate(ious)


def rank_correlation_study(model: OrdinalEmbedder, dataset, cfg: StudyConfig | None = None, seed: int = 0,
                           prototype: torch.Tensor | None = None) -> float:
    """Spearman correlation between distance-to-anchor and IoU; negative when ordinal."""
    d, u = distance_iou_pairs(model, dataset, cfg, seed, prototype)
    return spearman_rho(d, u)


# ---------------------------------------------------------------------------
# Reports


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def config_digest(config) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    name: str
    seeds: List[int]
    runs: List[Dict[str, float]]
    config_digest: str
    failures: List[dict] = field(default_factory=list)

    def values(self, metric: str) -> List[float]:
        return [r[metric] for r in self.runs if metric in r]

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values(metric)))

    def std(self, metric: str) -> float:
        v = self.values(metric)
        return float(np.std(v)) if len(v) > 1 else 0.0

    @property
    def metrics(self) -> List[str]:
        names = []
        for r in self.runs:
            names += [k for k in r if k not in names]
        return names

    def summary(self) -> Dict[str, Dict[str, float]]:
        return {m: {"mean": self.mean(m), "std": self.std(m)} for m in self.metrics}

    def format(self, metric: str, percent: bool = True) -> str:
        """``mean_std`` in the subscript convention, e.g. ``97.6_0.4``."""
        k = 100.0 if percent else 1.0
        return f"{self.mean(metric) * k:.1f}_{self.std(metric) * k:.1f}"

    def to_dict(self) -> dict:
        return {"name": self.name, "seeds": self.seeds, "runs": self.runs, "config_digest": self.config_digest,
                "failures": self.failures, "summary": self.summary()}

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(json.dumps(_jsonable(self.to_dict()), indent=2))
        with open(directory / "report.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "mean", "std"] + [f"run{i}" for i in range(len(self.runs))])
            for m in self.metrics:
                w.writerow([m, self.mean(m), self.std(m)] + [r.get(m, "") for r in self.runs])
        return directory

    @classmethod
    def load(cls, directory) -> "EvalReport":
        doc = json.loads((Path(directory) / "report.json").read_text())
        return cls(doc["name"], doc["seeds"], doc["runs"], doc["config_digest"], doc.get("failures", []))


def run_experiment(name: str, pipeline: Callable[[int], Dict[str, float]], config, seeds: Sequence[int],
                   out_dir=None) -> EvalReport:
    """Run ``pipeline(seed)`` once per seed and aggregate its metric dict.

    A failing run is recorded in ``failures`` and excluded from the aggregates.
    """
    runs, failures, done = [], [], []
    for seed in seeds:
        try:
            metrics = pipeline(int(seed))
        except Exception as exc:  # noqa: BLE001 - recorded, not swallowed silently
            log.exception("run %s seed %s failed", name, seed)
            failures.append({"seed": int(seed), "error": f"{type(exc).__name__}: {exc}"})
            continue
        runs.append({k: float(v) for k, v in metrics.items()})
        done.append(int(seed))
    report = EvalReport(name, done, runs, config_digest(config), failures)
    if out_dir is not None:
        report.save(out_dir)
    return report


def plot_report(report: EvalReport, path, metrics: Sequence[str] | None = None) -> Path:
    """Bar chart of metric means with std error bars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = list(metrics or report.metrics)
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(metrics)), 3))
    ax.bar(range(len(metrics)), [report.mean(m) for m in metrics], yerr=[report.std(m) for m in metrics],
           capsize=3, color="tab:blue")
    ax.set_xticks(range(len(metrics)))
    ax.set_xticklabels(metrics, rotation=45, ha="right")
    ax.set_title(report.name)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
