"""Test-time policy adaptation on unlabeled images, and the exemplar fine-tuning baseline."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Sequence

import torch

from . import checkpoint
from .agent import Policy, TrainConfig, clone_policy, gt_embeddings, localize, reinforce
from .data import ExemplaryMode, ExemplarySet, ImageSample
from .embed import EmptySet, OrdinalEmbedder, embed_crops, prototype, to_tensor
from .env import HORIZON
from .evalkit import corloc

log = logging.getLogger(__name__)


class ModeMismatch(UserWarning):
    """Exemplary set of the wrong mode for the requested operation."""


@dataclass
class AdaptConfig:
    epochs: int = 20
    lr: float = 1e-4
    lambda2: float = 0.5
    batch_size: int = 10
    rollouts_per_image: int = 4
    horizon: int = HORIZON
    gamma: float = 0.99
    alpha: float = 0.2
    grad_clip: float = 10.0
    seed: int = 0

    def train_config(self, policy: Policy) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, horizon=self.horizon, gamma=self.gamma,
                           lambda2=self.lambda2, lr=self.lr, epochs=self.epochs,
                           rollouts_per_image=self.rollouts_per_image, reward="ordinal", alpha=self.alpha,
                           grad_clip=self.grad_clip, arch=policy.arch)


def _images(samples) -> torch.Tensor:
    arrays = [s.image if isinstance(s, ImageSample) else s for s in samples]
    if not arrays:
        raise EmptySet("no images to train on")
    return to_tensor(arrays)


def adapt_policy(policy: Policy, model: OrdinalEmbedder, images: Sequence, exemplary: ExemplarySet,
                 cfg: AdaptConfig | None = None, log_path: Path | None = None):
    """Continue policy-gradient training on unlabeled ``images`` toward the crop prototype.

    ``images`` are arrays or samples; any ground-truth box they carry is never read.
    The prototype is fixed for the whole run. Returns a new policy and the history.
    """
    cfg = cfg or AdaptConfig()
    if exemplary.mode != ExemplaryMode.TEST_CROPS:
        warnings.warn("adapt_policy expects crop exemplars; using the crops and ignoring boxes", ModeMismatch)
    crops = exemplary.crops()
    if not crops:
        raise EmptySet("empty exemplary set")
    anchor = prototype(embed_crops(model, crops))
    adapted = clone_policy(policy)
    history = reinforce(adapted, model, _images(images), cfg.train_config(policy), cfg.seed,
                        lambda sel, rng: anchor, log_path=log_path, stage="stage3")
    return adapted, history


def fine_tune_policy(policy: Policy, model: OrdinalEmbedder, exemplary: ExemplarySet,
                     cfg: AdaptConfig | None = None, log_path: Path | None = None):
    """Policy-gradient training restricted to the annotated exemplary images themselves."""
    cfg = cfg or AdaptConfig()
    if exemplary.mode != ExemplaryMode.TRAIN_PAIRS:
        raise ValueError("fine_tune_policy needs an exemplary set of image/box pairs")
    if exemplary.size == 0:
        raise EmptySet("empty exemplary set")
    anchor = prototype(gt_embeddings(model, exemplary.entries))
    tuned = clone_policy(policy)
    history = reinforce(tuned, model, _images(exemplary.entries), cfg.train_config(policy), cfg.seed,
                        lambda sel, rng: anchor, log_path=log_path, stage="finetune")
    return tuned, history


def evaluate_corloc(policy: Policy, model: OrdinalEmbedder, samples: Sequence[ImageSample],
                    horizon: int = HORIZON, alpha: float = 0.2) -> float:
    boxes = localize(policy, model, [s.image for s in samples], horizon, alpha)
    return corloc(boxes, [s.gt_box for s in samples])


def write_adaptation_report(out_dir, before: Policy, after: Policy, model: OrdinalEmbedder,
                            eval_sets: Dict[str, Sequence[ImageSample]], cfg: AdaptConfig,
                            history: list | None = None) -> dict:
    """Save before/after policy checkpoints and a JSON report of CorLoc per evaluation set."""
    out = Path(out_dir)
    checkpoint.save_policy(before, out / "policy-before")
    checkpoint.save_policy(after, out / "policy-after")
    report = {"config": asdict(cfg), "sets": {}}
    for name, samples in eval_sets.items():
        b = evaluate_corloc(before, model, samples, cfg.horizon, cfg.alpha)
        a = evaluate_corloc(after, model, samples, cfg.horizon, cfg.alpha)
        report["sets"][name] = {"before": b, "after": a, "gain": a - b, "count": len(samples)}
    if history is not None:
        report["history"] = history
    (out / "adaptation.json").write_text(json.dumps(report, indent=2))
    return report
