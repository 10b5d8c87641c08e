"""End-to-end experiment pipelines built from the stage modules.

Each pipeline takes a :class:`RunConfig` and a seed and returns trained
artifacts plus a flat metric dict, so :func:`evalkit.run_experiment` can repeat
it over seeds.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence

import numpy as np

from . import data as datalib
from .adapt import adapt_policy, evaluate_corloc, fine_tune_policy
from .agent import Policy, TrainConfig, gt_embeddings, train_stage2
from .config import RunConfig
from .data import ExemplaryMode, ImageSample, MnistSource
from .embed import OrdinalEmbedder, Stage1Config, ord_acc, prototype, train_stage1
from .evalkit import (ProposalGrid, StudyConfig, corloc, grid_proposals, rank_correlation_study,
                      rank_localize)

log = logging.getLogger(__name__)


@functools.lru_cache(maxsize=4)
def _source(root: str | None) -> MnistSource:
    return MnistSource.load(root)


def source(root=None) -> MnistSource:
    return _source(None if root is None else str(root))


def digit_split(cfg: RunConfig, digit: int, noise, seed: int, src: MnistSource | None = None):
    """Annotated training images and held-out test images of one digit/background."""
    src = src or source()
    train = datalib.synth_cmnist(digit, cfg.data.train_count, noise, "train", seed, src)
    test = datalib.synth_cmnist(digit, cfg.data.test_count, noise, "test", seed, src, replace=False)
    return train, test


def train_agent(cfg: RunConfig, train: Sequence[ImageSample], seed: int, stage1: Stage1Config | None = None,
                stage2: TrainConfig | None = None, model: OrdinalEmbedder | None = None):
    if model is None:
        model, _ = train_stage1(stage1 or cfg.stage1, train, seed)
    policy, _ = train_stage2(stage2 or cfg.stage2, train, model, seed)
    return model, policy


def exemplars(cfg: RunConfig, pool: Sequence[ImageSample], mode: ExemplaryMode, seed: int):
    return datalib.build_exemplary_set(pool, cfg.data.exemplary_size, mode, seed)


def proposal_grid(cfg: RunConfig) -> ProposalGrid:
    return ProposalGrid(tuple(cfg.eval.proposal_scales), cfg.eval.proposal_stride, tuple(cfg.eval.proposal_aspects))


def ranking_corloc(cfg: RunConfig, model: OrdinalEmbedder, test: Sequence[ImageSample], anchor) -> float:
    proposals = grid_proposals(grid=proposal_grid(cfg))
    picked = [rank_localize(model, s.image, anchor, proposals) for s in test]
    return corloc(picked, [s.gt_box for s in test])


# ---------------------------------------------------------------------------
# Pipelines


@dataclass
class SourceResult:
    model: OrdinalEmbedder
    policy: Policy
    train: List[ImageSample]
    test: List[ImageSample]
    metrics: Dict[str, float]


def source_domain(cfg: RunConfig, seed: int) -> SourceResult:
    """Train both stages on one digit and evaluate localization, ordinality and ranking."""
    train, test = digit_split(cfg, cfg.data.digit, cfg.data.noise, seed)
    model, policy = train_agent(cfg, train, seed)
    anchor = prototype(gt_embeddings(model, exemplars(cfg, train, ExemplaryMode.TRAIN_PAIRS, seed).entries))
    metrics = {
        "ordacc": ord_acc(model, test, cfg.stage1.perturb, cfg.eval.ordacc_passes, seed),
        "corloc": evaluate_corloc(policy, model, test, cfg.stage2.horizon, cfg.stage2.alpha),
        "rank_corloc": ranking_corloc(cfg, model, test, anchor),
        "spearman": rank_correlation_study(model, test, StudyConfig(cfg.eval.study_boxes_per_image,
                                                                    perturb=cfg.stage1.perturb), seed, anchor),
    }
    return SourceResult(model, policy, train, test, metrics)


def transfer(cfg: RunConfig, model: OrdinalEmbedder, policy: Policy, digit: int, noise, seed: int,
             fine_tune: bool = True) -> Dict[str, float]:
    """CorLoc on the target test set before and after adaptation, and after exemplar fine-tuning.

    Adaptation sees ``adapt_count`` unlabeled target training images plus the
    exemplars, which also come from the training split, so nothing it touches
    overlaps the test set.
    """
    train, test = digit_split(cfg, digit, noise, seed)
    pool = datalib.synth_cmnist(digit, cfg.data.adapt_count, noise, "train", seed, source(), replace=False)
    stage3 = replace(cfg.stage3, seed=seed)
    out = {"before": evaluate_corloc(policy, model, test, stage3.horizon, stage3.alpha)}
    crops = exemplars(cfg, train, ExemplaryMode.TEST_CROPS, seed)
    adapted, _ = adapt_policy(policy, model, datalib.strip_boxes(pool), crops, stage3)
    out["adapt"] = evaluate_corloc(adapted, model, test, stage3.horizon, stage3.alpha)
    if fine_tune:
        pairs = exemplars(cfg, train, ExemplaryMode.TRAIN_PAIRS, seed)
        tuned, _ = fine_tune_policy(policy, model, pairs, stage3)
        out["finetune"] = evaluate_corloc(tuned, model, test, stage3.horizon, stage3.alpha)
    return out


def new_digits(cfg: RunConfig, seed: int, base: SourceResult | None = None) -> Dict[str, float]:
    """Train on the source digit, then transfer to every other digit on the same background."""
    base = base or source_domain(cfg, seed)
    metrics: Dict[str, float] = {}
    for d in cfg.data.new_digits:
        res = transfer(cfg, base.model, base.policy, d, cfg.data.noise, seed)
        metrics.update({f"{k}_d{d}": v for k, v in res.items()})
        metrics[f"ordacc_d{d}"] = ord_acc(base.model, digit_split(cfg, d, cfg.data.noise, seed)[1],
                                          cfg.stage1.perturb, cfg.eval.ordacc_passes, seed)
    for k in ("before", "adapt", "finetune", "ordacc"):
        metrics[k] = float(np.mean([metrics[f"{k}_d{d}"] for d in cfg.data.new_digits]))
    return metrics


def backgrounds(cfg: RunConfig, seed: int) -> Dict[str, float]:
    """Train on one digit with random patches, adapt to the same-class task on new backgrounds."""
    bcfg = replace(cfg, data=replace(cfg.data, digit=cfg.data.background_train_digit, noise="random_patch"))
    train, test = digit_split(bcfg, bcfg.data.digit, "random_patch", seed)
    model, policy = train_agent(bcfg, train, seed)
    metrics = {"source": evaluate_corloc(policy, model, test, cfg.stage2.horizon, cfg.stage2.alpha)}
    for noise in cfg.data.background_noises:
        res = transfer(bcfg, model, policy, cfg.data.background_eval_digit, noise, seed, fine_tune=False)
        metrics[f"before_{noise}"] = res["before"]
        metrics[f"adapt_{noise}"] = res["adapt"]
    return metrics


def reward_comparison(cfg: RunConfig, seed: int, model: OrdinalEmbedder | None = None) -> Dict[str, float]:
    """Agents trained with signed and with unsigned IoU-difference rewards, otherwise identical.

    Both use ``cfg.eval.iou_lambda2`` as the entropy weight in place of the ordinal one.
    """
    train, test = digit_split(cfg, cfg.data.digit, cfg.data.noise, seed)
    if model is None:
        model, _ = train_stage1(cfg.stage1, train, seed)
    out = {}
    for reward in ("iou_signed", "iou_unsigned"):
        policy, _ = train_stage2(replace(cfg.stage2, reward=reward, lambda2=cfg.eval.iou_lambda2), train, model, seed)
        out[reward] = evaluate_corloc(policy, model, test, cfg.stage2.horizon, cfg.stage2.alpha)
    return out


def selective(cfg: RunConfig, margin2: float, seed: int) -> Dict[str, float]:
    """Two-digit images: embedding trained with class-separated centers, agent queried for one digit."""
    src = source()
    train2 = datalib.synth_two_digit(cfg.data.train_count, seed, src, "train")
    test2 = datalib.synth_two_digit(cfg.data.test_count, seed, src, "test")
    s1 = replace(cfg.stage1, selective=True, margin2=float(margin2), epochs=cfg.eval.selective_epochs)
    model, _ = train_stage1(s1, train2, seed)
    q = cfg.data.query_digit
    train_q = [s.query(q) for s in train2]
    test_q = [s.query(q) for s in test2]
    policy, _ = train_stage2(cfg.stage2, train_q, model, seed)
    return {"corloc": evaluate_corloc(policy, model, test_q, cfg.stage2.horizon, cfg.stage2.alpha)}
