"""Scatter of embedding distance against IoU for a trained and an untrained embedder."""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from ordloc import experiments, seeding
from ordloc.agent import gt_embeddings
from ordloc.config import parse_config
from ordloc.data import ExemplaryMode
from ordloc.embed import OrdinalEmbedder, prototype, train_stage1
from ordloc.evalkit import StudyConfig, distance_iou_pairs, spearman_rho


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/experiments/rank-scatter.png")
    args = p.parse_args()
    cfg = parse_config(args.config)
    train, test = experiments.digit_split(cfg, cfg.data.digit, cfg.data.noise, args.seed)
    trained, _ = train_stage1(cfg.stage1, train, args.seed)
    torch.manual_seed(seeding.derive_seed(args.seed, "init", "untrained-control"))
    blank = OrdinalEmbedder(cfg.stage1.arch).eval()
    study = StudyConfig(cfg.eval.study_boxes_per_image, perturb=cfg.stage1.perturb)
    exemplary = experiments.exemplars(cfg, train, ExemplaryMode.TRAIN_PAIRS, args.seed).entries
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5), sharey=False)
    for ax, (name, model) in zip(axes, [("trained", trained), ("untrained", blank)]):
        anchor = prototype(gt_embeddings(model, exemplary))
        d, u = distance_iou_pairs(model, test, study, args.seed, anchor)
        ax.scatter(u, d, s=3, alpha=0.4)
        ax.set_title(f"{name}: rho = {spearman_rho(d, u):.2f}")
        ax.set_xlabel("IoU with ground truth")
        ax.set_ylabel("distance to prototype")
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
