import itertools
import json
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from ordloc import evalkit
from ordloc.data import ImageSample, NoiseKind
from ordloc.embed import EmbedArch, OrdinalEmbedder
from ordloc.evalkit import (DegenerateInput, EmptyProposals, EvalReport, LengthMismatch, ProposalGrid, StudyConfig,
                            corloc, grid_proposals, rank_localize, spearman_rho)
from ordloc.geom import Box, iou_many


class IoUOracleEmbedder:
    """Embeds a box as ``(1 - IoU(box, g)) * u``, reading ``g`` off the lit square painted in the image."""

    prototype = torch.zeros(2)

    def encode(self, images):
        return images

    def embed_boxes(self, features, boxes, batch_idx=None):
        batch_idx = torch.zeros(len(boxes), dtype=torch.long) if batch_idx is None else batch_idx
        out = []
        for b, i in zip(boxes.numpy(), batch_idx.numpy()):
            ys, xs = np.nonzero(features[i, 0].numpy())
            gt = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=float)
            out.append((1 - iou_many(b[None], gt)[0]) * np.array([0.6, 0.8]))
        return torch.tensor(np.array(out))


def painted(gt: Box) -> np.ndarray:
    img = np.zeros((84, 84), np.uint8)
    x0, y0, x1, y1 = (int(v) for v in gt)
    img[y0:y1, x0:x1] = 255
    return img


def test_corloc_examples():
    g = [Box(0, 0, 10, 10), Box(20, 20, 40, 40)]
    assert corloc(g, g) == 1.0
    assert corloc([Box(50, 50, 60, 60), Box(0, 0, 5, 5)], g) == 0.0
    # half-overlapping pair: intersection 50, union 100
    assert corloc([Box(0, 0, 10, 10)], [Box(0, 0, 10, 5)]) == 1.0
    assert corloc([Box(0, 0, 10, 10)], [Box(0, 0, 10, 4.99)]) == 0.0
    with pytest.raises(LengthMismatch):
        corloc(g, g[:1])


@given(st.permutations(list(range(6))))
def test_corloc_permutation_invariant(perm):
    r = np.random.default_rng(0)
    lo = r.uniform(0, 40, size=(6, 2))
    p = np.hstack([lo, lo + r.uniform(8, 40, size=(6, 2))])
    g = p + r.normal(0, 6, size=p.shape)
    g[:, 2:] = np.maximum(g[:, 2:], g[:, :2] + 1)
    assert corloc(p[list(perm)], g[list(perm)]) == corloc(p, g)


def test_spearman_examples():
    assert spearman_rho([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6)
    assert spearman_rho([1, 5, 9], [1, 5, 9]) == pytest.approx(1.0)
    assert spearman_rho([1, 5, 9], [-1, -5, -9]) == pytest.approx(-1.0)
    # ties take average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3)
    assert spearman_rho([1, 1, 2], [1, 2, 3]) == pytest.approx(np.sqrt(3) / 2)


def test_spearman_errors():
    with pytest.raises(LengthMismatch):
        spearman_rho([1, 2], [1, 2, 3])
    with pytest.raises(LengthMismatch):
        spearman_rho([1], [1])
    with pytest.raises(DegenerateInput):
        spearman_rho([1, 1, 1], [1, 2, 3])


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40, unique=True))
def test_spearman_self_and_reverse(x):
    assert spearman_rho(x, x) == pytest.approx(1.0)
    assert spearman_rho(x, [-v for v in x]) == pytest.approx(-1.0)


def enumerate_grid(size, scales, stride, min_size=8):
    """Exact rational enumeration of clipped grid boxes."""
    out = set()
    for s in scales:
        step = Fraction(s) * Fraction(stride).limit_denominator(1000)
        n = 0
        while n * step < size:
            n += 1
        coords = [n_i * step for n_i in range(n)]
        for x, y in itertools.product(coords, coords):
            x1, y1 = min(x + s, size), min(y + s, size)
            if x1 - x >= min_size and y1 - y >= min_size:
                out.add((x, y, x1, y1))
    return out


def test_default_grid_matches_enumeration():
    boxes = grid_proposals(84, 84, ProposalGrid())
    oracle = enumerate_grid(84, (20, 28, 40, 56), 0.25)
    assert len(boxes) == len(oracle)
    assert {tuple(Fraction(v).limit_denominator(1000) for v in b.to_list()) for b in boxes} == oracle


def test_grid_examples():
    assert grid_proposals(84, 84, ProposalGrid(scales=(84,), stride=1.0)) == [Box(0, 0, 84, 84)]
    boxes = grid_proposals()
    assert len({tuple(b.to_list()) for b in boxes}) == len(boxes)
    assert all(b.inside(84, 84) and b.width >= 8 and b.height >= 8 for b in boxes)
    assert grid_proposals() == boxes


def one_image(gt):
    return ImageSample(painted(gt), gt, 4, NoiseKind.NONE, "oracle")


def test_rank_localize_with_oracle_returns_best_iou():
    gt = Box(30, 12, 58, 40)
    oracle = IoUOracleEmbedder()
    proposals = grid_proposals()
    picked = rank_localize(oracle, painted(gt), oracle.prototype, proposals)
    ious = iou_many(np.array([b.to_list() for b in proposals]), gt.as_array())
    assert iou_many(picked.as_array()[None], gt.as_array())[0] == pytest.approx(ious.max())


def test_rank_localize_edge_cases():
    oracle = IoUOracleEmbedder()
    image = painted(Box(0, 0, 28, 28))
    only = [Box(10, 10, 20, 20)]
    assert rank_localize(oracle, image, oracle.prototype, only) == only[0]
    with pytest.raises(EmptyProposals):
        rank_localize(oracle, image, oracle.prototype, [])
    # equal distances resolve to the earliest proposal
    tied = [Box(60, 60, 70, 70), Box(70, 70, 80, 80)]
    assert rank_localize(oracle, image, oracle.prototype, tied) == tied[0]
    assert rank_localize(oracle, image, oracle.prototype, tied[::-1]) == tied[1]


def test_rank_study_oracle_is_perfectly_ordinal():
    gts = [Box(10, 10, 38, 38), Box(40, 30, 68, 58)]
    oracle = IoUOracleEmbedder()
    data = [one_image(g) for g in gts]
    rho = evalkit.rank_correlation_study(oracle, data, StudyConfig(boxes_per_image=30), seed=0,
                                         prototype=oracle.prototype)
    assert rho == pytest.approx(-1.0)


def test_rank_study_untrained_is_uncorrelated():
    torch.manual_seed(0)
    model = OrdinalEmbedder(EmbedArch(channels=(4, 8, 8), hidden=16, embed_dim=8)).eval()
    r = np.random.default_rng(3)
    data = []
    for _ in range(60):
        x, y = r.integers(0, 57, 2)
        data.append(ImageSample(r.integers(0, 256, (84, 84), dtype=np.uint8), Box(x, y, x + 28, y + 28), 4,
                                  NoiseKind.NONE, "rand"))
    proto = torch.randn(8, generator=torch.Generator().manual_seed(1))
    d, u = evalkit.distance_iou_pairs(model, data, StudyConfig(), seed=0, prototype=proto)
    assert len(d) >= 1000
    assert abs(spearman_rho(d, u)) <= 0.2


def test_report_aggregation_and_persistence(tmp_path):
    runs = [{"corloc": 0.9, "ordacc": 0.8}, {"corloc": 0.7, "ordacc": 0.85}, {"corloc": 0.95, "ordacc": 0.9}]
    report = evalkit.run_experiment("demo", lambda s: runs[s], {"a": 1}, [0, 1, 2], tmp_path)
    assert report.seeds == [0, 1, 2]
    for m in ("corloc", "ordacc"):
        vals = np.array([r[m] for r in runs])
        assert abs(report.mean(m) - vals.mean()) <= 1e-9
        assert abs(report.std(m) - vals.std()) <= 1e-9
    loaded = EvalReport.load(tmp_path)
    assert loaded.runs == report.runs and loaded.config_digest == report.config_digest
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert rows[0] == "metric,mean,std,run0,run1,run2"
    assert json.loads((tmp_path / "report.json").read_text())["summary"]["corloc"]["mean"] == report.mean("corloc")
    assert report.format("corloc") == "85.0_10.8"


def test_single_run_has_zero_std():
    report = evalkit.run_experiment("one", lambda s: {"corloc": 0.5}, {}, [7])
    assert report.std("corloc") == 0.0


def test_failed_runs_are_recorded():
    def pipeline(seed):
        if seed == 1:
            raise RuntimeError("boom")
        return {"corloc": float(seed)}

    report = evalkit.run_experiment("partial", pipeline, {}, [0, 1, 2])
    assert report.seeds == [0, 2]
    assert report.failures == [{"seed": 1, "error": "RuntimeError: boom"}]
    assert report.mean("corloc") == 1.0


def test_config_digest_tracks_every_field():
    from ordloc.config import RunConfig

    base = evalkit.config_digest(RunConfig())
    assert evalkit.config_digest(RunConfig()) == base
    cfg = RunConfig()
    cfg.stage2.gamma = 0.98
    assert evalkit.config_digest(cfg) != base
    cfg = RunConfig()
    cfg.data.new_digits = (0, 1)
    assert evalkit.config_digest(cfg) != base


def test_plot_report_writes_png(tmp_path):
    report = evalkit.run_experiment("plot", lambda s: {"before": 0.5 + s / 10, "after": 0.9}, {}, [0, 1])
    path = evalkit.plot_report(report, tmp_path / "fig.png")
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
