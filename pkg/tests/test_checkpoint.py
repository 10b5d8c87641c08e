import json

import pytest
import torch

from ordloc import checkpoint
from ordloc.agent import Policy, PolicyArch, param_digest
from ordloc.embed import EmbedArch, OrdinalEmbedder

SMALL = EmbedArch(channels=(4, 8, 8), hidden=16, embed_dim=8)


def test_embedder_round_trip_is_bit_exact(tmp_path):
    torch.manual_seed(0)
    model = OrdinalEmbedder(SMALL)
    checkpoint.save_embedder(model, tmp_path / "e")
    loaded = checkpoint.load_embedder(tmp_path / "e")
    assert loaded.arch == SMALL
    assert param_digest(loaded) == param_digest(model)
    assert checkpoint.param_digest_dir(tmp_path / "e") == checkpoint.param_digest_dir(
        checkpoint.save_embedder(loaded, tmp_path / "again"))


def test_tensor_files_are_little_endian_float32(tmp_path):
    policy = Policy(PolicyArch(input_dim=12, hidden=4))
    checkpoint.save_policy(policy, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    meta = manifest["tensors"]["head.weight"]
    assert meta["shape"] == [14, 4]
    assert (tmp_path / meta["file"]).stat().st_size == 14 * 4 * 4
    assert manifest["kind"] == "policy" and manifest["arch"]["hidden"] == 4


def test_policy_arch_mismatch_rejected(tmp_path):
    checkpoint.save_policy(Policy(PolicyArch(input_dim=12, hidden=4)), tmp_path)
    assert param_digest(checkpoint.load_policy(tmp_path)) != ""
    with pytest.raises(checkpoint.ArchitectureMismatch):
        checkpoint.load_policy(tmp_path, expected_arch=PolicyArch(input_dim=12, hidden=8))


def test_kind_and_shape_mismatch_rejected(tmp_path):
    checkpoint.save_policy(Policy(PolicyArch(input_dim=12, hidden=4)), tmp_path)
    with pytest.raises(checkpoint.ArchitectureMismatch):
        checkpoint.load_into(OrdinalEmbedder(SMALL), tmp_path, "embedder", SMALL)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["tensors"]["head.bias"]["shape"] = [13]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(checkpoint.ArchitectureMismatch):
        checkpoint.load_policy(tmp_path)


def test_missing_or_foreign_directory(tmp_path):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_policy(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"format": 99}))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.read_manifest(tmp_path)
