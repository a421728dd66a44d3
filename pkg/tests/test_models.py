import pytest
import torch

from ctsfda.datamodel import BENCHMARK_SPECS, ShapeError
from ctsfda.models import Backbone, PlainWarp, UNet, VectorQuantizer, WarpBlock, count_parameters, reconstruct
from ctsfda.params import (CheckpointError, assert_frozen, fingerprint, freeze, load_checkpoint, read_manifest,
                           save_checkpoint)


@pytest.mark.parametrize("name", sorted(BENCHMARK_SPECS))
def test_unet_and_warp_preserve_benchmark_shapes(name):
    spec = BENCHMARK_SPECS[name]
    torch.manual_seed(0)
    img = torch.randn(2, spec.c, spec.H, spec.W)
    unet = UNet(spec.c, base_channels=4, depth=3).eval()
    assert unet(img).shape == img.shape
    out = WarpBlock(spec.c).eval()(img)
    assert out.reconstructed.shape == img.shape


def test_mfd_batch_of_four():
    img = torch.randn(4, 1, 64, 80)
    assert UNet(1, 4).eval()(img).shape == (4, 1, 64, 80)
    assert WarpBlock(1)(img).reconstructed.shape == (4, 1, 64, 80)


def test_unet_rejects_indivisible_dims():
    with pytest.raises(ShapeError):
        UNet(1, 4, depth=3)(torch.randn(1, 1, 12, 16))


def test_unet_eval_is_deterministic():
    net = UNet(1, 4).eval()
    img = torch.randn(3, 1, 16, 16)
    assert torch.equal(net(img), net(img))


def test_warp_block_size_is_near_reference_budget():
    # the warp block is meant to stay tiny, around 8k parameters
    assert 6000 < count_parameters(WarpBlock(1)) < 12000


def test_code_indices_and_aux_losses():
    torch.manual_seed(1)
    wb = WarpBlock(1, n_codes=16)
    out = wb(torch.randn(5, 1, 16, 16) * 4)
    assert out.code_indices.shape == (5, 8, 8)
    assert out.code_indices.min() >= 0 and out.code_indices.max() < 16
    assert out.codebook_loss.item() >= 0 and out.commitment_loss.item() >= 0


def test_quantizer_matches_brute_force_nearest_neighbour():
    torch.manual_seed(2)
    vq = VectorQuantizer(n_codes=12, code_dim=3)
    with torch.no_grad():
        vq.codebook.normal_()
    z = torch.randn(2, 3, 4, 5, dtype=torch.float32)
    _, _, _, idx = vq(z)
    flat = z.permute(0, 2, 3, 1).reshape(-1, 3).double()
    book = vq.codebook.detach().double()
    for row, chosen in zip(flat, idx.flatten()):
        dists = [float(((row - book[j]) ** 2).sum()) for j in range(12)]
        best = min(dists)
        assert dists[int(chosen)] <= best + 1e-9


def test_straight_through_gradient_reaches_encoder():
    torch.manual_seed(3)
    wb = WarpBlock(1)
    img = torch.randn(4, 1, 16, 16)
    out = wb(img)
    loss = (out.reconstructed - img).pow(2).mean()   # reconstruction term only, no commitment
    loss.backward()
    grad = sum(p.grad.abs().sum() for p in wb.encoder.parameters())
    assert grad > 0


def test_plain_warp_adapter():
    net = PlainWarp(UNet(1, 4, 2)).eval()
    out, aux = reconstruct(net, torch.randn(2, 1, 8, 8))
    assert out.shape == (2, 1, 8, 8) and aux.item() == 0.0


def test_backbone_shapes_and_features():
    bb = Backbone(1, 3, 5120, (8, 16, 16), kernel_size=8).eval()
    x = torch.randn(32, 1, 5120)
    logits = bb(x)
    assert logits.shape == (32, 3)
    assert torch.isfinite(bb(torch.zeros(2, 1, 5120))).all()
    assert bb.features(x[:3]).shape == (3, bb.feature_dim) == (3, 16)
    with pytest.raises(ShapeError):
        bb(torch.randn(2, 1, 100))


def test_default_backbone_widths():
    bb = Backbone(9, 6, 128)
    assert bb.feature_dim == 128
    assert bb(torch.randn(2, 9, 128)).shape == (2, 6)


def test_freeze_contract():
    bb = freeze(Backbone(1, 3, 64, (4, 4, 4)))
    assert assert_frozen(bb)
    assert not any(p.requires_grad for p in bb.parameters())
    assert not bb.training
    with torch.no_grad():
        bb.classifier.weight[0, 0] += 1e-3
    assert not assert_frozen(bb)


def test_fingerprint_tracks_any_change():
    wb = WarpBlock(1)
    fp = fingerprint(wb)
    assert fingerprint(wb) == fp
    with torch.no_grad():
        wb.quantizer.codebook[0, 0] += 1.0
    assert fingerprint(wb) != fp


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(4)
    bb = Backbone(2, 4, 50, (4, 8, 8))
    bb.train()
    bb(torch.randn(8, 2, 50))     # populate running statistics
    freeze(bb)
    save_checkpoint(bb, tmp_path / "bb", meta={"stage": "backbone"})
    manifest = read_manifest(tmp_path / "bb")
    assert manifest["fingerprint"] == fingerprint(bb)
    assert all(e["frozen"] for e in manifest["arrays"])
    clone = load_checkpoint(Backbone(2, 4, 50, (4, 8, 8)), tmp_path / "bb")
    assert fingerprint(clone) == fingerprint(bb)
    assert assert_frozen(clone)
    for (n1, t1), (n2, t2) in zip(bb.state_dict().items(), clone.state_dict().items()):
        assert n1 == n2 and torch.equal(t1, t2)
    raw = (tmp_path / "bb" / manifest["arrays"][0]["file"]).read_bytes()
    assert raw == bb.state_dict()[manifest["arrays"][0]["name"]].numpy().astype("<f4").tobytes()


def test_checkpoint_architecture_mismatch(tmp_path):
    save_checkpoint(WarpBlock(1), tmp_path / "w")
    with pytest.raises(CheckpointError):
        load_checkpoint(WarpBlock(1, hidden=8), tmp_path / "w")
    with pytest.raises(CheckpointError):
        load_checkpoint(WarpBlock(1), tmp_path / "missing")
