import pytest
import torch

from conftest import fd_rel_err
from texterase import segmim
from texterase.config import preset
from texterase.model import Eraser


class TestMaskGeneration:
    def test_reference_count_512(self):
        m = segmim.generate_mim_mask(512, 512, 0.6, 32, seed=1)
        grid = m.mask[::32, ::32]
        assert grid.sum() == 154  # round(0.6 * 256)
        assert grid.numel() == 256

    def test_patch_alignment(self):
        m = segmim.generate_mim_mask(128, 128, 0.4, 32, seed=2)
        blocks = m.mask.view(4, 32, 4, 32)
        per_block = blocks.permute(0, 2, 1, 3).reshape(16, -1)
        assert ((per_block == per_block[:, :1]).all(dim=1)).all()

    def test_extreme_ratios(self):
        assert segmim.generate_mim_mask(64, 64, 0.0, 32, 0).mask.sum() == 0
        assert segmim.generate_mim_mask(64, 64, 1.0, 32, 0).mask.min() == 1

    def test_seed_determinism(self):
        a = segmim.generate_mim_mask(64, 64, 0.5, 16, seed=7)
        b = segmim.generate_mim_mask(64, 64, 0.5, 16, seed=7)
        assert torch.equal(a.mask, b.mask)
        c = segmim.generate_mim_mask(64, 64, 0.5, 16, seed=8)
        assert not torch.equal(a.mask, c.mask)

    def test_indivisible_size(self):
        with pytest.raises(ValueError):
            segmim.generate_mim_mask(100, 64, 0.5, 32, 0)


class TestApplyMask:
    def test_ratio_zero_identity(self):
        img = torch.rand(1, 3, 64, 64)
        m = segmim.generate_mim_mask(64, 64, 0.0, 32, 0)
        assert torch.equal(segmim.apply_mask(img, m), img)

    def test_ratio_one_zeroes(self):
        img = torch.rand(1, 3, 64, 64)
        m = segmim.generate_mim_mask(64, 64, 1.0, 32, 0)
        assert segmim.apply_mask(img, m).abs().max() == 0

    def test_unmasked_pixels_untouched(self):
        img = torch.rand(1, 3, 64, 64)
        m = segmim.generate_mim_mask(64, 64, 0.5, 16, 3)
        out = segmim.apply_mask(img, m)
        keep = m.mask == 0
        assert torch.equal(out[..., keep], img[..., keep])


class TestHeads:
    def test_seg_head_shape_and_range(self):
        head = segmim.SegHead(128)
        f4 = torch.rand(1, 2, 2, 128)
        out = head(f4)
        assert out.shape == (1, 1, 64, 64)
        assert ((out > 0) & (out < 1)).all()

    def test_seg_head_zero_weights_uniform_half(self):
        head = segmim.SegHead(16)
        with torch.no_grad():
            head.proj.weight.zero_()
            head.proj.bias.zero_()
        out = head(torch.rand(1, 2, 2, 16))
        assert torch.allclose(out, torch.full_like(out, 0.5))

    def test_seg_head_patch_layout(self):
        # Each stride-32 location expands into its own 32x32 patch.
        head = segmim.SegHead(4)
        with torch.no_grad():
            head.proj.weight.zero_()
            head.proj.bias.copy_(torch.arange(1024.0) * 0 + 1)
        f4 = torch.rand(1, 2, 3, 4)
        assert head(f4).shape == (1, 1, 64, 96)

    def test_seg_head_channel_mismatch(self):
        with pytest.raises(ValueError):
            segmim.SegHead(64)(torch.rand(1, 2, 2, 32))

    def test_recon_head(self):
        head = segmim.ReconHead(4)
        out = head(torch.rand(2, 16, 16, 4))
        assert out.shape == (2, 3, 16, 16)
        with torch.no_grad():
            head.conv.weight.zero_()
            head.conv.bias.zero_()
        assert head(torch.rand(1, 8, 8, 4)).abs().max() == 0

    def test_recon_head_gradient(self):
        head = segmim.ReconHead(2).double()
        f5 = torch.rand(1, 8, 8, 2, dtype=torch.float64)
        probe = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        err = fd_rel_err(lambda: (head(f5) * probe).sum(), head.conv.weight,
                         n_coords=10)
        assert err < 1e-4


class TestMimLoss:
    def test_zero_on_perfect(self):
        img = torch.rand(1, 3, 64, 64)
        m = segmim.generate_mim_mask(64, 64, 0.5, 32, 1)
        assert segmim.mim_loss(img, img.clone(), m) == 0

    def test_invariant_to_unmasked_perturbation(self):
        img = torch.rand(1, 3, 64, 64)
        rec = torch.rand(1, 3, 64, 64)
        m = segmim.generate_mim_mask(64, 64, 0.5, 16, 2)
        base = segmim.mim_loss(img, rec, m)
        rec2 = rec.clone()
        rec2[..., m.mask == 0] += torch.rand_like(rec2[..., m.mask == 0])
        assert segmim.mim_loss(img, rec2, m).item() == base.item()

    def test_uniform_offset(self):
        img = torch.rand(1, 3, 64, 64)
        m = segmim.generate_mim_mask(64, 64, 0.5, 32, 3)
        rec = img.clone()
        rec[..., m.mask == 1] += 0.2
        assert abs(segmim.mim_loss(img, rec, m).item() - 0.2) < 1e-6

    def test_empty_mask_error(self):
        img = torch.rand(1, 3, 64, 64)
        m = segmim.generate_mim_mask(64, 64, 0.0, 32, 0)
        with pytest.raises(ValueError, match="no masked pixels"):
            segmim.mim_loss(img, img, m)


class TestPretrainLoss:
    def test_zero_on_perfect(self):
        img = torch.rand(1, 3, 64, 64)
        seg = (torch.rand(1, 1, 64, 64) > 0.5).float()
        m = segmim.generate_mim_mask(64, 64, 0.5, 32, 1)
        total, l_dice, l_mim = segmim.pretrain_loss(seg, seg, img, img.clone(), m)
        assert total < 1e-5

    def test_sum_of_parts_unweighted(self):
        img, rec = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
        seg = torch.rand(1, 1, 64, 64)
        gt = (torch.rand(1, 1, 64, 64) > 0.5).float()
        m = segmim.generate_mim_mask(64, 64, 0.5, 32, 1)
        total, l_dice, l_mim = segmim.pretrain_loss(seg, gt, img, rec, m)
        assert torch.allclose(total, l_dice + l_mim)

    def test_gradient_reaches_encoder_and_decoder(self):
        model = Eraser(preset("nano"))
        img = torch.rand(1, 3, 64, 64)
        seg_gt = (torch.rand(1, 1, 64, 64) > 0.5).float()
        m = segmim.generate_mim_mask(64, 64, 0.6, 32, 4)
        out = model.forward_pretrain(img, m)
        total, _, _ = segmim.pretrain_loss(out["seg"], seg_gt, img,
                                           out["recon"], m)
        total.backward()
        enc_grads = [p.grad for p in model.encoder.parameters()]
        dec_grads = [p.grad for p in model.decoder.parameters()]
        assert any(g is not None and g.abs().sum() > 0 for g in enc_grads)
        assert any(g is not None and g.abs().sum() > 0 for g in dec_grads)
        assert model.encoder.mask_token.grad.abs().sum() > 0

    def test_seg_only_leaves_decoder_untouched(self):
        model = Eraser(preset("nano"))
        img = torch.rand(1, 3, 64, 64)
        seg_gt = (torch.rand(1, 1, 64, 64) > 0.5).float()
        from texterase.losses import dice_loss
        loss = dice_loss(model.forward_seg_only(img), seg_gt)
        loss.backward()
        assert all(p.grad is None for p in model.decoder.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0
                   for p in model.encoder.parameters())
