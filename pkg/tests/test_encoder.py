import pytest
import torch
import torch.nn as nn

from tricod.encoder import ASPP, CompressionNet, ResNet50Backbone, TinyBackbone, TripletEncoder
from tricod.config import tiny_model_config
from tricod.layers import ConvBNReLU, ScaleBatchNorm2d, StackedCBR, count_trainable
from tricod.model import TripletNet


class TestStackedCBR:
    def test_single_block(self):
        s = StackedCBR(64, 32, 1, 3)
        assert s.channel_pairs == ((64, 32),)
        assert len(s) == 1

    def test_three_blocks_kernel5(self):
        s = StackedCBR(128, 128, 3, 5)
        assert s.channel_pairs == ((128, 128),) * 3
        assert all(m[0].kernel_size == (5, 5) for m in s)

    def test_sliding_window_widths(self):
        assert StackedCBR(16, 8, 3).channel_pairs == ((16, 8), (8, 8), (8, 8))

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_spatial_size_preserved(self, k):
        x = torch.randn(1, 4, 9, 13)
        assert StackedCBR(4, 6, 2, k)(x).shape == (1, 6, 9, 13)

    @pytest.mark.parametrize("blocks,k", [(0, 3), (1, 4)])
    def test_rejects(self, blocks, k):
        with pytest.raises(ValueError):
            StackedCBR(4, 4, blocks, k)

    def test_closed_form_parameters(self):
        # bias-free conv + BN affine
        s = StackedCBR(10, 6, 2, 3)
        assert count_trainable(s) == (10 * 6 * 9 + 12) + (6 * 6 * 9 + 12)


class TestBackbones:
    def test_resnet50_channels_and_strides(self):
        with torch.device("meta"):
            bb = ResNet50Backbone()
            feats = bb(torch.empty(1, 3, 384, 384))
        assert [f.shape[1] for f in feats] == [64, 256, 512, 1024, 2048]
        assert [f.shape[-1] for f in feats] == [192, 96, 48, 24, 12]

    def test_resnet50_576(self):
        with torch.device("meta"):
            feats = ResNet50Backbone()(torch.empty(1, 3, 576, 576))
        assert [f.shape[-1] for f in feats] == [288, 144, 72, 36, 18]

    def test_resnet50_level1_is_pre_maxpool(self):
        torch.manual_seed(0)
        bb = ResNet50Backbone().eval()
        x = torch.randn(1, 3, 64, 64)
        with torch.no_grad():
            c1 = bb(x)[0]
            stem = bb.relu(bb.bn1(bb.conv1(x)))
        assert torch.equal(c1, stem)
        assert c1.shape[-1] == 32

    def test_tiny(self):
        feats = TinyBackbone()(torch.randn(2, 3, 64, 64))
        assert [tuple(f.shape[1:]) for f in feats] == [(8, 32, 32), (16, 16, 16), (32, 8, 8), (64, 4, 4),
                                                      (128, 2, 2)]

    def test_missing_pretrained_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ResNet50Backbone().load_pretrained(tmp_path / "absent.pth")

    def test_pretrained_loading_skips_classifier(self, tmp_path):
        import torchvision
        ref = torchvision.models.resnet50(weights=None)
        torch.save(ref.state_dict(), tmp_path / "r50.pth")
        bb = ResNet50Backbone()
        bb.load_pretrained(tmp_path / "r50.pth")
        ours = dict(bb.named_parameters())
        assert torch.equal(ours["layer4.2.conv3.weight"], ref.layer4[2].conv3.weight)


class TestASPP:
    def test_branch_count_and_shape(self):
        a = ASPP(128, 32)
        assert a.num_branches == 5
        assert a(torch.randn(2, 128, 5, 7)).shape == (2, 32, 5, 7)

    def test_kernels_and_dilations(self):
        a = ASPP(16, 8)
        convs = [b[0] for b in a.branches] + [a.global_branch[0]]
        assert [c.kernel_size[0] for c in convs] == [1, 3, 3, 3, 1]
        assert [c.dilation[0] for c in convs] == [1, 2, 5, 7, 1]

    def test_global_branch_on_constant_input(self):
        a = ASPP(4, 3).eval()
        x = torch.full((1, 4, 6, 6), 0.7)
        with torch.no_grad():
            g = a.global_branch(nn.functional.adaptive_avg_pool2d(x, 1))
            up = nn.functional.interpolate(g, size=(6, 6), mode="bilinear", align_corners=False)
        assert torch.allclose(up, g.expand_as(up))


class TestCompression:
    def test_uniform_width(self):
        net = CompressionNet((8, 16, 32, 64, 128), 24).eval()
        feats = TinyBackbone()(torch.randn(1, 3, 64, 64))
        out = net(feats)
        assert [f.shape[1] for f in out] == [24] * 5
        assert [f.shape[-2:] for f in out] == [f.shape[-2:] for f in feats]
        assert all(isinstance(m, ConvBNReLU) for m in net.levels[:4])
        assert isinstance(net.levels[4], ASPP)


class TestTripletEncoder:
    def test_weight_sharing(self):
        enc = TripletEncoder("tiny", 16).eval()
        img = torch.randn(1, 3, 64, 64)
        with torch.no_grad():
            out = enc.encode_triplet({0.5: img[..., :32, :32], 1.0: img, 1.5: torch.randn(1, 3, 96, 96)})
            alone = enc(img)
        for a, b in zip(out[1.0], alone):
            assert torch.equal(a, b)

    def test_level1_sizes_at_384(self):
        with torch.device("meta"):
            enc = TripletEncoder("resnet50", 64).eval()
            out = enc.encode_triplet({0.5: torch.empty(1, 3, 192, 192), 1.0: torch.empty(1, 3, 384, 384),
                                      1.5: torch.empty(1, 3, 576, 576)})
        assert out[1.5][0].shape[-1] == 288 and out[0.5][0].shape[-1] == 96
        assert all(f.shape[1] == 64 for feats in out.values() for f in feats)

    def test_single_scale(self):
        enc = TripletEncoder("tiny", 8)
        assert list(enc.encode_triplet({1.0: torch.randn(2, 3, 64, 64)})) == [1.0]

    def test_parameters_independent_of_scale_count(self):
        enc = TripletEncoder("tiny", 8)
        before = count_trainable(enc)
        enc.encode_triplet({s: torch.randn(2, 3, 64, 64) for s in (0.5, 1.0, 1.5)})
        assert count_trainable(enc) == before


class TestScaleNorm:
    def test_eval_uses_scale_statistics(self):
        bn = ScaleBatchNorm2d(2, (0.5,))
        bn.running_mean_x0_5.fill_(1.0)
        bn.eval()
        x = torch.ones(1, 2, 3, 3)
        with torch.no_grad():
            assert float(bn(x).abs().max()) > 0.9
            bn.active_scale = 0.5
            assert float(bn(x).abs().max()) == 0.0

    def test_training_updates_only_active_scale(self):
        bn = ScaleBatchNorm2d(2, (0.5, 1.5))
        bn.active_scale = 1.5
        bn(torch.randn(4, 2, 3, 3) + 3)
        assert float(bn.running_mean_x1_5.mean()) > 0.2
        assert float(bn.running_mean.abs().max()) == 0 and float(bn.running_mean_x0_5.abs().max()) == 0
        assert int(bn.num_batches_tracked_x1_5) == 1

    def test_plain_state_dict_loads(self):
        plain = torch.nn.BatchNorm2d(3)
        plain.running_mean.fill_(0.5)
        bn = ScaleBatchNorm2d(3, (0.5,))
        bn.load_state_dict(plain.state_dict())
        torch.testing.assert_close(bn.running_mean_x0_5, plain.running_mean)

    def test_encoder_converted(self):
        model = TripletNet(tiny_model_config())
        assert all(isinstance(m, ScaleBatchNorm2d) for m in model.encoder.modules()
                   if isinstance(m, torch.nn.BatchNorm2d))
        plain = TripletNet(tiny_model_config(scale_specific_norm=False))
        assert not any(isinstance(m, ScaleBatchNorm2d) for m in plain.modules())

    def test_active_scale_reset(self):
        model = TripletNet(tiny_model_config()).eval()
        with torch.no_grad():
            model(torch.randn(1, 3, 64, 64))
        assert all(m.active_scale == 1.0 for m in model.modules() if isinstance(m, ScaleBatchNorm2d))
