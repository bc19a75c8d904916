import pytest
import torch

from tricod.config import ModelConfig, tiny_model_config
from tricod.decoder import HMU, MixedScaleDecoder
from tricod.layers import count_trainable


class TestIteration:
    @pytest.mark.parametrize("G", [2, 4, 6, 8])
    def test_channel_accounting(self, G):
        C = 8
        hmu = HMU(16, G, C)
        ins = [t[0][0].in_channels for t in hmu.transforms]
        outs = [t[-1][0].out_channels for t in hmu.transforms]
        assert ins == [C] + [2 * C] * (G - 1)
        assert outs == [3 * C] * (G - 1) + [2 * C]

    def test_default_widths(self):
        hmu = HMU(64, 6, 32).eval()
        with torch.no_grad():
            parts = hmu.iterate(hmu.expand(torch.randn(1, 64, 6, 6)))
        assert hmu.expand[0].out_channels == 192
        assert len(hmu.transforms) == 6
        assert (len(parts.exchange), len(parts.modulation), len(parts.payload)) == (5, 6, 6)
        assert all(t.shape[1] == 32 for t in parts.exchange + parts.modulation + parts.payload)

    def test_two_groups(self):
        C = 4
        hmu = HMU(8, 2, C).eval()
        with torch.no_grad():
            parts = hmu.iterate(hmu.expand(torch.randn(1, 8, 5, 5)))
        assert len(parts.exchange) == 1
        assert sum(t.shape[1] for t in parts.modulation + parts.payload) == 2 * 2 * C

    def test_zero_input_zero_output(self):
        hmu = HMU(8, 3, 4).eval()
        with torch.no_grad():
            parts = hmu.iterate(torch.zeros(1, 12, 4, 4))
        # eval-mode BN with default statistics maps 0 to 0
        assert all(torch.count_nonzero(t) == 0 for t in parts.exchange + parts.modulation + parts.payload)

    def test_wrong_width(self):
        hmu = HMU(8, 3, 4)
        with pytest.raises(ValueError):
            hmu.iterate(torch.zeros(1, 11, 4, 4))

    def test_needs_two_groups(self):
        with pytest.raises(ValueError):
            HMU(8, 1, 4)


class TestForward:
    def test_shape(self):
        hmu = HMU(64, 6, 32).eval()
        with torch.no_grad():
            assert hmu(torch.randn(1, 64, 24, 24)).shape == (1, 64, 24, 24)

    def test_alpha_ones_is_unmodulated(self):
        hmu = HMU(8, 3, 4).eval()
        x = torch.randn(2, 8, 6, 6)
        with torch.no_grad():
            parts = hmu.iterate(hmu.expand(x))
            manual = hmu.act(x + hmu.fuse_bn(hmu.fuse(torch.cat(parts.payload, 1))))
            got = hmu(x, alpha=torch.ones(1, 12, 1, 1))
        torch.testing.assert_close(got, manual, rtol=0, atol=0)

    def test_alpha_is_channel_vector(self):
        hmu = HMU(8, 3, 4).eval()
        with torch.no_grad():
            alpha = hmu.modulation_vector(hmu.iterate(hmu.expand(torch.randn(2, 8, 6, 6))))
        assert alpha.shape == (2, 12, 1, 1)
        assert alpha.min() > 0 and alpha.max() < 1

    def test_residual_when_last_transform_zeroed(self):
        hmu = HMU(8, 3, 4).eval()
        with torch.no_grad():
            hmu.fuse.weight.zero_()
            x = torch.randn(2, 8, 5, 5)
            torch.testing.assert_close(hmu(x), torch.relu(x))

    def test_batch_composition_invariance(self):
        hmu = HMU(8, 3, 4).eval()
        x = torch.randn(3, 8, 5, 5)
        with torch.no_grad():
            torch.testing.assert_close(hmu(x)[1:2], hmu(x[1:2]), rtol=1e-6, atol=1e-6)

    def test_gate_bottleneck(self):
        hmu = HMU(64, 6, 32)
        assert hmu.gate[1].out_channels == 48 and hmu.gate[3].out_channels == 192


class TestDecoder:
    def _feats(self, c, s=64, batch=1):
        return [torch.randn(batch, c, s >> k, s >> k) for k in range(1, 6)]

    def test_output_size(self):
        dec = MixedScaleDecoder(tiny_model_config()).eval()
        with torch.no_grad():
            assert dec(self._feats(32), (64, 64)).shape == (1, 1, 64, 64)

    def test_zero_features_give_half(self):
        dec = MixedScaleDecoder(tiny_model_config()).eval()
        with torch.no_grad():
            for m in dec.modules():
                if isinstance(m, torch.nn.Conv2d) and m.bias is not None:
                    m.bias.zero_()
            logits = dec([torch.zeros_like(f) for f in self._feats(32)], (64, 64))
        torch.testing.assert_close(torch.sigmoid(logits), torch.full_like(logits, 0.5))

    def test_wrong_level_count(self):
        dec = MixedScaleDecoder(tiny_model_config())
        with pytest.raises(ValueError):
            dec(self._feats(32)[:4], (64, 64))

    def test_intermediate_outputs(self):
        dec = MixedScaleDecoder(tiny_model_config()).eval()
        with torch.no_grad():
            _, outs = dec(self._feats(32), (64, 64), return_intermediate=True)
        assert [o.shape[-1] for o in outs] == [32, 16, 8, 4, 2]

    def test_baseline_units(self):
        cfg = ModelConfig(decoder_unit="cbr_baseline", base_channels=16, fu_repeat=3, decoder_kernel_size=5)
        dec = MixedScaleDecoder(cfg)
        assert all(len(u) == 3 and u[0][0].kernel_size == (5, 5) for u in dec.units)

    def test_head_widths(self):
        dec = MixedScaleDecoder(ModelConfig())
        assert dec.head[0].channel_pairs == ((64, 32),)
        assert dec.head[1].in_channels == 32 and dec.head[1].out_channels == 1

    def test_group_count_monotone_parameters(self):
        counts = [count_trainable(HMU(64, G, 32)) for G in (2, 4, 6, 8)]
        assert counts == sorted(counts) and len(set(counts)) == 4
