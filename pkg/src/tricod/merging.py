"""Scale merging: bring auxiliary-scale features onto the main-scale grid and fuse them."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvBNReLU

MAIN_SCALE = 1.0


def scale_key(scale):
    return f"x{int(round(scale * 10)):02d}"


def hybrid_downsample(f, target_hw):
    """Mean of adaptive max-pooling and adaptive average-pooling to ``target_hw``."""
    return 0.5 * (F.adaptive_max_pool2d(f, target_hw) + F.adaptive_avg_pool2d(f, target_hw))


def bilinear_resize(f, target_hw):
    return F.interpolate(f, size=tuple(target_hw), mode="bilinear", align_corners=False)


def resample_to_main(f, source_scale, target_hw):
    target_hw = tuple(int(v) for v in target_hw)
    src_hw = tuple(f.shape[-2:])
    if source_scale > MAIN_SCALE:
        if target_hw[0] > src_hw[0] or target_hw[1] > src_hw[1]:
            raise ValueError(f"cannot downsample {src_hw} to larger grid {target_hw}")
        return hybrid_downsample(f, target_hw)
    if source_scale < MAIN_SCALE:
        return bilinear_resize(f, target_hw)
    if src_hw != target_hw:
        raise ValueError(f"main-scale feature has size {src_hw}, expected {target_hw}")
    return f


class SIU(nn.Module):
    """Attention-weighted fusion of per-scale features at one pyramid level.

    Each auxiliary branch gets a 3x3 CBR before and after resampling, the main
    branch gets one 3x3 CBR.  The attention generator maps the concatenated
    aligned branches to one logit per scale; a softmax over scales gives the
    per-pixel weights.
    """

    def __init__(self, channels, scales=(0.5, 1.0, 1.5)):
        super().__init__()
        self.scales = tuple(sorted(scales))
        if MAIN_SCALE not in self.scales or len(self.scales) < 2:
            raise ValueError("SIU needs the main scale plus at least one auxiliary scale")
        aux = [s for s in self.scales if s != MAIN_SCALE]
        self.pre = nn.ModuleDict({scale_key(s): ConvBNReLU(channels, channels, 3) for s in aux})
        self.post = nn.ModuleDict({scale_key(s): ConvBNReLU(channels, channels, 3) for s in aux})
        self.main = ConvBNReLU(channels, channels, 3)
        n = len(self.scales)
        self.attention = nn.Sequential(
            ConvBNReLU(n * channels, channels, 3),
            ConvBNReLU(channels, channels, 3),
            nn.Conv2d(channels, n, 1),
        )

    def branches(self, feats):
        target_hw = feats[MAIN_SCALE].shape[-2:]
        out = []
        for s in self.scales:
            if s == MAIN_SCALE:
                out.append(self.main(feats[s]))
            else:
                k = scale_key(s)
                out.append(self.post[k](resample_to_main(self.pre[k](feats[s]), s, target_hw)))
        return out

    def attention_weights(self, branches):
        return torch.softmax(self.attention(torch.cat(branches, dim=1)), dim=1)

    def forward(self, feats, return_attention=False):
        branches = self.branches(feats)
        attn = self.attention_weights(branches)
        fused = sum(attn[:, i:i + 1] * b for i, b in enumerate(branches))
        if return_attention:
            return fused, attn
        return fused


class AdditionMerge(nn.Module):
    def __init__(self, scales=(0.5, 1.0, 1.5)):
        super().__init__()
        self.scales = tuple(sorted(scales))

    def forward(self, feats, return_attention=False):
        target_hw = feats[MAIN_SCALE].shape[-2:]
        fused = sum(resample_to_main(feats[s], s, target_hw) for s in self.scales)
        return (fused, None) if return_attention else fused


class MainScaleOnly(nn.Module):
    def forward(self, feats, return_attention=False):
        return (feats[MAIN_SCALE], None) if return_attention else feats[MAIN_SCALE]


def make_merge_unit(strategy, channels, scales):
    if tuple(scales) == (MAIN_SCALE,):
        return MainScaleOnly()
    if strategy == "siu":
        return SIU(channels, scales)
    if strategy == "addition":
        return AdditionMerge(scales)
    raise ValueError(f"unknown merge strategy {strategy!r}")


class ScaleMergingLayer(nn.Module):
    def __init__(self, strategy, channels, scales, num_levels=5):
        super().__init__()
        self.units = nn.ModuleList([make_merge_unit(strategy, channels, scales) for _ in range(num_levels)])

    def forward(self, encoded, return_attention=False):
        """``encoded`` maps scale -> list of per-level features."""
        fused, attns = [], []
        for i, unit in enumerate(self.units):
            f, a = unit({s: feats[i] for s, feats in encoded.items()}, return_attention=True)
            fused.append(f)
            attns.append(a)
        return (fused, attns) if return_attention else fused
