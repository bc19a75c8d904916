"""Shared triplet encoder: backbone feature extraction plus per-level channel compression."""
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import resnet50

from .layers import ConvBNReLU, ScaleBatchNorm2d, set_active_scale

RESNET50_CHANNELS = (64, 256, 512, 1024, 2048)
TINY_CHANNELS = (8, 16, 32, 64, 128)
STRIDES = (2, 4, 8, 16, 32)


class ResNet50Backbone(nn.Module):
    """ResNet-50 truncated after ``layer4``.

    Level 1 is the stem output taken before the max-pool, levels 2-5 are the
    outputs of ``layer1``..``layer4``.  Parameter names follow torchvision so a
    torchvision ``resnet50`` state dict loads directly (``fc.*`` is dropped).
    """

    channels = RESNET50_CHANNELS

    def __init__(self):
        super().__init__()
        net = resnet50(weights=None)
        self.conv1, self.bn1, self.relu, self.maxpool = net.conv1, net.bn1, net.relu, net.maxpool
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4

    def load_pretrained(self, path):
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"pretrained ResNet-50 weights not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        if "state_dict" in state:
            state = state["state_dict"]
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        self.load_state_dict(state, strict=True)

    def forward(self, x):
        c1 = self.relu(self.bn1(self.conv1(x)))
        c2 = self.layer1(self.maxpool(c1))
        c3 = self.layer2(c2)
        c4 = self.layer3(c3)
        c5 = self.layer4(c4)
        return [c1, c2, c3, c4, c5]


class TinyBackbone(nn.Module):
    """Five stages of (stride-2 CBR, stride-1 CBR) with the ResNet-50 stride ladder."""

    channels = TINY_CHANNELS

    def __init__(self, in_channels=3):
        super().__init__()
        stages = []
        prev = in_channels
        for c in self.channels:
            stages.append(nn.Sequential(ConvBNReLU(prev, c, 3, stride=2), ConvBNReLU(c, c, 3)))
            prev = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ASPP(nn.Module):
    """Five CBR branches, kernels (1, 3, 3, 3, 1) with dilations (1, 2, 5, 7, 1).

    The last branch sees the globally pooled map and is broadcast back to the
    input size.  Branch outputs are concatenated and fused by a 3x3 CBR.
    """

    def __init__(self, in_c, out_c):
        super().__init__()
        self.branches = nn.ModuleList([
            ConvBNReLU(in_c, out_c, 1),
            ConvBNReLU(in_c, out_c, 3, dilation=2),
            ConvBNReLU(in_c, out_c, 3, dilation=5),
            ConvBNReLU(in_c, out_c, 3, dilation=7),
        ])
        self.global_branch = ConvBNReLU(in_c, out_c, 1)
        self.fuse = ConvBNReLU(5 * out_c, out_c, 3)

    @property
    def num_branches(self):
        return len(self.branches) + 1

    def forward(self, x):
        outs = [branch(x) for branch in self.branches]
        g = self.global_branch(F.adaptive_avg_pool2d(x, 1))
        outs.append(F.interpolate(g, size=x.shape[-2:], mode="bilinear", align_corners=False))
        return self.fuse(torch.cat(outs, dim=1))


class CompressionNet(nn.Module):
    def __init__(self, in_channels, out_c):
        super().__init__()
        *shallow, deepest = in_channels
        self.levels = nn.ModuleList([ConvBNReLU(c, out_c, 3) for c in shallow] + [ASPP(deepest, out_c)])

    def forward(self, feats):
        if len(feats) != len(self.levels):
            raise ValueError(f"expected {len(self.levels)} feature levels, got {len(feats)}")
        return [level(f) for level, f in zip(self.levels, feats)]


def make_backbone(name):
    if name == "resnet50":
        return ResNet50Backbone()
    if name == "tiny":
        return TinyBackbone()
    raise ValueError(f"unknown backbone {name!r}")


class TripletEncoder(nn.Module):
    """One parameter set applied to every scale of the input pyramid.

    With ``scale_stats`` the BN layers keep separate running statistics for
    each auxiliary scale (buffers only, parameters stay shared), so eval mode
    normalises every scale the way batch statistics did during training.
    """

    def __init__(self, backbone="resnet50", out_c=64, scales=(1.0,), scale_stats=False):
        super().__init__()
        self.backbone = make_backbone(backbone)
        self.compress = CompressionNet(self.backbone.channels, out_c)
        aux = [s for s in scales if s != 1.0]
        if scale_stats and aux:
            ScaleBatchNorm2d.convert(self, aux)

    def extract(self, image):
        return self.backbone(image)

    def forward(self, image):
        return self.compress(self.backbone(image))

    def encode_triplet(self, triplet):
        out = {}
        try:
            for scale, img in triplet.items():
                set_active_scale(self, scale)
                out[scale] = self(img)
        finally:
            set_active_scale(self, 1.0)
        return out
