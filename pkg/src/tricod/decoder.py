"""Hierarchical mixed-scale decoder and prediction head."""
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvBNReLU, StackedCBR


@dataclass
class GroupOutputs:
    exchange: list = field(default_factory=list)    # g^1, groups 1..G-1
    modulation: list = field(default_factory=list)  # g^2, all groups
    payload: list = field(default_factory=list)     # g^3, all groups


class HMU(nn.Module):
    """Group-wise iteration followed by channel-wise modulation and a residual merge.

    The input is expanded to ``G * C`` channels and split into ``G`` groups.
    Group ``j > 1`` is concatenated with the exchange part of group ``j - 1``
    before its transform.  Every group yields a modulation part and a payload
    part.  The pooled modulation parts produce a channel gate ``alpha`` that
    scales the concatenated payloads, which are projected back and added to
    the input: ``relu(x + bn(conv(alpha * payload)))``.
    """

    def __init__(self, channels=64, num_groups=6, group_channels=32, num_blocks=1):
        super().__init__()
        if num_groups < 2:
            raise ValueError("HMU needs at least 2 groups")
        G, C = num_groups, group_channels
        self.num_groups, self.group_channels = G, C
        self.expand = ConvBNReLU(channels, G * C, 1)
        transforms = [StackedCBR(C, 3 * C, num_blocks)]
        transforms += [StackedCBR(2 * C, 3 * C, num_blocks) for _ in range(G - 2)]
        transforms.append(StackedCBR(2 * C, 2 * C, num_blocks))
        self.transforms = nn.ModuleList(transforms)
        hidden = max(1, G * C // 4)
        self.gate = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(G * C, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, G * C, 1),
            nn.Sigmoid(),
        )
        self.fuse = nn.Conv2d(G * C, channels, 3, padding=1, bias=False)
        self.fuse_bn = nn.BatchNorm2d(channels)
        self.act = nn.ReLU()

    def iterate(self, expanded):
        G, C = self.num_groups, self.group_channels
        if expanded.shape[1] != G * C:
            raise ValueError(f"expected {G * C} channels, got {expanded.shape[1]}")
        groups = torch.split(expanded, C, dim=1)
        out = GroupOutputs()
        prev = None
        for i, (g, transform) in enumerate(zip(groups, self.transforms)):
            y = transform(g if prev is None else torch.cat([g, prev], dim=1))
            if i < G - 1:
                g1, g2, g3 = torch.split(y, C, dim=1)
                out.exchange.append(g1)
                prev = g1
            else:
                g2, g3 = torch.split(y, C, dim=1)
            out.modulation.append(g2)
            out.payload.append(g3)
        return out

    def modulation_vector(self, parts):
        return self.gate(torch.cat(parts.modulation, dim=1))

    def forward(self, x, alpha=None):
        parts = self.iterate(self.expand(x))
        if alpha is None:
            alpha = self.modulation_vector(parts)
        payload = alpha * torch.cat(parts.payload, dim=1)
        return self.act(x + self.fuse_bn(self.fuse(payload)))


def upsample_to(x, ref):
    return F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)


class MixedScaleDecoder(nn.Module):
    """Top-down chain of fusion units over five levels, then the logits head."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.base_channels
        if cfg.decoder_unit == "hmu":
            units = [HMU(c, cfg.hmu_groups, cfg.hmu_group_channels) for _ in range(5)]
        elif cfg.decoder_unit == "cbr_baseline":
            units = [StackedCBR(c, c, cfg.fu_repeat, cfg.decoder_kernel_size) for _ in range(5)]
        else:
            raise ValueError(f"unknown decoder unit {cfg.decoder_unit!r}")
        self.units = nn.ModuleList(units)
        self.head = nn.Sequential(
            StackedCBR(c, cfg.head_mid_channels, cfg.last_cbr_repeat, cfg.decoder_kernel_size),
            nn.Conv2d(cfg.head_mid_channels, 1, 1),
        )

    def forward(self, feats, out_hw, return_intermediate=False):
        if len(feats) != len(self.units):
            raise ValueError(f"decoder expects {len(self.units)} levels, got {len(feats)}")
        outs = [None] * len(feats)
        x = None
        for i in reversed(range(len(feats))):
            f_hat = feats[i] if x is None else feats[i] + upsample_to(x, feats[i])
            x = self.units[i](f_hat)
            outs[i] = x
        logits = F.interpolate(self.head(x), size=tuple(out_hw), mode="bilinear", align_corners=False)
        if return_intermediate:
            return logits, outs
        return logits
