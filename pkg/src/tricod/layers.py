import torch
import torch.nn as nn
import torch.nn.functional as F


class ConvBNReLU(nn.Sequential):
    def __init__(self, in_c, out_c, kernel_size=3, stride=1, dilation=1, padding=None):
        if padding is None:
            padding = dilation * (kernel_size // 2)
        super().__init__(
            nn.Conv2d(in_c, out_c, kernel_size, stride=stride, padding=padding, dilation=dilation, bias=False),
            nn.BatchNorm2d(out_c),
            nn.ReLU(inplace=True),
        )
        self.in_channels = in_c
        self.out_channels = out_c


def slide_window(items, win_size=2, win_stride=1):
    i = 0
    while i + win_size <= len(items):
        yield tuple(items[i:i + win_size])
        i += win_stride


class StackedCBR(nn.Sequential):
    """``num_blocks`` Conv-BN-ReLU units; channels go ``in_c -> out_c -> ... -> out_c``."""

    def __init__(self, in_c, out_c, num_blocks=1, kernel_size=3):
        super().__init__()
        if num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        channels = [in_c] + [out_c] * num_blocks
        self.channel_pairs = tuple(slide_window(channels, win_size=2, win_stride=1))
        for i, (i_c, o_c) in enumerate(self.channel_pairs):
            self.add_module(f"cbr_{i}", ConvBNReLU(i_c, o_c, kernel_size=kernel_size))


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def scale_tag(scale):
    return "x" + str(float(scale)).replace(".", "_")


class ScaleBatchNorm2d(nn.BatchNorm2d):
    """BatchNorm with one set of running statistics per input scale.

    Affine parameters are shared.  ``active_scale`` picks which running buffers
    are read in eval mode and updated in train mode; the main scale uses the
    standard ``running_mean``/``running_var`` so plain BN state dicts still load.
    Missing auxiliary buffers are filled from the main-scale ones on load.
    """

    _STATS = ("running_mean", "running_var", "num_batches_tracked")

    def __init__(self, num_features, aux_scales=(), **kwargs):
        super().__init__(num_features, **kwargs)
        self.aux_tags = {float(s): scale_tag(s) for s in aux_scales}
        for tag in self.aux_tags.values():
            for name in self._STATS:
                self.register_buffer(f"{name}_{tag}", getattr(self, name).clone())
        self.active_scale = 1.0

    def stats_for(self, scale):
        tag = self.aux_tags.get(float(scale))
        if tag is None:
            return self.running_mean, self.running_var, self.num_batches_tracked
        return tuple(getattr(self, f"{name}_{tag}") for name in self._STATS)

    def forward(self, x):
        if self.active_scale not in self.aux_tags:
            return super().forward(x)
        mean, var, tracked = self.stats_for(self.active_scale)
        momentum = self.momentum
        if self.training:
            tracked.add_(1)
            if momentum is None:
                momentum = 1.0 / float(tracked)
        return F.batch_norm(x, mean, var, self.weight, self.bias, self.training, momentum or 0.0, self.eps)

    def _load_from_state_dict(self, state_dict, prefix, *args, **kwargs):
        for tag in self.aux_tags.values():
            for name in self._STATS:
                key, main = f"{prefix}{name}_{tag}", f"{prefix}{name}"
                if key not in state_dict and main in state_dict:
                    state_dict[key] = state_dict[main].clone()
        super()._load_from_state_dict(state_dict, prefix, *args, **kwargs)

    @classmethod
    def convert(cls, module, aux_scales):
        """Swap every ``BatchNorm2d`` under ``module`` for a scale-aware copy."""
        if isinstance(module, nn.BatchNorm2d) and not isinstance(module, cls):
            new = cls(module.num_features, aux_scales, eps=module.eps, momentum=module.momentum,
                      affine=module.affine, track_running_stats=module.track_running_stats,
                      device=module.running_mean.device, dtype=module.running_mean.dtype)
            with torch.no_grad():
                if module.affine:
                    new.weight.copy_(module.weight)
                    new.bias.copy_(module.bias)
                for scale in [1.0, *aux_scales]:
                    for dst, src in zip(new.stats_for(scale), (module.running_mean, module.running_var,
                                                               module.num_batches_tracked)):
                        dst.copy_(src)
            return new
        for name, child in module.named_children():
            setattr(module, name, cls.convert(child, aux_scales))
        return module


def set_active_scale(module, scale):
    for m in module.modules():
        if isinstance(m, ScaleBatchNorm2d):
            m.active_scale = float(scale)
