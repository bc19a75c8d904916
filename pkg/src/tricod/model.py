"""Full network: triplet encoder -> scale merging -> mixed-scale decoder -> sigmoid."""
import torch
import torch.nn as nn

from .config import ModelConfig
from .data import build_pyramid
from .decoder import MixedScaleDecoder
from .encoder import TripletEncoder
from .merging import MAIN_SCALE, ScaleMergingLayer


class TripletNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.scales = cfg.scales
        self.encoder = TripletEncoder(cfg.backbone, cfg.base_channels, self.scales, cfg.scale_specific_norm)
        self.merge = ScaleMergingLayer(cfg.merge_strategy, cfg.base_channels, self.scales)
        self.decoder = MixedScaleDecoder(cfg)

    def as_triplet(self, x):
        if isinstance(x, dict):
            missing = set(self.scales) - set(x)
            if missing:
                raise ValueError(f"input pyramid lacks scales {sorted(missing)}")
            return {s: x[s] for s in self.scales}
        return build_pyramid(x, self.scales)

    def forward_logits(self, x, return_aux=False):
        triplet = self.as_triplet(x)
        encoded = self.encoder.encode_triplet(triplet)
        fused, attention = self.merge(encoded, return_attention=True)
        out_hw = triplet[MAIN_SCALE].shape[-2:]
        logits, decoded = self.decoder(fused, out_hw, return_intermediate=True)
        if return_aux:
            return logits, {"attention": attention, "decoder": decoded, "fused": fused}
        return logits

    def forward(self, x, return_aux=False):
        """Probability map at the main-scale resolution.

        ``x`` is either a dict ``{scale: (B, 3, h, w)}`` or the main-scale batch,
        from which the pyramid is built.
        """
        if return_aux:
            logits, aux = self.forward_logits(x, return_aux=True)
            return torch.sigmoid(logits), aux
        return torch.sigmoid(self.forward_logits(x))


def build_model(cfg: ModelConfig) -> TripletNet:
    model = TripletNet(cfg)
    if cfg.pretrained:
        if cfg.backbone != "resnet50":
            raise ValueError("pretrained weights are only defined for the resnet50 backbone")
        model.encoder.backbone.load_pretrained(cfg.pretrained_path)
    return model
