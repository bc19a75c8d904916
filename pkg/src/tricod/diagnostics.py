"""Verification harness: parameter/FLOP accounting, finite-difference gradient checks,
decoupled-kernel equivalence of the HMU iteration, and prediction polarity."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config, ModelConfig, ScheduleSpec, UalSpec, tiny_model_config
from .data import read_mask
from .decoder import HMU, GroupOutputs
from .layers import count_trainable
from .merging import SIU
from .model import TripletNet
from .objective import total_loss

log = logging.getLogger(__name__)

GRADCHECK_MODULES = ("siu", "hmu", "objective", "end_to_end_tiny")
GRADCHECK_TOLERANCE = {"siu": 1e-3, "hmu": 1e-3, "objective": 1e-6, "end_to_end_tiny": 1e-3}
EQUIVALENCE_TOLERANCE = 1e-5
POLARITY_BAND = (0.3, 0.7)


class GradcheckError(ArithmeticError):
    pass


# ---------------------------------------------------------------- accounting

def count_parameters(cfg: ModelConfig) -> int:
    """Trainable scalars; the encoder is shared across scales so it is counted once."""
    with torch.device("meta"):
        model = TripletNet(cfg)
    return count_trainable(model)


def _conv_macs(module, inputs, output):
    k = module.kernel_size[0] * module.kernel_size[1]
    return output.numel() * (module.in_channels // module.groups) * k


def _linear_macs(module, inputs, output):
    return output.numel() * module.in_features


def count_macs(model: nn.Module, example) -> int:
    """Multiply-accumulates of every Conv2d/Linear call during one forward pass."""
    total = 0

    def hook(fn):
        def _hook(module, inputs, output):
            nonlocal total
            total += fn(module, inputs, output)
        return _hook

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(hook(_conv_macs)))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(hook(_linear_macs)))
    try:
        with torch.no_grad():
            model(example)
    finally:
        for h in handles:
            h.remove()
    return total


def count_flops(cfg: ModelConfig, input_size: int) -> int:
    """2 x conv/linear MACs for one image at ``input_size`` (whole pyramid, merge, decoder, head)."""
    if input_size % 32:
        raise ValueError(f"input size must be divisible by 32, got {input_size}")
    with torch.device("meta"):
        model = TripletNet(cfg).eval()
        example = torch.empty(1, 3, input_size, input_size)
    return 2 * count_macs(model, example)


# ---------------------------------------------------------------- gradient checks

@dataclass
class GradcheckResult:
    max_rel_error: float
    num_coords: int
    worst: tuple = ()


def _randomize_norm_stats(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.BatchNorm2d):
            c = m.num_features
            m.running_mean.copy_(0.1 * torch.randn(c, generator=gen, dtype=m.running_mean.dtype))
            m.running_var.copy_(0.5 + torch.rand(c, generator=gen, dtype=m.running_var.dtype))
            for scale in getattr(m, "aux_tags", {}):
                mean, var, _ = m.stats_for(scale)
                mean.copy_(0.1 * torch.randn(c, generator=gen, dtype=mean.dtype))
                var.copy_(0.5 + torch.rand(c, generator=gen, dtype=var.dtype))
            m.weight.data.copy_(1 + 0.1 * torch.randn(c, generator=gen, dtype=m.weight.dtype))
            m.bias.data.copy_(0.1 * torch.randn(c, generator=gen, dtype=m.bias.dtype))


def _central_difference(fn, tensors, flat, j, eps):
    orig = float(flat[j])
    flat[j] = orig + eps
    up = float(fn(*tensors))
    flat[j] = orig - eps
    down = float(fn(*tensors))
    flat[j] = orig
    return (up - down) / (2 * eps)


def finite_difference_check(fn, tensors, num_coords=200, eps=1e-5, seed=0, floor=1e-6,
                            refine_above=1e-6) -> GradcheckResult:
    """Compare autograd against central differences of the scalar ``fn(*tensors)``.

    Coordinates are drawn round-robin over ``tensors`` (so inputs and small
    parameter tensors are always covered) at uniformly random flat positions.
    Relative error is ``|a - d| / max(|a|, |d|, floor)``.  A coordinate whose
    error exceeds ``refine_above`` is re-measured with step ``eps / 10`` and
    keeps the smaller error: a ReLU kink inside ``[x - eps, x + eps]`` spoils
    the difference quotient, while a wrong gradient disagrees at every step.
    """
    tensors = [t.detach().requires_grad_(True) for t in tensors]
    out = fn(*tensors)
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]
    rng = np.random.default_rng(seed)
    worst, max_err = (), 0.0
    with torch.no_grad():
        for n in range(num_coords):
            ti = n % len(tensors)
            flat = tensors[ti].view(-1)
            j = int(rng.integers(flat.numel()))
            analytic = float(grads[ti].reshape(-1)[j])
            if not np.isfinite(analytic):
                raise GradcheckError(f"non-finite analytic gradient at tensor {ti}, index {j}")
            best = None
            for step in (eps, eps / 10):
                numeric = _central_difference(fn, tensors, flat, j, step)
                if not np.isfinite(numeric):
                    raise GradcheckError(f"non-finite finite difference at tensor {ti}, index {j}")
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                if best is None or err < best[0]:
                    best = (err, numeric, step)
                if err <= refine_above:
                    break
            err, numeric, step = best
            if err > max_err or not worst:
                max_err, worst = max(err, max_err), (ti, j, analytic, numeric, step)
    return GradcheckResult(max_err, num_coords, worst)


def check_module(module: nn.Module, inputs, num_coords=200, eps=1e-5, seed=0) -> GradcheckResult:
    """Gradient check of a projected-sum loss over inputs and parameters, eval mode, float64."""
    module = module.double().eval()
    inputs = [x.double() for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    n_in = len(inputs)
    proj = {}

    def loss(*ts):
        params = {n: t for (n, _), t in zip(named, ts[n_in:])}
        out = torch.func.functional_call(module, params, tuple(ts[:n_in]))
        if "w" not in proj:
            proj["w"] = torch.randn(out.shape, generator=gen, dtype=out.dtype)
        return (out * proj["w"]).sum()

    return finite_difference_check(loss, inputs + [p.detach().clone() for _, p in named], num_coords, eps, seed)


class _SiuProbe(nn.Module):
    def __init__(self, siu: SIU):
        super().__init__()
        self.siu = siu

    def forward(self, f05, f10, f15):
        return self.siu({0.5: f05, 1.0: f10, 1.5: f15})


def gradcheck(module_id: str, eps: float = 1e-5, num_coords: int = 200, seed: int = 0) -> GradcheckResult:
    """Finite-difference check of one named component in double precision."""
    if num_coords < 50:
        raise ValueError("gradcheck needs at least 50 sampled coordinates")
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    if module_id == "siu":
        c = 8
        siu = SIU(c)
        _randomize_norm_stats(siu, gen)
        inputs = [torch.randn(1, c, s, s, generator=gen) for s in (4, 8, 12)]
        return check_module(_SiuProbe(siu), inputs, num_coords, eps, seed)
    if module_id == "hmu":
        hmu = HMU(64, num_groups=2, group_channels=32)
        _randomize_norm_stats(hmu, gen)
        return check_module(hmu, [torch.randn(1, 64, 8, 8, generator=gen)], num_coords, eps, seed)
    if module_id == "objective":
        p = 0.05 + 0.9 * torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64)
        g = (torch.rand(1, 1, 8, 8, generator=gen) > 0.5).double()

        def fn(p):
            return total_loss(p, g, UalSpec("pow", 2.0), ScheduleSpec("constant", constant=0.5), 0, 1).total
        return finite_difference_check(fn, [p], num_coords, eps, seed)
    if module_id == "end_to_end_tiny":
        model = TripletNet(tiny_model_config())
        _randomize_norm_stats(model, gen)
        return check_module(model, [torch.randn(1, 3, 64, 64, generator=gen)], num_coords, eps, seed)
    raise ValueError(f"unknown gradcheck module {module_id!r}; expected one of {GRADCHECK_MODULES}")


# ---------------------------------------------------------------- kernel pyramid

def _sliced_cbr(cbr, x, lo, hi):
    conv, bn = cbr[0], cbr[1]
    y = F.conv2d(x, conv.weight[lo:hi], None, conv.stride, conv.padding, conv.dilation)
    y = F.batch_norm(y, bn.running_mean[lo:hi], bn.running_var[lo:hi], bn.weight[lo:hi], bn.bias[lo:hi],
                     False, 0.0, bn.eps)
    return F.relu(y)


def decoupled_iterate(hmu: HMU, expanded) -> GroupOutputs:
    """HMU iteration with each group's last convolution split into C-output kernels.

    Every split kernel reads the same group input and uses the matching slice
    of the integrated weight and normalization statistics.
    """
    G, C = hmu.num_groups, hmu.group_channels
    groups = torch.split(expanded, C, dim=1)
    out = GroupOutputs()
    prev = None
    for i, (g, transform) in enumerate(zip(groups, hmu.transforms)):
        x = g if prev is None else torch.cat([g, prev], dim=1)
        blocks = list(transform.children())
        for block in blocks[:-1]:
            x = block(x)
        parts = [_sliced_cbr(blocks[-1], x, k * C, (k + 1) * C) for k in range(blocks[-1][0].out_channels // C)]
        if i < G - 1:
            g1, g2, g3 = parts
            out.exchange.append(g1)
            prev = g1
        else:
            g2, g3 = parts
        out.modulation.append(g2)
        out.payload.append(g3)
    return out


@torch.no_grad()
def kernel_pyramid_equivalence(hmu: HMU, x) -> float:
    """Max abs difference between integrated and decoupled group outputs (eval-mode normalization)."""
    was_training = hmu.training
    hmu.eval()
    try:
        expanded = hmu.expand(x)
        a = hmu.iterate(expanded)
        b = decoupled_iterate(hmu, expanded)
    finally:
        hmu.train(was_training)
    diff = 0.0
    for name in ("exchange", "modulation", "payload"):
        for u, v in zip(getattr(a, name), getattr(b, name)):
            diff = max(diff, float((u - v).abs().max()))
    return diff


def random_hmu(channels=64, num_groups=6, group_channels=32, seed=0) -> HMU:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    hmu = HMU(channels, num_groups, group_channels)
    with torch.no_grad():
        _randomize_norm_stats(hmu, gen)
    return hmu


# ---------------------------------------------------------------- polarity

def polarity_fraction(p, band=POLARITY_BAND) -> float:
    """Fraction of values strictly inside ``band``; lower means more polarized predictions."""
    p = p.detach().cpu().numpy() if isinstance(p, torch.Tensor) else np.asarray(p)
    lo, hi = band
    return float(np.mean((p > lo) & (p < hi)))


def folder_polarity(pred_dir, band=POLARITY_BAND) -> float:
    files = sorted(Path(pred_dir).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no prediction maps in {pred_dir}")
    inside = total = 0
    for f in files:
        p = read_mask(f).astype(np.float64) / 255.0
        inside += int(np.sum((p > band[0]) & (p < band[1])))
        total += p.size
    return inside / total


# ---------------------------------------------------------------- report

@dataclass
class DiagReport:
    parameter_count: int = 0
    flop_count: int = 0
    input_size: int = 0
    gradcheck: dict = field(default_factory=dict)
    equivalence: dict = field(default_factory=dict)
    polarity: float | None = None
    skipped: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_json(self) -> str:
        return json.dumps({**dataclasses.asdict(self), "passed": self.passed}, indent=2)


def run_diagnostics(cfg: Config) -> DiagReport:
    d = cfg.diag
    size = d.input_size or cfg.train.main_scale
    report = DiagReport(parameter_count=count_parameters(cfg.model), input_size=size)
    report.flop_count = count_flops(cfg.model, size)
    log.info("parameters %d, FLOPs at %d: %d", report.parameter_count, size, report.flop_count)
    for mid in GRADCHECK_MODULES:
        res = gradcheck(mid, d.gradcheck_eps, d.gradcheck_coords)
        report.gradcheck[mid] = res.max_rel_error
        if not res.max_rel_error < GRADCHECK_TOLERANCE[mid]:
            report.failures.append(f"gradcheck {mid}: {res.max_rel_error:.3g} at {res.worst}")
    m = cfg.model
    if m.decoder_unit == "hmu":
        worst = 0.0
        for seed in range(d.equivalence_seeds):
            hmu = random_hmu(m.base_channels, m.hmu_groups, m.hmu_group_channels, seed)
            x = torch.randn(2, m.base_channels, 12, 12, generator=torch.Generator().manual_seed(seed))
            worst = max(worst, kernel_pyramid_equivalence(hmu, x))
        report.equivalence[f"G={m.hmu_groups}"] = worst
        if not worst < EQUIVALENCE_TOLERANCE:
            report.failures.append(f"kernel pyramid equivalence G={m.hmu_groups}: {worst:.3g}")
    else:
        report.skipped["equivalence"] = "decoder_unit is not hmu"
    if cfg.eval.pred_dir and Path(cfg.eval.pred_dir).is_dir():
        report.polarity = folder_polarity(cfg.eval.pred_dir)
    else:
        report.skipped["polarity"] = "eval.pred_dir not set or missing"
    return report
