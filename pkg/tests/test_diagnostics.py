import json

import numpy as np
import pytest
import torch
from torch.utils.flop_counter import FlopCounterMode

from tricod.config import Config, ModelConfig, tiny_model_config
from tricod.decoder import HMU
from tricod.diagnostics import (EQUIVALENCE_TOLERANCE, GradcheckError, count_flops, count_parameters,
                                finite_difference_check, folder_polarity, gradcheck, kernel_pyramid_equivalence,
                                polarity_fraction, random_hmu, run_diagnostics)
from tricod.model import TripletNet


def torch_flops(cfg, size):
    with torch.device("meta"):
        model = TripletNet(cfg).eval()
        x = torch.empty(1, 3, size, size)
        with FlopCounterMode(display=False) as counter, torch.no_grad():
            model(x)
    return counter.get_total_flops()


class TestAccounting:
    def test_tiny_flops_match_torch_counter(self):
        assert count_flops(tiny_model_config(), 64) == torch_flops(tiny_model_config(), 64) == 593_210_112

    def test_flops_quadratic_in_size(self):
        # pooled branches add a size-independent term, so F(s) = a s^2 + b
        cfg = tiny_model_config()
        f64, f128, f192 = (count_flops(cfg, s) for s in (64, 128, 192))
        assert 3 * (f192 - f128) == 5 * (f128 - f64)
        assert 0 < 4 * f64 - f128 < 0.001 * f128

    def test_flops_size_check(self):
        with pytest.raises(ValueError):
            count_flops(tiny_model_config(), 100)

    def test_parameters_monotone_in_groups(self):
        counts = [count_parameters(ModelConfig(hmu_groups=g)) for g in (2, 4, 6, 8)]
        assert counts == sorted(counts) and len(set(counts)) == 4

    @pytest.mark.parametrize("scales", [(1.0,), (0.5, 1.0), (1.0, 1.5), (0.5, 1.0, 1.5)])
    def test_parameters_independent_of_scale_count(self, scales):
        # addition merging has no weights, so only the shared encoder and decoder remain
        ref = count_parameters(ModelConfig(merge_strategy="addition"))
        assert count_parameters(ModelConfig(scale_set=scales, merge_strategy="addition")) == ref

    def test_scale_statistics_are_buffers(self):
        a = count_parameters(ModelConfig(scale_specific_norm=True))
        assert a == count_parameters(ModelConfig(scale_specific_norm=False))

    def test_count_matches_module(self):
        cfg = tiny_model_config()
        model = TripletNet(cfg)
        assert count_parameters(cfg) == sum(p.numel() for p in model.parameters())


class TestFiniteDifference:
    def test_polynomial_exact(self):
        x = torch.linspace(-2, 2, 30, dtype=torch.float64)
        res = finite_difference_check(lambda t: (t ** 2).sum(), [x], num_coords=60)
        # central differences are exact on quadratics up to rounding
        assert res.max_rel_error < 1e-9

    def test_detects_wrong_gradient(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x.clone()

            @staticmethod
            def backward(ctx, g):
                return 2 * g

        x = torch.rand(10, dtype=torch.float64)
        assert finite_difference_check(lambda t: Bad.apply(t).sum(), [x], num_coords=50).max_rel_error > 0.4

    def test_nonfinite(self):
        x = torch.zeros(4, dtype=torch.float64)
        with pytest.raises(GradcheckError):
            finite_difference_check(lambda t: torch.sqrt(t).sum(), [x], num_coords=50)

    def test_objective_gradient_closed_form(self):
        from tricod.objective import pow_ambiguity
        p = torch.full((1,), 0.25, dtype=torch.float64, requires_grad=True)
        pow_ambiguity(p, 2).sum().backward()
        assert float(p.grad) == 2.0

    @pytest.mark.parametrize("module_id,tol", [("siu", 1e-3), ("hmu", 1e-3), ("objective", 1e-6)])
    def test_components(self, module_id, tol):
        assert gradcheck(module_id, num_coords=100).max_rel_error < tol

    def test_too_few_coordinates(self):
        with pytest.raises(ValueError):
            gradcheck("siu", num_coords=10)

    def test_unknown_module(self):
        with pytest.raises(ValueError):
            gradcheck("decoder")


class TestKernelPyramid:
    @pytest.mark.parametrize("G", [2, 3, 4, 6, 8])
    def test_equivalence(self, G):
        hmu = random_hmu(32, G, 8, seed=G)
        assert kernel_pyramid_equivalence(hmu, torch.randn(2, 32, 7, 7)) < EQUIVALENCE_TOLERANCE

    def test_zero_weights(self):
        hmu = HMU(16, 3, 4)
        with torch.no_grad():
            for p in hmu.parameters():
                p.zero_()
        assert kernel_pyramid_equivalence(hmu, torch.randn(1, 16, 5, 5)) == 0.0

    def test_restores_mode(self):
        hmu = random_hmu(16, 2, 8).train()
        kernel_pyramid_equivalence(hmu, torch.randn(1, 16, 4, 4))
        assert hmu.training


class TestPolarity:
    def test_examples(self):
        assert polarity_fraction(np.array([0.0, 0.3, 0.5, 0.7, 1.0])) == 0.2
        assert polarity_fraction(torch.tensor([0.31, 0.69, 0.1, 0.9])) == 0.5

    def test_folder(self, tmp_path):
        import cv2
        cv2.imwrite(str(tmp_path / "a.png"), np.array([[0, 128], [255, 100]], np.uint8))
        assert folder_polarity(tmp_path) == 0.5
        with pytest.raises(FileNotFoundError):
            folder_polarity(tmp_path / "none")


def test_run_diagnostics_report(tmp_path):
    cfg = Config()
    cfg.model = tiny_model_config()
    cfg.train.main_scale = 64
    cfg.diag.gradcheck_coords = 50
    cfg.diag.equivalence_seeds = 1
    report = run_diagnostics(cfg)
    assert report.passed, report.failures
    data = json.loads(report.to_json())
    assert data["flop_count"] == 593_210_112
    assert set(data["gradcheck"]) == {"siu", "hmu", "objective", "end_to_end_tiny"}
    assert "polarity" in data["skipped"]
