import pytest
import torch

from oracles import relative_gradient_error

from jndlc.errors import ConfigurationError, ShapeError
from jndlc.features import extract_features, load_feature_extractor, seeded_random_extractor
from jndlc.losses import (
    LAMBDA_PRESETS,
    Family,
    LossConfig,
    Variant,
    distortion,
    feature_mse,
    loss_baseline,
    loss_fwl,
    loss_iwl,
    loss_pwl,
    objective,
    rd_loss,
)
from jndlc.msssim import min_size_for_scales, ms_ssim


def _img(seed, size=16, dtype=torch.float64):
    return torch.rand(1, 3, size, size, generator=torch.Generator().manual_seed(seed), dtype=dtype)


@pytest.fixture(scope="module")
def extractor():
    return seeded_random_extractor(0).double()


def test_distortion_examples():
    x = _img(0, 32)
    assert distortion(x, x, "mse").item() == 0.0
    assert distortion(x, x, "one_minus_msssim").item() == 0.0
    zeros, half = torch.zeros(1, 3, 8, 8), torch.full((1, 3, 8, 8), 0.5)
    assert distortion(zeros, half, "mse").item() == 0.25
    with pytest.raises(ShapeError):
        distortion(zeros, torch.zeros(1, 3, 8, 4))


def test_msssim_size_errors_name_minimum():
    with pytest.raises(ValueError, match=str(min_size_for_scales(5))):
        ms_ssim(_img(0, 64), _img(1, 64), scales=5)
    with pytest.raises(ValueError, match="11"):
        ms_ssim(_img(0, 8), _img(1, 8))


def test_msssim_family_bounded():
    a, b = _img(0, 48), _img(1, 48)
    d = distortion(a, b, Family.ONE_MINUS_MSSSIM).item()
    assert 0.0 < d <= 1.0


def test_pwl_examples():
    x_o, x_j = _img(0), _img(1)
    assert loss_pwl(x_j, x_j).item() == 0.0
    assert loss_pwl(x_j, x_o).item() == distortion(x_j, x_o).item() > 0


def test_iwl_examples():
    x_o, x_j, x_hat = _img(0), _img(1), _img(2)
    assert loss_iwl(x_o, x_j, x_j).item() == 0.0
    assert loss_iwl(x_o, x_j, x_o).item() == -distortion(x_o, x_j).item()
    assert loss_iwl(x_o, x_j, x_o, clamp=True).item() == 0.0
    assert loss_iwl(x_o, x_o, x_hat).item() == loss_baseline(x_o, x_hat).item()


def test_fwl_examples(extractor):
    x_o, x_j, x_hat = _img(0), _img(1), _img(2)
    assert loss_fwl(x_o, x_j, x_hat, 1.0, extractor).item() == distortion(x_o, x_hat).item()
    assert loss_fwl(x_o, x_j, x_j, 0.0, extractor).item() == 0.0
    assert loss_fwl(x_o, x_o, x_o, 0.5, extractor).item() == 0.0
    assert loss_fwl(x_o, x_j, x_hat, 0.3, extractor).item() > 0
    with pytest.raises(ConfigurationError):
        loss_fwl(x_o, x_j, x_hat, 0.5, None)


def test_rd_loss_examples():
    assert rd_loss(1.0, 0.0, 0.0067) == 1.0
    assert rd_loss(0.0, 2.0, 0.5) == 1.0
    with pytest.raises(ValueError):
        rd_loss(1.0, 1.0, 0.0)
    r, d, lam = 0.37, 0.0123, 0.0067
    assert rd_loss(r, d, 2 * lam) - rd_loss(r, d, lam) == pytest.approx(lam * d, rel=1e-12)


def test_lambda_presets():
    assert LAMBDA_PRESETS["paper-mse"] == (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483)
    assert LAMBDA_PRESETS["paper-msssim"] == (2.40, 4.58, 8.73, 16.64, 31.73, 60.50)


def test_features_deterministic_and_shape_only_from_dims(extractor):
    x, y = _img(0, 32), _img(5, 32)
    a, b = extract_features(x, extractor), extract_features(x, extractor)
    assert all(torch.equal(p, q) for p, q in zip(a, b))
    assert [t.shape for t in a] == [t.shape for t in extract_features(y, extractor)]
    assert not any(p.requires_grad for p in extractor.parameters())


def test_feature_gradient_flows_to_input_only(extractor):
    x_j = _img(1)
    err = relative_gradient_error(
        lambda x: feature_mse(extract_features(x, extractor), extract_features(x_j, extractor)), _img(0)
    )
    assert err < 1e-3
    x = _img(0).requires_grad_(True)
    feature_mse(extract_features(x, extractor), extract_features(x_j, extractor)).backward()
    assert x.grad is not None and all(p.grad is None for p in extractor.parameters())


def test_inputs_carry_no_gradient():
    x_o, x_j = _img(0).requires_grad_(True), _img(1).requires_grad_(True)
    x_hat = _img(2).requires_grad_(True)
    (loss_pwl(x_j, x_hat) + loss_iwl(x_o, x_j, x_hat) + loss_baseline(x_o, x_hat)).backward()
    assert x_o.grad is None and x_j.grad is None and x_hat.grad is not None


def test_loss_config_contract(extractor):
    with pytest.raises(ConfigurationError):
        LossConfig(lam=0)
    with pytest.raises(ConfigurationError):
        LossConfig(omega=1.5)
    with pytest.raises(ConfigurationError):
        LossConfig(variant="fwl")
    with pytest.raises(ConfigurationError):
        LossConfig(variant="iwl", feature_extractor=extractor)
    cfg = LossConfig(variant="fwl", family="one_minus_msssim", lam=8.73, omega=0.25, feature_extractor_id="random-vgg:3")
    back = LossConfig.from_text(cfg.to_text())
    assert back == cfg
    assert "feature_extractor_id = random-vgg:3" in cfg.to_text()


def test_auto_extractor_falls_back_to_seeded(monkeypatch, tmp_path):
    monkeypatch.setenv("JNDLC_VGG16_WEIGHTS", str(tmp_path / "missing.pth"))
    monkeypatch.setattr(torch.hub, "get_dir", lambda: str(tmp_path))
    f = load_feature_extractor("auto")
    assert f.provenance == "seeded_random"
    with pytest.raises(FileNotFoundError):
        load_feature_extractor("vgg16")


def test_objective_scales_mse_to_eight_bit_range():
    x_o, x_hat = _img(0), _img(1)
    cfg = LossConfig(lam=0.01)
    total, d = objective(cfg, torch.tensor(0.5, dtype=torch.float64), x_o, x_o, x_hat)
    assert total.item() == pytest.approx(0.5 + 0.01 * 255**2 * d.item(), rel=1e-12)
    cfg = LossConfig(variant=Variant.PWL, family="one_minus_msssim", lam=2.4)
    x_o, x_hat = _img(0, 32), _img(1, 32)
    total, d = objective(cfg, torch.tensor(0.5, dtype=torch.float64), x_o, x_o, x_hat)
    assert total.item() == pytest.approx(0.5 + 2.4 * d.item(), rel=1e-12)
