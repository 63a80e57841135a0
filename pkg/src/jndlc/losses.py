"""Rate-distortion objective and the JND-guided distortion variants.

Only the reconstruction ``x_hat`` carries gradients; the original ``x_o`` and
the JND-quality image ``x_j`` are data and are detached inside every loss.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace
from enum import Enum

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError, ShapeError
from .features import FeatureExtractor, extract_features, load_feature_extractor
from .msssim import ms_ssim


class Variant(str, Enum):
    BASELINE = "baseline"
    PWL = "pwl"
    IWL = "iwl"
    FWL = "fwl"


class Family(str, Enum):
    MSE = "mse"
    ONE_MINUS_MSSSIM = "one_minus_msssim"


LAMBDA_PRESETS = {
    "paper-mse": (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483),
    "paper-msssim": (2.40, 4.58, 8.73, 16.64, 31.73, 60.50),
}

# MSE is measured on [0, 1] intensities; the lambda grids above are calibrated
# for squared error on the 8-bit scale, so the objective rescales by 255**2.
DISTORTION_SCALE = {Family.MSE: 255.0**2, Family.ONE_MINUS_MSSSIM: 1.0}


@dataclass
class LossConfig:
    variant: Variant = Variant.BASELINE
    family: Family = Family.MSE
    lam: float = 0.0067
    omega: float = 0.5
    iwl_clamp: bool = False
    feature_extractor_id: str | None = None
    fwl_pixel_family: Family = Family.MSE
    feature_extractor: FeatureExtractor | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.family = Family(self.family)
        self.fwl_pixel_family = Family(self.fwl_pixel_family)
        self.lam = float(self.lam)
        self.omega = float(self.omega)
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigurationError(f"omega must lie in [0, 1], got {self.omega}")
        if self.variant is Variant.FWL:
            if self.feature_extractor is None and self.feature_extractor_id is None:
                raise ConfigurationError("the fwl variant requires a feature extractor")
            if self.feature_extractor is not None and self.feature_extractor_id is None:
                self.feature_extractor_id = self.feature_extractor.extractor_id
        elif self.feature_extractor is not None or self.feature_extractor_id is not None:
            raise ConfigurationError(f"variant {self.variant.value} must not reference a feature extractor")

    @property
    def method_id(self) -> str:
        name = "msssim" if self.family is Family.ONE_MINUS_MSSSIM else "mse"
        return f"{self.variant.value}-{name}"

    def extractor(self) -> FeatureExtractor:
        if self.feature_extractor is None:
            if self.feature_extractor_id is None:
                raise ConfigurationError("no feature extractor configured")
            self.feature_extractor = load_feature_extractor(self.feature_extractor_id)
        return self.feature_extractor

    def with_lambda(self, lam: float) -> "LossConfig":
        return replace(self, lam=lam)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "family": self.family.value,
            "lambda": self.lam,
            "omega": self.omega,
            "iwl_clamp": self.iwl_clamp,
            "feature_extractor_id": self.feature_extractor_id or "",
            "fwl_pixel_family": self.fwl_pixel_family.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        clamp = d.get("iwl_clamp", False)
        if isinstance(clamp, str):
            clamp = clamp.strip().lower() in ("1", "true", "yes", "on")
        return cls(
            variant=d.get("variant", "baseline"),
            family=d.get("family", "mse"),
            lam=float(d.get("lambda", 0.0067)),
            omega=float(d.get("omega", 0.5)),
            iwl_clamp=bool(clamp),
            feature_extractor_id=d.get("feature_extractor_id") or None,
            fwl_pixel_family=d.get("fwl_pixel_family", "mse"),
        )

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["loss"] = {k: str(v) for k, v in self.to_dict().items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "LossConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if "loss" not in cp:
            raise ConfigurationError("config text has no [loss] section")
        return cls.from_dict(dict(cp["loss"]))


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def distortion(a: Tensor, b: Tensor, family: Family | str = Family.MSE) -> Tensor:
    """Mean squared error or ``1 - MS-SSIM`` between two image batches."""
    _check_pair(a, b)
    family = Family(family)
    if family is Family.MSE:
        return F.mse_loss(a, b)
    return 1.0 - ms_ssim(a, b)


def loss_baseline(x_o: Tensor, x_hat: Tensor, family: Family | str = Family.MSE) -> Tensor:
    return distortion(x_o.detach(), x_hat, family)


def loss_pwl(x_j: Tensor, x_hat: Tensor, family: Family | str = Family.MSE) -> Tensor:
    """Distortion against the JND-quality image instead of the original."""
    return distortion(x_j.detach(), x_hat, family)


def loss_iwl(
    x_o: Tensor, x_j: Tensor, x_hat: Tensor, family: Family | str = Family.MSE, clamp: bool = False
) -> Tensor:
    """Baseline distortion minus the distortion already present in the JND image."""
    _check_pair(x_o, x_j)
    x_o = x_o.detach()
    with torch.no_grad():
        jnd_level = distortion(x_o, x_j.detach(), family)
    d = distortion(x_o, x_hat, family) - jnd_level
    return torch.clamp_min(d, 0.0) if clamp else d


def feature_mse(a: list[Tensor], b: list[Tensor]) -> Tensor:
    if len(a) != len(b):
        raise ShapeError("feature stacks have different depths")
    return torch.stack([F.mse_loss(fa, fb) for fa, fb in zip(a, b)]).mean()


def loss_fwl(
    x_o: Tensor,
    x_j: Tensor,
    x_hat: Tensor,
    omega: float,
    extractor: FeatureExtractor | None,
    pixel_family: Family | str = Family.MSE,
) -> Tensor:
    """``omega * d(x_o, x_hat) + (1 - omega) * mean per-tap feature MSE(x_hat, x_j)``."""
    if extractor is None:
        raise ConfigurationError("the feature-wise loss needs a feature extractor")
    if not 0.0 <= omega <= 1.0:
        raise ConfigurationError(f"omega must lie in [0, 1], got {omega}")
    _check_pair(x_o, x_j)
    pixel = distortion(x_o.detach(), x_hat, pixel_family)
    with torch.no_grad():
        target = extract_features(x_j.detach(), extractor)
    feat = feature_mse(extract_features(x_hat, extractor), target)
    return omega * pixel + (1.0 - omega) * feat


def rd_loss(rate_bpp, d, lam: float):
    """``rate + lambda * D``."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return rate_bpp + lam * d


def compute_distortion(config: LossConfig, x_o: Tensor, x_j: Tensor, x_hat: Tensor) -> Tensor:
    """Route the three images to the configured distortion variant (unscaled)."""
    v = config.variant
    if v is Variant.BASELINE:
        return loss_baseline(x_o, x_hat, config.family)
    if v is Variant.PWL:
        return loss_pwl(x_j, x_hat, config.family)
    if v is Variant.IWL:
        return loss_iwl(x_o, x_j, x_hat, config.family, clamp=config.iwl_clamp)
    return loss_fwl(x_o, x_j, x_hat, config.omega, config.extractor(), config.fwl_pixel_family)


def objective(config: LossConfig, rate_bpp: Tensor, x_o: Tensor, x_j: Tensor, x_hat: Tensor) -> tuple[Tensor, Tensor]:
    """Total RD loss and the unscaled distortion that entered it."""
    d = compute_distortion(config, x_o, x_j, x_hat)
    return rd_loss(rate_bpp, DISTORTION_SCALE[config.family] * d, config.lam), d
