"""Learnable codec: analysis/synthesis transforms, quantizer and rate estimate."""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass
from enum import Enum

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .entropy import EntropyModel, FactorizedPrior, build_entropy_model
from .errors import NumericError, ShapeError

ALLOWED_DOWNSAMPLING = (4, 8, 16)


class QuantMode(str, Enum):
    TRAIN_NOISE = "train_noise"
    INFER_ROUND = "infer_round"


@dataclass
class QuantizedLatent:
    data: Tensor
    mode: QuantMode

    @property
    def shape(self) -> torch.Size:
        return self.data.shape


@dataclass(frozen=True)
class ArchDescriptor:
    hidden_channels: int = 64
    latent_channels: int = 64
    downsampling: int = 8
    nonlinearity: str = "gdn"

    def __post_init__(self):
        if self.downsampling not in ALLOWED_DOWNSAMPLING:
            raise ValueError(f"downsampling must be one of {ALLOWED_DOWNSAMPLING}, got {self.downsampling}")
        if self.nonlinearity not in ("gdn", "leaky_relu"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def stages(self) -> int:
        return self.downsampling.bit_length() - 1

    def to_dict(self) -> dict:
        return asdict(self)


class GDN(nn.Module):
    """Divisive normalization ``x / sqrt(beta + gamma @ x**2)``; ``inverse`` multiplies instead."""

    def __init__(self, channels: int, inverse: bool = False):
        super().__init__()
        self.inverse = inverse
        self.beta = nn.Parameter(torch.ones(channels))
        self.gamma = nn.Parameter(torch.eye(channels) * 0.1**0.5)

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        beta = self.beta**2 + 1e-6
        gamma = (self.gamma**2).view(c, c, 1, 1)
        norm = torch.sqrt(F.conv2d(x * x, gamma, beta))
        return x * norm if self.inverse else x / norm


def _nonlinearity(kind: str, channels: int, inverse: bool) -> nn.Module:
    if kind == "gdn":
        return GDN(channels, inverse=inverse)
    return nn.LeakyReLU(0.01)


def check_image(x: Tensor, downsampling: int | None = None) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected an image batch of shape [batch, 3, height, width], got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise NumericError("image contains non-finite values")
    if downsampling:
        for name, size in (("height", x.shape[2]), ("width", x.shape[3])):
            if size % downsampling:
                raise ShapeError(f"{name} {size} is not divisible by downsampling factor {downsampling}")


class Codec(nn.Module):
    """Analysis transform, synthesis transform and factorized entropy model.

    The analysis side is a stack of stride-2 5x5 convolutions separated by
    the configured nonlinearity; the synthesis side mirrors it with
    transposed convolutions.
    """

    def __init__(self, arch: ArchDescriptor | None = None, entropy_model: EntropyModel | None = None, seed: int = 0):
        super().__init__()
        self.arch = arch or ArchDescriptor()
        a = self.arch
        gen = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            analysis: list[nn.Module] = []
            synthesis: list[nn.Module] = []
            cin = 3
            for i in range(a.stages):
                last = i == a.stages - 1
                cout = a.latent_channels if last else a.hidden_channels
                analysis.append(nn.Conv2d(cin, cout, 5, stride=2, padding=2))
                if not last:
                    analysis.append(_nonlinearity(a.nonlinearity, cout, inverse=False))
                cin = cout
            cin = a.latent_channels
            for i in range(a.stages):
                last = i == a.stages - 1
                cout = 3 if last else a.hidden_channels
                synthesis.append(nn.ConvTranspose2d(cin, cout, 5, stride=2, padding=2, output_padding=1))
                if not last:
                    synthesis.append(_nonlinearity(a.nonlinearity, cout, inverse=True))
                cin = cout
            self.analysis = nn.Sequential(*analysis)
            self.synthesis = nn.Sequential(*synthesis)
        self.entropy_model = entropy_model or FactorizedPrior(a.latent_channels, generator=gen)
        if self.entropy_model.channels != a.latent_channels:
            raise ShapeError("entropy model channel count does not match latent_channels")

    @property
    def downsampling(self) -> int:
        return self.arch.downsampling

    def forward(self, x: Tensor, generator: torch.Generator | None = None, clamp: bool = False) -> dict:
        """Training pass: noisy quantization, differentiable rate."""
        y = analyze(x, self)
        yhat = quantize(y, QuantMode.TRAIN_NOISE, generator=generator)
        x_hat = synthesize(yhat, self, clamp=clamp)
        rate = estimate_rate_bpp(yhat, self.entropy_model, x.shape[0] * x.shape[2] * x.shape[3])
        return {"x_hat": x_hat, "y": y, "y_hat": yhat, "rate_bpp": rate}

    def descriptor(self) -> dict:
        return {"arch": self.arch.to_dict(), "entropy_model": self.entropy_model.descriptor()}

    @classmethod
    def from_descriptor(cls, descriptor: dict) -> "Codec":
        return cls(ArchDescriptor(**descriptor["arch"]), build_entropy_model(descriptor["entropy_model"]))

    def model_hash(self) -> bytes:
        """Digest of the architecture and every parameter/buffer value."""
        h = hashlib.sha256(repr(sorted(self.descriptor()["arch"].items())).encode())
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            buf = io.BytesIO()
            buf.write(t.detach().cpu().contiguous().numpy().tobytes())
            h.update(buf.getvalue())
        return h.digest()[:8]


def analyze(x: Tensor, params: Codec) -> Tensor:
    """Map an image batch to its latent (spatial dims reduced by ``s``)."""
    check_image(x, params.downsampling)
    return params.analysis(x)


def quantize(
    y: Tensor,
    mode: QuantMode | str,
    seed: int | None = None,
    generator: torch.Generator | None = None,
) -> QuantizedLatent:
    """Round (inference) or add uniform noise from ``[-0.5, 0.5)`` (training).

    The noise is independent of ``y``, so the gradient w.r.t. ``y`` is the identity.
    """
    mode = QuantMode(mode)
    if not torch.isfinite(y).all():
        raise NumericError("latent contains non-finite values")
    if mode is QuantMode.INFER_ROUND:
        return QuantizedLatent(torch.round(y), mode)
    if generator is None and seed is not None:
        generator = torch.Generator().manual_seed(int(seed))
    u = torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5
    eps = torch.finfo(y.dtype).eps
    u = u.clamp(-0.5 + eps, 0.5 - eps)
    # float addition can still round |y + u - y| up to 0.5 for large |y|;
    # step those elements back toward y one ulp at a time
    with torch.no_grad():
        yd = y.detach()
        noisy = yd + u
        for _ in range(8):
            bad = (noisy - yd).abs() >= 0.5
            if not bad.any():
                break
            noisy = torch.where(bad, torch.nextafter(noisy, yd), noisy)
        offset = noisy - yd
    return QuantizedLatent(y + offset, mode)


def synthesize(yhat: QuantizedLatent | Tensor, params: Codec, clamp: bool = True) -> Tensor:
    """Decode a quantized latent to an image batch; optionally clamp to [0, 1]."""
    data = yhat.data if isinstance(yhat, QuantizedLatent) else yhat
    if data.dim() != 4 or data.shape[1] != params.arch.latent_channels:
        raise ShapeError(
            f"latent of shape {tuple(data.shape)} does not match {params.arch.latent_channels} latent channels"
        )
    x_hat = params.synthesis(data)
    return x_hat.clamp(0.0, 1.0) if clamp else x_hat


def estimate_rate_bpp(yhat: QuantizedLatent | Tensor, em: EntropyModel, pixel_count: int) -> Tensor:
    """Sum of ``-log2 p`` over the latent, divided by the source pixel count."""
    if pixel_count <= 0:
        raise ValueError(f"pixel_count must be positive, got {pixel_count}")
    data = yhat.data if isinstance(yhat, QuantizedLatent) else yhat
    p = em.likelihood(data)
    return -torch.log2(p).sum() / pixel_count
