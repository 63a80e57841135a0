"""Per-channel factorized entropy models over integer latents.

An entropy model exposes a univariate cumulative distribution ``cdf`` for
each latent channel.  Discretized likelihoods use the ``c(k + 0.5) - c(k - 0.5)``
convention, and :meth:`EntropyModel.coding_tables` turns the same CDF into
fixed-precision integer frequency tables for the range coder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

LIKELIHOOD_FLOOR = 1e-9
CODER_PRECISION = 16


def _per_channel(values: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    """Reshape [N, C, ...] to [C, 1, N * ...] so channels lead."""
    shape = values.shape
    perm = (1, 0) + tuple(range(2, values.dim()))
    flat = values.permute(*perm).reshape(shape[1], 1, -1)
    return flat, shape


def _restore(flat: Tensor, shape: tuple[int, ...]) -> Tensor:
    c = shape[1]
    rest = (shape[0],) + tuple(shape[2:])
    out = flat.reshape((c,) + rest)
    perm = (1, 0) + tuple(range(2, len(shape)))
    return out.permute(*perm).contiguous()


@dataclass(frozen=True)
class CodingTables:
    """Integer CDF tables for one entropy model.

    ``cdfs[c]`` holds ``len + 1`` cumulative counts summing to
    ``2 ** precision``; the last symbol of each table is the escape symbol
    used for values outside ``[offsets[c], offsets[c] + len - 2]``.
    """

    cdfs: tuple[np.ndarray, ...]
    offsets: tuple[int, ...]
    precision: int = CODER_PRECISION

    def escape_index(self, channel: int) -> int:
        return len(self.cdfs[channel]) - 2


def pmf_to_quantized_cdf(pmf: np.ndarray, precision: int = CODER_PRECISION) -> np.ndarray:
    """Quantize a probability vector into cumulative integer frequencies.

    Every symbol receives a frequency of at least one, and the frequencies sum
    to exactly ``2 ** precision``.
    """
    total = 1 << precision
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or pmf.size == 0:
        raise ValueError("pmf must be a non-empty vector")
    if pmf.size > total:
        raise ValueError(f"{pmf.size} symbols do not fit in {precision}-bit precision")
    pmf = np.clip(pmf, 0.0, None)
    mass = pmf.sum()
    if not np.isfinite(mass) or mass <= 0:
        raise ValueError("pmf has no positive mass")
    freq = np.maximum(1, np.rint(pmf / mass * total)).astype(np.int64)
    diff = total - int(freq.sum())
    if diff > 0:
        freq[int(np.argmax(freq))] += diff
    while diff < 0:
        i = int(np.argmax(freq))
        take = min(-diff, int(freq[i]) - 1)
        freq[i] -= take
        diff += take
    cdf = np.zeros(freq.size + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf


class EntropyModel(nn.Module):
    """Base class: subclasses implement :meth:`cdf` on ``[C, 1, M]`` inputs."""

    def __init__(self, channels: int, tail_mass: float = 1e-6, max_half_width: int = 1024):
        super().__init__()
        self.channels = int(channels)
        self.tail_mass = float(tail_mass)
        self.max_half_width = int(max_half_width)

    def cdf(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def descriptor(self) -> dict:
        return {"kind": type(self).__name__, "channels": self.channels, "tail_mass": self.tail_mass}

    def cdf_values(self, x: Tensor) -> Tensor:
        """Evaluate the CDF on a [N, C, ...] tensor."""
        flat, shape = _per_channel(x)
        return _restore(self.cdf(flat), shape)

    def _likelihood_flat(self, v: Tensor) -> Tensor:
        return self.cdf(v + 0.5) - self.cdf(v - 0.5)

    def likelihood(self, yhat: Tensor) -> Tensor:
        if yhat.dim() < 2 or yhat.shape[1] != self.channels:
            raise ValueError(
                f"latent has {yhat.shape[1] if yhat.dim() > 1 else '?'} channels, model has {self.channels}"
            )
        flat, shape = _per_channel(yhat)
        p = self._likelihood_flat(flat)
        return _restore(p.clamp_min(LIKELIHOOD_FLOOR), shape)

    @torch.no_grad()
    def support(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer bounds per channel covering all but ``tail_mass`` on each side.

        Found by bisection, which only relies on the CDF being monotone.
        """
        c = self.channels
        dtype = torch.float64
        limit = float(self.max_half_width)

        def quantile(target: float) -> Tensor:
            lo = torch.full((c, 1, 1), -limit, dtype=dtype)
            hi = torch.full((c, 1, 1), limit, dtype=dtype)
            for _ in range(64):
                mid = 0.5 * (lo + hi)
                below = self._cdf_double(mid) < target
                lo = torch.where(below, mid, lo)
                hi = torch.where(below, hi, mid)
            return 0.5 * (lo + hi)

        low = quantile(self.tail_mass).flatten().numpy()
        high = quantile(1.0 - self.tail_mass).flatten().numpy()
        kmin = np.floor(low + 0.5).astype(np.int64)
        kmax = np.ceil(high - 0.5).astype(np.int64)
        kmax = np.maximum(kmax, kmin)
        return kmin, kmax

    def _cdf_double(self, x: Tensor) -> Tensor:
        dtype = next((p.dtype for p in self.parameters()), torch.float64)
        if dtype == torch.float64:
            return self.cdf(x)
        return self.cdf(x.to(dtype)).to(torch.float64)

    @torch.no_grad()
    def coding_tables(self, precision: int = CODER_PRECISION) -> CodingTables:
        kmin, kmax = self.support()
        lengths = kmax - kmin + 1
        steps = torch.arange(int(lengths.max()) + 1, dtype=torch.float64)
        grid = torch.from_numpy(kmin.astype(np.float64)).view(-1, 1, 1) - 0.5 + steps.view(1, 1, -1)
        values = self._cdf_double(grid)[:, 0].numpy()
        cdfs = []
        for ch in range(self.channels):
            c = values[ch, : lengths[ch] + 1]
            pmf = np.diff(c)
            escape = max(0.0, 1.0 - (c[-1] - c[0]))
            cdfs.append(pmf_to_quantized_cdf(np.append(pmf, escape), precision))
        return CodingTables(tuple(cdfs), tuple(int(k) for k in kmin), precision)


class FactorizedPrior(EntropyModel):
    """Learned monotone per-channel CDF (small positive-weight network per channel).

    Each channel maps a scalar through ``len(filters)`` hidden layers whose
    matrices are kept positive with a softplus, and whose nonlinearity
    ``h + tanh(a) * tanh(h)`` stays monotone because ``tanh(a) > -1``.  The
    output logit is squashed by a sigmoid to give ``c``.
    """

    def __init__(
        self,
        channels: int,
        filters: tuple[int, ...] = (3, 3, 3),
        init_scale: float = 10.0,
        tail_mass: float = 1e-6,
        generator: torch.Generator | None = None,
    ):
        super().__init__(channels, tail_mass=tail_mass)
        self.filters = tuple(int(f) for f in filters)
        self.init_scale = float(init_scale)
        dims = (1,) + self.filters + (1,)
        scale = self.init_scale ** (1.0 / (len(self.filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            bias = torch.rand((channels, dims[i + 1], 1), generator=generator) - 0.5
            self.biases.append(nn.Parameter(bias))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros((channels, dims[i + 1], 1))))

    def descriptor(self) -> dict:
        d = super().descriptor()
        d.update(filters=list(self.filters), init_scale=self.init_scale)
        return d

    def logits(self, x: Tensor) -> Tensor:
        h = x
        for i, matrix in enumerate(self.matrices):
            h = torch.matmul(F.softplus(matrix), h) + self.biases[i]
            if i < len(self.factors):
                h = h + torch.tanh(self.factors[i]) * torch.tanh(h)
        return h

    def cdf(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.logits(x))

    def _likelihood_flat(self, v: Tensor) -> Tensor:
        lower = self.logits(v - 0.5)
        upper = self.logits(v + 0.5)
        # evaluate in the tail where the sigmoid is not saturated
        sign = -torch.sign(lower + upper).detach()
        return torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))


class UniformPrior(EntropyModel):
    """Fixed uniform density on ``[low, high)``; no trainable parameters."""

    def __init__(self, channels: int, low: float, high: float, tail_mass: float = 1e-6):
        super().__init__(channels, tail_mass=tail_mass)
        if not high > low:
            raise ValueError("high must exceed low")
        self.low = float(low)
        self.high = float(high)

    def descriptor(self) -> dict:
        d = super().descriptor()
        d.update(low=self.low, high=self.high)
        return d

    def cdf(self, x: Tensor) -> Tensor:
        return ((x - self.low) / (self.high - self.low)).clamp(0.0, 1.0)


def latent_likelihood(yhat: Tensor, em: EntropyModel) -> Tensor:
    """Discretized likelihood of every latent element, floor-clamped to 1e-9."""
    return em.likelihood(yhat)


def build_entropy_model(descriptor: dict) -> EntropyModel:
    kind = descriptor["kind"]
    if kind == "FactorizedPrior":
        return FactorizedPrior(
            descriptor["channels"],
            filters=tuple(descriptor["filters"]),
            init_scale=descriptor["init_scale"],
            tail_mass=descriptor["tail_mass"],
        )
    if kind == "UniformPrior":
        return UniformPrior(
            descriptor["channels"], descriptor["low"], descriptor["high"], tail_mass=descriptor["tail_mass"]
        )
    raise ValueError(f"unknown entropy model kind {kind!r}")
