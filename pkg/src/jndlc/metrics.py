"""Quality metrics, RD curves, BD-rate and bitrate saving at the JND quality."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.interpolate import PchipInterpolator
from torch import Tensor

from .errors import OutOfRangeError, ShapeError
from .msssim import ms_ssim

METRICS = ("psnr", "msssim")
BD_SAMPLES = 1001
MIN_OVERLAP_FRACTION = 0.10


def _check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    return metric


@torch.no_grad()
def psnr(a: Tensor, b: Tensor) -> float:
    """PSNR in dB for peak 1.0; ``math.inf`` when the images are identical."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((a.to(torch.float64) - b.to(torch.float64)) ** 2).item()
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


@torch.no_grad()
def msssim_metric(a: Tensor, b: Tensor) -> float:
    return float(ms_ssim(a.to(torch.float64), b.to(torch.float64)))


@dataclass
class RDPoint:
    bpp: float
    psnr: float
    msssim: float
    lam: float = float("nan")
    method_id: str = ""
    image_id: str | None = None

    def __post_init__(self):
        if not self.bpp >= 0:
            raise ValueError(f"bpp must be non-negative, got {self.bpp}")
        if not 0.0 <= self.msssim <= 1.0:
            raise ValueError(f"msssim must lie in [0, 1], got {self.msssim}")

    def quality(self, metric: str) -> float:
        return self.psnr if _check_metric(metric) == "psnr" else self.msssim


@dataclass
class RDCurve:
    """Points sorted by strictly increasing bpp."""

    points: list[RDPoint]
    method_id: str = ""
    dataset_id: str = ""

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        bpp = [p.bpp for p in self.points]
        if any(b1 <= b0 for b0, b1 in zip(bpp, bpp[1:])):
            raise ValueError(f"RD curve {self.method_id!r} has repeated bpp values")
        for metric in METRICS:
            q = [p.quality(metric) for p in self.points]
            if any(q1 < q0 for q0, q1 in zip(q, q[1:])):
                warnings.warn(f"{metric} of RD curve {self.method_id!r} is not non-decreasing in bpp", stacklevel=2)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_arrays(cls, bpp, quality, metric: str = "psnr", method_id: str = "") -> "RDCurve":
        """Convenience constructor when only one quality metric is known.

        The other metric is filled with a placeholder and must not be queried.
        """
        pts = []
        for b, q in zip(bpp, quality):
            if metric == "psnr":
                pts.append(RDPoint(float(b), float(q), 0.0, method_id=method_id))
            else:
                pts.append(RDPoint(float(b), float("nan"), float(q), method_id=method_id))
        return cls(pts, method_id)

    def log_rate_knots(self, metric: str) -> tuple[np.ndarray, np.ndarray]:
        """Finite (quality, log bpp) knots sorted by quality, duplicates dropped."""
        _check_metric(metric)
        q = np.array([p.quality(metric) for p in self.points], dtype=np.float64)
        b = np.array([p.bpp for p in self.points], dtype=np.float64)
        keep = np.isfinite(q) & (b > 0)
        if not keep.all():
            warnings.warn(f"dropping {int((~keep).sum())} non-finite or zero-rate points from {self.method_id!r}", stacklevel=2)
        q, b = q[keep], b[keep]
        order = np.argsort(q, kind="stable")
        q, b = q[order], b[order]
        uniq = np.concatenate([[True], np.diff(q) > 0])
        if not uniq.all():
            warnings.warn(f"dropping points with repeated {metric} from {self.method_id!r}", stacklevel=2)
        return q[uniq], np.log(b[uniq])


@dataclass
class JNDQuality:
    value: float
    metric: str
    image_id: str = ""

    def __post_init__(self):
        _check_metric(self.metric)


def bd_rate(anchor: RDCurve, test: RDCurve, metric: str = "psnr") -> float:
    """Average bitrate difference (percent) of ``test`` vs ``anchor`` at equal quality.

    log(bpp) is interpolated against quality with monotone piecewise-cubic
    (PCHIP) interpolation and integrated with the trapezoid rule over the
    shared quality interval.  Negative values mean ``test`` needs fewer bits.
    """
    qa, la = anchor.log_rate_knots(metric)
    qt, lt = test.log_rate_knots(metric)
    for name, q in (("anchor", qa), ("test", qt)):
        if q.size < 4:
            raise ValueError(f"BD-rate needs at least 4 usable points per curve; {name} has {q.size}")
    lo = max(qa[0], qt[0])
    hi = min(qa[-1], qt[-1])
    union = max(qa[-1], qt[-1]) - min(qa[0], qt[0])
    if not hi > lo or (hi - lo) < MIN_OVERLAP_FRACTION * union:
        raise OutOfRangeError(
            f"quality ranges overlap on [{lo:.4g}, {hi:.4g}], less than {MIN_OVERLAP_FRACTION:.0%} of the union span"
        )
    samples = np.linspace(lo, hi, BD_SAMPLES)
    va = PchipInterpolator(qa, la)(samples)
    vt = PchipInterpolator(qt, lt)(samples)
    avg = np.trapezoid(vt - va, samples) / (hi - lo)
    return float(100.0 * np.expm1(avg))


def bpp_at_quality(curve: RDCurve, q: float, metric: str = "psnr") -> float:
    """bpp at which the curve reaches quality ``q``; no extrapolation."""
    qs, logs = curve.log_rate_knots(metric)
    if qs.size < 2:
        raise ValueError(f"interpolation needs at least 2 usable points, curve has {qs.size}")
    if not (qs[0] <= q <= qs[-1]):
        raise OutOfRangeError(f"{metric} {q} is outside the curve span [{qs[0]}, {qs[-1]}]")
    for p in curve.points:
        # exact knot hit: return the stored rate rather than exp(log(bpp))
        if p.quality(metric) == q and p.bpp > 0:
            return p.bpp
    return float(np.exp(PchipInterpolator(qs, logs)(q)))


def bs_jnd(baseline: RDCurve, proposed: RDCurve, jnd: JNDQuality) -> float:
    """Percent bitrate change needed by ``proposed`` to reach the JND quality."""
    bl = bpp_at_quality(baseline, jnd.value, jnd.metric)
    prop = bpp_at_quality(proposed, jnd.value, jnd.metric)
    # scaling before the subtraction keeps decimal fixtures like (0.9, 1.0) exact
    return (100.0 * prop - 100.0 * bl) / bl


def jnd_quality_of_pair(x_o: Tensor, x_j: Tensor, metric: str = "psnr", image_id: str = "") -> JNDQuality:
    """Quality of the JND image w.r.t. its original, used as the JND threshold."""
    _check_metric(metric)
    value = psnr(x_o, x_j) if metric == "psnr" else msssim_metric(x_o, x_j)
    if value == math.inf or value == 1.0:
        warnings.warn(f"JND threshold for {image_id or 'pair'} is degenerate (x_j equals x_o)", stacklevel=2)
    return JNDQuality(value, metric, image_id)


@dataclass
class RDResults:
    """Contents of an RD results file.

    ``points`` holds one dataset-averaged point per lambda; ``per_image`` holds
    the per-image points those averages came from (used for per-image curves).
    """

    dataset_id: str
    method_id: str
    points: list[RDPoint] = field(default_factory=list)
    jnd: list[JNDQuality] = field(default_factory=list)
    per_image: list[RDPoint] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def curve(self) -> RDCurve:
        return RDCurve(list(self.points), self.method_id, self.dataset_id)

    def image_curves(self) -> dict[str, RDCurve]:
        groups: dict[str, list[RDPoint]] = {}
        for p in self.per_image:
            groups.setdefault(p.image_id or "", []).append(p)
        return {k: RDCurve(v, self.method_id, self.dataset_id) for k, v in groups.items()}

    def merge(self, other: "RDResults") -> "RDResults":
        if other.method_id != self.method_id:
            raise ValueError("cannot merge results of different methods")
        merged_jnd = {(j.image_id, j.metric): j for j in self.jnd + other.jnd}
        return RDResults(
            self.dataset_id,
            self.method_id,
            sorted(self.points + other.points, key=lambda p: p.bpp),
            list(merged_jnd.values()),
            self.per_image + other.per_image,
            {**self.meta, **other.meta},
        )
