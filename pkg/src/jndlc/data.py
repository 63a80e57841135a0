"""Image IO, manifests, source mixing, aligned patching and JND proxies."""

from __future__ import annotations

import io
import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from scipy.fft import dctn, idctn
from torch import Tensor

from .results import atomic_write

log = logging.getLogger(__name__)

MAX_PROXY_LEVEL = 10
_BLOCK = 8
# JPEG Annex K luminance table
_JPEG_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
_PROXY_SCALE_PER_LEVEL = 0.3
_ACCEPTED_MODES = {"RGB", "RGBA", "L", "LA", "P", "1"}


class Source(str, Enum):
    JND_LABELED = "jnd_labeled"
    UNLABELED_PROXY = "unlabeled_proxy"


# ---------------------------------------------------------------- image IO


def load_image(path: str | Path) -> Tensor:
    """Read an 8-bit PNG/PPM (or other 8-bit format) as a [1, 3, H, W] tensor in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode not in _ACCEPTED_MODES:
                raise ValueError(f"{path}: unsupported image mode {im.mode!r} (8-bit images only)")
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ValueError(f"{path}: cannot decode image ({e})") from e
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0).contiguous()


def to_uint8(x: Tensor) -> np.ndarray:
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise ValueError("can only convert a single image")
        x = x[0]
    arr = torch.round(x.detach().to(torch.float64).clamp(0, 1) * 255.0)
    return arr.to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def save_image(x: Tensor, path: str | Path) -> None:
    """Write a [1, 3, H, W] or [3, H, W] image as 8-bit; format from the suffix."""
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM", ".pnm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ValueError(f"unsupported image extension {path.suffix!r} (use .png or .ppm)")
    buf = io.BytesIO()
    Image.fromarray(to_uint8(x), "RGB").save(buf, format=fmt)
    atomic_write(path, buf.getvalue())


# --------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path_o: str
    path_j: str | None = None
    source: Source = Source.JND_LABELED

    def __post_init__(self):
        object.__setattr__(self, "source", Source(self.source))
        if self.source is Source.JND_LABELED and not self.path_j:
            raise ValueError(f"labeled entry {self.image_id!r} has no path_j")

    def to_dict(self) -> dict:
        d = {"image_id": self.image_id, "path_o": self.path_o, "source": self.source.value}
        if self.path_j:
            d["path_j"] = self.path_j
        return d


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: str = "train"
    seed: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Parse a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            po = str(base / d["path_o"])
            pj = str(base / d["path_j"]) if d.get("path_j") else None
            src = d.get("source") or (Source.JND_LABELED if pj else Source.UNLABELED_PROXY)
            entries.append(ManifestEntry(str(d["image_id"]), po, pj, src))
        except (json.JSONDecodeError, KeyError, ValueError) as e:
            raise ValueError(f"{path}:{lineno}: bad manifest entry ({e})") from e
    return entries


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    atomic_write(path, "".join(json.dumps(e.to_dict()) + "\n" for e in entries))


def split_manifest(
    entries: Sequence[ManifestEntry], train_fraction: float = 0.8, seed: int = 0
) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded shuffle, then the first ``round(fraction * n)`` entries go to training."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie strictly between 0 and 1, got {train_fraction}")
    if not entries:
        raise ValueError("cannot split an empty manifest")
    order = np.random.default_rng(seed).permutation(len(entries))
    n_train = int(round(train_fraction * len(entries)))
    shuffled = [entries[i] for i in order]
    return (
        DatasetManifest(shuffled[:n_train], "train", seed),
        DatasetManifest(shuffled[n_train:], "eval", seed),
    )


def mix_sources(
    labeled: Sequence[ManifestEntry],
    unlabeled: Sequence[ManifestEntry],
    seed: int = 0,
    epoch: int = 0,
) -> list[ManifestEntry]:
    """One epoch's schedule: every labeled entry plus as many unlabeled ones, interleaved.

    Unlabeled entries are drawn without replacement when the pool is large
    enough, with replacement otherwise.  They are re-drawn every epoch.
    """
    labeled = list(labeled)
    if not labeled:
        raise ValueError("labeled set is empty")
    rng = np.random.default_rng([seed, epoch])
    n = len(labeled)
    pool = [replace(e, path_j=None, source=Source.UNLABELED_PROXY) for e in unlabeled]
    if not pool:
        log.warning("no unlabeled images; the stream holds %d labeled pairs only", n)
        chosen: list[ManifestEntry] = []
    elif len(pool) < n:
        log.warning("unlabeled pool (%d) smaller than labeled set (%d); sampling with replacement", len(pool), n)
        chosen = [pool[i] for i in rng.integers(0, len(pool), size=n)]
    else:
        chosen = [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
    stream = labeled + chosen
    return [stream[i] for i in rng.permutation(len(stream))]


# ------------------------------------------------------------------- pairs


def _bit_identical(a: Tensor, b: Tensor) -> bool:
    # byte comparison, so NaN payloads count as identical
    return a.dtype == b.dtype and torch.equal(a.contiguous().view(torch.uint8), b.contiguous().view(torch.uint8))


@dataclass
class SamplePair:
    x_o: Tensor
    x_j: Tensor
    source: Source
    image_id: str
    offset: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        self.source = Source(self.source)
        if self.x_o.shape != self.x_j.shape:
            raise ValueError(f"pair {self.image_id!r}: x_o {tuple(self.x_o.shape)} vs x_j {tuple(self.x_j.shape)}")
        if self.source is Source.UNLABELED_PROXY and not _bit_identical(self.x_o, self.x_j):
            raise ValueError(f"proxy pair {self.image_id!r} must have x_j identical to x_o")

    @classmethod
    def proxy(cls, x_o: Tensor, image_id: str) -> "SamplePair":
        return cls(x_o, x_o.clone(), Source.UNLABELED_PROXY, image_id)


def load_pair(entry: ManifestEntry) -> SamplePair:
    x_o = load_image(entry.path_o)
    if entry.source is Source.UNLABELED_PROXY:
        return SamplePair.proxy(x_o, entry.image_id)
    return SamplePair(x_o, load_image(entry.path_j), Source.JND_LABELED, entry.image_id)


@dataclass(frozen=True)
class PatchSpec:
    size: int = 64
    patches_per_image: int = 1
    seed: int = 0

    def check(self, downsampling: int) -> None:
        if self.size % downsampling:
            raise ValueError(f"patch size {self.size} is not divisible by downsampling factor {downsampling}")


def extract_aligned_patches(pair: SamplePair, spec: PatchSpec, epoch: int = 0) -> list[SamplePair]:
    """Crop the same random windows out of ``x_o`` and ``x_j``."""
    h, w = pair.x_o.shape[-2:]
    if h < spec.size or w < spec.size:
        log.warning("skipping %s: %dx%d is smaller than patch size %d", pair.image_id, h, w, spec.size)
        return []
    rng = np.random.default_rng([spec.seed, epoch, zlib.crc32(pair.image_id.encode())])
    out = []
    for k in range(spec.patches_per_image):
        r = int(rng.integers(0, h - spec.size + 1))
        c = int(rng.integers(0, w - spec.size + 1))
        window = (..., slice(r, r + spec.size), slice(c, c + spec.size))
        xo = pair.x_o[window].clone()
        xj = xo.clone() if pair.source is Source.UNLABELED_PROXY else pair.x_j[window].clone()
        out.append(SamplePair(xo, xj, pair.source, f"{pair.image_id}#{k}", offset=(r, c)))
    return out


def build_patch_set(pairs: Sequence[SamplePair], spec: PatchSpec, epoch: int = 0) -> list[SamplePair]:
    patches: list[SamplePair] = []
    for p in pairs:
        patches.extend(extract_aligned_patches(p, spec, epoch))
    return patches


# ------------------------------------------------------------- JND proxies


def synth_jnd_proxy(x_o: Tensor, level: int) -> Tensor:
    """Deterministic JPEG-like degradation: 8x8 block DCT with quantization that coarsens with ``level``.

    Level 0 returns an exact copy.
    """
    if not 0 <= level <= MAX_PROXY_LEVEL:
        raise ValueError(f"proxy level must lie in [0, {MAX_PROXY_LEVEL}], got {level}")
    if level == 0:
        return x_o.clone()
    squeeze = x_o.dim() == 3
    x = x_o.unsqueeze(0) if squeeze else x_o
    arr = x.detach().to(torch.float64).cpu().numpy()
    n, c, h, w = arr.shape
    ph, pw = -h % _BLOCK, -w % _BLOCK
    arr = np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect" if min(h, w) > 1 else "edge")
    hb, wb = arr.shape[2] // _BLOCK, arr.shape[3] // _BLOCK
    blocks = arr.reshape(n, c, hb, _BLOCK, wb, _BLOCK).transpose(0, 1, 2, 4, 3, 5)
    step = _JPEG_LUMA * (_PROXY_SCALE_PER_LEVEL * level) / 255.0
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / step) * step
    rec = idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hb * _BLOCK, wb * _BLOCK)[:, :, :h, :w]
    out = torch.from_numpy(np.clip(rec, 0.0, 1.0)).to(x_o.dtype)
    return out[0] if squeeze else out


def make_toy_images(count: int, size: int = 64, seed: int = 0) -> list[Tensor]:
    """Synthetic natural-ish images: smooth gradients, colored shapes and mild texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    images = []
    for _ in range(count):
        img = np.empty((3, size, size))
        base = rng.uniform(0.2, 0.8, size=3)
        gx, gy = rng.uniform(-0.3, 0.3, size=(2, 3))
        for ch in range(3):
            img[ch] = base[ch] + gx[ch] * (xx - 0.5) + gy[ch] * (yy - 0.5)
        for _ in range(rng.integers(2, 6)):
            color = rng.uniform(0, 1, size=3)
            cy, cx = rng.uniform(0, 1, size=2)
            if rng.random() < 0.5:
                half = rng.uniform(0.08, 0.3, size=2)
                mask = (np.abs(yy - cy) < half[0]) & (np.abs(xx - cx) < half[1])
                weight = mask.astype(np.float64)
            else:
                rad = rng.uniform(0.05, 0.25)
                weight = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2))
            img = img * (1 - weight) + color[:, None, None] * weight
        freq = rng.uniform(4, 16)
        angle = rng.uniform(0, np.pi)
        stripes = 0.05 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
        img = img + stripes + rng.normal(0, 0.01, size=img.shape)
        images.append(torch.from_numpy(np.clip(img, 0, 1)).float().unsqueeze(0))
    return images


def toy_pairs(count: int, size: int = 64, seed: int = 0, level: int = 3, labeled_fraction: float = 0.5) -> list[SamplePair]:
    """Toy dataset: the first ``labeled_fraction`` carry synthetic JND images, the rest are proxies."""
    images = make_toy_images(count, size, seed)
    n_lab = int(round(labeled_fraction * count))
    pairs = []
    for i, x in enumerate(images):
        if i < n_lab:
            pairs.append(SamplePair(x, synth_jnd_proxy(x, level), Source.JND_LABELED, f"toy{i:03d}"))
        else:
            pairs.append(SamplePair.proxy(x, f"toy{i:03d}"))
    return pairs
