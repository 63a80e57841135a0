"""RD training loop, lambda sweeps, checkpoints and RD evaluation."""

from __future__ import annotations

import configparser
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
import torch

from .codec import ArchDescriptor, Codec
from .compression import compress, decompress
from .data import PatchSpec, SamplePair
from .errors import ConfigurationError, FormatError, NumericError
from .losses import LAMBDA_PRESETS, LossConfig, objective
from .metrics import RDPoint, RDResults, jnd_quality_of_pair, msssim_metric, psnr
from .results import atomic_write

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

DataSource = Union[Sequence[SamplePair], Callable[[int], Sequence[SamplePair]]]


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    lambdas: tuple[float, ...] = (0.0018, 0.0067, 0.0483)
    epochs: int = 1
    max_steps: int | None = None
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    patch: PatchSpec = field(default_factory=PatchSpec)
    arch: ArchDescriptor = field(default_factory=ArchDescriptor)
    optimizer: str = "adam"
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    warm_start: bool = False
    prior_lr_scale: float = 1.0

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if not self.lambdas:
            raise ConfigurationError("lambda grid is empty")
        if any(v <= 0 for v in self.lambdas):
            raise ConfigurationError("lambdas must be positive")
        if any(b <= a for a, b in zip(self.lambdas, self.lambdas[1:])):
            raise ConfigurationError("lambdas must be strictly increasing")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be at least 1")
        if self.learning_rate < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.prior_lr_scale <= 0:
            raise ConfigurationError("prior_lr_scale must be positive")
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        self.patch.check(self.arch.downsampling)

    @classmethod
    def preset(cls, name: str, loss: LossConfig | None = None, **overrides) -> "TrainConfig":
        """``desk``: 64x64 patches, 3 lambdas, minutes on a CPU.  ``paper``: the full protocol."""
        loss = loss or LossConfig()
        family = "msssim" if loss.family.value == "one_minus_msssim" else "mse"
        grid = LAMBDA_PRESETS[f"paper-{family}"]
        if name == "desk":
            base = cls(
                loss=loss,
                lambdas=(grid[0], grid[2], grid[5]),
                epochs=10_000,
                max_steps=300,
                batch_size=8,
                learning_rate=1e-3,
                prior_lr_scale=10.0,
                patch=PatchSpec(size=64),
                arch=ArchDescriptor(hidden_channels=64, latent_channels=64, downsampling=8),
            )
        elif name == "paper":
            base = cls(
                loss=loss,
                lambdas=grid,
                epochs=100,
                batch_size=16,
                learning_rate=1e-4,
                patch=PatchSpec(size=256),
                arch=ArchDescriptor(hidden_channels=128, latent_channels=192, downsampling=16),
            )
        else:
            raise ConfigurationError(f"unknown preset {name!r} (desk, paper)")
        return replace(base, **overrides)

    def to_dict(self) -> dict:
        return {
            "loss": self.loss.to_dict(),
            "lambdas": list(self.lambdas),
            "epochs": self.epochs,
            "max_steps": self.max_steps,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "patch": asdict(self.patch),
            "arch": self.arch.to_dict(),
            "optimizer": self.optimizer,
            "grad_clip": self.grad_clip,
            "checkpoint_every": self.checkpoint_every,
            "warm_start": self.warm_start,
            "prior_lr_scale": self.prior_lr_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            loss=LossConfig.from_dict(d.get("loss", {})),
            lambdas=tuple(d.get("lambdas", (0.0067,))),
            epochs=int(d.get("epochs", 1)),
            max_steps=d.get("max_steps"),
            batch_size=int(d.get("batch_size", 16)),
            learning_rate=float(d.get("learning_rate", 1e-4)),
            seed=int(d.get("seed", 0)),
            patch=PatchSpec(**d.get("patch", {})),
            arch=ArchDescriptor(**d.get("arch", {})),
            optimizer=d.get("optimizer", "adam"),
            grad_clip=float(d.get("grad_clip", 1.0)),
            checkpoint_every=int(d.get("checkpoint_every", 0)),
            warm_start=bool(d.get("warm_start", False)),
            prior_lr_scale=float(d.get("prior_lr_scale", 1.0)),
        )

    def to_text(self) -> str:
        """INI text with a ``[loss]`` and a ``[train]`` section."""
        cp = configparser.ConfigParser()
        cp.read_string(self.loss.to_text())
        d = self.to_dict()
        cp["train"] = {
            "lambdas": ",".join(repr(v) for v in self.lambdas),
            "epochs": str(self.epochs),
            "max_steps": "" if self.max_steps is None else str(self.max_steps),
            "batch_size": str(self.batch_size),
            "learning_rate": repr(self.learning_rate),
            "seed": str(self.seed),
            "patch_size": str(self.patch.size),
            "patches_per_image": str(self.patch.patches_per_image),
            "hidden_channels": str(self.arch.hidden_channels),
            "latent_channels": str(self.arch.latent_channels),
            "downsampling": str(self.arch.downsampling),
            "nonlinearity": self.arch.nonlinearity,
            "grad_clip": repr(self.grad_clip),
            "checkpoint_every": str(d["checkpoint_every"]),
            "warm_start": str(self.warm_start).lower(),
            "prior_lr_scale": repr(self.prior_lr_scale),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        cfg = base or cls()
        loss = LossConfig.from_dict({**cfg.loss.to_dict(), **dict(cp["loss"])}) if "loss" in cp else cfg.loss
        if "train" not in cp:
            return replace(cfg, loss=loss)
        t = cp["train"]
        patch = PatchSpec(
            size=t.getint("patch_size", cfg.patch.size),
            patches_per_image=t.getint("patches_per_image", cfg.patch.patches_per_image),
            seed=cfg.patch.seed,
        )
        arch = ArchDescriptor(
            hidden_channels=t.getint("hidden_channels", cfg.arch.hidden_channels),
            latent_channels=t.getint("latent_channels", cfg.arch.latent_channels),
            downsampling=t.getint("downsampling", cfg.arch.downsampling),
            nonlinearity=t.get("nonlinearity", cfg.arch.nonlinearity),
        )
        lambdas = tuple(float(v) for v in t["lambdas"].split(",")) if t.get("lambdas") else cfg.lambdas
        max_steps = t.get("max_steps", None)
        return replace(
            cfg,
            loss=loss,
            lambdas=lambdas,
            epochs=t.getint("epochs", cfg.epochs),
            max_steps=int(max_steps) if max_steps else (None if max_steps == "" else cfg.max_steps),
            batch_size=t.getint("batch_size", cfg.batch_size),
            learning_rate=t.getfloat("learning_rate", cfg.learning_rate),
            seed=t.getint("seed", cfg.seed),
            patch=patch,
            arch=arch,
            grad_clip=t.getfloat("grad_clip", cfg.grad_clip),
            checkpoint_every=t.getint("checkpoint_every", cfg.checkpoint_every),
            warm_start=t.getboolean("warm_start", cfg.warm_start),
            prior_lr_scale=t.getfloat("prior_lr_scale", cfg.prior_lr_scale),
        )


@dataclass
class StepRecord:
    step: int
    epoch: int
    rate_bpp: float
    distortion: float
    total_loss: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def totals(self) -> np.ndarray:
        return np.array([s.total_loss for s in self.steps])

    def smoothed(self, window: int = 20) -> np.ndarray:
        t = self.totals()
        if t.size == 0:
            return t
        kernel = np.ones(min(window, t.size)) / min(window, t.size)
        return np.convolve(t, kernel, mode="valid")

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"type": "step", **asdict(s)}) + "\n" for s in self.steps) + "".join(
            json.dumps({"type": "epoch", **e}) + "\n" for e in self.epochs
        )


@dataclass
class Checkpoint:
    codec: Codec
    config: TrainConfig
    lam: float
    epoch: int = 0
    step: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def loss(self) -> LossConfig:
        return self.config.loss.with_lambda(self.lam)

    def to_bytes(self) -> bytes:
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "descriptor": self.codec.descriptor(),
            "state_dict": {k: v.detach().clone() for k, v in self.codec.state_dict().items()},
            "model_hash": self.codec.model_hash().hex(),
            "train_config": json.dumps(self.config.to_dict()),
            "loss_config": self.loss.to_text(),
            "lambda": self.lam,
            "epoch": self.epoch,
            "step": self.step,
            "stats": json.dumps(self.stats),
        }
        buf = io.BytesIO()
        torch.save(payload, buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        try:
            payload = torch.load(io.BytesIO(data), map_location="cpu", weights_only=True)
        except Exception as e:  # torch raises several unrelated types on garbage input
            raise FormatError(f"not a checkpoint: {e}") from e
        if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {payload.get('format_version') if isinstance(payload, dict) else None}")
        codec = Codec.from_descriptor(payload["descriptor"])
        codec.load_state_dict(payload["state_dict"])
        if codec.model_hash().hex() != payload["model_hash"]:
            raise FormatError("checkpoint hash mismatch (corrupted parameters)")
        config = TrainConfig.from_dict(json.loads(payload["train_config"]))
        return cls(codec, config, float(payload["lambda"]), payload["epoch"], payload["step"], json.loads(payload["stats"]))

    def save(self, path: str | Path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _optimizer(codec: Codec, config: TrainConfig) -> torch.optim.Optimizer:
    prior = list(codec.entropy_model.parameters())
    prior_ids = {id(p) for p in prior}
    transforms = [p for p in codec.parameters() if id(p) not in prior_ids]
    return torch.optim.Adam(
        [
            {"params": transforms, "lr": config.learning_rate},
            {"params": prior, "lr": config.learning_rate * config.prior_lr_scale},
        ]
    )


def _batches(pairs: Sequence[SamplePair], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(pairs))
    for i in range(0, len(order), batch_size):
        idx = order[i : i + batch_size]
        yield (
            torch.cat([pairs[j].x_o for j in idx]),
            torch.cat([pairs[j].x_j for j in idx]),
        )


def train(
    config: TrainConfig,
    data: DataSource,
    lam: float | None = None,
    init: Checkpoint | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Train one codec for one lambda (default: the first of the grid).

    ``data`` is either a fixed list of equally-sized patch pairs or a callable
    mapping the epoch index to one.  Training stops after ``config.epochs``
    epochs or ``config.max_steps`` optimizer steps, whichever comes first.
    """
    lam = config.lambdas[0] if lam is None else float(lam)
    loss_cfg = config.loss.with_lambda(lam)
    codec = Codec(config.arch, seed=config.seed)
    if init is not None:
        if init.codec.descriptor() != codec.descriptor():
            raise ConfigurationError("warm-start checkpoint has a different architecture")
        codec.load_state_dict(init.codec.state_dict())
    codec.train()
    opt = _optimizer(codec, config)
    gen = torch.Generator().manual_seed(config.seed)
    trainlog = TrainLog()
    step = 0
    epoch = 0
    done = False
    while epoch < config.epochs and not done:
        pairs = data(epoch) if callable(data) else data
        if not pairs:
            raise ValueError("training data is empty")
        rng = np.random.default_rng([config.seed, epoch])
        sums = np.zeros(3)
        count = 0
        for x_o, x_j in _batches(pairs, config.batch_size, rng):
            out = codec(x_o, generator=gen)
            total, d = objective(loss_cfg, out["rate_bpp"], x_o, x_j, out["x_hat"])
            rate = float(out["rate_bpp"].detach())
            if not math.isfinite(float(total.detach())):
                raise NumericError(
                    f"non-finite loss at lambda={lam} step={step}: rate={rate} distortion={float(d.detach())} total={float(total.detach())}"
                )
            opt.zero_grad(set_to_none=True)
            total.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(codec.parameters(), config.grad_clip)
            opt.step()
            rec = StepRecord(step, epoch, rate, float(d.detach()), float(total.detach()))
            trainlog.steps.append(rec)
            sums += (rec.rate_bpp, rec.distortion, rec.total_loss)
            count += 1
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        means = sums / max(count, 1)
        trainlog.epochs.append(
            {"epoch": epoch, "steps": count, "rate_bpp": means[0], "distortion": means[1], "total_loss": means[2]}
        )
        log.info("lambda=%g epoch=%d loss=%.4f bpp=%.4f", lam, epoch, means[2], means[0])
        epoch += 1
        if checkpoint_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            _snapshot(codec, config, lam, epoch, step, trainlog).save(
                Path(checkpoint_dir) / f"{loss_cfg.method_id}_lambda{lam:g}_epoch{epoch}.ckpt"
            )
    codec.eval()
    ckpt = _snapshot(codec, config, lam, epoch, step, trainlog)
    if checkpoint_dir:
        ckpt.save(Path(checkpoint_dir) / f"{loss_cfg.method_id}_lambda{lam:g}.ckpt")
    return ckpt, trainlog


def _snapshot(codec: Codec, config: TrainConfig, lam: float, epoch: int, step: int, trainlog: TrainLog) -> Checkpoint:
    last = trainlog.epochs[-1] if trainlog.epochs else {}
    stats = {k: float(v) for k, v in last.items() if k != "epoch"}
    clone = Codec.from_descriptor(codec.descriptor())
    clone.load_state_dict(codec.state_dict())
    clone.eval()
    return Checkpoint(clone, config, lam, epoch, step, stats)


def sweep(
    config: TrainConfig, data: DataSource, checkpoint_dir: str | Path | None = None
) -> list[tuple[Checkpoint, TrainLog]]:
    """One run per lambda in ascending order, optionally warm-started from the previous one."""
    runs = []
    prev = None
    for lam in config.lambdas:
        ckpt, tlog = train(config, data, lam=lam, init=prev if config.warm_start else None, checkpoint_dir=checkpoint_dir)
        runs.append((ckpt, tlog))
        prev = ckpt
    return runs


def evaluate(
    checkpoint: Checkpoint,
    eval_pairs: Sequence[SamplePair],
    dataset_id: str = "eval",
    method_id: str | None = None,
) -> RDResults:
    """Compress and decompress every image through the real bitstream.

    bpp is payload bits over the unpadded pixel count; PSNR and MS-SSIM are
    measured against ``x_o`` on the unpadded region.
    """
    codec = checkpoint.codec
    codec.eval()
    method_id = method_id or checkpoint.loss.method_id
    tables = codec.entropy_model.coding_tables()
    per_image = []
    jnd = []
    for pair in eval_pairs:
        comp = compress(codec, pair.x_o, tables)
        x_hat = decompress(codec, comp.bitstream, tables)
        x_o = pair.x_o.to(x_hat.dtype)
        per_image.append(
            RDPoint(comp.bpp, psnr(x_o, x_hat), msssim_metric(x_o, x_hat), checkpoint.lam, method_id, pair.image_id)
        )
        if not torch.equal(pair.x_o, pair.x_j):
            for metric in ("psnr", "msssim"):
                jnd.append(jnd_quality_of_pair(pair.x_o, pair.x_j, metric, pair.image_id))
    if not per_image:
        raise ValueError("no evaluation images")
    finite_psnr = [p.psnr for p in per_image if math.isfinite(p.psnr)]
    point = RDPoint(
        float(np.mean([p.bpp for p in per_image])),
        float(np.mean(finite_psnr)) if finite_psnr else math.inf,
        float(np.mean([p.msssim for p in per_image])),
        checkpoint.lam,
        method_id,
    )
    meta = {"padding": "reflect to a multiple of the downsampling factor; metrics on the unpadded region"}
    return RDResults(dataset_id, method_id, [point], jnd, per_image, meta)


def evaluate_sweep(
    checkpoints: Sequence[Checkpoint], eval_pairs: Sequence[SamplePair], dataset_id: str = "eval", method_id: str | None = None
) -> RDResults:
    results = None
    for ckpt in checkpoints:
        r = evaluate(ckpt, eval_pairs, dataset_id, method_id)
        results = r if results is None else results.merge(r)
    if results is None:
        raise ValueError("no checkpoints to evaluate")
    return results

