# Train a tiny codec on toy images, then push one image through the real bitstream.
# Runs in well under a minute on one CPU thread.
import torch

from jndlc import TrainConfig, compress, decompress, evaluate, psnr, toy_pairs, train
from jndlc.codec import ArchDescriptor
from jndlc.data import PatchSpec

torch.set_num_threads(1)

pairs = toy_pairs(16, 64, seed=0)   # half JND-labeled, half proxy
held_out = toy_pairs(4, 64, seed=99)

cfg = TrainConfig(
    lambdas=(0.0067,),
    epochs=50,
    max_steps=60,
    batch_size=4,
    learning_rate=1e-3,
    patch=PatchSpec(32),
    arch=ArchDescriptor(hidden_channels=16, latent_channels=16, downsampling=4),
)
ckpt, log = train(cfg, pairs)
print("first loss", round(log.steps[0].total_loss, 3), "last loss", round(log.steps[-1].total_loss, 3))

x = held_out[0].x_o
comp = compress(ckpt.codec, x)
x_hat = decompress(ckpt.codec, comp.bitstream)
print("bytes on disk:", len(comp.bitstream.to_bytes()), "bpp:", round(comp.bpp, 3))
print("psnr:", round(psnr(x, x_hat), 2))

# same numbers, averaged over the held-out set
print(evaluate(ckpt, held_out).points[0])
