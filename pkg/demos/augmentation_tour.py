"""
The seeded augmentation pipeline: every sample's transforms are drawn from a
stream keyed by (seed, epoch, index), so batches replay exactly.

    python3 demos/augmentation_tour.py [outdir]
"""

import sys
from pathlib import Path

import numpy as np

from siaa.data import AugmentationConfig, augment, augment_batch, make_toy_imageset, sample_plan, \
    sample_stream, write_png

out = Path(sys.argv[1] if len(sys.argv) > 1 else "augment-demo")
images = make_toy_imageset(4, size=64, seed=0).images
config = AugmentationConfig(output_size=(64, 64))

for index in range(3):
    print(index, sample_plan(config, sample_stream(seed=0, epoch=0, index=index)))

batch = augment_batch(images, config, seed=0, epoch=0, indices=range(len(images)))
again = augment_batch(images, config, seed=0, epoch=0, indices=range(len(images)))
print("replay identical:", np.array_equal(batch, again))

for k, img in enumerate(batch):
    write_png(out / f"aug{k}.png", img)
    write_png(out / f"orig{k}.png", images[k])
print("wrote", len(batch), "pairs to", out)

plain = augment(images[0], AugmentationConfig.off(output_size=(32, 32)), np.random.default_rng(0))
print("disabled pipeline only resizes:", plain.shape)
