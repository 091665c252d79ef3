"""Recover salt-and-pepper occluded digits while training on them.

A short run (under a minute) on 200 images; the acceptance suite does the
full 1,000-image, 5,000-iteration version.

    python3 demos/occlusion.py /tmp/occlusion_demo
"""

import os
import sys
import tempfile

from dtriangle.data import load_idx, materialize_mnist
from dtriangle.images import write_grid
from dtriangle.models import ModelConfig
from dtriangle.occlusion import IncompleteDataset, recovery_panel, train_incomplete
from dtriangle.trainer import TrainConfig

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="dtri_occ_")
os.makedirs(out, exist_ok=True)
imgs, lbls = materialize_mnist(os.path.join(out, "mnist"))
digits = load_idx(imgs, lbls, downsample=True).per_class(20)

ds = IncompleteDataset.from_images(digits.examples, "P.5", seed=0, labels=digits.labels)
model = ModelConfig(architecture="conv14", signal_shape=(1, 14, 14), latent_dim=16, width_mult=0.125)
cfg = TrainConfig(iterations=1000, batch_size=20, prior_batch_size=20, grad_clip=100.0, log_interval=200)
res = train_incomplete(cfg, model, ds)

for row in res.trace[::5]:
    print(f"update {row['update_index']:3d}  recovery error {row['recovery_error']:.4f}")
print(f"zero fill {res.baseline:.4f} -> recovered {res.final_error:.4f}")
write_grid(os.path.join(out, "panel.pgm"), recovery_panel(ds, 10), cols=10)
print("rows: original, occluded, recovered ->", os.path.join(out, "panel.pgm"))
