"""Train the three models on a two-mode 2-D mixture and report what they learned.

About ten seconds on one core:

    python3 demos/mixture_2d.py
"""

import numpy as np

from dtriangle.cli import DataConfig, load_dataset
from dtriangle.metrics import energy_gap, mode_coverage, recon_mse, uniform_probes
from dtriangle.models import ModelConfig, generate, sample_prior
from dtriangle.optim import stream
from dtriangle.trainer import TrainConfig, train

data = load_dataset(DataConfig(n=4096), seed=0)
model = ModelConfig(hidden=(64, 64), gen_output="linear")
cfg = TrainConfig(iterations=2000, batch_size=64, prior_batch_size=64, lr_alpha=1e-3, lr_phi=1e-3, lr_theta=1e-3, log_interval=250)

result = train(cfg, data, model)
for row in result.metrics:
    print(f"iter {row['iter']:5.0f}  loss_alpha {row['loss_alpha']:+8.3f}  recon {row['recon_wake']:8.3f}")

m = result.state.models
rng = stream(0, "probe")
probes = uniform_probes((2,), 4000, rng, -3.0, 3.0)
samples = generate(m.gen, sample_prior(4000, 2, rng), "gaussian", rng).data
print("energy gap (data vs uniform probes):", round(energy_gap(m.en, data.examples, probes), 2))
print("fraction of samples near each mode:", [round(f, 2) for f in mode_coverage(samples, [(-2, 0), (2, 0)], 0.9)])
print("reconstruction MSE:", round(recon_mse(data.examples[:500], m.gen, m.inf), 4))

# coarse text plot of f on [-3, 3] x [-1.5, 1.5]; denser characters mean higher f (lower energy)
grid = np.stack(np.meshgrid(np.linspace(-3, 3, 48), np.linspace(1.5, -1.5, 16)), -1).reshape(-1, 2)
f = m.en(grid).data.reshape(16, 48)
levels = " .:-=+*#%@"
q = np.clip(((f - f.min()) / (np.ptp(f) + 1e-12) * (len(levels) - 1)).astype(int), 0, len(levels) - 1)
print("\n".join("".join(levels[v] for v in row) for row in q))
