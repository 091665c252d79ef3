"""Finite-difference checks of the three training objectives and the conv primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, check_gradients, conv2d, conv_transpose2d, kink_monitor, no_grad
from .models import ModelConfig, build_models
from .optim import stream
from .triangle import compute_triangle_loss

LOSS_OWNER = {"loss_alpha": "alpha", "loss_phi": "phi", "loss_theta": "theta"}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool
    near_kink: bool = False

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        kink = " (near kink)" if self.near_kink else ""
        return f"{verdict} {self.name}: max rel error {self.max_rel_error:.3e}{kink}"


def param_gradcheck(loss_fn, store, step: float = 1e-5, floor: float = 1e-6):
    """Central differences of scalar ``loss_fn()`` over every entry of ``store``.

    Returns ``(max_rel_error, near_kink)``; the tape gradient comes from one
    backward pass with all other stores left as they are.
    """
    store.zero_grad()
    with kink_monitor() as kinks:
        out = loss_fn()
    out.backward()
    worst = 0.0
    with no_grad():
        for _, p in store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = loss_fn().item()
                flat[i] = orig - step
                lo = loss_fn().item()
                flat[i] = orig
                num = (hi - lo) / (2 * step)
                a = float(g.reshape(-1)[i])
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    store.zero_grad()
    return worst, bool(kinks) and min(kinks) < 1e-6


def triangle_gradchecks(seed: int = 0, batch: int = 4, latent_dim: int = 2, signal_dim: int = 8, tol: float = 1e-4):
    """Check each objective against differences in its own parameter set on a random small MLP."""
    cfg = ModelConfig(
        architecture="mlp", signal_shape=(signal_dim,), latent_dim=latent_dim, hidden=(6,), init_std=0.5, gen_output="tanh"
    )
    rng = stream(seed, "init")
    models = build_models(cfg, rng)
    data_rng = stream(seed, "data")
    x = data_rng.uniform(-1, 1, (batch, signal_dim))
    z = data_rng.standard_normal((batch, latent_dim))
    e_inf = data_rng.standard_normal((batch, latent_dim))
    e_obs = data_rng.standard_normal((batch, signal_dim))
    stores = models.stores()
    results = []
    for loss_name, owner in LOSS_OWNER.items():

        def loss_fn():
            out = compute_triangle_loss(x, z, models.gen, models.inf, models.en, eps_infer=e_inf, eps_obs=e_obs)
            return getattr(out, loss_name)

        err, kink = param_gradcheck(loss_fn, stores[owner])
        results.append(CheckResult(f"{loss_name} wrt {owner}", err, err < tol and not kink, kink))
    return results


def conv_gradchecks(seed: int = 0, tol: float = 1e-6):
    rng = stream(seed, "probe")
    results = []
    for stride, pad in ((1, 0), (2, 1)):
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((3, 2, 4, 4))
        rep = check_gradients(lambda a, b: conv2d(a, b, stride, pad).square().sum(), [x, w], tol=tol)
        results.append(CheckResult(f"conv2d stride={stride} pad={pad}", rep.max_rel_error, rep.passed, rep.near_kink))
        xt = rng.standard_normal((2, 3, 3, 3))
        rep = check_gradients(lambda a, b: conv_transpose2d(a, b, stride, pad).square().sum(), [xt, w], tol=tol)
        results.append(CheckResult(f"conv_transpose2d stride={stride} pad={pad}", rep.max_rel_error, rep.passed, rep.near_kink))
    return results


def full_suite(seed: int = 0) -> list[CheckResult]:
    return triangle_gradchecks(seed) + conv_gradchecks(seed)
