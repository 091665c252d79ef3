"""Mini-batch objectives of the divergence triangle.

``D = KL(Q||P) + KL(P||Pi) - KL(Q||Pi)`` with

* ``Q(z, x) = q_data(x) q_phi(z|x)``
* ``P(z, x) = p(z) p_theta(x|z)``
* ``Pi(z, x) = pi_alpha(x) q_phi(z|x)``

is split into the parts each parameter set sees. All additive constants
that do not depend on a trained parameter are dropped:

* ``recon_nll`` omits ``(D/2) log(2 pi sigma^2)``;
* the entropy of the observation noise (``E_P log p_theta(x|z)``) is
  constant under reparameterisation and omitted from ``loss_theta``;
* ``log Z(alpha)`` cancels between ``KL(P||Pi)`` and ``KL(Q||Pi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DomainError, ShapeError, Tensor, as_tensor
from .models import EnergyModel, GeneratorModel, InferenceModel, generate, infer

LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str):
        super().__init__(f"non-finite value in loss term {term!r}")
        self.term = term


@dataclass
class LossWeights:
    w_recon: float = 1.0
    w_klprior: float = 1.0
    w_sleep: float = 1.0
    w_energy: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be nonnegative")


@dataclass
class TriangleBatchLoss:
    loss_alpha: Tensor
    loss_theta: Tensor
    loss_phi: Tensor
    recon_wake: float
    kl_wake: float
    sleep_nll: float
    energy_data_mean: float
    energy_gen_mean: float
    extras: dict = field(default_factory=dict, repr=False)

    def values(self) -> dict[str, float]:
        return {
            "loss_alpha": self.loss_alpha.item(),
            "loss_theta": self.loss_theta.item(),
            "loss_phi": self.loss_phi.item(),
            "recon_wake": self.recon_wake,
            "kl_wake": self.kl_wake,
            "sleep_nll": self.sleep_nll,
            "energy_data_mean": self.energy_data_mean,
            "energy_gen_mean": self.energy_gen_mean,
        }


def _check_sigma(sigma: Tensor) -> None:
    if np.any(sigma.data <= 0):
        raise DomainError("sigma must be positive")


def gaussian_kl_to_prior(mu, sigma, log_sigma=None) -> Tensor:
    """``KL(N(mu, diag sigma^2) || N(0, I))`` per row."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    _check_sigma(sigma)
    ls = sigma.log() if log_sigma is None else as_tensor(log_sigma)
    terms = mu.square() + sigma.square() - 1.0 - 2.0 * ls
    return 0.5 * terms.sum(axes=1)


def gaussian_log_density(z, mu, sigma, log_sigma=None) -> Tensor:
    """``log N(z; mu, diag sigma^2)`` per row."""
    z, mu, sigma = as_tensor(z), as_tensor(mu), as_tensor(sigma)
    _check_sigma(sigma)
    ls = sigma.log() if log_sigma is None else as_tensor(log_sigma)
    d = z.shape[1]
    quad = (z - mu).square() / (2.0 * sigma.square())
    return -(ls + quad).sum(axes=1) - 0.5 * d * LOG_2PI


def recon_nll(x, x_hat, sigma_obs: float, mask=None) -> Tensor:
    """``||x - x_hat||^2 / (2 sigma^2)`` per example; ``mask`` (1 = visible) weights pixels."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"recon_nll: {x.shape} vs {x_hat.shape}")
    r = (x - x_hat).square()
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != x.shape:
            raise ShapeError(f"recon mask {mask.shape} does not match batch {x.shape}")
        r = r * Tensor(mask)
    axes = tuple(range(1, x.ndim))
    return r.sum(axes=axes) * (1.0 / (2.0 * sigma_obs**2))


# ---------------------------------------------------------------------------
# building blocks shared with the trainer
# ---------------------------------------------------------------------------


def wake_terms(gen: GeneratorModel, inf: InferenceModel, x, eps, mask=None):
    """Real-data terms of ``KL(Q||P)``: returns ``(kl, recon, z_tilde)`` per example."""
    mu, sigma, z_tilde, ls = infer(inf, x, eps=eps, return_log_sigma=True)
    kl = gaussian_kl_to_prior(mu, sigma, log_sigma=ls)
    recon = recon_nll(x, gen(z_tilde), gen.obs_sigma, mask)
    return kl, recon, z_tilde


def sleep_terms(inf: InferenceModel, x_gen, z) -> Tensor:
    """Dream-data term of ``KL(P||Pi)``: ``-log q_phi(z | x_gen)`` per example."""
    mu, ls = inf.heads(x_gen)
    return -gaussian_log_density(z, mu, ls.exp(), log_sigma=ls)


def _finite(name: str, t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteLossError(name)
    return t


def compute_triangle_loss(
    x,
    z,
    gen: GeneratorModel,
    inf: InferenceModel,
    en: EnergyModel,
    weights: LossWeights | None = None,
    rng: np.random.Generator | None = None,
    *,
    noise: str = "gaussian",
    eps_infer=None,
    eps_obs=None,
    mask=None,
    sleep_to_theta: bool = True,
) -> TriangleBatchLoss:
    """All three per-model objectives on one mini-batch, as a single tape.

    ``rng`` supplies the reparameterisation noise (first ``eps_infer`` of
    shape ``[M, d]``, then ``eps_obs`` with the generated batch's shape) when
    those are not passed explicitly. ``loss_alpha`` is to be ascended in
    alpha; ``loss_phi`` and ``loss_theta`` are descended in phi and theta.
    Each loss is only meaningful as a function of its own parameter set.
    """
    w = weights or LossWeights()
    x = as_tensor(x)
    z = as_tensor(z)
    if x.shape[0] < 1 or z.shape[0] < 1:
        raise ValueError("both batches need at least one example")
    if eps_infer is None:
        eps_infer = rng.standard_normal((x.shape[0], gen.latent_dim))
    if noise == "gaussian" and eps_obs is None:
        eps_obs = rng.standard_normal((z.shape[0], *gen.config.signal_shape))

    kl, recon, _ = wake_terms(gen, inf, x, eps_infer, mask)
    x_gen = generate(gen, z, noise, eps=eps_obs)
    f_data = _finite("energy_data", en(x))
    f_gen = _finite("energy_gen", en(x_gen))
    sleep = _finite("sleep_nll", sleep_terms(inf, x_gen if sleep_to_theta else x_gen.detach(), z))
    _finite("kl_wake", kl)
    _finite("recon_wake", recon)

    loss_alpha = f_data.mean() - f_gen.mean()
    wake_phi = (w.w_klprior * kl + w.w_recon * recon).mean()
    loss_phi = wake_phi + w.w_sleep * sleep.mean()
    loss_theta = (w.w_recon * recon).mean() + (-w.w_energy * f_gen + w.w_sleep * sleep).mean()

    return TriangleBatchLoss(
        loss_alpha=loss_alpha,
        loss_theta=_finite("loss_theta", loss_theta),
        loss_phi=_finite("loss_phi", loss_phi),
        recon_wake=float(recon.data.mean()),
        kl_wake=float(kl.data.mean()),
        sleep_nll=float(sleep.data.mean()),
        energy_data_mean=float(f_data.data.mean()),
        energy_gen_mean=float(f_gen.data.mean()),
        extras={"x_gen": x_gen},
    )
