"""Joint alternating training of the energy, inference and generator models.

One iteration:

1. draw ``z ~ p(z)`` and ``x_gen ~ p_theta(x|z)``;
2. draw a data batch ``x`` and ``z_tilde ~ q_phi(z|x)``;
3. alpha-step: ascend ``mean f(x) - mean f(x_gen)``;
4. phi-step: descend the wake (KL + reconstruction) and sleep terms;
5. theta-step(s): descend reconstruction, ``-f(x_gen)`` and the sleep term;
   sub-steps after the first redraw ``z``, ``x_gen`` and ``z_tilde``.

Randomness comes from named streams (``prior``, ``obs``, ``reparam``)
seeded from ``TrainConfig.seed``; the data order is a pure function of the
seed and the iteration.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .autodiff import Tensor, no_grad
from .data import BatchSource, DataSet
from .models import (
    ModelConfig,
    TriangleModels,
    build_models,
    decode_checkpoint,
    encode_checkpoint,
    frozen,
    generate,
    infer,
    _atomic_write,
)
from .optim import AdamState, adam_step, clip_global_norm, rng_from_state, rng_state, stream
from .triangle import LossWeights, NonFiniteLossError, recon_nll, sleep_terms, wake_terms

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "iter",
    "loss_alpha",
    "loss_theta",
    "loss_phi",
    "recon_wake",
    "energy_gap",
    "kl_wake",
    "sleep_nll",
    "energy_data_mean",
    "energy_gen_mean",
)


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 64
    prior_batch_size: int = 64
    lr_alpha: float = 1e-4
    lr_phi: float = 3e-4
    lr_theta: float = 3e-4
    theta_steps: int = 1
    weight_decay: float = 5e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    w_recon: float = 1.0
    w_klprior: float = 1.0
    w_sleep: float = 1.0
    w_energy: float = 1.0
    gen_noise: str = "gaussian"
    sleep_to_theta: bool = True
    grad_clip: float = 0.0
    log_interval: int = 100
    checkpoint_interval: int = 0

    def __post_init__(self):
        if min(self.lr_alpha, self.lr_phi, self.lr_theta) < 0:
            raise ValueError("learning rates must be >= 0")
        if self.theta_steps < 1:
            raise ValueError("theta_steps must be >= 1")
        if self.batch_size < 1 or self.prior_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.grad_clip < 0 or self.checkpoint_interval < 0:
            raise ValueError("grad_clip and checkpoint_interval must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.log_interval < 1:
            raise ValueError("log_interval must be >= 1")
        if self.gen_noise not in ("gaussian", "none"):
            raise ValueError("gen_noise must be 'gaussian' or 'none'")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_recon, self.w_klprior, self.w_sleep, self.w_energy)


@dataclass
class TrainState:
    models: TriangleModels
    adam: dict[str, AdamState]
    rngs: dict[str, np.random.Generator]
    iteration: int = 0


def init_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    models = build_models(model_config, stream(train_config.seed, "init"))
    adam = {k: AdamState.for_params(s) for k, s in models.stores().items()}
    rngs = {k: stream(train_config.seed, k) for k in ("prior", "obs", "reparam")}
    return TrainState(models, adam, rngs, 0)


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------


def _draw(state: TrainState, cfg: TrainConfig, n_data: int):
    m = state.models
    z = state.rngs["prior"].standard_normal((cfg.prior_batch_size, m.config.latent_dim))
    e_obs = None
    if cfg.gen_noise == "gaussian":
        e_obs = state.rngs["obs"].standard_normal((cfg.prior_batch_size, *m.config.signal_shape))
    e_inf = state.rngs["reparam"].standard_normal((n_data, m.config.latent_dim))
    return z, e_obs, e_inf


def _update(state: TrainState, key: str, grads, lr: float, cfg: TrainConfig) -> None:
    if cfg.grad_clip > 0:
        grads = clip_global_norm(grads, cfg.grad_clip)
    store = state.models.stores()[key]
    adam_step(store, grads, state.adam[key], lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)


def _check(name: str, t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteLossError(name)
    return t


def alpha_step(state: TrainState, x, x_gen, cfg: TrainConfig) -> dict[str, float]:
    en = state.models.en
    en.params.zero_grad()
    f_data = _check("energy_data", en(x))
    f_gen = _check("energy_gen", en(x_gen))
    loss = f_data.mean() - f_gen.mean()
    loss.backward()
    grads = {k: -g for k, g in en.params.grads().items()}  # ascent
    _update(state, "alpha", grads, cfg.lr_alpha, cfg)
    return {
        "loss_alpha": loss.item(),
        "energy_data_mean": float(f_data.data.mean()),
        "energy_gen_mean": float(f_gen.data.mean()),
    }


def phi_step(state: TrainState, x, mask, x_gen, z, e_inf, cfg: TrainConfig):
    m = state.models
    w = cfg.weights
    m.inf.params.zero_grad()
    with frozen(m.gen.params):
        kl, recon, z_tilde = wake_terms(m.gen, m.inf, x, e_inf, mask)
        sleep = _check("sleep_nll", sleep_terms(m.inf, x_gen, z))
        loss = (w.w_klprior * kl + w.w_recon * recon).mean() + w.w_sleep * sleep.mean()
    _check("loss_phi", loss)
    loss.backward()
    _update(state, "phi", m.inf.params.grads(), cfg.lr_phi, cfg)
    values = {
        "loss_phi": loss.item(),
        "kl_wake": float(kl.data.mean()),
        "recon_wake": float(recon.data.mean()),
        "sleep_nll": float(sleep.data.mean()),
    }
    return values, z_tilde.data.copy()


def theta_step(state: TrainState, x, mask, z_tilde, z, e_obs, cfg: TrainConfig) -> float:
    m = state.models
    w = cfg.weights
    m.gen.params.zero_grad()
    with frozen(m.en.params, m.inf.params):
        recon = recon_nll(x, m.gen(Tensor(z_tilde)), m.gen.obs_sigma, mask)
        x_gen = generate(m.gen, z, cfg.gen_noise, eps=e_obs)
        f_gen = _check("energy_gen", m.en(x_gen))
        sleep = sleep_terms(m.inf, x_gen if cfg.sleep_to_theta else x_gen.detach(), z)
        loss = (w.w_recon * recon).mean() + (-w.w_energy * f_gen + w.w_sleep * sleep).mean()
    _check("loss_theta", loss)
    loss.backward()
    _update(state, "theta", m.gen.params.grads(), cfg.lr_theta, cfg)
    return loss.item()


def train_iteration(state: TrainState, source: BatchSource, cfg: TrainConfig) -> tuple[TrainState, dict]:
    """Advance ``state`` by one alpha/phi/theta iteration; returns logged values."""
    m = state.models
    z, e_obs, e_inf = _draw(state, cfg, source.batch_size)
    with no_grad():
        x_gen = generate(m.gen, z, cfg.gen_noise, eps=e_obs).data
    x, mask = source.get_batch(state.iteration)

    values = alpha_step(state, x, x_gen, cfg)
    phi_vals, z_tilde = phi_step(state, x, mask, x_gen, z, e_inf, cfg)
    values.update(phi_vals)
    values["loss_theta"] = theta_step(state, x, mask, z_tilde, z, e_obs, cfg)
    for _ in range(cfg.theta_steps - 1):
        z, e_obs, e_inf = _draw(state, cfg, source.batch_size)
        with no_grad():
            z_tilde = infer(m.inf, x, eps=e_inf).z_sample.data
        theta_step(state, x, mask, z_tilde, z, e_obs, cfg)
    values["energy_gap"] = values["energy_data_mean"] - values["energy_gen_mean"]
    state.iteration += 1
    return state, values


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def state_to_bytes(state: TrainState, cfg: TrainConfig) -> bytes:
    groups = {}
    for key, store in state.models.stores().items():
        groups[key] = store.state_dict()
    for key, ad in state.adam.items():
        groups[f"adam.{key}.m"] = ad.m
        groups[f"adam.{key}.v"] = ad.v
    meta = {
        "format": "DTRI1",
        "model_config": state.models.config.to_dict(),
        "train_config": dataclasses.asdict(cfg),
        "iteration": state.iteration,
        "adam_t": {k: a.t for k, a in state.adam.items()},
        "rng": {k: rng_state(r) for k, r in state.rngs.items()},
    }
    return encode_checkpoint(groups, meta)


def state_from_bytes(payload: bytes) -> tuple[TrainState, TrainConfig]:
    groups, meta = decode_checkpoint(payload)
    mcfg = ModelConfig.from_dict(meta["model_config"])
    tcfg = TrainConfig(**meta["train_config"])
    models = build_models(mcfg, np.random.default_rng(0))
    for key, store in models.stores().items():
        store.load_state_dict(groups[key])
    adam = {
        k: AdamState(dict(groups[f"adam.{k}.m"]), dict(groups[f"adam.{k}.v"]), int(meta["adam_t"][k]))
        for k in models.stores()
    }
    rngs = {k: rng_from_state(s) for k, s in meta["rng"].items()}
    return TrainState(models, adam, rngs, int(meta["iteration"])), tcfg


def save_state(path: str, state: TrainState, cfg: TrainConfig) -> None:
    _atomic_write(path, state_to_bytes(state, cfg))


def load_state(path: str) -> tuple[TrainState, TrainConfig]:
    with open(path, "rb") as fh:
        return state_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------


def format_metrics_row(t: int, values: dict) -> str:
    cells = [str(t)] + [repr(float(values[c])) for c in METRIC_COLUMNS[1:]]
    return ",".join(cells)


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict] = field(default_factory=list)
    metrics_csv: str = ""


def train(
    config: TrainConfig,
    dataset: DataSet | BatchSource,
    model_config: ModelConfig | None = None,
    callbacks: Iterable[Callable[[TrainState, dict], None]] = (),
    *,
    out_dir: str | None = None,
    state: TrainState | None = None,
) -> TrainResult:
    """Run iterations until ``config.iterations``.

    ``state`` resumes an earlier run (e.g. from :func:`load_state`). With
    ``out_dir`` a ``metrics.csv`` and periodic ``ckpt_<iter>.dtri`` files
    plus ``final.dtri`` are written atomically.
    """
    if isinstance(dataset, BatchSource):
        source = dataset
    else:
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        source = BatchSource(dataset.examples, config.batch_size, config.seed)
    if state is None:
        if model_config is None:
            raise ValueError("model_config is required when not resuming")
        state = init_state(model_config, config)
    callbacks = list(callbacks)

    rows: list[dict] = []
    lines = [",".join(METRIC_COLUMNS)]
    while state.iteration < config.iterations:
        t = state.iteration
        state, values = train_iteration(state, source, config)
        if t % config.log_interval == 0:
            rows.append({"iter": t, **values})
            lines.append(format_metrics_row(t, values))
            log.info("iter %d loss_alpha=%.4f loss_phi=%.4f loss_theta=%.4f", t, values["loss_alpha"], values["loss_phi"], values["loss_theta"])
        for cb in callbacks:
            cb(state, values)
        if out_dir and config.checkpoint_interval and state.iteration % config.checkpoint_interval == 0:
            save_state(os.path.join(out_dir, f"ckpt_{state.iteration:07d}.dtri"), state, config)
    csv = "\n".join(lines) + "\n"
    if out_dir:
        _atomic_write(os.path.join(out_dir, "metrics.csv"), csv.encode("utf-8"))
        save_state(os.path.join(out_dir, "final.dtri"), state, config)
    return TrainResult(state, rows, csv)
