"""Evaluation: reconstruction MSE, energy separation, mode coverage, basin purity."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import no_grad
from .models import EnergyModel, GeneratorModel, InferenceModel


@dataclass
class EvalReport:
    recon_mse: float
    energy_gap: float | None = None
    mode_coverage: list[float] | None = None
    basin_purity: float | None = None

    def __post_init__(self):
        if self.recon_mse < 0:
            raise ValueError("recon_mse must be nonnegative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def reconstruct(x, gen: GeneratorModel, inf: InferenceModel, batch: int = 256) -> np.ndarray:
    """``g(mu(x))``: mean-inference reconstruction, no sampling."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    with no_grad():
        for i in range(0, len(x), batch):
            mu, _ = inf.heads(x[i : i + batch])
            out[i : i + batch] = gen(mu).data
    return out


def recon_mse(x_test, gen: GeneratorModel, inf: InferenceModel) -> float:
    """Mean over examples and pixels of ``(x - g(mu(x)))^2``."""
    x_test = np.asarray(x_test, dtype=np.float64)
    if len(x_test) == 0:
        raise ValueError("test set is empty")
    return float(np.mean((x_test - reconstruct(x_test, gen, inf)) ** 2))


def energy_values(en: EnergyModel, x, batch: int = 512) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    with no_grad():
        return np.concatenate([en(x[i : i + batch]).data for i in range(0, len(x), batch)])


def uniform_probes(shape: tuple[int, ...], n: int, rng: np.random.Generator, low=-1.0, high=1.0) -> np.ndarray:
    return rng.uniform(low, high, size=(n, *shape))


def energy_gap(en: EnergyModel, data, probes) -> float:
    """``mean f(data) - mean f(probes)``."""
    return float(energy_values(en, data).mean() - energy_values(en, probes).mean())


def energy_gap_from_values(f_data: np.ndarray, f_probe: np.ndarray) -> float:
    return float(np.mean(f_data) - np.mean(f_probe))


def mode_coverage(samples, modes, assign_radius: float) -> list[float]:
    """Fraction of ``samples`` within ``assign_radius`` (L2) of each mode centre."""
    if assign_radius <= 0:
        raise ValueError("assign_radius must be positive")
    s = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    m = np.asarray(modes, dtype=np.float64).reshape(len(modes), -1)
    dist = np.linalg.norm(s[:, None, :] - m[None, :, :], axis=2)
    nearest = np.argmin(dist, axis=1)
    inside = dist[np.arange(len(s)), nearest] <= assign_radius
    return [float(np.mean(inside & (nearest == k))) for k in range(len(m))]


def basin_purity(membership, labels, min_size: int = 1) -> tuple[float, dict[int, float]]:
    """Size-weighted modal-label fraction over basins with at least ``min_size`` members.

    Returns ``(overall, {basin: purity})``.
    """
    membership = np.asarray(membership)
    labels = np.asarray(labels)
    per: dict[int, float] = {}
    hits = total = 0
    for b in np.unique(membership):
        lab = labels[membership == b]
        if len(lab) < min_size:
            continue
        top = np.bincount(lab).max()
        per[int(b)] = float(top / len(lab))
        hits += top
        total += len(lab)
    return (float(hits / total) if total else float("nan")), per
