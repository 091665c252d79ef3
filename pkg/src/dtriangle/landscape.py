"""Energy landscape mapping with disconnectivity graphs.

Each start point is pushed down the energy ``E = -f`` by steepest descent
with per-step backtracking, so ``E`` never increases along a trajectory.
Coincident end points are merged into canonical minima. Pairwise barriers
are the highest energy on the straight segment between two minima, and
single linkage on those barriers yields the disconnectivity graph.

Linear segments overestimate the true saddle height; the graph records
"lowest known" barriers only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, no_grad
from .models import EnergyModel, frozen

EnergyFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class LandscapeConfig:
    step: float = 1e-2
    max_steps: int = 2000
    grad_tol: float = 1e-4
    merge_tol: float = 0.5
    energy_tol: float = 0.1
    interp_points: int = 64
    min_basin_size: int = 4
    max_halvings: int = 20
    bounds: tuple[float, ...] = ()
    exemplars: int = 12
    batch: int = 500

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if self.interp_points < 2:
            raise ValueError("interp_points must be >= 2")
        if self.bounds and len(self.bounds) != 2:
            raise ValueError("bounds must be empty or (low, high)")


# ---------------------------------------------------------------------------
# energy functions
# ---------------------------------------------------------------------------


def model_energy(en: EnergyModel, batch: int = 500) -> EnergyFn:
    """``x -> (-f(x), -grad f(x))`` through the tape, in chunks of ``batch``."""

    def fn(x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        E = np.empty(len(x))
        G = np.empty_like(x)
        with frozen(en.params):
            for i in range(0, len(x), batch):
                xt = Tensor(x[i : i + batch], requires_grad=True)
                f = en(xt)
                f.sum().backward()
                E[i : i + batch] = -f.data
                G[i : i + batch] = -xt.grad
        return E, G

    def values(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        E = np.empty(len(x))
        with no_grad():
            for i in range(0, len(x), batch):
                E[i : i + batch] = -en(Tensor(x[i : i + batch])).data
        return E

    fn.values = values  # forward-only path for barriers
    return fn


def double_well(x: np.ndarray):
    """``E(x) = x^4 - x^2`` on 1-D signals (shape ``[n, 1]``)."""
    x = np.asarray(x, dtype=np.float64)
    return (x**4 - x**2).reshape(len(x)), 4 * x**3 - 2 * x


def quartic_two_well(x: np.ndarray):
    """``E(x, y) = (x^2 - 1)^2 + y^2 / 2``: minima at ``(+-1, 0)``, saddle ``E = 1`` at the origin."""
    x = np.asarray(x, dtype=np.float64)
    a, b = x[:, 0], x[:, 1]
    E = (a * a - 1) ** 2 + 0.5 * b * b
    G = np.stack([4 * a * (a * a - 1), b], axis=1)
    return E, G


def constant_energy(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    return np.zeros(len(x)), np.zeros_like(x)


ANALYTIC = {"doublewell": (double_well, (1,)), "twowell2d": (quartic_two_well, (2,)), "constant": (constant_energy, (1,))}


def as_energy_fn(en, batch: int = 500) -> EnergyFn:
    return model_energy(en, batch) if isinstance(en, EnergyModel) else en


def energy_only(fn: EnergyFn) -> Callable[[np.ndarray], np.ndarray]:
    """Energies without gradients, skipping the backward pass when the function offers one."""
    return getattr(fn, "values", None) or (lambda x: fn(x)[0])


# ---------------------------------------------------------------------------
# descent
# ---------------------------------------------------------------------------


@dataclass
class DescentResult:
    x: np.ndarray
    energy: np.ndarray
    steps: np.ndarray
    history: np.ndarray | None = None  # [steps + 1, n] energies when recorded


def descend(starts, en, cfg: LandscapeConfig, record: bool = False) -> DescentResult:
    """Batched steepest descent on ``-f`` from every row of ``starts``.

    A step that would raise the energy is retried with the step size halved,
    up to ``max_halvings`` times; if none is accepted the point is treated as
    converged. With ``bounds`` every iterate is clipped into the box and the
    stopping test uses the projected gradient.
    """
    fn = as_energy_fn(en, cfg.batch)
    x = np.array(starts, dtype=np.float64)
    if cfg.bounds:
        x = np.clip(x, *cfg.bounds)
    n = len(x)
    E, G = fn(x)
    if not np.all(np.isfinite(E)):
        raise FloatingPointError("non-finite energy at start points")
    steps = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    hist = [E.copy()] if record else None
    axes = tuple(range(1, x.ndim))
    for _ in range(cfg.max_steps):
        if cfg.bounds:
            # drop components that push against the box; they cannot move the point
            lo, hi = cfg.bounds
            G = np.where(((x <= lo) & (G > 0)) | ((x >= hi) & (G < 0)), 0.0, G)
        gnorm = np.sqrt(np.sum(G * G, axis=axes))
        active &= gnorm >= cfg.grad_tol
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        eta = np.full(idx.size, cfg.step)
        pending = np.arange(idx.size)
        for _h in range(cfg.max_halvings + 1):
            sub = idx[pending]
            shape = (-1,) + (1,) * (x.ndim - 1)
            trial = x[sub] - eta[pending].reshape(shape) * G[sub]
            if cfg.bounds:
                trial = np.clip(trial, *cfg.bounds)
            Et, Gt = fn(trial)
            if not np.all(np.isfinite(Et)):
                raise FloatingPointError("non-finite energy during descent")
            ok = Et <= E[sub]
            acc = sub[ok]
            x[acc], E[acc], G[acc] = trial[ok], Et[ok], Gt[ok]
            steps[acc] += 1
            pending = pending[~ok]
            if pending.size == 0:
                break
            eta[pending] *= 0.5
        active[idx[pending]] = False  # no decrease found: stationary up to step resolution
        if record:
            hist.append(E.copy())
    return DescentResult(x, E, steps, np.array(hist) if record else None)


def steepest_descent(x0, en, cfg: LandscapeConfig):
    """Single-start descent: returns ``(x_hat, energy, steps_taken)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    r = descend(x0[None], en, cfg)
    return r.x[0], float(r.energy[0]), int(r.steps[0])


# ---------------------------------------------------------------------------
# minima, barriers, graph
# ---------------------------------------------------------------------------


def dedupe_minima(points, energies, merge_tol: float, energy_tol: float):
    """Greedy identity of minima: join the first canonical minimum within both tolerances.

    Returns ``(canonical_points, canonical_energies, remap, counts)``.
    """
    points = np.asarray(points, dtype=np.float64)
    energies = np.asarray(energies, dtype=np.float64)
    flat = points.reshape(len(points), -1)
    canon: list[int] = []
    remap = np.empty(len(points), dtype=np.int64)
    for i in range(len(points)):
        hit = -1
        if canon:
            c = np.asarray(canon)
            dist = np.linalg.norm(flat[c] - flat[i], axis=1)
            close = np.flatnonzero((dist < merge_tol) & (np.abs(energies[c] - energies[i]) < energy_tol))
            if close.size:
                hit = int(close[0])
        if hit < 0:
            canon.append(i)
            hit = len(canon) - 1
        remap[i] = hit
    counts = np.bincount(remap, minlength=len(canon))
    return points[canon].copy(), energies[canon].copy(), remap, counts


def barrier(xi, xj, en, n_gamma: int) -> float:
    """Highest energy on ``xi + g (xj - xi)`` over ``n_gamma`` evenly spaced ``g`` in [0, 1]."""
    fn = energy_only(as_energy_fn(en))
    xi, xj = np.asarray(xi, float), np.asarray(xj, float)
    g = np.linspace(0.0, 1.0, n_gamma).reshape((-1,) + (1,) * xi.ndim)
    E = fn(xi[None] + g * (xj - xi)[None])
    return float(E.max())


def barrier_matrix(minima, en, n_gamma: int, batch: int = 500) -> np.ndarray:
    """Symmetric matrix of segment barriers; the diagonal holds each minimum's own energy."""
    fn = energy_only(as_energy_fn(en, batch))
    minima = np.asarray(minima, dtype=np.float64)
    k = len(minima)
    B = np.empty((k, k))
    own = fn(minima)
    B[np.arange(k), np.arange(k)] = own
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    g = np.linspace(0.0, 1.0, n_gamma).reshape((-1,) + (1,) * (minima.ndim - 1))
    per = max(1, batch // n_gamma)
    for s in range(0, len(pairs), per):
        chunk = pairs[s : s + per]
        pts = np.concatenate([minima[i][None] + g * (minima[j] - minima[i])[None] for i, j in chunk])
        E = fn(pts).reshape(len(chunk), n_gamma).max(axis=1)
        for (i, j), e in zip(chunk, E):
            # endpoints are on the grid; the max with own energies only absorbs batch rounding
            B[i, j] = B[j, i] = max(e, own[i], own[j])
    return B


@dataclass
class DisconnectivityGraph:
    energies: np.ndarray
    sizes: np.ndarray
    merges: list[tuple[int, int, float]]
    ultrametric: np.ndarray
    min_basin_size: int = 1

    @property
    def leaves(self) -> np.ndarray:
        """Leaf indices ordered by energy (lowest first)."""
        return np.argsort(self.energies, kind="stable")

    @property
    def kept(self) -> np.ndarray:
        return np.flatnonzero(self.sizes >= self.min_basin_size)

    def rendered(self) -> "DisconnectivityGraph":
        """Graph restricted to basins with at least ``min_basin_size`` members."""
        keep = self.kept
        sub = build_dg(self.energies[keep], self.ultrametric[np.ix_(keep, keep)], 1, self.sizes[keep])
        sub.labels = [int(i) for i in keep]
        return sub

    def to_dict(self) -> dict:
        kept = set(int(i) for i in self.kept)
        return {
            "leaves": [
                {"id": int(i), "energy": float(self.energies[i]), "size": int(self.sizes[i]), "pruned": int(i) not in kept}
                for i in self.leaves
            ],
            "merges": [
                {"node": len(self.energies) + n, "a": int(a), "b": int(b), "height": float(h)}
                for n, (a, b, h) in enumerate(self.merges)
            ],
            "min_basin_size": int(self.min_basin_size),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_dot(self) -> str:
        """Graphviz text of the pruned graph; node rank encodes height."""
        g = self.rendered()
        names = getattr(g, "labels", list(range(len(g.energies))))
        lines = ["digraph disconnectivity {", "  rankdir=BT;", "  node [shape=circle];"]
        for i, e in enumerate(g.energies):
            lines.append(f'  leaf{names[i]} [label="{names[i]}\\nE={e:.4g}\\nn={int(g.sizes[i])}"];')
        k = len(g.energies)
        ref = lambda a: f"leaf{names[a]}" if a < k else f"merge{a}"
        for n, (a, b, h) in enumerate(g.merges):
            node = k + n
            lines.append(f'  merge{node} [shape=point, xlabel="{h:.4g}"];')
            lines.append(f"  {ref(a)} -> merge{node};")
            lines.append(f"  {ref(b)} -> merge{node};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def build_dg(energies, barriers, min_basin_size: int = 1, sizes=None) -> DisconnectivityGraph:
    """Single-linkage agglomeration on barrier heights.

    Merge events use scipy-style ids: leaves ``0..k-1``, the n-th merge
    creates node ``k + n``. Ties are broken by pair index so the result is
    deterministic.
    """
    energies = np.asarray(energies, dtype=np.float64)
    B = np.asarray(barriers, dtype=np.float64)
    k = len(energies)
    if B.shape != (k, k) or not np.array_equal(B, B.T):
        raise ValueError("barrier matrix must be square and symmetric")
    if not np.all(np.isfinite(B)):
        raise ValueError("barrier matrix must be finite")
    sizes = np.ones(k, dtype=np.int64) if sizes is None else np.asarray(sizes, dtype=np.int64)

    parent = list(range(k))
    node_of = list(range(k))  # union-find root -> current tree node id

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    iu, ju = np.triu_indices(k, 1)
    order = np.lexsort((ju, iu, B[iu, ju]))
    U = np.diag(energies).astype(np.float64)
    members = {i: [i] for i in range(k)}
    merges: list[tuple[int, int, float]] = []
    for p in order:
        i, j = int(iu[p]), int(ju[p])
        ri, rj = find(i), find(j)
        if ri == rj:
            continue
        h = float(B[i, j])
        merges.append((node_of[ri], node_of[rj], h))
        mi, mj = members.pop(ri), members.pop(rj)
        U[np.ix_(mi, mj)] = h
        U[np.ix_(mj, mi)] = h
        parent[rj] = ri
        node_of[ri] = k + len(merges) - 1
        members[ri] = mi + mj
        if len(merges) == k - 1:
            break
    return DisconnectivityGraph(energies, sizes, merges, U, min_basin_size)


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


@dataclass
class BasinMap:
    minima: np.ndarray
    energies: np.ndarray
    membership: np.ndarray
    counts: np.ndarray
    start_energies: np.ndarray
    exemplars: dict[int, np.ndarray] = field(default_factory=dict)
    purity: dict[int, float] | None = None
    steps: np.ndarray | None = None

    def basins(self, min_size: int = 1) -> np.ndarray:
        return np.flatnonzero(self.counts >= min_size)


def map_landscape(en, starts, cfg: LandscapeConfig | None = None, labels=None):
    """Descend every start, merge minima, compute barriers and the graph.

    ``exemplars[b]`` lists the indices of the (at most ``cfg.exemplars``)
    lowest-energy starts in basin ``b``.
    """
    cfg = cfg or LandscapeConfig()
    starts = np.asarray(starts, dtype=np.float64)
    if len(starts) == 0:
        raise ValueError("no start points")
    fn = as_energy_fn(en, cfg.batch)
    start_E = energy_only(fn)(np.clip(starts, *cfg.bounds) if cfg.bounds else starts)
    res = descend(starts, fn, cfg)
    minima, energies, remap, counts = dedupe_minima(res.x, res.energy, cfg.merge_tol, cfg.energy_tol)
    B = barrier_matrix(minima, fn, cfg.interp_points, cfg.batch)
    energies = B.diagonal().copy()
    dg = build_dg(energies, B, cfg.min_basin_size, counts)
    exemplars = {}
    for b in range(len(minima)):
        members = np.flatnonzero(remap == b)
        exemplars[b] = members[np.argsort(start_E[members], kind="stable")][: cfg.exemplars]
    purity = None
    if labels is not None:
        from .metrics import basin_purity

        _, purity = basin_purity(remap, labels)
    bm = BasinMap(minima, energies, remap, counts, start_E, exemplars, purity, res.steps)
    bm.barriers = B
    return bm, dg
