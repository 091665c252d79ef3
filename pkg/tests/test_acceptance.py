"""Acceptance criteria 1 to 11.

Each test records a one-line verdict that is printed in the terminal
summary, then asserts. Criteria 7 and 9 train convolutional models for
several minutes each and are marked ``slow``; ``pytest -m "not slow"``
skips them.
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from dtriangle.autodiff import Tensor, no_grad
from dtriangle.checks import triangle_gradchecks
from dtriangle.cli import DataConfig, load_dataset
from dtriangle.data import BadMagicError, Synthetic2D, load_idx, materialize_mnist, read_idx, write_idx
from dtriangle.landscape import LandscapeConfig, build_dg, double_well, map_landscape
from dtriangle.metrics import energy_gap, mode_coverage, uniform_probes
from dtriangle.models import ModelConfig, build_models, generate, sample_prior
from dtriangle.occlusion import IncompleteDataset, train_incomplete
from dtriangle.optim import stream
from dtriangle.sandbox import analytic_triangle_gaussian, random_sandbox
from dtriangle.trainer import TrainConfig, train
from dtriangle.triangle import compute_triangle_loss, gaussian_kl_to_prior

from test_data import reference_idx
from test_landscape import minimax_bruteforce, random_barriers

RESULTS: dict[int, str] = {}


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


@pytest.fixture(autouse=True, scope="module")
def single_thread():
    with threadpool_limits(limits=1):
        yield


# ---------------------------------------------------------------------------
# pinned run configurations
# ---------------------------------------------------------------------------

# 2-D mixture; thresholds were fixed by the oracle run recorded in the README
MIX_SEED = 0
MIX_MODEL = ModelConfig(architecture="mlp", signal_shape=(2,), latent_dim=2, hidden=(64, 64), gen_output="linear")
MIX_TRAIN = TrainConfig(
    iterations=2000, batch_size=64, prior_batch_size=64, lr_alpha=1e-3, lr_phi=1e-3, lr_theta=1e-3,
    seed=MIX_SEED, log_interval=100,
)

# 14x14 digits, reduced-width convolutional stack
DIGIT_MODEL = ModelConfig(architecture="conv14", signal_shape=(1, 14, 14), latent_dim=16, width_mult=0.125)
LANDSCAPE_TRAIN = TrainConfig(
    iterations=5000, batch_size=32, prior_batch_size=32, theta_steps=6, log_interval=100
)
# eta = 1e-2 does not reach the box-vertex minima within 2000 steps in 196 dimensions
LANDSCAPE_MAP = LandscapeConfig(bounds=(-1.0, 1.0), step=0.1)
RECOVERY_TRAIN = TrainConfig(iterations=5000, batch_size=32, prior_batch_size=32, grad_clip=100.0, log_interval=100)
PREFIX = 300  # iterations re-run twice for the determinism check


def mixture_data(seed=MIX_SEED):
    # same draw as ``dtri train --config configs/mixture.cfg``
    return load_dataset(DataConfig(n=4096), seed)


def mixture_scores(models, ds, seed=MIX_SEED):
    r = stream(seed, "probe")
    gap = energy_gap(models.en, ds.examples, uniform_probes((2,), 4000, r, -3.0, 3.0))
    with no_grad():
        xs = generate(models.gen, sample_prior(4000, 2, r), "gaussian", r).data
    return gap, mode_coverage(xs, Synthetic2D().means, 0.9)


@pytest.fixture(scope="module")
def mnist(tmp_path_factory):
    imgs, lbls = materialize_mnist(str(tmp_path_factory.mktemp("mnist")))
    return load_idx(imgs, lbls, downsample=True)


def landscape_data(mnist):
    # 2,000 images with full MNIST; the bundled subset only holds 500 per digit
    return mnist.with_labels([0, 1]).per_class(1000)


def recovery_data(mnist):
    return mnist.per_class(100)


@pytest.fixture(scope="module")
def mixture_run():
    t = time.perf_counter()
    res = train(MIX_TRAIN, mixture_data(), MIX_MODEL)
    return res, time.perf_counter() - t


@pytest.fixture(scope="module")
def landscape_run(mnist):
    ds = landscape_data(mnist)
    t = time.perf_counter()
    res = train(LANDSCAPE_TRAIN, ds, DIGIT_MODEL)
    bm, dg = map_landscape(res.state.models.en, ds.examples, LANDSCAPE_MAP, labels=ds.labels)
    return res, bm, dg, time.perf_counter() - t


@pytest.fixture(scope="module")
def recovery_run(mnist):
    ds = recovery_data(mnist)
    inc = IncompleteDataset.from_images(ds.examples, "P.5", RECOVERY_TRAIN.seed, ds.labels)
    t = time.perf_counter()
    res = train_incomplete(RECOVERY_TRAIN, DIGIT_MODEL, inc)
    return res, time.perf_counter() - t


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


class TestAcceptance:
    def test_c01_gradients(self):
        t = time.perf_counter()
        results = [r for s in range(3) for r in triangle_gradchecks(seed=s, batch=4, latent_dim=2, signal_dim=8)]
        dt = time.perf_counter() - t
        worst = max(r.max_rel_error for r in results)
        ok = all(r.passed for r in results) and dt < 10
        assert record(1, ok, f"max rel error {worst:.2e} over {len(results)} checks, {dt:.1f} s")

    def test_c02_alpha_blind_to_phi(self):
        ok = True
        for seed in range(5):
            cfg = ModelConfig(signal_shape=(8,), latent_dim=2, hidden=(6,), init_std=0.5)
            m = build_models(cfg, np.random.default_rng(seed))
            rng = np.random.default_rng(100 + seed)
            x, z = rng.uniform(-1, 1, (4, 8)), rng.standard_normal((4, 2))
            ei, eo = rng.standard_normal((4, 2)), rng.standard_normal((4, 8))
            out = compute_triangle_loss(x, z, m.gen, m.inf, m.en, eps_infer=ei, eps_obs=eo)
            before = out.loss_alpha.item()
            m.inf.params.zero_grad()
            out.loss_alpha.backward()
            ok &= all(p.grad is None or not np.any(p.grad) for _, p in m.inf.params.items())
            for _, p in m.inf.params.items():
                p.data += rng.standard_normal(p.shape)
            after = compute_triangle_loss(x, z, m.gen, m.inf, m.en, eps_infer=ei, eps_obs=eo).loss_alpha.item()
            ok &= before == after
        assert record(2, ok, "phi gradient of loss_alpha is exactly zero and its value is unchanged (5 instances)")

    def test_c03_kl_monte_carlo(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(20):
            d = int(rng.integers(1, 5))
            mu, sigma = rng.normal(0, 1.5, d), rng.uniform(0.2, 2.5, d)
            closed = gaussian_kl_to_prior(Tensor(mu[None]), Tensor(sigma[None])).item()
            z = mu + sigma * rng.standard_normal((1_000_000, d))
            v = np.sum(-np.log(sigma) - 0.5 * ((z - mu) / sigma) ** 2 + 0.5 * z**2, axis=1)
            worst = max(worst, abs(closed - v.mean()) / (v.std() / np.sqrt(len(v))))
        assert record(3, worst < 3, f"largest |closed - MC| is {worst:.2f} standard errors over 20 instances")

    def test_c04_sandbox(self):
        t = time.perf_counter()
        worst = 0.0
        gap_ok = True
        for seed in range(100):
            s = analytic_triangle_gaussian(random_sandbox(np.random.default_rng(seed)))
            worst = max(
                worst,
                abs(s.kl_q_p - (s.kl_data_p + s.kl_infer_post)),
                abs(s.kl_p_pi - (s.kl_p_pi_marginal + s.kl_post_infer)),
                abs(s.D - (s.D0 + s.kl_infer_post + s.kl_post_infer)),
            )
            gap_ok &= s.gap >= -1e-8
        dt = time.perf_counter() - t
        ok = worst < 1e-8 and gap_ok and dt < 30
        assert record(4, ok, f"max identity residual {worst:.1e}, gap >= 0 on all 100, {dt:.1f} s")

    def test_c05_mixture(self, mixture_run):
        res, dt = mixture_run
        gap, cov = mixture_scores(res.state.models, mixture_data())
        ok = gap >= 1.0 and min(cov) >= 0.2 and dt < 300
        assert record(5, ok, f"energy gap {gap:.2f}, coverage {cov[0]:.2f}/{cov[1]:.2f}, {dt:.0f} s")

    def test_c06_double_well(self):
        t = time.perf_counter()
        starts = stream(0, "probe").uniform(-1.5, 1.5, (200, 1))
        bm, dg = map_landscape(double_well, starts, LandscapeConfig())
        dt = time.perf_counter() - t
        xs = np.sort(bm.minima[:, 0])
        height = dg.merges[0][2] - bm.energies.min() if dg.merges else float("nan")
        ok = (
            len(bm.minima) == 2
            and np.allclose(xs, [-(2**-0.5), 2**-0.5], atol=1e-3)
            and np.allclose(bm.energies, -0.25, atol=1e-3)
            and len(dg.merges) == 1
            and abs(height - 0.25) < 1e-2
            and dt < 5
        )
        assert record(6, ok, f"minima {xs.round(5).tolist()}, barrier {height:.4f} above minimum, {dt:.2f} s")

    @pytest.mark.slow
    def test_c07_learned_landscape(self, landscape_run):
        _, bm, dg, dt = landscape_run
        pure = [b for b in bm.basins(4) if bm.purity[b] >= 0.8]
        sizes = [int(bm.counts[b]) for b in pure]
        ok = len(pure) >= 2 and dt < 1800
        assert record(7, ok, f"{len(pure)} basins of size >= 4 with purity >= 0.8 (sizes {sizes[:8]}), "
                      f"{len(bm.minima)} minima, {dt / 60:.1f} min")

    def test_c08_dg_properties(self, request):
        rng = np.random.default_rng(8)
        exact = True
        for _ in range(200):
            E, B = random_barriers(rng, int(rng.integers(1, 7)))
            exact &= np.array_equal(build_dg(E, B).ultrametric, minimax_bruteforce(B))
        # learned barrier matrices: the mixture model always, the digit model when it ran
        mats = [self._mixture_barriers(request)]
        if "slow" not in (request.config.getoption("-m") or ""):
            mats.append(request.getfixturevalue("landscape_run")[1].barriers)
        inv = True
        for B in mats:
            d = np.diag(B)
            inv &= np.array_equal(B, B.T) and bool(np.all(B >= np.maximum.outer(d, d)))
        ok = exact and inv
        assert record(8, ok, f"200 random matrices match brute force: {exact}; "
                      f"invariants on {len(mats)} learned matrices: {inv}")

    @staticmethod
    def _mixture_barriers(request):
        res, _ = request.getfixturevalue("mixture_run")
        starts = mixture_data().examples[:300]
        bm, _ = map_landscape(res.state.models.en, starts, LandscapeConfig(step=0.05, max_steps=500))
        return bm.barriers

    @pytest.mark.slow
    def test_c09_recovery(self, recovery_run):
        res, dt = recovery_run
        rel = 1 - res.final_error / res.baseline
        ok = rel >= 0.2 and dt < 1800
        assert record(9, ok, f"recovery error {res.final_error:.4f} vs zero fill {res.baseline:.4f} "
                      f"({100 * rel:.1f}% lower), {dt / 60:.1f} min")

    def test_c10_determinism(self, mixture_run, mnist, request):
        import dataclasses

        checks = {}
        again = train(MIX_TRAIN, mixture_data(), MIX_MODEL)
        checks["mixture"] = again.metrics_csv.encode() == mixture_run[0].metrics_csv.encode()
        starts = stream(0, "probe").uniform(-1.5, 1.5, (200, 1))
        dgs = [map_landscape(double_well, starts, LandscapeConfig())[1].to_json() for _ in range(2)]
        checks["double well"] = dgs[0] == dgs[1]
        E, B = random_barriers(np.random.default_rng(10), 6)
        checks["dg"] = build_dg(E, B).to_json() == build_dg(E, B).to_json()

        short = dataclasses.replace(LANDSCAPE_TRAIN, iterations=PREFIX)
        ds = landscape_data(mnist)
        a, b = (train(short, ds, DIGIT_MODEL).metrics_csv for _ in range(2))
        checks["landscape prefix"] = a == b
        rshort = dataclasses.replace(RECOVERY_TRAIN, iterations=PREFIX)
        rds = recovery_data(mnist)
        runs = []
        for _ in range(2):
            inc = IncompleteDataset.from_images(rds.examples, "P.5", rshort.seed, rds.labels)
            r = train_incomplete(rshort, DIGIT_MODEL, inc)
            runs.append(r.train.metrics_csv + r.trace_csv)
        checks["recovery prefix"] = runs[0] == runs[1]
        if "slow" not in (request.config.getoption("-m") or ""):
            # the long runs begin with exactly the prefix rows
            full = request.getfixturevalue("landscape_run")[0].metrics_csv.splitlines()
            checks["landscape full vs prefix"] = full[: len(a.splitlines())] == a.splitlines()
            full = request.getfixturevalue("recovery_run")[0].train.metrics_csv.splitlines()
            pre = runs[0].splitlines()[: PREFIX // rshort.log_interval + 1]
            checks["recovery full vs prefix"] = full[: len(pre)] == pre
        ok = all(checks.values())
        bad = [k for k, v in checks.items() if not v]
        assert record(10, ok, f"byte-identical reruns on {len(checks)} comparisons" + (f"; differ: {bad}" if bad else ""))

    def test_c11_idx(self, tmp_path):
        rng = np.random.default_rng(11)
        imgs = rng.integers(0, 256, (5, 28, 28), dtype=np.uint8)
        p = tmp_path / "f.idx"
        write_idx(str(p), imgs)
        same = load_idx(str(p)).examples[:, 0].tobytes() == reference_idx(str(p)).tobytes()
        bad = tmp_path / "bad.idx"
        bad.write_bytes(b"\x12\x34\x08\x03" + p.read_bytes()[4:])
        try:
            read_idx(str(bad))
            raised = False
        except BadMagicError:
            raised = True
        assert record(11, same and raised, f"reference parser match: {same}; bad magic raises BadMagicError: {raised}")
