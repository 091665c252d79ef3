"""Closed-form divergence triangle for linear-Gaussian models.

Every distribution involved is Gaussian:

* data:       ``x ~ N(m0, S0)``
* generator:  ``z ~ N(0, I_d)``, ``x = W z + b + e``, ``e ~ N(0, sigma^2 I)``
* inference:  ``z | x ~ N(C x + c, Sq)``
* energy:     ``f(x) = -x'Ax/2 + h'x``, so ``pi = N(A^-1 h, A^-1)``

Joint KLs are computed directly from joint means and covariances over
``(z, x)``; the marginal and conditional pieces are computed separately so
the two routes can check each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GaussianSandbox:
    data_mean: np.ndarray
    data_cov: np.ndarray
    W: np.ndarray
    b: np.ndarray
    sigma: float
    C: np.ndarray
    c: np.ndarray
    Sq: np.ndarray
    A: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        try:
            np.linalg.cholesky(self.A)
        except np.linalg.LinAlgError:
            raise ValueError("energy matrix A must be positive definite") from None
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def D(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def energy_mean_cov(self):
        cov = np.linalg.inv(self.A)
        return cov @ self.h, cov

    def generator_marginal(self):
        return self.b.copy(), self.W @ self.W.T + self.sigma**2 * np.eye(self.D)

    def generator_posterior(self, W=None, b=None, sigma=None):
        """``p(z|x) = N(L x + l, S)`` for the linear generator (defaults to own params)."""
        W = self.W if W is None else W
        b = self.b if b is None else b
        sigma = self.sigma if sigma is None else sigma
        S = np.linalg.inv(np.eye(W.shape[1]) + W.T @ W / sigma**2)
        L = S @ W.T / sigma**2
        return L, -L @ b, S


@dataclass
class SandboxTerms:
    kl_q_p: float
    kl_p_pi: float
    kl_q_pi: float
    D: float
    D0: float
    kl_data_p: float
    kl_p_pi_marginal: float
    kl_data_pi: float
    kl_infer_post: float  # E_{q_data} KL(q_phi(z|x) || p_theta(z|x))
    kl_post_infer: float  # E_{p_theta(x)} KL(p_theta(z|x) || q_phi(z|x))

    @property
    def gap(self) -> float:
        """``D - (KL(q_data||p_theta) - KL(q_data||pi_alpha))``; nonnegative."""
        return self.D - (self.kl_data_p - self.kl_data_pi)


def gaussian_kl(m1, S1, m2, S2) -> float:
    """``KL(N(m1, S1) || N(m2, S2))``."""
    k = len(m1)
    S2inv = np.linalg.inv(S2)
    diff = m2 - m1
    _, ld1 = np.linalg.slogdet(S1)
    _, ld2 = np.linalg.slogdet(S2)
    return 0.5 * float(np.trace(S2inv @ S1) + diff @ S2inv @ diff - k + ld2 - ld1)


def expected_conditional_kl(A1, a1, S1, A2, a2, S2, mx, Sx) -> float:
    """``E_{x ~ N(mx, Sx)} KL(N(A1 x + a1, S1) || N(A2 x + a2, S2))``."""
    k = S1.shape[0]
    S2inv = np.linalg.inv(S2)
    B = A1 - A2
    mdiff = B @ mx + a1 - a2
    _, ld1 = np.linalg.slogdet(S1)
    _, ld2 = np.linalg.slogdet(S2)
    quad = np.trace(S2inv @ B @ Sx @ B.T) + mdiff @ S2inv @ mdiff
    return 0.5 * float(np.trace(S2inv @ S1) + quad - k + ld2 - ld1)


def _joint_from_conditional(mx, Sx, C, c, Sq):
    """Joint over ``(z, x)`` for ``x ~ N(mx, Sx)``, ``z|x ~ N(Cx + c, Sq)``."""
    mz = C @ mx + c
    Szz = C @ Sx @ C.T + Sq
    Szx = C @ Sx
    mean = np.concatenate([mz, mx])
    cov = np.block([[Szz, Szx], [Szx.T, Sx]])
    return mean, cov


def joint_q(sb: GaussianSandbox):
    return _joint_from_conditional(sb.data_mean, sb.data_cov, sb.C, sb.c, sb.Sq)


def joint_pi(sb: GaussianSandbox):
    m, S = sb.energy_mean_cov()
    return _joint_from_conditional(m, S, sb.C, sb.c, sb.Sq)


def joint_p(sb: GaussianSandbox, W=None, b=None, sigma=None):
    W = sb.W if W is None else W
    b = sb.b if b is None else b
    sigma = sb.sigma if sigma is None else sigma
    d, D = W.shape[1], W.shape[0]
    mean = np.concatenate([np.zeros(d), b])
    cov = np.block([[np.eye(d), W.T], [W, W @ W.T + sigma**2 * np.eye(D)]])
    return mean, cov


def analytic_triangle_gaussian(sb: GaussianSandbox) -> SandboxTerms:
    """All divergence-triangle terms of a sandbox instance in closed form."""
    mq, Sq_joint = joint_q(sb)
    mp, Sp_joint = joint_p(sb)
    mpi, Spi_joint = joint_pi(sb)
    kl_q_p = gaussian_kl(mq, Sq_joint, mp, Sp_joint)
    kl_p_pi = gaussian_kl(mp, Sp_joint, mpi, Spi_joint)
    kl_q_pi = gaussian_kl(mq, Sq_joint, mpi, Spi_joint)

    mg, Sg = sb.generator_marginal()
    me, Se = sb.energy_mean_cov()
    kl_data_p = gaussian_kl(sb.data_mean, sb.data_cov, mg, Sg)
    kl_p_pi_m = gaussian_kl(mg, Sg, me, Se)
    kl_data_pi = gaussian_kl(sb.data_mean, sb.data_cov, me, Se)

    L, l, Spost = sb.generator_posterior()
    kl_infer_post = expected_conditional_kl(sb.C, sb.c, sb.Sq, L, l, Spost, sb.data_mean, sb.data_cov)
    kl_post_infer = expected_conditional_kl(L, l, Spost, sb.C, sb.c, sb.Sq, mg, Sg)

    return SandboxTerms(
        kl_q_p=kl_q_p,
        kl_p_pi=kl_p_pi,
        kl_q_pi=kl_q_pi,
        D=kl_q_p + kl_p_pi - kl_q_pi,
        D0=kl_data_p + kl_p_pi_m - kl_data_pi,
        kl_data_p=kl_data_p,
        kl_p_pi_marginal=kl_p_pi_m,
        kl_data_pi=kl_data_pi,
        kl_infer_post=kl_infer_post,
        kl_post_infer=kl_post_infer,
    )


def em_identity_terms(sb: GaussianSandbox, W_t, b_t, sigma_t) -> tuple[float, float, float]:
    """EM surrogate pieces with the posterior taken at ``(W_t, b_t, sigma_t)``.

    Returns ``(lhs, marginal, posterior)`` where
    ``lhs = KL(q_data(x) p_t(z|x) || p_theta(z, x))``,
    ``marginal = KL(q_data || p_theta(x))`` and
    ``posterior = E_{q_data} KL(p_t(z|x) || p_theta(z|x))``.
    """
    Lt, lt, St = sb.generator_posterior(W_t, b_t, sigma_t)
    m_lhs, S_lhs = _joint_from_conditional(sb.data_mean, sb.data_cov, Lt, lt, St)
    mp, Sp = joint_p(sb)
    lhs = gaussian_kl(m_lhs, S_lhs, mp, Sp)
    mg, Sg = sb.generator_marginal()
    marginal = gaussian_kl(sb.data_mean, sb.data_cov, mg, Sg)
    L, l, S = sb.generator_posterior()
    post = expected_conditional_kl(Lt, lt, St, L, l, S, sb.data_mean, sb.data_cov)
    return lhs, marginal, post


def _random_spd(rng, n, scale=1.0):
    M = rng.normal(size=(n, n))
    return scale * (M @ M.T / n + 0.5 * np.eye(n))


def random_sandbox(rng: np.random.Generator, D: int = 3, d: int = 2) -> GaussianSandbox:
    """A random well-conditioned instance."""
    return GaussianSandbox(
        data_mean=rng.normal(size=D),
        data_cov=_random_spd(rng, D),
        W=rng.normal(size=(D, d)),
        b=rng.normal(size=D),
        sigma=float(rng.uniform(0.3, 1.5)),
        C=rng.normal(size=(d, D)) * 0.5,
        c=rng.normal(size=d) * 0.5,
        Sq=_random_spd(rng, d, 0.5),
        A=np.linalg.inv(_random_spd(rng, D)),
        h=rng.normal(size=D),
    )


def equilibrium_sandbox(W, b, sigma: float) -> GaussianSandbox:
    """Data, generator and energy all equal; inference is the exact posterior."""
    W, b = np.asarray(W, float), np.asarray(b, float)
    D, d = W.shape
    cov = W @ W.T + sigma**2 * np.eye(D)
    A = np.linalg.inv(cov)
    S = np.linalg.inv(np.eye(d) + W.T @ W / sigma**2)
    L = S @ W.T / sigma**2
    return GaussianSandbox(
        data_mean=b.copy(), data_cov=cov, W=W, b=b, sigma=sigma,
        C=L, c=-L @ b, Sq=S, A=A, h=A @ b,
    )
