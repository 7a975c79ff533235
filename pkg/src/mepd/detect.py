"""MIMO detectors on the real-valued model ``y = H x + n``.

All detectors accept a single instance (``H`` of shape ``(M, N)``) or a
batch (``(B, M, N)``) with a scalar or per-row noise power. In batch mode
a trial whose posterior solve fails comes back as a row of NaN; for a
single instance :class:`DetectionError` is raised instead.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._linalg import posterior_moments
from .model import ConfigurationError, Constellation

VARIANCE_FLOOR = 5e-7
EPD_DAMPING = 0.2
DENOMINATOR_GUARD = 1e-12
ZERO_VARIANCE = 1e-300


class DetectionError(ArithmeticError):
    """A trial could not be detected (singular posterior, zero variance)."""


@dataclass(frozen=True)
class EpdConstants:
    variance_floor: float = VARIANCE_FLOOR
    damping: float = EPD_DAMPING
    max_iters: int = 5


@dataclass
class EpState:
    """Prior natural parameters and Gaussian posterior at one iteration."""

    iteration: int
    lam: np.ndarray
    gamma: np.ndarray
    u: np.ndarray
    C: np.ndarray


class CavityMoments(NamedTuple):
    m: np.ndarray
    eps2: np.ndarray


@dataclass
class TraceStep:
    state: EpState
    cavity: CavityMoments
    s: np.ndarray
    u_prime: np.ndarray
    sigma2_prime: np.ndarray


@dataclass(frozen=True, eq=False)
class MepdParams:
    """Per-layer cavity scalers ``alpha``, damping ``beta`` and initial precision."""

    alpha: np.ndarray
    beta: np.ndarray
    lambda_init: float

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).reshape(-1)
        beta = np.array(self.beta, dtype=float).reshape(-1)
        if alpha.size < 1 or alpha.size != beta.size:
            raise ConfigurationError("alpha and beta need the same length L >= 1")
        if not self.lambda_init > 0:
            raise ConfigurationError("lambda_init must be positive")
        alpha.flags.writeable = False
        beta.flags.writeable = False
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "lambda_init", float(self.lambda_init))

    @property
    def L(self) -> int:
        return self.alpha.size

    @classmethod
    def mepd_point(cls, layers: int, constellation: Constellation) -> "MepdParams":
        """``alpha = 1``, ``beta = 0.2``, ``lambda = 1/E_x``: plain damped EP without the skip rule."""
        return cls(np.ones(layers), np.full(layers, EPD_DAMPING), 1.0 / constellation.energy_real)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.lambda_init], self.alpha, self.beta])

    @classmethod
    def from_vector(cls, v, layers: int) -> "MepdParams":
        v = np.asarray(v, dtype=float)
        if v.size != 2 * layers + 1:
            raise ValueError(f"expected {2 * layers + 1} values, got {v.size}")
        return cls(v[1 : layers + 1], v[layers + 1 :], v[0])

    def __eq__(self, other):
        if not isinstance(other, MepdParams):
            return NotImplemented
        return (
            self.lambda_init == other.lambda_init
            and np.array_equal(self.alpha, other.alpha)
            and np.array_equal(self.beta, other.beta)
        )

    def __repr__(self):
        return f"MepdParams(lambda_init={self.lambda_init!r}, alpha={self.alpha.tolist()}, beta={self.beta.tolist()})"


def _pam(constellation) -> np.ndarray:
    if isinstance(constellation, Constellation):
        return constellation.real_pam
    return np.asarray(constellation, dtype=float)


# --- single-step building blocks -------------------------------------------


def gaussian_posterior(H, y, noise_power, lam, gamma):
    """Covariance ``(H^T H / s2 + diag(lam))^-1`` and mean ``C (H^T y / s2 + gamma)``.

    Uses a general (pivoted) inverse, so indefinite systems are fine as long
    as they are invertible.
    """
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    Ht = np.swapaxes(H, -1, -2)
    nv = np.asarray(noise_power, dtype=float)[..., None]
    A = Ht @ H / nv[..., None] + lam[..., None] * np.eye(H.shape[-1])
    rhs = (Ht @ y[..., None])[..., 0] / nv + gamma
    try:
        C = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise DetectionError("posterior system is singular") from exc
    if not np.all(np.isfinite(C)):
        raise DetectionError("posterior system is numerically singular")
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    u = (C @ rhs[..., None])[..., 0]
    return C, u


def _cavity(e, s, lam, gamma):
    with np.errstate(divide="ignore", invalid="ignore"):
        den = 1.0 - s * lam
        small = np.abs(den) < DENOMINATOR_GUARD
        if np.any(small):
            den = np.where(small, np.where(den < 0, -DENOMINATOR_GUARD, DENOMINATOR_GUARD), den)
        eps2 = s / den
        m = eps2 * (e / s - gamma)
    return CavityMoments(m, eps2)


def cavity(e, s, lam, gamma) -> CavityMoments:
    """Remove each prior factor from the Gaussian marginal ``(e, s)``.

    Negative cavity variances are returned as-is. A denominator
    ``1 - s*lam`` within 1e-12 of zero is clamped to +-1e-12.
    """
    e, s, lam, gamma = (np.asarray(a, dtype=float) for a in (e, s, lam, gamma))
    if np.any(np.abs(s) <= ZERO_VARIANCE):
        raise DetectionError("zero posterior variance")
    return _cavity(e, s, lam, gamma)


def moment_match(m, eps2, alpha, constellation, variance_floor: float = VARIANCE_FLOOR):
    """Mean and floored variance of the cavity Gaussian restricted to the PAM alphabet.

    The weights are ``exp(-(theta - m)^2 / (2 alpha eps2))`` whatever the sign
    of ``alpha * eps2``; a negative product favours the farthest points.
    """
    pam = _pam(constellation)
    m = np.asarray(m, dtype=float)
    v = np.asarray(alpha, dtype=float) * np.asarray(eps2, dtype=float)
    d2 = (pam - m[..., None]) ** 2
    # shift by the largest exponent before dividing so tiny |v| cannot overflow
    ref = np.where(v[..., None] > 0, d2.min(axis=-1, keepdims=True), d2.max(axis=-1, keepdims=True))
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.exp(-(d2 - ref) / (2.0 * v[..., None]))
    p = w / w.sum(axis=-1, keepdims=True)
    mean = p @ pam
    var = np.einsum("...j,...j->...", p, (pam - mean[..., None]) ** 2)
    return mean, np.maximum(var, variance_floor)


def mepd_update(lam, gamma, u_prime, sigma2_prime, e, s, beta):
    """Damped natural-parameter step that never skips negative-variance updates."""
    lam_next = lam + beta * (1.0 / sigma2_prime - 1.0 / s)
    gamma_next = gamma + beta * (u_prime / sigma2_prime - e / s)
    return lam_next, gamma_next


def epd_update(lam, gamma, u_prime, sigma2_prime, m, eps2, beta=EPD_DAMPING):
    """Classic EP step: keep the old factor whenever ``sigma2' > eps2``."""
    keep = sigma2_prime > eps2
    lam_next = (1.0 - beta) * lam + beta * (1.0 / sigma2_prime - 1.0 / eps2)
    gamma_next = (1.0 - beta) * gamma + beta * (u_prime / sigma2_prime - m / eps2)
    return np.where(keep, lam, lam_next), np.where(keep, gamma, gamma_next)


# --- iterative detectors ---------------------------------------------------


def _as_batch(H, y, noise_power):
    H = np.asarray(H, dtype=float)
    y = np.asarray(y, dtype=float)
    single = H.ndim == 2
    if single:
        H, y = H[None], y[None]
    if H.shape[-2] != y.shape[-1]:
        raise ValueError(f"H has {H.shape[-2]} rows but y has length {y.shape[-1]}")
    nv = np.broadcast_to(np.asarray(noise_power, dtype=float), (H.shape[0],))
    if np.any(nv <= 0):
        raise ConfigurationError("noise power must be positive")
    return single, H, y, nv


def gram(H, y, nv):
    """``H^T H / s2`` and ``H^T y / s2`` for a batch."""
    Ht = np.swapaxes(H, 1, 2)
    G = Ht @ H / nv[:, None, None]
    b = (Ht @ y[..., None])[..., 0] / nv[:, None]
    return G, b


def _posterior(G, b, lam, gamma):
    A = G.copy()
    idx = np.arange(G.shape[-1])
    A[:, idx, idx] += lam
    return posterior_moments(A, b + gamma)


def run_ep(G, b, pam, lambda_init, alpha, beta, iters, rule="mepd",
           variance_floor=VARIANCE_FLOOR, trace=None, start=None):
    """Run ``iters`` EP layers on precomputed Gram data.

    ``rule`` selects the classic skip update (``"epd"``) or the unconditional
    one (``"mepd"``). ``alpha``/``beta`` are per-layer sequences. Returns the
    posterior mean of the last layer (NaN rows for failed trials). Updates
    produced by the last layer are not used. ``start`` optionally gives an
    initial ``(lam, gamma)`` pair instead of ``(lambda_init, 0)``.
    """
    B, N = b.shape
    if start is None:
        lam = np.full((B, N), float(lambda_init))
        gamma = np.zeros((B, N))
    else:
        lam, gamma = (np.array(a, dtype=float) for a in start)
    alive = np.ones(B, dtype=bool)
    u = None
    for t in range(iters):
        s, u, ok = _posterior(G, b, lam, gamma)
        ok &= np.all(np.abs(s) > ZERO_VARIANCE, axis=1)
        alive &= ok
        if t == iters - 1 and trace is None:
            break
        e = np.where(alive[:, None], u, 0.0)
        s = np.where(alive[:, None], s, 1.0)
        m, eps2 = _cavity(e, s, lam, gamma)
        up, sp = moment_match(m, eps2, alpha[t], pam, variance_floor)
        if rule == "epd":
            lam_n, gamma_n = epd_update(lam, gamma, up, sp, m, eps2, beta[t])
        else:
            lam_n, gamma_n = mepd_update(lam, gamma, up, sp, e, s, beta[t])
        if trace is not None:
            trace.append(_trace_step(t + 1, lam, gamma, e, s, G, m, eps2, up, sp))
        lam, gamma = lam_n, gamma_n
        alive &= np.isfinite(lam).all(axis=1) & np.isfinite(gamma).all(axis=1)
        # keep dead rows numerically harmless
        lam[~alive] = 1.0
        gamma[~alive] = 0.0
    u = u.copy()
    u[~alive] = np.nan
    return u


def _trace_step(t, lam, gamma, e, s, G, m, eps2, up, sp):
    A = G[0] + np.diag(lam[0])
    C = np.linalg.inv(A)
    state = EpState(t, lam[0].copy(), gamma[0].copy(), e[0].copy(), C)
    return TraceStep(state, CavityMoments(m[0].copy(), eps2[0].copy()), s[0].copy(), up[0].copy(), sp[0].copy())


def _finish(u, single):
    if single:
        if not np.all(np.isfinite(u[0])):
            raise DetectionError("detection failed for this instance")
        return u[0]
    return u


def _check_trace(trace, single):
    if trace is not None and not single:
        raise ValueError("trajectory tracing needs a single instance")


def detect_epd(H, y, noise_power, constellation: Constellation, iters: int = 5,
               constants: EpdConstants = EpdConstants(), trace: list | None = None):
    """EP detector with the skip rule and fixed damping."""
    if iters < 1:
        raise ConfigurationError("iters must be >= 1")
    single, H, y, nv = _as_batch(H, y, noise_power)
    _check_trace(trace, single)
    G, b = gram(H, y, nv)
    u = run_ep(G, b, constellation.real_pam, 1.0 / constellation.energy_real,
               np.ones(iters), np.full(iters, constants.damping), iters,
               rule="epd", variance_floor=constants.variance_floor, trace=trace)
    return _finish(u, single)


def detect_mepd(H, y, noise_power, constellation: Constellation, params: MepdParams,
                variance_floor: float = VARIANCE_FLOOR, trace: list | None = None):
    single, H, y, nv = _as_batch(H, y, noise_power)
    _check_trace(trace, single)
    G, b = gram(H, y, nv)
    u = run_ep(G, b, constellation.real_pam, params.lambda_init, params.alpha, params.beta,
               params.L, rule="mepd", variance_floor=variance_floor, trace=trace)
    return _finish(u, single)


def detect_mepd_default(H, y, noise_power, constellation: Constellation, iters: int = 5):
    """MEPD at its untrained starting point (``alpha=1``, ``beta=0.2``, ``lambda=1/E_x``)."""
    return detect_mepd(H, y, noise_power, constellation, MepdParams.mepd_point(iters, constellation))


def _batched_inverse(A):
    try:
        C = np.linalg.inv(A)
        ok = np.ones(A.shape[0], dtype=bool)
    except np.linalg.LinAlgError:
        C = np.full_like(A, np.nan)
        ok = np.zeros(A.shape[0], dtype=bool)
        for i in range(A.shape[0]):
            try:
                C[i] = np.linalg.inv(A[i])
                ok[i] = True
            except np.linalg.LinAlgError:
                pass
    ok &= np.isfinite(C).all(axis=(1, 2))
    return C, ok


def detect_lmmse(H, y, noise_power, constellation: Constellation):
    """Linear MMSE estimate with prior precision ``1/E_x``."""
    single, H, y, nv = _as_batch(H, y, noise_power)
    N = H.shape[-1]
    G, b = gram(H, y, nv)
    A = G + np.eye(N) / constellation.energy_real
    try:
        u = np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        u = np.full(b.shape, np.nan)
        for i in range(len(b)):
            try:
                u[i] = np.linalg.solve(A[i], b[i])
            except np.linalg.LinAlgError:
                pass
    u[~np.isfinite(u).all(axis=1)] = np.nan
    return _finish(u, single)


def detect_mmse_sic(H, y, noise_power, constellation: Constellation):
    """Ordered MMSE successive interference cancellation over real streams.

    At each stage the remaining streams are LMMSE-estimated, the one with
    the smallest error variance is hard-decided and cancelled.
    """
    single, H, y, nv = _as_batch(H, y, noise_power)
    B, M, N = H.shape
    pam = constellation.real_pam
    prior = 1.0 / constellation.energy_real
    active = np.ones((B, N), dtype=bool)
    alive = np.ones(B, dtype=bool)
    residual = y.copy()
    x_hat = np.zeros((B, N))
    rows = np.arange(B)
    for _ in range(N):
        Hm = H * active[:, None, :]
        G, b = gram(Hm, residual, nv)
        C, ok = _batched_inverse(G + prior * np.eye(N))
        alive &= ok
        C[~ok] = np.eye(N)
        u = (C @ b[..., None])[..., 0]
        d = np.where(active, np.diagonal(C, axis1=1, axis2=2), np.inf)
        k = np.argmin(d, axis=1)
        decided = pam[np.argmin(np.abs(u[rows, k][:, None] - pam), axis=1)]
        x_hat[rows, k] = decided
        residual = residual - H[rows, :, k] * decided[:, None]
        active[rows, k] = False
    x_hat[~alive] = np.nan
    return _finish(x_hat, single)


def ml_candidates(constellation: Constellation, n: int, max_candidates: int = 1 << 20) -> np.ndarray:
    """All real vectors over the PAM alphabet, in lexicographic order."""
    pam = constellation.real_pam
    if n * np.log2(pam.size) > np.log2(max_candidates):
        raise ConfigurationError(
            f"exhaustive search over {pam.size}^{n} candidates exceeds the budget of {max_candidates}"
        )
    return np.array(list(itertools.product(pam, repeat=n)), dtype=float)


def detect_ml(H, y, constellation: Constellation, max_candidates: int = 1 << 20, noise_power=1.0):
    """Exhaustive maximum-likelihood search; ties go to the lexicographically smallest vector."""
    single, H, y, _ = _as_batch(H, y, noise_power)
    B, M, N = H.shape
    X = ml_candidates(constellation, N, max_candidates)
    best = np.full(B, np.inf)
    best_idx = np.zeros(B, dtype=int)
    chunk = max(1, 4_000_000 // max(1, B * M))
    for lo in range(0, len(X), chunk):
        Xc = X[lo : lo + chunk]
        r = y[:, :, None] - H @ Xc.T
        d = np.einsum("bmk,bmk->bk", r, r)
        k = np.argmin(d, axis=1)
        val = d[np.arange(B), k]
        better = val < best
        best[better] = val[better]
        best_idx[better] = lo + k[better]
    return _finish(X[best_idx], single)


# --- trajectory dumps --------------------------------------------------------

TRACE_HEADER = "t,i,lambda,gamma,e,s,m,eps2,u_prime,sigma2_prime"


def format_trace(steps: list[TraceStep], header: bool = True) -> str:
    lines = [TRACE_HEADER] if header else []
    for step in steps:
        st = step.state
        for i in range(st.lam.size):
            vals = (st.lam[i], st.gamma[i], st.u[i], step.s[i], step.cavity.m[i],
                    step.cavity.eps2[i], step.u_prime[i], step.sigma2_prime[i])
            lines.append(f"{st.iteration},{i}," + ",".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"
