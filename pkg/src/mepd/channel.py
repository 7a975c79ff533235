"""Random MIMO channels, noise and transmit symbols.

Every generator takes an explicit ``numpy.random.Generator``; use
:func:`substream` to derive reproducible per-trial streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConfigurationError, Constellation


@dataclass(frozen=True)
class ChannelConfig:
    n_t: int
    n_r: int
    correlation_condition_number: float | None = None
    seed: int = 0
    # None, "columns" or "rows": unit-norm pre-scaling of the i.i.d. input
    # before the correlated recomposition
    normalize: str | None = None

    def __post_init__(self):
        if self.n_t < 1 or self.n_r < 1:
            raise ConfigurationError("antenna counts must be >= 1")
        K = self.correlation_condition_number
        if K is not None:
            if K < 1:
                raise ConfigurationError("condition number must be >= 1")
            if self.n_r < self.n_t:
                raise ConfigurationError("correlated channels need n_r >= n_t")
        if self.normalize not in (None, "columns", "rows"):
            raise ConfigurationError(f"unknown normalization {self.normalize!r}")

    @property
    def load_ratio(self) -> float:
        return self.n_t / self.n_r


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``; order-free and process-safe."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def _cn(rng: np.random.Generator, shape, power: float = 1.0) -> np.ndarray:
    scale = np.sqrt(power / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def gen_iid_rayleigh(cfg: ChannelConfig, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    """CN(0, 1) entries, shape ``(n_r, n_t)`` or ``(batch, n_r, n_t)``."""
    shape = (cfg.n_r, cfg.n_t) if batch is None else (batch, cfg.n_r, cfg.n_t)
    return _cn(rng, shape)


def correlation_base(K: float, n_t: int) -> float:
    """The constant ``k`` giving a max/min singular-value ratio of ``K``."""
    if n_t == 1:
        return 1.0
    return float(K) ** (n_t / (2.0 * (n_t - 1)))


def correlated_singular_values(K: float, n_t: int, n_r: int) -> np.ndarray:
    k = correlation_base(K, n_t)
    n = np.arange(n_t)
    s = k ** (-2.0 * n / n_t)
    return n_t * n_r * s / s.sum()


def gen_correlated(cfg: ChannelConfig, h_iid: np.ndarray, K: float | None = None) -> np.ndarray:
    """Replace the singular values of ``h_iid`` by a geometric profile.

    The profile has condition number ``K`` and sums to ``n_t * n_r``; the
    singular vectors of the input are kept (``U @ diag(S) @ Vh``).
    Accepts a single matrix or a batch.
    """
    if K is None:
        K = cfg.correlation_condition_number
    if K is None or K < 1:
        raise ConfigurationError("condition number K >= 1 required")
    h = np.asarray(h_iid, dtype=complex)
    n_r, n_t = h.shape[-2:]
    if n_r < n_t:
        raise ConfigurationError("correlated channels need n_r >= n_t")
    if cfg.normalize == "columns":
        h = h / np.linalg.norm(h, axis=-2, keepdims=True)
    elif cfg.normalize == "rows":
        h = h / np.linalg.norm(h, axis=-1, keepdims=True)
    U, s, Vh = np.linalg.svd(h, full_matrices=False)
    if np.any(s[..., -1] <= s[..., 0] * n_r * np.finfo(float).eps):
        raise np.linalg.LinAlgError("input channel is rank deficient")
    S = correlated_singular_values(K, n_t, n_r)
    return (U * S) @ Vh


def gen_noise(m: int, noise_power_complex, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    """CN(0, noise_power) vector(s); ``noise_power`` may be per-vector."""
    p = np.asarray(noise_power_complex, dtype=float)
    if np.any(p <= 0):
        raise ConfigurationError("noise power must be positive")
    shape = (m,) if batch is None else (batch, m)
    z = _cn(rng, shape)
    if p.ndim:
        p = p[:, None]
    return np.sqrt(p) * z


def gen_symbols(n_t: int, constellation: Constellation, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    shape = (n_t,) if batch is None else (batch, n_t)
    idx = rng.integers(0, constellation.order, size=shape)
    return constellation.complex_points[idx]
