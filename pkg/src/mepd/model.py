"""Constellations, SNR arithmetic and the complex-to-real system transform."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfigurationError(ValueError):
    """Raised for unsupported or inconsistent configuration values."""


MODULATIONS = {"qpsk": 4, "16qam": 16, "64qam": 64}


def modulation_order(name: str | int) -> int:
    """Map ``"qpsk"``/``"16qam"``/``"64qam"`` (or a bare order) to the order."""
    if isinstance(name, (int, np.integer)):
        order = int(name)
    else:
        key = str(name).strip().lower()
        if key.isdigit():
            order = int(key)
        elif key in MODULATIONS:
            order = MODULATIONS[key]
        else:
            raise ConfigurationError(f"unknown modulation {name!r}")
    if order not in MODULATIONS.values():
        raise ConfigurationError(f"unsupported constellation order {order}")
    return order


def modulation_name(order: int) -> str:
    for name, o in MODULATIONS.items():
        if o == order:
            return name
    raise ConfigurationError(f"unsupported constellation order {order}")


@dataclass(frozen=True, eq=False)
class Constellation:
    """Square QAM on the unnormalized odd-integer grid.

    ``real_pam`` is the per-dimension alphabet, ``complex_points`` its
    Cartesian square. ``energy_real`` is half of ``energy_complex``.
    """

    order: int
    complex_points: np.ndarray
    real_pam: np.ndarray
    energy_complex: float
    energy_real: float

    @property
    def name(self) -> str:
        return modulation_name(self.order)

    def __repr__(self) -> str:
        return f"Constellation({self.name})"


_CONSTELLATIONS: dict[int, Constellation] = {}


def build_constellation(order: int | str) -> Constellation:
    order = modulation_order(order)
    if order in _CONSTELLATIONS:
        return _CONSTELLATIONS[order]
    side = int(round(np.sqrt(order)))
    pam = np.arange(-(side - 1), side, 2, dtype=float)
    points = (pam[:, None] + 1j * pam[None, :]).ravel()
    energy = 2.0 * float(np.mean(pam ** 2))
    pam.flags.writeable = False
    points.flags.writeable = False
    const = Constellation(order, points, pam, energy, 0.5 * energy)
    _CONSTELLATIONS[order] = const
    return const


def snr_to_complex_noise_power(snr_db, n_t: int, energy_complex: float):
    """Noise power per complex receive dimension for a given SNR in dB.

    SNR is defined as ``N_t * E_x / sigma^2`` with ``E_x`` the complex
    symbol energy.
    """
    if n_t < 1:
        raise ConfigurationError("n_t must be >= 1")
    if energy_complex <= 0:
        raise ConfigurationError("energy_complex must be positive")
    return n_t * energy_complex / 10.0 ** (np.asarray(snr_db, dtype=float) / 10.0)


def complex_noise_power_to_snr(noise_power_complex, n_t: int, energy_complex: float):
    return 10.0 * np.log10(n_t * energy_complex / np.asarray(noise_power_complex, dtype=float))


@dataclass
class ComplexSystemInstance:
    H_bar: np.ndarray
    x_bar: np.ndarray
    n_bar: np.ndarray
    y_bar: np.ndarray
    noise_power_complex: float

    @classmethod
    def from_parts(cls, H_bar, x_bar, n_bar, noise_power_complex):
        H_bar = np.asarray(H_bar, dtype=complex)
        x_bar = np.asarray(x_bar, dtype=complex)
        n_bar = np.asarray(n_bar, dtype=complex)
        y_bar = np.einsum("...ij,...j->...i", H_bar, x_bar) + n_bar
        return cls(H_bar, x_bar, n_bar, y_bar, noise_power_complex)


@dataclass
class RealSystemInstance:
    H: np.ndarray
    y: np.ndarray
    x: np.ndarray
    n: np.ndarray
    noise_power: float


def real_matrix(H_bar: np.ndarray) -> np.ndarray:
    """Stack a complex matrix (or batch) into ``[[Re, -Im], [Im, Re]]``."""
    re, im = H_bar.real, H_bar.imag
    top = np.concatenate([re, -im], axis=-1)
    bottom = np.concatenate([im, re], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def real_vector(v_bar: np.ndarray) -> np.ndarray:
    return np.concatenate([v_bar.real, v_bar.imag], axis=-1)


def complex_vector(v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`real_vector`."""
    half = v.shape[-1] // 2
    return v[..., :half] + 1j * v[..., half:]


def complex_to_real(inst: ComplexSystemInstance) -> RealSystemInstance:
    H_bar = np.asarray(inst.H_bar)
    n_r, n_t = H_bar.shape[-2:]
    if inst.x_bar.shape[-1] != n_t:
        raise ValueError(f"x_bar has length {inst.x_bar.shape[-1]}, channel has {n_t} columns")
    if inst.y_bar.shape[-1] != n_r or inst.n_bar.shape[-1] != n_r:
        raise ValueError(f"y_bar/n_bar must have length {n_r}")
    return RealSystemInstance(
        H=real_matrix(H_bar),
        y=real_vector(inst.y_bar),
        x=real_vector(inst.x_bar),
        n=real_vector(inst.n_bar),
        noise_power=0.5 * np.asarray(inst.noise_power_complex, dtype=float),
    )


def hard_decision(u: np.ndarray, constellation: Constellation):
    """Snap each real entry to the nearest PAM level.

    Exact midpoints resolve to the smaller level. Returns the real-valued
    decisions and the recombined complex symbols.
    """
    u = np.asarray(u, dtype=float)
    if u.shape[-1] % 2:
        raise ValueError("real vector length must be even")
    pam = constellation.real_pam
    # argmin keeps the first (smaller) level on ties
    idx = np.argmin(np.abs(u[..., None] - pam), axis=-1)
    decided = pam[idx]
    return decided, complex_vector(decided)


def symbol_errors(x_hat_real: np.ndarray, x_real: np.ndarray) -> np.ndarray:
    """Complex-symbol error count per vector (both real halves must match)."""
    wrong = x_hat_real != x_real
    half = wrong.shape[-1] // 2
    return np.sum(wrong[..., :half] | wrong[..., half:], axis=-1)
