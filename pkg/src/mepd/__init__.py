"""EP-family MIMO detection with learned per-layer parameters."""

from .model import (
    ConfigurationError,
    Constellation,
    build_constellation,
    complex_to_real,
    hard_decision,
    snr_to_complex_noise_power,
)
from .detect import (
    DetectionError,
    MepdParams,
    detect_epd,
    detect_lmmse,
    detect_mepd,
    detect_ml,
    detect_mmse_sic,
)

__all__ = [
    "ConfigurationError",
    "Constellation",
    "DetectionError",
    "MepdParams",
    "build_constellation",
    "complex_to_real",
    "detect_epd",
    "detect_lmmse",
    "detect_mepd",
    "detect_ml",
    "detect_mmse_sic",
    "hard_decision",
    "snr_to_complex_noise_power",
]
