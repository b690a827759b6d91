"""Input validation helpers for estimator-facing arrays."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def check_position(p, name: str = "position") -> np.ndarray:
    """Coerce to a finite float array of shape (2,)."""
    p = np.asarray(p, dtype=float)
    if p.shape != (2,):
        raise ConfigError(f"{name} must have shape (2,), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ConfigError(f"{name} must be finite")
    return p


def check_complex_vector(y, length: int | None = None, name: str = "y") -> np.ndarray:
    """Coerce to a finite 1-D complex128 array, optionally of fixed length."""
    y = np.asarray(y, dtype=complex)
    if y.ndim != 1:
        raise ConfigError(f"{name} must be 1-D, got ndim={y.ndim}")
    if length is not None and y.size != length:
        raise ConfigError(f"{name} must have length {length}, got {y.size}")
    if not np.all(np.isfinite(y)):
        raise ConfigError(f"{name} must be finite")
    return y


def check_probabilities(p, name: str = "p") -> np.ndarray:
    """Coerce to a float array with entries in [0, 1]."""
    p = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ConfigError(f"{name} must lie in [0, 1]")
    return p
