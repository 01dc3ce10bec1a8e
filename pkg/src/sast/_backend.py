"""Runtime switches: kernel backend and numeric precision.

``SAST_KERNELS`` selects the implementation of the hot loops in
:mod:`sast.kernels` (``numba`` or ``numpy``). ``SAST_NUMERIC`` selects the
floating point width used for tensors (``f64`` or ``f32``). Both are read once
at import and can be overridden at runtime with :func:`use_kernels` /
:func:`use_numeric`.
"""
from __future__ import annotations

import contextlib
import os
import warnings

import numpy as np

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

KERNEL_CHOICES = ("numba", "numpy")
NUMERIC_CHOICES = {"f64": np.float64, "f32": np.float32}


_env_errors: list = []


def _kernels_from_env() -> str:
    default = "numba" if HAS_NUMBA else "numpy"
    name = os.environ.get("SAST_KERNELS", default).strip().lower()
    if name not in KERNEL_CHOICES:
        _env_errors.append(f"SAST_KERNELS must be one of {KERNEL_CHOICES}, got {name!r}")
        warnings.warn(_env_errors[-1] + f"; using {default}")
        return default
    if name == "numba" and not HAS_NUMBA:  # pragma: no cover
        warnings.warn("numba is not importable, falling back to numpy kernels")
        name = "numpy"
    return name


def _numeric_from_env() -> str:
    name = os.environ.get("SAST_NUMERIC", "f64").strip().lower()
    if name not in NUMERIC_CHOICES:
        _env_errors.append(f"SAST_NUMERIC must be one of {tuple(NUMERIC_CHOICES)}, got {name!r}")
        warnings.warn(_env_errors[-1] + "; using f64")
        return "f64"
    return name


_state = {"kernels": _kernels_from_env(), "numeric": _numeric_from_env()}


def env_errors() -> list:
    """Problems found in the environment switches at import (each one fell back to a default)."""
    return list(_env_errors)


def kernel_backend() -> str:
    return _state["kernels"]


def numeric_mode() -> str:
    return _state["numeric"]


def float_dtype() -> np.dtype:
    return np.dtype(NUMERIC_CHOICES[_state["numeric"]])


def set_kernels(name: str) -> None:
    if name not in KERNEL_CHOICES:
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:  # pragma: no cover
        raise RuntimeError("numba is not installed")
    _state["kernels"] = name


def set_numeric(name: str) -> None:
    if name not in NUMERIC_CHOICES:
        raise ValueError(f"unknown numeric mode {name!r}")
    _state["numeric"] = name


@contextlib.contextmanager
def use_kernels(name: str):
    old = _state["kernels"]
    set_kernels(name)
    try:
        yield
    finally:
        _state["kernels"] = old


@contextlib.contextmanager
def use_numeric(name: str):
    old = _state["numeric"]
    set_numeric(name)
    try:
        yield
    finally:
        _state["numeric"] = old
