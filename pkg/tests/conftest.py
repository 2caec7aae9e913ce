"""Shared helpers for the test suite."""

from __future__ import annotations

import os

# The determinism tests flip between 1 and 2 threads; numba caps the thread
# count at whatever NUMBA_NUM_THREADS was when it got imported, which on a
# single-core CI box would be 1. Must run before any numba import.
os.environ.setdefault("NUMBA_NUM_THREADS", "2")

import numpy as np
import pytest

from invren.geomcore import TriMesh
from invren.primitives import icosphere


def jittered_icosphere(rng: np.random.Generator, subdivisions: int = 1, jitter: float = 0.05) -> TriMesh:
    """Icosphere with vertex noise: a small valid closed mesh for FD checks."""
    mesh = icosphere(subdivisions)
    mesh.vertices = mesh.vertices + jitter * rng.standard_normal(mesh.vertices.shape)
    return mesh


def fd_gradient(func, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function over every entry of x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = func(x)
        flat[i] = old - h
        fm = func(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise relative error with a denominator floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    denom = np.maximum(np.abs(reference), floor)
    return float(np.max(np.abs(analytic - reference) / denom))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
