"""Symmetric PSD matrix helpers used by the scatter-location machinery."""

from __future__ import annotations

import warnings

import numpy as np

from .errors import MatrixNotPDError

# Eigenvalues below this floor are clamped (posterior scatter draws can be
# near-singular); genuinely negative spectra raise instead.
EIG_FLOOR = 1e-12
SYM_TOL = 1e-10


def check_symmetric(mat: np.ndarray, tol: float = SYM_TOL, name: str = "matrix") -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, atol=tol, rtol=0.0):
        raise ValueError(f"{name} is not symmetric within {tol:g}")
    return 0.5 * (mat + mat.T)


def sqrtm_psd(mat: np.ndarray, *, name: str = "matrix") -> np.ndarray:
    """Principal square root of a symmetric PSD matrix.

    Uses a symmetric eigendecomposition. Eigenvalues in ``[-EIG_FLOOR *
    scale, EIG_FLOOR]`` are clamped to the floor with a warning; anything
    more negative raises :class:`MatrixNotPDError`.
    """
    mat = check_symmetric(mat, name=name)
    vals, vecs = np.linalg.eigh(mat)
    scale = max(abs(vals[-1]), 1.0)
    if vals[0] < -SYM_TOL * scale:
        raise MatrixNotPDError(f"{name} is not positive semidefinite", smallest_eigenvalue=vals[0])
    if vals[0] < EIG_FLOOR:
        warnings.warn(
            f"{name}: eigenvalues below {EIG_FLOOR:g} clamped (smallest {vals[0]:.3e})",
            RuntimeWarning,
            stacklevel=2,
        )
        vals = np.maximum(vals, EIG_FLOOR)
    return (vecs * np.sqrt(vals)) @ vecs.T


def check_pd(mat: np.ndarray, *, name: str = "matrix") -> np.ndarray:
    """Validate symmetry and strict positive definiteness."""
    mat = check_symmetric(mat, name=name)
    vals = np.linalg.eigvalsh(mat)
    if vals[0] <= 0.0:
        raise MatrixNotPDError(f"{name} is not positive definite", smallest_eigenvalue=vals[0])
    return mat


def inv_psd(mat: np.ndarray, *, name: str = "matrix") -> np.ndarray:
    """Inverse through the same eigendecomposition/clamping path as sqrtm_psd."""
    mat = check_symmetric(mat, name=name)
    vals, vecs = np.linalg.eigh(mat)
    if vals[0] < EIG_FLOOR:
        vals = np.maximum(vals, EIG_FLOOR)
    return (vecs / vals) @ vecs.T
