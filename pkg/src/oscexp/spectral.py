"""Spectral calculus for real skew-symmetric matrices.

A real skew-symmetric ``B`` is normal, so ``B = P diag(i*omega) P^H`` with a
unitary ``P``.  Any analytic function of ``tau * (h/eps) * B`` is then
``P diag(f(i*tau*(h/eps)*omega)) P^H``, which is real whenever ``f`` maps
conjugates to conjugates (true for every phi-function).  One Hermitian
eigendecomposition per problem serves every coefficient of every method.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import NearSingularCoefficient

__all__ = [
    "SkewSpectrum",
    "PhiTable",
    "as_skew",
    "skew_spectral",
    "phi_scalar",
    "phi_matrix",
    "matfun",
    "RESONANCE_GUARD",
]

#: |denominator| below this at any eigenvalue raises NearSingularCoefficient.
RESONANCE_GUARD = 1e-8

# Taylor series is used inside this radius; 26 terms keep the truncation
# below 1e-25 relative for every k.
_TAYLOR_RADIUS = 1.0
_TAYLOR_TERMS = 26

_IMAG_RESIDUE_TOL = 1e-11


def as_skew(B, rtol=1e-14):
    """Validate ``B`` as a real skew-symmetric matrix and return a float copy.

    The returned array is exactly antisymmetric (``0.5*(B - B.T)``) and
    read-only.
    """
    B = np.array(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {B.shape}")
    if B.shape[0] < 2:
        raise ValueError("dimension must be at least 2")
    if not np.all(np.isfinite(B)):
        raise ValueError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(B))))
    asym = float(np.max(np.abs(B + B.T)))
    if asym > rtol * scale:
        raise ValueError(f"matrix is not skew-symmetric (|B + B^T| = {asym:.3e})")
    B = 0.5 * (B - B.T)
    B.setflags(write=False)
    return B


@dataclass(frozen=True, eq=False)
class SkewSpectrum:
    """Unitary diagonalization ``source = P diag(i*omegas) P^H``."""

    P: np.ndarray
    omegas: np.ndarray
    source: np.ndarray

    @property
    def dim(self):
        return self.source.shape[0]

    @property
    def norm(self):
        """Largest |omega|, i.e. the spectral norm of the source matrix."""
        return float(np.max(np.abs(self.omegas)))

    def assemble(self, values):
        """Return ``P diag(values) P^H`` as a complex matrix."""
        return (self.P * values) @ self.P.conj().T


def skew_spectral(B):
    """Diagonalize a real skew-symmetric matrix.

    ``-i*B`` is Hermitian with real eigenvalues ``omega``; its eigenvectors
    diagonalize ``B`` with eigenvalues ``i*omega``.  ``omegas`` come out
    sorted ascending.
    """
    B = as_skew(B)
    omegas, P = np.linalg.eigh(-1j * B)
    omegas = np.ascontiguousarray(omegas)
    P = np.ascontiguousarray(P)
    omegas.setflags(write=False)
    P.setflags(write=False)
    return SkewSpectrum(P=P, omegas=omegas, source=B)


def _taylor_phi(k, z):
    # phi_k(z) = sum_m z^m / (m+k)!, summed by Horner from the tail.
    acc = np.zeros_like(z)
    for m in range(_TAYLOR_TERMS - 1, -1, -1):
        acc = acc * z + 1.0 / math.factorial(m + k)
    return acc


def phi_scalar(k, z):
    """Evaluate ``phi_k`` at scalar or array argument ``z``.

    ``phi_0 = exp``; ``phi_k(z) = (phi_{k-1}(z) - 1/(k-1)!) / z`` away from
    the origin and a truncated Taylor series near it.
    """
    if k < 0:
        raise ValueError("phi index must be non-negative")
    z_arr = np.asarray(z, dtype=complex)
    scalar = z_arr.ndim == 0
    z_arr = np.atleast_1d(z_arr)
    if k == 0:
        out = np.exp(z_arr)
    else:
        out = np.empty_like(z_arr)
        small = np.abs(z_arr) < _TAYLOR_RADIUS
        if np.any(small):
            out[small] = _taylor_phi(k, z_arr[small])
        big = ~small
        if np.any(big):
            zb = z_arr[big]
            val = np.expm1(zb) / zb
            for j in range(2, k + 1):
                val = (val - 1.0 / math.factorial(j - 1)) / zb
            out[big] = val
    return out[0] if scalar else out


def _real_part_checked(M):
    scale = max(1.0, float(np.max(np.abs(M.real))))
    resid = float(np.max(np.abs(M.imag)))
    if resid > _IMAG_RESIDUE_TOL * scale:
        raise AssertionError(
            f"imaginary residue {resid:.3e} exceeds tolerance; spectrum is broken"
        )
    R = np.ascontiguousarray(M.real)
    R.setflags(write=False)
    return R


@dataclass(eq=False)
class PhiTable:
    """Cache of ``phi_k(tau * scale * B)`` for one spectrum and ``scale = h/eps``.

    Safe to share between threads; cached arrays are read-only.
    """

    spectrum: SkewSpectrum
    scale: float
    cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._lock = threading.Lock()

    def eigenvalues(self, tau=1.0):
        """Eigenvalues ``i * tau * scale * omega`` of the scaled matrix."""
        return 1j * (tau * self.scale) * self.spectrum.omegas

    def matrix(self, tau=1.0):
        """The real matrix ``tau * scale * B``."""
        return (tau * self.scale) * self.spectrum.source


def phi_matrix(table, k, tau=1.0):
    """Return ``phi_k(tau * (h/eps) * B)`` as a real matrix (cached)."""
    key = (int(k), float(tau))
    with table._lock:
        hit = table.cache.get(key)
    if hit is not None:
        return hit
    vals = phi_scalar(k, table.eigenvalues(tau))
    M = _real_part_checked(table.spectrum.assemble(vals))
    with table._lock:
        # keep the first result so repeated calls are bitwise identical
        return table.cache.setdefault(key, M)


def matfun(table, f, tau=1.0, denominator=None):
    """Apply a scalar function to ``tau * (h/eps) * B`` through its spectrum.

    ``f`` is evaluated elementwise on the complex eigenvalues.  When
    ``denominator`` is given the result is ``f(z) / denominator(z)``, and
    :class:`NearSingularCoefficient` is raised if the denominator drops below
    :data:`RESONANCE_GUARD` in modulus at any eigenvalue.
    """
    z = table.eigenvalues(tau)
    num = np.broadcast_to(np.asarray(f(z), dtype=complex), z.shape)
    if denominator is not None:
        den = np.broadcast_to(np.asarray(denominator(z), dtype=complex), z.shape)
        small = np.abs(den) < RESONANCE_GUARD
        if np.any(small):
            raise NearSingularCoefficient(
                f"reciprocal coefficient singular at (h/eps)*omega = "
                f"{float(np.max(np.abs(z[small].imag))):.12g}",
                ratio=table.scale,
            )
        num = num / den
    if not np.all(np.isfinite(num)):
        raise NearSingularCoefficient("coefficient function is not finite", ratio=table.scale)
    return _real_part_checked(table.spectrum.assemble(num))
