"""Shared test oracles: independent routes to quantities the library computes.

Everything here deliberately avoids the code paths under test: eigenvalues
via explicit characteristic polynomials, gradients via central differences,
locus points via 1-D root bracketing on eigenvalue gaps.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq


def charpoly_roots(A, B):
    """Roots of det(A - t*B) by polynomial interpolation (independent of QZ).

    Evaluates the determinant at n+1 nodes, fits the degree-n polynomial
    exactly, trims (near-)zero leading coefficients (singular B drops the
    degree) and returns the roots.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n = A.shape[0]
    nodes = np.linspace(-1.3, 1.9, n + 1)
    vals = [np.linalg.det(A - t * B) for t in nodes]
    coeffs = np.polyfit(nodes, vals, n)
    top = np.abs(coeffs).max()
    k = 0
    while k < len(coeffs) - 1 and abs(coeffs[k]) < 1e-10 * top:
        k += 1
    return np.roots(coeffs[k:])


def fd_gradient(f, U, h=1e-6):
    """Central-difference gradient of a scalar function of the state."""
    U = np.asarray(U, dtype=float)
    g = np.empty(U.size)
    for k in range(U.size):
        dU = np.zeros(U.size)
        dU[k] = h
        g[k] = (f(U + dU) - f(U - dU)) / (2 * h)
    return g


def finite_eigenvalues_sorted(model, U):
    """All finite real parts of the pencil eigenvalues at U, ascending."""
    A = model.jacobian_F(U)
    B = model.jacobian_G(U)
    lams = charpoly_roots(A, B)
    return np.sort(lams.real[np.abs(lams.imag) < 1e-7 * (1 + np.abs(lams.real))])


def icdow_coincidence(model, y, u, bracket=(0.55, 0.85)):
    """Saturation s* where the two finite speeds of the 3-component model
    cross at fixed (y, u), plus the common speed, by sign-change bracketing
    of the eigenvalue gap (the saturation-family speed minus the other).

    Both speeds cross twice along the saturation line (the saturation-family
    speed sweeps up over the tracer speed near its peak and back down); the
    default bracket isolates the descending crossing.
    """

    def gap(s):
        U = np.array([s, y, u])
        lams = finite_eigenvalues_sorted(model, U)
        lam_s = u * _dfw(s) / model.parameters["porosity"]
        other = lams[np.argmax(np.abs(lams - lam_s))]
        return lam_s - other

    s_star = brentq(gap, bracket[0], bracket[1], xtol=1e-14)
    lam0 = u * _dfw(s_star) / model.parameters["porosity"]
    return s_star, lam0


def _dfw(s):
    d = s * s + (1.0 - s) ** 2
    return 2.0 * s * (1.0 - s) / (d * d)
