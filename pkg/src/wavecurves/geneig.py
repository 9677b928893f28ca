"""Generalized eigenstructure of the pencil (A(U), B(U)).

The characteristic speeds of d/dt G(U) + d/dx F(U) = 0 solve the
generalized eigenproblem A r = lambda B r with A = dF/dU, B = dG/dU, where B
may be singular (then some eigenvalues are infinite and carry no wave
family).  This module provides

* :func:`solve_pencil` -- all finite real eigenvalues with right/left
  eigenvectors, infinite ones counted separately;
* :func:`discriminant` -- the squared gap of the active eigenvalue pair,
  smooth across points of coincidence and negative on elliptic states;
* :func:`jordan_chain` -- at a double eigenvalue with a one-dimensional
  eigenspace, the generalized chain r0, r1, l0, l1 with the B-weighted
  normalizations l0.(B r0) = 0, l0.(B r1) = l1.(B r0) = 1, l1.(B r1) = 0;
* :func:`versal_derivatives` -- first derivatives of the local coordinate
  functions s(U) = (lam_i + lam_{i+1})/2 - lambda0 and
  p(U) = (lam_i - lam_{i+1})^2/4 and of the local basis columns R0(U),
  R1(U) satisfying A R = B R N with N = [[lambda0 + s, 1], [p, lambda0 + s]];
* :func:`taylor_R` -- first-order Taylor evaluation of R0, R1 near the
  coincidence point, used to seed continuation direction tests;
* :func:`asymptotic_state` -- the quadratic asymptotic continuation
  U(lambda) = U0 +/- ((lambda - lambda0)^2 / (grad p . r0)) r0 of a
  rarefaction curve ending at a coincidence point.

The derivative formulas are exact for state-dependent accumulation B(U);
in particular grad s carries the term -0.5 * l0.(dB_k r0) which vanishes
only when B is constant.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.linalg import qz, svd

from .errors import (
    ComplexPair,
    FormulaInvalid,
    FullGeometricMultiplicity,
    NotDoubleEigenvalue,
    PseudoinverseUndefined,
    RankDeficient,
    SingularPencil,
    SingularZ,
    TangentCoincidence,
)

# two eigenvalues closer than this (relative) are treated as coincident
COINCIDENCE_RTOL = 1e-7


@dataclass
class EigenPair:
    """One finite real eigenvalue with its eigenvectors.

    ``r`` has unit norm; ``l`` is scaled so l.(B r) = 1 when that product is
    not negligible (it degenerates to zero exactly at points of coincidence
    with a defective pencil, where ``l`` falls back to unit norm).
    ``family`` is the 1-based index in ascending eigenvalue order.
    """

    lam: float
    r: np.ndarray
    l: np.ndarray
    family: int


class PencilEigens(NamedTuple):
    pairs: list
    infinite_count: int


def pencil_at(model, U):
    """Jacobian pair (A, B) of the model at a state."""
    return model.jacobian_F(U), model.jacobian_G(U)


def _qz_values(A, B):
    """Complex generalized Schur values (alpha, beta) of the pencil."""
    AA, BB, _, _ = qz(A, B, output="complex")
    return np.diag(AA), np.diag(BB)


def _finite_eigenvalues(A, B):
    """Complex finite eigenvalues and the infinite count, with singularity check."""
    alpha, beta = _qz_values(A, B)
    atol = 1e-12 * max(1.0, float(np.linalg.norm(A)))
    btol = 1e-12 * max(1.0, float(np.linalg.norm(B)))
    if np.any((np.abs(alpha) <= atol) & (np.abs(beta) <= btol)):
        raise SingularPencil("det(A - lambda*B) vanishes identically to "
                             "working precision")
    finite = np.abs(beta) > btol
    lams = alpha[finite] / beta[finite]
    return lams, int(np.count_nonzero(~finite))


def _fix_sign(v):
    """Deterministic sign: the largest-magnitude component is positive."""
    idx = int(np.argmax(np.abs(v)))
    return -v if v[idx] < 0 else v


def _null_vectors(M):
    """Unit right/left vectors of the smallest singular value, plus sigmas."""
    Um, sm, Vh = svd(M)
    return _fix_sign(Vh[-1].copy()), _fix_sign(Um[:, -1].copy()), sm


def solve_pencil(A, B):
    """All finite real eigenpairs of A r = lambda B r, ascending.

    Returns ``PencilEigens(pairs, infinite_count)``.  Complex pairs whose
    imaginary part is below the coincidence tolerance (rounding noise at a
    defective double eigenvalue splits as the square root of the
    perturbation) are collapsed onto the real axis; genuinely complex pairs
    raise :class:`ComplexPair` since elliptic states carry no real
    characteristic speeds.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    lams, n_inf = _finite_eigenvalues(A, B)
    real_lams = []
    for lam in lams:
        if abs(lam.imag) > COINCIDENCE_RTOL * (1.0 + abs(lam.real)):
            raise ComplexPair(f"complex eigenvalue pair near {lam:.6g}: "
                              "state is elliptic for this pair")
        real_lams.append(lam.real)
    real_lams.sort()
    pairs = []
    normB = float(np.linalg.norm(B))
    for i, lam in enumerate(real_lams):
        r, l, _ = _null_vectors(A - lam * B)
        d = float(l @ (B @ r))
        if abs(d) > 1e-10 * (1.0 + normB):
            l = l / d
        pairs.append(EigenPair(lam=float(lam), r=r, l=l, family=i + 1))
    return PencilEigens(pairs, n_inf)


def _active_pair(lams, family, n):
    """Pick the adjacent eigenvalue pair (family, family+1), real-part order."""
    lams = np.sort_complex(lams)
    if family is None:
        if len(lams) != 2:
            raise PseudoinverseUndefined(
                f"{len(lams)} finite eigenvalues: specify the family whose "
                "gap is wanted")
        return lams[0], lams[1]
    if family < 1 or family + 1 > len(lams):
        raise PseudoinverseUndefined(
            f"family {family} has no adjacent partner among {len(lams)} "
            "finite eigenvalues")
    return lams[family - 1], lams[family]


def discriminant(A, B, family=None):
    """Squared gap D = (lam_i - lam_{i+1})^2 of the active eigenvalue pair.

    D > 0 on strictly hyperbolic states, D = 0 on the coincidence locus and
    D < 0 where the pair is complex, so D is a smooth sign-carrying monitor
    for coincidence detection.  For a 2x2 pencil with invertible B the
    closed form (tr M)^2 - 4 det M with M = B^{-1}A is used; otherwise the
    pencil is reduced to its finite part (two finite eigenvalues, or the
    adjacent pair selected by ``family``).
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape[0] == 2:
        try:
            if np.linalg.cond(B) < 1e12:
                M = np.linalg.solve(B, A)
                return float(np.trace(M) ** 2 - 4.0 * np.linalg.det(M))
        except np.linalg.LinAlgError:
            pass
    lams, _ = _finite_eigenvalues(A, B)
    if len(lams) < 2:
        raise PseudoinverseUndefined("fewer than two finite eigenvalues: "
                                     "no eigenvalue gap to measure")
    la, lb = _active_pair(lams, family, A.shape[0])
    return float(((la - lb) ** 2).real)


@dataclass
class SheetCoordinates:
    """Local coordinates of the two-sheeted eigenvalue surface near a
    coincidence value lambda0: s = mean gap shift, p = quarter squared gap,
    xi = sqrt(p) (NaN on elliptic states), eta = s."""

    s: float
    p: float
    xi: float
    eta: float


def sheet_coordinates(model, U, lambda0, family=None):
    """Evaluate (s, p) of the active pair at U relative to lambda0.

    Without an explicit ``family`` the two finite eigenvalues closest to
    lambda0 form the pair (they are the two sheets of the local surface).
    """
    A, B = pencil_at(model, U)
    lams, _ = _finite_eigenvalues(A, B)
    if len(lams) < 2:
        raise PseudoinverseUndefined("fewer than two finite eigenvalues")
    if family is None:
        order = np.argsort(np.abs(lams - lambda0))
        la, lb = sorted(lams[order[:2]], key=lambda z: z.real)
    else:
        la, lb = _active_pair(lams, family, model.dimension)
    s = float(((la + lb) / 2.0).real) - lambda0
    p = float((((la - lb) ** 2) / 4.0).real)
    xi = float(np.sqrt(p)) if p >= 0.0 else float("nan")
    return SheetCoordinates(s=s, p=p, xi=xi, eta=s)


def right_pseudoinverse(B):
    """Right Moore-Penrose pseudoinverse B+ = B^T (B B^T)^{-1}."""
    B = np.asarray(B, dtype=float)
    BBt = B @ B.T
    if np.linalg.cond(BBt) > 1e12:
        raise RankDeficient("B B^T numerically singular: B lacks full row rank")
    Bp = np.linalg.solve(BBt, B).T
    resid = np.linalg.norm(B @ Bp - np.eye(B.shape[0]))
    if resid > 1e-10:
        raise RankDeficient(f"pseudoinverse residual {resid:.3e} exceeds 1e-10")
    return Bp


@dataclass
class JordanChainData:
    """Generalized Jordan chain at a double eigenvalue, plus (after
    :func:`versal_derivatives`) the first derivatives of the local
    coordinates and basis.

    Invariants: A0 r0 = lambda0 B0 r0; A0 r1 = lambda0 B0 r1 + B0 r0;
    l0.(B0 r0) = 0, l0.(B0 r1) = 1, l1.(B0 r0) = 1, l1.(B0 r1) = 0.
    The gauge is pinned by the minimal-norm solutions: r1 is Euclidean
    orthogonal to r0 and l1 carries the whole l1.(B0 r1) = 0 adjustment.
    """

    lambda0: float
    r0: np.ndarray
    r1: np.ndarray
    l0: np.ndarray
    l1: np.ndarray
    grad_p: np.ndarray = None
    grad_s: np.ndarray = None
    dR0: np.ndarray = None
    dR1: np.ndarray = None
    Z: np.ndarray = None


def jordan_chain(A0, B0, lambda0, double_tol=1e-4, geometric_tol=1e-8):
    """Generalized Jordan chain of the pencil at the double eigenvalue lambda0.

    ``double_tol`` bounds the admissible splitting |lam_i - lam_{i+1}|
    relative to 1 + |lambda0|; a coincidence point located by driving the
    discriminant below 1e-9 leaves a splitting of order 3e-5, so the default
    accommodates refined locus points while rejecting genuinely separated
    eigenvalues.
    """
    A0 = np.asarray(A0, dtype=float)
    B0 = np.asarray(B0, dtype=float)
    lambda0 = float(lambda0)
    lams, _ = _finite_eigenvalues(A0, B0)
    near = np.abs(lams - lambda0) <= double_tol * (1.0 + abs(lambda0))
    count = int(np.count_nonzero(near))
    if count != 2:
        raise NotDoubleEigenvalue(
            f"{count} eigenvalue(s) within {double_tol:.1e} of lambda0 = "
            f"{lambda0:.6g} (need exactly 2)")

    M = A0 - lambda0 * B0
    scale = float(np.linalg.norm(A0) + abs(lambda0) * np.linalg.norm(B0))
    Um, sm, Vh = svd(M)
    r0 = _fix_sign(Vh[-1].copy())
    l0u = _fix_sign(Um[:, -1].copy())
    if sm[-2] <= geometric_tol * max(scale, 1.0):
        raise FullGeometricMultiplicity(
            "two independent eigenvectors at the double eigenvalue: "
            "generalized chain undefined")

    # Minimal-norm particular solutions with the null direction deflated
    # exactly: at a numerically refined locus point the smallest singular
    # value of M is only near zero, and a plain least-squares solve would
    # divide by it, polluting r1 with a large r0 component.  M has a
    # one-dimensional kernel by construction, so invert on the complement.
    inv_s = 1.0 / sm[:-1]
    r1 = Vh[:-1].T @ (inv_s * (Um[:, :-1].T @ (B0 @ r0)))
    c2 = float(l0u @ (B0 @ r1))
    if abs(c2) <= 1e-10 * max(scale, 1.0):
        raise NotDoubleEigenvalue(
            "chain normalization degenerate: l0.(B0 r1) vanishes "
            "(structure is not a simple 2-chain)")
    l0 = l0u / c2
    l1 = Um[:, :-1] @ (inv_s * (Vh[:-1] @ (B0.T @ l0)))
    # remove the l0-component so that l1.(B0 r1) = 0
    l1 = l1 - float(l1 @ (B0 @ r1)) * l0
    return JordanChainData(lambda0=lambda0, r0=r0, r1=r1, l0=l0, l1=l1)


def chain_residuals(chain, A0, B0):
    """Max norm of the chain equations and normalization defects (for tests)."""
    lam, r0, r1, l0, l1 = (chain.lambda0, chain.r0, chain.r1, chain.l0,
                           chain.l1)
    M = A0 - lam * B0
    res = [
        np.linalg.norm(M @ r0),
        np.linalg.norm(M @ r1 - B0 @ r0),
        np.linalg.norm(l0 @ M),
        np.linalg.norm(l1 @ M - l0 @ B0),
        abs(l0 @ (B0 @ r0)),
        abs(l0 @ (B0 @ r1) - 1.0),
        abs(l1 @ (B0 @ r0) - 1.0),
        abs(l1 @ (B0 @ r1)),
    ]
    return float(max(res))


def _partials(hess):
    """Slices dM/dU_k from a Hessian with layout H[i, j, k] = d^2f_i/dU_j dU_k."""
    return [hess[:, :, k] for k in range(hess.shape[2])]


def _orient_chain(model, U0, chain, grad_p):
    """Decide whether to flip the whole chain (r0, r1, l0, l1) -> negated.

    Primary rule: point r1 toward the hyperbolic side, grad_p . r1 > 0.
    When grad_p is (numerically) tangent to nothing, i.e. the coincidence is
    of crossing type with grad_p ~ 0, probe the lower eigenvalue sheet a
    small step along r1 and require it to increase.  If neither signal is
    conclusive the chain is left as constructed (deterministically).
    """
    r1 = chain.r1
    gp_r1 = float(grad_p @ r1)
    gp_scale = float(np.linalg.norm(grad_p)) * float(np.linalg.norm(r1))
    if abs(gp_r1) > 1e-8 * (gp_scale + 1e-30) and gp_scale > 1e-10:
        return gp_r1 < 0.0
    h = 1e-4 * (1.0 + float(np.linalg.norm(U0)))
    try:
        A, B = pencil_at(model, U0 + h * r1)
        lams, _ = _finite_eigenvalues(A, B)
    except Exception:
        return False
    if len(lams) < 2:
        return False
    order = np.argsort(np.abs(lams - chain.lambda0))
    pair = lams[order[:2]]
    if np.abs(pair.imag).max() > COINCIDENCE_RTOL * (1.0 + abs(chain.lambda0)):
        return False  # probe landed elliptic: no orientation signal
    lam_low = float(np.min(pair.real))
    if abs(lam_low - chain.lambda0) <= 1e-6 * h * (1.0 + abs(chain.lambda0)):
        return False
    return lam_low < chain.lambda0


def versal_derivatives(model, U0, chain):
    """Complete a Jordan chain with grad_p, grad_s, dR0, dR1, Z at U0.

    With dA_k = d(jacobian_F)/dU_k and dB_k = d(jacobian_G)/dU_k taken from
    the model Hessians,

        dp/dU_k = l0.(dA_k r0) - lambda0 l0.(dB_k r0)
        ds/dU_k = (l0.(dA_k r1) + l1.(dA_k r0))/2
                  - (lambda0/2)(l0.(dB_k r1) + l1.(dB_k r0))
                  - (1/2) l0.(dB_k r0)

    and the basis derivatives follow by solving with the regularized matrix
    Z = A0 - lambda0 B0 + (B0 r1)(l1 B0):

        dR0_k = ds_k r1 + dp_k r0 + Z^{-1}(lambda0 dB_k r0 - dA_k r0)
        dR1_k = ds_k r0 + Z^{-1}(dB_k r0 + B0 dR0_k
                                 + lambda0 dB_k r1 - dA_k r1)

    (gauge: l1.(B0 dR0_k) = l1.(B0 dR1_k) = 0).  The orientation of the
    whole chain is fixed here, where eigenvalue slopes are available.
    """
    U0 = np.asarray(U0, dtype=float)
    A0, B0 = pencil_at(model, U0)
    dA = _partials(model.hessian_F(U0))
    dB = _partials(model.hessian_G(U0))
    lam = chain.lambda0
    r0, r1, l0, l1 = chain.r0, chain.r1, chain.l0, chain.l1

    n = model.dimension
    grad_p = np.array([float(l0 @ (dA[k] @ r0)) - lam * float(l0 @ (dB[k] @ r0))
                       for k in range(n)])

    if _orient_chain(model, U0, chain, grad_p):
        r0, r1, l0, l1 = -r0, -r1, -l0, -l1
        chain = replace(chain, r0=r0, r1=r1, l0=l0, l1=l1)

    grad_s = np.empty(n)
    for k in range(n):
        grad_s[k] = (0.5 * (float(l0 @ (dA[k] @ r1)) + float(l1 @ (dA[k] @ r0)))
                     - 0.5 * lam * (float(l0 @ (dB[k] @ r1))
                                    + float(l1 @ (dB[k] @ r0)))
                     - 0.5 * float(l0 @ (dB[k] @ r0)))

    Z = A0 - lam * B0 + np.outer(B0 @ r1, B0.T @ l1)
    if np.linalg.cond(Z) > 1e12:
        raise SingularZ("regularized chain matrix Z numerically singular")

    dR0 = np.empty((n, n))
    dR1 = np.empty((n, n))
    for k in range(n):
        dR0[:, k] = (grad_s[k] * r1 + grad_p[k] * r0
                     + np.linalg.solve(Z, lam * (dB[k] @ r0) - dA[k] @ r0))
        dR1[:, k] = (grad_s[k] * r0
                     + np.linalg.solve(Z, dB[k] @ r0 + B0 @ dR0[:, k]
                                       + lam * (dB[k] @ r1) - dA[k] @ r1))
    return replace(chain, grad_p=grad_p, grad_s=grad_s, dR0=dR0, dR1=dR1, Z=Z)


def taylor_R(chain, U0, U):
    """First-order evaluation of the local basis columns R0, R1 at U.

    Signs are flipped if needed so that R0.r0 > 0 and R1.r0 > 0, the
    orientation convention used by the continuation direction tests.
    """
    if chain.dR0 is None or chain.dR1 is None:
        raise ValueError("chain not completed: call versal_derivatives first")
    dU = np.asarray(U, dtype=float) - np.asarray(U0, dtype=float)
    R0 = chain.r0 + chain.dR0 @ dU
    R1 = chain.r1 + chain.dR1 @ dU
    if float(R0 @ chain.r0) < 0.0:
        R0 = -R0
    if float(R1 @ chain.r0) < 0.0:
        R1 = -R1
    return R0, R1


def asymptotic_state(chain, U0, side, dlambda):
    """Quadratic asymptotic continuation of a rarefaction curve at U0.

    Returns U0 + sgn * ((dlambda^2) / (grad_p . r0)) r0 where sgn = +1 puts
    the state on the side with p > 0 (``side`` = "omega2", both sheets real)
    and sgn = -1 on the p < 0 side ("omega1").  To leading order
    p(result) = +/- dlambda^2, so the family i+1 eigenvalue at the omega2
    state is lambda0 + dlambda + O(dlambda^2) for dlambda > 0 (family i for
    dlambda < 0).
    """
    if chain.grad_p is None:
        raise ValueError("chain not completed: call versal_derivatives first")
    key = str(side).lower()
    if key not in ("omega1", "omega2"):
        raise ValueError(f"side must be 'omega1' or 'omega2', got {side!r}")
    denom = float(chain.grad_p @ chain.r0)
    if abs(denom) <= 1e-8 * (1.0 + float(np.linalg.norm(chain.grad_p))):
        raise TangentCoincidence(
            "grad_p . r0 vanishes: quadratic asymptotics invalid (tangent "
            "or crossing-type coincidence)")
    sgn = 1.0 if key == "omega2" else -1.0
    U0 = np.asarray(U0, dtype=float)
    return U0 + sgn * (float(dlambda) ** 2 / denom) * chain.r0


def eigenvalue_gradient(model, U, pair):
    """Gradient of a simple eigenvalue with respect to the state.

    For A r = lambda B r with left vector l, the perturbation formula gives

        d lambda / d U_k = [l.(dA_k r) - lambda l.(dB_k r)] / (l.(B r)),

    with dA_k, dB_k the slices of the flux/accumulation Hessians.  The
    denominator vanishes on a coincidence locus where the eigenvalue ceases
    to be differentiable; FormulaInvalid is raised there.
    """
    U = np.asarray(U, dtype=float)
    B = model.jacobian_G(U)
    denom = float(pair.l @ (B @ pair.r))
    if abs(denom) <= 1e-12 * (1.0 + float(np.linalg.norm(B))):
        raise FormulaInvalid(
            "l.(B r) vanishes: eigenvalue not differentiable (coincidence)")
    HF = model.hessian_F(U)
    HG = model.hessian_G(U)
    num = (np.einsum("i,ijk,j->k", pair.l, HF, pair.r)
           - pair.lam * np.einsum("i,ijk,j->k", pair.l, HG, pair.r))
    return num / denom
