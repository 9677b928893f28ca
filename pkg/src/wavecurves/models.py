"""Conservation-law model descriptors and the built-in model family.

A model packages the accumulation G and flux F of a system of conservation
laws

    d/dt G(U) + d/dx F(U) = 0,        U in an open domain of R^n,

together with their first and second derivatives and a domain predicate.
Everything downstream (eigenanalysis, rarefaction/shock/composite curves,
Riemann solutions) consumes only this interface, so adding a new system means
writing one builder function here.

Conventions used throughout the package:

* states are plain 1-D numpy arrays of length ``dimension``;
* ``jacobian_F(U)[i, j] = dF_i/dU_j`` (and likewise for G);
* ``hessian_F(U)[i, j, k] = d^2 F_i / (dU_j dU_k)``, symmetric in (j, k).

Built-in models:

* :func:`corey_model` -- 2-component quadratic fractional-flow system with an
  isolated point of coinciding speeds interior to the saturation triangle;
* :func:`buckley_leverett_model` -- scalar S-shaped fractional flow extended
  by a passive linear component, used as the classical 1-D reference;
* :func:`icdow_model` -- 3-component two-phase flow with a tracer-dependent
  density and total-velocity unknown; its accumulation Jacobian has an
  identically zero third column, so the eigenproblem is a genuine matrix
  pencil with one infinite eigenvalue;
* :func:`synthetic_pencil_model` -- quadratic flux with prescribed Jacobians
  at the origin, the workhorse for constructing eigenstructure test fixtures;
* :func:`fold_pencil_model`, :func:`crossing_pencil_model` -- two ready-made
  synthetic systems with straight coincidence lines of the two geometric
  types (sign-changing discriminant next to an elliptic strip, and a
  discriminant that touches zero quadratically with both sides hyperbolic).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class PlanarBoundary:
    """Hyperplane normal . x = offset used as an integration stop."""

    normal: np.ndarray
    offset: float
    name: str = ""

    def value(self, U):
        return float(np.dot(self.normal, U) - self.offset)


class ModelDescriptor:
    """Immutable bundle of model callables; see the module docstring."""

    def __init__(self, name, dimension, accumulation, flux, jacobian_G,
                 jacobian_F, hessian_G, hessian_F, domain, boundary_planes,
                 box, parameters=None):
        self.name = name
        self.dimension = int(dimension)
        self.accumulation = accumulation
        self.flux = flux
        self.jacobian_G = jacobian_G
        self.jacobian_F = jacobian_F
        self.hessian_G = hessian_G
        self.hessian_F = hessian_F
        self.domain = domain
        self.boundary_planes = tuple(boundary_planes)
        lo, hi = box
        self.box = (np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
        self.diameter = float(np.linalg.norm(self.box[1] - self.box[0]))
        self.parameters = dict(parameters or {})

    def __repr__(self):
        return f"ModelDescriptor({self.name!r}, n={self.dimension})"

    def sample_states(self, count, rng, margin=0.02):
        """Draw ``count`` states uniformly from the box, keeping interior ones.

        ``margin`` shrinks the box slightly so samples stay clear of the
        boundary; rejection keeps only states passing the domain predicate.
        """
        lo, hi = self.box
        span = hi - lo
        lo_m, hi_m = lo + margin * span, hi - margin * span
        out = []
        attempts = 0
        while len(out) < count:
            U = lo_m + (hi_m - lo_m) * rng.random(self.dimension)
            attempts += 1
            if attempts > 1000 * count:
                raise RuntimeError(f"could not sample {count} interior states "
                                   f"of model {self.name!r}")
            if self.domain(U):
                out.append(U)
        return out


# ---------------------------------------------------------------------------
# finite-difference fallbacks


def fd_jacobian(f, U, h=None):
    """Central-difference Jacobian of a vector function."""
    U = np.asarray(U, dtype=float)
    n = U.size
    if h is None:
        h = np.sqrt(_EPS) * max(1.0, float(np.linalg.norm(U)))
    cols = []
    for k in range(n):
        dU = np.zeros(n)
        dU[k] = h
        cols.append((np.asarray(f(U + dU)) - np.asarray(f(U - dU))) / (2 * h))
    return np.column_stack(cols)


def fd_hessian_from_jacobian(jac, U, h=None):
    """Central differences of a Jacobian; returns H[i, j, k] = dJ_ij/dU_k."""
    U = np.asarray(U, dtype=float)
    n = U.size
    if h is None:
        h = np.cbrt(_EPS) * max(1.0, float(np.linalg.norm(U)))
    H = np.empty((n, n, n))
    for k in range(n):
        dU = np.zeros(n)
        dU[k] = h
        H[:, :, k] = (np.asarray(jac(U + dU)) - np.asarray(jac(U - dU))) / (2 * h)
    # enforce the (j, k) symmetry the convention promises
    return 0.5 * (H + H.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# quadratic Corey model


@dataclass(frozen=True)
class CoreyQuadParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) <= 0:
            raise ValueError("Corey parameters must be positive")


def corey_model(params=CoreyQuadParams()):
    """Two-phase quadratic fractional-flow model on the saturation triangle.

    F(u, v) = (alpha*u^2, beta*v^2) / D with D = alpha*u^2 + beta*v^2
    + gamma*(1-u-v)^2 and identity accumulation.  All first and second
    derivatives are analytic.  The two characteristic speeds coincide at a
    single interior point u* = (1/alpha)/T, v* = (1/beta)/T with
    T = 1/alpha + 1/beta + 1/gamma, where the flux Jacobian degenerates to a
    multiple of the identity.
    """
    a, b, g = params.alpha, params.beta, params.gamma

    def _parts(U):
        u, v = float(U[0]), float(U[1])
        w = 1.0 - u - v
        N = np.array([a * u * u, b * v * v])
        D = a * u * u + b * v * v + g * w * w
        gradN = np.array([[2 * a * u, 0.0], [0.0, 2 * b * v]])
        gradD = np.array([2 * a * u - 2 * g * w, 2 * b * v - 2 * g * w])
        return N, D, gradN, gradD

    hessN = np.zeros((2, 2, 2))
    hessN[0, 0, 0] = 2 * a
    hessN[1, 1, 1] = 2 * b
    hessD = np.array([[2 * a + 2 * g, 2 * g], [2 * g, 2 * b + 2 * g]])

    def flux(U):
        N, D, _, _ = _parts(U)
        if D <= 0.0:
            raise ValueError("Corey flux undefined: D <= 0 (state far outside "
                             "the saturation triangle)")
        return N / D

    def jacobian_F(U):
        N, D, gradN, gradD = _parts(U)
        return gradN / D - np.outer(N, gradD) / (D * D)

    def hessian_F(U):
        N, D, gradN, gradD = _parts(U)
        H = np.empty((2, 2, 2))
        for i in range(2):
            H[i] = (hessN[i] / D
                    - (np.outer(gradN[i], gradD) + np.outer(gradD, gradN[i])
                       + N[i] * hessD) / (D * D)
                    + 2 * N[i] * np.outer(gradD, gradD) / (D ** 3))
        return H

    eye = np.eye(2)
    zero3 = np.zeros((2, 2, 2))

    def domain(U):
        u, v = U[0], U[1]
        return bool(u > 0.0 and v > 0.0 and u + v < 1.0)

    planes = (
        PlanarBoundary(np.array([1.0, 0.0]), 0.0, "u=0"),
        PlanarBoundary(np.array([0.0, 1.0]), 0.0, "v=0"),
        PlanarBoundary(np.array([1.0, 1.0]), 1.0, "u+v=1"),
    )
    return ModelDescriptor(
        name="corey",
        dimension=2,
        accumulation=lambda U: np.array(U, dtype=float),
        flux=flux,
        jacobian_G=lambda U: eye,
        jacobian_F=jacobian_F,
        hessian_G=lambda U: zero3,
        hessian_F=hessian_F,
        domain=domain,
        boundary_planes=planes,
        box=(np.zeros(2), np.ones(2)),
        parameters={"alpha": a, "beta": b, "gamma": g},
    )


def corey_umbilic_point(params=CoreyQuadParams()):
    """Interior state where both Corey speeds coincide (flux Jacobian = c*I)."""
    a, b, g = params.alpha, params.beta, params.gamma
    T = 1.0 / a + 1.0 / b + 1.0 / g
    return np.array([1.0 / (a * T), 1.0 / (b * T)])


# ---------------------------------------------------------------------------
# classical S-shaped fractional flow with a passive component


def buckley_leverett_model(mobility_ratio=1.0, passive_speed=5.0):
    """S-shaped fractional flow f(u) = u^2/(u^2 + M(1-u)^2) plus a passive
    linearly transported component: F = (f(u), passive_speed * v), G = U.

    The passive speed is chosen above max f' so the model is strictly
    hyperbolic on the whole strip (0,1) x (-1,1) and family 1 is the
    fractional-flow family everywhere.
    """
    M = float(mobility_ratio)
    aspd = float(passive_speed)

    def f_parts(u):
        un = u * u
        dn = un + M * (1.0 - u) ** 2
        f = un / dn
        ddn = 2 * u - 2 * M * (1.0 - u)
        df = (2 * u * dn - un * ddn) / (dn * dn)
        d2dn = 2 + 2 * M
        d2f = ((2 * dn + 2 * u * ddn - 2 * u * ddn - un * d2dn) / (dn * dn)
               - 2 * ddn * (2 * u * dn - un * ddn) / (dn ** 3))
        return f, df, d2f

    def flux(U):
        f, _, _ = f_parts(float(U[0]))
        return np.array([f, aspd * float(U[1])])

    def jacobian_F(U):
        _, df, _ = f_parts(float(U[0]))
        return np.array([[df, 0.0], [0.0, aspd]])

    def hessian_F(U):
        _, _, d2f = f_parts(float(U[0]))
        H = np.zeros((2, 2, 2))
        H[0, 0, 0] = d2f
        return H

    eye = np.eye(2)
    zero3 = np.zeros((2, 2, 2))
    planes = (
        PlanarBoundary(np.array([1.0, 0.0]), 0.0, "u=0"),
        PlanarBoundary(np.array([1.0, 0.0]), 1.0, "u=1"),
    )
    return ModelDescriptor(
        name="buckley",
        dimension=2,
        accumulation=lambda U: np.array(U, dtype=float),
        flux=flux,
        jacobian_G=lambda U: eye,
        jacobian_F=jacobian_F,
        hessian_G=lambda U: zero3,
        hessian_F=hessian_F,
        domain=lambda U: bool(0.0 < U[0] < 1.0 and -1.0 < U[1] < 1.0),
        boundary_planes=planes,
        box=(np.array([0.0, -1.0]), np.array([1.0, 1.0])),
        parameters={"M": M, "passive_speed": aspd},
    )


# ---------------------------------------------------------------------------
# three-component two-phase flow with tracer-dependent densities


@dataclass(frozen=True)
class IcdowParams:
    """Parameters of the 3-component model in U = (s_w, y, u).

    G = porosity * (s_w*rho1, s_w*rho2 + s_o*rho3, s_o*rho4) and
    F = u * (f_w*rho1, f_w*rho2 + f_o*rho3, f_o*rho4) with s_o = 1 - s_w and
    f_o = 1 - f_w.  The densities rho_i depend on the tracer variable y only;
    the water fractional flow f_w depends on s_w only.  Derivative callables
    may be omitted, in which case central differences of the value callables
    are used.
    """

    porosity: float = 1.0
    rho_coeffs: tuple = (0.1, 0.15, 0.2, 0.25)
    rho: object = None
    drho: object = None
    d2rho: object = None
    fw: object = None
    dfw: object = None
    d2fw: object = None
    y_range: tuple = (0.0, 1.0)
    u_range: tuple = (0.05, 3.0)


def icdow_model(params=IcdowParams()):
    """Build the 3-component model; see :class:`IcdowParams`.

    The accumulation G does not depend on the total velocity u, so
    jacobian_G has an identically zero third column and the characteristic
    problem is a pencil with exactly two finite speeds.
    """
    phi = float(params.porosity)
    c = np.asarray(params.rho_coeffs, dtype=float)

    rho = params.rho or (lambda y: 1.0 + c * y)
    if params.rho is None:
        drho = lambda y: c.copy()
        d2rho = lambda y: np.zeros(4)
    else:
        drho = params.drho or (lambda y, h=1e-6: (np.asarray(rho(y + h))
                                                  - np.asarray(rho(y - h))) / (2 * h))
        d2rho = params.d2rho or (lambda y, h=1e-4: (np.asarray(rho(y + h))
                                                    - 2 * np.asarray(rho(y))
                                                    + np.asarray(rho(y - h))) / (h * h))

    if params.fw is None:
        def fw(s):
            return s * s / (s * s + (1.0 - s) ** 2)

        def dfw(s):
            d = s * s + (1.0 - s) ** 2
            return 2.0 * s * (1.0 - s) / (d * d)

        def d2fw(s):
            d = s * s + (1.0 - s) ** 2
            dd = 4.0 * s - 2.0
            return (2.0 - 4.0 * s) / (d * d) - 2.0 * (2.0 * s - 2.0 * s * s) * dd / (d ** 3)
    else:
        fw = params.fw
        dfw = params.dfw or (lambda s, h=1e-6: (fw(s + h) - fw(s - h)) / (2 * h))
        d2fw = params.d2fw or (lambda s, h=1e-4: (fw(s + h) - 2 * fw(s) + fw(s - h)) / (h * h))

    def accumulation(U):
        s, y = float(U[0]), float(U[1])
        r = np.asarray(rho(y), dtype=float)
        return phi * np.array([s * r[0],
                               s * r[1] + (1.0 - s) * r[2],
                               (1.0 - s) * r[3]])

    def flux(U):
        s, y, u = float(U[0]), float(U[1]), float(U[2])
        r = np.asarray(rho(y), dtype=float)
        f = fw(s)
        return u * np.array([f * r[0],
                             f * r[1] + (1.0 - f) * r[2],
                             (1.0 - f) * r[3]])

    def jacobian_G(U):
        s, y = float(U[0]), float(U[1])
        r = np.asarray(rho(y), dtype=float)
        dr = np.asarray(drho(y), dtype=float)
        col_s = phi * np.array([r[0], r[1] - r[2], -r[3]])
        col_y = phi * np.array([s * dr[0], s * dr[1] + (1.0 - s) * dr[2],
                                (1.0 - s) * dr[3]])
        return np.column_stack([col_s, col_y, np.zeros(3)])

    def jacobian_F(U):
        s, y, u = float(U[0]), float(U[1]), float(U[2])
        r = np.asarray(rho(y), dtype=float)
        dr = np.asarray(drho(y), dtype=float)
        f, fp = fw(s), dfw(s)
        col_s = u * fp * np.array([r[0], r[1] - r[2], -r[3]])
        col_y = u * np.array([f * dr[0], f * dr[1] + (1.0 - f) * dr[2],
                              (1.0 - f) * dr[3]])
        col_u = np.array([f * r[0], f * r[1] + (1.0 - f) * r[2],
                          (1.0 - f) * r[3]])
        return np.column_stack([col_s, col_y, col_u])

    def hessian_G(U):
        s, y = float(U[0]), float(U[1])
        dr = np.asarray(drho(y), dtype=float)
        d2r = np.asarray(d2rho(y), dtype=float)
        H = np.zeros((3, 3, 3))
        # d2G/ds dy
        gsy = phi * np.array([dr[0], dr[1] - dr[2], -dr[3]])
        H[:, 0, 1] = H[:, 1, 0] = gsy
        # d2G/dy2
        H[:, 1, 1] = phi * np.array([s * d2r[0], s * d2r[1] + (1.0 - s) * d2r[2],
                                     (1.0 - s) * d2r[3]])
        return H

    def hessian_F(U):
        s, y, u = float(U[0]), float(U[1]), float(U[2])
        r = np.asarray(rho(y), dtype=float)
        dr = np.asarray(drho(y), dtype=float)
        d2r = np.asarray(d2rho(y), dtype=float)
        f, fp, fpp = fw(s), dfw(s), d2fw(s)
        H = np.zeros((3, 3, 3))
        vec_s = np.array([r[0], r[1] - r[2], -r[3]])       # d/ds of the bracket
        dvec_s = np.array([dr[0], dr[1] - dr[2], -dr[3]])
        H[:, 0, 0] = u * fpp * vec_s
        H[:, 0, 1] = H[:, 1, 0] = u * fp * dvec_s
        H[:, 0, 2] = H[:, 2, 0] = fp * vec_s
        H[:, 1, 1] = u * np.array([f * d2r[0], f * d2r[1] + (1.0 - f) * d2r[2],
                                   (1.0 - f) * d2r[3]])
        H[:, 1, 2] = H[:, 2, 1] = np.array([f * dr[0],
                                            f * dr[1] + (1.0 - f) * dr[2],
                                            (1.0 - f) * dr[3]])
        return H

    y_lo, y_hi = params.y_range
    u_lo, u_hi = params.u_range
    planes = (
        PlanarBoundary(np.array([1.0, 0.0, 0.0]), 0.0, "s=0"),
        PlanarBoundary(np.array([1.0, 0.0, 0.0]), 1.0, "s=1"),
        PlanarBoundary(np.array([0.0, 1.0, 0.0]), y_lo, "y=lo"),
        PlanarBoundary(np.array([0.0, 1.0, 0.0]), y_hi, "y=hi"),
    )

    def domain(U):
        s, y, u = U[0], U[1], U[2]
        return bool(0.0 < s < 1.0 and y_lo < y < y_hi and u_lo < u < u_hi)

    return ModelDescriptor(
        name="icdow",
        dimension=3,
        accumulation=accumulation,
        flux=flux,
        jacobian_G=jacobian_G,
        jacobian_F=jacobian_F,
        hessian_G=hessian_G,
        hessian_F=hessian_F,
        domain=domain,
        boundary_planes=planes,
        box=(np.array([0.0, y_lo, u_lo]), np.array([1.0, y_hi, u_hi])),
        parameters={"porosity": phi, "rho_coeffs": tuple(c)},
    )


# ---------------------------------------------------------------------------
# synthetic pencils


def synthetic_pencil_model(A0, B0, perturbation=None, perturbation_G=None,
                           radius=4.0, name="synthetic"):
    """Quadratic-flux model with prescribed Jacobians at the origin.

    flux(U) = A0 @ U + 0.5 * U . P . U and accumulation(U) = B0 @ U
    + 0.5 * U . Q . U, so jacobian_F(0) = A0 and jacobian_G(0) = B0 exactly,
    and the Jacobians vary linearly with U through the (symmetrized)
    perturbation tensors P and Q.  Used to build eigenstructure fixtures with
    known coincidence loci.
    """
    A0 = np.asarray(A0, dtype=float)
    B0 = np.asarray(B0, dtype=float)
    if A0.shape != B0.shape or A0.ndim != 2 or A0.shape[0] != A0.shape[1]:
        raise ValueError("A0 and B0 must be square matrices of equal size")
    n = A0.shape[0]

    def _sym(T):
        if T is None:
            return np.zeros((n, n, n))
        T = np.asarray(T, dtype=float)
        if T.shape != (n, n, n):
            raise ValueError(f"perturbation tensor must have shape {(n, n, n)}")
        return 0.5 * (T + T.transpose(0, 2, 1))

    P = _sym(perturbation)
    Q = _sym(perturbation_G)

    def make_pair(M0, T):
        def value(U):
            U = np.asarray(U, dtype=float)
            return M0 @ U + 0.5 * np.einsum("ijk,j,k->i", T, U, U)

        def jac(U):
            U = np.asarray(U, dtype=float)
            return M0 + np.einsum("ijk,k->ij", T, U)

        return value, jac

    flux, jacobian_F = make_pair(A0, P)
    accumulation, jacobian_G = make_pair(B0, Q)

    return ModelDescriptor(
        name=name,
        dimension=n,
        accumulation=accumulation,
        flux=flux,
        jacobian_G=jacobian_G,
        jacobian_F=jacobian_F,
        hessian_G=lambda U: Q,
        hessian_F=lambda U: P,
        domain=lambda U: bool(np.all(np.abs(U) < radius)),
        boundary_planes=(),
        box=(-radius * np.ones(n), radius * np.ones(n)),
        parameters={"radius": radius},
    )


def fold_pencil_model(radius=4.0):
    """2x2 synthetic system whose speeds are v +/- sqrt(v^2 - 1).

    flux = (v, v^2 - u): the discriminant 4(v^2 - 1) changes sign across the
    straight lines v = +/-1, with an elliptic strip |v| < 1 in between.  On
    the lines the pencil has a double eigenvalue with a single eigenvector,
    and the discriminant gradient is nonzero (fold geometry).
    """
    A0 = np.array([[0.0, 1.0], [-1.0, 0.0]])
    P = np.zeros((2, 2, 2))
    P[1, 1, 1] = 2.0
    return synthetic_pencil_model(A0, np.eye(2), P, radius=radius, name="fold")


def crossing_pencil_model(coupling=0.7, base_speed=1.0, slope=0.8, radius=4.0):
    """2x2 synthetic system with two smooth speed branches crossing on a line.

    flux = (u^2/2 + coupling*v, base_speed*v + slope*v^2/2): the Jacobian is
    upper triangular with smooth eigenvalue branches u and base_speed +
    slope*v that cross along the straight line u = base_speed + slope*v.  On
    the line the matrix is defective (single eigenvector) for coupling != 0,
    and the discriminant (u - base_speed - slope*v)^2 touches zero
    quadratically: both sides are hyperbolic and the discriminant gradient
    vanishes on the line (crossing geometry).
    """
    A0 = np.array([[0.0, coupling], [0.0, base_speed]])
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[1, 1, 1] = slope
    return synthetic_pencil_model(A0, np.eye(2), P, radius=radius, name="crossing")


# ---------------------------------------------------------------------------
# registry used by the command-line front end


def build_model(name, params=None):
    """Construct a built-in model by name with optional parameter overrides."""
    params = dict(params or {})
    if name == "corey":
        keep = {k: float(params[k]) for k in ("alpha", "beta", "gamma") if k in params}
        return corey_model(CoreyQuadParams(**keep))
    if name == "icdow":
        kw = {}
        if "porosity" in params:
            kw["porosity"] = float(params["porosity"])
        if "rho_coeffs" in params:
            kw["rho_coeffs"] = tuple(float(x) for x in params["rho_coeffs"])
        return icdow_model(IcdowParams(**kw))
    if name == "buckley":
        return buckley_leverett_model(
            mobility_ratio=float(params.get("mobility_ratio", 1.0)),
            passive_speed=float(params.get("passive_speed", 5.0)))
    if name == "fold":
        return fold_pencil_model(radius=float(params.get("radius", 4.0)))
    if name == "crossing":
        return crossing_pencil_model(
            coupling=float(params.get("coupling", 0.7)),
            base_speed=float(params.get("base_speed", 1.0)),
            slope=float(params.get("slope", 0.8)),
            radius=float(params.get("radius", 4.0)))
    raise ValueError(f"unknown model {name!r} (expected corey, icdow, buckley, "
                     f"fold or crossing)")


MODEL_NAMES = ("corey", "icdow", "buckley", "fold", "crossing")
