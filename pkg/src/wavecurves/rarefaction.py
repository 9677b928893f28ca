"""Rarefaction curves: oriented eigenfield integration and stop events.

A rarefaction curve of family k is an integral curve of the unit right
eigenvector field of the characteristic pencil, dU/dxi = r_k(U), traversed
so that the characteristic speed lambda_k increases ("forward") or
decreases ("backward").  Integration stops at the first of

* a coincidence with the adjacent family (the squared eigenvalue gap of
  the tracked pair reaches zero),
* an inflection point (the directional derivative of lambda_k along r_k
  changes sign),
* a model boundary plane, an edge of the model box, or the length budget.

Event locations are polished on the curve to tight residuals so that
downstream constructions (generalized eigenchains, composite curves) can
rely on them.  When a curve ends on a coincidence locus,
:func:`continue_across_coincidence` restarts it on the far side using the
quadratic asymptotics of the coinciding pair and sign tests on the local
eigenvector geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field as _dfield

import numpy as np
from scipy.optimize import brentq

from .errors import (
    AsymptoticsInvalid,
    ComplexPair,
    EigenfieldUndefined,
    FormulaInvalid,
    NoAdmissibleContinuation,
    NoCoincidenceNearby,
    PseudoinverseUndefined,
    SingularPencil,
    StartsOnCoincidence,
)
from .geneig import (
    asymptotic_state,
    discriminant,
    eigenvalue_gradient,
    jordan_chain,
    pencil_at,
    sheet_coordinates,
    solve_pencil,
    taylor_R,
    versal_derivatives,
)
from .ivp import integrate_field
from .models import PlanarBoundary

COINCIDENCE = "coincidence"
INFLECTION = "inflection"
BOUNDARY = "boundary"
DOMAIN_EXIT = "domain_exit"
MAX_LENGTH = "max_length"

_D_TOL = 1e-9           # |D| at a refined coincidence location
_G_TOL = 1e-9           # |grad(lambda).r| at a refined inflection location
_Z_TOL = 1e-10          # |a.U - d| at a refined plane location
_BAND_FRACTION = 0.02   # eigenvalue-gap fraction that arms the locus refiner
_START_GAP_RTOL = 5e-5  # adjacent-gap threshold treated as "on the locus"

_DEFAULT_STOPS = ("coincidence", "inflection", "boundary", "domain")


@dataclass
class Event:
    """Where and why a curve integration stopped.

    ``refined`` locations satisfy the defining residual of their kind:
    |D| <= 1e-9 for coincidences, |grad(lambda).r| <= 1e-9 for inflections
    and |a.U - d| <= 1e-10 for planes and box faces.
    """

    kind: str
    location: np.ndarray
    refined: bool = False
    info: dict = _dfield(default_factory=dict)


@dataclass
class RarefactionSegment:
    family: int
    xi: np.ndarray          # shape (m,), nondecreasing, xi[0] = 0
    U: np.ndarray           # shape (m, n)
    lam: np.ndarray         # shape (m,)
    orientation: int        # sign applied to the unit eigenvector field
    termination: Event
    direction: str = "forward"
    label: str = ""

    @property
    def states(self):
        """Samples as a list of (xi, state, lambda) tuples."""
        return [(float(x), self.U[i].copy(), float(self.lam[i]))
                for i, x in enumerate(self.xi)]

    @property
    def start_state(self):
        return self.U[0].copy()

    @property
    def end_state(self):
        return self.U[-1].copy()

    def length(self):
        return float(self.xi[-1] - self.xi[0])


def _disc(model, U, pair_index):
    """Squared gap of the adjacent eigenvalue pair (pair_index, +1) at U."""
    A, B = pencil_at(model, np.asarray(U, dtype=float))
    return discriminant(A, B, family=pair_index)


class _TrackedField:
    """Unit eigenvector field of one family, tracked by continuity.

    The first evaluation picks the family by index and aligns the sign with
    the reference direction; afterwards the tracked pair is chosen by
    whichever of two continuity keys discriminates more clearly at that
    state: closeness of the speed to the previous evaluation, or overlap
    of the eigenvector with the previous direction.  Speed continuity
    survives passages where two eigenvectors collapse onto each other
    while the speeds stay apart (the wedge around a crossing-type locus);
    the overlap survives both folds, where the speeds collapse but the
    eigenvectors separate, and large steps across which the own speed
    drifts by more than the gap to its neighbour.
    """

    def __init__(self, model, family, ref):
        self.model = model
        self.family = int(family)
        ref = np.asarray(ref, dtype=float)
        self.ref = ref / np.linalg.norm(ref)
        self.lam = None
        self.U_prev = None
        self.grad = None
        self.started = False

    def probe(self, U):
        """Eigenpair continuing the tracked family, without moving the
        continuity reference (safe to call from event monitors)."""
        pairs = solve_pencil(*pencil_at(self.model, U)).pairs
        if not self.started:
            if not 1 <= self.family <= len(pairs):
                raise EigenfieldUndefined(
                    f"family {self.family} out of range: only {len(pairs)} "
                    "finite eigenpairs")
            pair = pairs[self.family - 1]
        elif len(pairs) == 1:
            pair = pairs[0]
        else:
            # the stepper evaluates stages out of order and past the last
            # accepted node, so the raw previous speed is stale by up to a
            # full step; a first-order prediction from the stored gradient
            # keeps the speed key accurate regardless of evaluation order
            pred = self.lam
            if self.grad is not None:
                pred += float(self.grad @ (U - self.U_prev))
            dls = [abs(p.lam - pred) for p in pairs]
            ovs = [abs(float(p.r @ self.ref)) for p in pairs]
            il = int(np.argmin(dls))
            io = int(np.argmax(ovs))
            if il == io:
                pair = pairs[il]
            else:
                l_margin = (sorted(dls)[1] - dls[il]) / (1.0 + abs(pred))
                o_margin = ovs[io] - sorted(ovs)[-2]
                pair = pairs[il] if l_margin > o_margin else pairs[io]
        sign = 1.0 if float(pair.r @ self.ref) >= 0.0 else -1.0
        return pair, sign

    def snapshot(self):
        """Continuity state, for rewinding rejected trial steps."""
        return (None if self.ref is None else self.ref.copy(),
                self.lam,
                None if self.U_prev is None else self.U_prev.copy(),
                None if self.grad is None else self.grad.copy(),
                self.started)

    def restore_state(self, snap):
        self.ref, self.lam, self.U_prev, self.grad, self.started = snap

    def __call__(self, U):
        pair, sign = self.probe(U)
        r = sign * pair.r
        self.ref = r
        self.lam = float(pair.lam)
        self.U_prev = np.asarray(U, dtype=float).copy()
        try:
            self.grad = eigenvalue_gradient(self.model, U, pair)
        except (ComplexPair, FormulaInvalid, SingularPencil,
                PseudoinverseUndefined, FloatingPointError):
            self.grad = None
        self.started = True
        return r


def _parse_stop(stop):
    """Split a stop list into enabled kinds and extra planes."""
    if stop is None:
        return set(_DEFAULT_STOPS), []
    kinds = set()
    planes = []
    for item in stop:
        if isinstance(item, PlanarBoundary):
            planes.append(item)
        elif item in _DEFAULT_STOPS:
            kinds.add(item)
        else:
            raise ValueError(f"unknown stop specifier: {item!r}")
    return kinds, planes


def _newton_to_locus(model, U_seed, direction, pair_index, t_max, iters=50):
    """Point U_seed + t*direction with |D| <= 1e-9, by damped Newton.

    A parabola-vertex polish handles quadratic touches of the discriminant
    (crossing-type loci, where D >= 0 and plain Newton converges only
    linearly toward the tangency).
    """
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    U_seed = np.asarray(U_seed, dtype=float)
    scale = max(float(t_max), 1e-6)

    def phi(t):
        try:
            return _disc(model, U_seed + t * direction, pair_index)
        except (ValueError, SingularPencil, PseudoinverseUndefined):
            return np.nan

    t = 0.0
    f0 = phi(0.0)
    if not np.isfinite(f0):
        raise NoCoincidenceNearby("discriminant not evaluable at the seed")
    for _ in range(iters):
        if abs(f0) <= _D_TOL:
            break
        h = 1e-7 * scale
        dp = (phi(t + h) - phi(t - h)) / (2.0 * h)
        if not np.isfinite(dp) or dp == 0.0:
            raise NoCoincidenceNearby(
                "flat discriminant during Newton refinement")
        dt = -f0 / dp
        if abs(t + dt) > t_max:
            dt = np.sign(dt) * t_max - t
        accepted = False
        f_new = f0
        t_new = t
        for _ in range(30):
            t_new = t + dt
            f_new = phi(t_new)
            if np.isfinite(f_new) and abs(f_new) < abs(f0):
                accepted = True
                break
            dt *= 0.5
            if abs(dt) < 1e-17 * scale:
                break
        if not accepted:
            raise NoCoincidenceNearby(
                "damped Newton stalled on the discriminant")
        t, f0 = t_new, f_new
    else:
        raise NoCoincidenceNearby(
            f"no convergence in {iters} Newton iterations")

    # vertex polish for quadratic touches: fit D on (t-h, t, t+h), jump to
    # the parabola minimum when that improves the residual
    for h in (1e-4 * scale, 1e-5 * scale):
        fp, fm = phi(t + h), phi(t - h)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            continue
        curv = fp - 2.0 * f0 + fm
        if curv <= 0.0:
            continue
        t_v = t - h * (fp - fm) / (2.0 * curv)
        f_v = phi(t_v)
        if np.isfinite(f_v) and abs(f_v) <= abs(f0):
            t, f0 = t_v, f_v
    if abs(f0) > _D_TOL:
        raise NoCoincidenceNearby(
            f"discriminant refinement stuck at |D| = {abs(f0):.3e}")
    return U_seed + t * direction


def _settle_on_curve(model, field, U_entry, pair_index, t_max, atol, rtol):
    """Iterate locus refinement and curve re-entry until they agree.

    From a trigger state on the curve, a Newton search along the local field
    direction finds a locus point; the curve is then re-integrated to the
    same distance and the search repeated from there, contracting the
    off-curve error quadratically.  Returns ``(U_locus, nodes)`` where
    ``nodes`` is a list of (xi_offset, state) samples accumulated along the
    curve while closing in.
    """
    U_curve = np.asarray(U_entry, dtype=float).copy()
    nodes = []
    xi_gain = 0.0
    U_loc = U_curve
    for _ in range(10):
        dvec = field(U_curve)
        U_loc = _newton_to_locus(model, U_curve, dvec, pair_index, t_max)
        d_r = float(np.linalg.norm(U_loc - U_curve))
        if d_r <= 1e-9 * (1.0 + float(np.linalg.norm(U_loc))):
            break
        if float((U_loc - U_curve) @ dvec) <= 0.0:
            # the marched point already sits past the locus; pushing the
            # curve further forward would only widen the gap, so accept
            # the Newton point and let the caller bridge the remainder
            break
        anchor = U_curve.copy()

        def dist_mon(U, _a=anchor, _d=d_r):
            return _d - float(np.linalg.norm(U - _a))

        res = integrate_field(field, U_curve, 4.0 * d_r,
                              events=[(dist_mon, 0)], atol=atol, rtol=rtol,
                              max_step=max(d_r, 1e-13),
                              retry_exceptions=(ComplexPair,))
        moved = float(np.linalg.norm(res.states[-1] - U_curve))
        if moved <= 1e-12 * (1.0 + float(np.linalg.norm(U_curve))):
            break  # pressed against the locus; accept the Newton point
        for k in range(1, len(res.xi)):
            nodes.append((xi_gain + float(res.xi[k]), res.states[k].copy()))
        xi_gain += float(res.xi[-1])
        U_curve = res.states[-1].copy()
    return U_loc, nodes


def _polish_along_field(field, U, func, tol, max_iter=12):
    """Newton-polish a scalar residual by sliding along the field direction.

    Returns (state, residual, xi_shift, converged)."""
    U_p = np.asarray(U, dtype=float).copy()
    shift = 0.0
    val = func(U_p)
    for _ in range(max_iter):
        if np.isfinite(val) and abs(val) <= tol:
            return U_p, val, shift, True
        dvec = field(U_p)
        h = 1e-7 * (1.0 + float(np.linalg.norm(U_p)))
        der = (func(U_p + h * dvec) - func(U_p - h * dvec)) / (2.0 * h)
        if not np.isfinite(der) or der == 0.0:
            break
        step = -val / der
        U_p = U_p + step * dvec
        shift += step
        val = func(U_p)
    return U_p, val, shift, np.isfinite(val) and abs(val) <= tol


def _lambda_replay(model, family, xi, states, ref_init):
    """Eigenvalue of the tracked family at each node.

    Nodes are matched to pairs by whichever continuity key discriminates
    more clearly, as in the integration field: consistency of the speed
    with its trapezoid prediction, or overlap of the eigenvector with the
    previous direction.  The prediction is self-consistent per candidate
    (each sheet is extrapolated with the mean of the previous gradient
    and its own), which keeps the speed key sharp across steps landing
    near a coincidence, where the along-curve gradient varies by an order
    of magnitude within a single step.  Where a pair folds the speeds
    collapse together and the eigenvector overlap takes over.  At a
    terminal coincidence node the pair may have collapsed past the
    tolerance of solve_pencil; the sheet mean is reported there.
    """
    lams = np.empty(len(states))
    ref = np.asarray(ref_init, dtype=float)
    g_prev = 0.0
    started = False
    for i, U in enumerate(states):
        try:
            pairs = solve_pencil(*pencil_at(model, U)).pairs
        except ComplexPair:
            lam_prev = lams[i - 1] if i > 0 else 0.0
            sc = sheet_coordinates(model, U, lam_prev)
            lams[i] = lam_prev + sc.s
            continue
        if not started:
            pair = pairs[family - 1]
            started = True
        elif len(pairs) == 1:
            pair = pairs[0]
        else:
            dxi = float(xi[i] - xi[i - 1])
            dls = []
            for p in pairs:
                tang = p.r if float(p.r @ ref) >= 0.0 else -p.r
                try:
                    g_p = float(eigenvalue_gradient(model, U, p) @ tang)
                except (FormulaInvalid, SingularPencil,
                        PseudoinverseUndefined, FloatingPointError):
                    g_p = g_prev
                dls.append(abs(p.lam - (lams[i - 1]
                                        + 0.5 * (g_prev + g_p) * dxi)))
            ovs = [abs(float(p.r @ ref)) for p in pairs]
            il = int(np.argmin(dls))
            io = int(np.argmax(ovs))
            if il == io:
                pair = pairs[il]
            else:
                scale = 1.0 + abs(lams[i - 1])
                l_margin = (sorted(dls)[1] - dls[il]) / scale
                o_margin = ovs[io] - sorted(ovs)[-2]
                pair = pairs[il] if l_margin > o_margin else pairs[io]
        ref = pair.r if float(pair.r @ ref) >= 0.0 else -pair.r
        lams[i] = pair.lam
        try:
            g_prev = float(eigenvalue_gradient(model, U, pair) @ ref)
        except (FormulaInvalid, SingularPencil, PseudoinverseUndefined,
                FloatingPointError):
            g_prev = 0.0
    return lams


def integrate_rarefaction(model, U_start, family, direction="forward",
                          stop=None, *, max_length=None, max_step=None,
                          atol=1e-10, rtol=1e-8, ref0=None, h0=None,
                          band_fraction=_BAND_FRACTION, label=""):
    """Integrate the family's eigenvector field from U_start to an event.

    The field is re-oriented at every evaluation for eigenvector continuity
    and globally so that lambda increases along "forward" curves (decreases
    along "backward" ones).  ``stop`` selects the monitored events from
    {"coincidence", "inflection", "boundary", "domain"} and may include
    extra :class:`PlanarBoundary` instances; None enables everything.
    ``ref0`` overrides the initial direction (used by the continuation
    logic to seed the first step); ``h0`` bounds the very first step so a
    start inside a fast eigenvector-rotation layer stays on its branch.
    """
    U0 = np.asarray(U_start, dtype=float).copy()
    family = int(family)
    if direction not in ("forward", "backward"):
        raise ValueError(
            f"direction must be 'forward' or 'backward', got {direction!r}")
    kinds, extra_planes = _parse_stop(stop)
    diam = model.diameter if model.diameter > 0 else 10.0
    if max_length is None:
        max_length = 3.0 * diam
    if max_step is None:
        max_step = diam / 50.0

    try:
        pairs0 = solve_pencil(*pencil_at(model, U0)).pairs
    except ComplexPair as exc:
        raise EigenfieldUndefined(
            f"complex characteristic pair at the start: {exc}") from exc
    if not 1 <= family <= len(pairs0):
        raise EigenfieldUndefined(
            f"family {family} out of range: only {len(pairs0)} finite "
            "eigenpairs")
    pair0 = pairs0[family - 1]
    lam_scale = 1.0 + abs(pair0.lam)
    adjacent_gaps = [abs(pairs0[j].lam - pairs0[j - 1].lam)
                     for j in (family - 1, family) if 1 <= j <= len(pairs0) - 1]
    if (ref0 is None and h0 is None and adjacent_gaps
            and min(adjacent_gaps) <= _START_GAP_RTOL * lam_scale):
        # an explicit seed direction or first-step bound asserts the caller
        # knows which branch to start on this close to a coincidence
        raise StartsOnCoincidence(
            "adjacent characteristic speeds coincide at the start state; "
            "use continue_across_coincidence on the terminated segment")

    grad0 = eigenvalue_gradient(model, U0, pair0)
    g0 = float(grad0 @ pair0.r)
    g_scale = 1.0 + float(np.linalg.norm(grad0))
    if ref0 is not None:
        sigma = 1 if float(pair0.r @ np.asarray(ref0, dtype=float)) >= 0.0 else -1
        ref_init = np.asarray(ref0, dtype=float)
    elif abs(g0) <= _G_TOL * g_scale:
        # already on the inflection locus: the traversal direction is
        # undefined, so report a zero-length curve (unless the field is
        # degenerate along r as well, i.e. the speed never varies)
        if _is_linearly_degenerate(model, U0, pair0):
            raise FormulaInvalid(
                "linearly degenerate characteristic field: the speed is "
                "constant along the eigenvector, no inflection geometry")
        ev = Event(INFLECTION, U0.copy(), refined=abs(g0) <= _G_TOL,
                   info={"xi": 0.0, "g": g0})
        return RarefactionSegment(family=family, xi=np.zeros(1),
                                  U=U0[None].copy(),
                                  lam=np.array([pair0.lam]), orientation=1,
                                  termination=ev, direction=direction,
                                  label=label)
    else:
        sigma = 1 if (g0 > 0) == (direction == "forward") else -1
        ref_init = sigma * pair0.r

    field = _TrackedField(model, family, ref_init)
    n_fin = len(pairs0)
    adjacencies = [j for j in (family - 1, family) if 1 <= j <= n_fin - 1]
    planes = list(extra_planes)
    if "boundary" in kinds:
        planes.extend(model.boundary_planes)

    def build_monitors(U_at, with_coincidence=True):
        mons = []
        if "coincidence" in kinds and with_coincidence:
            for j in adjacencies:
                band = (band_fraction * lam_scale) ** 2
                d_here = _disc(model, U_at, j)
                if np.isfinite(d_here) and abs(d_here) < band:
                    band = 0.25 * abs(d_here)

                def sig(U, _j=j):
                    return _disc(model, U, _j)

                def bnd(U, _j=j, _b=band):
                    return abs(_disc(model, U, _j)) - _b

                def vtx(U, _j=j):
                    # derivative of D along the curve: its - to + crossing
                    # brackets a local minimum of the gap however large the
                    # step, catching crossing-type loci (D >= 0 throughout)
                    # that the narrow band monitor could be stepped over
                    try:
                        pair, sgn = field.probe(U)
                    except (ComplexPair, EigenfieldUndefined):
                        return np.nan
                    fdir = sgn * pair.r
                    h = 1e-6 * (1.0 + float(np.linalg.norm(U)))
                    dp = _disc(model, U + h * fdir, _j)
                    dm = _disc(model, U - h * fdir, _j)
                    return (dp - dm) / (2.0 * h)

                mons.append(((sig, 0), COINCIDENCE, j))
                mons.append(((bnd, -1), COINCIDENCE, j))
                mons.append(((vtx, 1), COINCIDENCE, j))
        if "inflection" in kinds:
            def g_mon(U):
                try:
                    pair, sgn = field.probe(U)
                    grad = eigenvalue_gradient(model, U, pair)
                except (ComplexPair, FormulaInvalid):
                    return np.nan
                return float(grad @ (sgn * pair.r))

            mons.append(((g_mon, 0), INFLECTION, None))
        for plane in planes:
            def z_mon(U, _p=plane):
                return float(_p.value(U))

            mons.append(((z_mon, 0), BOUNDARY, plane))
        if "domain" in kinds and model.box is not None:
            lo, hi = model.box
            for k in range(U0.size):
                def lo_mon(U, _k=k, _v=float(lo[k])):
                    return float(U[_k] - _v)

                def hi_mon(U, _k=k, _v=float(hi[k])):
                    return float(_v - U[_k])

                mons.append(((lo_mon, -1), DOMAIN_EXIT, ("min", k)))
                mons.append(((hi_mon, -1), DOMAIN_EXIT, ("max", k)))
        return mons

    t_max_refine = max(5.0 * max_step, 1e-3 * (1.0 + float(np.linalg.norm(U0))))
    xi_all = [0.0]
    U_all = [U0.copy()]
    U_cur = U0
    event = None


    def commit_nodes(nodes):
        base = xi_all[-1]
        for dxi, state in nodes:
            if base + dxi > xi_all[-1]:
                xi_all.append(base + dxi)
                U_all.append(np.asarray(state, dtype=float).copy())
            else:
                U_all[-1] = np.asarray(state, dtype=float).copy()

    hop_leg = 0.0  # > 0: cross this distance with coincidence monitors off
    for _attempt in range(16):
        hopping = hop_leg > 0.0
        mons = build_monitors(U_cur, with_coincidence=not hopping)
        leg = min(hop_leg, max_length - xi_all[-1]) if hopping \
            else max_length - xi_all[-1]
        hop_leg = 0.0
        if leg <= 0.0:
            event = Event(MAX_LENGTH, U_cur.copy(), refined=False,
                          info={"xi": xi_all[-1]})
            break
        res = integrate_field(field, U_cur, leg,
                              events=[m[0] for m in mons], atol=atol,
                              rtol=rtol, max_step=max_step,
                              h0=h0 if xi_all[-1] == 0.0 else None,
                              retry_exceptions=(ComplexPair,))
        base = xi_all[-1]
        for k in range(1, len(res.xi)):
            xi_all.append(base + float(res.xi[k]))
            U_all.append(res.states[k].copy())
        U_cur = U_all[-1]

        def order_clear(U_from, U_to):
            # a coincidence claim may not jump past another pending stop:
            # no other monitor may change sign on the way to the locus
            # (checked at 90% of the travel so a stop sitting essentially
            # on the locus still yields to the coincidence)
            probe_pt = U_from + 0.9 * (U_to - U_from)
            for (mfunc, _md), mkind, _mp in mons:
                if mkind == COINCIDENCE:
                    continue
                try:
                    a = float(mfunc(U_from))
                    b = float(mfunc(probe_pt))
                except Exception:
                    continue
                if (np.isfinite(a) and np.isfinite(b)
                        and a != 0.0 and a * b < 0.0):
                    return False
            return True

        def try_coincidence(j, enforce_order=True):
            nonlocal event, U_cur
            saved = (None if field.ref is None else field.ref.copy(),
                     field.lam,
                     None if field.U_prev is None else field.U_prev.copy(),
                     None if field.grad is None else field.grad.copy())

            def restore():
                field.ref, field.lam, field.U_prev, field.grad = saved

            import os as _os
            _tr = _os.environ.get("RAREF_TRACE_FIELD")
            if _tr:
                print(f"[tc] enter lam={field.lam} U_cur={np.round(U_cur, 7)}")
            try:
                U_loc, extra = _settle_on_curve(model, field, U_cur, j,
                                                t_max_refine, atol, rtol)
            except NoCoincidenceNearby:
                restore()
                if _tr:
                    print(f"[tc] fail-restored lam={field.lam}")
                return "fail"
            if _tr:
                print(f"[tc] settled U_loc={np.round(U_loc, 7)} lam={field.lam} "
                      f"n_extra={len(extra)}")
            if enforce_order and not order_clear(U_cur, U_loc):
                restore()
                if _tr:
                    print(f"[tc] far-restored lam={field.lam}")
                return "far"
            # the event clip of a grazing trigger can itself land a hair
            # past the touch: drop trailing committed nodes that overran
            # the locus along the last step direction
            if len(U_all) > 1:
                chord = U_all[-1] - U_all[-2]
                while (len(U_all) > 1
                       and float((U_all[-1] - U_loc) @ chord) > 0.0):
                    U_all.pop()
                    xi_all.pop()
                U_cur = U_all[-1]
            # the settle march can bulge through a boundary, out of the
            # domain, or a short way past the locus while crossing the
            # near-parallel eigenvector wedge; keep only the approach
            # samples that stay inside and on the near side, and bridge
            # the rest with a straight chord to the locus point
            chord_l = U_loc - U_cur
            nodes = []
            for dxi, state in extra:
                st = np.asarray(state, dtype=float)
                if (not model.domain(st)
                        or any(plane.value(U_cur) * plane.value(st) < 0.0
                               for plane in planes)
                        or float((st - U_loc) @ chord_l) > 0.0):
                    break
                nodes.append((dxi, state))
            last_state = nodes[-1][1] if nodes else U_cur
            last_dxi = nodes[-1][0] if nodes else 0.0
            tail = float(np.linalg.norm(U_loc - last_state))
            nodes.append((last_dxi + tail, U_loc.copy()))
            # the sheet mean stays evaluable even when |D| <= 1e-9 lands a
            # hair on the elliptic side, where solve_pencil would reject
            # the pair
            sc = sheet_coordinates(model, U_loc, 0.0, family=j)
            commit_nodes(nodes)
            event = Event(COINCIDENCE, U_loc.copy(), refined=True,
                          info={"lambda0": sc.s, "pair": (j, j + 1),
                                "D": 4.0 * sc.p, "xi": xi_all[-1]})
            return "ok"

        if res.status == "max_length":
            if hopping:
                continue  # moved past the spent trigger; re-arm and push on
            event = Event(MAX_LENGTH, U_cur.copy(), refined=False,
                          info={"xi": xi_all[-1]})
            break
        if res.status == "step_failure":
            # the stepper may have been squeezed against an elliptic
            # boundary, which is a fold-type coincidence locus
            cands = [(abs(_disc(model, U_cur, j)), j) for j in adjacencies]
            if "coincidence" in kinds and cands:
                dmin, jmin = min(cands)
                if dmin <= 4.0 * (band_fraction * lam_scale) ** 2:
                    if try_coincidence(jmin) == "ok":
                        break
            raise RuntimeError(
                f"rarefaction integration stalled: {res.message}")

        (_func, _dir), kind, payload = mons[res.event_index]
        import os as _os
        if _os.environ.get("RAREF_TRACE"):
            print(f"[trace] att={_attempt} hop={hopping} kind={kind} "
                  f"payload={payload} U={np.round(U_cur, 6)} "
                  f"xi={xi_all[-1]:.6f}")
        if kind == COINCIDENCE:
            d_at = _disc(model, U_cur, payload)
            if np.isfinite(d_at) and abs(d_at) > 25.0 * (band_fraction
                                                         * lam_scale) ** 2:
                if _os.environ.get("RAREF_TRACE"):
                    print(f"[trace]   d_at={d_at:.3e} too far, continue")
                continue  # gap bottomed out far from zero: not a locus
            outcome = try_coincidence(payload)
            if _os.environ.get("RAREF_TRACE"):
                print(f"[trace]   outcome={outcome} d_at={d_at:.3e}")
            if outcome == "ok":
                break
            if outcome in ("fail", "far"):
                # the trigger is spent: either no locus was reachable or
                # it lies beyond another pending stop; cross a short leg
                # with only the other monitors armed so the same trigger
                # cannot re-fire in place yet no boundary or inflection
                # passage goes unwatched
                hop_leg = 1e-3 * max_step
            continue  # shrink the band at this state and push on
        if kind == INFLECTION:
            near = [(abs(_disc(model, U_cur, j)), j) for j in adjacencies]
            if "coincidence" in kinds and near:
                dmin, jmin = min(near)
                if dmin <= (band_fraction * lam_scale) ** 2:
                    # the inflection formula is invalid this close to a
                    # coincidence: the coincidence event wins regardless
                    # of which zero sits first inside the step
                    if try_coincidence(jmin, enforce_order=False) == "ok":
                        break

            def g_res(U):
                try:
                    pair, sgn = field.probe(U)
                    grad = eigenvalue_gradient(model, U, pair)
                except (ComplexPair, FormulaInvalid):
                    return np.nan
                return float(grad @ (sgn * pair.r))

            U_pol, g_fin, shift, ok = _polish_along_field(field, U_cur,
                                                          g_res, _G_TOL)
            if not ok:
                raise FormulaInvalid(
                    "inflection residual would not polish below tolerance "
                    f"(stuck at {g_fin:.3e} near a coincidence?)")
            xi_all[-1] += shift
            U_all[-1] = U_pol
            event = Event(INFLECTION, U_pol.copy(), refined=True,
                          info={"xi": xi_all[-1], "g": g_fin})
            break
        if kind == BOUNDARY:
            plane = payload

            def z_res(U, _p=plane):
                return float(_p.value(U))

            U_pol, z_fin, shift, ok = _polish_along_field(field, U_cur,
                                                          z_res, _Z_TOL)
            xi_all[-1] += shift
            U_all[-1] = U_pol
            event = Event(BOUNDARY, U_pol.copy(), refined=ok,
                          info={"xi": xi_all[-1], "plane": plane.name,
                                "z": z_fin})
            break
        if kind == DOMAIN_EXIT:
            side, coord = payload
            lo, hi = model.box
            target = float(lo[coord]) if side == "min" else float(hi[coord])

            def face_res(U, _c=coord, _t=target):
                return float(U[_c] - _t)

            U_pol, z_fin, shift, ok = _polish_along_field(field, U_cur,
                                                          face_res, _Z_TOL)
            xi_all[-1] += shift
            U_all[-1] = U_pol
            event = Event(DOMAIN_EXIT, U_pol.copy(), refined=ok,
                          info={"xi": xi_all[-1], "coordinate": coord,
                                "side": side, "z": z_fin})
            break
    else:
        raise NoCoincidenceNearby(
            "coincidence band kept triggering without a reachable locus "
            "point (16 refinement attempts)")

    lam_all = _lambda_replay(model, family, xi_all, U_all, ref_init)
    return RarefactionSegment(family=family, xi=np.asarray(xi_all),
                              U=np.asarray(U_all), lam=lam_all,
                              orientation=sigma, termination=event,
                              direction=direction, label=label)


def _is_linearly_degenerate(model, U0, pair0):
    """True when grad(lambda).r also vanishes a step away along r."""
    delta = 1e-3 * (1.0 + float(np.linalg.norm(U0)))
    try:
        U_probe = np.asarray(U0, dtype=float) + delta * pair0.r
        pairs = solve_pencil(*pencil_at(model, U_probe)).pairs
        pp = max(pairs, key=lambda p: abs(float(p.r @ pair0.r)))
        sgn = 1.0 if float(pp.r @ pair0.r) >= 0.0 else -1.0
        g = float(eigenvalue_gradient(model, U_probe, pp) @ (sgn * pp.r))
    except (ComplexPair, FormulaInvalid, ValueError):
        return False
    return abs(g) <= 10.0 * _G_TOL


def detect_planar_stop(model, trajectory, plane):
    """First crossing of a plane along a sampled trajectory, or None.

    ``trajectory`` is a pair (xi, states) of sampled arrays.  A start state
    exactly on the plane arms the monitor only after leaving it.  The
    crossing is interpolated on the chord, where a.U - d is linear, so the
    reported residual is exactly zero up to rounding.
    """
    xi, states = np.asarray(trajectory[0], float), np.asarray(trajectory[1], float)
    z = np.array([float(plane.value(U)) for U in states])
    for k in range(len(z) - 1):
        if z[k] == 0.0:
            continue  # not armed until the curve leaves the plane
        if z[k] * z[k + 1] < 0.0 or z[k + 1] == 0.0:
            t = z[k] / (z[k] - z[k + 1])
            U_star = states[k] + t * (states[k + 1] - states[k])
            xi_star = float(xi[k] + t * (xi[k + 1] - xi[k]))
            return Event(BOUNDARY, U_star, refined=True,
                         info={"xi": xi_star, "plane": plane.name,
                               "z": float(plane.value(U_star))})
    return None


def detect_coincidence_stop(model, trajectory, field=None, family=None,
                            band=None):
    """First coincidence of adjacent speeds along a trajectory, or None.

    Scans the squared eigenvalue gap D for a sign change (fold-type locus)
    or a dip below ``band`` (crossing-type), then refines by damped Newton
    along the local curve direction (the field if given, otherwise the node
    secant) to |D| <= 1e-9.  Raises NoCoincidenceNearby when the refinement
    does not converge after a trigger.
    """
    xi, states = np.asarray(trajectory[0], float), np.asarray(trajectory[1], float)
    if len(states) == 0:
        return None
    pairs0 = solve_pencil(*pencil_at(model, states[0])).pairs
    if family is None:
        js = list(range(1, len(pairs0)))
    else:
        js = [j for j in (family - 1, family) if 1 <= j <= len(pairs0) - 1]
    if not js:
        return None
    if band is None:
        lam_mid = float(np.mean([p.lam for p in pairs0]))
        band = (_BAND_FRACTION * (1.0 + abs(lam_mid))) ** 2

    spacing = float(np.max(np.linalg.norm(np.diff(states, axis=0), axis=1))) \
        if len(states) > 1 else 1e-2 * (1.0 + float(np.linalg.norm(states[0])))
    t_max = max(4.0 * spacing, 1e-3)

    dvals = {j: np.array([_disc(model, U, j) for U in states]) for j in js}

    def local_dip(k, j):
        """Interior local minimum of D shallow enough to suggest a locus
        between the sampled nodes (crossing-type: D >= 0 throughout)."""
        d = dvals[j]
        return (0 < k < len(d) - 1 and d[k] < d[k - 1] and d[k] <= d[k + 1]
                and abs(d[k]) <= 25.0 * band)

    def refine_from(k, j):
        if field is not None:
            dvec = field(states[k])
        elif k + 1 < len(states):
            dvec = states[k + 1] - states[k]
        elif k > 0:
            dvec = states[k] - states[k - 1]
        else:
            raise NoCoincidenceNearby(
                "single-node trajectory with no direction")
        return _newton_to_locus(model, states[k], dvec, j, t_max)

    for k in range(len(states)):
        for j in js:
            d_here = dvals[j][k]
            hard = abs(d_here) <= band or (
                k + 1 < len(states) and d_here * dvals[j][k + 1] < 0.0)
            if not (hard or local_dip(k, j)):
                continue
            try:
                U_loc = refine_from(k, j)
            except NoCoincidenceNearby:
                if hard:
                    raise
                continue  # shallow dip with no locus under it: keep scanning
            sc = sheet_coordinates(model, U_loc, 0.0, family=j)
            xi_star = float(xi[k] + np.linalg.norm(U_loc - states[k]))
            return Event(COINCIDENCE, U_loc, refined=True,
                         info={"lambda0": sc.s, "pair": (j, j + 1),
                               "xi": xi_star, "D": 4.0 * sc.p})
    return None


def detect_inflection_stop(model, trajectory, family):
    """First sign change of grad(lambda).r along a trajectory, or None.

    Eigenpairs at the nodes are tracked by continuity from the first node's
    family index.  Raises FormulaInvalid when a coincidence is encountered
    before any inflection (the formula denominator vanishes there) or when
    the directional derivative is identically below tolerance (linearly
    degenerate field).
    """
    xi, states = np.asarray(trajectory[0], float), np.asarray(trajectory[1], float)
    gs = np.full(len(states), np.nan)
    refs = [None] * len(states)
    ref = None
    lam_scale = 1.0
    for i, U in enumerate(states):
        pairs = solve_pencil(*pencil_at(model, U)).pairs
        if ref is None:
            pair = pairs[family - 1]
            lam_scale = 1.0 + abs(pair.lam)
        else:
            pair = max(pairs, key=lambda p: abs(float(p.r @ ref)))
        sgn = 1.0 if ref is None or float(pair.r @ ref) >= 0.0 else -1.0
        ref = sgn * pair.r
        refs[i] = ref
        # coincidence precedence: near-degenerate pairs poison the formula
        gap = min(abs(pairs[j].lam - pairs[j - 1].lam)
                  for j in range(1, len(pairs))) if len(pairs) > 1 else np.inf
        if gap <= _BAND_FRACTION * lam_scale:
            raise FormulaInvalid(
                "coincidence encountered before any inflection: the "
                "directional-derivative formula is invalid there")
        gs[i] = float(eigenvalue_gradient(model, U, pair) @ ref)

    finite = np.isfinite(gs)
    if finite.all() and np.max(np.abs(gs)) < 1e-12 * lam_scale:
        raise FormulaInvalid(
            "directional derivative of the speed vanishes along the whole "
            "trajectory (linearly degenerate field)")
    for k in range(len(gs) - 1):
        if not (finite[k] and finite[k + 1]):
            continue
        if gs[k] == 0.0:
            continue
        if gs[k] * gs[k + 1] < 0.0 or gs[k + 1] == 0.0:
            A_node, B_node = states[k], states[k + 1]
            ref_k = refs[k]

            def g_of(t):
                U_t = A_node + t * (B_node - A_node)
                pairs = solve_pencil(*pencil_at(model, U_t)).pairs
                pair = max(pairs, key=lambda p: abs(float(p.r @ ref_k)))
                sgn = 1.0 if float(pair.r @ ref_k) >= 0.0 else -1.0
                return float(eigenvalue_gradient(model, U_t, pair)
                             @ (sgn * pair.r))

            t_star = brentq(g_of, 0.0, 1.0, xtol=1e-15, rtol=1e-15)
            U_star = A_node + t_star * (B_node - A_node)
            return Event(INFLECTION, U_star, refined=True,
                         info={"xi": float(xi[k] + t_star * (xi[k + 1] - xi[k])),
                               "g": g_of(t_star)})
    return None


def continue_across_coincidence(model, segment, epsilon=None, stop=None,
                                **integrate_kwargs):
    """Admissible continuations of a curve ending on a coincidence locus.

    Computes a state on the far side of the locus (quadratic asymptotics
    along r0 when grad_p.r0 is nonzero; a straight epsilon-step along the
    incoming travel direction for crossing-type loci where grad_p vanishes)
    and returns every family whose re-oriented eigenvector passes the sign
    tests there, each integrated to its next event.  The adjacent family
    must additionally keep a positive inner product with the transverse
    chain column R1 evaluated at the far-side state.
    """
    ev = segment.termination
    if ev.kind != COINCIDENCE:
        raise ValueError("segment does not terminate at a coincidence event")
    U0 = np.asarray(ev.location, dtype=float)
    lam0 = float(ev.info["lambda0"])
    if epsilon is None:
        epsilon = 1e-3 * (1.0 + abs(lam0))
    epsilon = float(epsilon)
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive (a zero step keeps the "
                         "state on the locus)")
    A0, B0 = pencil_at(model, U0)
    chain = versal_derivatives(model, U0, jordan_chain(A0, B0, lam0))
    r0 = chain.r0
    gp = chain.grad_p
    gp_r0 = float(gp @ r0)

    if segment.U.shape[0] >= 2:
        t_in = segment.U[-1] - segment.U[-2]
        nrm = float(np.linalg.norm(t_in))
        t_in = t_in / nrm if nrm > 0.0 else r0.copy()
    else:
        t_in = r0.copy()

    # the sign tests below compare candidate directions against r0, which
    # is only meaningful in a fixed frame: rc0 must point into the region
    # where the pair is real (grad_p > 0 side).  The chain's own gauge
    # fixes r1 against grad_p but leaves the r0 sign to the algebra.
    candidates = []
    if abs(gp_r0) > 1e-8 * (1.0 + float(np.linalg.norm(gp))):
        flip = 1.0 if gp_r0 > 0.0 else -1.0
        candidates.append((asymptotic_state(chain, U0, "omega2", epsilon),
                           flip, True))
    elif float(np.linalg.norm(gp)) <= 1e-5 * (1.0 + abs(lam0)):
        # crossing-type locus: the gap varies quadratically in every
        # direction and both sides of the locus stay hyperbolic, so try a
        # straight epsilon-step along r0 on each side; the branch retracing
        # the incoming curve fails the orientation test by construction.
        # The transverse R1 test is skipped since both true eigenvectors
        # collapse onto r0 with only O(gap) transverse components here.
        for d in (1.0, -1.0):
            candidates.append((U0 + epsilon * d * r0, d, False))
    else:
        raise AsymptoticsInvalid(
            "grad_p is significant but transverse to r0: the quadratic "
            "continuation asymptotics do not apply at this locus point")

    out = []
    for U_c, flip, use_R1 in candidates:
        out.extend(_admissible_continuations(model, chain, U0, U_c, flip,
                                             use_R1, segment.direction, stop,
                                             integrate_kwargs))
    if not out:
        raise NoAdmissibleContinuation(
            "no candidate family passed the orientation sign tests on the "
            "far side of the coincidence")
    return out


def _admissible_continuations(model, chain, U0, U_c, flip, use_R1, direction,
                              stop, integrate_kwargs):
    """Sign tests of the continuation procedure at one far-side state.

    ``flip`` maps the chain frame (r0, r1) onto the test frame rc0 = flip*r0
    pointing toward the candidate side.  The family staying on the incoming
    sheet continues when its travel-oriented eigenvector keeps a positive
    inner product with rc0; the family switching sheets needs in addition a
    matching component along the transverse chain column (when ``use_R1``),
    and its first integration step is seeded with the Taylor-evaluated R1.
    Backward curves mirror every test through lambda -> -lambda: sheet roles
    swap, eigenvectors orient against the speed slope, and the transverse
    comparisons flip sign.
    """
    dir_sign = 1.0 if direction == "forward" else -1.0
    try:
        pairs = solve_pencil(*pencil_at(model, U_c)).pairs
    except ComplexPair:
        return []
    if len(pairs) < 2:
        return []
    lams = np.array([p.lam for p in pairs])
    order = np.argsort(np.abs(lams - chain.lambda0))
    q = sorted(int(i) for i in order[:2])
    if q[1] != q[0] + 1:
        return []
    rc0 = flip * chain.r0
    rc1 = flip * chain.r1
    _R0e, R1e = taylor_R(chain, U0, U_c)
    if float(R1e @ rc1) < 0.0:
        R1e = -R1e  # pin to the transverse direction of the test frame

    if dir_sign > 0.0:
        role_map = ((q[0], "case a"), (q[1], "case b"))
    else:
        role_map = ((q[1], "case a"), (q[0], "case b"))

    # the eigenvectors rotate on the scale of the distance to the locus, so
    # the first integration step must resolve that layer or the continuity
    # tracker can hop branches
    kw = dict(integrate_kwargs)
    kw.setdefault("h0", max(0.1 * float(np.linalg.norm(U_c - U0)),
                            1e-12 * (1.0 + float(np.linalg.norm(U0)))))

    admissible = {}
    for pos, role in role_map:
        pair = pairs[pos]
        try:
            grad = eigenvalue_gradient(model, U_c, pair)
        except FormulaInvalid:
            continue
        slope = float(grad @ pair.r)
        if abs(slope) <= 1e-12 * (1.0 + float(np.linalg.norm(grad))):
            continue
        r_or = pair.r if dir_sign * slope > 0.0 else -pair.r
        if float(r_or @ rc0) > 0.0:
            admissible[role] = (pos, r_or)

    segs = []
    if "case a" in admissible:
        pos, _r_or = admissible["case a"]
        # select this branch by its sorted position: both eigenvectors are
        # nearly parallel to r0 this close to the locus, so an overlap seed
        # could silently grab the other branch
        segs.append(integrate_rarefaction(model, U_c, pos + 1, direction,
                                          stop, label="case a", **kw))
    if "case b" in admissible:
        pos, r_or = admissible["case b"]
        if not use_R1 or dir_sign * float(R1e @ r_or) > 0.0:
            seed = dir_sign * R1e if use_R1 else r_or
            segs.append(integrate_rarefaction(model, U_c, pos + 1, direction,
                                              stop, ref0=seed, label="case b",
                                              **kw))
    return segs
