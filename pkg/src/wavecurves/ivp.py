"""Adaptive ODE integration with event location for curve construction.

A single embedded Runge-Kutta 4(5) stepper (Dormand-Prince coefficients)
drives every curve integration in the package.  Curves are parametrized by
arc-like parameter xi >= 0; the direction of travel is encoded in the field.

Events are scalar monitors g(y), given either as a bare callable or as a
``(callable, direction)`` pair where direction -1 fires only on + -> -
crossings, +1 only on - -> +, and 0 (the default) on both.  After each
accepted step the monitors are evaluated at the new node; a sign change
against the previous node brackets a crossing, which is located by bisection
(brentq) on xi with the state obtained by re-integration from the step start
at the same tolerances.  The first crossing in xi wins, the trajectory is
truncated there and the event index reported.

An optional ``step_guard`` predicate lets callers veto an accepted step
(the step is retried with half the size), which supports invariant-drift
rejection without entangling that logic with the stepper.  Exception types
listed in ``retry_exceptions`` raised by the field during a trial step are
likewise treated as step rejections, so a field that is undefined past some
boundary shrinks the step toward it instead of crashing the integration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

# Dormand-Prince 4(5) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                187 / 2100, 1 / 40])
_ERR = _B5 - _B4


def _rk45_step(field, y, h):
    """One embedded step; returns (y5, error_estimate_vector)."""
    k = np.empty((7, y.size))
    k[0] = field(y)
    for i in range(1, 7):
        k[i] = field(y + h * (_A[i] @ k[:i]))
    y5 = y + h * (_B5 @ k)
    err = h * (_ERR @ k)
    return y5, err


def _save(field):
    """Snapshot a stateful field (one tracking continuity internally)."""
    fn = getattr(field, "snapshot", None)
    return None if fn is None else fn()


def _load(field, snap):
    """Rewind a stateful field to a snapshot taken before a trial step.

    Stage evaluations of a rejected or re-walked step can sit far from the
    accepted trajectory; without the rewind they would drag the field's
    continuity reference off the branch actually being followed."""
    if snap is not None:
        field.restore_state(snap)


@dataclass
class OdeResult:
    xi: np.ndarray          # accepted parameter values, xi[0] = 0
    states: np.ndarray      # states at the nodes, shape (len(xi), n)
    status: str             # "max_length" | "event" | "guard_failure" | "step_failure"
    event_index: int = -1   # which monitor fired (for status == "event")
    message: str = ""


def advance(field, y0, span, atol=1e-10, rtol=1e-8, max_steps=100000,
            h0=None, max_step=np.inf):
    """Integrate from y0 over parameter length ``span`` without events."""
    res = integrate_field(field, y0, span, atol=atol, rtol=rtol,
                          max_steps=max_steps, h0=h0, max_step=max_step)
    if res.status != "max_length":
        raise RuntimeError(f"plain advance failed: {res.status} {res.message}")
    return res.states[-1]


def integrate_field(field, y0, length, events=(), atol=1e-10, rtol=1e-8,
                    h0=None, max_step=np.inf, max_steps=100000,
                    min_step=None, step_guard=None, retry_exceptions=()):
    """Adaptive RK45 over xi in [0, length] with sign-change events.

    ``events`` is a sequence of scalar monitors, each a callable g(y) or a
    ``(g, direction)`` pair.  A monitor that is exactly zero at the start is
    armed only once it leaves zero.  Returns an :class:`OdeResult`; when an
    event fires, the located crossing is the last node and ``event_index``
    names the monitor.
    """
    y = np.asarray(y0, dtype=float).copy()
    length = float(length)
    if min_step is None:
        min_step = 1e-14 * max(1.0, length)
    h = h0 if h0 is not None else min(length / 100.0, max_step)
    h = min(h, max_step, length)

    ev_funcs = []
    ev_dirs = []
    for ev in events:
        if callable(ev):
            ev_funcs.append(ev)
            ev_dirs.append(0)
        else:
            ev_funcs.append(ev[0])
            ev_dirs.append(int(ev[1]))

    xs = [0.0]
    ys = [y.copy()]
    gvals = [float(g(y)) for g in ev_funcs]

    xi = 0.0
    for _ in range(max_steps):
        if xi >= length:
            return OdeResult(np.array(xs), np.array(ys), "max_length")
        h = min(h, length - xi, max_step)
        snap = _save(field)
        try:
            y_new, err = _rk45_step(field, y, h)
        except retry_exceptions as exc:
            _load(field, snap)
            h *= 0.5
            if h < min_step:
                return OdeResult(np.array(xs), np.array(ys), "step_failure",
                                 message=f"field undefined near xi={xi:.6g}: "
                                         f"{exc}")
            continue
        if not np.all(np.isfinite(y_new)):
            scale = 1.0
            enorm = np.inf
        else:
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            enorm = float(np.max(np.abs(err) / scale))
        if enorm > 1.0:
            _load(field, snap)
            h *= max(0.2, 0.9 * enorm ** -0.2)
            if h < min_step:
                return OdeResult(np.array(xs), np.array(ys), "step_failure",
                                 message=f"step size underflow at xi={xi:.6g}")
            continue
        if step_guard is not None and not step_guard(y_new):
            _load(field, snap)
            h *= 0.5
            if h < min_step:
                return OdeResult(np.array(xs), np.array(ys), "guard_failure",
                                 message=f"step guard rejected down to h_min "
                                         f"at xi={xi:.6g}")
            continue

        # event check on the accepted interval [xi, xi + h]
        fired = []
        g_new = [float(g(y_new)) for g in ev_funcs]
        for idx, (g0, g1) in enumerate(zip(gvals, g_new)):
            if not (np.isfinite(g0) and np.isfinite(g1)):
                continue
            if g0 == 0.0:
                continue  # not yet armed (left the zero set this step)
            crosses = g0 * g1 < 0.0 or (g1 == 0.0)
            wanted = (ev_dirs[idx] == 0
                      or (ev_dirs[idx] < 0 and g0 > 0.0)
                      or (ev_dirs[idx] > 0 and g0 < 0.0))
            if crosses and wanted:
                t_star = _locate(field, y, h, ev_funcs[idx], g0, g1,
                                 atol, rtol)
                fired.append((t_star, idx))
        if fired:
            t_star, idx = min(fired)
            y_star = _subintegrate(field, y, t_star, atol, rtol)
            xs.append(xi + t_star)
            ys.append(y_star)
            return OdeResult(np.array(xs), np.array(ys), "event",
                             event_index=idx)

        xi += h
        y = y_new
        xs.append(xi)
        ys.append(y.copy())
        gvals = g_new
        factor = 5.0 if enorm == 0.0 else min(5.0, max(0.2, 0.9 * enorm ** -0.2))
        h *= factor
    return OdeResult(np.array(xs), np.array(ys), "step_failure",
                     message="max_steps exhausted")


def _subintegrate(field, y_start, t, atol, rtol):
    """State at parameter offset t from y_start, by error-controlled RK45."""
    if t == 0.0:
        return y_start.copy()
    y = y_start.copy()
    s = 0.0
    h = t
    for _ in range(10000):
        h = min(h, t - s)
        y_new, err = _rk45_step(field, y, h)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        enorm = float(np.max(np.abs(err) / scale))
        if enorm > 1.0:
            h *= max(0.2, 0.9 * enorm ** -0.2)
            continue
        s += h
        y = y_new
        if s >= t:
            return y
        h *= 5.0 if enorm == 0.0 else min(5.0, max(0.2, 0.9 * enorm ** -0.2))
    raise RuntimeError("sub-integration did not reach the target offset")


def _locate(field, y_start, h, g, g0, g1, atol, rtol):
    """Bisect the crossing parameter of monitor g within an accepted step."""

    def phi(t):
        if t <= 0.0:
            return g0
        if t >= h:
            return g1
        return float(g(_subintegrate(field, y_start, t, atol, rtol)))

    try:
        return float(brentq(phi, 0.0, h, xtol=1e-12 * max(1.0, h),
                            rtol=1e-15))
    except ValueError:
        # the monitor can turn unevaluable inside the step (e.g. an
        # eigenpair probe entering a complex pocket); treat such points as
        # already past the crossing so the bisection lands on the nearer of
        # the true zero and the evaluability edge
        a, b, fa = 0.0, h, g0
        xtol = 1e-12 * max(1.0, h)
        while b - a > xtol:
            m = 0.5 * (a + b)
            fm = phi(m)
            if not np.isfinite(fm):
                fm = -fa
            if fa * fm <= 0.0:
                b = m
            else:
                a, fa = m, fm
        return float(b)
