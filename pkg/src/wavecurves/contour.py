"""Zero-contour tracing of scalar functions on a 2-D box.

Marching squares on a regular grid with per-edge root refinement: every
contour point lies on a grid edge and is polished there by bisection, so the
traced points satisfy f = 0 to root-finder precision rather than to linear
interpolation accuracy.  Cell segments are chained into polylines through
shared grid edges; saddle cells are disambiguated by the sign at the cell
center.

Used for jump-locus construction (the scalar jump-compatibility function of
2-component models) and for bifurcation-locus scans (discriminant and
genuine-nonlinearity monitors).
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq

# edge sets per marching-squares case; complements share the same edges
_CASES = {
    0: [], 15: [],
    1: [("left", "bottom")], 14: [("left", "bottom")],
    2: [("bottom", "right")], 13: [("bottom", "right")],
    3: [("left", "right")], 12: [("left", "right")],
    4: [("right", "top")], 11: [("right", "top")],
    6: [("bottom", "top")], 9: [("bottom", "top")],
    7: [("left", "top")], 8: [("left", "top")],
}


def contour_zero(f, lo, hi, shape=(128, 128)):
    """Polylines of the zero level set of f on [lo, hi] (2-D box).

    Returns a list of (m, 2) arrays ordered along each branch.  f is a
    scalar function of a length-2 point.  Cells whose corners carry no sign
    change contribute nothing, so isolated zeros of constant sign (tangent
    touches) are not resolved -- callers needing those use dedicated
    refinement.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    nx, ny = shape
    xs = np.linspace(lo[0], hi[0], nx + 1)
    ys = np.linspace(lo[1], hi[1], ny + 1)
    vals = np.empty((nx + 1, ny + 1))
    for i in range(nx + 1):
        for j in range(ny + 1):
            vals[i, j] = f(np.array([xs[i], ys[j]]))
    if not np.all(np.isfinite(vals)):
        raise ValueError("contour function returned non-finite values on grid")

    pos = vals > 0.0
    points = {}  # global edge id -> refined crossing point

    def edge_point(i, j, orient):
        """Refined zero on edge ((i,j) -> one step along orient)."""
        key = (i, j, orient)
        if key in points:
            return key
        if orient == "h":
            p0 = np.array([xs[i], ys[j]])
            p1 = np.array([xs[i + 1], ys[j]])
            v0, v1 = vals[i, j], vals[i + 1, j]
        else:
            p0 = np.array([xs[i], ys[j]])
            p1 = np.array([xs[i], ys[j + 1]])
            v0, v1 = vals[i, j], vals[i, j + 1]
        if v0 == 0.0:
            points[key] = p0
        elif v1 == 0.0:
            points[key] = p1
        elif v0 * v1 > 0.0:
            # can happen only via saddle disambiguation mistakes; fall back
            # to the midpoint rather than failing the whole trace
            points[key] = 0.5 * (p0 + p1)
        else:
            t = brentq(lambda t: f(p0 + t * (p1 - p0)), 0.0, 1.0,
                       xtol=1e-15, rtol=1e-15)
            points[key] = p0 + t * (p1 - p0)
        return key

    def cell_edge(i, j, name):
        if name == "bottom":
            return edge_point(i, j, "h")
        if name == "top":
            return edge_point(i, j + 1, "h")
        if name == "left":
            return edge_point(i, j, "v")
        return edge_point(i + 1, j, "v")  # right

    segments = []
    for i in range(nx):
        for j in range(ny):
            case = (int(pos[i, j]) | int(pos[i + 1, j]) << 1
                    | int(pos[i + 1, j + 1]) << 2 | int(pos[i, j + 1]) << 3)
            if case in _CASES:
                pairs = _CASES[case]
            else:
                # saddle (5 or 10): split by the sign at the cell center
                center = f(np.array([0.5 * (xs[i] + xs[i + 1]),
                                     0.5 * (ys[j] + ys[j + 1])]))
                if case == 5:
                    pairs = ([("left", "top"), ("bottom", "right")]
                             if center > 0 else
                             [("left", "bottom"), ("right", "top")])
                else:  # case 10
                    pairs = ([("left", "bottom"), ("right", "top")]
                             if center > 0 else
                             [("left", "top"), ("bottom", "right")])
            for a, b in pairs:
                segments.append((cell_edge(i, j, a), cell_edge(i, j, b)))

    return [np.array([points[k] for k in chain])
            for chain in _chain_segments(segments)]


def _chain_segments(segments):
    """Assemble edge-id segments into ordered chains (paths and loops)."""
    adj = {}
    for a, b in segments:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    unused = {tuple(sorted(s)) for s in segments}
    chains = []

    def take(a, b):
        unused.discard(tuple(sorted((a, b))))

    # open paths first: start at odd-degree nodes
    for start in sorted(k for k, v in adj.items() if len(v) == 1):
        if not any(tuple(sorted((start, n))) in unused for n in adj[start]):
            continue
        chain = [start]
        node = start
        while True:
            nxt = next((n for n in adj[node]
                        if tuple(sorted((node, n))) in unused), None)
            if nxt is None:
                break
            take(node, nxt)
            chain.append(nxt)
            node = nxt
        chains.append(chain)
    # remaining are loops
    while unused:
        a, b = min(unused)
        take(a, b)
        chain = [a, b]
        node = b
        while True:
            nxt = next((n for n in adj[node]
                        if tuple(sorted((node, n))) in unused), None)
            if nxt is None:
                break
            take(node, nxt)
            chain.append(nxt)
            node = nxt
        chains.append(chain)
    return chains
