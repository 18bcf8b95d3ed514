"""Critical set computation: fiber roots, branch and fold-curve continuation.

The critical set C[g] = {g = 0} carries the slow dynamics.  For one slow
variable it is covered by branch polylines with stability tags and fold
annotations; for two slow variables the fold set {g = 0, g_x = 0} is a
curve traced by pseudo-arclength continuation, with cusp points marked
where g_xx changes sign along it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import MultiPoly


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances shared by the geometry pipeline.

    residual: polished-root acceptance on |g| and |g_x|
    detect:   threshold below which a quantity counts as zero
    geom:     point-merging distance, relative to the box diagonal
    """
    residual: float = 1e-10
    detect: float = 1e-8
    geom: float = 1e-6


DEFAULT_TOL = Tolerances()


# ---------------------------------------------------------------------------
# Univariate real roots (recursive bisection on critical values + Newton)
# ---------------------------------------------------------------------------

def _poly_eval(coeffs, x):
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def _poly_deriv(coeffs):
    return [i * c for i, c in enumerate(coeffs)][1:]


def _trim(coeffs):
    scale = max((abs(c) for c in coeffs), default=0.0)
    if scale == 0.0:
        return []
    out = list(coeffs)
    while out and abs(out[-1]) <= 1e-14 * scale:
        out.pop()
    return out


def polyline_distance(points, p):
    """Distance from p to a polyline given as an (n, d) array of vertices."""
    pts = np.asarray(points, dtype=float)
    q = np.asarray(p, dtype=float)
    if len(pts) == 1:
        return float(np.linalg.norm(pts[0] - q))
    a = pts[:-1]
    b = pts[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom[denom == 0.0] = 1e-300
    t = np.clip(np.einsum("ij,ij->i", q - a, ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return float(np.min(np.linalg.norm(proj - q, axis=1)))


def _bisect_root(coeffs, lo, hi, flo, fhi):
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        fm = _poly_eval(coeffs, mid)
        if fm == 0.0:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi, fhi = mid, fm
    return 0.5 * (lo + hi)


def _newton_polish(coeffs, dcoeffs, x, lo, hi):
    for _ in range(12):
        f = _poly_eval(coeffs, x)
        d = _poly_eval(dcoeffs, x)
        if d == 0.0:
            break
        step = f / d
        x2 = x - step
        if not (lo - 1e-9 <= x2 <= hi + 1e-9):
            break
        x = x2
        if abs(step) < 1e-15 * max(1.0, abs(x)):
            break
    return x


def real_roots(coeffs, lo, hi, tol=DEFAULT_TOL):
    """All real roots of a univariate polynomial (ascending coefficients)
    inside [lo, hi].  Returns (roots, multiple_flags); even-multiplicity
    roots are recovered from near-zero critical values.
    """
    coeffs = _trim(coeffs)
    n = len(coeffs) - 1
    if n <= 0:
        return [], []
    if n == 1:
        r = -coeffs[0] / coeffs[1]
        return ([r], [False]) if lo <= r <= hi else ([], [])

    dcoeffs = _poly_deriv(coeffs)
    crit, _ = real_roots(dcoeffs, lo, hi, tol)
    knots = sorted({lo, hi, *crit})
    roots, flags = [], []
    vals = [_poly_eval(coeffs, k) for k in knots]
    for i in range(len(knots) - 1):
        a, b = knots[i], knots[i + 1]
        fa, fb = vals[i], vals[i + 1]
        if fa == 0.0 and i == 0:
            roots.append(a)
            flags.append(False)
        if fb == 0.0:
            roots.append(b)
            flags.append(False)
            continue
        if fa == 0.0:
            continue
        if (fa < 0) != (fb < 0):
            r = _bisect_root(coeffs, a, b, fa, fb)
            r = _newton_polish(coeffs, dcoeffs, r, a, b)
            roots.append(r)
            flags.append(False)
    # even-multiplicity roots sit at critical points whose residual is at
    # evaluation-noise level (local magnitude of the monomial sum)
    for c in crit:
        fc = _poly_eval(coeffs, c)
        mag = _poly_eval([abs(v) for v in coeffs], abs(c))
        if abs(fc) <= 1e-11 * max(mag, 1e-300):
            if all(abs(c - r) > 1e-7 * max(1.0, abs(c)) for r in roots):
                roots.append(c)
                flags.append(True)
    order = sorted(range(len(roots)), key=lambda i: roots[i])
    return [roots[i] for i in order], [flags[i] for i in order]


# ---------------------------------------------------------------------------
# Fiber roots of the layer equation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FiberRoot:
    """Equilibrium of the layer equation x' = g(x, y) on one fast fiber."""
    x: float
    stability: str           # attracting | repelling | nonhyperbolic
    residual_g: float
    residual_gx: float


def univariate_in_x(poly, yvals):
    """Collapse a MultiPoly to ascending x-coefficients at fixed slow point."""
    deg = poly.degree("x")
    coeffs = [0.0] * (deg + 1)
    y1 = yvals[0]
    y2 = yvals[1] if len(yvals) > 1 else 0.0
    for e, c in poly.terms.items():
        v = c
        if e[1]:
            v *= y1 ** e[1]
        if e[2]:
            v *= y2 ** e[2]
        coeffs[e[0]] += v
    return coeffs


def fiber_roots(system, y, tol=DEFAULT_TOL):
    """All layer equilibria on the fiber above y, ascending in x.

    Stability comes from the sign of g_x; multiple roots are tagged
    nonhyperbolic.  y may be a scalar (n=1) or a pair (n=2).
    """
    yvals = (float(y),) if np.isscalar(y) else tuple(float(v) for v in y)
    coeffs = univariate_in_x(system.g, yvals)
    lo, hi = system.domain.x
    roots, flags = real_roots(coeffs, lo, hi, tol)
    gfun = system.partial("g")
    gx = system.partial("g", "x")
    out = []
    y1 = yvals[0]
    y2 = yvals[1] if len(yvals) > 1 else 0.0
    for r, multiple in zip(roots, flags):
        d = gx(r, y1, y2)
        if multiple or abs(d) <= tol.detect:
            stab = "nonhyperbolic"
        elif d < 0:
            stab = "attracting"
        else:
            stab = "repelling"
        out.append(FiberRoot(r, stab, abs(gfun(r, y1, y2)), abs(d)))
    return out


# ---------------------------------------------------------------------------
# Branch continuation, n = 1
# ---------------------------------------------------------------------------

@dataclass
class FoldPoint:
    """Polished point of the fold set {g = 0, g_x = 0}."""
    point: tuple
    direction: float = 0.0       # g_xx * g_y at the point (n=1)
    local_class: str = ""        # filled by the classify module
    residual: float = 0.0

    @property
    def x(self):
        return self.point[0]

    @property
    def y(self):
        return self.point[1]


@dataclass
class Branch:
    """Connected component of C[g] in the box, as an oriented polyline."""
    points: list                 # [(x, y), ...]
    stability: list              # per-point tag
    folds: list = field(default_factory=list)   # FoldPoint, ordered along the polyline
    fold_indices: list = field(default_factory=list)
    ends: tuple = ("domain-boundary", "domain-boundary")
    stalled: bool = False

    def closed(self):
        return self.ends[0] == "closed-loop"


def _newton2(fns, jac, z, residual, max_iter=40, damping=True):
    """Damped Newton on a square 2x2 or 3x3 system given callables."""
    z = np.asarray(z, dtype=float)
    for _ in range(max_iter):
        f = np.asarray(fns(z))
        if np.max(np.abs(f)) < residual:
            return z, True
        J = np.asarray(jac(z))
        try:
            step = np.linalg.solve(J, f)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(J, f, rcond=None)
        t = 1.0
        base = np.max(np.abs(f))
        while damping and t > 1e-4:
            trial = z - t * step
            if np.max(np.abs(np.asarray(fns(trial)))) < base:
                break
            t *= 0.5
        z = z - t * step
    return z, np.max(np.abs(np.asarray(fns(z)))) < residual * 100


def polish_fold(system, point, tol=DEFAULT_TOL):
    """Newton-polish a fold candidate onto {g = 0, g_x = 0} (n = 1)."""
    g = system.partial("g")
    gx = system.partial("g", "x")
    gxx = system.partial("g", "xx")
    gy = system.partial("g", "y1")
    gxy = system.partial("g", "xy1")

    def fns(z):
        return (g(z[0], z[1]), gx(z[0], z[1]))

    def jac(z):
        return ((gx(z[0], z[1]), gy(z[0], z[1])),
                (gxx(z[0], z[1]), gxy(z[0], z[1])))

    z, ok = _newton2(fns, jac, point, tol.residual)
    res = max(abs(g(z[0], z[1])), abs(gx(z[0], z[1])))
    fp = FoldPoint(point=(float(z[0]), float(z[1])),
                   direction=gxx(z[0], z[1]) * gy(z[0], z[1]),
                   residual=res)
    return fp, ok and res < tol.residual * 100


def _stab_tag(gx_val, tol):
    if abs(gx_val) <= tol.detect:
        return "nonhyperbolic"
    return "attracting" if gx_val < 0 else "repelling"


class _Chain:
    """Strand of C[g] between two fibers: a graph x(y) with g_x of one sign."""
    __slots__ = ("xs", "ys", "stab", "lo_end", "hi_end")

    def __init__(self):
        self.xs, self.ys, self.stab = [], [], []
        self.lo_end = None   # ("boundary",) | ("fold", fold_id) | ("stall",)
        self.hi_end = None


def trace_branches(system, n_seed_fibers=64, tol=DEFAULT_TOL,
                   max_points=20000, extra_seeds=()):
    """Cover C[g] (n = 1) with branch polylines.

    Between folds every strand of the critical set is a graph x(y), so the
    set is reconstructed by sweeping fast fibers: roots on an adaptive
    y-grid are matched in sorted order between neighbouring fibers, and a
    root-count change is refined by bisection in y to either a fold (a
    colliding root pair, Newton-polished on {g = 0, g_x = 0}) or an exit
    through the x-boundary.  Features narrower than the seed grid need an
    extra seed to be picked up.
    """
    if system.n_slow != 1:
        raise ValueError("trace_branches requires n_slow == 1")
    (ylo, yhi), = system.domain.y
    height = yhi - ylo
    xlo, xhi = system.domain.x
    width = system.domain.x_width()
    dy_event = 1e-6 * height
    dx_max = 2.5e-2 * system.domain.diagonal()
    x_edge = 1e-3 * width

    fiber_cache = {}

    def fiber(y):
        r = fiber_cache.get(y)
        if r is None:
            r = fiber_roots(system, y, tol)
            # nudge off a fiber that cuts a fold (near-)exactly, so the
            # root count stays well defined on every sampled fiber
            bump = 3.1e-9 * height
            while any(rt.stability == "nonhyperbolic" for rt in r) \
                    and bump < 0.05 * dy_event:
                r = fiber_roots(system, y + bump, tol)
                bump *= 4.0
            fiber_cache[y] = r
        return r

    ys = set(np.linspace(ylo, yhi, n_seed_fibers))
    for s in extra_seeds:
        yv = float(s[1])
        if ylo < yv < yhi:
            for d in (-2e-4 * height, 0.0, 2e-4 * height):
                yy = min(max(yv + d, ylo), yhi)
                ys.add(yy)
    ys = sorted(ys)

    chains = []
    folds = {}
    fold_counter = [0]
    active = []      # chain indices, ascending in x at the current fiber
    stalled = [False]

    def new_chain(x, y, stab, lo_end):
        ch = _Chain()
        ch.xs.append(x)
        ch.ys.append(y)
        ch.stab.append(stab)
        ch.lo_end = lo_end
        chains.append(ch)
        return len(chains) - 1

    def extend(idx, x, y, stab):
        ch = chains[idx]
        ch.xs.append(x)
        ch.ys.append(y)
        ch.stab.append(stab)

    def add_fold(pair_mid, y_mid):
        fp, ok = polish_fold(system, (pair_mid, y_mid), tol)
        fid = fold_counter[0]
        fold_counter[0] += 1
        folds[fid] = fp
        if not ok:
            stalled[0] = True
        return fid

    def transition(ya, ra, yb, rb, depth=0):
        """Advance the active chains from fiber ya (roots ra) to yb (rb)."""
        xa = [r.x for r in ra]
        xb = [r.x for r in rb]
        if len(xa) == len(xb):
            moved = max((abs(a - b) for a, b in zip(xa, xb)), default=0.0)
            stab_ok = all(ra[i].stability == rb[i].stability
                          for i in range(len(xa)))
            if (moved <= dx_max and stab_ok) or yb - ya <= dy_event or depth > 48:
                for i, r in enumerate(rb):
                    extend(active[i], r.x, yb, r.stability)
                return
        if yb - ya > dy_event and depth <= 48:
            ym = 0.5 * (ya + yb)
            rm = fiber(ym)
            transition(ya, ra, ym, rm, depth + 1)
            transition(ym, rm, yb, rb, depth + 1)
            return
        _resolve_event(ya, ra, yb, rb)

    def _resolve_event(ya, ra, yb, rb):
        """Counts change across a tiny y-interval: pair colliding roots
        into folds, send boundary-grazing roots out through the x-edge."""
        xa = [r.x for r in ra]
        xb = [r.x for r in rb]
        # match survivors greedily by proximity
        thr = 5e-3 * width
        ia, ib = 0, 0
        match = []
        un_a, un_b = [], []
        # dynamic order-preserving matching on sorted lists
        while ia < len(xa) and ib < len(xb):
            d = abs(xa[ia] - xb[ib])
            if d <= thr:
                match.append((ia, ib))
                ia += 1
                ib += 1
            elif xa[ia] < xb[ib]:
                un_a.append(ia)
                ia += 1
            else:
                un_b.append(ib)
                ib += 1
        un_a.extend(range(ia, len(xa)))
        un_b.extend(range(ib, len(xb)))

        y_mid = 0.5 * (ya + yb)
        closing = {}
        # disappearing roots: adjacent pairs collide at a fold; lone roots
        # near the x-edge leave the box
        k = 0
        while k < len(un_a):
            if k + 1 < len(un_a) and un_a[k + 1] == un_a[k] + 1:
                i1, i2 = un_a[k], un_a[k + 1]
                fid = add_fold(0.5 * (xa[i1] + xa[i2]), y_mid)
                closing[i1] = ("fold", fid)
                closing[i2] = ("fold", fid)
                k += 2
            else:
                i1 = un_a[k]
                if min(abs(xa[i1] - xlo), abs(xa[i1] - xhi)) < max(x_edge, thr):
                    closing[i1] = ("boundary",)
                else:
                    closing[i1] = ("stall",)
                    stalled[0] = True
                k += 1
        opening = {}
        k = 0
        while k < len(un_b):
            if k + 1 < len(un_b) and un_b[k + 1] == un_b[k] + 1:
                j1, j2 = un_b[k], un_b[k + 1]
                fid = add_fold(0.5 * (xb[j1] + xb[j2]), y_mid)
                opening[j1] = ("fold", fid)
                opening[j2] = ("fold", fid)
                k += 2
            else:
                j1 = un_b[k]
                if min(abs(xb[j1] - xlo), abs(xb[j1] - xhi)) < max(x_edge, thr):
                    opening[j1] = ("boundary",)
                else:
                    opening[j1] = ("stall",)
                    stalled[0] = True
                k += 1

        new_active = [None] * len(xb)
        for i, end in closing.items():
            chains[active[i]].hi_end = end
        for i, j in match:
            new_active[j] = active[i]
        for j, start in opening.items():
            new_active[j] = new_chain(rb[j].x, yb, rb[j].stability, start)
        for j, idx in enumerate(new_active):
            if idx is None:  # defensive: unmatched leftover, treat as new
                new_active[j] = new_chain(rb[j].x, yb, rb[j].stability, ("stall",))
                stalled[0] = True
            elif j not in opening:
                extend(new_active[j], rb[j].x, yb, rb[j].stability)
        active[:] = new_active

    r0 = fiber(ys[0])
    active[:] = [new_chain(r.x, ys[0], r.stability, ("boundary",)) for r in r0]
    prev_y, prev_r = ys[0], r0
    for y in ys[1:]:
        r = fiber(y)
        transition(prev_y, prev_r, y, r)
        prev_y, prev_r = y, r
    for idx in active:
        chains[idx].hi_end = ("boundary",)

    branches = _stitch_chains(chains, folds, tol, stalled[0])
    for br in branches:
        _insert_degenerate_folds(system, br, tol)
    _canonicalize(branches)
    return branches


def _insert_degenerate_folds(system, br, tol):
    """Find fold-set points that leave the fiber-root count unchanged
    (g_x touching zero along the branch, e.g. a cubic hysteresis point):
    located as inflections of the branch (g_xx sign change) where g_x is
    also below threshold."""
    gx = system.partial("g", "x")
    gxx = system.partial("g", "xx")
    gy = system.partial("g", "y1")
    g = system.partial("g")
    pts = br.points
    vals = [gxx(p[0], p[1]) for p in pts]
    gx_scale = max(max((abs(gx(p[0], p[1])) for p in pts), default=1.0), 1.0)
    new_folds = []
    for i in range(len(pts) - 1):
        a, b = vals[i], vals[i + 1]
        if a == 0.0 or (a < 0) != (b < 0):
            w = abs(a) / (abs(a) + abs(b)) if abs(a) + abs(b) > 0 else 0.5
            guess = (pts[i][0] + w * (pts[i + 1][0] - pts[i][0]),
                     pts[i][1] + w * (pts[i + 1][1] - pts[i][1]))
            z, ok = _newton2(
                lambda z: (g(z[0], z[1]), gxx(z[0], z[1])),
                lambda z: ((gx(z[0], z[1]), gy(z[0], z[1])),
                           (system.partial("g", "xxx")(z[0], z[1]),
                            system.partial("g", "xxy1")(z[0], z[1]))),
                guess, tol.residual)
            if not ok:
                continue
            if abs(gx(z[0], z[1])) < 1e-8 * gx_scale \
                    and system.domain.contains(z):
                fp = FoldPoint(point=(float(z[0]), float(z[1])),
                               direction=gxx(z[0], z[1]) * gy(z[0], z[1]),
                               residual=max(abs(g(z[0], z[1])),
                                            abs(gx(z[0], z[1]))))
                if all(math.hypot(fp.x - q.x, fp.y - q.y)
                       > 1e-6 * system.domain.diagonal() for q in br.folds):
                    new_folds.append((i + 1, fp))
    offset = 0
    for i, fp in new_folds:
        br.points.insert(i + offset, fp.point)
        br.stability.insert(i + offset, "nonhyperbolic")
        br.fold_indices = [k if k < i + offset else k + 1
                           for k in br.fold_indices]
        br.fold_indices.append(i + offset)
        br.folds.append(fp)
        offset += 1
    if new_folds:
        order = sorted(range(len(br.folds)), key=lambda k: br.fold_indices[k])
        br.folds = [br.folds[k] for k in order]
        br.fold_indices = sorted(br.fold_indices)


def _stitch_chains(chains, folds, tol, stalled):
    """Join chains through shared fold endpoints into branch polylines."""
    # each fold id is shared by exactly two chain-ends
    fold_ends = {}
    for ci, ch in enumerate(chains):
        for side, end in (("lo", ch.lo_end), ("hi", ch.hi_end)):
            if end and end[0] == "fold":
                fold_ends.setdefault(end[1], []).append((ci, side))

    visited = set()
    branches = []

    def chain_points(ci, from_side):
        ch = chains[ci]
        pts = list(zip(ch.xs, ch.ys))
        stab = list(ch.stab)
        if from_side == "hi":
            pts.reverse()
            stab.reverse()
        return pts, stab

    def end_of(ci, side):
        return chains[ci].lo_end if side == "lo" else chains[ci].hi_end

    for start_ci in range(len(chains)):
        if start_ci in visited or not chains[start_ci].xs:
            continue
        comp = _component(start_ci, chains, fold_ends)
        start = None
        for ci in comp:
            for side in ("lo", "hi"):
                end = end_of(ci, side)
                if not end or end[0] != "fold":
                    start = (ci, side)
                    break
            if start:
                break
        is_loop = start is None
        if is_loop:
            start = (comp[0], "lo")

        pts, stab, fps, fidx = [], [], [], []
        ci, enter_side = start
        closed = False
        while True:
            visited.add(ci)
            cpts, cstab = chain_points(ci, enter_side)
            pts.extend(cpts)
            stab.extend(cstab)
            exit_side = "hi" if enter_side == "lo" else "lo"
            end = end_of(ci, exit_side)
            if not end or end[0] != "fold":
                break
            fp = folds[end[1]]
            fps.append(fp)
            pts.append(fp.point)
            stab.append("nonhyperbolic")
            fidx.append(len(pts) - 1)
            partners = [e for e in fold_ends.get(end[1], [])
                        if e != (ci, exit_side)]
            if not partners:
                break
            nci, nside = partners[0]
            if nci in visited:
                closed = True
                break
            ci, enter_side = nci, nside
        if is_loop or closed:
            ends = ("closed-loop", "closed-loop")
            if pts and pts[0] != pts[-1]:
                pts.append(pts[0])
                stab.append(stab[0])
        else:
            ends = ("domain-boundary", "domain-boundary")
        branches.append(Branch(points=pts, stability=stab, folds=fps,
                               fold_indices=fidx, ends=ends, stalled=stalled))
    return [b for b in branches if len(b.points) >= 2]


def _component(start, chains, fold_ends):
    comp, stack, seen = [], [start], set()
    fold_of = {}
    for fid, ends in fold_ends.items():
        for ci, _side in ends:
            fold_of.setdefault(ci, set()).add(fid)
    while stack:
        ci = stack.pop()
        if ci in seen:
            continue
        seen.add(ci)
        comp.append(ci)
        for fid in fold_of.get(ci, ()):
            for cj, _s in fold_ends[fid]:
                if cj not in seen:
                    stack.append(cj)
    return comp


def _canonicalize(branches):
    for br in branches:
        if br.closed():
            continue
        first, last = br.points[0], br.points[-1]
        if (last[1], last[0]) < (first[1], first[0]):
            br.points.reverse()
            br.stability.reverse()
            br.ends = (br.ends[1], br.ends[0])
            n = len(br.points)
            br.fold_indices = [n - 1 - i for i in reversed(br.fold_indices)]
            br.folds.reverse()
    branches.sort(key=lambda b: (b.points[0][1], b.points[0][0]))


def all_folds(branches):
    """Folds of every branch, ordered by (y, x)."""
    folds = [fp for br in branches for fp in br.folds]
    folds.sort(key=lambda f: (f.y, f.x))
    return folds


def coverage_gap(system, branches, n_check=256, tol=DEFAULT_TOL):
    """Largest distance from any fine-grid fiber root to the branch cover."""
    (ylo, yhi), = system.domain.y
    worst = 0.0
    for y in np.linspace(ylo, yhi, n_check):
        for root in fiber_roots(system, y, tol):
            best = math.inf
            for br in branches:
                best = min(best, polyline_distance(br.points, (root.x, y)))
            worst = max(worst, best)
    return worst


# ---------------------------------------------------------------------------
# Fold-curve continuation, n = 2
# ---------------------------------------------------------------------------

@dataclass
class FoldCurve:
    """Polyline on {g = 0, g_x = 0} in (x, y1, y2) with cusp marks."""
    points: list
    cusps: list = field(default_factory=list)          # polished cusp points
    cusp_indices: list = field(default_factory=list)
    swallowtails: list = field(default_factory=list)   # cusps with g_xxx ~ 0
    ends: tuple = ("domain-boundary", "domain-boundary")
    stalled: bool = False

    def closed(self):
        return self.ends[0] == "closed-loop"


def _fold_system_fns(system):
    g = system.partial("g")
    gx = system.partial("g", "x")
    gxx = system.partial("g", "xx")
    gy1 = system.partial("g", "y1")
    gy2 = system.partial("g", "y2")
    gxy1 = system.partial("g", "xy1")
    gxy2 = system.partial("g", "xy2")

    def fns(z):
        return (g(*z), gx(*z))

    def rows(z):
        return ((gx(*z), gy1(*z), gy2(*z)),
                (gxx(*z), gxy1(*z), gxy2(*z)))

    return fns, rows


def polish_fold_point_n2(system, point, tol=DEFAULT_TOL):
    """Gauss-Newton a point onto the fold curve {g = 0, g_x = 0}."""
    fns, rows = _fold_system_fns(system)
    z = np.asarray(point, dtype=float)
    for _ in range(40):
        f = np.asarray(fns(z))
        if np.max(np.abs(f)) < tol.residual:
            return tuple(map(float, z)), True
        J = np.asarray(rows(z))
        step, *_ = np.linalg.lstsq(J, f, rcond=None)
        z = z - step
    return tuple(map(float, z)), bool(np.max(np.abs(np.asarray(fns(z)))) < tol.residual * 100)


def polish_cusp(system, point, tol=DEFAULT_TOL):
    """Newton the 3x3 system {g = 0, g_x = 0, g_xx = 0} for a cusp point."""
    g = system.partial("g")
    gx = system.partial("g", "x")
    gxx = system.partial("g", "xx")
    gxxx = system.partial("g", "xxx")
    gy1 = system.partial("g", "y1")
    gy2 = system.partial("g", "y2")
    gxy1 = system.partial("g", "xy1")
    gxy2 = system.partial("g", "xy2")
    gxxy1 = system.partial("g", "xxy1")
    gxxy2 = system.partial("g", "xxy2")

    def fns(z):
        return (g(*z), gx(*z), gxx(*z))

    def jac(z):
        return ((gx(*z), gy1(*z), gy2(*z)),
                (gxx(*z), gxy1(*z), gxy2(*z)),
                (gxxx(*z), gxxy1(*z), gxxy2(*z)))

    z, ok = _newton2(fns, jac, point, tol.residual)
    return tuple(map(float, z)), ok


def continue_fold_curve(system, seed, tol=DEFAULT_TOL, max_points=20000):
    """Trace the fold curve through a seed point (n = 2).

    Pseudo-arclength continuation of {g = 0, g_x = 0} in three unknowns;
    cusp points are inserted where g_xx changes sign and swallowtail
    candidates flagged where g_xxx is also below threshold.
    """
    if system.n_slow != 2:
        raise ValueError("continue_fold_curve requires n_slow == 2")
    z0, ok = polish_fold_point_n2(system, seed, tol)
    if not ok:
        raise ValueError(f"seed {seed!r} failed to converge onto the fold curve")

    fns, rows = _fold_system_fns(system)
    gxx = system.partial("g", "xx")
    gxxx = system.partial("g", "xxx")
    diag = system.domain.diagonal()
    h0, hmin, hmax = 1e-2 * diag, 1e-6 * diag, 5e-2 * diag

    def tangent(z, prev=None):
        r = np.asarray(rows(z))
        t = np.cross(r[0], r[1])
        n = np.linalg.norm(t)
        if n < 1e-14:
            # fall back to the null space for degenerate rows
            _, _, vt = np.linalg.svd(r)
            t = vt[-1]
            n = 1.0
        t = t / max(n, 1e-300)
        if prev is not None and float(t @ prev) < 0:
            t = -t
        return t

    def corrector(z_pred, t):
        def f3(z):
            a, b = fns(z)
            return (a, b, float(t @ (np.asarray(z) - z_pred)))

        def j3(z):
            r = rows(z)
            return (r[0], r[1], tuple(t))

        return _newton2(f3, j3, z_pred, tol.residual, max_iter=12, damping=False)

    def march(direction):
        pts = [np.asarray(z0, dtype=float)]
        t = tangent(pts[0]) * direction
        h = h0
        while len(pts) < max_points:
            z = pts[-1]
            z_pred = z + h * t
            z_new, ok = corrector(z_pred, t)
            t_new = tangent(z_new, prev=t) if ok else None
            if (not ok or t_new is None
                    or np.linalg.norm(z_new - z_pred) > 0.25 * h
                    or float(t_new @ t) < 0.5):
                h *= 0.4
                if h < hmin:
                    return pts, "stall"
                continue
            t = t_new
            pts.append(z_new)
            if not system.domain.contains(z_new):
                return pts, "domain-boundary"
            if len(pts) > 4 and np.linalg.norm(z_new - pts[0]) < 0.8 * h:
                if float(t @ (tangent(pts[0]) * direction)) > 0:
                    pts.append(pts[0].copy())
                    return pts, "closed-loop"
            h = min(h * 1.4, hmax)
        return pts, "stall"

    fwd, end_f = march(+1.0)
    if end_f == "closed-loop":
        pts, ends, stalled = fwd, ("closed-loop", "closed-loop"), False
    else:
        bwd, end_b = march(-1.0)
        pts = list(reversed(bwd[1:])) + fwd
        ends = (end_b if end_b != "stall" else "domain-boundary",
                end_f if end_f != "stall" else "domain-boundary")
        stalled = "stall" in (end_f, end_b)
    pts = [tuple(map(float, p)) for p in pts]

    curve = FoldCurve(points=pts, ends=ends, stalled=stalled)
    vals = [gxx(*p) for p in pts]
    offset = 0
    for i in range(len(pts) - 1):
        a, b = vals[i], vals[i + 1]
        if a == 0.0 or (a < 0) != (b < 0):
            w = abs(a) / (abs(a) + abs(b)) if (abs(a) + abs(b)) > 0 else 0.5
            guess = tuple(pts[i + offset][k] + w * (pts[i + 1 + offset][k] - pts[i + offset][k])
                          for k in range(3))
            cusp, ok = polish_cusp(system, guess, tol)
            if not ok:
                continue
            curve.points.insert(i + 1 + offset, cusp)
            curve.cusp_indices.append(i + 1 + offset)
            curve.cusps.append(cusp)
            offset += 1
            if abs(gxxx(*cusp)) < 1e-6 * _third_deriv_scale(system, cusp):
                curve.swallowtails.append(cusp)
    return curve


def _third_deriv_scale(system, p):
    gxx = system.partial("g", "xx")
    gxxxx = system.partial("g", "xxxx")
    w = system.domain.x_width()
    return max(abs(gxx(*p)) / max(w, 1e-30), abs(gxxxx(*p)) * w, 1.0)


def find_fold_curves(system, n_grid=6, tol=DEFAULT_TOL):
    """Locate all fold curves in the box by Gauss-Newton from a lattice of
    starting points, then continuation from the deduplicated seeds."""
    if system.n_slow != 2:
        raise ValueError("find_fold_curves requires n_slow == 2")
    (xlo, xhi) = system.domain.x
    (alo, ahi), (blo, bhi) = system.domain.y
    seeds = []
    for x in np.linspace(xlo, xhi, n_grid):
        for y1 in np.linspace(alo, ahi, n_grid):
            for y2 in np.linspace(blo, bhi, n_grid):
                z, ok = polish_fold_point_n2(system, (x, y1, y2), tol)
                if ok and system.domain.contains(z):
                    seeds.append(z)
    curves = []
    merge_tol = 40.0 * tol.geom * system.domain.diagonal()
    for s in seeds:
        dup = False
        for c in curves:
            arr = np.asarray(c.points)
            if np.min(np.linalg.norm(arr - np.asarray(s), axis=1)) < merge_tol:
                dup = True
                break
        if dup:
            continue
        try:
            curves.append(continue_fold_curve(system, s, tol))
        except ValueError:
            continue
    curves.sort(key=lambda c: tuple(c.points[0]))
    return curves


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def branches_csv(branches, n_slow=1):
    """Render branches (or fold curves) to the CSV exchange format."""
    cols = ["x", "y1"] + (["y2"] if n_slow == 2 else []) + ["stability", "annotation"]
    lines = [",".join(cols)]
    for br in branches:
        points = br.points
        n = len(points)
        if isinstance(br, Branch):
            fold_set = set(br.fold_indices)
            stab = br.stability
            special = {i: "fold" for i in fold_set}
        else:
            cusp_set = set(br.cusp_indices)
            swt = {tuple(p) for p in br.swallowtails}
            stab = ["" for _ in points]
            special = {i: ("swallowtail" if tuple(points[i]) in swt else "cusp")
                       for i in cusp_set}
        for i, p in enumerate(points):
            ann = special.get(i, "")
            if i == 0:
                ann = ann or br.ends[0]
            elif i == n - 1:
                ann = ann or br.ends[1]
            row = [f"{v:.17g}" for v in p] + [stab[i] if stab[i] else "", ann]
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"
