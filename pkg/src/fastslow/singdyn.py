"""Reduced slow dynamics, singular trajectories and bifurcation sweeps.

On an attracting sheet the slow motion obeys dX/dy = -g_y/g_x with
speed h(X(y), y); segments run until a fold, a slow equilibrium or the
box boundary, and their durations are adaptive quadrature of 1/h (with
a square-root substitution at fold endpoints).  Singular trajectories
alternate slow segments with umbral jumps; a revisited jump fold closes
a relaxation oscillation.  Parameter sweeps track scalar indicators on
a lambda-grid and bisect their sign changes into classified bifurcation
events.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import warnings

from scipy.integrate import IntegrationWarning, quad

from .critset import (DEFAULT_TOL, all_folds, fiber_roots, polish_fold,
                      polyline_distance, trace_branches)
from .classify import (classify_local_n1, detect_double_limits,
                       fold_direction_n1)
from .umbra import umbral_map

INF = float("inf")


# ---------------------------------------------------------------------------
# Slow segments
# ---------------------------------------------------------------------------

@dataclass
class SlowSegment:
    """Oriented ride along an attracting sheet."""
    points: list                 # polyline [(x, y), ...] in motion order
    y_interval: tuple            # (y_start, y_end), oriented
    end_kind: str                # fold | slow-equilibrium | boundary | rejoin
    start_kind: str = "interior"
    duration: float = 0.0
    end_point: tuple = None

    @property
    def start_point(self):
        return self.points[0]


def _compiled(system):
    return {
        "g": system.partial("g"),
        "gx": system.partial("g", "x"),
        "gy": system.partial("g", "y1"),
        "gxx": system.partial("g", "xx"),
        "h": system.partial("h"),
        "hx": system.partial("h", "x"),
        "hy": system.partial("h", "y1"),
    }


def _newton_x(fns, x, y, tol, max_iter=40):
    g, gx = fns["g"], fns["gx"]
    for _ in range(max_iter):
        f = g(x, y)
        if abs(f) < tol.residual:
            return x, True
        d = gx(x, y)
        if d == 0.0:
            return x, False
        x -= f / d
    return x, abs(g(x, y)) < 100 * tol.residual


def trace_slow(system, start, orientation=None, tol=DEFAULT_TOL,
               max_points=100000):
    """Follow the reduced flow from a point on an attracting sheet.

    Stops at a fold (polished), a slow equilibrium (h sign change,
    bisected), or the domain boundary.  The duration integral is finite
    at fold endpoints and declared infinite at equilibrium endpoints.
    """
    if system.n_slow != 1:
        raise ValueError("trace_slow requires n_slow == 1")
    fns = _compiled(system)
    x, y = float(start[0]), float(start[1])
    x, ok = _newton_x(fns, x, y, tol)
    if not ok:
        raise ValueError(f"start {start!r} is not on the critical set")
    gx0 = fns["gx"](x, y)
    scale = _gx_scale(system, fns)
    if gx0 > 1e-7 * scale:
        raise ValueError(f"start {start!r} lies on a repelling sheet")
    h0 = fns["h"](x, y)
    if orientation is None:
        if h0 == 0.0:
            raise ValueError(f"start {start!r} is a slow equilibrium")
        direction = 1.0 if h0 > 0 else -1.0
    else:
        direction = 1.0 if orientation > 0 else -1.0

    (ylo, yhi), = system.domain.y
    height = yhi - ylo
    step = 1e-3 * height
    step_min = 1e-10 * height
    fold_gx = 1e-6 * scale
    pts = [(x, y)]
    end_kind, end_point = None, None

    def fold_stop(x, y):
        fp, fold_ok = polish_fold(system, (x, y), tol)
        if fold_ok and (fp.y - y) * direction >= -1e-7 * height:
            pts.append(fp.point)
            return "fold", fp.point
        return "boundary", (x, y)

    while len(pts) < max_points:
        x, y = pts[-1]
        gxv = fns["gx"](x, y)
        if abs(gxv) < fold_gx:
            end_kind, end_point = fold_stop(x, y)
            break
        y_next = y + direction * step
        hit_boundary = False
        if y_next <= ylo or y_next >= yhi:
            y_next = min(max(y_next, ylo), yhi)
            hit_boundary = True
        slope = -fns["gy"](x, y) / gxv
        x_pred = x + slope * (y_next - y)
        x_new, ok = _newton_x(fns, x_pred, y_next, tol, max_iter=8)
        gx_new = fns["gx"](x_new, y_next)
        if not ok or gx_new > 0 or abs(x_new - x) > 0.1 * system.domain.x_width():
            # overran the fold: shrink, and when exhausted polish it
            if step > step_min:
                step *= 0.35
                continue
            end_kind, end_point = fold_stop(x, y)
            break
        h_new = fns["h"](x_new, y_next)
        if h_new == 0.0 or (h_new > 0) != (direction > 0):
            # slow equilibrium inside the step: bisect in y along the sheet
            y_eq, x_eq = _bisect_equilibrium(fns, tol, x, y, x_new, y_next)
            pts.append((x_eq, y_eq))
            end_kind, end_point = "slow-equilibrium", (x_eq, y_eq)
            break
        pts.append((x_new, y_next))
        if hit_boundary or not system.domain.contains((x_new, y_next)):
            end_kind, end_point = "boundary", (x_new, y_next)
            break
        # adapt: approach folds carefully, recover speed elsewhere
        if abs(gx_new) < 0.5 * abs(gxv):
            step = max(0.25 * step, step_min)
        else:
            step = min(step * 1.6, 5e-3 * height)
    else:
        end_kind, end_point = "boundary", pts[-1]

    seg = SlowSegment(points=pts, y_interval=(pts[0][1], pts[-1][1]),
                      end_kind=end_kind, end_point=end_point)
    seg.duration = _segment_duration(system, fns, seg, tol)
    return seg


def _gx_scale(system, fns):
    (xlo, xhi) = system.domain.x
    (ylo, yhi), = system.domain.y
    vals = [abs(fns["gx"](xlo + (xhi - xlo) * i / 4.0,
                          ylo + (yhi - ylo) * j / 4.0))
            for i in range(5) for j in range(5)]
    return max(max(vals), 1.0)


def _bisect_equilibrium(fns, tol, x_a, y_a, x_b, y_b):
    h = fns["h"]
    for _ in range(200):
        y_m = 0.5 * (y_a + y_b)
        x_m, _ = _newton_x(fns, 0.5 * (x_a + x_b), y_m, tol)
        hm = h(x_m, y_m)
        if hm == 0.0 or abs(y_b - y_a) < 1e-15 * max(1.0, abs(y_a)):
            return y_m, x_m
        if (hm > 0) == (h(x_a, y_a) > 0):
            x_a, y_a = x_m, y_m
        else:
            x_b, y_b = x_m, y_m
    return 0.5 * (y_a + y_b), 0.5 * (x_a + x_b)


def _segment_duration(system, fns, seg, tol):
    if seg.end_kind == "slow-equilibrium":
        return INF
    y0, y1 = seg.y_interval
    if y0 == y1:
        return 0.0
    ys = np.array([p[1] for p in seg.points])
    xs = np.array([p[0] for p in seg.points])
    order = np.argsort(ys)
    ys_o, xs_o = ys[order], xs[order]
    # collapse duplicate y values for interpolation
    keep = np.concatenate(([True], np.diff(ys_o) > 0))
    ys_o, xs_o = ys_o[keep], xs_o[keep]

    def X(y):
        x_guess = float(np.interp(y, ys_o, xs_o))
        x_val, _ = _newton_x(fns, x_guess, y, tol)
        return x_val

    def integrand(y):
        return 1.0 / fns["h"](X(y), y)

    def _quad(f, a, b):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IntegrationWarning)
            val, _err = quad(f, a, b, epsabs=1e-12, epsrel=1e-11, limit=200)
        return val

    if seg.end_kind != "fold":
        return abs(_quad(integrand, y0, y1))

    # square-root substitution at the fold endpoint removes the kink
    x_f, y_f = seg.end_point
    span = abs(y_f - y0)
    if span == 0.0:
        return 0.0
    direction = 1.0 if y_f > y0 else -1.0
    y_m = y_f - direction * min(0.2 * span, span)
    total = 0.0
    if y_m != y0:
        total += abs(_quad(integrand, y0, y_m))
    gxx_f = fns["gxx"](x_f, y_f)
    gy_f = fns["gy"](x_f, y_f)
    side = 1.0 if X(y_m) >= x_f else -1.0
    slope = side * math.sqrt(max(2.0 * abs(gy_f / gxx_f), 1e-300)) \
        if gxx_f != 0 else 0.0

    def X_near(u):
        y = y_f - direction * u * u
        x_guess = x_f + slope * u
        if u < 1e-8:
            return x_guess
        x_val, okk = _newton_x(fns, x_guess, y, tol)
        return x_val if okk else x_guess

    def integrand_u(u):
        y = y_f - direction * u * u
        return 2.0 * u / fns["h"](X_near(u), y)

    u_max = math.sqrt(abs(y_f - y_m))
    total += abs(_quad(integrand_u, 0.0, u_max))
    return total


# ---------------------------------------------------------------------------
# Slow equilibria and persistence
# ---------------------------------------------------------------------------

@dataclass
class EquilibriumRecord:
    point: tuple
    h_prime: float               # slope of the reduced flow; +-inf at a fold
    det_jac: float               # g_x h_y - h_x g_y
    on_attracting: bool
    saddle_node: bool = False    # E1 member (tangency of nullclines)
    sn_coefficient: float = None
    co_equilibria: list = field(default_factory=list)   # E2 partners
    fold_projection: str = None  # M_1_1 .. M_1_5 when sharing y with a fold
    shared_fold: tuple = None


def slow_equilibria(system, branches=None, tol=DEFAULT_TOL, tol_y=None):
    """All intersections of the slow nullcline with the critical set,
    with stability, tangency (E1), co-equilibrium (E2) and fold-projection
    (M) diagnostics."""
    fns = _compiled(system)
    if branches is None:
        branches = trace_branches(system, tol=tol)
    (ylo, yhi), = system.domain.y
    if tol_y is None:
        tol_y = 1e-6 * (yhi - ylo)

    h = fns["h"]
    found = []
    for br in branches:
        pts = br.points
        hv = [h(p[0], p[1]) for p in pts]
        for i in range(len(pts) - 1):
            a, b = hv[i], hv[i + 1]
            if a == 0.0 or (a < 0) != (b < 0):
                z = _polish_equilibrium(system, fns, pts[i], pts[i + 1], tol)
                if z is not None:
                    found.append(z)
        if hv and hv[-1] == 0.0:
            z = _polish_equilibrium(system, fns, pts[-1], pts[-1], tol)
            if z is not None:
                found.append(z)
    # dedupe
    uniq = []
    for z in sorted(found):
        if all(math.hypot(z[0] - u[0], z[1] - u[1])
               > 1e-8 * system.domain.diagonal() for u in uniq):
            uniq.append(z)

    folds = all_folds(branches)
    records = []
    scale = _gx_scale(system, fns)
    for z in uniq:
        x, y = z
        gx = fns["gx"](x, y)
        gy = fns["gy"](x, y)
        hx, hy = fns["hx"](x, y), fns["hy"](x, y)
        det = gx * hy - hx * gy
        at_fold = abs(gx) <= 1e-7 * scale
        if at_fold:
            # limit of -h_x g_y / g_x + h_y along the attracting side g_x -> 0-
            num = -hx * gy
            hp = -INF if num > 0 else INF if num < 0 else hy
            on_att = True
        else:
            hp = -hx * gy / gx + hy
            on_att = gx < 0
        rec = EquilibriumRecord(point=(x, y), h_prime=hp, det_jac=det,
                                on_attracting=on_att)
        dscale = max(abs(gx * hy), abs(hx * gy), 1.0)
        if abs(det) <= 1e-8 * dscale:
            rec.saddle_node = True
            rec.sn_coefficient = _saddle_node_coefficient(system, (x, y))
        records.append(rec)

    for i, r in enumerate(records):
        for j, s in enumerate(records):
            if i != j and abs(r.point[1] - s.point[1]) < tol_y:
                r.co_equilibria.append(s.point)
        shared = [fp for fp in folds if abs(fp.y - r.point[1]) < tol_y]
        if shared:
            r.fold_projection, r.shared_fold = _m_subcase(
                system, r, shared, tol)
    records.sort(key=lambda r: (r.point[1], r.point[0]))
    return records


def _polish_equilibrium(system, fns, pa, pb, tol):
    from .critset import _newton2
    g, gx, gy = fns["g"], fns["gx"], fns["gy"]
    h, hx, hy = fns["h"], fns["hx"], fns["hy"]
    z0 = (0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1]))
    z, ok = _newton2(
        lambda z: (g(z[0], z[1]), h(z[0], z[1])),
        lambda z: ((gx(z[0], z[1]), gy(z[0], z[1])),
                   (hx(z[0], z[1]), hy(z[0], z[1]))),
        z0, tol.residual)
    if not ok or not system.domain.contains(z, pad=1e-9):
        return None
    return (float(z[0]), float(z[1]))


def _saddle_node_coefficient(system, p):
    """Quadratic normal-form coefficient b = (1/2) <p, B(q,q)> at a
    saddle-node of the full vector field (g, h); only its sign matters."""
    x, y = p
    J = np.array([
        [system.partial("g", "x")(x, y), system.partial("g", "y1")(x, y)],
        [system.partial("h", "x")(x, y), system.partial("h", "y1")(x, y)],
    ])
    _u, s, vt = np.linalg.svd(J)
    q = vt[-1]
    _u2, s2, vt2 = np.linalg.svd(J.T)
    pvec = vt2[-1]
    denom = float(pvec @ q)
    if abs(denom) < 1e-12:
        return 0.0
    pvec = pvec / denom
    second = []
    for which in ("g", "h"):
        dxx = system.partial(which, "xx")(x, y)
        dxy = system.partial(which, "xy1")(x, y)
        dyy = system.partial(which, "y1y1")(x, y)
        second.append(dxx * q[0] ** 2 + 2 * dxy * q[0] * q[1]
                      + dyy * q[1] ** 2)
    return 0.5 * float(pvec @ np.asarray(second))


def _m_subcase(system, rec, shared_folds, tol):
    """Classify an equilibrium sharing its slow coordinate with a fold:
    fold intersection (sink/source), umbra intersection (sink/source) or
    non-interacting."""
    x_eq = rec.point[0]
    width = system.domain.x_width()
    near = 1e-3 * width
    best = min(shared_folds, key=lambda fp: abs(fp.x - x_eq))
    sink = rec.h_prime < 0
    if abs(best.x - x_eq) < near:
        return ("M_1_1" if sink else "M_1_2"), best.point
    for fp in shared_folds:
        try:
            res = umbral_map(system, fp.point, tol)
        except ValueError:
            continue
        for lnd in res.landings:
            if lnd is not None and abs(lnd.x - x_eq) < near:
                return ("M_1_3" if sink else "M_1_4"), fp.point
    return "M_1_5", best.point


@dataclass
class PersistenceReport:
    persistent: bool
    degenerate_folds: list       # (point, local class) outside quadratic folds
    double_limits: list          # DoubleLimitRecord
    tangencies: list             # E1 witnesses
    co_equilibria: list          # E2 witnesses
    fold_equilibrium: list       # M witnesses (record, subcase)

    def as_dict(self):
        return {
            "persistent": self.persistent,
            "D": [{"point": list(p), "class": c}
                  for p, c in self.degenerate_folds],
            "D3": [{"pair": [list(r.pair[0]), list(r.pair[1])],
                    "subcase": r.subcase} for r in self.double_limits],
            "E1": [list(p) for p in self.tangencies],
            "E2": [list(p) for p in self.co_equilibria],
            "M": [{"point": list(r.point), "subcase": m}
                  for r, m in self.fold_equilibrium],
        }


def persistence_report(system, branches=None, tol=DEFAULT_TOL):
    """Witness lists for every degeneracy blocking structural persistence
    (degenerate folds, double limits, nullcline tangencies, co-equilibria,
    fold-equilibrium projections)."""
    if system.n_slow != 1:
        raise ValueError("persistence_report requires n_slow == 1")
    if branches is None:
        branches = trace_branches(system, tol=tol)
    folds = all_folds(branches)
    bad_folds = []
    for fp in folds:
        cls = classify_local_n1(system, fp.point, tol)
        fp.local_class = cls.tag
        if cls.tag not in ("quadratic_fold", "regular"):
            bad_folds.append((fp.point, cls.tag))
    doubles = detect_double_limits(system, folds, tol=tol)
    eqs = slow_equilibria(system, branches, tol)
    e1 = [r.point for r in eqs if r.saddle_node]
    e2 = [r.point for r in eqs if r.co_equilibria]
    m = [(r, r.fold_projection) for r in eqs if r.fold_projection]
    return PersistenceReport(
        persistent=not (bad_folds or doubles or e1 or e2 or m),
        degenerate_folds=bad_folds,
        double_limits=doubles,
        tangencies=e1,
        co_equilibria=e2,
        fold_equilibrium=m,
    )


# ---------------------------------------------------------------------------
# Singular trajectories and relaxation oscillations
# ---------------------------------------------------------------------------

@dataclass
class FastJump:
    source: tuple
    target: tuple                # None on escape
    direction: int


@dataclass
class SingularTrajectory:
    segments: list               # alternating SlowSegment / FastJump
    termination: str             # equilibrium | boundary | escape | periodic | budget
    cycle_start: int = None      # index into segments where the cycle begins


@dataclass
class RelaxationOscillation:
    slow_segments: list
    jumps: list
    period: float
    simple: bool
    violations: list


def trace_singular_trajectory(system, start, max_jumps=64, tol=DEFAULT_TOL):
    """Concatenate fast relaxation, slow rides and umbral jumps from an
    arbitrary starting point until equilibrium, escape, periodicity or
    the jump budget."""
    if system.n_slow != 1:
        raise ValueError("trace_singular_trajectory requires n_slow == 1")
    fns = _compiled(system)
    x0, y0 = float(start[0]), float(start[1])
    if not system.domain.contains((x0, y0)):
        raise ValueError(f"start {start!r} outside the domain box")
    segments = []
    gval = fns["g"](x0, y0)
    scale = max(abs(gval), 1.0)
    if abs(gval) > 1e-9 * scale:
        d = 1 if gval > 0 else -1
        roots = fiber_roots(system, y0, tol)
        ahead = [r for r in roots if (r.x - x0) * d > 0]
        target = (ahead[0] if d > 0 else ahead[-1]) if ahead else None
        if target is None:
            segments.append(FastJump((x0, y0), None, d))
            return SingularTrajectory(segments, "escape")
        segments.append(FastJump((x0, y0), (target.x, y0), d))
        x0 = target.x

    visited_folds = []
    jumps = 0
    while jumps <= max_jumps:
        try:
            seg = trace_slow(system, (x0, y0), tol=tol)
        except ValueError:
            return SingularTrajectory(segments, "stranded")
        segments.append(seg)
        if seg.end_kind == "slow-equilibrium":
            return SingularTrajectory(segments, "equilibrium")
        if seg.end_kind == "boundary":
            return SingularTrajectory(segments, "boundary")
        fold_pt = seg.end_point
        for fp in visited_folds:
            if math.hypot(fold_pt[0] - fp[0], fold_pt[1] - fp[1]) \
                    < 1e-8 * system.domain.diagonal():
                # the cycle opens with the jump that follows the first
                # arrival at this fold and closes with the ride back into it
                cycle_start = _segment_index_of_fold(segments, fp) + 1
                return SingularTrajectory(segments, "periodic", cycle_start)
        visited_folds.append(fold_pt)
        res = umbral_map(system, fold_pt, tol)
        if not res.landings or res.landings[0] is None:
            segments.append(FastJump(fold_pt, None,
                                     res.directions[0] if res.directions else 0))
            return SingularTrajectory(segments, "escape")
        lnd = res.landings[0]
        segments.append(FastJump(fold_pt, (lnd.x,) + lnd.y, res.directions[0]))
        x0, y0 = lnd.x, lnd.y[0]
        jumps += 1
    return SingularTrajectory(segments, "budget")


def _segment_index_of_fold(segments, fold_pt):
    for i, seg in enumerate(segments):
        if isinstance(seg, SlowSegment) and seg.end_kind == "fold":
            if math.hypot(seg.end_point[0] - fold_pt[0],
                          seg.end_point[1] - fold_pt[1]) < 1e-6:
                return i
    return 0


def extract_oscillation(system, traj, tol=DEFAULT_TOL):
    """Cut the periodic tail of a trajectory into a relaxation oscillation
    and run the simple-oscillation checks."""
    if traj.termination != "periodic":
        return None
    cyc = traj.segments[traj.cycle_start:]
    slow = [s for s in cyc if isinstance(s, SlowSegment)]
    jumps = [s for s in cyc if isinstance(s, FastJump)]
    period = sum(s.duration for s in slow)
    violations = []
    if not math.isfinite(period):
        violations.append("i: infinite slow period")
    gx = system.partial("g", "x")
    scale = _gx_scale(system, _compiled(system))
    for s in slow:
        interior = s.points[1:-1]
        sample = interior[:: max(1, len(interior) // 16)]
        if any(gx(p[0], p[1]) > 1e-7 * scale for p in sample):
            violations.append("ii: slow segment leaves the attracting sheet")
            break
    hfun = system.partial("h")
    for s in slow:
        if s.end_kind != "fold":
            violations.append("iii: segment ends away from a fold")
            continue
        cls = classify_local_n1(system, s.end_point, tol)
        if cls.tag != "quadratic_fold":
            violations.append(f"iii: degenerate fold at segment end ({cls.tag})")
        if abs(hfun(*s.end_point)) < 1e-8 * max(1.0, abs(cls.g_y)):
            violations.append("v: return map not hyperbolic "
                              "(slow equilibrium at fold)")
    return RelaxationOscillation(slow, jumps, period,
                                 simple=not violations,
                                 violations=violations)


def detect_relaxation_oscillation(system, branches=None, max_jumps=32,
                                  tol=DEFAULT_TOL):
    """Search for a relaxation oscillation from deterministic seeds on the
    attracting sheets; absence is a valid result (returns None)."""
    if branches is None:
        branches = trace_branches(system, tol=tol)
    seeds = []
    for br in branches:
        run = []
        for p, s in zip(br.points, br.stability):
            if s == "attracting":
                run.append(p)
            else:
                if len(run) > 2:
                    seeds.append(run[len(run) // 2])
                run = []
        if len(run) > 2:
            seeds.append(run[len(run) // 2])
    for seed in seeds:
        try:
            traj = trace_singular_trajectory(system, seed, max_jumps, tol)
        except ValueError:
            continue
        ro = extract_oscillation(system, traj, tol)
        if ro is not None:
            return ro
    return None


# ---------------------------------------------------------------------------
# Parameter sweeps
# ---------------------------------------------------------------------------

EVENT_TYPES = ("SNIC", "singular_Hopf", "singular_homoclinic",
               "hyperbolic_fold_tangency", "hysteresis",
               "aligned_double_limit", "opposed_double_limit",
               "double_slow_equilibrium", "other_degeneracy")

_NEVER_AFFECTS = {"D_3_5", "D_3_6", "M_1_5", "E_2"}


@dataclass
class BifurcationEvent:
    lam: float
    type: str
    subcase: str
    witness: tuple
    affects_ro: bool
    bracket: tuple
    indicator: str
    sn_coefficient: float = None

    def as_dict(self):
        return {
            "lambda0": self.lam,
            "type": self.type,
            "subcase": self.subcase,
            "witness": [list(w) if isinstance(w, (tuple, list)) else w
                        for w in (self.witness if isinstance(self.witness[0], (tuple, list))
                                  else [self.witness])],
            "affects_RO": self.affects_ro,
            "bracket": list(self.bracket),
            "indicator": self.indicator,
            "sn_coefficient": self.sn_coefficient,
        }


@dataclass
class _Features:
    lam: float
    branches: list
    folds: list                  # FoldPoint
    equilibria: list             # EquilibriumRecord
    inflections: list            # ((x, y), g_x value) along the critical set


def _features(family, lam, tol, seed_hint=(), n_seed_fibers=48):
    system = family.at(lam)
    branches = trace_branches(system, n_seed_fibers=n_seed_fibers, tol=tol,
                              extra_seeds=seed_hint)
    folds = all_folds(branches)
    eqs = slow_equilibria(system, branches, tol)
    infl = _inflection_points(system, branches, tol)
    return system, _Features(lam, branches, folds, eqs, infl)


def _inflection_points(system, branches, tol):
    """Points of the critical set where g_xx vanishes along the branch;
    g_x evaluated there is the hysteresis test function (it crosses zero
    exactly when a cubic degeneracy forms)."""
    from .critset import _newton2
    g = system.partial("g")
    gx = system.partial("g", "x")
    gy = system.partial("g", "y1")
    gxx = system.partial("g", "xx")
    gxxx = system.partial("g", "xxx")
    gxxy = system.partial("g", "xxy1")
    out = []
    for br in branches:
        pts = br.points
        vals = [gxx(p[0], p[1]) for p in pts]
        for i in range(len(pts) - 1):
            a, b = vals[i], vals[i + 1]
            if a == 0.0 or (a < 0) != (b < 0):
                w = abs(a) / (abs(a) + abs(b)) if abs(a) + abs(b) > 0 else 0.5
                guess = (pts[i][0] + w * (pts[i + 1][0] - pts[i][0]),
                         pts[i][1] + w * (pts[i + 1][1] - pts[i][1]))
                z, ok = _newton2(
                    lambda z: (g(z[0], z[1]), gxx(z[0], z[1])),
                    lambda z: ((gx(z[0], z[1]), gy(z[0], z[1])),
                               (gxxx(z[0], z[1]), gxxy(z[0], z[1]))),
                    guess, tol.residual)
                if ok and system.domain.contains(z, pad=1e-9):
                    p = (float(z[0]), float(z[1]))
                    if all(math.hypot(p[0] - q[0][0], p[1] - q[0][1])
                           > 1e-7 * system.domain.diagonal() for q in out):
                        out.append((p, gx(p[0], p[1])))
    out.sort(key=lambda t: (t[0][1], t[0][0]))
    return out


def _match(points_a, points_b, thr):
    """Greedy nearest matching between two point lists; returns index pairs."""
    pairs = []
    used = set()
    for i, a in enumerate(points_a):
        best, best_d = None, thr
        for j, b in enumerate(points_b):
            if j in used:
                continue
            d = math.hypot(a[0] - b[0], a[1] - b[1])
            if d < best_d:
                best, best_d = j, d
        if best is not None:
            pairs.append((i, best))
            used.add(best)
    return pairs


def sweep(family, n_samples=101, tol=DEFAULT_TOL, refine_tol=1e-6,
          ro_offset=1e-4, meet_tol=0.05, jobs=1):
    """Classify all codimension-one events along the family's interval.

    Scalar indicators (fold count, equilibrium count, co-fold gaps,
    equilibrium-fold gaps, co-equilibrium gaps) are tracked on a uniform
    lambda-grid and each sign change is bisected to the requested bracket
    width, then classified and checked against the oscillation existing
    just below the event.
    """
    lam_lo, lam_hi = family.sweep
    grid = np.linspace(lam_lo, lam_hi, n_samples)
    feats = _grid_features(family, grid, tol, jobs)

    events = []
    for k in range(len(grid) - 1):
        fa, fb = feats[k], feats[k + 1]
        events.extend(_interval_events(family, fa, fb, tol, refine_tol))
    events = _dedupe_events(events, refine_tol)
    for ev in events:
        if ev.subcase in _NEVER_AFFECTS:
            ev.affects_ro = False
        else:
            ev.affects_ro = _affects_ro(family, ev, tol, ro_offset, meet_tol)
    events.sort(key=lambda e: e.lam)
    return events


def _grid_features(family, grid, tol, jobs):
    feats = []
    hint = ()
    if jobs and jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_features_nohint,
                                  [(family, lam, tol) for lam in grid]))
        return results
    for lam in grid:
        _sys, f = _features(family, lam, tol, seed_hint=hint)
        feats.append(f)
        hint = tuple(fp.point for fp in f.folds)
    return feats


def _features_nohint(args):
    family, lam, tol = args
    _sys, f = _features(family, lam, tol)
    return f


def _interval_events(family, fa, fb, tol, refine_tol):
    """Detect and bisect every indicator change between two grid samples."""
    out = []
    width = family.domain.x_width()
    (ylo, yhi), = family.domain.y
    height = yhi - ylo
    thr = 0.1 * width

    # integer indicators: fold count and equilibrium count
    if len(fa.folds) != len(fb.folds):
        out.append(_bisect_count(family, fa, fb, "folds", tol, refine_tol))
    if len(fa.equilibria) != len(fb.equilibria):
        out.append(_bisect_count(family, fa, fb, "equilibria", tol, refine_tol))

    # hysteresis test function: g_x at tracked inflection points
    infl_pairs = _match([p for p, _v in fa.inflections],
                        [p for p, _v in fb.inflections], thr)
    for (i1, j1) in infl_pairs:
        s_a = fa.inflections[i1][1]
        s_b = fb.inflections[j1][1]
        if s_a == 0.0 or (s_a > 0) != (s_b > 0):
            ev = _bisect_inflection(family, fa, fb, i1, tol, refine_tol)
            if ev:
                out.append(ev)

    # continuous indicators on matched features
    fold_pairs = _match([f.point for f in fa.folds],
                        [f.point for f in fb.folds], thr)
    eq_pairs = _match([e.point for e in fa.equilibria],
                      [e.point for e in fb.equilibria], thr)

    def fold_y(feat, idx):
        return feat.folds[idx].y

    # co-fold gaps (double limits)
    for (i1, j1) in fold_pairs:
        for (i2, j2) in fold_pairs:
            if i1 >= i2:
                continue
            d_a = fold_y(fa, i1) - fold_y(fa, i2)
            d_b = fold_y(fb, j1) - fold_y(fb, j2)
            if d_a == 0.0 or (d_a > 0) != (d_b > 0):
                ev = _bisect_gap(family, fa, fb, ("fold", i1), ("fold", i2),
                                 tol, refine_tol)
                if ev:
                    out.append(ev)
    # equilibrium crossing a fold: g_x at the equilibrium changes sign
    gx_a = family.at(fa.lam).partial("g", "x")
    gx_b = family.at(fb.lam).partial("g", "x")
    for (i1, j1) in eq_pairs:
        s_a = gx_a(*fa.equilibria[i1].point)
        s_b = gx_b(*fb.equilibria[j1].point)
        if s_a == 0.0 or (s_a > 0) != (s_b > 0):
            ev = _bisect_eq_fold_cross(family, fa, fb, i1, tol, refine_tol)
            if ev:
                out.append(ev)

    # equilibrium-fold gaps (M events) and co-equilibria (E2)
    for (i1, j1) in eq_pairs:
        for (i2, j2) in fold_pairs:
            d_a = fa.equilibria[i1].point[1] - fold_y(fa, i2)
            d_b = fb.equilibria[j1].point[1] - fold_y(fb, j2)
            if d_a == 0.0 or (d_a > 0) != (d_b > 0):
                ev = _bisect_gap(family, fa, fb, ("eq", i1), ("fold", i2),
                                 tol, refine_tol)
                if ev:
                    out.append(ev)
        for (i2, j2) in eq_pairs:
            if i1 >= i2:
                continue
            d_a = fa.equilibria[i1].point[1] - fa.equilibria[i2].point[1]
            d_b = fb.equilibria[j1].point[1] - fb.equilibria[j2].point[1]
            if d_a == 0.0 or (d_a > 0) != (d_b > 0):
                ev = _bisect_gap(family, fa, fb, ("eq", i1), ("eq", i2),
                                 tol, refine_tol)
                if ev:
                    out.append(ev)
    return [e for e in out if e is not None]


def _bisect_count(family, fa, fb, which, tol, refine_tol):
    """Bisect an integer feature-count change; classify by the local
    geometry of the vanishing pair.

    Every evaluation is seeded with the feature-rich side's positions so
    a pair narrower than the fiber grid stays visible right up to the
    event; if the hinted re-count shows the pair on the "poor" side too,
    the bracket walks outward until it genuinely disappears.
    """
    rich_right = _count(fb, which) > _count(fa, which)
    rich = fb if rich_right else fa
    poor_lam = fa.lam if rich_right else fb.lam
    direction = -1.0 if rich_right else 1.0
    step = fb.lam - fa.lam
    lo, hi = family.sweep

    def feats_at(lam, ref):
        hint = tuple(f.point for f in ref.folds) \
            + tuple(e.point for e in ref.equilibria)
        _sys, f = _features(family, lam, tol, seed_hint=hint)
        return f

    poor = None
    for _ in range(max(4 * int((hi - lo) / max(step, 1e-12)), 8)):
        cand = feats_at(poor_lam, rich)
        if _count(cand, which) != _count(rich, which):
            poor = cand
            break
        rich = cand
        poor_lam = poor_lam + direction * step
        if poor_lam < lo - 1e-12 or poor_lam > hi + 1e-12:
            return None
    if poor is None:
        return None

    a, b = (poor, rich) if poor.lam < rich.lam else (rich, poor)
    while b.lam - a.lam > refine_tol:
        lm = 0.5 * (a.lam + b.lam)
        fm = feats_at(lm, rich)
        if _count(fm, which) == _count(a, which):
            a = fm
        else:
            b = fm
    lam0 = 0.5 * (a.lam + b.lam)
    counts = (_count(a, which), _count(b, which))
    if which == "folds":
        return _classify_fold_count_event(family, a, b, lam0,
                                          (a.lam, b.lam), counts, tol)
    return _classify_eq_count_event(family, a, b, lam0,
                                    (a.lam, b.lam), counts, tol)


def _count(feat, which):
    return len(feat.folds) if which == "folds" else len(feat.equilibria)


def _bisect_inflection(family, fa, fb, idx, tol, refine_tol):
    """Bisect a sign change of g_x at a tracked inflection of the critical
    set: a cubic (hysteresis) degeneracy forms where it crosses zero."""
    width = family.domain.x_width()
    thr = 0.1 * width
    ref = fa.inflections[idx][0]

    def value(feat):
        if not feat.inflections:
            return None, None
        best = min(feat.inflections,
                   key=lambda t: math.hypot(t[0][0] - ref[0],
                                            t[0][1] - ref[1]))
        if math.hypot(best[0][0] - ref[0], best[0][1] - ref[1]) > thr:
            return None, None
        return best[1], best[0]

    la, lb = fa.lam, fb.lam
    s_a, pt_a = value(fa)
    s_b, _pt_b = value(fb)
    if s_a is None or s_b is None:
        return None
    feat_a = fa
    witness = pt_a
    while lb - la > refine_tol:
        lm = 0.5 * (la + lb)
        hint = tuple(f.point for f in feat_a.folds) + (witness,)
        _sys, fm = _features(family, lm, tol, seed_hint=hint)
        s_m, pt_m = value(fm)
        if s_m is None:
            break
        if (s_m > 0) == (s_a > 0):
            la, feat_a, s_a = lm, fm, s_m
            witness = pt_m
        else:
            lb, s_b = lm, s_m
    lam0 = 0.5 * (la + lb)
    return BifurcationEvent(lam0, "hysteresis", "D_2", witness, False,
                            (la, lb), "inflection-g_x")


def _vanishing_pair(rich, poor, thr):
    """Features of `rich` unmatched in `poor` (the pair that disappears)."""
    pairs = _match(rich, poor, thr)
    matched = {i for i, _ in pairs}
    return [rich[i] for i in range(len(rich)) if i not in matched]


def _classify_fold_count_event(family, feat_a, feat_b, lam0, bracket,
                               counts, tol):
    rich, poor = (feat_a, feat_b) if counts[0] > counts[1] else (feat_b, feat_a)
    width = family.domain.x_width()
    lost = _vanishing_pair([f.point for f in rich.folds],
                           [f.point for f in poor.folds], 0.05 * width)
    if not lost:
        lost = [f.point for f in rich.folds]
    wit = (sum(p[0] for p in lost) / len(lost),
           sum(p[1] for p in lost) / len(lost))
    system = family.at(rich.lam)
    gy = system.partial("g", "y1")(*wit)
    gxx = system.partial("g", "xx")(*wit)
    gxy = system.partial("g", "xy1")(*wit)
    gyy = system.partial("g", "y1y1")(*wit)
    det = gxx * gyy - gxy * gxy
    scale = max(abs(gy), abs(gxx), 1e-12)
    if abs(gy) <= abs(gxx):
        etype = ("hyperbolic_fold_tangency" if det < 0 else "other_degeneracy")
        sub = "D_1_1" if det < 0 else "D_1_2"
    else:
        etype, sub = "hysteresis", "D_2"
    return BifurcationEvent(lam0, etype, sub, wit, False, bracket,
                            "fold-count")


def _classify_eq_count_event(family, feat_a, feat_b, lam0, bracket,
                             counts, tol):
    rich, poor = (feat_a, feat_b) if counts[0] > counts[1] else (feat_b, feat_a)
    width = family.domain.x_width()
    lost = _vanishing_pair([e.point for e in rich.equilibria],
                           [e.point for e in poor.equilibria], 0.05 * width)
    if not lost:
        lost = [e.point for e in rich.equilibria]
    wit = (sum(p[0] for p in lost) / len(lost),
           sum(p[1] for p in lost) / len(lost))
    b = _saddle_node_coefficient(family.at(lam0), wit)
    return BifurcationEvent(lam0, "SNIC", "E_1_1", wit, False, bracket,
                            "equilibrium-count", sn_coefficient=b)


def _bisect_gap(family, fa, fb, id1, id2, tol, refine_tol):
    """Bisect a sign change of the slow-coordinate gap between two tracked
    features (fold-fold, equilibrium-fold or equilibrium-equilibrium)."""
    width = family.domain.x_width()
    thr = 0.1 * width

    def locate(feat, ident, ref_feat):
        kind, idx = ident
        ref = (ref_feat.folds[idx].point if kind == "fold"
               else ref_feat.equilibria[idx].point)
        pool = ([f.point for f in feat.folds] if kind == "fold"
                else [e.point for e in feat.equilibria])
        if not pool:
            return None
        best = min(pool, key=lambda p: math.hypot(p[0] - ref[0], p[1] - ref[1]))
        if math.hypot(best[0] - ref[0], best[1] - ref[1]) > thr:
            return None
        return best

    def gap(feat):
        p1 = locate(feat, id1, fa)
        p2 = locate(feat, id2, fa)
        if p1 is None or p2 is None:
            return None, None
        return p1[1] - p2[1], (p1, p2)

    la, lb = fa.lam, fb.lam
    g_a, pts_a = gap(fa)
    g_b, pts_b = gap(fb)
    if g_a is None or g_b is None or (g_a > 0) == (g_b > 0):
        return None
    feat_a, feat_b = fa, fb
    witness = pts_a
    while lb - la > refine_tol:
        lm = 0.5 * (la + lb)
        hint = tuple(f.point for f in feat_a.folds)
        _sys, fm = _features(family, lm, tol, seed_hint=hint)
        g_m, pts_m = gap(fm)
        if g_m is None:
            break
        if (g_m > 0) == (g_a > 0):
            la, feat_a, g_a = lm, fm, g_m
            witness = pts_m
        else:
            lb, feat_b, g_b = lm, fm, g_m
    lam0 = 0.5 * (la + lb)
    kind1, kind2 = id1[0], id2[0]
    if kind1 == "fold" and kind2 == "fold":
        return _classify_double_limit_event(family, lam0, (la, lb), witness,
                                            tol)
    if kind1 == "eq" and kind2 == "eq":
        return BifurcationEvent(lam0, "double_slow_equilibrium", "E_2",
                                witness, False, (la, lb), "co-equilibrium-gap")
    return _classify_m_event(family, lam0, (la, lb), witness, tol)


def _bisect_eq_fold_cross(family, fa, fb, eq_idx, tol, refine_tol):
    """Bisect the sign change of g_x at a tracked equilibrium (the
    equilibrium passing through a fold of the sheet it sits on)."""
    width = family.domain.x_width()
    thr = 0.1 * width
    ref = fa.equilibria[eq_idx].point

    def value(feat):
        pool = [e.point for e in feat.equilibria]
        if not pool:
            return None, None
        best = min(pool, key=lambda p: math.hypot(p[0] - ref[0], p[1] - ref[1]))
        if math.hypot(best[0] - ref[0], best[1] - ref[1]) > thr:
            return None, None
        return family.at(feat.lam).partial("g", "x")(*best), best

    la, lb = fa.lam, fb.lam
    s_a, pt_a = value(fa)
    s_b, pt_b = value(fb)
    if s_a is None or s_b is None:
        return None
    feat_a = fa
    witness = pt_a
    while lb - la > refine_tol:
        lm = 0.5 * (la + lb)
        hint = tuple(f.point for f in feat_a.folds)
        _sys, fm = _features(family, lm, tol, seed_hint=hint)
        s_m, pt_m = value(fm)
        if s_m is None:
            break
        if (s_m > 0) == (s_a > 0):
            la, feat_a, s_a, witness = lm, fm, s_m, pt_m
        else:
            lb, s_b = lm, s_m
    lam0 = 0.5 * (la + lb)
    system = family.at(lam0)
    fp, _ok = polish_fold(system, witness, tol)
    return _classify_m_event(family, lam0, (la, lb), (witness, fp.point), tol)


def _classify_double_limit_event(family, lam0, bracket, witness, tol):
    system = family.at(lam0)
    f1, _ok1 = polish_fold(system, witness[0], tol)
    f2, _ok2 = polish_fold(system, witness[1], tol)
    (ylo, yhi), = family.domain.y
    tol_y = max(abs(f1.y - f2.y) * 1.5, 1e-5 * (yhi - ylo))
    recs = detect_double_limits(system, [f1, f2], tol_y=tol_y, tol=tol)
    if not recs:
        return BifurcationEvent(lam0, "other_degeneracy", "D_3", witness,
                                False, bracket, "co-fold-gap")
    rec = recs[0]
    etype = ("aligned_double_limit" if rec.aligned else "opposed_double_limit")
    if rec.interaction == "non-interacting":
        pass  # subcase D_3_5 / D_3_6 never affects oscillations
    return BifurcationEvent(lam0, etype, rec.subcase, rec.pair, False,
                            bracket, "co-fold-gap")


def _classify_m_event(family, lam0, bracket, witness, tol):
    system = family.at(lam0)
    eq_pt, fold_pt = witness
    branches = trace_branches(system, tol=tol,
                              extra_seeds=(eq_pt, fold_pt))
    eqs = slow_equilibria(system, branches, tol,
                          tol_y=max(1e-5 * (family.domain.y[0][1]
                                            - family.domain.y[0][0]),
                                    2.0 * abs(eq_pt[1] - fold_pt[1])))
    best = None
    for r in eqs:
        if best is None or math.hypot(r.point[0] - eq_pt[0],
                                      r.point[1] - eq_pt[1]) < \
                math.hypot(best.point[0] - eq_pt[0], best.point[1] - eq_pt[1]):
            best = r
    sub = best.fold_projection if best is not None and best.fold_projection \
        else "M_1_5"
    etype = {"M_1_1": "singular_Hopf", "M_1_4": "singular_homoclinic"}.get(
        sub, "other_degeneracy")
    return BifurcationEvent(lam0, etype, sub,
                            best.point if best else eq_pt, False, bracket,
                            "equilibrium-fold-gap")


def _dedupe_events(events, refine_tol):
    events.sort(key=lambda e: (e.lam, e.type))
    out = []
    for ev in events:
        dup = any(abs(ev.lam - o.lam) < 4 * refine_tol and ev.type == o.type
                  for o in out)
        if not dup:
            out.append(ev)
    return out


def _affects_ro(family, ev, tol, ro_offset, meet_tol):
    """An event affects the oscillation when the limit cycle just below
    lambda0 exists and passes through the degeneracy witness."""
    lam = ev.lam - ro_offset
    system = family.at(lam)
    ro = detect_relaxation_oscillation(system, tol=tol)
    if ro is None:
        return False
    pts = []
    for seg in ro.slow_segments:
        pts.extend(seg.points)
    for j in ro.jumps:
        if j.target is not None:
            pts.append(j.source)
            pts.append(j.target)
    if not pts:
        return False
    widths = system.domain.widths()
    norm = np.array([[p[0] / widths[0], p[1] / widths[1]] for p in pts])
    witnesses = ev.witness if isinstance(ev.witness[0], (tuple, list)) \
        else [ev.witness]
    for w in witnesses:
        wn = (w[0] / widths[0], w[1] / widths[1])
        if polyline_distance(norm, wn) < meet_tol:
            return True
    return False


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def trajectory_csv(traj, n_slow=1):
    ycols = ["y1"] + (["y2"] if n_slow == 2 else [])
    cols = ["segment_id", "kind", "x"] + ycols + ["t_slow"]
    lines = [",".join(cols)]
    t = 0.0
    for i, seg in enumerate(traj.segments):
        if isinstance(seg, SlowSegment):
            n = len(seg.points)
            t_loc = np.linspace(0.0, seg.duration if math.isfinite(seg.duration)
                                else 0.0, n)
            for p, dt in zip(seg.points, t_loc):
                lines.append(",".join([str(i), "slow"]
                                      + [f"{v:.17g}" for v in p]
                                      + [f"{t + dt:.17g}"]))
            if math.isfinite(seg.duration):
                t += seg.duration
        else:
            lines.append(",".join([str(i), "jump"]
                                  + [f"{v:.17g}" for v in seg.source]
                                  + [f"{t:.17g}"]))
            if seg.target is not None:
                lines.append(",".join([str(i), "jump"]
                                      + [f"{v:.17g}" for v in seg.target]
                                      + [f"{t:.17g}"]))
    return "\n".join(lines) + "\n"


def events_json(events):
    return json.dumps([e.as_dict() for e in events], indent=2, sort_keys=True)
