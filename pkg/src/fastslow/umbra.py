"""Umbral map and drop set for one fast variable.

For m = 1 the layer flow on a fiber is monotone between consecutive
equilibria, so the omega-limit of a trajectory leaving a fold is exactly
the first equilibrium beyond the fold in the departure direction.  The
map is computed by fiber-root enumeration; direct layer-equation
integration is kept only as a test oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .critset import DEFAULT_TOL, fiber_roots


@dataclass(frozen=True)
class Landing:
    x: float
    y: tuple
    stability: str


@dataclass
class UmbraResult:
    """Departures from one fold: jump direction(s) and landing point(s)."""
    source: tuple                       # (x, y...) of the fold
    directions: list = field(default_factory=list)   # +1 / -1 per departure
    landings: list = field(default_factory=list)     # Landing per departure
    escape: bool = False
    degenerate: bool = False            # no clean single departure side


def umbral_map(system, point, tol=DEFAULT_TOL):
    """Jump direction(s) and landing(s) of the layer flow leaving a fold.

    point is (x, y) for n=1 or (x, y1, y2) for n=2; it must satisfy
    |g| and |g_x| below the detection threshold.  A side is a departure
    side when the layer flow there points away from the fold; quadratic
    folds have one, unstable cusps two, stable cusps none.
    """
    x0 = float(point[0])
    yv = tuple(float(v) for v in point[1:1 + system.n_slow])
    g = system.partial("g")
    gx = system.partial("g", "x")
    y1 = yv[0]
    y2 = yv[1] if len(yv) > 1 else 0.0
    scale = _fiber_scale(system, yv)
    if abs(g(x0, y1, y2)) > 1e-6 * scale or abs(gx(x0, y1, y2)) > 1e-5 * scale:
        raise ValueError(f"{point!r} is not on the fold set")

    delta = 1e-6 * system.domain.x_width()
    g_right = g(x0 + delta, y1, y2)
    g_left = g(x0 - delta, y1, y2)
    directions = []
    if g_right > 1e-14 * scale:
        directions.append(+1)
    if g_left < -1e-14 * scale:
        directions.append(-1)

    result = UmbraResult(source=(x0,) + yv)
    if not directions:
        # stable-cusp-like point: the flow points inward on both sides
        result.degenerate = True
        return result
    if len(directions) == 2:
        result.degenerate = True

    roots = fiber_roots(system, yv if len(yv) > 1 else yv[0], tol)
    gap = max(10 * tol.geom * system.domain.x_width(), 10 * delta)
    for d in directions:
        if d > 0:
            ahead = [r for r in roots if r.x > x0 + gap]
            target = ahead[0] if ahead else None
        else:
            ahead = [r for r in roots if r.x < x0 - gap]
            target = ahead[-1] if ahead else None
        result.directions.append(d)
        if target is None:
            result.escape = True
            result.landings.append(None)
        else:
            result.landings.append(Landing(target.x, yv, target.stability))
    return result


def _fiber_scale(system, yv):
    g = system.partial("g")
    lo, hi = system.domain.x
    y1 = yv[0]
    y2 = yv[1] if len(yv) > 1 else 0.0
    vals = [abs(g(lo + (hi - lo) * k / 8.0, y1, y2)) for k in range(9)]
    return max(max(vals), 1e-12)


def landing_points(system, point, tol=DEFAULT_TOL):
    """Convenience: list of landing coordinate tuples (may be empty)."""
    res = umbral_map(system, point, tol)
    return [(l.x,) + l.y for l in res.landings if l is not None]


@dataclass
class DropSegment:
    """Image of one fold (n=1) or one fold-curve sample run (n=2)."""
    sources: list
    targets: list              # None where the trajectory escapes
    escape: bool


def umbra_set(system, folds, tol=DEFAULT_TOL):
    """Drop set: umbral images of fold points or fold-curve samples.

    folds may be a list of FoldPoint (n=1) or of FoldCurve (n=2); for
    curves every polyline sample is mapped, skipping stable cusps which
    have no umbra.
    """
    segments = []
    if system.n_slow == 1:
        for fp in folds:
            res = umbral_map(system, fp.point, tol)
            targets = [((l.x,) + l.y) if l is not None else None
                       for l in res.landings]
            segments.append(DropSegment([fp.point] * max(len(targets), 1),
                                        targets or [None],
                                        res.escape))
        return segments
    for curve in folds:
        sources, targets, escape = [], [], False
        for p in curve.points:
            try:
                res = umbral_map(system, p, tol)
            except ValueError:
                continue
            if not res.landings:
                continue  # stable cusp: no umbra
            lnd = res.landings[0]
            sources.append(tuple(p))
            targets.append(((lnd.x,) + lnd.y) if lnd is not None else None)
            escape = escape or res.escape
        segments.append(DropSegment(sources, targets, escape))
    return segments


def drop_set_csv(segments, n_slow=1):
    ycols = ["y1"] + (["y2"] if n_slow == 2 else [])
    cols = (["src_x"] + [f"src_{c}" for c in ycols]
            + ["dst_x"] + [f"dst_{c}" for c in ycols] + ["escape"])
    lines = [",".join(cols)]
    for seg in segments:
        for src, dst in zip(seg.sources, seg.targets):
            row = [f"{v:.17g}" for v in src]
            if dst is None:
                row += [""] * (1 + n_slow) + ["1"]
            else:
                row += [f"{v:.17g}" for v in dst] + ["0"]
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"
