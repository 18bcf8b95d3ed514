"""Local and global classification of critical-set singularities.

One slow variable: folds are sorted into quadratic folds, fold
tangencies (hyperbolic/elliptic by the Hessian determinant), hysteresis
points (stable/unstable by the third derivative) and higher-codimension
leftovers; co-fold pairs are split into the six double-limit subcases by
fold alignment and umbral interaction.

Two slow variables: quadratic folds carry a direction vector and a
scalar curvature, cusps a direction vector and a lips/beaks
discriminant; pairwise and triple projection coincidences are labelled
with their subcase strings.

All derivatives are exact polynomial partials.  A quantity counts as
zero when it is below 1e-8 times a local derivative scale.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .critset import DEFAULT_TOL, fiber_roots
from .umbra import umbral_map

ZERO_REL = 1e-8
PARALLEL_TOL = 1e-6  # radians


def _perp(v):
    return np.array([-v[1], v[0]])


def _unit(v):
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ZeroDivisionError("zero vector has no direction")
    return v / n


# ---------------------------------------------------------------------------
# Local classification, n = 1
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalClassN1:
    tag: str
    g_y: float
    g_xx: float
    g_xxx: float
    det_d2g: float


N1_TAGS = ("regular", "quadratic_fold", "hyperbolic_fold_tangency",
           "elliptic_fold_tangency", "stable_hysteresis",
           "unstable_hysteresis", "higher_codimension")


def classify_local_n1(system, point, tol=DEFAULT_TOL):
    """Decision tree over (g_y, g_xx, det D2g, g_xxx) at a fold point."""
    x, y = float(point[0]), float(point[1])
    g = system.partial("g")(x, y)
    gx = system.partial("g", "x")(x, y)
    gy = system.partial("g", "y1")(x, y)
    gxx = system.partial("g", "xx")(x, y)
    gxxx = system.partial("g", "xxx")(x, y)
    gxy = system.partial("g", "xy1")(x, y)
    gyy = system.partial("g", "y1y1")(x, y)
    det = gxx * gyy - gxy * gxy

    scale = max(abs(gy), abs(gxx), abs(gxxx), abs(gxy), abs(gyy), 1.0)
    zero = ZERO_REL * scale
    if abs(g) > 1e-6 * scale:
        raise ValueError(f"{point!r} is not on the critical set")
    if abs(gx) > max(1e-5 * scale, 100 * tol.residual):
        return LocalClassN1("regular", gy, gxx, gxxx, det)

    y_zero = abs(gy) <= zero
    xx_zero = abs(gxx) <= zero
    if not y_zero and not xx_zero:
        tag = "quadratic_fold"
    elif y_zero and not xx_zero:
        if det < -zero * scale:
            tag = "hyperbolic_fold_tangency"
        elif det > zero * scale:
            tag = "elliptic_fold_tangency"
        else:
            tag = "higher_codimension"
    elif xx_zero and not y_zero:
        if gxxx > zero:
            tag = "stable_hysteresis"
        elif gxxx < -zero:
            tag = "unstable_hysteresis"
        else:
            tag = "higher_codimension"
    else:
        tag = "higher_codimension"
    return LocalClassN1(tag, gy, gxx, gxxx, det)


def fold_direction_n1(system, point):
    """Scalar fold direction g_xx * g_y (n = 1)."""
    x, y = float(point[0]), float(point[1])
    return system.partial("g", "xx")(x, y) * system.partial("g", "y1")(x, y)


# ---------------------------------------------------------------------------
# Double limits, n = 1
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoubleLimitRecord:
    pair: tuple                # ((x1,y1), (x2,y2)), ascending x
    delta_y: float
    aligned: bool
    interaction: str           # fold-umbra | umbra-umbra | non-interacting
    subcase: str               # D_3_1 .. D_3_6
    sheets_between: int


_D3_SUBCASE = {
    (True, "fold-umbra"): "D_3_1",
    (False, "fold-umbra"): "D_3_2",
    (True, "umbra-umbra"): "D_3_3",
    (False, "umbra-umbra"): "D_3_4",
    (True, "non-interacting"): "D_3_5",
    (False, "non-interacting"): "D_3_6",
}


def _sheets_between(system, pa, pb, tol):
    """Count regular sheets on the shared fiber strictly between two
    singular x-values, excluding the root pairs the folds themselves
    contribute near the fiber."""
    y_mid = 0.5 * (pa[1] + pb[1])
    gxx = system.partial("g", "xx")
    width = system.domain.x_width()
    excl = []
    for p in (pa, pb):
        c = gxx(p[0], p[1])
        # half-width of the local root pair when the fiber cuts the fold
        r = 3.0 * math.sqrt(abs(2.0 * (y_mid - p[1]) / c)) if abs(c) > 1e-12 else 0.0
        excl.append(max(r, 1e-4 * width))
    lo, hi = sorted((pa[0], pb[0]))
    count = 0
    for root in fiber_roots(system, y_mid, tol):
        if not (lo < root.x < hi):
            continue
        if abs(root.x - pa[0]) < excl[0] or abs(root.x - pb[0]) < excl[1]:
            continue
        count += 1
    return count


def detect_double_limits(system, folds, tol_y=None, tol=DEFAULT_TOL):
    """All co-fold pairs (|Delta y| below tolerance) with their subcase."""
    if tol_y is None:
        (ylo, yhi), = system.domain.y
        tol_y = 1e-6 * (yhi - ylo)
    records = []
    fold_pts = [f.point if hasattr(f, "point") else tuple(f) for f in folds]
    for i in range(len(fold_pts)):
        for j in range(i + 1, len(fold_pts)):
            pa, pb = fold_pts[i], fold_pts[j]
            dy = abs(pa[1] - pb[1])
            if dy >= tol_y:
                continue
            if pa[0] > pb[0]:
                pa, pb = pb, pa
            nu_a = fold_direction_n1(system, pa)
            nu_b = fold_direction_n1(system, pb)
            aligned = nu_a * nu_b > 0
            k = _sheets_between(system, pa, pb, tol)
            interaction = ("fold-umbra" if k == 0
                           else "umbra-umbra" if k == 1
                           else "non-interacting")
            records.append(DoubleLimitRecord(
                pair=(pa, pb), delta_y=dy, aligned=aligned,
                interaction=interaction,
                subcase=_D3_SUBCASE[(aligned, interaction)],
                sheets_between=k))
    records.sort(key=lambda r: r.pair)
    return records


# ---------------------------------------------------------------------------
# Fold and cusp quantities, n = 2
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldQuantN2:
    point: tuple
    direction: tuple            # nu = g_xx * grad_y g
    curvature: float | None     # K; None at a fold tangency
    curvature_vector: tuple | None
    tangency_positive_eigs: int | None     # |Sigma_+| at a fold tangency
    tangency_class: str | None  # wormhole | tube | isola


@dataclass(frozen=True)
class CuspQuantN2:
    point: tuple
    direction: tuple | None     # mu; None at a cusp tangency
    discriminant: float         # W; sign separates lips (>0) from beaks (<0)
    stability_sign: float       # sign of g_xxx
    tangency: bool              # True when the mu denominator vanishes
    tangency_class: str | None  # lips | beaks


def _grads_n2(system, p):
    x, y1, y2 = (float(v) for v in p)
    d = {}
    for spec in ("x", "xx", "xxx", "y1", "y2", "xy1", "xy2",
                 "y1y1", "y1y2", "y2y2", "xy1y1", "xy1y2", "xy2y2",
                 "xxy1", "xxy2"):
        d[spec] = system.partial("g", spec)(x, y1, y2)
    d[""] = system.partial("g")(x, y1, y2)
    return d


def fold_quantities_n2(system, p, tol=DEFAULT_TOL):
    """Direction vector, scalar curvature and curvature vector of a
    quadratic fold; eigenvalue count of the signed Hessian at a fold
    tangency instead."""
    d = _grads_n2(system, p)
    grad = np.array([d["y1"], d["y2"]])
    gxx = d["xx"]
    scale = max(abs(gxx), float(np.max(np.abs(grad))), abs(d["xxx"]), 1.0)
    zero = ZERO_REL * scale
    if abs(d[""]) > 1e-6 * scale or abs(d["x"]) > 1e-5 * scale:
        raise ValueError(f"{p!r} is not on the fold set")

    nu = gxx * grad
    if np.linalg.norm(grad) <= zero:
        if abs(gxx) <= zero:
            raise ValueError("higher-codimension point: grad_y g and g_xx both vanish")
        x, y1, y2 = (float(v) for v in p)
        hess = np.array([
            [gxx, d["xy1"], d["xy2"]],
            [d["xy1"], d["y1y1"], d["y1y2"]],
            [d["xy2"], d["y1y2"], d["y2y2"]],
        ])
        eigs = np.linalg.eigvalsh(math.copysign(1.0, gxx) * hess)
        n_pos = int(np.sum(eigs > 0))
        klass = {1: "wormhole", 2: "tube", 3: "isola"}.get(n_pos)
        return FoldQuantN2(tuple(map(float, p)), tuple(nu), None, None,
                           n_pos, klass)

    if abs(gxx) <= zero:
        raise ValueError("not a quadratic fold: g_xx vanishes")
    uperp = _unit(_perp(grad))
    hess_y = np.array([[d["y1y1"], d["y1y2"]], [d["y1y2"], d["y2y2"]]])
    grad_gx = np.array([d["xy1"], d["xy2"]])
    quad = float(uperp @ hess_y @ uperp)
    norm_perp = float(np.linalg.norm(grad))
    K = (math.copysign(1.0, gxx) * quad / (2.0 * norm_perp)
         - (float(grad_gx @ uperp)) ** 2 / (8.0 * abs(gxx) * norm_perp))
    kappa = K * math.copysign(1.0, gxx) * _unit(grad)
    return FoldQuantN2(tuple(map(float, p)), tuple(nu), K, tuple(kappa),
                       None, None)


def cusp_quantities_n2(system, p, tol=DEFAULT_TOL):
    """Cusp direction vector and the lips/beaks discriminant.

    The discriminant reduces to 6*d1*d2 - 2*d3 on the cubic normal
    family d1*x^3 + d2*x*y1^2 + d3*x^2*y1 + y2; positive values are
    lips, negative beaks.
    """
    d = _grads_n2(system, p)
    grad = np.array([d["y1"], d["y2"]])
    gxxx = d["xxx"]
    scale = max(abs(d["xx"]), float(np.max(np.abs(grad))), abs(gxxx), 1.0)
    zero = ZERO_REL * scale
    if abs(d[""]) > 1e-6 * scale or abs(d["x"]) > 1e-5 * scale:
        raise ValueError(f"{p!r} is not on the fold set")
    if abs(d["xx"]) > max(1e-5 * scale, zero * 10):
        raise ValueError(f"{p!r} is not a cusp: g_xx != 0")

    uperp = _unit(_perp(grad))
    grad_gx = np.array([d["xy1"], d["xy2"]])
    denom = float(grad_gx @ uperp)
    hess_gx = np.array([[d["xy1y1"], d["xy1y2"]], [d["xy1y2"], d["xy2y2"]]])
    grad_gxx = np.array([d["xxy1"], d["xxy2"]])
    # orientation of the perpendicular fixed so the normal family above
    # evaluates to 6*d1*d2 - 2*d3 exactly
    W = 0.5 * gxxx * float(uperp @ hess_gx @ uperp) + float(grad_gxx @ uperp)

    if abs(denom) <= zero:
        if abs(gxxx) <= zero:
            raise ValueError("higher-codimension point: cusp direction and g_xxx both degenerate")
        klass = "lips" if W > 0 else "beaks" if W < 0 else None
        return CuspQuantN2(tuple(map(float, p)), None, W,
                           math.copysign(1.0, gxxx), True, klass)
    mu = (gxxx / denom) * _perp(grad)
    return CuspQuantN2(tuple(map(float, p)), tuple(mu), W,
                       math.copysign(1.0, gxxx), False, None)


# ---------------------------------------------------------------------------
# Triple folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TripleFoldRecord:
    directions: tuple
    coefficients: tuple        # unit-normalized (a1, a2, a3)
    tag: str                   # covering | non-covering | degenerate


def triple_fold_coefficients(nu1, nu2, nu3, tol=1e-6):
    """Coefficients of the zero linear combination of three fold
    direction vectors, up to scale; the sign pattern separates covering
    from non-covering triple limits."""
    nus = [np.asarray(v, dtype=float) for v in (nu1, nu2, nu3)]
    if any(np.linalg.norm(v) == 0 for v in nus):
        raise ValueError("fold direction vectors must be nonzero")
    best = None
    for k in range(3):
        i, j = [m for m in range(3) if m != k]
        A = np.column_stack([nus[i], nus[j]])
        det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
        score = abs(det) / (np.linalg.norm(nus[i]) * np.linalg.norm(nus[j]))
        if best is None or score > best[0]:
            best = (score, k, i, j, A)
    score, k, i, j, A = best
    a = [0.0, 0.0, 0.0]
    if score < 1e-12:
        return TripleFoldRecord(tuple(map(tuple, nus)), (0.0, 0.0, 0.0),
                                "degenerate")
    sol = np.linalg.solve(A, -nus[k])
    a[i], a[j], a[k] = float(sol[0]), float(sol[1]), 1.0
    a = np.asarray(a)
    a = a / np.linalg.norm(a)
    if a[0] < 0 or (a[0] == 0 and a[1] < 0):
        a = -a
    signs = np.sign(a)
    if np.min(np.abs(a)) < tol:
        tag = "degenerate"
    elif np.all(signs > 0):
        tag = "covering"
    else:
        tag = "non-covering"
    return TripleFoldRecord(tuple(map(tuple, nus)), tuple(map(float, a)), tag)


# ---------------------------------------------------------------------------
# Projection events, n = 2
# ---------------------------------------------------------------------------

def _is_parallel(u, v, tol=PARALLEL_TOL):
    u, v = _unit(np.asarray(u)), _unit(np.asarray(v))
    return abs(float(u[0] * v[1] - u[1] * v[0])) < tol


def _landing_xs(system, p, tol):
    try:
        res = umbral_map(system, p, tol)
    except ValueError:
        return []
    return [l.x for l in res.landings if l is not None]


def classify_projection_event_n2(system, points, tol=DEFAULT_TOL):
    """Subcase label for a pair or triple of singular points that share
    their projected slow coordinate.

    Pairs of quadratic folds require parallel direction vectors (a fold
    projection tangency); a fold plus a cusp is a projection
    intersection; three quadratic folds form a triple limit.  Returns
    the label string, or "unresolved-higher-codimension" when a deciding
    quantity sits below threshold.
    """
    pts = [tuple(map(float, p)) for p in points]
    if len(pts) not in (2, 3):
        raise ValueError("projection events involve two or three points")
    gxx = system.partial("g", "xx")
    width = system.domain.x_width()
    match_tol = 1e-3 * width

    def near(a, b):
        return abs(a - b) < match_tol

    kinds = []
    for p in pts:
        scale = max(abs(gxx(*p)), 1.0)
        kinds.append("cusp" if abs(gxx(*p)) < 1e-5 * scale else "fold")

    if len(pts) == 3:
        if any(k != "fold" for k in kinds):
            raise ValueError("triple events require three quadratic folds")
        quants = [fold_quantities_n2(system, p, tol) for p in pts]
        rec = triple_fold_coefficients(*[q.direction for q in quants])
        if rec.tag == "degenerate":
            return "unresolved-higher-codimension"
        cover = rec.tag
        lands = [_landing_xs(system, p, tol) for p in pts]

        def hits(i, j):
            return any(near(l, pts[j][0]) for l in lands[i])

        def umbrae_meet(i, j):
            return any(near(a, b) for a in lands[i] for b in lands[j])

        import itertools
        for i, j, k in itertools.permutations(range(3)):
            if hits(i, j) and hits(j, k):
                return f"{cover} fu×f f×fu intersection"
        for i, j, k in itertools.permutations(range(3)):
            if hits(i, j) and umbrae_meet(j, k):
                return f"{cover} fu×f fu×fu intersection"
        for i, j in itertools.permutations(range(3), 2):
            if hits(i, j):
                return f"{cover} fu×f fx×fx intersection"
        for i, j in itertools.combinations(range(3), 2):
            if umbrae_meet(i, j):
                return f"{cover} fu×fu fx×fx intersection"
        return f"{cover} fx×fx fx×fx intersection"

    if kinds.count("fold") == 2:
        q1, q2 = (fold_quantities_n2(system, p, tol) for p in pts)
        if q1.curvature is None or q2.curvature is None:
            return "unresolved-higher-codimension"
        if not _is_parallel(q1.direction, q2.direction):
            raise ValueError("fold pair projections are not tangent "
                             "(direction vectors not parallel)")
        aligned = float(np.dot(q1.direction, q2.direction)) > 0
        l1 = _landing_xs(system, pts[0], tol)
        l2 = _landing_xs(system, pts[1], tol)
        hit_12 = any(near(l, pts[1][0]) for l in l1)
        hit_21 = any(near(l, pts[0][0]) for l in l2)
        meet = any(near(a, b) for a in l1 for b in l2)
        K1, K2 = q1.curvature, q2.curvature
        scaleK = max(abs(K1), abs(K2), 1.0)
        if aligned:
            if hit_12 or hit_21:
                Ku, Kf = (K1, K2) if hit_12 else (K2, K1)
                if abs(Ku - Kf) < ZERO_REL * scaleK:
                    return "unresolved-higher-codimension"
                which = "umbra-dominant" if Ku > Kf else "fold-dominant"
                return f"aligned {which} fu×f tangency"
            if meet:
                return "aligned fu×fu tangency"
            return "aligned fx×fx tangency"
        total = K1 + K2
        if abs(total) < ZERO_REL * scaleK:
            return "unresolved-higher-codimension"
        cover = "non-covering" if total < 0 else "covering"
        if hit_12 or hit_21:
            return f"opposed {cover} fu×f tangency"
        if meet:
            return f"opposed {cover} fu×fu tangency"
        return f"opposed {cover} fx×fx tangency"

    # fold + cusp
    fold_p = pts[kinds.index("fold")]
    cusp_p = pts[kinds.index("cusp")]
    fq = fold_quantities_n2(system, fold_p, tol)
    cq = cusp_quantities_n2(system, cusp_p, tol)
    if cq.direction is None:
        return "unresolved-higher-codimension"
    dot = float(np.dot(fq.direction, cq.direction))
    scale = max(np.linalg.norm(fq.direction) * np.linalg.norm(cq.direction), 1.0)
    if abs(dot) < ZERO_REL * scale:
        return "unresolved-higher-codimension"
    side = "aligned" if dot > 0 else "opposed"
    unstable = cq.stability_sign > 0
    lf = _landing_xs(system, fold_p, tol)
    lc = _landing_xs(system, cusp_p, tol)
    if any(near(l, cusp_p[0]) for l in lf):
        if not unstable:
            return f"{side} fu×sc intersection"
        return "unresolved-higher-codimension"
    if any(near(l, fold_p[0]) for l in lc):
        return f"{side} f×ucu intersection"
    if any(near(a, b) for a in lf for b in lc):
        return f"{side} fu×ucu intersection"
    return f"{side} fx×{'ucx' if unstable else 'scx'} intersection"


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def classification_report(system, folds, tol=DEFAULT_TOL):
    """JSON-ready classification of fold points plus double-limit records
    (n = 1)."""
    records = []
    for fp in folds:
        cls = classify_local_n1(system, fp.point, tol)
        fp.local_class = cls.tag
        records.append({
            "point": list(fp.point),
            "class": cls.tag,
            "quantities": {
                "direction": fold_direction_n1(system, fp.point),
                "g_y": cls.g_y,
                "g_xx": cls.g_xx,
                "g_xxx": cls.g_xxx,
                "det_d2g": cls.det_d2g,
            },
            "subcase_label": "",
        })
    doubles = detect_double_limits(system, folds, tol=tol)
    for rec in doubles:
        records.append({
            "point": [list(rec.pair[0]), list(rec.pair[1])],
            "class": "double_limit",
            "quantities": {
                "delta_y": rec.delta_y,
                "aligned": rec.aligned,
                "interaction": rec.interaction,
                "sheets_between": rec.sheets_between,
            },
            "subcase_label": rec.subcase,
        })
    return records


def report_json(records):
    return json.dumps(records, indent=2, sort_keys=True)
