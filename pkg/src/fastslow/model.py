"""Exact polynomial algebra and fast-slow system representation.

A fast-slow system couples one fast variable x with one or two slow
variables (y1, y2) through a pair of polynomial vector fields g (fast)
and h (slow).  Polynomials live in at most four variables
(x, y1, y2, lam), where lam is a distinguished sweep parameter that is
fully substituted before any analysis runs.  Differentiation is closed,
so every derivative needed downstream is again a polynomial and no
finite differencing enters the classification pipeline.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Real

VARS = ("x", "y1", "y2", "lam")
_VAR_INDEX = {name: i for i, name in enumerate(VARS)}


def _as_exponents(exps):
    e = tuple(int(k) for k in exps)
    if len(e) > 4:
        raise ValueError(f"too many exponents: {exps!r}")
    e = e + (0,) * (4 - len(e))
    if any(k < 0 for k in e):
        raise ValueError(f"negative exponent in {exps!r}")
    return e


class MultiPoly:
    """Sparse multivariate polynomial over (x, y1, y2, lam).

    Terms are a mapping from exponent 4-tuples to nonzero coefficients.
    Instances are immutable by convention: all operations return new
    polynomials.  Coefficients are ordinary binary floats; exact
    (Fraction) coefficients may be used transiently while constructing a
    polynomial and are converted once via :meth:`as_float`.
    """

    __slots__ = ("_terms", "_fn")

    def __init__(self, terms=None):
        data = {}
        if terms:
            for exps, coeff in dict(terms).items():
                if coeff == 0:
                    continue
                data[_as_exponents(exps)] = coeff
        self._terms = data
        self._fn = None

    # -- construction -----------------------------------------------------
    @classmethod
    def zero(cls):
        return cls()

    @classmethod
    def const(cls, c):
        return cls({(0, 0, 0, 0): c})

    @classmethod
    def var(cls, name):
        e = [0, 0, 0, 0]
        e[_VAR_INDEX[name]] = 1
        return cls({tuple(e): 1.0})

    @classmethod
    def from_terms(cls, pairs):
        """Build from an iterable of (coefficient, exponent-tuple) pairs."""
        acc = {}
        for coeff, exps in pairs:
            e = _as_exponents(exps)
            acc[e] = acc.get(e, 0) + coeff
        return cls(acc)

    # -- bookkeeping -------------------------------------------------------
    @property
    def terms(self):
        """Term set as a dict {exponents: coefficient} (copy)."""
        return dict(self._terms)

    def __len__(self):
        return len(self._terms)

    def is_zero(self):
        return not self._terms

    def uses(self, name):
        i = _VAR_INDEX[name]
        return any(e[i] for e in self._terms)

    def degree(self, name=None):
        if not self._terms:
            return -1
        if name is None:
            return max(sum(e) for e in self._terms)
        i = _VAR_INDEX[name]
        return max(e[i] for e in self._terms)

    def as_float(self):
        return MultiPoly({e: float(c) for e, c in self._terms.items()})

    def __eq__(self, other):
        if not isinstance(other, MultiPoly):
            return NotImplemented
        return self._terms == other._terms

    def __hash__(self):
        return hash(frozenset(self._terms.items()))

    def __repr__(self):
        if not self._terms:
            return "MultiPoly(0)"
        bits = []
        for e in sorted(self._terms, key=lambda t: (sum(t), t)):
            mono = "*".join(
                f"{VARS[i]}^{k}" if k > 1 else VARS[i]
                for i, k in enumerate(e) if k
            )
            c = self._terms[e]
            bits.append(f"{c!r}*{mono}" if mono else f"{c!r}")
        return "MultiPoly(" + " + ".join(bits) + ")"

    # -- arithmetic ---------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, MultiPoly):
            return other
        if isinstance(other, (Real, Fraction)):
            return MultiPoly.const(other)
        return None

    def __add__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        acc = dict(self._terms)
        for e, c in other._terms.items():
            s = acc.get(e, 0) + c
            if s == 0:
                acc.pop(e, None)
            else:
                acc[e] = s
        return MultiPoly(acc)

    __radd__ = __add__

    def __neg__(self):
        return MultiPoly({e: -c for e, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._coerce(other)
        if other is None:
            return NotImplemented
        acc = {}
        for e1, c1 in self._terms.items():
            for e2, c2 in other._terms.items():
                e = (e1[0] + e2[0], e1[1] + e2[1], e1[2] + e2[2], e1[3] + e2[3])
                s = acc.get(e, 0) + c1 * c2
                if s == 0:
                    acc.pop(e, None)
                else:
                    acc[e] = s
        return MultiPoly(acc)

    __rmul__ = __mul__

    def __pow__(self, n):
        if not isinstance(n, int) or n < 0:
            raise ValueError("exponent must be a non-negative integer")
        out = MultiPoly.const(1)
        base = self
        while n:
            if n & 1:
                out = out * base
            base = base * base if n > 1 else base
            n >>= 1
        return out

    # -- evaluation ----------------------------------------------------------
    def eval(self, point):
        """Evaluate at a coordinate tuple (x[, y1[, y2[, lam]]]).

        The point must supply every variable the polynomial actually uses;
        omitted trailing coordinates are an error if used.
        """
        pt = tuple(point)
        if len(pt) > 4:
            raise ValueError(f"point has too many coordinates: {point!r}")
        for i in range(len(pt), 4):
            if self.uses(VARS[i]):
                raise ValueError(
                    f"polynomial uses {VARS[i]} but point {point!r} omits it")
        z = pt + (0.0,) * (4 - len(pt))
        total = 0.0
        for e, c in self._terms.items():
            v = c
            for i in range(4):
                k = e[i]
                if k:
                    v = v * z[i] ** k
            total += v
        return total

    def __call__(self, *point):
        if len(point) == 1 and isinstance(point[0], (tuple, list)):
            point = tuple(point[0])
        return self.eval(point)

    def compiled(self):
        """Fast evaluator f(x, y1=0, y2=0, lam=0); generated once, cached."""
        if self._fn is None:
            if not self._terms:
                self._fn = lambda x, y1=0.0, y2=0.0, lam=0.0: 0.0
            else:
                parts = []
                for e, c in sorted(self._terms.items()):
                    mono = [repr(float(c))]
                    for i, k in enumerate(e):
                        if k == 1:
                            mono.append(VARS[i])
                        elif k:
                            mono.append(f"{VARS[i]}**{k}")
                    parts.append("*".join(mono))
                src = "lambda x, y1=0.0, y2=0.0, lam=0.0: " + " + ".join(parts)
                self._fn = eval(src, {}, {})  # noqa: S307 - generated from numbers only
        return self._fn

    def __getstate__(self):
        return self._terms

    def __setstate__(self, state):
        self._terms = state
        self._fn = None

    # -- calculus -------------------------------------------------------------
    def differentiate(self, name, order=1):
        """Exact partial derivative of the given order (order >= 1)."""
        if order < 1:
            raise ValueError("order must be >= 1")
        i = _VAR_INDEX[name]
        cur = self._terms
        for _ in range(order):
            nxt = {}
            for e, c in cur.items():
                k = e[i]
                if not k:
                    continue
                e2 = list(e)
                e2[i] = k - 1
                key = tuple(e2)
                nxt[key] = nxt.get(key, 0) + c * k
            cur = nxt
        return MultiPoly(cur)

    def substitute(self, name, value):
        """Substitute a numeric value for one variable."""
        i = _VAR_INDEX[name]
        acc = {}
        for e, c in self._terms.items():
            k = e[i]
            v = c * value ** k if k else c
            e2 = list(e)
            e2[i] = 0
            key = tuple(e2)
            s = acc.get(key, 0) + v
            if s == 0:
                acc.pop(key, None)
            else:
                acc[key] = s
        return MultiPoly(acc)


@dataclass(frozen=True)
class AffineImage:
    """Result of an affine change of coordinates: the composed polynomial
    plus a flag recording whether the linear part was singular."""
    poly: MultiPoly
    singular: bool


def compose_affine(p, matrix, offset=None, variables=("x", "y1")):
    """Compose p with an affine map on a subset of its variables.

    Each listed variable v_i is replaced by sum_j matrix[i][j] * v_j +
    offset[i].  Degree is unchanged.  A singular linear part is allowed
    but flagged on the result.
    """
    k = len(variables)
    if offset is None:
        offset = [0.0] * k
    if len(matrix) != k or any(len(row) != k for row in matrix):
        raise ValueError("matrix shape must match the variable list")
    images = []
    for i in range(k):
        img = MultiPoly.const(offset[i]) if offset[i] != 0 else MultiPoly.zero()
        for j in range(k):
            if matrix[i][j] != 0:
                img = img + MultiPoly.var(variables[j]) * matrix[i][j]
        images.append(img)
    # 2x2 / general determinant by Laplace over small k
    det = _det([list(map(float, row)) for row in matrix])
    singular = abs(det) < 1e-14

    var_idx = [_VAR_INDEX[v] for v in variables]
    # cache powers of each image polynomial
    pows = [{0: MultiPoly.const(1)} for _ in range(k)]

    def power(i, n):
        cache = pows[i]
        if n not in cache:
            cache[n] = power(i, n - 1) * images[i]
        return cache[n]

    out = MultiPoly.zero()
    for e, c in p.terms.items():
        rest = list(e)
        mono = MultiPoly.const(c)
        for slot, i in enumerate(var_idx):
            n = e[i]
            rest[i] = 0
            if n:
                mono = mono * power(slot, n)
        carrier = MultiPoly({tuple(rest): 1.0})
        out = out + mono * carrier
    return AffineImage(out, singular)


def _det(m):
    n = len(m)
    if n == 1:
        return m[0][0]
    if n == 2:
        return m[0][0] * m[1][1] - m[0][1] * m[1][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in m[1:]]
        total += ((-1) ** j) * m[0][j] * _det(minor)
    return total


@dataclass(frozen=True)
class DomainBox:
    """Compact analysis window: closed x-interval times a 1- or 2-dim y-box."""
    x: tuple
    y: tuple  # ((lo, hi),) or ((lo, hi), (lo, hi))

    def __post_init__(self):
        if not (self.x[0] < self.x[1]):
            raise ValueError("empty x interval")
        for lo, hi in self.y:
            if not (lo < hi):
                raise ValueError("empty y interval")
        if len(self.y) not in (1, 2):
            raise ValueError("y box must be 1- or 2-dimensional")

    @property
    def n_slow(self):
        return len(self.y)

    def x_width(self):
        return self.x[1] - self.x[0]

    def widths(self):
        return (self.x_width(),) + tuple(hi - lo for lo, hi in self.y)

    def diagonal(self):
        return sum(w * w for w in self.widths()) ** 0.5

    def contains(self, point, pad=0.0):
        x = point[0]
        if not (self.x[0] - pad <= x <= self.x[1] + pad):
            return False
        for (lo, hi), v in zip(self.y, point[1:1 + len(self.y)]):
            if not (lo - pad <= v <= hi + pad):
                return False
        return True


class FastSlowSystem:
    """A concrete fast-slow vector field pair on a compact box.

    g drives the fast variable x, h the slow variable(s).  Both must be
    lam-free; parameter families are represented by :class:`SystemFamily`.
    For n_slow == 2, h may carry two components (one per slow variable).
    """

    def __init__(self, g, h, n_slow, domain):
        if n_slow not in (1, 2):
            raise ValueError("n_slow must be 1 or 2")
        if isinstance(h, MultiPoly):
            h_components = (h,) + ((MultiPoly.zero(),) if n_slow == 2 else ())
        else:
            h_components = tuple(h)
            if len(h_components) != n_slow:
                raise ValueError("h must have one component per slow variable")
        for p in (g,) + h_components:
            if p.uses("lam"):
                raise ValueError("system polynomials must be lam-free")
            if n_slow == 1 and p.uses("y2"):
                raise ValueError("y2 appears in a system with n_slow=1")
        if domain.n_slow != n_slow:
            raise ValueError("domain dimension does not match n_slow")
        self.g = g
        self.h_components = h_components
        self.n_slow = n_slow
        self.domain = domain
        self._partials = {}

    @property
    def h(self):
        return self.h_components[0]

    def partial(self, which, spec=""):
        """Compiled partial derivative, e.g. partial('g', 'xx') or
        partial('h', 'y1').  Cached per system."""
        key = (which, spec)
        fn = self._partials.get(key)
        if fn is None:
            base = {"g": self.g, "h": self.h_components[0]}
            if which.startswith("h") and len(which) == 2:
                base[which] = self.h_components[int(which[1]) - 1]
            p = base[which]
            for ch in _split_vars(spec):
                p = p.differentiate(ch)
            fn = p.compiled()
            self._partials[key] = fn
        return fn

    def __getstate__(self):
        return (self.g, self.h_components, self.n_slow, self.domain)

    def __setstate__(self, state):
        self.g, self.h_components, self.n_slow, self.domain = state
        self._partials = {}


def _split_vars(spec):
    out = []
    i = 0
    while i < len(spec):
        if spec[i] == "y":
            out.append(spec[i:i + 2])
            i += 2
        else:
            out.append(spec[i])
            i += 1
    return out


@dataclass(frozen=True)
class SystemFamily:
    """One-parameter family: template polynomials with free lam plus the
    sweep interval.  Substituting any lam in the interval yields a valid
    FastSlowSystem."""
    g: MultiPoly
    h: tuple
    n_slow: int
    domain: DomainBox
    sweep: tuple
    name: str = ""

    def __post_init__(self):
        if self.sweep[0] >= self.sweep[1]:
            raise ValueError("empty sweep interval")

    def at(self, lam):
        g = self.g.substitute("lam", float(lam))
        h = tuple(p.substitute("lam", float(lam)) for p in self.h)
        return FastSlowSystem(g, h, self.n_slow, self.domain)


# ---------------------------------------------------------------------------
# Built-in example systems
# ---------------------------------------------------------------------------

BUILTIN_NAMES = (
    "fold_tangency",
    "hysteresis",
    "aligned_double_limit",
    "opposed_double_limit",
    "vdp_cubic",
)

_BUILTIN_DOMAINS = {
    "fold_tangency": DomainBox((-2.5, 2.5), ((-2.0, 2.0),)),
    "hysteresis": DomainBox((-2.0, 2.0), ((-2.0, 2.0),)),
    "aligned_double_limit": DomainBox((-2.0, 2.0), ((-2.0, 2.0),)),
    "opposed_double_limit": DomainBox((-1.0, 3.0), ((-2.0, 1.0),)),
    "vdp_cubic": DomainBox((-3.0, 3.0), ((-2.0, 2.0),)),
}

_BUILTIN_SWEEPS = {
    "fold_tangency": (-0.02, 0.02),
    "hysteresis": (-0.2, 0.2),
    "aligned_double_limit": (-0.1, 0.1),
    "opposed_double_limit": (-0.003, 0.006),
    "vdp_cubic": (-0.1, 0.1),
}


def _x():
    return MultiPoly.var("x")


def _y1():
    return MultiPoly.var("y1")


def _lam():
    return MultiPoly.var("lam")


def _quintic_primitive(a, roots_with_mult):
    """Integral from 0 of -a * prod (s - r_i)^m_i, done exactly in Fraction."""
    coeffs = [Fraction(1)]
    for r, m in roots_with_mult:
        for _ in range(m):
            coeffs = _umul(coeffs, [-Fraction(r), Fraction(1)])
    prim = [Fraction(0)] + [(-Fraction(a)) * c / (i + 1) for i, c in enumerate(coeffs)]
    return MultiPoly.from_terms(
        [(c, (i, 0, 0, 0)) for i, c in enumerate(prim) if c != 0])


def _umul(p, q):
    out = [Fraction(0)] * (len(p) + len(q) - 1)
    for i, c in enumerate(p):
        for j, d in enumerate(q):
            out[i + j] += c * d
    return out


def _bean_polynomial():
    """Quartic bean curve x^4 + x^2 y^2 + y^4 - x (x^2 + y^2), written in
    (x, y1) standing for the rotated coordinates.  A kidney-shaped oval
    through the origin spanning 0 <= x <= 1."""
    u, v = _x(), _y1()
    return u ** 4 + u * u * v * v + v ** 4 - u * (u * u + v * v)


def _builtin_templates(name):
    x, y, lam = _x(), _y1(), _lam()
    if name == "vdp_cubic":
        g = -(x ** 3 - 2 * x + y)
        h = x
        return g, h
    if name == "fold_tangency":
        xc, yc = Fraction(81, 100), Fraction(-1, 4)
        R, q = Fraction(11, 20), Fraction(1, 100)
        g_cubic = x ** 3 - 2 * x + y
        g_circle = (x - xc) ** 2 + (y - yc) ** 2 - R * R
        g = -(g_cubic * g_circle + lam * x + q)
        # nullcline x = -b (y - yc)^2 + x_max, a leftward parabola
        b = Fraction(1, 2)
        x_max = xc + R - Fraction(1, 10)
        h = x + b * (y - yc) ** 2 - x_max
        return g, h
    if name == "hysteresis":
        # Quintic whose derivative has simple roots at -1, -1/5 and a double
        # root at +1, heights matched so the lower fold's landing sits exactly
        # on the cubic degeneracy at lam = 0.  See the package README for why
        # this differs from the published parameter tuple.
        prim = _quintic_primitive(
            Fraction(15, 4), [(-1, 1), (Fraction(-1, 5), 1), (1, 2)])
        g = prim + lam * x - Fraction(3, 5) - y
        h = x + Fraction(3, 5)
        return g, h
    if name == "aligned_double_limit":
        prim = _quintic_primitive(
            Fraction(640, 49),
            [(1, 1), (Fraction(13, 40), 1), (Fraction(-1, 2), 1), (Fraction(-5, 4), 1)])
        g = prim + lam * x - y
        h = x - Fraction(7, 10)
        return g, h
    if name == "opposed_double_limit":
        import math
        q = Fraction(1, 100)
        g_cubic = Fraction(1, 2) * x ** 3 - x + y
        M, theta = 1.5, 13.0 * math.pi / 40.0
        xc, yc = 0.97, -0.55
        c, s = math.cos(theta), math.sin(theta)
        # scaled, rotated coordinates centred on (xc, yc)
        bean = compose_affine(
            _bean_polynomial(),
            [[M * c, M * s], [-M * s, M * c]],
            offset=[-M * (c * xc + s * yc), -M * (-s * xc + c * yc)],
            variables=("x", "y1"),
        ).poly
        g = -(g_cubic * bean + lam * x + q)
        x1, x2 = Fraction(7868, 10000), Fraction(1221, 1000)
        yy1, yy2 = Fraction(-11, 100), Fraction(-74, 100)
        k = (x1 - x2) / (yy1 - yy2)
        cc = x1 - k * yy1
        h = x - (k * y + cc)
        return g, h
    raise ValueError(f"unknown builtin {name!r}")


def builtin_family(name):
    """Template family for a built-in example system (lam still free)."""
    if name not in BUILTIN_NAMES:
        raise ValueError(f"unknown builtin {name!r}")
    g, h = _builtin_templates(name)
    return SystemFamily(
        g=g.as_float(),
        h=(h.as_float(),),
        n_slow=1,
        domain=_BUILTIN_DOMAINS[name],
        sweep=_BUILTIN_SWEEPS[name],
        name=name,
    )


def builtin_system(name, lam=0.0):
    """Built-in example system with lam substituted."""
    return builtin_family(name).at(lam)


# ---------------------------------------------------------------------------
# Config ingestion
# ---------------------------------------------------------------------------

class ConfigError(ValueError):
    """Malformed system configuration document."""


def _parse_coeff(c):
    if isinstance(c, str):
        try:
            return float(Fraction(c))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad coefficient {c!r}") from exc
    if isinstance(c, bool) or not isinstance(c, Real):
        raise ConfigError(f"non-numeric coefficient {c!r}")
    return float(c)


def _parse_terms(raw, what):
    if not isinstance(raw, list):
        raise ConfigError(f"{what} must be a list of [coeff, exponents] pairs")
    pairs = []
    for item in raw:
        try:
            coeff, exps = item
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad term {item!r} in {what}") from exc
        pairs.append((_parse_coeff(coeff), _as_exponents(exps)))
    return MultiPoly.from_terms(pairs)


def load_config(document):
    """Parse a JSON config document (text) into a SystemFamily."""
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")

    name = doc.get("name")
    if name is not None:
        base = builtin_family(name)
        sweep = tuple(doc.get("sweep", base.sweep))
        if len(sweep) != 2 or not sweep[0] < sweep[1]:
            raise ConfigError("empty sweep interval")
        return SystemFamily(base.g, base.h, base.n_slow, base.domain,
                            (float(sweep[0]), float(sweep[1])), name=name)

    try:
        n_slow = doc["n_slow"]
        dom = doc["domain"]
    except KeyError as exc:
        raise ConfigError(f"missing field {exc.args[0]!r}") from exc
    if n_slow not in (1, 2):
        raise ConfigError(f"n_slow must be 1 or 2, got {n_slow!r}")
    try:
        domain = DomainBox(
            (float(dom["x"][0]), float(dom["x"][1])),
            tuple((float(lo), float(hi)) for lo, hi in dom["y"]),
        )
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise ConfigError(f"bad domain: {exc}") from exc
    if domain.n_slow != n_slow:
        raise ConfigError("domain y-box dimension does not match n_slow")

    g = _parse_terms(doc.get("g_terms", []), "g_terms")
    h1 = _parse_terms(doc.get("h_terms", []), "h_terms")
    h = (h1,)
    if n_slow == 2:
        h = (h1, _parse_terms(doc.get("h2_terms", []), "h2_terms"))
    sweep = doc.get("sweep", (0.0, 1.0))
    if len(sweep) != 2 or not float(sweep[0]) < float(sweep[1]):
        raise ConfigError("empty sweep interval")
    for p in (g,) + h:
        if n_slow == 1 and p.uses("y2"):
            raise ConfigError("y2 appears in terms but n_slow=1")
    return SystemFamily(g, h, n_slow, domain,
                        (float(sweep[0]), float(sweep[1])),
                        name=doc.get("label", ""))


def dump_config(family):
    """Serialize a SystemFamily to JSON text; load_config round-trips it."""
    def poly_terms(p):
        return [[coeff, list(exps)]
                for exps, coeff in sorted(p.terms.items())]

    doc = {
        "n_slow": family.n_slow,
        "domain": {
            "x": list(family.domain.x),
            "y": [list(iv) for iv in family.domain.y],
        },
        "g_terms": poly_terms(family.g),
        "h_terms": poly_terms(family.h[0]),
        "sweep": list(family.sweep),
    }
    if family.n_slow == 2:
        doc["h2_terms"] = poly_terms(family.h[1])
    if family.name:
        doc["label"] = family.name
    return json.dumps(doc, indent=2, sort_keys=True)
