"""Numerically stable helpers built on top of scipy.special.

The generalized gamma formulas involve differences of log-gamma values at
arguments near ``k = q**-2``, which is huge when ``q`` is small.  Evaluating
those differences directly cancels catastrophically, so the helpers below
rewrite them through the Stirling remainder.
"""
import numpy as np
from scipy import special

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_STIRLING_SWITCH = 15.0


def stirlerr(x):
    """Remainder of Stirling's series, ``lgamma(x) - (x-1/2)log x + x - log(2 pi)/2``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    big = x >= _STIRLING_SWITCH
    xb = x[big]
    r = 1.0 / (xb * xb)
    out[big] = (1.0 / 12 - r * (1.0 / 360 - r * (1.0 / 1260 - r * (1.0 / 1680 - r / 1188)))) / xb
    xs = x[~big]
    out[~big] = special.gammaln(xs) - (xs - 0.5) * np.log(xs) + xs - _HALF_LOG_2PI
    return out


def log1pmx(x):
    """``x - log1p(x)``, accurate for small ``|x|``."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 0.05
    xs = x[small]
    # alternating series x^2/2 - x^3/3 + ...
    acc = np.zeros_like(xs)
    for n in range(18, 1, -1):
        acc = xs * acc + (-1.0) ** n / n
    out[small] = xs * xs * acc
    xl = x[~small]
    out[~small] = xl - np.log1p(xl)
    return out


def expm1mx(z):
    """``expm1(z) - z``, accurate for small ``|z|``."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 0.1
    zs = z[small]
    acc = np.zeros_like(zs)
    fact = [1.0]
    for n in range(1, 16):
        fact.append(fact[-1] * n)
    for n in range(15, 1, -1):
        acc = zs * acc + 1.0 / fact[n]
    out[small] = zs * zs * acc
    zl = z[~small]
    with np.errstate(over="ignore"):
        out[~small] = np.expm1(zl) - zl
    return out


def log_gamma_ratio(k, a):
    """``lgamma(k + a) - lgamma(k) - a*log(k)`` for ``k > 0`` and ``k + a > 0``."""
    k, a = np.broadcast_arrays(np.asarray(k, dtype=float), np.asarray(a, dtype=float))
    out = np.empty(k.shape)
    ka = k + a
    stir = (k >= _STIRLING_SWITCH) & (ka >= _STIRLING_SWITCH)
    kk, aa = k[stir], a[stir]
    x = aa / kk
    out[stir] = ((aa - 0.5) * x - (kk + aa - 0.5) * log1pmx(x)
                 + stirlerr(kk + aa) - stirlerr(kk))
    kd, ad = k[~stir], a[~stir]
    out[~stir] = special.gammaln(kd + ad) - special.gammaln(kd) - ad * np.log(kd)
    return out


class _HermiteTable:
    """Piecewise cubic Hermite interpolant on a uniform grid.

    Evaluating Bessel functions elementwise dominates the cost of building
    Matérn covariances inside the optimizer, and a table with exact node
    derivatives reproduces them to ~1e-12 absolute error.
    """

    def __init__(self, f, df, lo, hi, step):
        x = np.arange(lo, hi + step, step)
        fv, dv = f(x), df(x)
        h = step
        f0, f1 = fv[:-1], fv[1:]
        d0, d1 = dv[:-1] * h, dv[1:] * h
        # one contiguous array per coefficient: 1-D gathers are much cheaper
        self.coef = (f0, d0, 3.0 * (f1 - f0) - 2.0 * d0 - d1, 2.0 * (f0 - f1) + d0 + d1)
        self.lo, self.inv_step, self.n = lo, 1.0 / step, len(x) - 1

    def __call__(self, x):
        s = (x - self.lo) * self.inv_step
        i = s.astype(np.intp)
        np.clip(i, 0, self.n - 1, out=i)
        t = s - i
        c0, c1, c2, c3 = (c.take(i) for c in self.coef)
        return c0 + t * (c1 + t * (c2 + t * c3))


_TAB_LO, _TAB_HI = 0.05, 40.0
_tables = {}


def _get_tables():
    if not _tables:
        k0, k1 = special.k0, special.k1
        _tables["f1"] = _HermiteTable(lambda x: x * k1(x), lambda x: -x * k0(x),
                                      _TAB_LO, _TAB_HI, 1e-3)
        _tables["f0"] = _HermiteTable(
            lambda x: x * x * k0(x),
            lambda x: 2.0 * x * k0(x) - x * x * k1(x),
            _TAB_LO, _TAB_HI, 1e-3)
    return _tables["f1"], _tables["f0"]


def matern1_unit(x, exact=False):
    """Return ``(x*K1(x), x**2*K0(x))`` elementwise for ``x >= 0``.

    The first is the Matérn(nu=1) correlation at scaled distance ``x``; the
    second is its derivative with respect to log-range.
    """
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    if exact:
        c = np.zeros_like(flat)
        dc = np.zeros_like(flat)
        zero = flat < 1e-100
        c[zero] = 1.0
        pos = ~zero
        xp = flat[pos]
        c[pos] = xp * special.k1(xp)
        dc[pos] = xp * xp * special.k0(xp)
        return c.reshape(x.shape), dc.reshape(x.shape)
    t1, t0 = _get_tables()
    xc = np.clip(flat, _TAB_LO, _TAB_HI)
    c, dc = t1(xc), t0(xc)
    far = np.flatnonzero(flat >= _TAB_HI)
    c[far] = 0.0
    dc[far] = 0.0
    near = np.flatnonzero(flat < _TAB_LO)
    xn = flat[near]
    # K1 overflows for tiny x; both functions sit at their limits (1, 0) below 1e-100
    tiny = xn < 1e-100
    with np.errstate(invalid="ignore", over="ignore"):
        c[near] = np.where(tiny, 1.0, xn * special.k1(xn))
        dc[near] = np.where(tiny, 0.0, xn * xn * special.k0(xn))
    return c.reshape(x.shape), dc.reshape(x.shape)
