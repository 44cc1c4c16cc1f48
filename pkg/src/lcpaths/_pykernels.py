"""Pure numpy implementation of the hot kernels.

This module mirrors the API of the compiled ``lcpaths._kernels`` extension
and is selected automatically when the extension is unavailable (see
``lcpaths.backend``).  The two backends agree bit-for-bit on everything built
from +,-,*,/ alone (Philox output, the central branch of the inverse normal
CDF, bridge grids, sup norms); kernels that go through libm (exp, log) agree
to a few ulps and are compared at tolerance in the test suite.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND_NAME = "python"

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_PHILOX_M0 = 0xD2E7470EE14C6C93
_PHILOX_M1 = 0xCA5A826395121157
_PHILOX_W0 = np.uint64(0x9E3779B97F4A7C15)
_PHILOX_W1 = np.uint64(0xBB67AE8584CAA73B)

_U32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

# Largest level accepted by the grid kernels: 2^26 + 1 doubles is ~0.5 GiB.
MAX_GRID_LEVEL = 26

_TWO_M53 = 2.0 ** -53


def _as_u64(x: int) -> np.uint64:
    return np.uint64(int(x) & 0xFFFFFFFFFFFFFFFF)


def substream_key(key: int, index: int) -> int:
    """Derive the 64-bit key of substream ``index`` (splitmix64 finalizer)."""
    z = (int(key) + (int(index) + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & 0xFFFFFFFFFFFFFFFF
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _mulhilo(a: int, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """128-bit product of a 64-bit constant with a uint64 array: (hi, lo)."""
    a = np.uint64(a)
    lo = a * b  # wraps mod 2^64
    ah = a >> _SHIFT32
    al = a & _U32
    bh = b >> _SHIFT32
    bl = b & _U32
    t1 = al * bl
    t2 = ah * bl
    t3 = al * bh
    carry = ((t1 >> _SHIFT32) + (t2 & _U32) + (t3 & _U32)) >> _SHIFT32
    hi = ah * bh + (t2 >> _SHIFT32) + (t3 >> _SHIFT32) + carry
    return hi, lo


def _philox4x64(c0, c1, c2, c3, k0, k1):
    """Ten Philox4x64 rounds; inputs are uint64 arrays or scalars."""
    with np.errstate(over="ignore"):
        for _ in range(10):
            hi0, lo0 = _mulhilo(_PHILOX_M0, c0)
            hi1, lo1 = _mulhilo(_PHILOX_M1, c2)
            c0 = hi1 ^ c1 ^ k0
            c1 = lo1
            c2 = hi0 ^ c3 ^ k1
            c3 = lo0
            k0 = k0 + _PHILOX_W0
            k1 = k1 + _PHILOX_W1
    return c0, c1, c2, c3


def philox_raw(seed: int, key: int, block0: int, nblocks: int) -> np.ndarray:
    """Raw 64-bit Philox output for blocks block0..block0+nblocks-1."""
    c0 = np.arange(block0, block0 + nblocks, dtype=np.uint64)
    zero = np.zeros(nblocks, dtype=np.uint64)
    o0, o1, o2, o3 = _philox4x64(
        c0, zero, zero.copy(), zero.copy(), _as_u64(seed), _as_u64(key)
    )
    return np.stack([o0, o1, o2, o3], axis=1).ravel()


def _uniforms_from_words(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles in the open interval (0, 1)."""
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53


# Wichura's PPND16 rational approximations (double precision inverse normal
# CDF).  Relative error is ~1e-16 over the full open interval.
_PPND_A = (
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
)
_PPND_B = (
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
)
_PPND_C = (
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
)
_PPND_D = (
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
_PPND_E = (
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
)
_PPND_F = (
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _poly7(coeffs, r):
    # Horner order shared verbatim with the compiled kernel.
    c0, c1, c2, c3, c4, c5, c6, c7 = coeffs
    return ((((((c7 * r + c6) * r + c5) * r + c4) * r + c3) * r + c2) * r + c1) * r + c0


def inverse_normal_cdf(u):
    """Inverse of the standard normal CDF on (0, 1) (Wichura's algorithm)."""
    scalar = np.isscalar(u)
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    q = u - 0.5
    r = 0.180625 - q * q
    x = q * (_poly7(_PPND_A, r) / _poly7(_PPND_B, r))
    tail = np.abs(q) > 0.425
    if np.any(tail):
        ut = u[tail]
        rt = np.where(q[tail] < 0.0, ut, 1.0 - ut)
        rt = np.sqrt(-np.log(rt))
        near = rt <= 5.0
        r1 = rt - 1.6
        r2 = rt - 5.0
        xt = np.where(
            near,
            _poly7(_PPND_C, r1) / _poly7(_PPND_D, r1),
            _poly7(_PPND_E, r2) / _poly7(_PPND_F, r2),
        )
        x[tail] = np.where(q[tail] < 0.0, -xt, xt)
    return float(x[0]) if scalar else x


def normals(seed: int, key: int, start: int, count: int) -> np.ndarray:
    """``count`` standard normal variates at stream positions start, start+1, ..."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    out = np.empty(count, dtype=np.float64)
    if count == 0:
        return out
    b0 = start >> 2
    b1 = (start + count - 1) >> 2
    words = philox_raw(seed, key, b0, b1 - b0 + 1)
    off = start - 4 * b0
    u = _uniforms_from_words(words[off : off + count])
    return inverse_normal_cdf(u)


def _peak(n: int) -> float:
    """Peak height 2^{-(n+1)/2} of a level-n hat function."""
    if n & 1:
        return math.ldexp(1.0, -((n + 1) >> 1))
    return math.ldexp(math.sqrt(0.5), -(n >> 1))


def _check_grid_level(m: int) -> None:
    if m > MAX_GRID_LEVEL:
        raise ValueError(f"grid level {m} exceeds supported maximum {MAX_GRID_LEVEL}")


def bridge_grid(coeffs: np.ndarray, level: int, grid_level: int) -> np.ndarray:
    """Midpoint-refinement evaluation of the level-``level`` path on the
    dyadic grid j/2^grid_level (plain double precision)."""
    _check_grid_level(grid_level)
    v = np.zeros((1 << grid_level) + 1, dtype=np.float64)
    v[-1] = coeffs[0]
    for n in range(1, grid_level + 1):
        step = 1 << (grid_level - n + 1)
        half = step >> 1
        mid = 0.5 * (v[0:-1:step] + v[step::step])
        if n <= level:
            p0 = 1 << (n - 1)
            mid = mid + _peak(n) * coeffs[p0 : 2 * p0]
        v[half::step] = mid
    return v


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _quick_two_sum(s, e):
    h = s + e
    return h, e - (h - s)


def bridge_grid_dd(coeffs: np.ndarray, level: int, grid_level: int) -> np.ndarray:
    """Same recursion carried in double-double arithmetic.

    The returned doubles are correctly rounded values of the exact
    piecewise-linear path, so they match any faithful direct summation of
    the expansion to well under 1e-15.
    """
    _check_grid_level(grid_level)
    npts = (1 << grid_level) + 1
    hi = np.zeros(npts, dtype=np.float64)
    lo = np.zeros(npts, dtype=np.float64)
    hi[-1] = coeffs[0]
    for n in range(1, grid_level + 1):
        step = 1 << (grid_level - n + 1)
        half = step >> 1
        lh, ll = hi[0:-1:step], lo[0:-1:step]
        rh, rl = hi[step::step], lo[step::step]
        s, e = _two_sum(lh, rh)
        e = e + (ll + rl)
        h, l = _quick_two_sum(s, e)
        h = h * 0.5
        l = l * 0.5
        if n <= level:
            p0 = 1 << (n - 1)
            c = _peak(n) * coeffs[p0 : 2 * p0]
            s, e = _two_sum(h, c)
            e = e + l
            h, l = _quick_two_sum(s, e)
        hi[half::step] = h
        lo[half::step] = l
    return hi.copy()


def tail_sup_l2(tail: np.ndarray, n_level: int, m_level: int) -> tuple[float, float]:
    """Exact sup and squared L2 norm of the level-(N..M] tail path.

    ``tail`` holds the coefficients at canonical positions 2^N .. 2^M - 1.
    The tail path vanishes on the level-N grid and is affine on level-M
    cells, so both norms are exact up to rounding.
    """
    _check_grid_level(m_level)
    base = 1 << n_level
    v = np.zeros((1 << m_level) + 1, dtype=np.float64)
    for n in range(n_level + 1, m_level + 1):
        step = 1 << (m_level - n + 1)
        half = step >> 1
        p0 = 1 << (n - 1)
        c = tail[p0 - base : 2 * p0 - base]
        v[half::step] = 0.5 * (v[0:-1:step] + v[step::step]) + _peak(n) * c
    sup = float(np.abs(v).max())
    a = v[:-1]
    b = v[1:]
    l2 = float(np.sum(a * a + a * b + b * b)) * (math.ldexp(1.0, -m_level) / 3.0)
    return sup, l2


_EXP_GUARD = 700.0


def _check_exponent(arr: np.ndarray) -> None:
    amax = float(np.max(np.abs(arr)))
    if amax > _EXP_GUARD:
        raise OverflowError(
            f"exponent magnitude {amax:.1f} exceeds the +-{_EXP_GUARD:.0f} guard"
        )


def gbm_sup_refined(
    coeffs: np.ndarray,
    n_level: int,
    m_level: int,
    oversample: int,
    drift: float,
    sigma: float,
) -> float:
    """Max of |exp(u) - exp(w)| over the refined dyadic lattice.

    u and w are the log-price exponents of the level-M and level-N paths
    built from shared coefficients.  The lattice is the level-M grid with
    oversample-1 extra equispaced points per cell; because the difference
    has at most one interior critical point per cell, the lattice max is
    attained at cell endpoints or at the lattice points bracketing that
    critical point, which is what gets evaluated.
    """
    _check_grid_level(m_level)
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    npow = 1 << m_level
    v_m = bridge_grid(coeffs, m_level, m_level)
    v_n = bridge_grid(coeffs[: 1 << n_level], n_level, m_level)
    t = np.arange(npow + 1, dtype=np.float64) * math.ldexp(1.0, -m_level)
    u = drift * t + sigma * v_m
    w = drift * t + sigma * v_n
    _check_exponent(u)
    _check_exponent(w)
    eu = np.exp(u)
    ew = np.exp(w)
    best = float(np.max(np.abs(eu - ew)))

    scale = float(npow)
    b1 = drift + sigma * (v_m[1:] - v_m[:-1]) * scale
    b2 = drift + sigma * (v_n[1:] - v_n[:-1]) * scale
    cand = np.nonzero(b1 * b2 > 0.0)[0]
    if cand.size:
        dl = u[cand] - w[cand]
        dr = u[cand + 1] - w[cand + 1]
        ell = np.log(b2[cand] / b1[cand])
        inside = (ell - dl) * (ell - dr) < 0.0
        cells = cand[inside]
        if cells.size:
            frac = (ell[inside] - dl[inside]) / (dr[inside] - dl[inside])
            k = np.floor(frac * oversample).astype(np.int64)
            denom = float(oversample) * scale
            for kk in (k, k + 1):
                kk = np.clip(kk, 0, oversample)
                tt = (cells * oversample + kk).astype(np.float64) / denom
                dt = tt - t[cells]
                uu = drift * tt + sigma * (v_m[cells] + dt * (v_m[cells + 1] - v_m[cells]) * scale)
                ww = drift * tt + sigma * (v_n[cells] + dt * (v_n[cells + 1] - v_n[cells]) * scale)
                g = np.abs(np.exp(uu) - np.exp(ww))
                if g.size:
                    best = max(best, float(g.max()))
    return best


def exp_affine_integral(values: np.ndarray, drift: float, sigma: float) -> float:
    """Exact integral over [0,1] of exp(drift*t + sigma*path(t)) for a path
    that is affine between consecutive grid values."""
    n_cells = values.shape[0] - 1
    h = 1.0 / n_cells
    t = np.arange(n_cells + 1, dtype=np.float64) * h
    g = drift * t + sigma * values
    _check_exponent(g)
    e = np.exp(g[:-1])
    m = (g[1:] - g[:-1]) / h
    mh = m * h
    small = np.abs(m) < 1e-8
    with np.errstate(divide="ignore", invalid="ignore"):
        full = np.expm1(mh) / m
    taylor = h * (1.0 + mh * 0.5 + mh * mh / 6.0)
    terms = e * np.where(small, taylor, full)
    return float(np.sum(terms))


# ---------------------------------------------------------------------------
# Monte Carlo ladder drivers.  One call processes samples k0..k1-1 of a row;
# sample k draws from the substream keyed by substream_key(row_key, k), so
# results do not depend on how the sample range is partitioned across calls.
# Levels share each sample's draws through the counter-based stream, which
# makes the per-(level, sample) outputs bitwise equal to single-level runs.
# ---------------------------------------------------------------------------


def mc_tail_ladder(seed, row_key, k0, k1, n_levels, delta, out_sup, out_l2):
    n_levels = [int(n) for n in n_levels]
    pos0 = 1 << n_levels[0]
    count = (1 << (n_levels[-1] + delta)) - pos0
    for k in range(k0, k1):
        draws = normals(seed, substream_key(row_key, k), pos0, count)
        for idx, n in enumerate(n_levels):
            base = 1 << n
            top = 1 << (n + delta)
            sup, l2 = tail_sup_l2(draws[base - pos0 : top - pos0], n, n + delta)
            out_sup[idx, k - k0] = sup
            out_l2[idx, k - k0] = l2


def mc_gbm_ladder(
    seed, row_key, k0, k1, n_levels, delta, oversample, drift, sigma, out_sup
):
    n_levels = [int(n) for n in n_levels]
    count = 1 << (n_levels[-1] + delta)
    for k in range(k0, k1):
        coeffs = normals(seed, substream_key(row_key, k), 0, count)
        for idx, n in enumerate(n_levels):
            m = n + delta
            out_sup[idx, k - k0] = gbm_sup_refined(
                coeffs[: 1 << m], n, m, oversample, drift, sigma
            )


def mc_asian_ladder(seed, row_key, k0, k1, n_levels, drift, sigma, out_integral):
    n_levels = [int(n) for n in n_levels]
    count = 1 << n_levels[-1]
    for k in range(k0, k1):
        coeffs = normals(seed, substream_key(row_key, k), 0, count)
        for idx, n in enumerate(n_levels):
            grid = bridge_grid(coeffs[: 1 << n], n, n)
            out_integral[idx, k - k0] = exp_affine_integral(grid, drift, sigma)


def mc_x0_block(seed, row_key, k0, k1, out):
    idx = np.arange(k0, k1, dtype=np.uint64)
    keys = np.asarray(
        [substream_key(row_key, int(k)) for k in idx], dtype=np.uint64
    )
    zero = np.zeros(idx.shape[0], dtype=np.uint64)
    o0, _, _, _ = _philox4x64(
        zero.copy(), zero.copy(), zero.copy(), zero.copy(), _as_u64(seed), keys
    )
    out[:] = inverse_normal_cdf(_uniforms_from_words(o0))


def mc_maxabs_block(seed, row_key, k0, k1, ell, out):
    for k in range(k0, k1):
        x = normals(seed, substream_key(row_key, k), 0, ell)
        out[k - k0] = float(np.abs(x).max())
