# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: counter-based normal streams, dyadic bridge grids,
exact tail norms, refined GBM sup norms and exp-affine integrals.

The API mirrors lcpaths._pykernels; see that module for the semantics and
for the cross-backend bit-compatibility notes.
"""

import numpy as np

from libc.stdlib cimport free, malloc
from libc.string cimport memset

cdef extern from *:
    """
    typedef unsigned long long u64_t;
    typedef unsigned __int128 u128_t;
    static inline void mulhilo64(u64_t a, u64_t b, u64_t *hi, u64_t *lo) {
        u128_t p = (u128_t)a * (u128_t)b;
        *hi = (u64_t)(p >> 64);
        *lo = (u64_t)p;
    }
    /* Constants live as macros so the optimizer treats them as literals
       (mutable module globals would block vectorization of the hot loops). */
    #define PHILOX_M0 0xD2E7470EE14C6C93ULL
    #define PHILOX_M1 0xCA5A826395121157ULL
    #define PHILOX_W0 0x9E3779B97F4A7C15ULL
    #define PHILOX_W1 0xBB67AE8584CAA73BULL
    #define TWO_M53 1.1102230246251565e-16
    #define EXP_GUARD 700.0
    #define A0 3.3871328727963666080e0
    #define A1 1.3314166789178437745e2
    #define A2 1.9715909503065514427e3
    #define A3 1.3731693765509461125e4
    #define A4 4.5921953931549871457e4
    #define A5 6.7265770927008700853e4
    #define A6 3.3430575583588128105e4
    #define A7 2.5090809287301226727e3
    #define B1 4.2313330701600911252e1
    #define B2 6.8718700749205790830e2
    #define B3 5.3941960214247511077e3
    #define B4 2.1213794301586595867e4
    #define B5 3.9307895800092710610e4
    #define B6 2.8729085735721942674e4
    #define B7 5.2264952788528545610e3
    #define C0 1.42343711074968357734e0
    #define C1 4.63033784615654529590e0
    #define C2 5.76949722146069140550e0
    #define C3 3.64784832476320460504e0
    #define C4 1.27045825245236838258e0
    #define C5 2.41780725177450611770e-1
    #define C6 2.27238449892691845833e-2
    #define C7 7.74545014278341407640e-4
    #define D1 2.05319162663775882187e0
    #define D2 1.67638483018380384940e0
    #define D3 6.89767334985100004550e-1
    #define D4 1.48103976427480074590e-1
    #define D5 1.51986665636164571966e-2
    #define D6 5.47593808499534494600e-4
    #define D7 1.05075007164441684324e-9
    #define E0 6.65790464350110377720e0
    #define E1 5.46378491116411436990e0
    #define E2 1.78482653991729133580e0
    #define E3 2.96560571828504891230e-1
    #define E4 2.65321895265761230930e-2
    #define E5 1.24266094738807843860e-3
    #define E6 2.71155556874348757815e-5
    #define E7 2.01033439929228813265e-7
    #define F1 5.99832206555887937690e-1
    #define F2 1.36929880922735805310e-1
    #define F3 1.48753612908506148525e-2
    #define F4 7.86869131145613259100e-4
    #define F5 1.84631831751005468180e-5
    #define F6 1.42151175831644588870e-7
    #define F7 2.04426310338993978564e-15
    """
    ctypedef unsigned long long u64_t
    void mulhilo64(u64_t a, u64_t b, u64_t* hi, u64_t* lo) nogil
    u64_t PHILOX_M0
    u64_t PHILOX_M1
    u64_t PHILOX_W0
    u64_t PHILOX_W1
    double TWO_M53
    double EXP_GUARD
    double A0, A1, A2, A3, A4, A5, A6, A7
    double B1, B2, B3, B4, B5, B6, B7
    double C0, C1, C2, C3, C4, C5, C6, C7
    double D1, D2, D3, D4, D5, D6, D7
    double E0, E1, E2, E3, E4, E5, E6, E7
    double F1, F2, F3, F4, F5, F6, F7

cdef extern from "math.h" nogil:
    double exp(double)
    double expm1(double)
    double log(double)
    double sqrt(double)
    double fabs(double)
    double ldexp(double, int)
    double floor(double)

BACKEND_NAME = "compiled"
MAX_GRID_LEVEL = 26

DEF CHUNK_WORDS = 4096


cdef inline u64_t c_substream_key(u64_t key, u64_t index) noexcept nogil:
    cdef u64_t z = key + (index + 1ULL) * 0x9E3779B97F4A7C15ULL
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef struct KeySchedule:
    u64_t ks0[10]
    u64_t ks1[10]
    u64_t h01
    u64_t l01


cdef inline void make_schedule(u64_t seed, u64_t key, KeySchedule* s) noexcept nogil:
    cdef u64_t k0 = seed, k1 = key
    cdef int r
    for r in range(10):
        s.ks0[r] = k0
        s.ks1[r] = k1
        k0 = k0 + PHILOX_W0
        k1 = k1 + PHILOX_W1
    # Round 1 multiplies M0 by c0 = seed, a per-stream constant.
    mulhilo64(PHILOX_M0, s.ks0[0], &s.h01, &s.l01)


cdef inline void philox_one(const KeySchedule* s, u64_t blk, u64_t* o) noexcept nogil:
    # Rounds 0-1 are algebraically simplified: the counter words 1..3 start
    # at zero, so round 0 needs a single multiply and round 1 reuses the
    # hoisted (h01, l01).  Output is identical to the plain 10-round Philox.
    cdef u64_t a0, a1, a2, a3, h, l, h2, l2, k0, k1
    cdef int r
    mulhilo64(PHILOX_M0, blk, &h, &l)
    a2 = h ^ s.ks1[0]
    a3 = l
    mulhilo64(PHILOX_M1, a2, &h2, &l2)
    a0 = h2 ^ s.ks0[1]
    a1 = l2
    a2 = s.h01 ^ a3 ^ s.ks1[1]
    a3 = s.l01
    for r in range(2, 10):
        k0 = s.ks0[r]
        k1 = s.ks1[r]
        mulhilo64(PHILOX_M0, a0, &h, &l)
        mulhilo64(PHILOX_M1, a2, &h2, &l2)
        a0 = h2 ^ a1 ^ k0
        a1 = l2
        a2 = h ^ a3 ^ k1
        a3 = l
    o[0] = a0
    o[1] = a1
    o[2] = a2
    o[3] = a3


cdef void fill_words(const KeySchedule* s, u64_t blk0, Py_ssize_t nblocks,
                     u64_t* out) noexcept nogil:
    # Two interleaved counter blocks to hide the multiply latency chain.
    # The schedule is copied to locals so the output stores cannot be
    # presumed to alias it (that would force reloads every iteration).
    cdef u64_t ks0[10]
    cdef u64_t ks1[10]
    cdef int r
    for r in range(10):
        ks0[r] = s.ks0[r]
        ks1[r] = s.ks1[r]
    cdef u64_t h01 = s.h01, l01 = s.l01
    cdef Py_ssize_t b = 0
    cdef u64_t a0, a1, a2, a3, b0, b1, b2, b3, h, l, h2, l2, k0, k1
    cdef u64_t* o
    while b + 1 < nblocks:
        mulhilo64(PHILOX_M0, blk0 + <u64_t>b, &h, &l)
        a2 = h ^ ks1[0]
        a3 = l
        mulhilo64(PHILOX_M1, a2, &h2, &l2)
        a0 = h2 ^ ks0[1]
        a1 = l2
        a2 = h01 ^ a3 ^ ks1[1]
        a3 = l01
        mulhilo64(PHILOX_M0, blk0 + <u64_t>b + 1ULL, &h, &l)
        b2 = h ^ ks1[0]
        b3 = l
        mulhilo64(PHILOX_M1, b2, &h2, &l2)
        b0 = h2 ^ ks0[1]
        b1 = l2
        b2 = h01 ^ b3 ^ ks1[1]
        b3 = l01
        for r in range(2, 10):
            k0 = ks0[r]
            k1 = ks1[r]
            mulhilo64(PHILOX_M0, a0, &h, &l)
            mulhilo64(PHILOX_M1, a2, &h2, &l2)
            a0 = h2 ^ a1 ^ k0
            a1 = l2
            a2 = h ^ a3 ^ k1
            a3 = l
            mulhilo64(PHILOX_M0, b0, &h, &l)
            mulhilo64(PHILOX_M1, b2, &h2, &l2)
            b0 = h2 ^ b1 ^ k0
            b1 = l2
            b2 = h ^ b3 ^ k1
            b3 = l
        o = out + 4 * b
        o[0] = a0
        o[1] = a1
        o[2] = a2
        o[3] = a3
        o[4] = b0
        o[5] = b1
        o[6] = b2
        o[7] = b3
        b += 2
    if b < nblocks:
        philox_one(s, blk0 + <u64_t>b, out + 4 * b)



cdef inline double ppnd_tail(double u, double q) noexcept nogil:
    cdef double r, val
    if q < 0.0:
        r = u
    else:
        r = 1.0 - u
    r = sqrt(-log(r))
    if r <= 5.0:
        r = r - 1.6
        val = (((((((C7 * r + C6) * r + C5) * r + C4) * r + C3) * r + C2) * r + C1) * r + C0) / \
              (((((((D7 * r + D6) * r + D5) * r + D4) * r + D3) * r + D2) * r + D1) * r + 1.0)
    else:
        r = r - 5.0
        val = (((((((E7 * r + E6) * r + E5) * r + E4) * r + E3) * r + E2) * r + E1) * r + E0) / \
              (((((((F7 * r + F6) * r + F5) * r + F4) * r + F3) * r + F2) * r + F1) * r + 1.0)
    if q < 0.0:
        return -val
    return val


cdef inline double invnorm_scalar(double u) noexcept nogil:
    cdef double q = u - 0.5
    cdef double r, num, den
    if fabs(q) > 0.425:
        return ppnd_tail(u, q)
    r = 0.180625 - q * q
    num = ((((((A7 * r + A6) * r + A5) * r + A4) * r + A3) * r + A2) * r + A1) * r + A0
    den = ((((((B7 * r + B6) * r + B5) * r + B4) * r + B3) * r + B2) * r + B1) * r + 1.0
    return q * (num / den)


cdef void invcdf_buf(const double* u, double* x, Py_ssize_t n) noexcept nogil:
    # Branch-free central pass first (vectorizable), then a sparse fixup for
    # the ~15% of draws with |u - 0.5| > 0.425.
    cdef Py_ssize_t i
    cdef double q, r, num, den
    for i in range(n):
        q = u[i] - 0.5
        r = 0.180625 - q * q
        num = ((((((A7 * r + A6) * r + A5) * r + A4) * r + A3) * r + A2) * r + A1) * r + A0
        den = ((((((B7 * r + B6) * r + B5) * r + B4) * r + B3) * r + B2) * r + B1) * r + 1.0
        x[i] = q * (num / den)
    for i in range(n):
        q = u[i] - 0.5
        if fabs(q) > 0.425:
            x[i] = ppnd_tail(u[i], q)


cdef void words_to_normals(const u64_t* w, double* x, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef double u, q, r, num, den
    for i in range(n):
        u = (<double>(w[i] >> 11) + 0.5) * TWO_M53
        q = u - 0.5
        r = 0.180625 - q * q
        num = ((((((A7 * r + A6) * r + A5) * r + A4) * r + A3) * r + A2) * r + A1) * r + A0
        den = ((((((B7 * r + B6) * r + B5) * r + B4) * r + B3) * r + B2) * r + B1) * r + 1.0
        x[i] = q * (num / den)
    for i in range(n):
        u = (<double>(w[i] >> 11) + 0.5) * TWO_M53
        q = u - 0.5
        if fabs(q) > 0.425:
            x[i] = ppnd_tail(u, q)


cdef void normals_fill(const KeySchedule* s, u64_t pos, Py_ssize_t n,
                       double* out) noexcept nogil:
    cdef u64_t wbuf[CHUNK_WORDS]
    cdef u64_t w[4]
    cdef Py_ssize_t c
    cdef int lane
    cdef double u
    # unaligned head
    while (pos & 3ULL) != 0 and n > 0:
        philox_one(s, pos >> 2, w)
        lane = <int>(pos & 3ULL)
        u = (<double>(w[lane] >> 11) + 0.5) * TWO_M53
        out[0] = invnorm_scalar(u)
        out += 1
        pos += 1
        n -= 1
    # aligned bulk
    while n >= 4:
        c = n & ~<Py_ssize_t>3
        if c > CHUNK_WORDS:
            c = CHUNK_WORDS
        fill_words(s, pos >> 2, c >> 2, wbuf)
        words_to_normals(wbuf, out, c)
        out += c
        pos += <u64_t>c
        n -= c
    # partial final block
    if n > 0:
        philox_one(s, pos >> 2, w)
        for lane in range(<int>n):
            u = (<double>(w[lane] >> 11) + 0.5) * TWO_M53
            out[lane] = invnorm_scalar(u)


cdef inline double peak_height(int n) noexcept nogil:
    if n & 1:
        return ldexp(1.0, -((n + 1) >> 1))
    return ldexp(sqrt(0.5), -(n >> 1))


cdef void c_bridge(const double* coeffs, int level, int grid_level,
                   double* v) noexcept nogil:
    cdef Py_ssize_t npow = (<Py_ssize_t>1) << grid_level
    cdef Py_ssize_t step, half, j, i, p0
    cdef int n
    cdef double pk
    v[0] = 0.0
    v[npow] = coeffs[0]
    for n in range(1, grid_level + 1):
        step = (<Py_ssize_t>1) << (grid_level - n + 1)
        half = step >> 1
        if n <= level:
            pk = peak_height(n)
            p0 = (<Py_ssize_t>1) << (n - 1)
            i = 0
            j = 0
            while j < npow:
                v[j + half] = 0.5 * (v[j] + v[j + step]) + pk * coeffs[p0 + i]
                i += 1
                j += step
        else:
            j = 0
            while j < npow:
                v[j + half] = 0.5 * (v[j] + v[j + step])
                j += step


cdef void c_bridge_tail(const double* tail, int n_level, int m_level,
                        double* v) noexcept nogil:
    # ``tail`` is indexed by canonical position minus 2^n_level.
    cdef Py_ssize_t npow = (<Py_ssize_t>1) << m_level
    cdef Py_ssize_t step, half, j, i, p0, base
    cdef int n
    cdef double pk
    memset(v, 0, (npow + 1) * sizeof(double))
    base = (<Py_ssize_t>1) << n_level
    for n in range(n_level + 1, m_level + 1):
        step = (<Py_ssize_t>1) << (m_level - n + 1)
        half = step >> 1
        pk = peak_height(n)
        p0 = (<Py_ssize_t>1) << (n - 1)
        i = p0 - base
        j = 0
        while j < npow:
            v[j + half] = 0.5 * (v[j] + v[j + step]) + pk * tail[i]
            i += 1
            j += step


cdef void c_bridge_dd(const double* coeffs, int level, int grid_level,
                      double* hi, double* lo) noexcept nogil:
    cdef Py_ssize_t npow = (<Py_ssize_t>1) << grid_level
    cdef Py_ssize_t step, half, j, i, p0
    cdef int n
    cdef double pk, c, lh, ll, rh, rl, s, bb, e, h, l
    memset(hi, 0, (npow + 1) * sizeof(double))
    memset(lo, 0, (npow + 1) * sizeof(double))
    hi[npow] = coeffs[0]
    for n in range(1, grid_level + 1):
        step = (<Py_ssize_t>1) << (grid_level - n + 1)
        half = step >> 1
        pk = peak_height(n)
        p0 = (<Py_ssize_t>1) << (n - 1)
        i = 0
        j = 0
        while j < npow:
            lh = hi[j]
            ll = lo[j]
            rh = hi[j + step]
            rl = lo[j + step]
            # two_sum(lh, rh)
            s = lh + rh
            bb = s - lh
            e = (lh - (s - bb)) + (rh - bb)
            e = e + (ll + rl)
            # quick_two_sum(s, e)
            h = s + e
            l = e - (h - s)
            h = h * 0.5
            l = l * 0.5
            if n <= level:
                c = pk * coeffs[p0 + i]
                s = h + c
                bb = s - h
                e = (h - (s - bb)) + (c - bb)
                e = e + l
                h = s + e
                l = e - (h - s)
            hi[j + half] = h
            lo[j + half] = l
            i += 1
            j += step


cdef double c_abs_max(const double* v, Py_ssize_t n) noexcept nogil:
    cdef double best = 0.0, a
    cdef Py_ssize_t i
    for i in range(n):
        a = fabs(v[i])
        if a > best:
            best = a
    return best


cdef double c_l2_cells(const double* v, Py_ssize_t ncells) noexcept nogil:
    # Eight independent accumulators (vectorizable); the final reduction
    # order is fixed, so results are deterministic.
    cdef double acc[8]
    cdef Py_ssize_t j, r
    cdef double a, b, total
    for j in range(8):
        acc[j] = 0.0
    j = 0
    while j + 8 <= ncells:
        for r in range(8):
            a = v[j + r]
            b = v[j + r + 1]
            acc[r] = acc[r] + (a * a + a * b + b * b)
        j += 8
    while j < ncells:
        a = v[j]
        b = v[j + 1]
        acc[0] = acc[0] + (a * a + a * b + b * b)
        j += 1
    total = 0.0
    for r in range(8):
        total += acc[r]
    return total


cdef int c_guard(const double* g, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        if fabs(g[i]) > EXP_GUARD:
            return 1
    return 0


cdef double c_gbm_sup(const double* vm, const double* vn, int m_level,
                      int oversample, double drift, double sigma,
                      double* u, double* w, int* err) noexcept nogil:
    cdef Py_ssize_t npow = (<Py_ssize_t>1) << m_level
    cdef Py_ssize_t j
    cdef double hinv = ldexp(1.0, -m_level)
    cdef double scale = <double>npow
    cdef double t, best, a, dmin, dmax, d
    cdef double b1, b2, ratio, lo_ratio, hi_ratio, ell, dl, dr, frac
    cdef double denom, tt, dt, uu, ww, g
    cdef long k, kk, kidx
    for j in range(npow + 1):
        t = <double>j * hinv
        u[j] = drift * t + sigma * vm[j]
        w[j] = drift * t + sigma * vn[j]
    if c_guard(u, npow + 1) or c_guard(w, npow + 1):
        err[0] = 1
        return 0.0
    dmin = u[0] - w[0]
    dmax = dmin
    for j in range(npow + 1):
        d = u[j] - w[j]
        if d < dmin:
            dmin = d
        if d > dmax:
            dmax = d
    # conservative prefilter bounds for log(b2/b1) in [dmin, dmax]
    lo_ratio = exp(dmin) * (1.0 - 1e-12)
    hi_ratio = exp(dmax) * (1.0 + 1e-12)

    best = 0.0
    for j in range(npow + 1):
        a = fabs(exp(u[j]) - exp(w[j]))
        if a > best:
            best = a
    denom = <double>oversample * scale
    for j in range(npow):
        b1 = drift + sigma * (vm[j + 1] - vm[j]) * scale
        b2 = drift + sigma * (vn[j + 1] - vn[j]) * scale
        if b1 * b2 <= 0.0:
            continue
        ratio = b2 / b1
        if ratio < lo_ratio or ratio > hi_ratio:
            continue
        dl = u[j] - w[j]
        dr = u[j + 1] - w[j + 1]
        ell = log(ratio)
        if (ell - dl) * (ell - dr) >= 0.0:
            continue
        frac = (ell - dl) / (dr - dl)
        k = <long>floor(frac * <double>oversample)
        for kidx in range(2):
            kk = k + kidx
            if kk < 0:
                kk = 0
            if kk > oversample:
                kk = oversample
            tt = <double>(j * oversample + kk) / denom
            dt = tt - <double>j * hinv
            uu = drift * tt + sigma * (vm[j] + dt * (vm[j + 1] - vm[j]) * scale)
            ww = drift * tt + sigma * (vn[j] + dt * (vn[j + 1] - vn[j]) * scale)
            g = fabs(exp(uu) - exp(ww))
            if g > best:
                best = g
    return best


cdef double c_exp_affine_integral(const double* values, Py_ssize_t npts,
                                  double drift, double sigma, double* g,
                                  int* err) noexcept nogil:
    cdef Py_ssize_t ncells = npts - 1
    cdef double h = 1.0 / <double>ncells
    cdef Py_ssize_t j
    cdef double t, m, mh, term, acc, comp, tsum
    for j in range(npts):
        t = <double>j * h
        g[j] = drift * t + sigma * values[j]
    if c_guard(g, npts):
        err[0] = 1
        return 0.0
    acc = 0.0
    comp = 0.0
    for j in range(ncells):
        m = (g[j + 1] - g[j]) / h
        mh = m * h
        if fabs(m) < 1e-8:
            term = exp(g[j]) * (h * (1.0 + mh * 0.5 + mh * mh / 6.0))
        else:
            term = exp(g[j]) * (expm1(mh) / m)
        # Neumaier compensation
        tsum = acc + term
        if fabs(acc) >= fabs(term):
            comp += (acc - tsum) + term
        else:
            comp += (term - tsum) + acc
        acc = tsum
    return acc + comp


# ---------------------------------------------------------------------------
# Python-visible wrappers
# ---------------------------------------------------------------------------

cdef u64_t _u64(value):
    return <u64_t>(int(value) & 0xFFFFFFFFFFFFFFFF)


def substream_key(key, index):
    """Derive the 64-bit key of substream ``index`` (splitmix64 finalizer)."""
    return int(c_substream_key(_u64(key), _u64(index)))


def philox_raw(seed, key, block0, nblocks):
    """Raw 64-bit Philox output for blocks block0..block0+nblocks-1."""
    cdef Py_ssize_t n = int(nblocks)
    out = np.empty(4 * n, dtype=np.uint64)
    cdef u64_t[::1] mv = out
    cdef KeySchedule s
    make_schedule(_u64(seed), _u64(key), &s)
    cdef u64_t b0 = _u64(block0)
    with nogil:
        fill_words(&s, b0, n, &mv[0])
    return out


def inverse_normal_cdf(u):
    """Inverse of the standard normal CDF on (0, 1) (Wichura's algorithm)."""
    scalar = np.isscalar(u)
    arr = np.ascontiguousarray(np.atleast_1d(u), dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] ui = arr
    cdef double[::1] xo = out
    cdef Py_ssize_t n = arr.shape[0]
    with nogil:
        invcdf_buf(&ui[0], &xo[0], n)
    return float(out[0]) if scalar else out


def normals(seed, key, start, count):
    """``count`` standard normal variates at stream positions start, start+1, ..."""
    cdef Py_ssize_t n = int(count)
    if n < 0:
        raise ValueError("count must be nonnegative")
    out = np.empty(n, dtype=np.float64)
    if n == 0:
        return out
    cdef double[::1] mv = out
    cdef KeySchedule s
    make_schedule(_u64(seed), _u64(key), &s)
    cdef u64_t p = _u64(start)
    with nogil:
        normals_fill(&s, p, n, &mv[0])
    return out


def _check_level(int grid_level):
    if grid_level > MAX_GRID_LEVEL:
        raise ValueError(
            f"grid level {grid_level} exceeds supported maximum {MAX_GRID_LEVEL}"
        )


def bridge_grid(coeffs, int level, int grid_level):
    """Midpoint-refinement evaluation of the path on the grid j/2^grid_level."""
    _check_level(grid_level)
    c = np.ascontiguousarray(coeffs, dtype=np.float64)
    cdef double[::1] cv = c
    out = np.empty(((<Py_ssize_t>1) << grid_level) + 1, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        c_bridge(&cv[0], level, grid_level, &ov[0])
    return out


def bridge_grid_dd(coeffs, int level, int grid_level):
    """Double-double variant: values are correctly rounded path values."""
    _check_level(grid_level)
    c = np.ascontiguousarray(coeffs, dtype=np.float64)
    cdef double[::1] cv = c
    cdef Py_ssize_t npts = ((<Py_ssize_t>1) << grid_level) + 1
    out = np.empty(npts, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double* lo = <double*>malloc(npts * sizeof(double))
    if lo == NULL:
        raise MemoryError
    try:
        with nogil:
            c_bridge_dd(&cv[0], level, grid_level, &ov[0], lo)
    finally:
        free(lo)
    return out


def tail_sup_l2(tail, int n_level, int m_level):
    """Exact sup and squared L2 norm of the level-(N..M] tail path."""
    _check_level(m_level)
    t = np.ascontiguousarray(tail, dtype=np.float64)
    cdef double[::1] tv = t
    cdef Py_ssize_t npow = (<Py_ssize_t>1) << m_level
    cdef double* v = <double*>malloc((npow + 1) * sizeof(double))
    if v == NULL:
        raise MemoryError
    cdef double sup, l2
    try:
        with nogil:
            c_bridge_tail(&tv[0], n_level, m_level, v)
            sup = c_abs_max(v, npow + 1)
            l2 = c_l2_cells(v, npow)
    finally:
        free(v)
    return sup, l2 * (ldexp(1.0, -m_level) / 3.0)


def gbm_sup_refined(coeffs, int n_level, int m_level, int oversample,
                    double drift, double sigma):
    """Max of |exp(u) - exp(w)| over the oversampled level-M lattice."""
    _check_level(m_level)
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    c = np.ascontiguousarray(coeffs, dtype=np.float64)
    cdef double[::1] cv = c
    cdef Py_ssize_t npow = (<Py_ssize_t>1) << m_level
    cdef double* buf = <double*>malloc(4 * (npow + 1) * sizeof(double))
    if buf == NULL:
        raise MemoryError
    cdef double* vm = buf
    cdef double* vn = buf + (npow + 1)
    cdef double* u = buf + 2 * (npow + 1)
    cdef double* w = buf + 3 * (npow + 1)
    cdef int err = 0
    cdef double best
    try:
        with nogil:
            c_bridge(&cv[0], m_level, m_level, vm)
            c_bridge(&cv[0], n_level, m_level, vn)
            best = c_gbm_sup(vm, vn, m_level, oversample, drift, sigma, u, w, &err)
    finally:
        free(buf)
    if err:
        raise OverflowError(
            f"exponent magnitude exceeds the +-{EXP_GUARD:.0f} guard"
        )
    return best


def exp_affine_integral(values, double drift, double sigma):
    """Exact integral of exp(drift*t + sigma*path(t)) for a piecewise-affine path."""
    vals = np.ascontiguousarray(values, dtype=np.float64)
    cdef double[::1] vv = vals
    cdef Py_ssize_t npts = vals.shape[0]
    cdef double* g = <double*>malloc(npts * sizeof(double))
    if g == NULL:
        raise MemoryError
    cdef int err = 0
    cdef double out
    try:
        with nogil:
            out = c_exp_affine_integral(&vv[0], npts, drift, sigma, g, &err)
    finally:
        free(g)
    if err:
        raise OverflowError(
            f"exponent magnitude exceeds the +-{EXP_GUARD:.0f} guard"
        )
    return out


# ---------------------------------------------------------------------------
# Monte Carlo ladder drivers.  One call processes samples k0..k1-1 of a row;
# sample k draws from the substream keyed by substream_key(row_key, k), so
# results do not depend on how the sample range is partitioned across calls.
# Levels share each sample's draws through the counter-based stream, which
# makes the per-(level, sample) outputs bitwise equal to single-level runs.
# ---------------------------------------------------------------------------


def mc_tail_ladder(seed, row_key, k0, k1, n_levels, int delta,
                   double[:, ::1] out_sup, double[:, ::1] out_l2):
    nl = np.ascontiguousarray(n_levels, dtype=np.int64)
    cdef long[::1] nv = nl
    cdef Py_ssize_t n_n = nl.shape[0]
    cdef int max_m = <int>nv[n_n - 1] + delta
    _check_level(max_m)
    cdef u64_t s = _u64(seed), rk = _u64(row_key)
    cdef u64_t ka = _u64(k0), kb = _u64(k1), k, skey
    cdef Py_ssize_t pos0 = (<Py_ssize_t>1) << nv[0]
    cdef Py_ssize_t count = ((<Py_ssize_t>1) << max_m) - pos0
    cdef Py_ssize_t npow_max = (<Py_ssize_t>1) << max_m
    cdef double* coeff = <double*>malloc(count * sizeof(double))
    cdef double* v = <double*>malloc((npow_max + 1) * sizeof(double))
    if coeff == NULL or v == NULL:
        free(coeff)
        free(v)
        raise MemoryError
    cdef KeySchedule sched
    cdef Py_ssize_t idx, base, npow, row
    cdef int n_level, m_level
    try:
        with nogil:
            k = ka
            while k < kb:
                skey = c_substream_key(rk, k)
                make_schedule(s, skey, &sched)
                normals_fill(&sched, <u64_t>pos0, count, coeff)
                row = <Py_ssize_t>(k - ka)
                for idx in range(n_n):
                    n_level = <int>nv[idx]
                    m_level = n_level + delta
                    base = (<Py_ssize_t>1) << n_level
                    npow = (<Py_ssize_t>1) << m_level
                    c_bridge_tail(coeff + (base - pos0), n_level, m_level, v)
                    out_sup[idx, row] = c_abs_max(v, npow + 1)
                    out_l2[idx, row] = c_l2_cells(v, npow) * (ldexp(1.0, -m_level) / 3.0)
                k += 1
    finally:
        free(coeff)
        free(v)


def mc_gbm_ladder(seed, row_key, k0, k1, n_levels, int delta, int oversample,
                  double drift, double sigma, double[:, ::1] out_sup):
    nl = np.ascontiguousarray(n_levels, dtype=np.int64)
    cdef long[::1] nv = nl
    cdef Py_ssize_t n_n = nl.shape[0]
    cdef int max_m = <int>nv[n_n - 1] + delta
    _check_level(max_m)
    cdef u64_t s = _u64(seed), rk = _u64(row_key)
    cdef u64_t ka = _u64(k0), kb = _u64(k1), k, skey
    cdef Py_ssize_t count = (<Py_ssize_t>1) << max_m
    cdef Py_ssize_t npow_max = count
    cdef double* coeff = <double*>malloc(count * sizeof(double))
    cdef double* buf = <double*>malloc(4 * (npow_max + 1) * sizeof(double))
    if coeff == NULL or buf == NULL:
        free(coeff)
        free(buf)
        raise MemoryError
    cdef double* vm = buf
    cdef double* vn = buf + (npow_max + 1)
    cdef double* u = buf + 2 * (npow_max + 1)
    cdef double* w = buf + 3 * (npow_max + 1)
    cdef KeySchedule sched
    cdef Py_ssize_t idx, row
    cdef int n_level, m_level, err = 0
    cdef u64_t bad_k = 0
    cdef long bad_n = 0
    try:
        with nogil:
            k = ka
            while k < kb and err == 0:
                skey = c_substream_key(rk, k)
                make_schedule(s, skey, &sched)
                normals_fill(&sched, 0, count, coeff)
                row = <Py_ssize_t>(k - ka)
                for idx in range(n_n):
                    n_level = <int>nv[idx]
                    m_level = n_level + delta
                    c_bridge(coeff, m_level, m_level, vm)
                    c_bridge(coeff, n_level, m_level, vn)
                    out_sup[idx, row] = c_gbm_sup(
                        vm, vn, m_level, oversample, drift, sigma, u, w, &err)
                    if err:
                        bad_k = k
                        bad_n = n_level
                        break
                k += 1
    finally:
        free(coeff)
        free(buf)
    if err:
        raise OverflowError(
            f"exponent guard (+-{EXP_GUARD:.0f}) tripped at N={int(bad_n)}, "
            f"sample {int(bad_k)}"
        )


def mc_asian_ladder(seed, row_key, k0, k1, n_levels, double drift,
                    double sigma, double[:, ::1] out_integral):
    nl = np.ascontiguousarray(n_levels, dtype=np.int64)
    cdef long[::1] nv = nl
    cdef Py_ssize_t n_n = nl.shape[0]
    cdef int max_n = <int>nv[n_n - 1]
    _check_level(max_n)
    cdef u64_t s = _u64(seed), rk = _u64(row_key)
    cdef u64_t ka = _u64(k0), kb = _u64(k1), k, skey
    cdef Py_ssize_t count = (<Py_ssize_t>1) << max_n
    cdef double* coeff = <double*>malloc(count * sizeof(double))
    cdef double* v = <double*>malloc(2 * (count + 1) * sizeof(double))
    if coeff == NULL or v == NULL:
        free(coeff)
        free(v)
        raise MemoryError
    cdef double* g = v + (count + 1)
    cdef KeySchedule sched
    cdef Py_ssize_t idx, row
    cdef int n_level, err = 0
    cdef u64_t bad_k = 0
    cdef long bad_n = 0
    try:
        with nogil:
            k = ka
            while k < kb and err == 0:
                skey = c_substream_key(rk, k)
                make_schedule(s, skey, &sched)
                normals_fill(&sched, 0, count, coeff)
                row = <Py_ssize_t>(k - ka)
                for idx in range(n_n):
                    n_level = <int>nv[idx]
                    c_bridge(coeff, n_level, n_level, v)
                    out_integral[idx, row] = c_exp_affine_integral(
                        v, ((<Py_ssize_t>1) << n_level) + 1, drift, sigma, g, &err)
                    if err:
                        bad_k = k
                        bad_n = n_level
                        break
                k += 1
    finally:
        free(coeff)
        free(v)
    if err:
        raise OverflowError(
            f"exponent guard (+-{EXP_GUARD:.0f}) tripped at N={int(bad_n)}, "
            f"sample {int(bad_k)}"
        )


def mc_x0_block(seed, row_key, k0, k1, double[::1] out):
    cdef u64_t s = _u64(seed), rk = _u64(row_key)
    cdef u64_t ka = _u64(k0), kb = _u64(k1), k, skey
    cdef KeySchedule sched
    cdef u64_t w[4]
    cdef double u
    with nogil:
        k = ka
        while k < kb:
            skey = c_substream_key(rk, k)
            make_schedule(s, skey, &sched)
            philox_one(&sched, 0, w)
            u = (<double>(w[0] >> 11) + 0.5) * TWO_M53
            out[<Py_ssize_t>(k - ka)] = invnorm_scalar(u)
            k += 1


def mc_maxabs_block(seed, row_key, k0, k1, ell, double[::1] out):
    cdef u64_t s = _u64(seed), rk = _u64(row_key)
    cdef u64_t ka = _u64(k0), kb = _u64(k1), k, skey
    cdef Py_ssize_t n = int(ell)
    cdef double* buf = <double*>malloc(n * sizeof(double))
    if buf == NULL:
        raise MemoryError
    cdef KeySchedule sched
    try:
        with nogil:
            k = ka
            while k < kb:
                skey = c_substream_key(rk, k)
                make_schedule(s, skey, &sched)
                normals_fill(&sched, 0, n, buf)
                out[<Py_ssize_t>(k - ka)] = c_abs_max(buf, n)
                k += 1
    finally:
        free(buf)
