"""JIT-compiled exact-integer kernels: negacyclic NTT and RNS ciphertext math.

Every kernel here is exact modular integer arithmetic. Multiplications by fixed
constants use Shoup's precomputed-quotient trick (division-free); variable x
variable products use a float64 quotient estimate followed by enough correction
steps to cover its provable worst-case error. float64 appears in two other
places, both with bounded, analyzed effect:

* rounded scale-division accumulates fractional parts in float64; the result may
  be off by +/-1, which lands as one unit of ciphertext noise (benign), except in
  the decryption path where near-tie coefficients are flagged for an exact
  big-integer fallback by the caller;
* RNS lift-overflow counts (alpha/beta) are computed from an integer
  underestimate with a guard threshold; coefficients inside the guard window are
  flagged for the same exact fallback.

Reference implementations (schoolbook / big-integer) live in the test suite and
in `rings.ring_mul(..., method="schoolbook")`; tests assert kernel == reference.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Fixed-point shift for RNS overflow-count estimation (see rns_alpha).
ALPHA_SHIFT = 57


# ----------------------------------------------------------------------------
# Negacyclic NTT, word-sized moduli p < 2**31 (int64 lanes, lazy Shoup form)
# ----------------------------------------------------------------------------

@njit(cache=True)
def ntt_forward(a, psi, psi_sh, p):
    """In-place forward negacyclic NTT of each row of `a` (m, n) modulo p.

    psi: bit-reversed powers of the 2n-th root; psi_sh: Shoup companions
    floor(psi << 32 / p). Butterflies keep values < 4p (Harvey lazy form);
    a final pass reduces into [0, p).
    """
    m_rows, n = a.shape
    p2 = 2 * p
    for r in range(m_rows):
        row = a[r]
        t = n
        m = 1
        while m < n:
            t //= 2
            for i in range(m):
                w = psi[m + i]
                wsh = psi_sh[m + i]
                j1 = 2 * i * t
                for j in range(j1, j1 + t):
                    x = row[j]
                    if x >= p2:
                        x -= p2
                    y = row[j + t]
                    if y >= p2:
                        y -= p2
                    q = (y * wsh) >> 32
                    h = y * w - q * p  # in [0, 2p)
                    row[j] = x + h
                    row[j + t] = x - h + p2
            m *= 2
        for j in range(n):
            v = row[j]
            if v >= p2:
                v -= p2
            if v >= p:
                v -= p
            row[j] = v
    return a


@njit(cache=True)
def ntt_inverse(a, ipsi, ipsi_sh, p, ninv, ninv_sh):
    """In-place inverse of ntt_forward; output in [0, p)."""
    m_rows, n = a.shape
    p2 = 2 * p
    for r in range(m_rows):
        row = a[r]
        t = 1
        m = n
        while m > 1:
            j1 = 0
            h = m // 2
            for i in range(h):
                w = ipsi[h + i]
                wsh = ipsi_sh[h + i]
                for j in range(j1, j1 + t):
                    x = row[j]
                    y = row[j + t]
                    u = x + y
                    if u >= p2:
                        u -= p2
                    row[j] = u
                    v = x - y + p2
                    if v >= p2:
                        v -= p2
                    q = (v * wsh) >> 32
                    row[j + t] = v * w - q * p
                j1 += 2 * t
            t *= 2
            m //= 2
        for j in range(n):
            v = row[j]
            if v >= p2:
                v -= p2
            q = (v * ninv_sh) >> 32
            x = v * ninv - q * p
            if x >= p:
                x -= p
            row[j] = x
    return a


# ----------------------------------------------------------------------------
# Negacyclic NTT, wide moduli t < 2**62 (uint64 lanes, 64-bit Shoup quotients)
# ----------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _mulhi64(a, b):
    """High 64 bits of the 128-bit product of two uint64 values (exact)."""
    mask = np.uint64(0xFFFFFFFF)
    s32 = np.uint64(32)
    a0 = a & mask
    a1 = a >> s32
    b0 = b & mask
    b1 = b >> s32
    ll = a0 * b0
    lh = a0 * b1
    hl = a1 * b0
    mid = lh + (ll >> s32)          # <= (2^32-1)^2 + (2^32-1): no wrap
    mid2 = (mid & mask) + hl        # same bound: no wrap
    return a1 * b1 + (mid >> s32) + (mid2 >> s32)


@njit(cache=True)
def ntt_forward_u64(a, psi, psi_sh, t):
    """Forward negacyclic NTT of each row of `a` (m, n) mod t, t < 2**62.

    psi_sh holds floor(psi << 64 / t). Values kept < 4t (< 2**64); final pass
    reduces into [0, t).
    """
    m_rows, n = a.shape
    t2 = np.uint64(2) * t
    for r in range(m_rows):
        row = a[r]
        tt = n
        m = 1
        while m < n:
            tt //= 2
            for i in range(m):
                w = psi[m + i]
                wsh = psi_sh[m + i]
                j1 = 2 * i * tt
                for j in range(j1, j1 + tt):
                    x = row[j]
                    if x >= t2:
                        x -= t2
                    y = row[j + tt]
                    if y >= t2:
                        y -= t2
                    q = _mulhi64(y, wsh)
                    h = y * w - q * t  # wrapping-exact, in [0, 2t)
                    row[j] = x + h
                    row[j + tt] = x - h + t2
            m *= 2
        for j in range(n):
            v = row[j]
            if v >= t2:
                v -= t2
            if v >= t:
                v -= t
            row[j] = v
    return a


@njit(cache=True)
def ntt_inverse_u64(a, ipsi, ipsi_sh, t, ninv, ninv_sh):
    m_rows, n = a.shape
    t2 = np.uint64(2) * t
    for r in range(m_rows):
        row = a[r]
        tt = 1
        m = n
        while m > 1:
            j1 = 0
            h = m // 2
            for i in range(h):
                w = ipsi[h + i]
                wsh = ipsi_sh[h + i]
                for j in range(j1, j1 + tt):
                    x = row[j]
                    y = row[j + tt]
                    u = x + y
                    if u >= t2:
                        u -= t2
                    row[j] = u
                    v = x + t2 - y
                    if v >= t2:
                        v -= t2
                    q = _mulhi64(v, wsh)
                    row[j + tt] = v * w - q * t
                j1 += 2 * tt
            tt *= 2
            m //= 2
        for j in range(n):
            v = row[j]
            if v >= t2:
                v -= t2
            q = _mulhi64(v, ninv_sh)
            x = v * ninv - q * t
            if x >= t:
                x -= t
            row[j] = x
    return a


# ----------------------------------------------------------------------------
# Pointwise modular products, p < 2**31 (int64)
# ----------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _mulmod(x, y, p, pinv):
    """(x*y) mod p for 0 <= x, y < p < 2**31 using a float64 quotient estimate.

    The estimate is off by at most 2, covered by the correction steps.
    """
    z = x * y
    q = np.int64(np.float64(z) * pinv)
    r = z - q * p
    if r < 0:
        r += p
        if r < 0:
            r += p
    elif r >= p:
        r -= p
        if r >= p:
            r -= p
    return r


@njit(cache=True)
def pw_mulmod(a, b, p, pinv):
    """Elementwise (a*b) mod p over equal-shape int64 arrays."""
    out = np.empty_like(a)
    flat_a = a.ravel()
    flat_b = b.ravel()
    flat_o = out.ravel()
    for i in range(flat_a.size):
        flat_o[i] = _mulmod(flat_a[i], flat_b[i], p, pinv)
    return out


@njit(cache=True)
def pw_square_tensor(a0, a1, p, pinv):
    """(a0^2, 2*a0*a1, a1^2) elementwise mod p: the tensor of a squaring."""
    n = a0.size
    c0 = np.empty_like(a0)
    c1 = np.empty_like(a0)
    c2 = np.empty_like(a0)
    for i in range(n):
        x0 = a0[i]
        x1 = a1[i]
        c0[i] = _mulmod(x0, x0, p, pinv)
        v = _mulmod(x0, x1, p, pinv) * 2
        if v >= p:
            v -= p
        c1[i] = v
        c2[i] = _mulmod(x1, x1, p, pinv)
    return c0, c1, c2


@njit(cache=True)
def pw_mul_tensor(a0, a1, b0, b1, p, pinv):
    """(a0*b0, a0*b1 + a1*b0, a1*b1) elementwise mod p: a 2x2 part tensor."""
    n = a0.size
    c0 = np.empty_like(a0)
    c1 = np.empty_like(a0)
    c2 = np.empty_like(a0)
    for i in range(n):
        x0 = a0[i]
        x1 = a1[i]
        y0 = b0[i]
        y1 = b1[i]
        c0[i] = _mulmod(x0, y0, p, pinv)
        v = _mulmod(x0, y1, p, pinv) + _mulmod(x1, y0, p, pinv)
        if v >= p:
            v -= p
        c1[i] = v
        c2[i] = _mulmod(x1, y1, p, pinv)
    return c0, c1, c2


@njit(cache=True)
def pw_addmul_into(acc, x, c, p, pinv):
    """acc = (acc + x*c) mod p elementwise (int64, all < p)."""
    fa = acc.ravel()
    fx = x.ravel()
    fc = c.ravel()
    for i in range(fa.size):
        v = fa[i] + _mulmod(fx[i], fc[i], p, pinv)
        if v >= p:
            v -= p
        fa[i] = v
    return acc


@njit(cache=True)
def scalar_mulmod(a, w, p, pinv):
    """Elementwise (a*w) mod p for a fixed scalar 0 <= w < p."""
    out = np.empty_like(a)
    fa = a.ravel()
    fo = out.ravel()
    for i in range(fa.size):
        fo[i] = _mulmod(fa[i], w, p, pinv)
    return out


@njit(cache=True)
def lin_accum(acc, ct, w):
    """acc += ct * w elementwise (signed, no reduction).

    Caller guarantees |acc| stays below 2**62 (checked by the layer's declared
    coefficient bounds).
    """
    fa = acc.ravel()
    fc = ct.ravel()
    for i in range(fa.size):
        fa[i] += fc[i] * w
    return acc


@njit(cache=True)
def reduce_signed(acc, p):
    """Reduce a signed int64 accumulator elementwise into [0, p)."""
    fa = acc.ravel()
    for i in range(fa.size):
        v = fa[i] % p
        if v < 0:
            v += p
        fa[i] = v
    return acc


# ----------------------------------------------------------------------------
# RNS base conversion and scaled rounding
# ----------------------------------------------------------------------------

@njit(cache=True)
def rns_alpha(y, wfix, thresh):
    """Overflow counts alpha_j = floor(sum_i y[i, j] / p_i), with guard flags.

    y: (K, n) int64 residue rows scaled by the inverse-factor convention of the
    fast base conversion (y_i = [x * (Q/p_i)^{-1}]_{p_i}).
    wfix: (K,) uint64, floor(2**ALPHA_SHIFT / p_i) — an UNDERestimate of 1/p_i.
    thresh: flag when the fractional part exceeds it (possible off-by-one).

    Returns (alpha (n,) int64, flags (n,) uint8). Flagged entries must be
    recomputed exactly by the caller.
    """
    K, n = y.shape
    alpha = np.empty(n, np.int64)
    flags = np.zeros(n, np.uint8)
    mask = (np.uint64(1) << np.uint64(ALPHA_SHIFT)) - np.uint64(1)
    for j in range(n):
        s = np.uint64(0)
        for i in range(K):
            s += np.uint64(y[i, j]) * wfix[i]
        alpha[j] = np.int64(s >> np.uint64(ALPHA_SHIFT))
        if (s & mask) >= thresh:
            flags[j] = 1
    return alpha, flags


@njit(cache=True)
def rns_alpha_signed(y, wfix, half_lo, half_hi):
    """Lift counts for a CENTERED value: beta + [frac >= 1/2], with guard flags.

    The product basis holds a signed integer H as its representative
    z in [0, M); z/M equals the fractional part of sum_i y_i / p_i. When
    |H| <= M/8 (guaranteed by basis sizing), the true fraction sits in
    [0, 1/8] or [7/8, 1), and the fixed-point sum underestimates it by
    eps < sum_i p_i / 2**57 < 2**-20. The half-indicator then yields the
    exact total lift in every case:

      negative H: frac in [7/8 - eps, 1)  -> indicator adds the wrap  = exact
      positive H, no wrap: frac in [0, 1/8], indicator 0              = exact
      positive H < eps*M, sum wrapped below 0: frac in [1 - eps, 1),
        integer part is one short, indicator adds it back             = exact

    Only a fraction inside [half_lo, half_hi] (sign ambiguity, which the
    sizing invariant makes unreachable) gets flagged for exact recomputation.
    """
    K, n = y.shape
    alpha = np.empty(n, np.int64)
    flags = np.zeros(n, np.uint8)
    one = np.uint64(1) << np.uint64(ALPHA_SHIFT)
    mask = one - np.uint64(1)
    half = one >> np.uint64(1)
    for j in range(n):
        s = np.uint64(0)
        for i in range(K):
            s += np.uint64(y[i, j]) * wfix[i]
        a = np.int64(s >> np.uint64(ALPHA_SHIFT))
        frac = s & mask
        if frac >= half:
            a += 1
        alpha[j] = a
        if half_lo <= frac and frac <= half_hi:
            flags[j] = 1
    return alpha, flags


@njit(cache=True)
def rns_extend(y, alpha, consts, aconst, p, pinv):
    """One target-prime plane of a fast base conversion with exact lift.

    out[j] = (sum_i y[i, j] * consts[i] - alpha[j] * aconst) mod p, where
    consts[i] = (Q/p_i) mod p and aconst = Q mod p. Chunked raw accumulation
    (products < 2**60, 8 per chunk) keeps int64 exact.
    """
    K, n = y.shape
    out = np.empty(n, np.int64)
    for j in range(n):
        acc = np.int64(0)
        chunk = 0
        for i in range(K):
            acc += y[i, j] * consts[i]
            chunk += 1
            if chunk == 8:
                acc %= p
                chunk = 0
        acc = (acc - alpha[j] * aconst) % p
        if acc < 0:
            acc += p
        out[j] = acc
    return out


@njit(cache=True)
def group_extend(y, consts, p, pinv):
    """Digit plane: out[j] = (sum_i y[i, j] * consts[i]) mod p (no lift fix).

    Used for relinearization digits, whose bounded lift overflow is absorbed by
    the key-switch identity (overflow * digit-modulus * g_d == 0 mod q).
    """
    G, n = y.shape
    out = np.empty(n, np.int64)
    for j in range(n):
        acc = np.int64(0)
        for i in range(G):
            acc += y[i, j] * consts[i]
            if acc >= np.int64(1) << np.int64(61):
                acc %= p
        out[j] = acc % p
    return out


@njit(cache=True)
def scale_round_plane(y, beta, omega_col, theta, tq_aux, p):
    """One target-prime plane of round(t*z/Q) from full-basis residues.

    y: (F, n) residue rows y_i = [z * (QF/f_i)^{-1}]_{f_i} over the full basis;
    omega_col: (F,) int64, floor(t*g_i/Q) mod p for this target prime;
    theta: (F,) float64 fractional parts of t*g_i/Q;
    beta: (n,) exact lift counts over the full basis; tq_aux = (t*QF/Q) mod p.

    out[j] = (sum_i y_ij*omega_i + round(sum_i y_ij*theta_i) - beta_j*tq_aux) mod p.
    The float-accumulated round may be off by one: that lands as one unit of
    ciphertext noise and is accounted in the noise margin.
    """
    F, n = y.shape
    out = np.empty(n, np.int64)
    for j in range(n):
        acc = np.int64(0)
        chunk = 0
        fsum = 0.0
        for i in range(F):
            v = y[i, j]
            acc += v * omega_col[i]
            fsum += v * theta[i]
            chunk += 1
            if chunk == 8:
                acc %= p
                chunk = 0
        acc = (acc + np.int64(fsum + 0.5) - beta[j] * tq_aux) % p
        if acc < 0:
            acc += p
        out[j] = acc
    return out


@njit(cache=True)
def noise_frac_max(y, theta):
    """Max over coefficients of the centered fraction |frac(sum_i y_ij*theta_i)|.

    With theta_i = frac(t*(Q/p_i)/Q) and y the scaled residues of v, the sum's
    fractional part equals (t*v mod Q)/Q, i.e. the invariant noise relative to
    Q. Float64 precision (~2**-18 here) is plenty for its only use: a fast
    radar for "is decryption anywhere near the failure threshold", with exact
    big-integer confirmation by the caller when it trips.
    """
    K, n = y.shape
    mx = 0.0
    for j in range(n):
        f = 0.0
        for i in range(K):
            f += y[i, j] * theta[i]
        ff = f - np.floor(f)
        c = ff if ff <= 0.5 else 1.0 - ff
        if c > mx:
            mx = c
    return mx


@njit(cache=True)
def scale_round_to_t(y, om_t, om_sh, theta, t):
    """Decryption rounding: out[j] = (sum_i y_ij*om_t_i + round(sum y_ij*theta_i)) mod t.

    om_t: (K,) uint64 = floor(t*g_i/Q) mod t with Shoup companions om_sh.
    Near-tie rounding sums are flagged; the caller recomputes those
    coefficients exactly (decryption must never be off by one).

    Returns (out (n,) uint64, flags (n,) uint8).
    """
    K, n = y.shape
    out = np.empty(n, np.uint64)
    flags = np.zeros(n, np.uint8)
    for j in range(n):
        acc = np.uint64(0)
        fsum = 0.0
        for i in range(K):
            v = np.uint64(y[i, j])
            q = _mulhi64(v, om_sh[i])
            r = v * om_t[i] - q * t
            if r >= t:
                r -= t
            acc += r
            if acc >= t:
                acc -= t
            fsum += np.float64(y[i, j]) * theta[i]
        rnd = np.uint64(np.int64(fsum + 0.5)) % t
        frac = fsum - np.floor(fsum)
        if np.abs(frac - 0.5) < 0.001:
            flags[j] = 1
        acc += rnd
        if acc >= t:
            acc -= t
        out[j] = acc
    return out, flags
