"""Somewhat-homomorphic encryption: a scale-invariant RLWE scheme, full-RNS.

The scheme encrypts polynomials mod t as noisy polynomials mod q with the
message in the high-order bits (Delta = floor(q/t) per coefficient). Supported
operations: addition, ciphertext-plaintext multiplication, ciphertext-
ciphertext multiplication with relinearization back to two parts, slot
batching, and exact noise-budget measurement against a secret key.

Implementation notes (all arithmetic exact; see `_kernels` for the guarded
float shortcuts):

* Ciphertext parts live as residue planes modulo each prime of q, held in the
  transform (evaluation) domain, so add/multiply are pointwise.
* Ciphertext-ciphertext multiplication extends both operands to an auxiliary
  prime basis large enough to hold the integer tensor product, multiplies
  there, and scales by t/q with an exact lift-count correction (coefficients
  inside the correction's guard window fall back to big-integer arithmetic).
* Relinearization decomposes the quadratic part into residue digits over
  groups of q's primes; the digit lift needs no correction because its
  overflow cancels against the key-switch identity mod q.
* The noise budget is the SEAL-style invariant noise: w = t*ct(s) mod q,
  centered; budget = floor(log2(q / (2*max|w|))), clamped at 0. Decryption is
  guaranteed exact whenever the budget is positive.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
import sympy

from . import _kernels
from .polyring import (
    RingElement,
    RingParams,
    find_ntt_primes,
    get_ntt_context,
    rns_to_coeffs,
    sample_error,
    sample_ternary,
)

__all__ = [
    "HEParams",
    "KeySet",
    "PublicKey",
    "SecretKey",
    "RelinKey",
    "Plaintext",
    "Ciphertext",
    "ScaleMismatchError",
    "SECURITY_TABLE",
    "PRESET_NAMES",
    "PRESET_DEPTH",
    "get_preset",
    "keygen",
    "encrypt",
    "decrypt",
    "noise_budget",
    "eval_add",
    "eval_add_plain",
    "eval_sub",
    "eval_mul",
    "eval_mul_plain",
    "eval_mul_scalar",
    "eval_add_scalar",
    "eval_linear",
    "batch_encode",
    "batch_decode",
    "serialize_ciphertext",
    "deserialize_ciphertext",
    "serialize_key",
    "deserialize_key",
]


class ScaleMismatchError(ValueError):
    """Raised when adding ciphertexts whose fixed-point scales differ."""


# ---------------------------------------------------------------------------
# Security table: maximum log2(q) per (degree, security level), ternary secret
# (homomorphicencryption.org standard parameter recommendations)
# ---------------------------------------------------------------------------

SECURITY_TABLE = {
    128: {1024: 27, 2048: 54, 4096: 109, 8192: 218, 16384: 438},
    192: {1024: 19, 2048: 37, 4096: 75, 8192: 152, 16384: 305},
}


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HEParams:
    """Scheme parameters.

    ring.q must be a product of distinct NTT-friendly primes (each == 1 mod 2n
    and < 2**31); t must be prime with t == 1 mod 2n so slot batching works.
    relin_decomp_bits is advisory: the RNS implementation decomposes the
    quadratic term over groups of q's primes whose products approximate
    2**relin_decomp_bits-sized digits only loosely; it is recorded for
    serialization compatibility and documentation.
    """

    ring: RingParams
    t: int
    sigma: float = 3.2
    security_level: int = 128
    relin_decomp_bits: int = 16

    def __post_init__(self):
        n = self.ring.n
        if self.ring.primes is None or not self.ring.supports_ntt:
            raise ValueError(
                "ring modulus must be given as a product of primes == 1 mod 2n "
                "(transform-friendly) for the encryption scheme"
            )
        if self.t < 2 or not sympy.isprime(self.t):
            raise ValueError(f"plaintext modulus must be prime, got {self.t}")
        if self.t % (2 * n) != 1:
            raise ValueError(
                f"plaintext modulus must be 1 mod 2n for batching: t={self.t}, n={n}"
            )
        if self.t >= (1 << 62):
            raise ValueError("plaintext modulus must be below 2**62")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.security_level not in SECURITY_TABLE:
            raise ValueError(
                f"security_level must be one of {sorted(SECURITY_TABLE)}, got {self.security_level}"
            )
        table = SECURITY_TABLE[self.security_level]
        if n not in table:
            raise ValueError(
                f"no security bound for degree n={n} at level {self.security_level}; "
                f"supported degrees: {sorted(table)}"
            )
        qbits = self.ring.q.bit_length()
        if qbits > table[n]:
            raise ValueError(
                f"log2(q) = {qbits} exceeds the maximum {table[n]} bits allowed for "
                f"n={n} at {self.security_level}-bit security"
            )

    @property
    def params_id(self) -> bytes:
        return _params_id(self)


@lru_cache(maxsize=None)
def _params_id(params: HEParams) -> bytes:
    blob = repr(
        (
            params.ring.n,
            params.ring.primes,
            params.t,
            round(params.sigma, 9),
            params.security_level,
            params.relin_decomp_bits,
        )
    ).encode()
    return hashlib.sha256(blob).digest()[:8]


# ---------------------------------------------------------------------------
# Precomputed arithmetic context per parameter set
# ---------------------------------------------------------------------------

class _Context:
    """All fixed constants the eval operations need, computed once per params."""

    def __init__(self, params: HEParams):
        self.params = params
        n = params.ring.n
        self.n = n
        self.q = params.ring.q
        self.t = params.t
        self.q_primes = list(params.ring.primes)
        self.K = len(self.q_primes)
        self.delta = self.q // self.t

        # auxiliary basis: enough ~30-bit primes that aux_product >= 8*n*q,
        # giving the signed tensor value a >= 3-bit margin below product/4
        aux_needed = (8 * n * self.q).bit_length()
        self.aux_primes: List[int] = []
        acc = 1
        scan = 1
        while acc.bit_length() <= aux_needed:
            cand = find_ntt_primes(30, n, scan, exclude=tuple(self.q_primes) + (self.t,))
            self.aux_primes = cand
            acc = math.prod(cand)
            scan += 1
        self.A = math.prod(self.aux_primes)
        self.full_primes = self.q_primes + self.aux_primes
        self.F = len(self.full_primes)
        self.QF = self.q * self.A

        self.q_ctxs = [get_ntt_context(n, p) for p in self.q_primes]
        self.aux_ctxs = [get_ntt_context(n, p) for p in self.aux_primes]

        as_i64 = lambda vals: np.array([int(v) for v in vals], dtype=np.int64)

        # per-prime fixed scalars
        self.delta_mod = as_i64([self.delta % p for p in self.q_primes])
        self.pinv_q = [1.0 / p for p in self.q_primes]
        self.pinv_aux = [1.0 / p for p in self.aux_primes]

        # --- base extension q -> aux (unsigned values in [0, q)) ---
        self.inv_q = as_i64(
            [pow(self.q // p, -1, p) for p in self.q_primes]
        )  # y_i = [x * (q/p_i)^{-1}]_{p_i}
        self.wfix_q = np.array(
            [(1 << _kernels.ALPHA_SHIFT) // p for p in self.q_primes], dtype=np.uint64
        )
        self.thresh_q = np.uint64((1 << _kernels.ALPHA_SHIFT) - (self.K << 31))
        # per aux prime: ((q/p_i) mod a, q mod a)
        self.ext_consts = [
            (as_i64([(self.q // p) % a for p in self.q_primes]), self.q % a)
            for a in self.aux_primes
        ]

        # --- tensor scale-round: full basis -> q basis ---
        self.inv_full = as_i64(
            [pow(self.QF // f, -1, f) for f in self.full_primes]
        )
        self.wfix_full = np.array(
            [(1 << _kernels.ALPHA_SHIFT) // f for f in self.full_primes], dtype=np.uint64
        )
        half = 1 << (_kernels.ALPHA_SHIFT - 1)
        self.half_lo = np.uint64(half - (1 << (_kernels.ALPHA_SHIFT - 20)))
        self.half_hi = np.uint64(half + (1 << (_kernels.ALPHA_SHIFT - 20)))
        # omega_i + theta_i = t*(QF/f_i)/q = t*A/f_i
        omegas = [(self.t * self.A) // f for f in self.full_primes]
        self.theta_full = np.array(
            [float(((self.t * self.A) % f) / f) for f in self.full_primes],
            dtype=np.float64,
        )
        self.omega_cols = [
            as_i64([w % p for w in omegas]) for p in self.q_primes
        ]  # omega_cols[j][i] = omega_i mod q_primes[j]
        self.tA_mod = [int((self.t * self.A) % p) for p in self.q_primes]

        # --- decryption rounding: q basis -> integer mod t ---
        # omega_i + theta_i = t*(q/p_i)/q = t/p_i
        self.om_t = np.array(
            [np.uint64((self.t * (self.q // p) // self.q) % self.t) for p in self.q_primes],
            dtype=np.uint64,
        )
        self.om_sh = np.array(
            [np.uint64((int(w) << 64) // self.t) for w in self.om_t], dtype=np.uint64
        )
        self.theta_dec = np.array(
            [float((self.t * (self.q // p) % self.q) / self.q) for p in self.q_primes],
            dtype=np.float64,
        )

        # --- relinearization digits: groups of q's primes ---
        group_size = 1 if self.K <= 4 else 3
        self.groups = [
            list(range(i, min(i + group_size, self.K)))
            for i in range(0, self.K, group_size)
        ]
        self.digit_count = len(self.groups)
        self.digit_consts = []
        for grp in self.groups:
            P_d = math.prod(self.q_primes[g] for g in grp)
            # digit residues come from the scaled residues y_g = [x*(q/p_g)^-1]_{p_g}
            # because (q/P_d)^-1 * (P_d/p_g)^-1 == (q/p_g)^-1 mod p_g; the digit
            # lift Sum y_g*(P_d/p_g) may exceed P_d by a multiple of P_d, which
            # cancels against the key payload's q/P_d factor mod q.
            ext = [
                as_i64([(P_d // self.q_primes[g]) % p for g in grp])
                for p in self.q_primes
            ]  # ext[j][gi] = (P_d/p_g) mod q_primes[j]
            gkey = [int((self.q // P_d) % p) for p in self.q_primes]
            self.digit_consts.append({"P": P_d, "ext": ext, "gkey": gkey})

        # --- exact-fallback CRT constants ---
        self.garner_q = [
            (self.q // p) * pow(self.q // p, -1, p) % self.q for p in self.q_primes
        ]
        self.garner_full = [
            (self.QF // f) * pow(self.QF // f, -1, f) % self.QF
            for f in self.full_primes
        ]


@lru_cache(maxsize=None)
def _ctx(params: HEParams) -> _Context:
    return _Context(params)


# ---------------------------------------------------------------------------
# Key and data types
# ---------------------------------------------------------------------------

@dataclass
class Plaintext:
    """A polynomial with coefficients in [0, t), plus fixed-point bookkeeping.

    `flagged` is set by decryption when the noise budget measured against the
    decrypting key has reached zero, i.e. the content is not trustworthy.
    """

    poly: RingElement
    scale: Fraction = Fraction(1)
    flagged: bool = False

    @property
    def coeffs(self):
        return self.poly.coeffs


class PublicKey:
    """Encryption of zero: (b, a) with b = -(a*s + e), held in eval domain."""

    def __init__(self, params: HEParams, planes: List[np.ndarray]):
        self.params = params
        self.params_id = params.params_id
        self.planes = planes  # [b_planes, a_planes], each (K, n) int64 eval domain

    def as_ring_elements(self) -> Tuple[RingElement, RingElement]:
        ctx = _ctx(self.params)
        return tuple(_planes_to_element(ctx, pl) for pl in self.planes)


class SecretKey:
    """Ternary secret with cached eval-domain powers."""

    def __init__(self, params: HEParams, poly: RingElement):
        self.params = params
        self.params_id = params.params_id
        self.poly = poly
        ctx = _ctx(params)
        planes = _centered_to_planes(ctx, _small_centered(poly, ctx.q))
        self._powers = [None, planes]  # index = power

    def power_planes(self, k: int) -> np.ndarray:
        """Eval-domain planes of s**k (k >= 1), cached."""
        ctx = _ctx(self.params)
        while len(self._powers) <= k:
            prev = self._powers[-1]
            s1 = self._powers[1]
            nxt = np.empty_like(prev)
            for i, p in enumerate(ctx.q_primes):
                nxt[i] = _kernels.pw_mulmod(prev[i], s1[i], p, ctx.pinv_q[i])
            self._powers.append(nxt)
        return self._powers[k]


class RelinKey:
    """Key-switch material for one relinearization: one pair per digit."""

    def __init__(self, params: HEParams, digits: List[Tuple[np.ndarray, np.ndarray]]):
        self.params = params
        self.params_id = params.params_id
        self.digits = digits  # [(k0 planes, k1 planes)] per digit, eval domain

    def as_ring_element_pairs(self) -> List[Tuple[RingElement, RingElement]]:
        ctx = _ctx(self.params)
        return [
            (_planes_to_element(ctx, k0), _planes_to_element(ctx, k1))
            for k0, k1 in self.digits
        ]


@dataclass
class KeySet:
    pk: PublicKey
    sk: SecretKey
    rlk: RelinKey


class Ciphertext:
    """Parts held as (K, n) int64 residue planes in the evaluation domain."""

    def __init__(self, params: HEParams, parts: List[np.ndarray], scale: Fraction):
        if len(parts) < 2:
            raise ValueError("a ciphertext needs at least 2 parts")
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.params = params
        self.params_id = params.params_id
        self.parts = parts
        self.scale = Fraction(scale)

    def parts_as_ring_elements(self) -> List[RingElement]:
        ctx = _ctx(self.params)
        return [_planes_to_element(ctx, pl) for pl in self.parts]

    def __repr__(self):
        return (
            f"Ciphertext(parts={len(self.parts)}, n={self.params.ring.n}, "
            f"scale={self.scale})"
        )


# ---------------------------------------------------------------------------
# plane <-> element conversion
# ---------------------------------------------------------------------------

def _small_centered(elem: RingElement, q: int) -> np.ndarray:
    """Centered int64 view of an element whose values are all near 0 or q."""
    half = q >> 1
    return np.array(
        [int(c) - q if int(c) > half else int(c) for c in elem.coeffs],
        dtype=np.int64,
    )


def _centered_to_planes(ctx: _Context, centered: np.ndarray) -> np.ndarray:
    """(K, n) int64 eval-domain planes of centered int64 coefficients."""
    out = np.empty((ctx.K, ctx.n), dtype=np.int64)
    for i, p in enumerate(ctx.q_primes):
        out[i] = centered % p
    _ntt_all(ctx, out)
    return out


def _element_to_planes(ctx: _Context, elem: RingElement) -> np.ndarray:
    """(K, n) int64 eval-domain planes of a coefficient-domain ring element."""
    out = np.empty((ctx.K, ctx.n), dtype=np.int64)
    arr = elem.coeffs
    for i, p in enumerate(ctx.q_primes):
        res = arr % p
        out[i] = np.array([int(v) for v in res], dtype=np.int64)
    _ntt_all(ctx, out)
    return out


def _ntt_all(ctx: _Context, planes: np.ndarray):
    for i, c in enumerate(ctx.q_ctxs):
        c.forward(planes[i : i + 1])


def _intt_all(ctx: _Context, planes: np.ndarray) -> np.ndarray:
    out = planes.copy()
    for i, c in enumerate(ctx.q_ctxs):
        c.inverse(out[i : i + 1])
    return out


def _planes_to_element(ctx: _Context, planes: np.ndarray) -> RingElement:
    coeff = _intt_all(ctx, planes)
    coeffs = rns_to_coeffs(list(coeff), tuple(ctx.q_primes), ctx.q)
    return RingElement(ctx.params.ring, coeffs)


def _coeff_planes_to_bigints(planes: np.ndarray, garner, modulus) -> np.ndarray:
    """CRT-recombine (K, n) coefficient-domain planes into big ints mod modulus."""
    acc = np.zeros(planes.shape[1], dtype=object)
    for row, g in zip(planes, garner):
        acc = acc + row.astype(object) * g
    return acc % modulus


# ---------------------------------------------------------------------------
# keygen / encrypt / decrypt
# ---------------------------------------------------------------------------

def _sample_error_planes(ctx: _Context, rng) -> np.ndarray:
    e = sample_error(ctx.params.ring, ctx.params.sigma, rng)
    return _centered_to_planes(ctx, _small_centered(e, ctx.q))


def _uniform_planes(ctx: _Context, rng) -> np.ndarray:
    """Uniform ring element sampled directly in the eval domain (a bijection)."""
    out = np.empty((ctx.K, ctx.n), dtype=np.int64)
    for i, p in enumerate(ctx.q_primes):
        out[i] = rng.integers(0, p, size=ctx.n, dtype=np.int64)
    return out


def keygen(params: HEParams, rng) -> KeySet:
    """Generate secret, public, and relinearization keys."""
    ctx = _ctx(params)
    s_elem = sample_ternary(params.ring, rng)
    sk = SecretKey(params, s_elem)
    s_hat = sk.power_planes(1)

    # pk = (b, a): b = -(a*s + e)
    a = _uniform_planes(ctx, rng)
    e = _sample_error_planes(ctx, rng)
    b = np.empty_like(a)
    for i, p in enumerate(ctx.q_primes):
        As = _kernels.pw_mulmod(a[i], s_hat[i], p, ctx.pinv_q[i])
        b[i] = (p - (As + e[i]) % p) % p
    pk = PublicKey(params, [b, a])

    # rlk digit d: (k0, k1) with k0 = -(a_d*s + e_d) + (q/P_d)*s^2
    s2_hat = sk.power_planes(2)
    digits = []
    for d in range(ctx.digit_count):
        gkey = ctx.digit_consts[d]["gkey"]
        a_d = _uniform_planes(ctx, rng)
        e_d = _sample_error_planes(ctx, rng)
        k0 = np.empty_like(a_d)
        for i, p in enumerate(ctx.q_primes):
            As = _kernels.pw_mulmod(a_d[i], s_hat[i], p, ctx.pinv_q[i])
            gs2 = _kernels.scalar_mulmod(s2_hat[i], gkey[i], p, ctx.pinv_q[i])
            k0[i] = (gs2 + (p - (As + e_d[i]) % p)) % p
        digits.append((k0, a_d))
    rlk = RelinKey(params, digits)
    return KeySet(pk=pk, sk=sk, rlk=rlk)


def _plaintext_planes(ctx: _Context, pt: Plaintext, with_delta: bool) -> np.ndarray:
    """Eval-domain planes of m (optionally Delta*m) from a plaintext."""
    out = np.empty((ctx.K, ctx.n), dtype=np.int64)
    # plaintext coefficients are < t < 2**62, so they fit int64 exactly;
    # reduce the CENTERED representative so a coefficient t-5 acts as the
    # small multiplier -5 on the noise, not as the huge value t-5
    arr = np.array([int(v) for v in pt.poly.coeffs], dtype=np.int64)
    arr = np.where(arr > ctx.t // 2, arr - ctx.t, arr)
    for i, p in enumerate(ctx.q_primes):
        res = arr % p
        if with_delta:
            res = _kernels.scalar_mulmod(res, int(ctx.delta_mod[i]), p, ctx.pinv_q[i])
        out[i] = res
    _ntt_all(ctx, out)
    return out


def _check_plaintext(params: HEParams, pt: Plaintext):
    if pt.poly.params.n != params.ring.n or pt.poly.params.q != params.t:
        raise ValueError(
            "plaintext ring mismatch: expected degree "
            f"{params.ring.n} modulo t={params.t}"
        )


def encrypt(pk: PublicKey, pt: Plaintext, rng) -> Ciphertext:
    """c = (b*u + e1 + Delta*m, a*u + e2)."""
    params = pk.params
    _check_plaintext(params, pt)
    ctx = _ctx(params)
    u_elem = sample_ternary(params.ring, rng)
    u = _centered_to_planes(ctx, _small_centered(u_elem, ctx.q))
    e1 = _sample_error_planes(ctx, rng)
    e2 = _sample_error_planes(ctx, rng)
    dm = _plaintext_planes(ctx, pt, with_delta=True)
    c0 = np.empty_like(u)
    c1 = np.empty_like(u)
    for i, p in enumerate(ctx.q_primes):
        c0[i] = (_kernels.pw_mulmod(pk.planes[0][i], u[i], p, ctx.pinv_q[i]) + e1[i] + dm[i]) % p
        c1[i] = (_kernels.pw_mulmod(pk.planes[1][i], u[i], p, ctx.pinv_q[i]) + e2[i]) % p
    return Ciphertext(params, [c0, c1], pt.scale)


def _check_key_match(key, ct: Ciphertext):
    if key.params_id != ct.params_id:
        raise ValueError("key/ciphertext parameter mismatch")


def _decrypt_planes(ctx: _Context, sk: SecretKey, ct: Ciphertext) -> np.ndarray:
    """Coefficient-domain planes of v = sum_k c_k * s^k mod q."""
    acc = ct.parts[0].copy()
    for k in range(1, len(ct.parts)):
        sk_pl = sk.power_planes(k)
        for i, p in enumerate(ctx.q_primes):
            _kernels.pw_addmul_into(acc[i], ct.parts[k][i], sk_pl[i], p, ctx.pinv_q[i])
    return _intt_all(ctx, acc)


def decrypt(sk: SecretKey, ct: Ciphertext) -> Plaintext:
    """Round t*v/q per coefficient; flag the result if the budget is exhausted.

    Rounding is exact: coefficients near a rounding tie (which a healthy
    ciphertext never produces) are recomputed with big integers.
    """
    _check_key_match(sk, ct)
    params = sk.params
    ctx = _ctx(params)
    v = _decrypt_planes(ctx, sk, ct)

    y = np.empty_like(v)
    for i, p in enumerate(ctx.q_primes):
        y[i] = _kernels.scalar_mulmod(v[i], int(ctx.inv_q[i]), p, ctx.pinv_q[i])

    out, flags = _kernels.scale_round_to_t(
        y, ctx.om_t, ctx.om_sh, ctx.theta_dec, np.uint64(ctx.t)
    )
    coeffs = out.astype(object)
    if flags.any():
        xs = _coeff_planes_to_bigints(v, ctx.garner_q, ctx.q)
        for j in np.nonzero(flags)[0]:
            x = int(xs[j])
            coeffs[j] = ((2 * ctx.t * x + ctx.q) // (2 * ctx.q)) % ctx.t

    flagged = False
    frac = _kernels.noise_frac_max(y, ctx.theta_dec)
    if frac >= 0.24:
        flagged = _exact_budget(ctx, v) == 0

    ring_t = RingParams(ctx.n, ctx.t)
    return Plaintext(RingElement(ring_t, coeffs), scale=ct.scale, flagged=flagged)


def _exact_budget(ctx: _Context, v_planes: np.ndarray) -> int:
    xs = _coeff_planes_to_bigints(v_planes, ctx.garner_q, ctx.q)
    q = ctx.q
    wmax = 1
    for x in xs:
        w = (ctx.t * int(x)) % q
        if w > q // 2:
            w = q - w
        if w > wmax:
            wmax = w
    ratio = q // (2 * wmax)
    return max(0, ratio.bit_length() - 1)


def noise_budget(ct: Ciphertext, sk: SecretKey) -> int:
    """floor(log2(q / (2*max|t*ct(s) mod q|_centered))), clamped at 0 (exact)."""
    _check_key_match(sk, ct)
    ctx = _ctx(sk.params)
    v = _decrypt_planes(ctx, sk, ct)
    return _exact_budget(ctx, v)


# ---------------------------------------------------------------------------
# additive operations
# ---------------------------------------------------------------------------

def _check_pair(a: Ciphertext, b: Ciphertext):
    if a.params_id != b.params_id:
        raise ValueError("ciphertext parameter mismatch")


def eval_add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    """Coefficient-wise sum; scales must match exactly."""
    _check_pair(a, b)
    if a.scale != b.scale:
        raise ScaleMismatchError(
            f"cannot add ciphertexts at scales {a.scale} and {b.scale}"
        )
    ctx = _ctx(a.params)
    la, lb = (a.parts, b.parts) if len(a.parts) >= len(b.parts) else (b.parts, a.parts)
    parts = []
    for k, pa in enumerate(la):
        if k < len(lb):
            s = np.empty_like(pa)
            for i, p in enumerate(ctx.q_primes):
                s[i] = (pa[i] + lb[k][i]) % p
            parts.append(s)
        else:
            parts.append(pa.copy())
    return Ciphertext(a.params, parts, a.scale)


def eval_sub(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    """Coefficient-wise difference; scales must match exactly."""
    _check_pair(a, b)
    if a.scale != b.scale:
        raise ScaleMismatchError(
            f"cannot subtract ciphertexts at scales {a.scale} and {b.scale}"
        )
    ctx = _ctx(a.params)
    count = max(len(a.parts), len(b.parts))
    parts = []
    for k in range(count):
        pa = a.parts[k] if k < len(a.parts) else None
        pb = b.parts[k] if k < len(b.parts) else None
        s = np.empty((ctx.K, ctx.n), dtype=np.int64)
        for i, p in enumerate(ctx.q_primes):
            va = pa[i] if pa is not None else 0
            vb = pb[i] if pb is not None else 0
            s[i] = (va - vb) % p
        parts.append(s)
    return Ciphertext(a.params, parts, a.scale)


def eval_add_plain(a: Ciphertext, pt: Plaintext) -> Ciphertext:
    """Add Delta*m into the zeroth part; scales must match exactly."""
    _check_plaintext(a.params, pt)
    if a.scale != pt.scale:
        raise ScaleMismatchError(
            f"cannot add plaintext at scale {pt.scale} to ciphertext at {a.scale}"
        )
    ctx = _ctx(a.params)
    dm = _plaintext_planes(ctx, pt, with_delta=True)
    c0 = np.empty_like(a.parts[0])
    for i, p in enumerate(ctx.q_primes):
        c0[i] = (a.parts[0][i] + dm[i]) % p
    return Ciphertext(a.params, [c0] + [pl.copy() for pl in a.parts[1:]], a.scale)


# ---------------------------------------------------------------------------
# multiplication
# ---------------------------------------------------------------------------

def eval_mul_plain(a: Ciphertext, pt: Plaintext) -> Ciphertext:
    """Multiply every part by the raw plaintext polynomial (no Delta factor)."""
    _check_plaintext(a.params, pt)
    ctx = _ctx(a.params)
    m_hat = _plaintext_planes(ctx, pt, with_delta=False)
    parts = []
    for pl in a.parts:
        out = np.empty_like(pl)
        for i, p in enumerate(ctx.q_primes):
            out[i] = _kernels.pw_mulmod(pl[i], m_hat[i], p, ctx.pinv_q[i])
        parts.append(out)
    return Ciphertext(a.params, parts, a.scale * pt.scale)


def eval_mul_scalar(a: Ciphertext, w: int, scale: Fraction = Fraction(1)) -> Ciphertext:
    """Multiply every slot by the centered integer w; scale multiplies by `scale`.

    Equivalent to eval_mul_plain with the constant vector [w]*n but with no
    transform work: every part plane is scaled by w mod p_i directly. The
    noise multiplies by |w| exactly, so small weights are nearly free.
    """
    w = int(w)
    ctx = _ctx(a.params)
    if not -ctx.t // 2 <= w <= ctx.t // 2:
        raise ValueError(f"scalar {w} is outside the centered range of t={ctx.t}")
    parts = []
    for pl in a.parts:
        out = np.empty_like(pl)
        for i, p in enumerate(ctx.q_primes):
            out[i] = _kernels.scalar_mulmod(pl[i], w % p, p, ctx.pinv_q[i])
        parts.append(out)
    return Ciphertext(a.params, parts, a.scale * scale)


def eval_add_scalar(a: Ciphertext, c: int) -> Ciphertext:
    """Add the centered integer c to every slot (at the ciphertext's scale)."""
    c = int(c)
    ctx = _ctx(a.params)
    if not -ctx.t // 2 <= c <= ctx.t // 2:
        raise ValueError(f"scalar {c} is outside the centered range of t={ctx.t}")
    c0 = np.empty_like(a.parts[0])
    for i, p in enumerate(ctx.q_primes):
        dm = (int(ctx.delta_mod[i]) * (c % p)) % p
        c0[i] = (a.parts[0][i] + dm) % p
    return Ciphertext(a.params, [c0] + [pl.copy() for pl in a.parts[1:]], a.scale)


def eval_linear(
    terms: Sequence[Tuple[Ciphertext, int]], scale: Fraction = Fraction(1)
) -> Ciphertext:
    """Sum of w_k * ct_k over (ciphertext, centered integer weight) pairs.

    All inputs must share parameters, part count, and scale; the output scale
    is that shared scale times `scale` (the weights' common encoding scale).
    Accumulation is lazy signed int64 with one reduction at the end, so the
    whole dot product costs one pass per part plane per term.
    """
    terms = list(terms)
    if not terms:
        raise ValueError("eval_linear needs at least one term")
    first = terms[0][0]
    ctx = _ctx(first.params)
    nparts = len(first.parts)
    wsum = 0
    for ct, w in terms:
        if ct.params_id != first.params_id:
            raise ValueError("eval_linear terms use mismatched parameters")
        if ct.scale != first.scale:
            raise ScaleMismatchError(
                f"eval_linear terms at scales {ct.scale} and {first.scale}"
            )
        if len(ct.parts) != nparts:
            raise ValueError("eval_linear terms have mismatched part counts")
        if not -ctx.t // 2 <= int(w) <= ctx.t // 2:
            raise ValueError(f"weight {w} is outside the centered range of t={ctx.t}")
        wsum += abs(int(w))
    # plane values < 2**31 and |sum w * v| must stay below 2**63
    if wsum >= (1 << 31):
        raise ValueError(f"sum of |weights| {wsum} too large for lazy accumulation")
    parts = []
    for k in range(nparts):
        acc = np.zeros((ctx.K, ctx.n), dtype=np.int64)
        for ct, w in terms:
            if w:
                _kernels.lin_accum(acc, ct.parts[k], int(w))
        for i, p in enumerate(ctx.q_primes):
            _kernels.reduce_signed(acc[i], p)
        parts.append(acc)
    return Ciphertext(first.params, parts, first.scale * scale)


def _extend_to_full(ctx: _Context, planes: np.ndarray):
    """Eval-domain q-planes -> (coeff q-planes, eval full-basis planes).

    The aux residues are an exact base extension of the [0, q) representative;
    guarded coefficients are fixed with big integers.
    """
    coeff = _intt_all(ctx, planes)
    y = np.empty_like(coeff)
    for i, p in enumerate(ctx.q_primes):
        y[i] = _kernels.scalar_mulmod(coeff[i], int(ctx.inv_q[i]), p, ctx.pinv_q[i])
    alpha, flags = _kernels.rns_alpha(y, ctx.wfix_q, ctx.thresh_q)

    aux = np.empty((len(ctx.aux_primes), ctx.n), dtype=np.int64)
    for j, ap in enumerate(ctx.aux_primes):
        consts, aconst = ctx.ext_consts[j]
        aux[j] = _kernels.rns_extend(y, alpha, consts, aconst, ap, ctx.pinv_aux[j])

    if flags.any():
        idx = np.nonzero(flags)[0]
        xs = _coeff_planes_to_bigints(coeff[:, idx], ctx.garner_q, ctx.q)
        for col, x in zip(idx, xs):
            for j, ap in enumerate(ctx.aux_primes):
                aux[j, col] = int(x) % ap

    full = np.empty((ctx.F, ctx.n), dtype=np.int64)
    full[: ctx.K] = planes  # q residues already in eval domain
    for j, c in enumerate(ctx.aux_ctxs):
        c.forward(aux[j : j + 1])
    full[ctx.K :] = aux
    return coeff, full


def _scale_round_tensor(ctx: _Context, tensor_coeff: np.ndarray) -> np.ndarray:
    """round(t * H / q) mod each q prime, H the centered tensor value.

    tensor_coeff: (F, n) unscaled coefficient-domain residues over the full
    basis. Guarded coefficients are recomputed exactly.
    """
    y = np.empty_like(tensor_coeff)
    for i, f in enumerate(ctx.full_primes):
        y[i] = _kernels.scalar_mulmod(
            tensor_coeff[i], int(ctx.inv_full[i]), f, 1.0 / f
        )
    beta, flags = _kernels.rns_alpha_signed(
        y, ctx.wfix_full, ctx.half_lo, ctx.half_hi
    )
    out = np.empty((ctx.K, ctx.n), dtype=np.int64)
    for j, p in enumerate(ctx.q_primes):
        out[j] = _kernels.scale_round_plane(
            y, beta, ctx.omega_cols[j], ctx.theta_full, ctx.tA_mod[j], p
        )
    if flags.any():
        idx = np.nonzero(flags)[0]
        zs = _coeff_planes_to_bigints(
            tensor_coeff[:, idx], ctx.garner_full, ctx.QF
        )
        for col, z in zip(idx, zs):
            h = int(z)
            if h >= ctx.QF // 2:
                h -= ctx.QF
            w = (2 * ctx.t * h + ctx.q) // (2 * ctx.q)  # round half up, sign-safe
            for j, p in enumerate(ctx.q_primes):
                out[j, col] = w % p
    return out


def _relinearize(ctx: _Context, c2_coeff: np.ndarray, rlk: RelinKey):
    """Key-switch the quadratic part: returns (add0, add1) eval-domain planes."""
    add0 = np.zeros((ctx.K, ctx.n), dtype=np.int64)
    add1 = np.zeros((ctx.K, ctx.n), dtype=np.int64)
    for d, grp in enumerate(ctx.groups):
        dc = ctx.digit_consts[d]
        ylift = np.empty((len(grp), ctx.n), dtype=np.int64)
        for gi, g in enumerate(grp):
            p = ctx.q_primes[g]
            ylift[gi] = _kernels.scalar_mulmod(
                c2_coeff[g], int(ctx.inv_q[g]), p, ctx.pinv_q[g]
            )
        k0, k1 = rlk.digits[d]
        for j, p in enumerate(ctx.q_primes):
            dig = _kernels.group_extend(ylift, dc["ext"][j], p, ctx.pinv_q[j])
            plane = dig.reshape(1, -1)
            ctx.q_ctxs[j].forward(plane)
            _kernels.pw_addmul_into(add0[j], plane[0], k0[j], p, ctx.pinv_q[j])
            _kernels.pw_addmul_into(add1[j], plane[0], k1[j], p, ctx.pinv_q[j])
    return add0, add1


def eval_mul(a: Ciphertext, b: Ciphertext, rlk: RelinKey) -> Ciphertext:
    """Tensor in the extended basis, scale by t/q, relinearize to 2 parts."""
    _check_pair(a, b)
    if rlk.params_id != a.params_id:
        raise ValueError("relinearization key parameter mismatch")
    if len(a.parts) != 2 or len(b.parts) != 2:
        raise ValueError("ciphertext-ciphertext multiply expects 2-part inputs")
    ctx = _ctx(a.params)

    _, fa0 = _extend_to_full(ctx, a.parts[0])
    _, fa1 = _extend_to_full(ctx, a.parts[1])
    is_square = b is a
    if is_square:
        fb0, fb1 = fa0, fa1
    else:
        _, fb0 = _extend_to_full(ctx, b.parts[0])
        _, fb1 = _extend_to_full(ctx, b.parts[1])

    h = [np.empty((ctx.F, ctx.n), dtype=np.int64) for _ in range(3)]
    for i, f in enumerate(ctx.full_primes):
        finv = 1.0 / f
        if is_square:
            h0, h1, h2 = _kernels.pw_square_tensor(fa0[i], fa1[i], f, finv)
        else:
            h0, h1, h2 = _kernels.pw_mul_tensor(fa0[i], fa1[i], fb0[i], fb1[i], f, finv)
        h[0][i], h[1][i], h[2][i] = h0, h1, h2

    # back to coefficient domain over the full basis
    ctxs = ctx.q_ctxs + ctx.aux_ctxs
    for part in h:
        for i, c in enumerate(ctxs):
            c.inverse(part[i : i + 1])

    c0 = _scale_round_tensor(ctx, h[0])
    c1 = _scale_round_tensor(ctx, h[1])
    c2 = _scale_round_tensor(ctx, h[2])

    add0, add1 = _relinearize(ctx, c2, rlk)
    _ntt_all(ctx, c0)
    _ntt_all(ctx, c1)
    for i, p in enumerate(ctx.q_primes):
        c0[i] = (c0[i] + add0[i]) % p
        c1[i] = (c1[i] + add1[i]) % p

    return Ciphertext(a.params, [c0, c1], a.scale * b.scale)


# ---------------------------------------------------------------------------
# slot batching
# ---------------------------------------------------------------------------

def batch_encode(params: HEParams, values: Sequence[int]) -> Plaintext:
    """Pack up to n integers mod t into slots (inverse transform mod t)."""
    n = params.ring.n
    if len(values) > n:
        raise ValueError(f"at most {n} slot values, got {len(values)}")
    t_ctx = get_ntt_context(n, params.t)
    dtype = np.uint64 if t_ctx.wide else np.int64
    vec = np.zeros((1, n), dtype=dtype)
    for i, v in enumerate(values):
        vec[0, i] = dtype(int(v) % params.t)
    t_ctx.inverse(vec)
    ring_t = RingParams(n, params.t)
    return Plaintext(RingElement(ring_t, vec[0].astype(object)))


def batch_decode(pt: Plaintext) -> List[int]:
    """Unpack slot values (forward transform mod the plaintext's own modulus)."""
    n = pt.poly.params.n
    t = pt.poly.params.q
    t_ctx = get_ntt_context(n, t)
    dtype = np.uint64 if t_ctx.wide else np.int64
    vec = np.array([[int(c) for c in pt.poly.coeffs]], dtype=dtype)
    t_ctx.forward(vec)
    return [int(v) for v in vec[0]]


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

PRESET_NAMES = ("small", "medium", "large")

# multiplicative depth each preset is sized for (used by the randomized
# homomorphism suite and the inference planner)
PRESET_DEPTH = {"small": 1, "medium": 2, "large": 3}

_PRESET_SPECS = {
    # (n, prime_bits, prime_count, t_bits)
    "small": (4096, 29, 3, 20),
    "medium": (16384, 28, 11, 62),
    "large": (16384, 29, 14, 53),
}


def _find_plaintext_prime(bits: int, n: int, exclude: Sequence[int]) -> int:
    """Largest prime below 2**bits with t == 1 mod 2n, outside `exclude`."""
    step = 2 * n
    p = ((1 << bits) - 2) // step * step + 1
    while p > step:
        if p not in exclude and sympy.isprime(p):
            return p
        p -= step
    raise ValueError(f"no suitable plaintext prime below 2**{bits}")


@lru_cache(maxsize=None)
def get_preset(name: str) -> HEParams:
    if name not in _PRESET_SPECS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    n, pbits, count, tbits = _PRESET_SPECS[name]
    primes = find_ntt_primes(pbits, n, count)
    t = _find_plaintext_prime(tbits, n, primes)
    ring = RingParams(n, math.prod(primes), primes=tuple(primes))
    return HEParams(ring=ring, t=t)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_CT_MAGIC = b"BFC1"
_KEY_MAGIC = b"BFK1"
_ROLE_PK, _ROLE_SK, _ROLE_RLK = 0, 1, 2


def _planes_to_bytes(planes: np.ndarray) -> bytes:
    return planes.astype("<u4").tobytes()


def _planes_from_bytes(data: bytes, K: int, n: int) -> np.ndarray:
    arr = np.frombuffer(data, dtype="<u4", count=K * n)
    return arr.reshape(K, n).astype(np.int64)


def serialize_ciphertext(ct: Ciphertext) -> bytes:
    num, den = ct.scale.numerator, ct.scale.denominator
    if num >= (1 << 64) or den >= (1 << 64):
        raise ValueError("ciphertext scale does not fit the 64-bit wire format")
    head = _CT_MAGIC + ct.params_id + struct.pack("<HQQ", len(ct.parts), num, den)
    body = b"".join(_planes_to_bytes(pl) for pl in ct.parts)
    return head + body


def deserialize_ciphertext(params: HEParams, data: bytes) -> Ciphertext:
    if data[:4] != _CT_MAGIC:
        raise ValueError("bad ciphertext magic")
    if data[4:12] != params.params_id:
        raise ValueError("ciphertext was produced under different parameters")
    count, num, den = struct.unpack_from("<HQQ", data, 12)
    ctx = _ctx(params)
    plane_bytes = ctx.K * ctx.n * 4
    off = 12 + 18
    if len(data) != off + count * plane_bytes:
        raise ValueError("ciphertext payload has the wrong length")
    parts = []
    for _ in range(count):
        parts.append(_planes_from_bytes(data[off : off + plane_bytes], ctx.K, ctx.n))
        off += plane_bytes
    return Ciphertext(params, parts, Fraction(num, den))


def serialize_key(key) -> bytes:
    params = key.params
    ctx = _ctx(params)
    if isinstance(key, PublicKey):
        body = struct.pack("<B", _ROLE_PK) + b"".join(
            _planes_to_bytes(pl) for pl in key.planes
        )
    elif isinstance(key, SecretKey):
        enc = bytes(
            0 if int(c) == 0 else (1 if int(c) == 1 else 2) for c in key.poly.coeffs
        )
        body = struct.pack("<B", _ROLE_SK) + enc
    elif isinstance(key, RelinKey):
        body = struct.pack("<BH", _ROLE_RLK, len(key.digits)) + b"".join(
            _planes_to_bytes(k0) + _planes_to_bytes(k1) for k0, k1 in key.digits
        )
    else:
        raise TypeError(f"cannot serialize {type(key).__name__}")
    return _KEY_MAGIC + params.params_id + body


def deserialize_key(params: HEParams, data: bytes):
    if data[:4] != _KEY_MAGIC:
        raise ValueError("bad key magic")
    if data[4:12] != params.params_id:
        raise ValueError("key was produced under different parameters")
    ctx = _ctx(params)
    role = data[12]
    plane_bytes = ctx.K * ctx.n * 4
    off = 13
    if role == _ROLE_PK:
        if len(data) != off + 2 * plane_bytes:
            raise ValueError("public key payload has the wrong length")
        planes = [
            _planes_from_bytes(data[off + i * plane_bytes :], ctx.K, ctx.n)
            for i in range(2)
        ]
        return PublicKey(params, planes)
    if role == _ROLE_SK:
        enc = data[off : off + ctx.n]
        if len(data) != off + ctx.n:
            raise ValueError("secret key payload has the wrong length")
        q = params.ring.q
        coeffs = [0 if b == 0 else (1 if b == 1 else q - 1) for b in enc]
        return SecretKey(params, RingElement(params.ring, coeffs))
    if role == _ROLE_RLK:
        (count,) = struct.unpack_from("<H", data, off)
        off += 2
        if len(data) != off + count * 2 * plane_bytes:
            raise ValueError("relinearization key payload has the wrong length")
        digits = []
        for _ in range(count):
            k0 = _planes_from_bytes(data[off:], ctx.K, ctx.n)
            off += plane_bytes
            k1 = _planes_from_bytes(data[off:], ctx.K, ctx.n)
            off += plane_bytes
            digits.append((k0, k1))
        return RelinKey(params, digits)
    raise ValueError(f"unknown key role byte {role}")
