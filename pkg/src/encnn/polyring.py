"""Exact arithmetic in the negacyclic ring Z_q[x]/(x^n + 1).

The coefficient modulus q may be any integer >= 2. When q is given as a product
of word-sized primes p == 1 (mod 2n), multiplication can run through per-prime
negacyclic number-theoretic transforms (JIT-compiled kernels); a big-integer
schoolbook path is always available and the two are interchangeable. All
sampling flows through an injectable numpy Generator so results are
reproducible.

Ring degrees used by the encryption presets are 1024..16384; smaller powers of
two are accepted so unit tests can exercise exact corner cases (n=4, n=64, ...).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import sympy

from . import _kernels

__all__ = [
    "RingParams",
    "RingElement",
    "ring_add",
    "ring_neg",
    "ring_mul",
    "sample_uniform",
    "sample_ternary",
    "sample_error",
    "find_ntt_primes",
    "NTTContext",
    "get_ntt_context",
    "coeffs_to_rns",
    "rns_to_coeffs",
]

_MIN_DEGREE = 4
_MAX_DEGREE = 16384
_MAX_NARROW_PRIME = 1 << 31   # int64 lazy kernels need p < 2**31
_MAX_WIDE_PRIME = 1 << 62     # uint64 kernels need p < 2**62


# ----------------------------------------------------------------------------
# Parameters and elements
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class RingParams:
    """Degree and coefficient modulus of a negacyclic polynomial ring.

    `primes`, when provided, is the factorization of q into distinct primes and
    enables the transform-based multiplication path if every prime is
    NTT-friendly (p == 1 mod 2n, p < 2**31).
    """

    n: int
    q: int
    primes: Optional[tuple] = None

    def __post_init__(self):
        if self.n < _MIN_DEGREE or self.n > _MAX_DEGREE or self.n & (self.n - 1):
            raise ValueError(
                f"ring degree must be a power of two in [{_MIN_DEGREE}, {_MAX_DEGREE}], got {self.n}"
            )
        if self.q < 2:
            raise ValueError(f"coefficient modulus must be >= 2, got {self.q}")
        if self.primes is not None:
            object.__setattr__(self, "primes", tuple(int(p) for p in self.primes))
            prod = math.prod(self.primes)
            if prod != self.q:
                raise ValueError("prime factorization does not multiply to q")
            if len(set(self.primes)) != len(self.primes):
                raise ValueError("primes must be distinct")

    @property
    def supports_ntt(self) -> bool:
        """True when multiplication can run through per-prime transforms."""
        if self.primes is None:
            return False
        return all(
            p % (2 * self.n) == 1 and p < _MAX_NARROW_PRIME for p in self.primes
        )


class RingElement:
    """A polynomial with coefficients reduced into [0, q)."""

    __slots__ = ("params", "coeffs")

    def __init__(self, params: RingParams, coeffs):
        arr = np.asarray(coeffs, dtype=object)
        if arr.shape != (params.n,):
            raise ValueError(f"expected {params.n} coefficients, got shape {arr.shape}")
        arr = arr % params.q
        self.params = params
        self.coeffs = arr
        self.coeffs.flags.writeable = False

    @classmethod
    def zero(cls, params: RingParams) -> "RingElement":
        return cls(params, [0] * params.n)

    @classmethod
    def one(cls, params: RingParams) -> "RingElement":
        c = [0] * params.n
        c[0] = 1
        return cls(params, c)

    @classmethod
    def monomial(cls, params: RingParams, degree: int, coeff: int = 1) -> "RingElement":
        c = [0] * params.n
        c[degree] = coeff
        return cls(params, c)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RingElement):
            return NotImplemented
        return self.params == other.params and bool(
            np.all(self.coeffs == other.coeffs)
        )

    def __hash__(self):
        return hash((self.params, tuple(int(c) for c in self.coeffs)))

    def __repr__(self):
        return f"RingElement(n={self.params.n}, q={self.params.q})"

    def __add__(self, other):
        return ring_add(self, other)

    def __mul__(self, other):
        return ring_mul(self, other)

    def __neg__(self):
        return ring_neg(self)


def _check_same_params(a: RingElement, b: RingElement):
    if a.params != b.params:
        raise ValueError("ring parameter mismatch between operands")


# ----------------------------------------------------------------------------
# Addition / negation
# ----------------------------------------------------------------------------

def ring_add(a: RingElement, b: RingElement) -> RingElement:
    """Coefficient-wise (a + b) mod q."""
    _check_same_params(a, b)
    return RingElement(a.params, (a.coeffs + b.coeffs) % a.params.q)


def ring_neg(a: RingElement) -> RingElement:
    """Coefficient-wise (-a) mod q."""
    return RingElement(a.params, (-a.coeffs) % a.params.q)


# ----------------------------------------------------------------------------
# Multiplication
# ----------------------------------------------------------------------------

def ring_mul(a: RingElement, b: RingElement, method: str = "auto") -> RingElement:
    """Product in Z_q[x]/(x^n + 1).

    method: "auto" picks the transform path when the modulus supports it;
    "ntt" forces it (error if unsupported); "schoolbook" forces the exact
    big-integer convolution.
    """
    _check_same_params(a, b)
    if method not in ("auto", "ntt", "schoolbook"):
        raise ValueError(f"unknown multiplication method {method!r}")
    if method == "ntt" and not a.params.supports_ntt:
        raise ValueError("modulus does not support transform-based multiplication")
    use_ntt = a.params.supports_ntt if method == "auto" else (method == "ntt")
    if use_ntt:
        coeffs = _ntt_negacyclic_mul(a.coeffs, b.coeffs, a.params)
    else:
        coeffs = _schoolbook_negacyclic_mul(a.coeffs, b.coeffs, a.params)
    return RingElement(a.params, coeffs)


def _schoolbook_negacyclic_mul(ac, bc, params: RingParams):
    """Exact O(n^2) negacyclic convolution over python big integers."""
    n, q = params.n, params.q
    full = np.convolve(ac, bc)  # object dtype: exact big-int products
    out = np.empty(n, dtype=object)
    out[: n - 1] = full[: n - 1] - full[n : 2 * n - 1]
    out[n - 1] = full[n - 1]
    return out % q


def _ntt_negacyclic_mul(ac, bc, params: RingParams):
    planes = []
    for p in params.primes:
        ctx = get_ntt_context(params.n, p)
        ra = ctx.to_residues(ac)
        rb = ctx.to_residues(bc)
        ctx.forward(ra)
        ctx.forward(rb)
        rc = _kernels.pw_mulmod(ra, rb, p, 1.0 / p)
        ctx.inverse(rc)
        planes.append(rc[0])
    return rns_to_coeffs(planes, params.primes, params.q)


# ----------------------------------------------------------------------------
# RNS helpers (shared with the encryption layer)
# ----------------------------------------------------------------------------

def coeffs_to_rns(coeffs, primes: Sequence[int]) -> list:
    """Residue planes (int64 for narrow primes, uint64 for wide) of big-int coeffs."""
    arr = np.asarray(coeffs, dtype=object)
    planes = []
    for p in primes:
        res = arr % p
        dtype = np.int64 if p < _MAX_NARROW_PRIME else np.uint64
        planes.append(np.array([int(v) for v in res], dtype=dtype))
    return planes


@lru_cache(maxsize=None)
def _crt_consts(primes: tuple):
    q = math.prod(primes)
    gs = []
    for p in primes:
        m = q // p
        gs.append((m * pow(m, -1, p)) % q)
    return q, tuple(gs)


def rns_to_coeffs(planes, primes: Sequence[int], q: Optional[int] = None):
    """Recombine residue planes into big-int coefficients in [0, q)."""
    primes = tuple(int(p) for p in primes)
    qq, gs = _crt_consts(primes)
    if q is not None and q != qq:
        raise ValueError("q does not match the product of the primes")
    acc = np.zeros(len(planes[0]), dtype=object)
    for plane, g in zip(planes, gs):
        acc = acc + plane.astype(object) * g
    return acc % qq


# ----------------------------------------------------------------------------
# Number-theoretic transform contexts
# ----------------------------------------------------------------------------

def _bit_reverse_perm(n: int) -> np.ndarray:
    logn = n.bit_length() - 1
    br = np.zeros(n, dtype=np.int64)
    for i in range(1, n):
        br[i] = (br[i >> 1] >> 1) | ((i & 1) << (logn - 1))
    return br


class NTTContext:
    """Cached twiddle tables for the negacyclic NTT modulo one prime.

    Primes below 2**31 use lazy int64 kernels with 32-bit Shoup quotients;
    wider primes (up to 2**62, e.g. a large plaintext modulus) use uint64
    kernels with 64-bit Shoup quotients.
    """

    def __init__(self, n: int, p: int):
        if p % (2 * n) != 1:
            raise ValueError(f"prime {p} is not 1 mod 2n (n={n})")
        if p >= _MAX_WIDE_PRIME:
            raise ValueError(f"prime {p} exceeds the supported 62-bit range")
        self.n = n
        self.p = p
        self.wide = p >= _MAX_NARROW_PRIME
        self.pinv = 1.0 / p

        g = sympy.primitive_root(p)
        psi = pow(int(g), (p - 1) // (2 * n), p)
        assert pow(psi, n, p) == p - 1
        ipsi = pow(psi, -1, p)
        br = _bit_reverse_perm(n)

        def chain(base):
            pw = [1] * n
            for i in range(1, n):
                pw[i] = (pw[i - 1] * base) % p
            return pw

        shift = 64 if self.wide else 32
        dtype = np.uint64 if self.wide else np.int64

        def tables(base):
            pw = chain(base)
            w = np.array([pw[br[i]] for i in range(n)], dtype=dtype)
            sh = np.array([(pw[br[i]] << shift) // p for i in range(n)], dtype=dtype)
            return w, sh

        self.psi, self.psi_sh = tables(psi)
        self.ipsi, self.ipsi_sh = tables(ipsi)
        ninv = pow(n, -1, p)
        self.ninv = dtype(ninv)
        self.ninv_sh = dtype((ninv << shift) // p)
        self._p = dtype(p)

    def to_residues(self, coeffs) -> np.ndarray:
        """(1, n) residue matrix of big-int coefficients, kernel-ready dtype."""
        arr = np.asarray(coeffs, dtype=object) % self.p
        dtype = np.uint64 if self.wide else np.int64
        return np.array([[int(v) for v in arr]], dtype=dtype)

    def forward(self, arr: np.ndarray) -> np.ndarray:
        """In-place forward transform of each row of an (m, n) residue matrix."""
        if self.wide:
            return _kernels.ntt_forward_u64(arr, self.psi, self.psi_sh, self._p)
        return _kernels.ntt_forward(arr, self.psi, self.psi_sh, self.p)

    def inverse(self, arr: np.ndarray) -> np.ndarray:
        """In-place inverse transform of each row of an (m, n) residue matrix."""
        if self.wide:
            return _kernels.ntt_inverse_u64(
                arr, self.ipsi, self.ipsi_sh, self._p, self.ninv, self.ninv_sh
            )
        return _kernels.ntt_inverse(
            arr, self.ipsi, self.ipsi_sh, self.p, self.ninv, self.ninv_sh
        )


@lru_cache(maxsize=None)
def get_ntt_context(n: int, p: int) -> NTTContext:
    return NTTContext(n, p)


# ----------------------------------------------------------------------------
# Prime search
# ----------------------------------------------------------------------------

def find_ntt_primes(bits: int, n: int, count: int, exclude: Sequence[int] = ()) -> list:
    """The `count` largest primes below 2**bits that are 1 mod 2n.

    Deterministic: scans downward from 2**bits in steps of 2n, skipping any
    prime in `exclude`. Raises if the range is exhausted.
    """
    step = 2 * n
    excluded = set(exclude)
    p = ((1 << bits) - 2) // step * step + 1
    found = []
    while len(found) < count:
        if p < (1 << (bits - 1)):
            raise ValueError(
                f"not enough {bits}-bit primes congruent to 1 mod {step}"
            )
        if p not in excluded and sympy.isprime(p):
            found.append(p)
        p -= step
    return found


# ----------------------------------------------------------------------------
# Sampling
# ----------------------------------------------------------------------------

def sample_uniform(params: RingParams, rng: np.random.Generator) -> RingElement:
    """Coefficients uniform over [0, q) (rejection sampling over whole bytes)."""
    q = params.q
    k = q.bit_length()
    nbytes = (k + 7) // 8
    mask = (1 << k) - 1
    coeffs = []
    while len(coeffs) < params.n:
        chunk = rng.bytes(nbytes * 64)
        for i in range(64):
            v = int.from_bytes(chunk[i * nbytes : (i + 1) * nbytes], "little") & mask
            if v < q:
                coeffs.append(v)
                if len(coeffs) == params.n:
                    break
    return RingElement(params, coeffs)


def sample_ternary(params: RingParams, rng: np.random.Generator) -> RingElement:
    """Coefficients uniform over {-1, 0, 1}, mapped into [0, q)."""
    vals = rng.integers(-1, 2, size=params.n)
    return RingElement(params, [int(v) for v in vals])


@lru_cache(maxsize=None)
def _gaussian_cdf_table(sigma: float):
    bound = int(math.ceil(6 * sigma))
    ks = np.arange(-bound, bound + 1)
    probs = np.exp(-(ks.astype(np.float64) ** 2) / (2 * sigma * sigma))
    probs /= probs.sum()
    return ks, np.cumsum(probs)


def sample_error(params: RingParams, sigma: float, rng: np.random.Generator) -> RingElement:
    """Centered discrete Gaussian (std sigma, truncated at 6*sigma), mapped into [0, q)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    ks, cdf = _gaussian_cdf_table(float(sigma))
    u = rng.random(params.n)
    idx = np.searchsorted(cdf, u)
    return RingElement(params, [int(ks[i]) for i in idx])
