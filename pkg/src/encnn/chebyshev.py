"""Low-degree polynomial approximation of activation functions.

Continuous activations (ReLU, sigmoid) are approximated on an interval [a, b]
by a degree-d polynomial obtained from Chebyshev interpolation: the function
is sampled at the roots of the Chebyshev polynomial T_N (N = d+1 by default;
more nodes turn the fit into a truncated-series quadrature), and the Chebyshev
coefficients follow from the discrete cosine sum. The Chebyshev form is kept
alongside an exact monomial-basis conversion on the original interval, so the
polynomial can be evaluated either by Clenshaw's recurrence (numerically
stable) or by Horner's rule on raw powers (what the encrypted evaluator
mirrors), and the two must agree.

The monomial conversion runs in exact rational arithmetic and rounds to float
once at the end: the tiny parity coefficients (an odd function's even terms
and vice versa) then come out at the 1e-16..1e-21 scale instead of being
swamped by float accumulation error.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

__all__ = [
    "ChebApprox",
    "cheb_poly",
    "fit",
    "eval_approx",
    "eval_mono",
    "max_error",
    "relu",
    "sigmoid",
]


def relu(x):
    """max(0, x), elementwise on arrays."""
    return np.maximum(x, 0.0) if isinstance(x, np.ndarray) else max(0.0, float(x))


def sigmoid(x):
    """Logistic function 1/(1+exp(-x)), overflow-safe, elementwise on arrays."""
    if isinstance(x, np.ndarray):
        out = np.empty_like(x, dtype=np.float64)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    x = float(x)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def cheb_poly(k: int, x: float) -> float:
    """Chebyshev polynomial of the first kind via T_{n+1} = 2x T_n - T_{n-1}."""
    if k < 0:
        raise ValueError(f"order must be non-negative, got {k}")
    if k == 0:
        return 1.0
    t_prev, t_cur = 1.0, float(x)
    for _ in range(k - 1):
        t_prev, t_cur = t_cur, 2.0 * x * t_cur - t_prev
    return t_cur


@dataclass(frozen=True)
class ChebApprox:
    """A fitted polynomial in both Chebyshev and monomial form.

    cheb_coeffs live on [-1, 1] after the affine map u = (2x - a - b)/(b - a);
    mono_coeffs are plain powers of x on the original [a, b].
    """

    func_id: str
    degree: int
    interval: Tuple[float, float]
    cheb_coeffs: Tuple[float, ...]
    mono_coeffs: Tuple[float, ...]

    def __post_init__(self):
        if len(self.cheb_coeffs) != self.degree + 1:
            raise ValueError("cheb_coeffs must have degree+1 entries")
        if len(self.mono_coeffs) != self.degree + 1:
            raise ValueError("mono_coeffs must have degree+1 entries")
        a, b = self.interval
        if not a < b:
            raise ValueError(f"interval must satisfy a < b, got [{a}, {b}]")


def _cheb_basis_mono() -> Callable[[int], List[int]]:
    """T_k as integer monomial coefficients (lowest power first), cached."""
    table = [[1], [0, 1]]

    def get(k: int) -> List[int]:
        while len(table) <= k:
            t1 = table[-1]
            t0 = table[-2]
            nxt = [0] + [2 * c for c in t1]
            for i, c in enumerate(t0):
                nxt[i] -= c
            table.append(nxt)
        return table[k]

    return get


_cheb_mono = _cheb_basis_mono()


def _to_monomial(cheb_coeffs: Sequence[float], a: float, b: float) -> Tuple[float, ...]:
    """Exact conversion: sum c_k T_k(u), u = alpha*x + beta, as powers of x."""
    d = len(cheb_coeffs) - 1
    alpha = Fraction(2) / (Fraction(b) - Fraction(a))
    beta = -(Fraction(a) + Fraction(b)) / (Fraction(b) - Fraction(a))

    # p(u) as exact rational coefficients in u
    in_u = [Fraction(0)] * (d + 1)
    for k, c in enumerate(cheb_coeffs):
        cf = Fraction(c)
        for i, tc in enumerate(_cheb_mono(k)):
            if tc:
                in_u[i] += cf * tc

    # substitute u = alpha*x + beta: expand each u^i by the binomial theorem
    out = [Fraction(0)] * (d + 1)
    # powers[j] = coefficient of x^j in (alpha*x + beta)^i, built incrementally
    powers = [Fraction(1)]
    for i in range(d + 1):
        if in_u[i]:
            for j, pc in enumerate(powers):
                out[j] += in_u[i] * pc
        if i < d:
            nxt = [Fraction(0)] * (len(powers) + 1)
            for j, pc in enumerate(powers):
                nxt[j] += pc * beta
                nxt[j + 1] += pc * alpha
            powers = nxt
    return tuple(float(c) for c in out)


def fit(
    f: Callable[[float], float],
    degree: int,
    interval: Tuple[float, float],
    nodes: int = None,
    func_id: str = "custom",
) -> ChebApprox:
    """Fit a degree-`degree` polynomial to f on `interval` at Chebyshev nodes.

    With the default nodes = degree+1 this is interpolation at the roots of
    T_{d+1}; passing larger `nodes` computes the quadrature approximation of
    the truncated Chebyshev series (converging to the true series
    coefficients as nodes grows).
    """
    if degree < 0:
        raise ValueError(f"degree must be non-negative, got {degree}")
    a, b = float(interval[0]), float(interval[1])
    if not a < b:
        raise ValueError(f"interval must satisfy a < b, got [{a}, {b}]")
    N = degree + 1 if nodes is None else int(nodes)
    if N < degree + 1:
        raise ValueError(f"need at least degree+1 nodes, got {N}")

    j = np.arange(N)
    theta = (j + 0.5) * math.pi / N
    u = np.cos(theta)
    x = 0.5 * (b - a) * u + 0.5 * (a + b)
    fx = np.array([float(f(float(v))) for v in x])
    if not np.all(np.isfinite(fx)):
        bad = x[~np.isfinite(fx)][0]
        raise ValueError(f"function returned a non-finite value at x={bad}")

    cheb = []
    for k in range(degree + 1):
        s = float(np.dot(fx, np.cos(k * theta)))
        cheb.append((1.0 if k == 0 else 2.0) * s / N)

    mono = _to_monomial(cheb, a, b)
    return ChebApprox(
        func_id=func_id,
        degree=degree,
        interval=(a, b),
        cheb_coeffs=tuple(cheb),
        mono_coeffs=mono,
    )


def eval_approx(approx: ChebApprox, x: float) -> float:
    """Clenshaw evaluation of the Chebyshev form (flags extrapolation)."""
    a, b = approx.interval
    x = float(x)
    if x < a or x > b:
        warnings.warn(
            f"evaluating outside the fitted interval [{a}, {b}] at x={x}",
            stacklevel=2,
        )
    u = (2.0 * x - a - b) / (b - a)
    b1 = b2 = 0.0
    for c in reversed(approx.cheb_coeffs[1:]):
        b1, b2 = 2.0 * u * b1 - b2 + c, b1
    return u * b1 - b2 + approx.cheb_coeffs[0]


def eval_mono(approx: ChebApprox, x: float) -> float:
    """Horner evaluation of the monomial form on the original interval."""
    acc = 0.0
    for c in reversed(approx.mono_coeffs):
        acc = acc * float(x) + c
    return acc


def max_error(
    approx: ChebApprox, f: Callable[[float], float], grid_size: int = 1000
) -> Dict:
    """E(x) = f(x) - p(x) on a uniform grid; returns the max and the samples."""
    if grid_size < 100:
        raise ValueError(f"grid_size must be at least 100, got {grid_size}")
    a, b = approx.interval
    xs = np.linspace(a, b, grid_size)
    samples = []
    best = (0.0, a)
    for x in xs:
        e = float(f(float(x))) - eval_approx(approx, float(x))
        samples.append((float(x), e))
        if abs(e) > best[0]:
            best = (abs(e), float(x))
    return {"E_max": best[0], "argmax": best[1], "samples": samples}
