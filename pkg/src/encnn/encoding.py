"""Fixed-point bridges between real values and integers mod t.

Real-valued pixels, weights, and polynomial coefficients become integers by
multiplying with a power-of-two scale and rounding; every integer carries its
scale as an exact rational so products and sums track the cumulative scale
without floating-point drift. Decoding divides back out. The plaintext
modulus t bounds the representable range: all centered intermediates must
stay inside (-t/2, t/2], which `shadow_eval` verifies by running the entire
inference arithmetic over exact big integers before anything is encrypted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

__all__ = [
    "FixedPointConfig",
    "ScaledInteger",
    "encode_real",
    "decode_real",
    "QuantizedPoly",
    "quantize_poly",
    "LadderStep",
    "power_ladder",
    "ladder_depth",
    "ConvPlan",
    "ActPlan",
    "PoolPlan",
    "FCPlan",
    "IntegerPlan",
    "build_integer_plan",
    "run_shadow",
    "shadow_eval",
]

Rational = Union[int, Fraction]


@dataclass(frozen=True)
class FixedPointConfig:
    """Scale choices for one encrypted inference run.

    The documented soundness bound: max |logical value| x cumulative scale
    must stay below t/2 at every point of the pipeline (checked empirically
    by `shadow_eval`, which replays the arithmetic over exact integers).
    """

    input_scale_bits: int = 8
    weight_scale_bits: int = 5
    t: int = 0
    act_guard_bits: Union[int, Tuple[int, ...]] = 4

    def __post_init__(self):
        if self.input_scale_bits < 0:
            raise ValueError(
                f"input_scale_bits must be >= 0, got {self.input_scale_bits}"
            )
        if self.weight_scale_bits < 0:
            raise ValueError(
                f"weight_scale_bits must be >= 0, got {self.weight_scale_bits}"
            )
        if self.t < 0:
            raise ValueError(f"t must be positive (or 0 for unbounded), got {self.t}")
        guards = self.act_guard_bits
        if not isinstance(guards, int):
            guards = tuple(int(g) for g in guards)
            object.__setattr__(self, "act_guard_bits", guards)
        for g in (guards,) if isinstance(guards, int) else guards:
            if g < 0:
                raise ValueError(f"act_guard_bits must be >= 0, got {g}")

    @property
    def input_scale(self) -> int:
        return 1 << self.input_scale_bits

    @property
    def weight_scale(self) -> int:
        return 1 << self.weight_scale_bits


@dataclass(frozen=True)
class ScaledInteger:
    """An integer with an exact rational scale: logical value = value / scale.

    `value` is the centered representative in (-t/2, t/2] when a modulus
    applies; plain signed integer otherwise.
    """

    value: int
    scale: Fraction

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def encode_real(v: float, scale: Rational, t: Optional[int] = None) -> ScaledInteger:
    """round(v * scale), centered mod t when t is given.

    Rounds half away from zero, exactly (no float arithmetic in the rounding
    itself). The precondition |v| * scale < t/2 is enforced when t is
    supplied.
    """
    scale = Fraction(scale)
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if isinstance(v, float) and not math.isfinite(v):
        raise ValueError(f"value must be finite, got {v}")
    val = Fraction(v) * scale
    rounded = int(math.floor(val + Fraction(1, 2))) if val >= 0 else -int(
        math.floor(-val + Fraction(1, 2))
    )
    if t is not None:
        if 2 * abs(val) >= t:
            raise ValueError(
                f"magnitude {float(v)} at scale {scale} needs |{float(val)}| < t/2 = {t / 2}"
            )
        rounded %= t
        if rounded > t // 2:
            rounded -= t
    return ScaledInteger(rounded, scale)


def decode_real(si: ScaledInteger) -> float:
    """Exact rational value / scale, as float."""
    return float(Fraction(si.value) / si.scale)


# ---------------------------------------------------------------------------
# exact rounding / log2 helpers
# ---------------------------------------------------------------------------

def _round_half_away(x: Fraction) -> int:
    """round(x) with ties away from zero, in exact integer arithmetic."""
    n, d = x.numerator, x.denominator
    if n >= 0:
        return (2 * n + d) // (2 * d)
    return -((-2 * n + d) // (2 * d))


def _ceil_log2(fr: Fraction) -> int:
    """Smallest integer e with 2^e >= fr, exactly."""
    if fr <= 0:
        raise ValueError(f"log2 argument must be positive, got {fr}")
    p, q = fr.numerator, fr.denominator
    e = p.bit_length() - q.bit_length() - 1
    while (q << e if e >= 0 else q) < (p if e >= 0 else p << -e):
        e += 1
    return e


def _quantize_array(arr: np.ndarray, scale: Fraction) -> np.ndarray:
    """Elementwise round(v * scale), half away from zero, exactly.

    Returns int64 when every element fits, otherwise an object array of
    Python ints — downstream arithmetic promotes as needed either way.
    """
    flat = [_round_half_away(Fraction(float(v)) * scale) for v in arr.ravel()]
    big = max((abs(v) for v in flat), default=0)
    dtype = np.int64 if big < 2**62 else object
    return np.array(flat, dtype=dtype).reshape(arr.shape)


# ---------------------------------------------------------------------------
# activation polynomial quantization
# ---------------------------------------------------------------------------

# Coefficients below this fraction of the largest one are numerical zeros
# (an odd/even function's wrong-parity terms land around 1e-16..1e-12 of the
# peak; every genuine term of the supported activations sits above 1e-8).
NEGLIGIBLE_REL = 1e-10


@dataclass(frozen=True)
class QuantizedPoly:
    """Integer form of an activation polynomial at fixed scales.

    The evaluator receives x as an integer at `in_scale` and computes
    `sum(a_k * x^k for (k, a_k) in terms) + const`, an integer at
    `out_scale`: each a_k = round(m_k * out_scale / in_scale^k), so term k
    approximates m_k x^k at out_scale. Terms are evaluated in ascending
    degree with the constant folded in last; degrees >= 1 whose coefficient
    rounded to zero are dropped and listed in `dropped`.
    """

    terms: Tuple[Tuple[int, int], ...]  # (degree >= 1, nonzero coefficient)
    const: int
    in_scale: Fraction
    out_scale: Fraction
    dropped: Tuple[int, ...]
    source_id: str
    source_degree: int

    def powers(self) -> Tuple[int, ...]:
        return tuple(k for k, _ in self.terms)

    def eval_int(self, x: int) -> int:
        """Exact integer evaluation, same term order as the evaluator."""
        acc = 0
        for k, a in self.terms:
            acc += a * x**k
        return acc + self.const


def quantize_poly(
    approx,
    in_scale: Rational,
    t: Optional[int] = None,
    guard_bits: int = 4,
) -> QuantizedPoly:
    """Map a fitted polynomial's real coefficients to scaled integers.

    The output scale is sized so the highest non-negligible degree K keeps
    about `guard_bits` significant bits: out_scale = 2^(ceil(log2(
    in_scale^K / |m_K|)) + guard_bits). When `t` is given, any coefficient
    whose centered value would not fit raises; the integer plan instead
    leaves t checks to the shadow evaluation so overflow stays a reported
    flag.
    """
    in_scale = Fraction(in_scale)
    if in_scale <= 0:
        raise ValueError(f"in_scale must be positive, got {in_scale}")
    if guard_bits < 0:
        raise ValueError(f"guard_bits must be >= 0, got {guard_bits}")
    mono = [float(c) for c in approx.mono_coeffs]
    peak = max(abs(c) for c in mono)
    if peak == 0.0:
        raise ValueError("all polynomial coefficients are zero")
    highest = max(
        (k for k in range(1, len(mono)) if abs(mono[k]) > NEGLIGIBLE_REL * peak),
        default=0,
    )
    if highest == 0:
        raise ValueError(
            "no non-constant coefficient exceeds the negligibility threshold; "
            "the polynomial would quantize to a constant"
        )
    exp = _ceil_log2(in_scale**highest / Fraction(abs(mono[highest]))) + guard_bits
    out_scale = Fraction(2) ** exp

    terms: List[Tuple[int, int]] = []
    dropped: List[int] = []
    for k in range(1, len(mono)):
        a = _round_half_away(Fraction(mono[k]) * out_scale / in_scale**k)
        if a != 0:
            terms.append((k, a))
        else:
            dropped.append(k)
    const = _round_half_away(Fraction(mono[0]) * out_scale)
    if t:
        for k, a in terms + [(0, const)]:
            if 2 * abs(a) >= t:
                raise ValueError(
                    f"degree-{k} coefficient {a} needs |value| < t/2 = {t / 2}"
                )
    return QuantizedPoly(
        terms=tuple(terms),
        const=const,
        in_scale=in_scale,
        out_scale=out_scale,
        dropped=tuple(dropped),
        source_id=getattr(approx, "func_id", "custom"),
        source_degree=getattr(approx, "degree", len(mono) - 1),
    )


# ---------------------------------------------------------------------------
# power ladder: which ciphertext-by-ciphertext products build the powers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LadderStep:
    """Materialize x^power as the product of x^a and x^b (a >= b, a+b=power)."""

    power: int
    a: int
    b: int


def power_ladder(degrees: Iterable[int]) -> Tuple[LadderStep, ...]:
    """Multiplication steps that materialize every requested power of x.

    Powers are built in ascending order; each one is a square of the half
    power when available, else a product of two available powers (largest
    first), else filled in by binary splitting. x^1 is the input itself and
    costs nothing.
    """
    need = sorted({int(k) for k in degrees})
    if need and need[0] < 1:
        raise ValueError(f"powers must be >= 1, got {need[0]}")
    steps: List[LadderStep] = []
    avail = {1}

    def emit(k: int, x: int, y: int) -> None:
        steps.append(LadderStep(k, max(x, y), min(x, y)))
        avail.add(k)

    def ensure(k: int) -> None:
        if k in avail:
            return
        h = k // 2
        ensure(h)
        ensure(k - h)
        emit(k, h, k - h)

    for k in need:
        if k in avail:
            continue
        if k % 2 == 0 and k // 2 in avail:
            emit(k, k // 2, k // 2)
            continue
        pair = next(
            (p for p in sorted(avail, reverse=True) if p < k and k - p in avail),
            None,
        )
        if pair is not None:
            emit(k, pair, k - pair)
            continue
        ensure(k)
    return tuple(steps)


def ladder_depth(steps: Sequence[LadderStep]) -> int:
    """Longest multiplication chain from x^1 to any materialized power."""
    depth = {1: 0}
    for s in steps:
        depth[s.power] = max(depth[s.a], depth[s.b]) + 1
    return max(depth.values(), default=0)


# ---------------------------------------------------------------------------
# the integer plan: one quantization of a model, shared by the shadow
# evaluation and the encrypted evaluator so both run identical arithmetic
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConvPlan:
    name: str
    weight: np.ndarray  # integer kernel (F, C, k, k)
    bias: Tuple[int, ...]  # at out_scale
    window: int
    in_scale: Fraction
    out_scale: Fraction


@dataclass(frozen=True)
class ActPlan:
    name: str
    poly: QuantizedPoly
    ladder: Tuple[LadderStep, ...]
    in_scale: Fraction
    out_scale: Fraction


@dataclass(frozen=True)
class PoolPlan:
    name: str
    window: int
    stride: int
    in_scale: Fraction
    out_scale: Fraction  # in_scale * window^2: mean pool sums slots and
    # absorbs the 1/window^2 into the scale, costing no ring operation


@dataclass(frozen=True, eq=False)
class FCPlan:
    name: str
    weight: np.ndarray  # integer matrix (out, in)
    bias: Tuple[int, ...]
    in_scale: Fraction
    out_scale: Fraction


LayerPlan = Union[ConvPlan, ActPlan, PoolPlan, FCPlan]

# eval_linear accumulates lazily in int64; per-output weight mass must obey
# sum(|w|) < 2^31 so sum(|w|) * (q_i < 2^31) stays under 2^63
_LINEAR_WEIGHT_MASS_LIMIT = 2**31


@dataclass(frozen=True, eq=False)
class IntegerPlan:
    """Everything both evaluators need: integer weights, scales, ladders."""

    network: "object"  # NetworkConfig
    fp: FixedPointConfig
    input_scale: Fraction
    layers: Tuple[LayerPlan, ...]
    logit_scale: Fraction
    constant_max: int  # largest |weight|, |bias|, or poly coefficient


def build_integer_plan(network, model, fp: FixedPointConfig) -> IntegerPlan:
    """Quantize a trained model into the integer arithmetic actually run.

    Weight tensors are scaled by 2^weight_scale_bits, biases by the layer's
    output scale, activation coefficients per `quantize_poly`. No values are
    checked against t here — `run_shadow` reports fit as a flag instead of
    an exception — but per-output weight mass is validated against the
    linear-combination accumulator limit, which is mechanical, not data
    dependent.
    """
    from . import nn as _nn

    model.check_against(network)
    n_acts = sum(isinstance(l, _nn.Activation) for l in network.layers)
    guards = fp.act_guard_bits
    if isinstance(guards, int):
        guards = (guards,) * n_acts
    if len(guards) != n_acts:
        raise ValueError(
            f"network has {n_acts} activation layers but act_guard_bits "
            f"has {len(guards)} entries"
        )
    w_scale = Fraction(fp.weight_scale)
    scale = Fraction(fp.input_scale)
    plans: List[LayerPlan] = []
    constant_max = 0
    act_i = 0
    for layer, name in zip(network.layers, network.names):
        if isinstance(layer, _nn.Softmax):
            raise ValueError(
                "softmax has no integer form; build the plan from the "
                "inference network, which ends at the logits"
            )
        if isinstance(layer, (_nn.Conv, _nn.FC)):
            w_int = _quantize_array(model.tensors[f"{name}.weight"], w_scale)
            out_scale = scale * w_scale
            bias = tuple(
                _round_half_away(Fraction(float(b)) * out_scale)
                for b in model.tensors[f"{name}.bias"]
            )
            w_rows = w_int.reshape(w_int.shape[0], -1).astype(object)
            mass = int(np.abs(w_rows).sum(axis=1).max()) if w_rows.size else 0
            if mass >= _LINEAR_WEIGHT_MASS_LIMIT:
                raise ValueError(
                    f"layer {name}: per-output weight mass {mass} exceeds "
                    f"the linear accumulator limit {_LINEAR_WEIGHT_MASS_LIMIT}; "
                    "lower weight_scale_bits"
                )
            constant_max = max(
                constant_max,
                int(np.abs(w_rows).max()) if w_rows.size else 0,
                max((abs(b) for b in bias), default=0),
            )
            if isinstance(layer, _nn.Conv):
                plans.append(
                    ConvPlan(name, w_int, bias, layer.window, scale, out_scale)
                )
            else:
                plans.append(FCPlan(name, w_int, bias, scale, out_scale))
            scale = out_scale
        elif isinstance(layer, _nn.Activation):
            if isinstance(layer.spec, str):
                raise ValueError(
                    f"activation '{name}' must carry a fitted polynomial for "
                    f"integer evaluation, got '{layer.spec}'"
                )
            poly = quantize_poly(layer.spec, scale, guard_bits=guards[act_i])
            act_i += 1
            ladder = power_ladder(poly.powers())
            constant_max = max(
                constant_max,
                abs(poly.const),
                max((abs(a) for _, a in poly.terms), default=0),
            )
            plans.append(ActPlan(name, poly, ladder, scale, poly.out_scale))
            scale = poly.out_scale
        elif isinstance(layer, _nn.MeanPool):
            out_scale = scale * layer.window**2
            plans.append(
                PoolPlan(name, layer.window, layer.stride, scale, out_scale)
            )
            scale = out_scale
        else:
            raise ValueError(f"layer {name} has no integer form")
    return IntegerPlan(
        network=network,
        fp=fp,
        input_scale=Fraction(fp.input_scale),
        layers=tuple(plans),
        logit_scale=scale,
        constant_max=constant_max,
    )


# ---------------------------------------------------------------------------
# shadow evaluation: the exact integers the encrypted pipeline would hold
# ---------------------------------------------------------------------------

def _track(maxes: List[int], arr: np.ndarray) -> None:
    if arr.size:
        maxes.append(int(np.abs(arr).max()))


def run_shadow(plan: IntegerPlan, images, capture: bool = False) -> Dict:
    """Replay the plan's arithmetic over exact Python integers.

    Every value the encrypted evaluator materializes as a ciphertext — each
    linear-combination output, bias add, power of x, scaled term, partial
    sum — is computed here exactly and its centered magnitude tracked. The
    pipeline fits the plaintext modulus iff max_magnitude < t/2, reported as
    the `overflow` flag, never an exception.
    """
    from . import nn as _nn

    xb, _ = _nn._as_batch(plan.network, images)
    x = _quantize_array(xb, plan.input_scale).astype(object)
    per_layer = [
        {
            "layer": "input",
            "scale": plan.input_scale,
            "max_magnitude": int(np.abs(x).max()) if x.size else 0,
        }
    ]
    outputs: List[Tuple[str, np.ndarray]] = []
    for lp in plan.layers:
        maxes: List[int] = []
        if isinstance(lp, ConvPlan):
            f, c, k, _ = lp.weight.shape
            cols = _nn._im2col(x, k)
            w2 = lp.weight.reshape(f, c * k * k).astype(object)
            out = np.matmul(w2[None, :, :], cols)
            _track(maxes, out)  # the linear-combination ciphertexts
            out += np.array(lp.bias, dtype=object)[None, :, None]
            _track(maxes, out)  # after the bias add
            x = out.reshape(x.shape[0], f, x.shape[2], x.shape[3])
        elif isinstance(lp, ActPlan):
            powers = {1: x}
            for step in lp.ladder:
                powers[step.power] = powers[step.a] * powers[step.b]
                _track(maxes, powers[step.power])
            acc = None
            for k, a in lp.poly.terms:
                term = powers[k] * a
                _track(maxes, term)
                acc = term if acc is None else acc + term
                _track(maxes, acc)
            acc = acc + lp.poly.const
            _track(maxes, acc)
            x = acc
        elif isinstance(lp, PoolPlan):
            n, c, h, w = x.shape
            s = lp.stride
            r = x.reshape(n, c, h // s, s, w // s, s)
            acc = None
            for dy in range(lp.window):
                for dx in range(lp.window):
                    acc = r[:, :, :, dy, :, dx] if acc is None else acc + r[
                        :, :, :, dy, :, dx
                    ]
                    _track(maxes, acc)
            x = acc
        else:  # FCPlan
            xf = x.reshape(x.shape[0], -1)
            out = np.matmul(xf, lp.weight.T.astype(object))
            _track(maxes, out)
            out = out + np.array(lp.bias, dtype=object)[None, :]
            _track(maxes, out)
            x = out
        per_layer.append(
            {
                "layer": lp.name,
                "scale": lp.out_scale,
                "max_magnitude": max(maxes, default=0),
            }
        )
        if capture:
            outputs.append((lp.name, x.copy()))
    max_magnitude = max(e["max_magnitude"] for e in per_layer)
    t = plan.fp.t
    result = {
        "max_magnitude": max_magnitude,
        "per_layer_scales": per_layer,
        # plan constants (weights, biases, coefficients) are ring operands
        # too, so an oversized constant spoils the fit even when every
        # runtime value is small
        "overflow": bool(t) and 2 * max(max_magnitude, plan.constant_max) >= t,
        "constant_max": plan.constant_max,
        "logits": x,
        "logit_scale": plan.logit_scale,
    }
    if capture:
        result["layer_outputs"] = outputs
    return result


def shadow_eval(network, weights, image, fp: FixedPointConfig) -> Dict:
    """Quantize `weights` per `fp` and replay the inference over exact ints.

    Returns max_magnitude (largest centered runtime value), per_layer_scales
    (one entry per layer with its scale and peak), and overflow (True iff
    the pipeline — values or plan constants — does not fit the modulus).
    """
    return run_shadow(build_integer_plan(network, weights, fp), image)
