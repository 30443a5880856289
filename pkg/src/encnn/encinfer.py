"""Encrypted inference over SIMD-batched ciphertexts.

Data layout: one ciphertext per pixel position, with image i of the batch in
slot i. Every layer then acts on whole ciphertexts — a convolution is a
plain-weighted sum of pixel ciphertexts, mean pooling is three additions
with the 1/4 absorbed into the scale, an activation is a polynomial in one
ciphertext via a square-and-multiply power ladder — and the work for a full
batch costs the same as for one image. No slot ever interacts with another,
so no rotation keys are needed.

The client-side operations (`encrypt_batch`, `decrypt_logits`) hold keys;
the server path (`infer_encrypted` and the per-layer ops) only ever sees
ciphertexts, public evaluation keys, and the quantized model. Noise-budget
reporting needs the secret key and therefore lives behind an explicit
`debug_sk` argument that a real deployment would never pass.

Arithmetic is shared with `encoding.run_shadow` through `IntegerPlan`: both
paths execute the same integer operations in the same order, so while the
noise budget stays positive, decrypting any layer boundary yields exactly
the shadow evaluation's integers.

Memory: ciphertext residue planes are int64 in flight but every stored
ciphertext is compacted to int32 (residues sit below 2^31), halving the
footprint; and conv→act→pool runs fused, one output position at a time, so
the widest intermediate layer never materializes in full.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import she
from .encoding import (
    ActPlan,
    ConvPlan,
    FCPlan,
    FixedPointConfig,
    IntegerPlan,
    PoolPlan,
    _round_half_away,
    build_integer_plan,
)

__all__ = [
    "EncImageBatch",
    "EncLogits",
    "LayerReport",
    "encrypt_batch",
    "conv_layer_enc",
    "activation_layer_enc",
    "pool_layer_enc",
    "fc_layer_enc",
    "infer_encrypted",
    "decrypt_logits",
    "format_reports",
    "reports_csv",
]


# ---------------------------------------------------------------------------
# compact ciphertext storage
# ---------------------------------------------------------------------------

def _compact(ct: she.Ciphertext) -> np.ndarray:
    """Stack the (K, n) residue planes as one int32 (parts, K, n) array."""
    return np.stack([p.astype(np.int32) for p in ct.parts])


def _expand(params: she.HEParams, arr: np.ndarray, scale: Fraction) -> she.Ciphertext:
    return she.Ciphertext(
        params, [arr[i].astype(np.int64) for i in range(arr.shape[0])], scale
    )


def _retag(ct: she.Ciphertext, scale: Fraction) -> she.Ciphertext:
    """Reinterpret the same ciphertext at a new logical scale (exact)."""
    return she.Ciphertext(ct.params, ct.parts, scale)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EncImageBatch:
    """One ciphertext per pixel position; image i lives in slot i."""

    params: she.HEParams
    pixels: np.ndarray  # (H, W) object array of compact int32 ciphertexts
    batch_size: int
    scale: Fraction

    def pixel_ct(self, row: int, col: int) -> she.Ciphertext:
        return _expand(self.params, self.pixels[row, col], self.scale)


@dataclass(frozen=True, eq=False)
class EncLogits:
    """One ciphertext per class score; image i's scores live in slot i."""

    params: she.HEParams
    cts: Tuple[she.Ciphertext, ...]
    scale: Fraction
    batch_size: int

    def __post_init__(self):
        if not self.cts:
            raise ValueError("logits need at least one ciphertext")


@dataclass(frozen=True)
class LayerReport:
    """One pipeline stage: wall time, sampled noise budgets, output count."""

    layer: str
    description: str
    seconds: float
    budget_before: Optional[int]  # min over sampled ciphertexts; None without sk
    budget_after: Optional[int]
    ciphertexts: int


# row descriptions for the standard two-conv network, by (kind, ordinal)
_DESCRIPTIONS = {
    ("conv", 1): "1st convolution layer",
    ("conv", 2): "2nd convolutional layer",
    ("act", 1): "1st activation function",
    ("act", 2): "2nd activation function",
    ("pool", 1): "1st pooling layer",
    ("pool", 2): "2nd pooling layer",
    ("fc", 1): "1st fully connected layer",
    ("fc", 2): "2nd fully connected layer",
}

_KIND = {ConvPlan: "conv", ActPlan: "act", PoolPlan: "pool", FCPlan: "fc"}


def _ordinal(n: int) -> str:
    if n % 100 in (11, 12, 13):
        suffix = "th"
    else:
        suffix = {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def _describe(kind: str, ordinal: int) -> str:
    label = {"conv": "convolution layer", "act": "activation function",
             "pool": "pooling layer", "fc": "fully connected layer"}[kind]
    return _DESCRIPTIONS.get((kind, ordinal), f"{_ordinal(ordinal)} {label}")


# ---------------------------------------------------------------------------
# client side: encrypt / decrypt
# ---------------------------------------------------------------------------

def encrypt_batch(
    pk: she.PublicKey,
    images,
    fp: FixedPointConfig,
    rng: Optional[np.random.Generator] = None,
) -> EncImageBatch:
    """Encode pixels at the input scale and encrypt one ciphertext per pixel.

    `images` is one (H, W) image or an (N, H, W) stack with N <= n slots and
    values in [0, 1]. Unused slots hold zero.
    """
    params = pk.params
    rng = rng if rng is not None else np.random.default_rng()
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W) images, got shape {arr.shape}")
    n = params.ring.n
    if arr.shape[0] > n:
        raise ValueError(
            f"batch of {arr.shape[0]} images exceeds the {n} slots per ciphertext"
        )
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(
            f"pixel values must lie in [0, 1], got range "
            f"[{arr.min():.4g}, {arr.max():.4g}]"
        )
    scale = Fraction(fp.input_scale)
    batch, height, width = arr.shape
    pixels = np.empty((height, width), dtype=object)
    for r in range(height):
        for c in range(width):
            vals = [
                _round_half_away(Fraction(float(v)) * scale) for v in arr[:, r, c]
            ]
            pt = she.batch_encode(params, vals)
            pt.scale = scale
            pixels[r, c] = _compact(she.encrypt(pk, pt, rng))
    return EncImageBatch(params=params, pixels=pixels, batch_size=batch, scale=scale)


def decrypt_logits(
    sk: she.SecretKey, logits: EncLogits, fp: Optional[FixedPointConfig] = None
) -> Dict:
    """Decrypt, center, and decode the ten scores; argmax per slot image.

    The predicted class is computed on the exact centered integers, so ties
    resolve toward the lower class index with no float rounding involved.
    If any logit ciphertext's noise budget is exhausted the result carries
    budget_exhausted=True — the values may be garbage.
    """
    t = logits.params.t
    batch = logits.batch_size
    raw = np.empty((batch, len(logits.cts)), dtype=np.int64)
    exhausted = False
    for j, ct in enumerate(logits.cts):
        if she.noise_budget(ct, sk) <= 0:
            exhausted = True
        slots = she.batch_decode(she.decrypt(sk, ct))
        for i in range(batch):
            v = slots[i]
            raw[i, j] = v - t if 2 * v > t else v
    values = raw.astype(np.float64) / float(logits.scale)
    predicted = np.argmax(raw, axis=1)
    return {
        "values": values,
        "predicted_class": predicted,
        "budget_exhausted": exhausted,
    }


# ---------------------------------------------------------------------------
# server side: the four layer operations
# ---------------------------------------------------------------------------

def _check_scale(ct: she.Ciphertext, want: Fraction, layer: str) -> None:
    if ct.scale != want:
        raise she.ScaleMismatchError(
            f"layer {layer} expects input scale {want}, got {ct.scale}"
        )


def _conv_at(
    get: Callable[[int, int, int], she.Ciphertext],
    plan: ConvPlan,
    f: int,
    y: int,
    x: int,
    height: int,
    width: int,
) -> she.Ciphertext:
    """One convolution output: a plain-weighted sum over the window, plus bias.

    Window positions falling outside the image are the zero padding and
    contribute nothing, so they are simply absent from the sum. Zero weights
    inside the image are kept: the linear combination runs over every real
    input of the window.
    """
    _, channels, k, _ = plan.weight.shape
    pad = k // 2
    terms: List[Tuple[she.Ciphertext, int]] = []
    for c in range(channels):
        for dy in range(k):
            yy = y + dy - pad
            if not 0 <= yy < height:
                continue
            for dx in range(k):
                xx = x + dx - pad
                if 0 <= xx < width:
                    terms.append((get(c, yy, xx), int(plan.weight[f, c, dy, dx])))
    out = she.eval_linear(terms, plan.out_scale / plan.in_scale)
    return she.eval_add_scalar(out, plan.bias[f])


def conv_layer_enc(cts: np.ndarray, plan: ConvPlan) -> np.ndarray:
    """(C, H, W) ciphertext grid -> (F, H, W), plain multiplications only."""
    channels, height, width = cts.shape
    filters = plan.weight.shape[0]
    for ct in cts.ravel():
        _check_scale(ct, plan.in_scale, plan.name)
    out = np.empty((filters, height, width), dtype=object)
    for f in range(filters):
        for y in range(height):
            for x in range(width):
                out[f, y, x] = _conv_at(
                    lambda c, yy, xx: cts[c, yy, xx], plan, f, y, x, height, width
                )
    return out


def _act_one(
    ct: she.Ciphertext,
    plan: ActPlan,
    rlk: she.RelinKey,
    debug_sk: Optional[she.SecretKey] = None,
) -> she.Ciphertext:
    """Polynomial in one ciphertext: ladder the powers, then scale-matched sum.

    Power k carries scale in_scale^k; multiplying by its integer coefficient
    at auxiliary scale out_scale/in_scale^k lands every term on out_scale,
    so the additions type-check. The constant folds in last. With a debug
    secret key, budget exhaustion raises naming the power that died.
    """
    powers = {1: ct}
    for step in plan.ladder:
        prod = she.eval_mul(powers[step.a], powers[step.b], rlk)
        if debug_sk is not None and she.noise_budget(prod, debug_sk) <= 0:
            raise RuntimeError(
                f"noise budget exhausted computing x^{step.power} "
                f"(x^{step.a} * x^{step.b}) in {plan.name}"
            )
        powers[step.power] = prod
    acc: Optional[she.Ciphertext] = None
    for k, a in plan.poly.terms:
        term = she.eval_mul_scalar(powers[k], a, plan.out_scale / plan.in_scale**k)
        acc = term if acc is None else she.eval_add(acc, term)
    acc = she.eval_add_scalar(acc, plan.poly.const)
    if debug_sk is not None and she.noise_budget(acc, debug_sk) <= 0:
        raise RuntimeError(
            f"noise budget exhausted after the coefficient sum in {plan.name}"
        )
    return acc


def activation_layer_enc(
    cts: np.ndarray,
    plan: ActPlan,
    rlk: she.RelinKey,
    debug_sk: Optional[she.SecretKey] = None,
) -> np.ndarray:
    """Apply the quantized polynomial to every ciphertext in the array."""
    flat = cts.ravel()
    for ct in flat:
        _check_scale(ct, plan.in_scale, plan.name)
    out = np.empty(len(flat), dtype=object)
    for i, ct in enumerate(flat):
        out[i] = _act_one(ct, plan, rlk, debug_sk)
    return out.reshape(cts.shape)


def _pool_at(
    get: Callable[[int, int, int], she.Ciphertext],
    plan: PoolPlan,
    c: int,
    py: int,
    px: int,
) -> she.Ciphertext:
    """Sum the window in row-major order; reinterpret at window^2 x the scale."""
    acc: Optional[she.Ciphertext] = None
    for dy in range(plan.window):
        for dx in range(plan.window):
            ct = get(c, py * plan.stride + dy, px * plan.stride + dx)
            acc = ct if acc is None else she.eval_add(acc, ct)
    return _retag(acc, plan.out_scale)


def pool_layer_enc(cts: np.ndarray, plan: PoolPlan) -> np.ndarray:
    """(C, H, W) -> (C, H/s, W/s): three additions per output, no noise cost."""
    channels, height, width = cts.shape
    for ct in cts.ravel():
        _check_scale(ct, plan.in_scale, plan.name)
    s = plan.stride
    out = np.empty((channels, height // s, width // s), dtype=object)
    for c in range(channels):
        for py in range(height // s):
            for px in range(width // s):
                out[c, py, px] = _pool_at(
                    lambda ch, yy, xx: cts[ch, yy, xx], plan, c, py, px
                )
    return out


def _fc_at(
    inputs: Sequence[she.Ciphertext], plan: FCPlan, o: int
) -> she.Ciphertext:
    terms = [(ct, int(plan.weight[o, i])) for i, ct in enumerate(inputs)]
    out = she.eval_linear(terms, plan.out_scale / plan.in_scale)
    return she.eval_add_scalar(out, plan.bias[o])


def fc_layer_enc(cts: np.ndarray, plan: FCPlan) -> np.ndarray:
    """Flat (D,) ciphertexts -> (out,): one plain mult per input per output."""
    flat = list(cts.ravel())
    for ct in flat:
        _check_scale(ct, plan.in_scale, plan.name)
    out_dim = plan.weight.shape[0]
    out = np.empty(out_dim, dtype=object)
    for o in range(out_dim):
        out[o] = _fc_at(flat, plan, o)
    return out


# ---------------------------------------------------------------------------
# the fused pipeline executor
# ---------------------------------------------------------------------------

class _Meter:
    """Per-layer wall time, output counts, and sampled budgets."""

    def __init__(self, debug_sk: Optional[she.SecretKey], sample_limit: int = 2):
        self.debug_sk = debug_sk
        self.sample_limit = sample_limit
        self.seconds: Dict[str, float] = {}
        self.counts: Dict[str, int] = {}
        self.before: Dict[str, List[int]] = {}
        self.after: Dict[str, List[int]] = {}

    def add(self, name: str, dt: float, outputs: int = 1) -> None:
        self.seconds[name] = self.seconds.get(name, 0.0) + dt
        self.counts[name] = self.counts.get(name, 0) + outputs

    def wants(self, name: str) -> bool:
        return (
            self.debug_sk is not None
            and len(self.before.get(name, ())) < self.sample_limit
        )

    def sample(self, name: str, ct_in: she.Ciphertext, ct_out: she.Ciphertext) -> None:
        if not self.wants(name):
            return
        self.before.setdefault(name, []).append(she.noise_budget(ct_in, self.debug_sk))
        self.after.setdefault(name, []).append(she.noise_budget(ct_out, self.debug_sk))

    def report(self, name: str, kind: str, ordinal: int) -> LayerReport:
        return LayerReport(
            layer=name,
            description=_describe(kind, ordinal),
            seconds=self.seconds.get(name, 0.0),
            budget_before=min(self.before[name]) if name in self.before else None,
            budget_after=min(self.after[name]) if name in self.after else None,
            ciphertexts=self.counts.get(name, 0),
        )


def _segments(layers: Sequence) -> List[List]:
    """Group plan layers into fused units: conv/fc roots carry act/pool tails.

    Fusing means a convolution's full output map never exists at once: each
    window of outputs is produced, activated, pooled, and only the pooled
    ciphertext is kept.
    """
    segs: List[List] = []
    for lp in layers:
        if isinstance(lp, (ConvPlan, FCPlan)):
            segs.append([lp])
        else:
            if not segs:
                raise ValueError(
                    "the network must start with a convolution or fully "
                    "connected layer"
                )
            segs[-1].append(lp)
    for seg in segs:
        kinds = tuple(_KIND[type(lp)] for lp in seg)
        if kinds not in {
            ("conv",), ("conv", "act"), ("conv", "pool"), ("conv", "act", "pool"),
            ("fc",), ("fc", "act"),
        }:
            raise ValueError(f"unsupported layer grouping {kinds}")
    return segs


def _run_conv_segment(
    params: she.HEParams,
    store: np.ndarray,
    in_scale: Fraction,
    seg: List,
    rlk: she.RelinKey,
    meter: _Meter,
) -> Tuple[np.ndarray, Fraction]:
    conv: ConvPlan = seg[0]
    act: Optional[ActPlan] = next((p for p in seg if isinstance(p, ActPlan)), None)
    pool: Optional[PoolPlan] = next((p for p in seg if isinstance(p, PoolPlan)), None)
    channels, height, width = store.shape
    filters = conv.weight.shape[0]

    def get(c: int, yy: int, xx: int) -> she.Ciphertext:
        return _expand(params, store[c, yy, xx], in_scale)

    def one_position(f: int, y: int, x: int) -> she.Ciphertext:
        t0 = time.perf_counter()
        ct = _conv_at(get, conv, f, y, x, height, width)
        meter.add(conv.name, time.perf_counter() - t0)
        if meter.wants(conv.name):
            meter.sample(conv.name, get(0, y, x), ct)
        if act is not None:
            t0 = time.perf_counter()
            ct_a = _act_one(ct, act, rlk, meter.debug_sk)
            meter.add(act.name, time.perf_counter() - t0)
            meter.sample(act.name, ct, ct_a)
            ct = ct_a
        return ct

    if pool is None:
        out = np.empty((filters, height, width), dtype=object)
        for f in range(filters):
            for y in range(height):
                for x in range(width):
                    out[f, y, x] = _compact(one_position(f, y, x))
        return out, (act or conv).out_scale
    s = pool.stride
    out = np.empty((filters, height // s, width // s), dtype=object)
    for f in range(filters):
        for py in range(height // s):
            for px in range(width // s):
                acc = None
                first = None
                for dy in range(pool.window):
                    for dx in range(pool.window):
                        ct = one_position(f, py * s + dy, px * s + dx)
                        first = first if first is not None else ct
                        t0 = time.perf_counter()
                        acc = ct if acc is None else she.eval_add(acc, ct)
                        meter.add(pool.name, time.perf_counter() - t0, outputs=0)
                acc = _retag(acc, pool.out_scale)
                meter.add(pool.name, 0.0)  # count one pooled output
                meter.sample(pool.name, first, acc)
                out[f, py, px] = _compact(acc)
    return out, pool.out_scale


def _run_fc_segment(
    params: she.HEParams,
    store: np.ndarray,
    in_scale: Fraction,
    seg: List,
    rlk: she.RelinKey,
    meter: _Meter,
) -> Tuple[np.ndarray, Fraction]:
    fc: FCPlan = seg[0]
    act: Optional[ActPlan] = next((p for p in seg if isinstance(p, ActPlan)), None)
    flat = store.ravel()
    inputs = [_expand(params, arr, in_scale) for arr in flat]
    out_dim = fc.weight.shape[0]
    out = np.empty(out_dim, dtype=object)
    for o in range(out_dim):
        t0 = time.perf_counter()
        ct = _fc_at(inputs, fc, o)
        meter.add(fc.name, time.perf_counter() - t0)
        meter.sample(fc.name, inputs[0], ct)
        if act is not None:
            t0 = time.perf_counter()
            ct_a = _act_one(ct, act, rlk, meter.debug_sk)
            meter.add(act.name, time.perf_counter() - t0)
            meter.sample(act.name, ct, ct_a)
            ct = ct_a
        out[o] = _compact(ct)
    return out, (act or fc).out_scale


def _check_fit(plan: IntegerPlan, fit_report: Optional[Dict]) -> None:
    if fit_report is None:
        raise ValueError(
            "no overflow evidence: run encoding.shadow_eval on representative "
            "plaintext images for this model and configuration, and pass its "
            "report as fit_report"
        )
    if fit_report.get("overflow", True):
        raise ValueError(
            "encoding.shadow_eval reports overflow for this configuration: "
            "intermediate values would not fit the plaintext modulus; "
            "reduce scales or use a larger preset"
        )
    entries = fit_report.get("per_layer_scales", [])
    want = [(lp.name, lp.out_scale) for lp in plan.layers]
    got = [(e["layer"], e["scale"]) for e in entries[1:]]
    if got != want:
        raise ValueError(
            "fit_report does not match this quantization plan; rerun "
            "encoding.shadow_eval with the same model and FixedPointConfig"
        )


def infer_encrypted(
    model,
    batch: EncImageBatch,
    network,
    rlk: she.RelinKey,
    fp: FixedPointConfig,
    fit_report: Optional[Dict] = None,
    debug_sk: Optional[she.SecretKey] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> Dict:
    """The blind server's full forward pass: pixels in, logit ciphertexts out.

    Refuses to run without a non-overflowing shadow_eval report for the same
    quantization, because a modulus wraparound would silently corrupt every
    slot. Reports per-layer wall time and output counts; noise budgets are
    filled in only when a debug secret key is supplied.
    """
    if fp.t != batch.params.t:
        raise ValueError(
            f"FixedPointConfig.t = {fp.t} does not match the encryption "
            f"parameters' plaintext modulus t = {batch.params.t}; overflow "
            f"evidence must target the modulus the ciphertexts actually use"
        )
    plan = build_integer_plan(network, model, fp)
    if batch.scale != plan.input_scale:
        raise she.ScaleMismatchError(
            f"batch encrypted at scale {batch.scale}, plan expects "
            f"{plan.input_scale}"
        )
    if rlk.params_id != batch.params.params_id:
        raise ValueError("relinearization key does not match the batch parameters")
    _check_fit(plan, fit_report)

    meter = _Meter(debug_sk)
    store = batch.pixels[None, :, :]  # channel axis
    scale = plan.input_scale
    for seg in _segments(plan.layers):
        if progress is not None:
            progress(seg[0].name)
        if isinstance(seg[0], ConvPlan):
            store, scale = _run_conv_segment(
                batch.params, store, scale, seg, rlk, meter
            )
        else:
            store, scale = _run_fc_segment(
                batch.params, store, scale, seg, rlk, meter
            )
    cts = tuple(_expand(batch.params, arr, scale) for arr in store.ravel())
    logits = EncLogits(
        params=batch.params, cts=cts, scale=scale, batch_size=batch.batch_size
    )
    ordinals: Dict[str, int] = {}
    reports = []
    for lp in plan.layers:
        kind = _KIND[type(lp)]
        ordinals[kind] = ordinals.get(kind, 0) + 1
        reports.append(meter.report(lp.name, kind, ordinals[kind]))
    return {"logits": logits, "reports": reports}


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

_COLUMNS = ("Layer", "Description", "Time(s)", "NB-before", "NB-after")


def _report_cells(r: LayerReport) -> Tuple[str, ...]:
    return (
        r.layer,
        r.description,
        f"{r.seconds:.3f}",
        "-" if r.budget_before is None else str(r.budget_before),
        "-" if r.budget_after is None else str(r.budget_after),
    )


def format_reports(reports: Sequence[LayerReport]) -> str:
    """Aligned text table of the per-layer pipeline reports."""
    rows = [_COLUMNS] + [_report_cells(r) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(_COLUMNS))]
    lines = []
    for j, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def reports_csv(reports: Sequence[LayerReport]) -> str:
    """Comma-separated form of the same table."""
    lines = [",".join(_COLUMNS)]
    for r in reports:
        lines.append(",".join(_report_cells(r)))
    return "\n".join(lines)
