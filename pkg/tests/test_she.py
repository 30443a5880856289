"""Tests for the somewhat-homomorphic encryption scheme.

Oracle policy: homomorphic results are checked against plain mod-t arithmetic
computed on an independent route — slotwise integer vectors for batched data,
and `polyring.ring_mul` (itself validated against schoolbook and Kronecker
oracles in test_polyring) for coefficient-domain products.
"""

import math
import struct

import numpy as np
import pytest
import sympy

from encnn import she
from encnn.polyring import RingElement, RingParams, find_ntt_primes, ring_mul


# ---------------------------------------------------------------------------
# fixtures: one keyset per preset, shared across the module
# ---------------------------------------------------------------------------

_cache = {}


def keyset(name: str):
    if name not in _cache:
        params = she.get_preset(name)
        ks = she.keygen(params, np.random.default_rng(1000 + len(name)))
        _cache[name] = (params, ks)
    return _cache[name]


def rand_plaintext(params, rng, scale=1):
    ring_t = RingParams(params.ring.n, params.t)
    coeffs = [int(v) % params.t for v in rng.integers(0, 1 << 62, params.ring.n)]
    from fractions import Fraction

    return she.Plaintext(RingElement(ring_t, coeffs), scale=Fraction(scale))


def coeffs_of(pt):
    return [int(c) for c in pt.poly.coeffs]


def t_ring(params):
    return RingParams(params.ring.n, params.t)


# ---------------------------------------------------------------------------
# keygen / encrypt / decrypt round trips
# ---------------------------------------------------------------------------

def test_roundtrip_100_random_plaintexts_small():
    params, ks = keyset("small")
    rng = np.random.default_rng(11)
    for _ in range(100):
        pt = rand_plaintext(params, rng)
        ct = she.encrypt(ks.pk, pt, rng)
        dec = she.decrypt(ks.sk, ct)
        assert coeffs_of(dec) == coeffs_of(pt)
        assert not dec.flagged


def test_keygen_different_seeds_give_different_secrets():
    params = she.get_preset("small")
    a = she.keygen(params, np.random.default_rng(1))
    b = she.keygen(params, np.random.default_rng(2))
    assert list(a.sk.poly.coeffs) != list(b.sk.poly.coeffs)


def test_keyset_components_share_params():
    params, ks = keyset("small")
    assert ks.pk.params_id == ks.sk.params_id == ks.rlk.params_id == params.params_id


def test_public_key_is_pair_of_ring_elements():
    params, ks = keyset("small")
    b, a = ks.pk.as_ring_elements()
    assert isinstance(b, RingElement) and isinstance(a, RingElement)
    # b + a*s = e: small centered error, far below q/2
    s = ks.sk.poly
    e = b + ring_mul(a, s)
    q = params.ring.q
    bound = 6 * 3.2 * 2  # truncated gaussian tail
    assert all(int(c) < bound or q - int(c) < bound for c in e.coeffs)


def test_relin_key_is_sequence_of_ring_element_pairs():
    params, ks = keyset("small")
    pairs = ks.rlk.as_ring_element_pairs()
    assert len(pairs) >= 1
    for k0, k1 in pairs:
        assert isinstance(k0, RingElement) and isinstance(k1, RingElement)


def test_fresh_medium_ciphertext_has_positive_budget():
    params, ks = keyset("medium")
    rng = np.random.default_rng(12)
    ct = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    assert she.noise_budget(ct, ks.sk) > 0


def test_zero_message_roundtrip():
    params, ks = keyset("small")
    rng = np.random.default_rng(13)
    pt = she.Plaintext(RingElement.zero(t_ring(params)))
    dec = she.decrypt(ks.sk, she.encrypt(ks.pk, pt, rng))
    assert coeffs_of(dec) == [0] * params.ring.n


def test_all_coefficients_t_minus_1_roundtrip():
    params, ks = keyset("small")
    rng = np.random.default_rng(14)
    pt = she.Plaintext(RingElement(t_ring(params), [params.t - 1] * params.ring.n))
    dec = she.decrypt(ks.sk, she.encrypt(ks.pk, pt, rng))
    assert coeffs_of(dec) == [params.t - 1] * params.ring.n


def test_1000_roundtrips_small_all_exact():
    params, ks = keyset("small")
    rng = np.random.default_rng(15)
    for _ in range(1000):
        pt = rand_plaintext(params, rng)
        dec = she.decrypt(ks.sk, she.encrypt(ks.pk, pt, rng))
        assert coeffs_of(dec) == coeffs_of(pt)


def test_encryption_is_reproducible_with_seeded_rng():
    params, ks = keyset("small")
    pt = rand_plaintext(params, np.random.default_rng(16))
    c1 = she.encrypt(ks.pk, pt, np.random.default_rng(99))
    c2 = she.encrypt(ks.pk, pt, np.random.default_rng(99))
    assert she.serialize_ciphertext(c1) == she.serialize_ciphertext(c2)


def test_decrypt_accepts_three_part_ciphertexts():
    # a zero third part encrypts the same message; decrypt must process it
    params, ks = keyset("small")
    rng = np.random.default_rng(17)
    pt = rand_plaintext(params, rng)
    ct = she.encrypt(ks.pk, pt, rng)
    ctx = she._ctx(params)
    zero = np.zeros((ctx.K, ctx.n), dtype=np.int64)
    ct3 = she.Ciphertext(params, [ct.parts[0], ct.parts[1], zero], ct.scale)
    assert coeffs_of(she.decrypt(ks.sk, ct3)) == coeffs_of(pt)


def test_ciphertext_needs_at_least_two_parts():
    params, ks = keyset("small")
    ctx = she._ctx(params)
    with pytest.raises(ValueError, match="2 parts"):
        she.Ciphertext(params, [np.zeros((ctx.K, ctx.n), dtype=np.int64)], 1)


# ---------------------------------------------------------------------------
# addition
# ---------------------------------------------------------------------------

def test_add_with_encryption_of_zero_is_identity():
    params, ks = keyset("small")
    rng = np.random.default_rng(20)
    pt = rand_plaintext(params, rng)
    ct = she.encrypt(ks.pk, pt, rng)
    zero = she.encrypt(ks.pk, she.Plaintext(RingElement.zero(t_ring(params))), rng)
    assert coeffs_of(she.decrypt(ks.sk, she.eval_add(ct, zero))) == coeffs_of(pt)


def test_add_matches_plaintext_oracle_100_trials():
    params, ks = keyset("small")
    rng = np.random.default_rng(21)
    t = params.t
    for _ in range(100):
        m1 = rng.integers(0, t, params.ring.n, dtype=np.int64)
        m2 = rng.integers(0, t, params.ring.n, dtype=np.int64)
        c1 = she.encrypt(ks.pk, she.Plaintext(RingElement(t_ring(params), list(map(int, m1)))), rng)
        c2 = she.encrypt(ks.pk, she.Plaintext(RingElement(t_ring(params), list(map(int, m2)))), rng)
        got = coeffs_of(she.decrypt(ks.sk, she.eval_add(c1, c2)))
        want = [int(v) for v in (m1 + m2) % t]  # sums < 2**21: exact in int64
        assert got == want


def test_add_slotwise_100_trials():
    params, ks = keyset("small")
    rng = np.random.default_rng(22)
    t = params.t
    n = params.ring.n
    for _ in range(100):
        u = rng.integers(0, t, n, dtype=np.int64)
        v = rng.integers(0, t, n, dtype=np.int64)
        cu = she.encrypt(ks.pk, she.batch_encode(params, list(map(int, u))), rng)
        cv = she.encrypt(ks.pk, she.batch_encode(params, list(map(int, v))), rng)
        got = she.batch_decode(she.decrypt(ks.sk, she.eval_add(cu, cv)))
        assert got == [int(x) for x in (u + v) % t]


def test_add_plain_matches_oracle():
    params, ks = keyset("small")
    rng = np.random.default_rng(23)
    t = params.t
    for _ in range(20):
        pt1 = rand_plaintext(params, rng)
        pt2 = rand_plaintext(params, rng)
        ct = she.encrypt(ks.pk, pt1, rng)
        got = coeffs_of(she.decrypt(ks.sk, she.eval_add_plain(ct, pt2)))
        want = [(a + b) % t for a, b in zip(coeffs_of(pt1), coeffs_of(pt2))]
        assert got == want


def test_sub_matches_oracle():
    params, ks = keyset("small")
    rng = np.random.default_rng(24)
    t = params.t
    pt1 = rand_plaintext(params, rng)
    pt2 = rand_plaintext(params, rng)
    c1 = she.encrypt(ks.pk, pt1, rng)
    c2 = she.encrypt(ks.pk, pt2, rng)
    got = coeffs_of(she.decrypt(ks.sk, she.eval_sub(c1, c2)))
    want = [(a - b) % t for a, b in zip(coeffs_of(pt1), coeffs_of(pt2))]
    assert got == want


def test_add_scale_mismatch_raises():
    params, ks = keyset("small")
    rng = np.random.default_rng(25)
    c1 = she.encrypt(ks.pk, rand_plaintext(params, rng, scale=1), rng)
    c2 = she.encrypt(ks.pk, rand_plaintext(params, rng, scale=2), rng)
    with pytest.raises(she.ScaleMismatchError):
        she.eval_add(c1, c2)
    with pytest.raises(she.ScaleMismatchError):
        she.eval_add_plain(c1, rand_plaintext(params, rng, scale=2))


# ---------------------------------------------------------------------------
# multiplication
# ---------------------------------------------------------------------------

def _poly_product_mod_t(params, m1, m2):
    """Independent oracle: negacyclic product mod t via the ring module."""
    ring = t_ring(params)
    return [
        int(c)
        for c in ring_mul(RingElement(ring, m1), RingElement(ring, m2)).coeffs
    ]


def test_mul_by_encrypted_one_is_identity():
    params, ks = keyset("small")
    rng = np.random.default_rng(30)
    pt = rand_plaintext(params, rng)
    ct = she.encrypt(ks.pk, pt, rng)
    one = she.encrypt(ks.pk, she.Plaintext(RingElement.one(t_ring(params))), rng)
    got = coeffs_of(she.decrypt(ks.sk, she.eval_mul(ct, one, ks.rlk)))
    assert got == coeffs_of(pt)


def test_mul_matches_polynomial_oracle_100_trials():
    params, ks = keyset("small")
    rng = np.random.default_rng(31)
    t = params.t
    for _ in range(100):
        m1 = [int(v) for v in rng.integers(0, t, params.ring.n)]
        m2 = [int(v) for v in rng.integers(0, t, params.ring.n)]
        c1 = she.encrypt(ks.pk, she.Plaintext(RingElement(t_ring(params), m1)), rng)
        c2 = she.encrypt(ks.pk, she.Plaintext(RingElement(t_ring(params), m2)), rng)
        got = coeffs_of(she.decrypt(ks.sk, she.eval_mul(c1, c2, ks.rlk)))
        assert got == _poly_product_mod_t(params, m1, m2)


def test_mul_plain_matches_oracle_and_multiplies_scale():
    params, ks = keyset("small")
    rng = np.random.default_rng(32)
    from fractions import Fraction

    for _ in range(20):
        pt1 = rand_plaintext(params, rng, scale=3)
        pt2 = rand_plaintext(params, rng, scale=5)
        ct = she.encrypt(ks.pk, pt1, rng)
        out = she.eval_mul_plain(ct, pt2)
        assert out.scale == Fraction(15)
        got = coeffs_of(she.decrypt(ks.sk, out))
        assert got == _poly_product_mod_t(params, coeffs_of(pt1), coeffs_of(pt2))


def test_mul_output_scale_is_product_of_input_scales():
    params, ks = keyset("small")
    rng = np.random.default_rng(33)
    from fractions import Fraction

    c1 = she.encrypt(ks.pk, rand_plaintext(params, rng, scale=4), rng)
    c2 = she.encrypt(ks.pk, rand_plaintext(params, rng, scale=6), rng)
    assert she.eval_mul(c1, c2, ks.rlk).scale == Fraction(24)


def test_mul_budget_below_min_of_inputs_20_trials():
    params, ks = keyset("small")
    rng = np.random.default_rng(34)
    for _ in range(20):
        c1 = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
        c2 = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
        before = min(she.noise_budget(c1, ks.sk), she.noise_budget(c2, ks.sk))
        after = she.noise_budget(she.eval_mul(c1, c2, ks.rlk), ks.sk)
        assert after < before


def test_mul_requires_matching_relin_key():
    params, ks = keyset("small")
    rng = np.random.default_rng(35)
    other_params, other_ks = keyset("medium")
    c1 = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    with pytest.raises(ValueError, match="mismatch"):
        she.eval_mul(c1, c1, other_ks.rlk)


# ---------------------------------------------------------------------------
# noise budget
# ---------------------------------------------------------------------------

def test_budget_staircase_non_increasing():
    params, ks = keyset("small")
    rng = np.random.default_rng(40)
    ct = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    budgets = [she.noise_budget(ct, ks.sk)]
    while budgets[-1] > 0 and len(budgets) < 10:
        ct = she.eval_mul(ct, ct, ks.rlk)
        budgets.append(she.noise_budget(ct, ks.sk))
    assert budgets == sorted(budgets, reverse=True)
    assert budgets[-1] == 0  # the chain does exhaust


def test_exhausted_budget_decrypt_differs_from_oracle_and_is_flagged():
    params, ks = keyset("small")
    rng = np.random.default_rng(41)
    t = params.t
    n = params.ring.n
    u = [int(v) for v in rng.integers(2, t, n)]
    ct = she.encrypt(ks.pk, she.batch_encode(params, u), rng)
    oracle = list(u)
    while she.noise_budget(ct, ks.sk) > 0:
        ct = she.eval_mul(ct, ct, ks.rlk)
        oracle = [(x * x) % t for x in oracle]
    dec = she.decrypt(ks.sk, ct)
    assert dec.flagged
    assert she.batch_decode(dec) != oracle


def test_budget_key_mismatch_raises():
    params, ks = keyset("small")
    rng = np.random.default_rng(42)
    _, ks_med = keyset("medium")
    ct = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    with pytest.raises(ValueError, match="mismatch"):
        she.noise_budget(ct, ks_med.sk)


def test_add_consumes_under_2_bits_mul_over_5_bits_at_medium():
    params, ks = keyset("medium")
    rng = np.random.default_rng(43)
    cts = [she.encrypt(ks.pk, rand_plaintext(params, rng), rng) for _ in range(2)]
    # average add consumption over a 16-add chain
    acc = cts[0]
    start = she.noise_budget(acc, ks.sk)
    for _ in range(16):
        acc = she.eval_add(acc, cts[1])
    add_cost = (start - she.noise_budget(acc, ks.sk)) / 16
    assert add_cost < 2

    before = min(she.noise_budget(c, ks.sk) for c in cts)
    mul_cost = before - she.noise_budget(she.eval_mul(cts[0], cts[1], ks.rlk), ks.sk)
    assert mul_cost > 5


def test_plain_multiply_consumes_less_than_ciphertext_multiply():
    params, ks = keyset("medium")
    rng = np.random.default_rng(44)
    pt = rand_plaintext(params, rng)
    c1 = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    c2 = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    b0 = she.noise_budget(c1, ks.sk)
    plain_drop = b0 - she.noise_budget(she.eval_mul_plain(c1, pt), ks.sk)
    ct_drop = b0 - she.noise_budget(she.eval_mul(c1, c2, ks.rlk), ks.sk)
    assert plain_drop < ct_drop


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def test_batch_encode_decode_identity():
    for name in ("small", "medium"):
        params, _ = keyset(name)
        vals = [i % params.t for i in range(params.ring.n)]
        assert she.batch_decode(she.batch_encode(params, vals)) == vals


def test_batch_encode_rejects_too_many_values():
    params, _ = keyset("small")
    with pytest.raises(ValueError, match="at most"):
        she.batch_encode(params, [0] * (params.ring.n + 1))


def test_batch_encode_pads_and_reduces_mod_t():
    params, _ = keyset("small")
    got = she.batch_decode(she.batch_encode(params, [params.t + 5, 3]))
    assert got[0] == 5 and got[1] == 3
    assert all(v == 0 for v in got[2:])


def test_slotwise_product_50_trials():
    params, ks = keyset("small")
    rng = np.random.default_rng(50)
    t = params.t
    n = params.ring.n
    for _ in range(50):
        u = rng.integers(0, t, n, dtype=np.int64)
        v = rng.integers(0, t, n, dtype=np.int64)
        cu = she.encrypt(ks.pk, she.batch_encode(params, list(map(int, u))), rng)
        cv = she.encrypt(ks.pk, she.batch_encode(params, list(map(int, v))), rng)
        got = she.batch_decode(she.decrypt(ks.sk, she.eval_mul(cu, cv, ks.rlk)))
        want = [int(x) for x in (u * v) % t]  # products < 2**40: exact in int64
        assert got == want


def test_constant_vector_equals_scalar_plaintext():
    params, ks = keyset("small")
    rng = np.random.default_rng(51)
    c = 7
    vec_pt = she.batch_encode(params, [c] * params.ring.n)
    scalar_pt = she.Plaintext(
        RingElement(t_ring(params), [c] + [0] * (params.ring.n - 1))
    )
    # the two plaintext polynomials are literally identical
    assert coeffs_of(vec_pt) == coeffs_of(scalar_pt)
    # and eval ops agree between the two forms
    ct = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    a = coeffs_of(she.decrypt(ks.sk, she.eval_mul_plain(ct, vec_pt)))
    b = coeffs_of(she.decrypt(ks.sk, she.eval_mul_plain(ct, scalar_pt)))
    assert a == b


def test_batching_is_ring_isomorphism():
    # plaintext-side: encode(u) op encode(v) decodes to the slotwise op, exactly
    params, _ = keyset("small")
    rng = np.random.default_rng(52)
    t = params.t
    n = params.ring.n
    u = rng.integers(0, t, n, dtype=np.int64)
    v = rng.integers(0, t, n, dtype=np.int64)
    pu = she.batch_encode(params, list(map(int, u))).poly
    pv = she.batch_encode(params, list(map(int, v))).poly
    prod = she.Plaintext(ring_mul(pu, pv))
    summ = she.Plaintext(pu + pv)
    assert she.batch_decode(prod) == [int(x) for x in (u * v) % t]
    assert she.batch_decode(summ) == [int(x) for x in (u + v) % t]


# ---------------------------------------------------------------------------
# randomized homomorphism suite
# ---------------------------------------------------------------------------

def _run_random_circuits(name, circuits, seed):
    """Random circuits built from the four eval ops, sized to the preset.

    Each ciphertext tracks (slot oracle, ct-mul depth, estimated noise bits
    used). Op costs: a ct-ct multiply consumes about t_bits + log2(n) + slack;
    a scalar plain-multiply by c consumes about log2(c) (a constant vector is
    the monomial c, so the noise scales by c with no convolution growth);
    adds cost about a bit. The planner only applies ops whose estimated total
    stays inside the fresh budget; the decrypted circuit output must then
    match the slot oracle exactly, with budget still positive.
    """
    params, ks = keyset(name)
    depth_cap = she.PRESET_DEPTH[name]
    rng = np.random.default_rng(seed)
    t = params.t
    n = params.ring.n
    mul_cost = t.bit_length() + n.bit_length() + 6
    fresh = None

    for _ in range(circuits):
        pool = []
        for _ in range(3):
            vals = [int(x) for x in rng.integers(0, t, n)]
            ct = she.encrypt(ks.pk, she.batch_encode(params, vals), rng)
            pool.append((ct, np.array(vals, dtype=object), 0, 0.0))
        if fresh is None:
            fresh = she.noise_budget(pool[0][0], ks.sk)
        allow = fresh - 8
        muls_done = 0
        for _ in range(int(rng.integers(3, 8))):
            op = rng.choice(["add", "mul", "add_plain", "mul_plain", "mul"])
            i = int(rng.integers(0, len(pool)))
            j = int(rng.integers(0, len(pool)))
            ct_i, or_i, d_i, u_i = pool[i]
            ct_j, or_j, d_j, u_j = pool[j]
            if op == "mul":
                used = max(u_i, u_j) + mul_cost
                if max(d_i, d_j) >= depth_cap or used > allow:
                    continue
                out = she.eval_mul(ct_i, ct_j, ks.rlk)
                pool.append((out, (or_i * or_j) % t, max(d_i, d_j) + 1, used))
                muls_done += 1
            elif op == "add":
                used = max(u_i, u_j) + 1
                if used > allow:
                    continue
                pool.append(
                    (she.eval_add(ct_i, ct_j), (or_i + or_j) % t, max(d_i, d_j), used)
                )
            elif op == "add_plain":
                if u_i + 1 > allow:
                    continue
                vals = [int(x) for x in rng.integers(0, t, n)]
                pt = she.batch_encode(params, vals)
                pool.append(
                    (
                        she.eval_add_plain(ct_i, pt),
                        (or_i + np.array(vals, dtype=object)) % t,
                        d_i,
                        u_i + 1,
                    )
                )
            else:  # scalar plain multiply
                c = int(rng.integers(2, 9))
                if u_i + c.bit_length() + 1 > allow:
                    continue
                pt = she.batch_encode(params, [c] * n)
                pool.append(
                    (
                        she.eval_mul_plain(ct_i, pt),
                        (or_i * c) % t,
                        d_i,
                        u_i + c.bit_length() + 1,
                    )
                )
        if muls_done == 0:  # every circuit exercises at least one ct-ct mul
            ct_i, or_i, d_i, u_i = pool[0]
            pool.append(
                (she.eval_mul(ct_i, ct_i, ks.rlk), (or_i * or_i) % t, d_i + 1, u_i + mul_cost)
            )
        for ct, oracle, _, _ in pool[3:]:  # every produced node decrypts exactly
            assert she.noise_budget(ct, ks.sk) > 0
            got = she.batch_decode(she.decrypt(ks.sk, ct))
            assert got == [int(x) for x in oracle]


def test_homomorphism_random_circuits_small():
    _run_random_circuits("small", 50, seed=60)


@pytest.mark.slow
def test_homomorphism_random_circuits_medium():
    _run_random_circuits("medium", 50, seed=61)


@pytest.mark.slow
def test_homomorphism_random_circuits_large():
    _run_random_circuits("large", 50, seed=62)


# ---------------------------------------------------------------------------
# parameter validation
# ---------------------------------------------------------------------------

def _ring_of_primes(n, bits, count):
    primes = find_ntt_primes(bits, n, count)
    return RingParams(n, math.prod(primes), primes=tuple(primes))


def _batching_prime(bits, n):
    step = 2 * n
    p = ((1 << bits) - 2) // step * step + 1
    while not sympy.isprime(p):
        p -= step
    return p


def test_params_error_names_the_violated_security_bound():
    ring = _ring_of_primes(2048, 29, 3)  # 87-bit q, cap is 54
    t = _batching_prime(16, 2048)
    with pytest.raises(ValueError, match="54"):
        she.HEParams(ring=ring, t=t, security_level=128)


def test_params_error_at_192_bit_level():
    ring = _ring_of_primes(4096, 29, 3)  # 87-bit q: fine at 128 (cap 109), not at 192 (cap 75)
    t = _batching_prime(20, 4096)
    she.HEParams(ring=ring, t=t, security_level=128)
    with pytest.raises(ValueError, match="75"):
        she.HEParams(ring=ring, t=t, security_level=192)


def test_params_reject_composite_t():
    ring = _ring_of_primes(4096, 29, 2)
    composite = 8192 * 8192 + 1  # == 1 mod 2n but 67108865 = 5 * 13421773
    assert not sympy.isprime(composite)
    with pytest.raises(ValueError, match="prime"):
        she.HEParams(ring=ring, t=composite)


def test_params_reject_non_batching_t():
    # prime that is 1 mod 8192 (n=4096 batching) but not 1 mod 16384 (n=8192)
    n = 8192
    k = 1
    while True:
        t = 8192 * k + 1
        if t % 16384 != 1 and sympy.isprime(t):
            break
        k += 2
    ring8k = _ring_of_primes(8192, 30, 2)
    with pytest.raises(ValueError, match="mod 2n"):
        she.HEParams(ring=ring8k, t=t)


def test_params_reject_bad_sigma_and_level():
    ring = _ring_of_primes(4096, 29, 2)
    t = _batching_prime(20, 4096)
    with pytest.raises(ValueError, match="sigma"):
        she.HEParams(ring=ring, t=t, sigma=0.0)
    with pytest.raises(ValueError, match="security_level"):
        she.HEParams(ring=ring, t=t, security_level=100)


def test_params_require_transform_friendly_ring():
    with pytest.raises(ValueError, match="prime"):
        she.HEParams(ring=RingParams(4096, 12289 * 40961), t=_batching_prime(20, 4096))


def test_params_mismatch_between_objects_raises():
    params, ks = keyset("small")
    params_m, ks_m = keyset("medium")
    rng = np.random.default_rng(70)
    ct = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    ct_m = she.encrypt(ks_m.pk, rand_plaintext(params_m, rng), rng)
    with pytest.raises(ValueError, match="mismatch"):
        she.decrypt(ks_m.sk, ct)
    with pytest.raises(ValueError, match="mismatch"):
        she.eval_add(ct, ct_m)
    with pytest.raises(ValueError, match="ring mismatch"):
        she.encrypt(ks.pk, rand_plaintext(params_m, rng), rng)


def test_preset_names_and_depths():
    assert set(she.PRESET_NAMES) == {"small", "medium", "large"}
    assert she.PRESET_DEPTH == {"small": 1, "medium": 2, "large": 3}
    with pytest.raises(ValueError, match="unknown preset"):
        she.get_preset("huge")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_ciphertext_serialization_layout_and_byte_exact_roundtrip():
    params, ks = keyset("small")
    rng = np.random.default_rng(80)
    from fractions import Fraction

    pt = rand_plaintext(params, rng)
    pt.scale = Fraction(256, 3)
    ct = she.encrypt(ks.pk, pt, rng)
    blob = she.serialize_ciphertext(ct)

    assert blob[:4] == b"BFC1"
    assert blob[4:12] == params.params_id
    count, num, den = struct.unpack_from("<HQQ", blob, 12)
    assert count == 2 and num == 256 and den == 3
    K, n = len(params.ring.primes), params.ring.n
    assert len(blob) == 30 + count * K * n * 4

    ct2 = she.deserialize_ciphertext(params, blob)
    assert she.serialize_ciphertext(ct2) == blob
    assert ct2.scale == Fraction(256, 3)
    assert coeffs_of(she.decrypt(ks.sk, ct2)) == coeffs_of(pt)


def test_ciphertext_deserialization_rejects_bad_input():
    params, ks = keyset("small")
    rng = np.random.default_rng(81)
    blob = she.serialize_ciphertext(she.encrypt(ks.pk, rand_plaintext(params, rng), rng))
    with pytest.raises(ValueError, match="magic"):
        she.deserialize_ciphertext(params, b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="parameters"):
        she.deserialize_ciphertext(she.get_preset("medium"), blob)
    with pytest.raises(ValueError, match="length"):
        she.deserialize_ciphertext(params, blob[:-8])


def test_ciphertext_scale_must_fit_wire_format():
    params, ks = keyset("small")
    rng = np.random.default_rng(82)
    from fractions import Fraction

    ct = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    ct.scale = Fraction(1 << 70)
    with pytest.raises(ValueError, match="64-bit"):
        she.serialize_ciphertext(ct)


def test_key_serialization_byte_exact_and_functional():
    params, ks = keyset("small")
    rng = np.random.default_rng(83)

    for key in (ks.pk, ks.sk, ks.rlk):
        blob = she.serialize_key(key)
        assert blob[:4] == b"BFK1"
        assert blob[4:12] == params.params_id
        restored = she.deserialize_key(params, blob)
        assert she.serialize_key(restored) == blob

    pk2 = she.deserialize_key(params, she.serialize_key(ks.pk))
    sk2 = she.deserialize_key(params, she.serialize_key(ks.sk))
    rlk2 = she.deserialize_key(params, she.serialize_key(ks.rlk))

    pt = rand_plaintext(params, rng)
    ct = she.encrypt(pk2, pt, rng)
    assert coeffs_of(she.decrypt(sk2, ct)) == coeffs_of(pt)
    c2 = she.encrypt(pk2, pt, rng)
    prod = she.eval_mul(ct, c2, rlk2)
    assert coeffs_of(she.decrypt(ks.sk, prod)) == _poly_product_mod_t(
        params, coeffs_of(pt), coeffs_of(pt)
    )


def test_key_deserialization_rejects_bad_input():
    params, ks = keyset("small")
    blob = she.serialize_key(ks.pk)
    with pytest.raises(ValueError, match="magic"):
        she.deserialize_key(params, b"ZZZZ" + blob[4:])
    with pytest.raises(ValueError, match="parameters"):
        she.deserialize_key(she.get_preset("medium"), blob)


# ---------------------------------------------------------------------------
# scalar fast-path operations (constant-vector multiply/add, linear forms)
# ---------------------------------------------------------------------------

def test_mul_scalar_matches_constant_vector_plain_mul():
    params, ks = keyset("small")
    rng = np.random.default_rng(600)
    pt = rand_plaintext(params, rng)
    ct = she.encrypt(ks.pk, pt, rng)
    from fractions import Fraction

    fast = she.eval_mul_scalar(ct, 7, Fraction(3))
    slow = she.eval_mul_plain(ct, she.batch_encode(params, [7] * params.ring.n))
    assert coeffs_of(she.decrypt(ks.sk, fast)) == coeffs_of(she.decrypt(ks.sk, slow))
    assert fast.scale == ct.scale * 3
    want = [(7 * c) % params.t for c in coeffs_of(pt)]
    assert coeffs_of(she.decrypt(ks.sk, fast)) == want


def test_mul_scalar_negative_weight_exact_and_cheap():
    params, ks = keyset("medium")
    rng = np.random.default_rng(601)
    pt = rand_plaintext(params, rng)
    ct = she.encrypt(ks.pk, pt, rng)
    before = she.noise_budget(ct, ks.sk)
    out = she.eval_mul_scalar(ct, -5)
    assert coeffs_of(she.decrypt(ks.sk, out)) == [
        (-5 * c) % params.t for c in coeffs_of(pt)
    ]
    drop = before - she.noise_budget(out, ks.sk)
    assert drop <= 4  # |w|=5 costs ~log2(5) bits, not ~t bits


def test_mul_plain_with_negative_centered_coefficients_is_cheap():
    # the plaintext vector [t-5, t-5, ...] represents -5 in every slot; the
    # centered reduction must keep the noise multiplier at 5, not t-5
    params, ks = keyset("medium")
    rng = np.random.default_rng(602)
    pt = rand_plaintext(params, rng)
    ct = she.encrypt(ks.pk, pt, rng)
    before = she.noise_budget(ct, ks.sk)
    out = she.eval_mul_plain(ct, she.batch_encode(params, [params.t - 5] * params.ring.n))
    assert coeffs_of(she.decrypt(ks.sk, out)) == [
        (-5 * c) % params.t for c in coeffs_of(pt)
    ]
    assert before - she.noise_budget(out, ks.sk) <= 6


def test_mul_scalar_range_check():
    params, ks = keyset("small")
    rng = np.random.default_rng(603)
    ct = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    with pytest.raises(ValueError, match="centered range"):
        she.eval_mul_scalar(ct, params.t)


def test_add_scalar_slotwise():
    params, ks = keyset("small")
    rng = np.random.default_rng(604)
    values = [int(v) for v in rng.integers(0, params.t, params.ring.n)]
    ct = she.encrypt(ks.pk, she.batch_encode(params, values), rng)
    for c in (9, -9):
        out = she.eval_add_scalar(ct, c)
        got = [int(v) for v in she.batch_decode(she.decrypt(ks.sk, out))]
        assert got == [(v + c) % params.t for v in values]


def test_eval_linear_matches_slotwise_dot_product():
    params, ks = keyset("small")
    rng = np.random.default_rng(605)
    from fractions import Fraction

    cts, vecs, weights = [], [], []
    for k in range(10):
        vals = [int(v) for v in rng.integers(0, params.t, params.ring.n)]
        vecs.append(vals)
        cts.append(she.encrypt(ks.pk, she.batch_encode(params, vals), rng))
        weights.append(int(rng.integers(-60, 60)))
    out = she.eval_linear(list(zip(cts, weights)), Fraction(1, 32))
    got = [int(v) for v in she.batch_decode(she.decrypt(ks.sk, out))]
    want = [
        sum(w * vec[j] for w, vec in zip(weights, vecs)) % params.t
        for j in range(params.ring.n)
    ]
    assert got == want
    assert out.scale == Fraction(1, 32)
    assert she.noise_budget(out, ks.sk) > 0


def test_eval_linear_validation():
    params, ks = keyset("small")
    rng = np.random.default_rng(606)
    ct = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    ct2 = she.encrypt(ks.pk, rand_plaintext(params, rng, scale=2), rng)
    with pytest.raises(ValueError, match="at least one"):
        she.eval_linear([])
    with pytest.raises(she.ScaleMismatchError):
        she.eval_linear([(ct, 1), (ct2, 1)])
    mparams, mks = keyset("medium")
    mct = she.encrypt(mks.pk, rand_plaintext(mparams, rng), rng)
    with pytest.raises(ValueError, match="mismatched param"):
        she.eval_linear([(ct, 1), (mct, 1)])


def test_eval_linear_weight_limits():
    params, ks = keyset("small")
    rng = np.random.default_rng(607)
    ct = she.encrypt(ks.pk, rand_plaintext(params, rng), rng)
    with pytest.raises(ValueError, match="centered range"):
        she.eval_linear([(ct, params.t)])
    # many max-magnitude copies of one ciphertext overflow the lazy i64 budget
    w = params.t // 2
    terms = [(ct, w)] * ((2**31) // w + 2)
    with pytest.raises(ValueError, match="lazy accumulation"):
        she.eval_linear(terms)
