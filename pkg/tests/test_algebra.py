import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptive_gke.algebra import (
    GroupParams,
    decode_exponent,
    encode_element,
    encode_fixed,
    generate_group_params,
    group_preset,
    hash_to_exponent,
    is_probable_prime,
    is_subgroup_member,
    mod_exp,
    register_hash_label,
    xor_mask,
)
from adaptive_gke.errors import MaskDecodeError, ParameterSearchExhausted

register_hash_label(b"test-label-a")
register_hash_label(b"test-label-b")


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------


def naive_mod_exp(base: int, exponent: int, modulus: int) -> int:
    """Repeated multiplication, no squaring shortcuts."""
    acc = 1
    for _ in range(exponent):
        acc = acc * base % modulus
    return acc


def naive_is_prime(n: int) -> bool:
    if n < 2:
        return False
    return all(n % d for d in range(2, n))


def brute_force_safe_prime_groups(q_bits: int):
    """Every (p, q, smallest subgroup generator) with a q of exactly q_bits bits,
    found by exhaustive search below 2^(q_bits+1)."""
    found = []
    for q in range(1 << (q_bits - 1), 1 << q_bits):
        p = 2 * q + 1
        if naive_is_prime(q) and naive_is_prime(p):
            g = next(
                h for h in range(2, p - 1) if naive_mod_exp(h, q, p) == 1
            )
            found.append((p, q, g))
    return found


def test_brute_force_oracle_finds_the_unique_4bit_group():
    assert brute_force_safe_prime_groups(4) == [(23, 11, 2)]


# ---------------------------------------------------------------------------
# generate_group_params
# ---------------------------------------------------------------------------


class TestGenerateGroupParams:
    def test_4bit_search_matches_brute_force(self):
        expected = brute_force_safe_prime_groups(4)[0]
        params = generate_group_params(4, random.Random(1))
        assert (params.p, params.q, params.g) == expected

    def test_deterministic_under_fixed_seed(self):
        a = generate_group_params(8, random.Random(99))
        b = generate_group_params(8, random.Random(99))
        assert a == b

    def test_result_satisfies_invariants(self):
        params = generate_group_params(16, random.Random(3))
        params.validate()
        assert pow(params.g, params.q, params.p) == 1
        assert params.g != 1

    def test_exhausted_search_raises(self):
        class NoBits:
            def getrandbits(self, n):
                return 0  # forces the composite candidate 2^(n-1) | 1 forever

        # 9 | 8 | 1 = 9 = 3*3, never prime, so the bound must trip.
        with pytest.raises(ParameterSearchExhausted):
            generate_group_params(4, NoBits())

    def test_too_small_bit_length_rejected(self):
        with pytest.raises(ValueError):
            generate_group_params(3, random.Random(0))


# ---------------------------------------------------------------------------
# mod_exp
# ---------------------------------------------------------------------------


class TestModExp:
    def test_agrees_with_naive_oracle_exhaustively(self, toy_params):
        for base in range(1, 23):
            for exponent in range(1, 11):
                assert mod_exp(base, exponent, toy_params) == naive_mod_exp(
                    base, exponent, 23
                )

    def test_frozen_examples(self, toy_params):
        assert naive_mod_exp(2, 5, 23) == 9
        assert mod_exp(2, 5, toy_params) == 9
        assert mod_exp(8, 4, toy_params) == 2  # (g^3)^4
        assert mod_exp(16, 3, toy_params) == 2  # (g^4)^3

    def test_identity_exponent(self, toy_params):
        for x in (1, 2, 9, 16, 22):
            assert mod_exp(x, 1, toy_params) == x

    @given(a=st.integers(1, 10), b=st.integers(1, 10))
    def test_dh_commutativity(self, toy_params, a, b):
        left = mod_exp(mod_exp(toy_params.g, a, toy_params), b, toy_params)
        right = mod_exp(mod_exp(toy_params.g, b, toy_params), a, toy_params)
        assert left == right

    @given(a=st.integers(1, 10), b=st.integers(1, 10))
    def test_subgroup_closure(self, toy_params, a, b):
        member = mod_exp(toy_params.g, a, toy_params)
        assert is_subgroup_member(mod_exp(member, b, toy_params), toy_params)


class TestSubgroupMembership:
    def test_member_by_construction(self, toy_params):
        assert naive_mod_exp(16, 11, 23) == 1
        assert is_subgroup_member(16, toy_params)

    def test_non_member(self, toy_params):
        assert naive_mod_exp(5, 11, 23) == 22
        assert not is_subgroup_member(5, toy_params)

    def test_identity_element(self, toy_params):
        assert is_subgroup_member(1, toy_params)

    def test_out_of_range(self, toy_params):
        assert not is_subgroup_member(0, toy_params)
        assert not is_subgroup_member(23, toy_params)
        assert not is_subgroup_member(-1, toy_params)


# ---------------------------------------------------------------------------
# hash_to_exponent
# ---------------------------------------------------------------------------


class TestHashToExponent:
    @given(data=st.binary(min_size=0, max_size=64))
    def test_range(self, toy_params, data):
        value = hash_to_exponent(b"test-label-a", data, toy_params)
        assert 1 <= value <= toy_params.q - 1

    def test_deterministic(self, test64):
        a = hash_to_exponent(b"test-label-a", b"same input", test64)
        b = hash_to_exponent(b"test-label-a", b"same input", test64)
        assert a == b

    def test_domain_separation(self, test64):
        rng = random.Random(5)
        inputs = [rng.randbytes(16) for _ in range(100)]
        outputs_a = [hash_to_exponent(b"test-label-a", x, test64) for x in inputs]
        outputs_b = [hash_to_exponent(b"test-label-b", x, test64) for x in inputs]
        assert any(a != b for a, b in zip(outputs_a, outputs_b))

    def test_never_zero_over_large_sample(self, toy_params):
        rng = random.Random(6)
        for _ in range(100_000):
            assert hash_to_exponent(b"test-label-a", rng.randbytes(8), toy_params) != 0

    def test_unregistered_label_rejected(self, toy_params):
        with pytest.raises(ValueError, match="unregistered"):
            hash_to_exponent(b"nobody-registered-this", b"", toy_params)


# ---------------------------------------------------------------------------
# encodings
# ---------------------------------------------------------------------------


class TestEncodings:
    def test_single_byte_round_trip(self, toy_params):
        assert encode_fixed(9, toy_params) == b"\x09"
        assert decode_exponent(b"\x09", toy_params) == 9

    def test_decode_zero_rejected(self, toy_params):
        with pytest.raises(MaskDecodeError):
            decode_exponent(b"\x00", toy_params)

    def test_decode_q_rejected(self, toy_params):
        with pytest.raises(MaskDecodeError):
            decode_exponent(b"\x0b", toy_params)

    def test_wrong_width_rejected(self, test64):
        with pytest.raises(ValueError, match="length"):
            decode_exponent(b"\x01", test64)

    def test_round_trip_exhaustive_small_q(self):
        params = generate_group_params(14, random.Random(11))
        assert params.q < 1 << 16
        for e in range(1, params.q):
            assert decode_exponent(encode_fixed(e, params), params) == e

    def test_element_width(self, test64):
        assert len(encode_element(test64.g, test64)) == test64.element_width_bytes


class TestXorMask:
    def test_self_inverse(self):
        x = bytes(range(16))
        assert xor_mask(x, x) == bytes(16)

    def test_involution_recovers_masked_value(self, rng):
        r = rng.randbytes(8)
        h = rng.randbytes(8)
        assert xor_mask(xor_mask(r, h), h) == r

    def test_bitwise_table(self):
        assert xor_mask(b"\x0f", b"\x09") == b"\x06"

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            xor_mask(b"\x00\x01", b"\x00")


# ---------------------------------------------------------------------------
# GroupParams
# ---------------------------------------------------------------------------


class TestGroupParams:
    def test_create_validates(self):
        params = GroupParams.create(23, 11, 2)
        assert params.exponent_width_bytes == 1
        assert params.element_width_bytes == 1

    def test_rejects_non_safe_prime(self):
        with pytest.raises(ValueError, match="2q"):
            GroupParams.create(23, 7, 2)

    def test_rejects_composite_q(self):
        # 19 = 2*9 + 1 is prime but 9 is not
        with pytest.raises(ValueError, match="q is not prime"):
            GroupParams.create(19, 9, 4)

    def test_rejects_generator_outside_subgroup(self):
        with pytest.raises(ValueError, match="generate"):
            GroupParams.create(23, 11, 5)

    def test_json_round_trip(self, test64):
        assert GroupParams.from_json(test64.to_json()) == test64

    def test_test64_preset_is_valid(self):
        params = group_preset("test64")
        params.validate()
        assert params.q.bit_length() == 64
        assert params.exponent_width_bytes == 8

    def test_rfc3526_preset_is_valid(self):
        params = group_preset("rfc3526-2048")
        params.validate()
        assert params.p.bit_length() == 2048
        assert params.exponent_width_bytes == 256

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown group preset"):
            group_preset("nope")


def test_miller_rabin_agrees_with_trial_division():
    for n in range(2, 2000):
        assert is_probable_prime(n) == naive_is_prime(n), n
