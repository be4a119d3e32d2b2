import numpy as np
import pytest

from slackmerge import SynthSpec, TensorSpec, ValidationError, generate_checkpoint, generate_ct_series
from slackmerge.synth import SALT_DARE, fnv1a64, keyed_bits, splitmix64
from slackmerge.tensorio import serialize

from prng import fnv1a_reference, splitmix64_reference


def test_published_splitmix64_stream():
    assert splitmix64_reference(0, 3) == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    assert splitmix64(0, np.arange(3)).tolist() == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_fnv1a_known_vectors():
    assert fnv1a64("") == 0xCBF29CE484222325
    assert fnv1a64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a64("w") == fnv1a_reference("w")


def test_seed_42_tensor_w_matches_reference_stream():
    spec = SynthSpec(42, [TensorSpec("w", (4,))])
    values = generate_checkpoint(spec).f32("w")
    stream = splitmix64_reference(42 ^ fnv1a_reference("w"), 4)
    expected = [((2 * (x >> 41) + 1) / 2**23) - 1 for x in stream]
    np.testing.assert_array_equal(values, np.array(expected, dtype=np.float32))
    assert np.all(np.abs(values) < 1) and np.all(values != 0)


def test_same_spec_is_byte_identical_and_seed_sensitive():
    tensors = [TensorSpec("a", (3, 5), "F16"), TensorSpec("b", (7,), "BF16")]
    one = serialize(generate_checkpoint(SynthSpec(1, tensors)))
    assert one == serialize(generate_checkpoint(SynthSpec(1, tensors)))
    assert one != serialize(generate_checkpoint(SynthSpec(2, tensors)))


def test_values_independent_of_other_tensors():
    alone = generate_checkpoint(SynthSpec(9, [TensorSpec("w", (10,))])).f32("w")
    together = generate_checkpoint(SynthSpec(9, [TensorSpec("z", (3,)), TensorSpec("w", (10,))])).f32("w")
    np.testing.assert_array_equal(alone, together)


def test_constant_distribution():
    c = generate_checkpoint(SynthSpec(0, [TensorSpec("w", (2, 2))], distribution="constant", constant=0.25))
    np.testing.assert_array_equal(c.f32("w"), np.full((2, 2), 0.25, np.float32))


@pytest.mark.parametrize("f", [0.0, 0.1, 0.37, 0.5, 0.9, 1.0])
def test_conflict_injection_is_exact(f):
    tensors = [TensorSpec("a", (37,)), TensorSpec("b", (5, 11))]
    ref = generate_checkpoint(SynthSpec(3, tensors))
    other = generate_checkpoint(SynthSpec(4, tensors, conflict_fraction=f, conflict_reference=ref))
    total = 37 + 55
    flipped = sum(int(np.sum(np.signbit(ref.f32(n)) != np.signbit(other.f32(n)))) for n in ("a", "b"))
    assert flipped == round(f * total)


def test_streams_are_salted_apart():
    assert not np.array_equal(keyed_bits(5, "w", 8), keyed_bits(5, "w", 8, SALT_DARE))


def test_ct_series_shape_and_reduction():
    spec = SynthSpec(11, [TensorSpec("w", (6,))])
    base = generate_checkpoint(spec)
    (only,) = generate_ct_series(spec, steps=1, growth=0.5)
    series = generate_ct_series(spec, steps=3, growth=0.5)
    assert len(series) == 3
    assert only == series[0]
    delta = series[0].f32("w") - base.f32("w")
    # step i carries i times the step-1 delta (up to float32 rounding)
    np.testing.assert_allclose(series[2].f32("w") - base.f32("w"), 3 * delta, rtol=1e-5, atol=1e-6)


def test_ct_series_zero_growth_is_base():
    spec = SynthSpec(11, [TensorSpec("w", (6,)), TensorSpec("v", (2, 3), "F16")])
    base = generate_checkpoint(spec)
    assert all(c == base for c in generate_ct_series(spec, steps=4, growth=0.0))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(seed=-1, tensors=[("w", (1,))]),
        dict(seed=0, tensors=[("w", (1,)), ("w", (2,))]),
        dict(seed=0, tensors=[("w", (1,))], conflict_fraction=1.5),
        dict(seed=0, tensors=[("w", (1,))], distribution="normal"),
        dict(seed=0, tensors=[("w", (1,), "I8")]),
    ],
)
def test_invalid_specs(kwargs):
    with pytest.raises(ValidationError):
        SynthSpec(**kwargs)


def test_invalid_series_arguments():
    spec = SynthSpec(0, [TensorSpec("w", (1,))])
    with pytest.raises(ValidationError):
        generate_ct_series(spec, steps=0, growth=1.0)
    with pytest.raises(ValidationError):
        generate_ct_series(spec, steps=2, growth=-1.0)


def test_from_dict():
    spec = SynthSpec.from_dict({"seed": 5, "tensors": [{"name": "w", "shape": [2], "dtype": "F16"}]})
    assert spec.tensors == [TensorSpec("w", (2,), "F16")]
    with pytest.raises(ValidationError):
        SynthSpec.from_dict({"seed": 5, "tensors": [], "bogus": 1})
