from hypothesis import given, settings
from hypothesis import strategies as st

from gpumux.rng import SplitMix64, substream_seed


def test_reference_vectors_seed_zero():
    # Widely published splitmix64 outputs for seed 0; pins the update
    # constants so traces are portable across implementations.
    rng = SplitMix64(0)
    assert [rng.next_u64() for _ in range(3)] == [
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_equal_seeds_replay_identically():
    a = SplitMix64(99)
    b = SplitMix64(99)
    assert [a.next_u64() for _ in range(16)] == [b.next_u64() for _ in range(16)]
    assert SplitMix64(99).next_u64() != SplitMix64(100).next_u64()


def test_substream_seed_is_label_sensitive():
    base = substream_seed(7, "arrivals", "s0")
    assert base == substream_seed(7, "arrivals", "s0")
    assert base != substream_seed(7, "arrivals", "s1")
    assert base != substream_seed(7, "jitter", "s0")
    assert base != substream_seed(8, "arrivals", "s0")


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**64 - 1))
def test_uniform_in_range(seed):
    rng = SplitMix64(seed)
    for _ in range(8):
        x = rng.uniform(2.0, 5.0)
        assert 2.0 <= x < 5.0
        assert rng.expovariate(0.5) >= 0.0
