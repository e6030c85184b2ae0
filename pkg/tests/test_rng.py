import numpy as np

from feddnc.rng import Rng

from oracles import philox_raw, philox_uniform


def test_matches_reference_philox_raw():
    raw = Rng(7, 3).generator().bit_generator.random_raw(12)
    assert [int(v) for v in raw] == philox_raw(7, 3, 12)


def test_uniform_matches_reference_mapping():
    got = Rng(42, 9).generator().uniform(-0.5, 0.5, 8)
    expected = philox_uniform(42, 9, 8, -0.5, 0.5)
    assert got.tolist() == expected


def test_counter_block_matches_reference():
    raw = Rng(11, 2).generator(block=5).bit_generator.random_raw(6)
    assert [int(v) for v in raw] == philox_raw(11, 2, 6, block=5)


def test_same_pair_replays_exactly():
    a = Rng(123, 4).generator().standard_normal(100)
    b = Rng(123, 4).generator().standard_normal(100)
    assert np.array_equal(a, b)


def test_distinct_streams_and_blocks_differ():
    base = Rng(5, 0).generator().uniform(size=16)
    other_stream = Rng(5, 1).generator().uniform(size=16)
    other_block = Rng(5, 0).generator(block=1).uniform(size=16)
    assert not np.array_equal(base, other_stream)
    assert not np.array_equal(base, other_block)
    assert not np.array_equal(other_stream, other_block)


def test_stream_helper_keeps_seed():
    rng = Rng(77, 0).stream(13)
    assert rng.seed == 77 and rng.stream_id == 13
