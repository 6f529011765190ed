import numpy as np
import pytest

from fiem.errors import (
    ArgumentError,
    DomainError,
    EmptyComponentError,
    FiemError,
    InfeasibleError,
)
from fiem.utils.rng import STREAM_IDS, StreamFactory, sample_batch


def test_same_seed_and_replica_reproduce_stream():
    a = StreamFactory(5, 2).stream("indices-I").integers(0, 1000, size=50)
    b = StreamFactory(5, 2).stream("indices-I").integers(0, 1000, size=50)
    np.testing.assert_array_equal(a, b)


def test_streams_are_independent_of_draw_order():
    factory = StreamFactory(9)
    factory.stream("indices-J").random(1000)
    after = factory.stream("indices-I").random(5)
    fresh = StreamFactory(9).stream("indices-I").random(5)
    np.testing.assert_array_equal(after, fresh)


def test_replica_streams_are_pairwise_distinct():
    prefixes = set()
    for replica in range(200):
        draws = StreamFactory(0, replica).stream("indices-I").integers(0, 2**31, size=100)
        prefixes.add(draws.tobytes())
    assert len(prefixes) == 200


def test_named_streams_differ_within_a_replica():
    factory = StreamFactory(1)
    draws = {name: factory.stream(name).random(8).tobytes() for name in STREAM_IDS}
    assert len(set(draws.values())) == len(STREAM_IDS)


def test_child_matches_explicit_replica():
    a = StreamFactory(4).child(3).stream("termination").random(4)
    b = StreamFactory(4, 3).stream("termination").random(4)
    np.testing.assert_array_equal(a, b)


def test_unknown_stream_and_negative_seed():
    with pytest.raises(KeyError):
        StreamFactory(0).stream("bogus")
    with pytest.raises(ValueError):
        StreamFactory(-1)


def test_single_draw_identical_with_and_without_replacement():
    a = sample_batch(StreamFactory(2).stream("indices-J"), 50, 1, replace=False)
    b = sample_batch(StreamFactory(2).stream("indices-J"), 50, 1, replace=True)
    np.testing.assert_array_equal(a, b)


def test_sample_batch_without_replacement_is_distinct():
    batch = sample_batch(np.random.default_rng(0), 20, 10, replace=False)
    assert np.unique(batch).size == 10
    with pytest.raises(ValueError):
        sample_batch(np.random.default_rng(0), 5, 6, replace=False)


def test_domain_error_iteration_tagging_keeps_subclass():
    err = EmptyComponentError("component 2 is empty")
    tagged = err.at_iteration(17)
    assert isinstance(tagged, EmptyComponentError)
    assert tagged.iteration == 17
    assert tagged.condition == "component 2 is empty"
    assert "iteration 17" in str(tagged)
    assert err.iteration is None


def test_hierarchy():
    assert issubclass(ArgumentError, ValueError)
    assert issubclass(DomainError, FiemError)
    assert InfeasibleError("n > (C/lambda)^3 fails").condition.startswith("n >")
