import numpy as np

from dpfedsim.rng import substream, substream_seed


def test_same_path_same_stream():
    a = substream(7, "train", 3, 12).standard_normal(20)
    b = substream(7, "train", 3, 12).standard_normal(20)
    assert np.array_equal(a, b)


def test_different_paths_differ():
    a = substream(7, "train", 3, 12).standard_normal(20)
    b = substream(7, "train", 3, 13).standard_normal(20)
    c = substream(8, "train", 3, 12).standard_normal(20)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_path_encoding_unambiguous():
    # ("ab", "c") and ("a", "bc") must not collide
    assert substream_seed(1, "ab", "c") != substream_seed(1, "a", "bc")
    assert substream_seed(1, 12) != substream_seed(1, "12")


def test_order_independence_of_use():
    # drawing from one substream never affects a sibling
    s1 = substream(3, "x")
    _ = s1.standard_normal(1000)
    fresh = substream(3, "y").standard_normal(5)
    assert np.array_equal(fresh, substream(3, "y").standard_normal(5))
