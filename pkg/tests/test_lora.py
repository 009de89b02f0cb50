import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynlora.errors import ContractError, ShapeError
from dynlora.lora import LoraAdapter, delta, init_adapter, merge, resize
from oracles import naive_matmul


def random_adapter(rng, d_in=6, d_out=5, r=3, alpha=0.7):
    return LoraAdapter(a=rng.normal(size=(d_in, r)), b=rng.normal(size=(r, d_out)), alpha=alpha)


def test_init_delta_is_zero():
    ad = init_adapter(6, 5, 3, seed=0)
    assert not delta(ad).any()
    assert ad.alpha == 1.0
    assert ad.a.std() == pytest.approx(0.02, rel=0.5)


def test_init_deterministic():
    assert np.array_equal(init_adapter(6, 5, 3, 9).a, init_adapter(6, 5, 3, 9).a)


def test_rank_bounds():
    init_adapter(6, 5, 5, 0)
    with pytest.raises(ContractError):
        init_adapter(6, 5, 6, 0)
    with pytest.raises(ContractError):
        init_adapter(6, 5, 0, 0)


def test_delta_rank_one_outer_product():
    u, v = np.array([[1.0], [2.0], [3.0]]), np.array([[4.0, 5.0]])
    ad = LoraAdapter(a=u, b=v)
    assert delta(ad).tolist() == [[4.0, 5.0], [8.0, 10.0], [12.0, 15.0]]


def test_delta_rank_bounded(rng):
    for r in (1, 2, 3):
        ad = random_adapter(rng, 7, 6, r)
        s = np.linalg.svd(delta(ad), compute_uv=False)
        assert int(np.sum(s > 1e-10 * s[0])) <= r
        assert delta(ad).shape == (7, 6)


def test_param_count_matches_enumeration(rng):
    ad = random_adapter(rng, 7, 6, 2)
    count = sum(1 for _ in np.nditer(ad.a)) + sum(1 for _ in np.nditer(ad.b))
    assert ad.n_params == count == 2 * (7 + 6)


def test_merge_zero_cases(rng):
    w = rng.normal(size=(6, 5))
    ad = random_adapter(rng, alpha=0.0)
    assert np.array_equal(merge(w, ad), w)
    ad0 = init_adapter(6, 5, 2, 0)
    assert np.array_equal(merge(w, ad0), w)


def test_merge_matches_naive(rng):
    w = rng.normal(size=(6, 5))
    ad = random_adapter(rng)
    np.testing.assert_allclose(merge(w, ad), w + ad.alpha * naive_matmul(ad.a, ad.b), atol=1e-12)


def test_merge_shape_error(rng):
    with pytest.raises(ShapeError):
        merge(np.zeros((5, 5)), random_adapter(rng))


def test_resize_grow_keeps_delta_exact(rng):
    ad = random_adapter(rng, 6, 6, 2)
    grown = resize(ad, 4, seed=3)
    assert grown.rank == 4
    assert np.array_equal(delta(grown), delta(ad))
    assert np.array_equal(grown.a[:, :2], ad.a)
    assert not grown.b[2:].any()


def test_resize_same_rank_is_identity(rng):
    ad = random_adapter(rng)
    assert resize(ad, ad.rank, 0) is ad


def test_resize_shrink_equals_truncated_product(rng):
    ad = random_adapter(rng, 6, 6, 4)
    small = resize(ad, 2, 0)
    assert np.array_equal(small.a, ad.a[:, :2]) and np.array_equal(small.b, ad.b[:2])
    np.testing.assert_allclose(delta(small), naive_matmul(ad.a[:, :2], ad.b[:2]), rtol=0, atol=1e-15)


def test_resize_bounds(rng):
    with pytest.raises(ContractError):
        resize(random_adapter(rng, 6, 5, 3), 6, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31), st.data())
def test_grow_resize_invariance(d_in, d_out, seed, data):
    r_max = min(d_in, d_out)
    r = data.draw(st.integers(1, r_max))
    new_r = data.draw(st.integers(r, r_max))
    rng = np.random.default_rng(seed)
    ad = LoraAdapter(a=rng.normal(size=(d_in, r)), b=rng.normal(size=(r, d_out)))
    assert np.array_equal(delta(resize(ad, new_r, seed)), delta(ad))
