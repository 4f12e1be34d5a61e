"""Randomised properties over the pure numerical pieces."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sidl.customizer import NOISE, RECONSTRUCTION, select_loss_branch
from sidl.metrics import frechet_distance
from sidl.numcore import Tensor, reduce_stats
from sidl.priorspace import adain_land, build_prior
from sidl.schedule import forward_noise, make_schedule, predict_z0

S = make_schedule()
finite = st.floats(-10, 10, allow_nan=False, allow_subnormal=False)


@given(arrays(np.float64, st.integers(1, 32), elements=finite), st.integers(1, 999))
def test_round_trip(z0, t):
    eps = np.cos(np.arange(z0.size) * 1.7)
    back = predict_z0(forward_noise(Tensor(z0), t, Tensor(eps), S), Tensor(eps), t, S)
    assert np.max(np.abs(back.data - z0)) < 1e-9


@given(arrays(np.float64, (6,), elements=st.floats(-5, 5, allow_nan=False)).filter(lambda v: v.std() > 1e-3),
       st.floats(0.01, 100), st.floats(-50, 50))
def test_adain_affine_invariance(v, a, b):
    prior = build_prior(np.stack([np.linspace(-1, 1, 6), np.linspace(2, 0, 6), np.ones(6) * 0.3]))
    x = adain_land(Tensor(v), prior).data
    y = adain_land(Tensor(a * v + b), prior).data
    assert np.max(np.abs(x - y)) <= 1e-9 * max(1.0, np.max(np.abs(x)))


@given(st.floats(0, 1), st.integers(2, 2000))
def test_branch_predicate(alpha, T):
    for t in {1, T - 1, max(1, min(T - 1, int(alpha * T))), max(1, min(T - 1, int(alpha * T) + 1))}:
        assert (select_loss_branch(t, alpha, T) == NOISE) == (t >= alpha * T)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_reduce_stats_matches_numpy(x):
    m, s = reduce_stats(Tensor(x), axis=1)
    assert np.allclose(m.data, x.mean(axis=1), atol=1e-12)
    assert np.allclose(s.data, x.std(axis=1), atol=1e-9)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_frechet_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(20, 3)), rng.normal(size=(15, 3)) * rng.uniform(0.5, 2)
    d1, d2 = frechet_distance(a, b), frechet_distance(b, a)
    assert d1 >= 0 and abs(d1 - d2) < 1e-8
