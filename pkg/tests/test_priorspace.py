import numpy as np
import pytest

from sidl.numcore import Tensor, param
from sidl.priorspace import (GreedyTokenizer, adain_land, build_prior, filter_names, slot_priors,
                             write_prior_csv)


def test_build_prior_examples():
    p = build_prior([[0, 2], [2, 0]])
    assert p.mu.tolist() == [1, 1] and p.sigma.tolist() == [1, 1]
    with pytest.raises(ValueError):
        build_prior([[1, 2]])
    with pytest.raises(ValueError):
        build_prior([[1, 2], [1, 3]])


def test_prior_stats_recomputable(rng):
    C = rng.normal(size=(20, 5))
    p = build_prior(C)
    assert np.max(np.abs(p.mu - C.mean(0))) < 1e-12 and np.max(np.abs(p.sigma - C.std(0))) < 1e-12
    assert np.array_equal(p.vmin, C.min(0)) and np.array_equal(p.vmax, C.max(0))


def test_adain_examples():
    p = build_prior([[8, 16], [12, 24]])  # mu [10, 20], sigma [2, 4]
    assert adain_land(Tensor([1.0, 3.0]), p).data.tolist() == [8.0, 24.0]
    neutral = build_prior([[-1, -1, -1], [1, 1, 1]])
    out = adain_land(Tensor([0.5, 2.0, -1.0]), neutral).data
    assert abs(out.mean()) < 1e-12 and abs(out.std() - 1) < 1e-12
    with pytest.raises(ValueError):
        adain_land(Tensor([5.0, 5.0]), p)
    with pytest.raises(ValueError):
        adain_land(Tensor([1.0, 2.0, 3.0]), p)


def test_adain_constant_prior_moments(rng):
    C = np.stack([np.full(6, 0.3 - 0.7), np.full(6, 0.3 + 0.7)])
    out = adain_land(Tensor(rng.normal(size=6)), build_prior(C)).data
    assert abs(out.mean() - 0.3) < 1e-10 and abs(out.std() - 0.7) < 1e-10


def test_adain_range_containment(rng):
    C = rng.normal(size=(50, 8)) * rng.uniform(0.5, 2, size=8)
    p = build_prior(C)
    for row in C:
        out = adain_land(Tensor(row), p).data
        assert np.all(out >= p.vmin - 6 * p.sigma) and np.all(out <= p.vmax + 6 * p.sigma)


def test_adain_differentiable(rng):
    p = build_prior(rng.normal(size=(10, 4)))
    v = param(rng.normal(size=4))
    (adain_land(v, p) ** 2).sum().backward()
    assert v.grad.shape == (4,) and np.all(np.isfinite(v.grad))


def test_slot_priors(rng):
    rows = rng.normal(size=(6, 2, 3))
    a, b = slot_priors(rows)
    assert a is b and a.n == 12
    a, b = slot_priors(rows, "separate")
    assert a.n == b.n == 6 and not np.array_equal(a.mu, b.mu)
    with pytest.raises(ValueError):
        slot_priors(rows, "other")


def test_prior_csv(tmp_path, rng):
    p = build_prior(rng.normal(size=(5, 3)))
    write_prior_csv(p, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "dimension,mu,sigma,min,max" and len(lines) == 4


def test_filter_names_examples():
    tok = GreedyTokenizer()
    acc, hist = filter_names(["Tom Cruise", "Zooey Deschanel", "Emma Stone Jr"], tok)
    assert acc == ["Tom Cruise"]
    assert tok("deschanel") == [tok.vocab["des"], tok.vocab["chan"], tok.vocab["el"]]
    assert hist == {2: 1, 3: 0, 4: 0, 5: 1, 6: 0}
    assert filter_names([], tok) == ([], {2: 0, 3: 0, 4: 0, 5: 0, 6: 0})


def test_adain_gradient_matches_finite_differences(rng):
    from conftest import numgrad, rel_err

    p = build_prior(rng.normal(size=(10, 5)) * rng.uniform(0.2, 3, size=5))
    v = param(rng.normal(size=5))
    w = rng.normal(size=5)
    f = lambda: (adain_land(v, p) * Tensor(w)).tanh().sum()
    f().backward()
    assert rel_err(v.grad, numgrad(lambda: f().item(), v.data)) < 1e-6
