import numpy as np
import pytest

from sidl.metrics import (EvalReport, cosine, frechet_distance, identity_similarity,
                          pairwise_diversity, prompt_alignment, trusted_diversity, trusted_terms,
                          write_eval_csv)
from sidl.numcore import Tensor


class Identity:
    """Features are the raw pixels; makes cosine cases exact."""

    def features(self, x):
        return x


def test_identity_similarity_examples(rng):
    ref = rng.normal(size=(1, 2, 2))
    assert abs(identity_similarity([ref], ref, Identity()) - 1.0) < 1e-12
    a, b = np.array([1.0, 0, 0, 0]), np.array([0, 1.0, 0, 0])
    assert identity_similarity([a], b, Identity()) == 0.0
    v = np.array([1.0, 1.0]) / np.sqrt(2)
    assert abs(identity_similarity([np.array([1.0, 0.0])], v, Identity()) - np.sqrt(2) / 2) < 1e-12
    with pytest.raises(ValueError):
        identity_similarity([], ref, Identity())


def test_identity_similarity_uses_mask():
    mask = np.array([[1.0, 0.0], [0.0, 0.0]])
    a = np.array([[1.0, 5.0], [-3.0, 2.0]])
    b = np.array([[2.0, -1.0], [4.0, 0.0]])
    assert abs(identity_similarity([a], b, Identity(), mask) - 1.0) < 1e-12


def test_pairwise_diversity_examples(rng):
    x = rng.normal(size=4)
    assert abs(pairwise_diversity([x, x, x], lambda v: v)) < 1e-12
    assert pairwise_diversity([np.array([1.0, 0]), np.array([0, 1.0])], lambda v: v) == 1.0
    pts = [rng.normal(size=3) for _ in range(3)]
    d = lambda a, b: 1 - a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    expect = (d(pts[0], pts[1]) + d(pts[0], pts[2]) + d(pts[1], pts[2])) / 3
    assert abs(pairwise_diversity(pts, lambda v: v) - expect) < 1e-12
    with pytest.raises(ValueError):
        pairwise_diversity([x], lambda v: v)


def test_trusted_diversity_examples(rng):
    assert abs(trusted_terms([1.0, 0.8], {(0, 1): 0.5})[0] - 0.45) < 1e-15
    ref = rng.normal(size=(1, 4, 4))
    assert abs(trusted_diversity([ref, ref.copy()], ref, Identity())) < 1e-12
    # features orthogonal to the reference: similarity factor vanishes
    r = np.zeros((1, 2, 2)); r[0, 0, 0] = 1.0
    g1 = np.zeros((1, 2, 2)); g1[0, 1, 1] = 1.0
    g2 = np.zeros((1, 2, 2)); g2[0, 0, 1] = 1.0
    assert trusted_diversity([g1, g2], r, Identity()) == 0.0
    with pytest.raises(ValueError):
        trusted_diversity([ref], ref, Identity())


def test_frechet_examples(rng):
    a = rng.normal(size=(40, 3))
    assert frechet_distance(a, a) < 1e-8
    b = rng.normal(size=(30, 3)) * 2 + 1
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8
    one = np.array([-1.0, 1.0])
    assert abs(frechet_distance(one, one + 3.0) - 9.0) < 1e-8
    assert abs(frechet_distance(2 * one, one) - 1.0) < 1e-8
    with pytest.raises(ValueError):
        frechet_distance(rng.normal(size=(4, 3)), rng.normal(size=(4, 2)))


def test_frechet_matches_scipy_sqrtm(rng):
    from scipy.linalg import sqrtm

    a, b = rng.normal(size=(50, 4)), rng.normal(size=(60, 4)) @ rng.normal(size=(4, 4))
    Sa, Sb = np.cov(a, rowvar=False, bias=True), np.cov(b, rowvar=False, bias=True)
    ref = np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(Sa + Sb - 2 * np.real(sqrtm(Sa @ Sb)))
    assert abs(frechet_distance(a, b) - ref) < 1e-8


class FixedProbe:
    n_contexts = 4

    def probabilities(self, images):
        return np.tile([0.1, 0.2, 0.3, 0.4], (len(images), 1))


def test_prompt_alignment():
    assert prompt_alignment([0, 0], 3, FixedProbe()) == 0.4
    with pytest.raises(ValueError):
        prompt_alignment([], 0, FixedProbe())
    with pytest.raises(ValueError):
        prompt_alignment([0], 4, FixedProbe())


def test_report_clamp_and_csv(tmp_path):
    r = EvalReport(0.5, 0.2, 0.1, -1e-10, 0.9, 4, 0.3)
    assert r.frechet == 0.0
    write_eval_csv([(("64", "contexts"), r)], tmp_path / "e.csv")
    head = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert head == ("identity,prompt_set,clip_i_analog,prompt_alignment,identity_similarity,"
                    "diversity,trusted_diversity,frechet,sample_count")


def test_cosine_zero_vector():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0
