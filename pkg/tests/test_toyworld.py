import numpy as np
import pytest

from sidl.numcore import Tensor
from sidl.toyworld import (NULL_TOKEN, ToyWorld, WorldConfig, build_token_dict, compose_prompt,
                           context_condition, mask_to_pgm, read_pgm, to_pgm)


@pytest.fixture(scope="module")
def world():
    return ToyWorld()


@pytest.fixture(scope="module")
def tdict(world):
    return build_token_dict(world)


def test_sample_determinism(world):
    a = world.gen_sample(3, 2, np.random.default_rng(7))
    b = world.gen_sample(3, 2, np.random.default_rng(7))
    assert np.array_equal(a.z0.data, b.z0.data) and np.array_equal(a.mask_face, b.mask_face)


def test_sample_invariants(world):
    rng = np.random.default_rng(0)
    for ident in range(world.n_total_identities):
        s = world.gen_sample(ident, ident % 8, rng)
        assert s.z0.shape == (1, 16, 16)
        assert np.all(np.abs(s.z0.data) <= 1.0)
        assert set(np.unique(s.mask_face)) <= {0.0, 1.0} and set(np.unique(s.mask_hair)) <= {0.0, 1.0}
        assert not np.any(s.mask_face * s.mask_hair)
        assert s.mask_face.sum() >= 1


def test_face_context_invariant(world):
    a = world.gen_sample(5, 0, np.random.default_rng(3))
    b = world.gen_sample(5, 6, np.random.default_rng(3))
    face = a.mask_face > 0
    assert np.array_equal(a.z0.data[0][face], b.z0.data[0][face])
    bg = (a.mask_face + a.mask_hair) == 0
    assert not np.allclose(a.z0.data[0][bg], b.z0.data[0][bg])


def test_mask_areas_match_geometry(world):
    y, x = np.mgrid[0:16, 0:16]
    for ident in range(0, 80, 7):
        cx, cy, rx, ry, h = world.identity_params[ident][:5]
        inside = lambda a, b: ((x - cx) / a) ** 2 + ((y - cy) / b) ** 2 <= 1
        face_area = int(inside(rx, ry).sum())
        hair_area = int((inside(rx + h, ry + h) & ~inside(rx, ry) & (y <= cy)).sum())
        s = world.gen_sample(ident, 0, np.random.default_rng(0))
        assert s.mask_face.sum() == face_area and s.mask_hair.sum() == hair_area


def test_batch_matches_single_draws(world):
    ids, ctxs = [1, 70, 4], [0, 5, 7]
    batch = world.gen_batch(ids, ctxs, np.random.default_rng(9))
    rng = np.random.default_rng(9)
    for row, i, c in zip(batch, ids, ctxs):
        assert np.array_equal(row, world.gen_sample(i, c, rng).z0.data.ravel())


def test_label_range(world):
    with pytest.raises(ValueError):
        world.gen_sample(80, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        world.gen_sample(0, 8, np.random.default_rng(0))


def test_token_dict(tdict):
    V = len(tdict.vocab)
    assert tdict.embeddings.shape == (V, 16)
    p1, p2 = tdict.placeholder_ids
    assert p1 != p2 and all(not t.startswith("<v") for i, t in enumerate(tdict.vocab) if i not in (p1, p2))
    assert tdict.identity_rows().shape == (64, 2, 16)
    with pytest.raises(KeyError):
        tdict.id("nobody")


def test_compose_prompt(tdict, rng):
    tok = tdict.context_token(3)
    assert np.array_equal(compose_prompt([tok], tdict).data, tdict.embeddings.data[tok:tok + 1])
    v = (Tensor(rng.normal(size=16)), Tensor(rng.normal(size=16)))
    p1, p2 = tdict.placeholder_ids
    g = compose_prompt([p1, p2, tok], tdict, v)
    assert np.array_equal(g.data[0], v[0].data) and np.array_equal(g.data[1], v[1].data)
    a, b = tdict.identity_tokens(2)
    assert np.array_equal(compose_prompt([b, a], tdict).data, compose_prompt([a, b], tdict).data[::-1])
    with pytest.raises(KeyError):
        compose_prompt([len(tdict.vocab)], tdict)
    with pytest.raises(ValueError):
        compose_prompt([p1], tdict)


def test_context_condition(rng):
    W = rng.normal(size=(64, 32))
    row = rng.normal(size=(1, 16))
    assert np.allclose(context_condition(Tensor(row), Tensor(W)).data, row[0] @ W[:16])
    assert np.all(context_condition(Tensor(np.zeros((3, 16))), Tensor(W)).data == 0)
    g = rng.normal(size=(3, 16))
    ref = sum(g[i] @ W[16 * i:16 * (i + 1)] for i in range(3))
    assert np.allclose(context_condition(Tensor(g), Tensor(W)).data, ref, atol=1e-12)
    with pytest.raises(ValueError):
        context_condition(Tensor(np.zeros((5, 16))), Tensor(W))


def test_pgm_roundtrip(tmp_path, world):
    s = world.gen_sample(0, 0, np.random.default_rng(0))
    to_pgm(s.z0, tmp_path / "x.pgm")
    raw = (tmp_path / "x.pgm").read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n") and len(raw) == 13 + 256
    back = read_pgm(tmp_path / "x.pgm")
    assert np.max(np.abs(back - s.z0.data[0])) <= 1 / 255 + 1e-12
    mask_to_pgm(s.mask_face, tmp_path / "m.pgm")
    assert set(np.unique(np.frombuffer((tmp_path / "m.pgm").read_bytes()[13:], np.uint8))) <= {0, 255}


def test_world_config_sizes():
    w = ToyWorld(WorldConfig(n_identities=4, n_heldout=2, n_contexts=4))
    assert w.heldout_ids() == [4, 5]
    td = build_token_dict(w)
    assert NULL_TOKEN in td.vocab and td.identity_rows().shape == (4, 2, 16)
