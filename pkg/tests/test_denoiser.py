import numpy as np
import pytest

from conftest import numgrad, rel_err
from sidl.denoiser import Denoiser, ddim_sample, denoise, pretrain_denoiser
from sidl.numcore import Tensor, param
from sidl.schedule import make_schedule
from sidl.toyworld import ToyWorld, build_token_dict


@pytest.fixture(scope="module")
def model():
    return Denoiser((1, 4, 4), emb_dim=4, hidden=16, rng=np.random.default_rng(0)).freeze()


def test_denoise_shapes_and_determinism(model, rng):
    z = Tensor(rng.normal(size=(1, 4, 4)))
    c = Tensor(rng.normal(size=32))
    a, b = denoise(model, z, 10, c), denoise(model, z, 10, c)
    assert a.shape == (1, 4, 4) and np.array_equal(a.data, b.data)
    zb = Tensor(rng.normal(size=(3, 1, 4, 4)))
    assert denoise(model, zb, 10, Tensor(rng.normal(size=(3, 32)))).shape == (3, 1, 4, 4)
    with pytest.raises(ValueError):
        denoise(model, Tensor(np.zeros((1, 5, 5))), 10, c)


def test_gradient_wrt_condition(model, rng):
    z = Tensor(rng.normal(size=(1, 4, 4)))
    c = param(rng.normal(size=32))
    f = lambda: (denoise(model, z, 400, c) ** 2).sum()
    f().backward()
    assert rel_err(c.grad, numgrad(lambda: f().item(), c.data)) < 1e-4


def test_checkpoint_state_roundtrip(model, rng):
    clone = Denoiser.from_state(model.state())
    z, c = Tensor(rng.normal(size=(1, 4, 4))), Tensor(rng.normal(size=32))
    assert np.array_equal(denoise(model, z, 5, c).data, denoise(clone, z, 5, c).data)
    assert clone.frozen and clone.checksum() == model.checksum()


@pytest.fixture(scope="module")
def small():
    w = ToyWorld()
    td = build_token_dict(w)
    s = make_schedule()
    return w, td, s


def test_pretrain_boundary_and_determinism(small):
    w, td, s = small
    with pytest.raises(ValueError):
        pretrain_denoiser(w, td, s, 0, np.random.default_rng(0))
    a, sa = pretrain_denoiser(w, td, s, 30, np.random.default_rng(0), hidden=32, eval_batch=32)
    b, sb = pretrain_denoiser(w, td, s, 30, np.random.default_rng(0), hidden=32, eval_batch=32)
    assert a.checksum() == b.checksum() and sa == sb and a.frozen


def test_pretraining_reduces_loss_and_uses_condition(small):
    w, td, s = small
    m, st = pretrain_denoiser(w, td, s, 400, np.random.default_rng(1), hidden=64)
    assert st["loss_end"] < st["loss_start"]
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=(8, 1, 16, 16)))
    g = [td.embeddings.data[list(td.identity_tokens(i)) + [td.context_token(0)]] for i in (0, 1)]
    e0 = denoise(m, z, 500, m.condition(Tensor(np.broadcast_to(g[0], (8, 3, 16)))))
    e1 = denoise(m, z, 500, m.condition(Tensor(np.broadcast_to(g[1], (8, 3, 16)))))
    assert np.mean(np.max(np.abs(e0.data - e1.data), axis=(1, 2, 3))) > 0


def test_ddim_sample_deterministic(model, rng):
    s = make_schedule()
    noise = rng.normal(size=(2, 1, 4, 4))
    c, u = rng.normal(size=(2, 32)), rng.normal(size=32)
    a = ddim_sample(model, c, u, s, noise, n_steps=10)
    b = ddim_sample(model, c, u, s, noise, n_steps=10)
    assert a.shape == (2, 1, 4, 4) and np.array_equal(a, b)
    assert not np.array_equal(a, ddim_sample(model, c, u, s, noise, guidance=1.0, n_steps=10))
