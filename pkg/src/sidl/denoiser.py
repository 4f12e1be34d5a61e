"""Toy conditional noise predictor and its pretraining loop."""
from __future__ import annotations

import logging

import numpy as np

from .checkpoint import params_checksum
from .numcore import MLP, Adam, NumericError, Tensor, as_tensor, concat, no_grad, param
from .schedule import Schedule, forward_noise, predict_z0
from .toyworld import NULL_TOKEN, TokenDict, ToyWorld, context_condition

log = logging.getLogger(__name__)

TIME_DIM = 32
COND_DIM = 32
MAX_PROMPT = 4


def timestep_features(t, dim=TIME_DIM, T=1000):
    """Sinusoidal features of the timestep(s); returns (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = (t / T * 1000.0)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """eps-prediction MLP over [flattened z_t, time features, condition].

    Carries the positional prompt mixer it was pretrained with; both are
    frozen after pretraining.
    """

    def __init__(self, latent_shape=(1, 16, 16), emb_dim=16, hidden=256, depth=3, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_shape = tuple(latent_shape)
        n = int(np.prod(latent_shape))
        self.net = MLP([n + TIME_DIM + COND_DIM] + [hidden] * depth + [n], rng, out_scale=0.1)
        self.mixer = param(rng.normal(0.0, 1.0 / np.sqrt(MAX_PROMPT * emb_dim) / 0.05,
                                      size=(MAX_PROMPT * emb_dim, COND_DIM)))
        self.set_schedule(None)
        self.frozen = False

    def set_schedule(self, s):
        from .schedule import make_schedule

        s = s or make_schedule()
        self.T = s.T
        self.alpha_bar = np.asarray(s.alpha_bar)

    def parameters(self):
        return self.net.parameters() + [self.mixer]

    def freeze(self):
        self.net.freeze()
        self.mixer.requires_grad = False
        self.mixer.grad = None
        self.frozen = True
        return self

    def checksum(self):
        return params_checksum([p.data for p in self.parameters()])

    def state(self):
        out = self.net.state("denoiser.net")
        out["denoiser.mixer"] = self.mixer.data
        out["denoiser.latent_shape"] = np.array(self.latent_shape, dtype=np.float64)
        out["denoiser.alpha_bar"] = self.alpha_bar
        return out

    @classmethod
    def from_state(cls, arrays):
        m = cls.__new__(cls)
        m.net = MLP.from_state(arrays, "denoiser.net")
        m.mixer = param(arrays["denoiser.mixer"])
        m.latent_shape = tuple(int(x) for x in arrays["denoiser.latent_shape"])
        m.alpha_bar = np.array(arrays["denoiser.alpha_bar"])
        m.T = len(m.alpha_bar)
        m.frozen = False
        return m.freeze()

    def condition(self, g):
        return context_condition(g, self.mixer)


def denoise(m: Denoiser, z_t, t, cond):
    """Predict eps for z_t (latent shape, or a batch with a leading axis)."""
    z_t, cond = as_tensor(z_t), as_tensor(cond)
    batched = z_t.shape != m.latent_shape
    if batched and z_t.shape[1:] != m.latent_shape:
        raise ValueError(f"latent shape {z_t.shape} does not match model {m.latent_shape}")
    B = z_t.shape[0] if batched else 1
    t_arr = np.broadcast_to(np.asarray(t), (B,))
    if np.any(t_arr < 1) or np.any(t_arr >= m.T):
        raise ValueError(f"timestep outside [1, {m.T})")
    cond = cond.reshape(B, -1) if cond.ndim == 1 or not batched else cond
    if cond.shape != (B, COND_DIM):
        if cond.shape == (1, COND_DIM):
            cond = cond + Tensor(np.zeros((B, COND_DIM)))
        else:
            raise ValueError(f"condition shape {cond.shape} incompatible with batch {B}")
    flat = z_t.reshape(B, -1)
    x = concat([flat, Tensor(timestep_features(t_arr, T=m.T)), cond], axis=1)
    # the network predicts v = sqrt(ab) eps - sqrt(1 - ab) z0; eps follows exactly
    ab = m.alpha_bar[t_arr - 1][:, None]
    eps = m.net(x) * np.sqrt(ab) + flat * np.sqrt(1.0 - ab)
    return eps.reshape(z_t.shape)


def pretrain_denoiser(world: ToyWorld, tdict: TokenDict, s: Schedule, steps: int, rng,
                      batch=32, lr=1e-3, p_uncond=0.1, hidden=256, eval_batch=256,
                      objective="v"):
    """Train eps-prediction on toy samples; returns (frozen model, stats dict).

    Prompts are [first_i, last_i, ctx_c]; with probability ``p_uncond`` the
    prompt is replaced by the null token so the model also learns the
    unconditional prediction used by classifier-free guidance.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    c = world.config
    model = Denoiser((1, c.size, c.size), c.emb_dim, hidden=hidden, rng=rng)
    model.set_schedule(s)
    opt = Adam(model.parameters(), lr)
    emb = tdict.embeddings.data
    null_row = emb[tdict.id(NULL_TOKEN)][None, None, :]

    # fixed held-out batch to measure progress before and after training
    erng = np.random.default_rng(rng.integers(2**63))
    eval_data = _draw(world, tdict, s, erng, eval_batch)
    loss_start = _eval_loss(model, eval_data)

    n = c.size * c.size
    trace = []
    for step in range(steps):
        z_t, t, eps, g = _draw(world, tdict, s, rng, batch)
        drop = rng.uniform(size=batch) < p_uncond
        cond_c = model.condition(Tensor(g))
        cond_u = model.condition(Tensor(null_row))
        keep = Tensor(~drop[:, None] * 1.0)
        cond = cond_c * keep + cond_u * (1.0 - keep)
        pred = denoise(model, Tensor(z_t.reshape(batch, *model.latent_shape)), t, cond)
        diff = pred.reshape(batch, n) - Tensor(eps)
        if objective == "v":
            # eps error scaled by 1/sqrt(ab) equals the v-prediction error
            diff = diff * Tensor(1.0 / np.sqrt(s.alpha_bar[t - 1])[:, None])
        loss = (diff * diff).mean()
        if not np.isfinite(loss.item()):
            raise NumericError(f"pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.lr = lr * min(1.0, (steps - step) / (0.3 * steps))
        opt.step()
        trace.append(loss.item())
        if step % 2000 == 0:
            log.info("pretrain step %d loss %.4f", step, loss.item())
    loss_end = _eval_loss(model, eval_data)
    model.freeze()
    stats = {"loss_start": loss_start, "loss_end": loss_end,
             "train_loss_first100": float(np.mean(trace[:100])),
             "train_loss_last100": float(np.mean(trace[-100:]))}
    return model, stats


def _draw(world, tdict, s, rng, batch):
    c = world.config
    ids = rng.integers(0, c.n_identities, size=batch)
    ctxs = rng.integers(0, c.n_contexts, size=batch)
    z0 = world.gen_batch(ids, ctxs, rng)
    t = rng.integers(1, s.T, size=batch)
    eps = rng.standard_normal(z0.shape)
    ab = s.alpha_bar[t - 1][:, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
    tok = np.array([tdict.identity_tokens(i) + (tdict.context_token(k),) for i, k in zip(ids, ctxs)])
    return z_t, t, eps, tdict.embeddings.data[tok]


def _eval_loss(model, data):
    z_t, t, eps, g = data
    with no_grad():
        pred = denoise(model, Tensor(z_t.reshape(len(t), *model.latent_shape)), t,
                       model.condition(Tensor(g)))
    return float(np.mean((pred.data.reshape(len(t), -1) - eps) ** 2))


def noise_loss(model, z0, t, eps, cond, s):
    """Plain eps-prediction loss for one sample (used by tests and ablations)."""
    z_t = forward_noise(z0, t, eps, s)
    d = denoise(model, z_t, t, cond) - as_tensor(eps)
    return (d * d).mean()


def ddim_sample(model: Denoiser, cond, uncond, s: Schedule, noise, guidance=8.5, n_steps=50,
                clip_x0=True):
    """Deterministic DDIM + classifier-free guidance from starting noise (B, *latent).

    ``cond`` is (B, k) or (k,); ``uncond`` is the null-prompt condition (k,).
    Returns the final clean estimate as a numpy array.
    """
    from .schedule import cfg_combine, ddim_step, ddim_timesteps

    z = Tensor(noise)
    B = z.shape[0]
    cond = as_tensor(cond).data.reshape(-1, COND_DIM)
    cond = np.broadcast_to(cond, (B, COND_DIM))
    uncond = np.broadcast_to(as_tensor(uncond).data.reshape(1, COND_DIM), (B, COND_DIM))
    ladder = ddim_timesteps(s, n_steps)
    with no_grad():
        for t, t_prev in zip(ladder[:-1], ladder[1:]):
            both = denoise(model, Tensor(np.concatenate([z.data, z.data])), t,
                           Tensor(np.concatenate([uncond, cond])))
            eps = cfg_combine(both.data[:B], both.data[B:], guidance) if guidance != 1 else Tensor(both.data[B:])
            if clip_x0:
                # static thresholding: keep the clean estimate inside the data range
                ab = s.ab(t)
                x0 = np.clip(predict_z0(z, eps, t, s).data, -1.0, 1.0)
                eps = Tensor((z.data - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab))
            z = ddim_step(z, eps, t, t_prev, s)
    return z.data
