"""One-shot identity learning with a masked two-phase diffusion loss.

A frozen identity extractor encodes the input image, a small trainable
projector maps the features to two word embeddings, AdaIN lands them into
the prior space, and the projector is optimised through the frozen denoiser.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import params_checksum
from .denoiser import Denoiser, denoise
from .numcore import MLP, Adam, NumericError, Tensor, as_tensor, make_optimizer, no_grad
from .priorspace import PriorSpace, adain_land
from .schedule import Schedule, forward_noise, predict_z0
from .toyworld import TokenDict, ToyWorld, compose_prompt

log = logging.getLogger(__name__)

FEATURE_DIM = 64
NOISE, RECONSTRUCTION = "noise", "reconstruction"


@dataclass
class TrainConfig:
    alpha: float = 0.6
    beta_hair: float = 0.1
    steps: int = 450
    learning_rate: float = 5e-5
    batch: int = 1
    guidance_scale: float = 8.5
    seed: int = 0
    optimizer: str = "adam"
    use_adain: bool = True
    use_mask: bool = True
    mask_normalized: bool = False
    loss_mode: str = "two_phase"
    prompt_mode: str = "context"
    augment: bool = True

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta_hair < 0:
            raise ValueError("beta_hair must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.loss_mode not in ("two_phase", "noise_only", "rec_only"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.prompt_mode not in ("context", "bare"):
            raise ValueError(f"unknown prompt_mode {self.prompt_mode!r}")

    def to_dict(self):
        return asdict(self)


# -- encoders ----------------------------------------------------------------

class IdentityExtractor:
    """Identity classifier; its penultimate activations are the feature vector."""

    kind = "identity_extractor"

    def __init__(self, net: MLP):
        self.net = net

    def features(self, images):
        x = as_tensor(images)
        x = x.reshape(-1, x.size // max(1, _batch(x)))
        _, hidden = self.net(x, return_hidden=True)
        return hidden

    def logits(self, images):
        x = as_tensor(images)
        return self.net(x.reshape(-1, x.size // max(1, _batch(x))))

    def parameters(self):
        return self.net.parameters()

    def state(self):
        return self.net.state("extractor")


class GenericEncoder:
    """Fixed random tanh features; not trained for identity (the CLIP-encoder stand-in)."""

    kind = "generic_features"

    def __init__(self, n_in=256, dim=FEATURE_DIM, seed=0):
        rng = np.random.default_rng([seed, 0xC11F])
        self.W = Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, dim)) * 2.0)

    def features(self, images):
        x = as_tensor(images)
        x = x.reshape(-1, self.W.shape[0])
        return (x @ self.W).tanh()

    def parameters(self):
        return [self.W]


def _batch(x):
    # images are (1, H, W) singles or (B, 1, H, W) / (B, H*W) batches
    return 1 if x.ndim == 3 else x.shape[0]


def train_extractor(world: ToyWorld, rng, steps=3000, batch=64, lr=2e-3, p_masked=0.5):
    """Identity classification over the named identities.

    Half the inputs are face-masked (background zeroed) so features of the
    masked face region agree with those of the full image.
    """
    c = world.config
    n = c.size * c.size
    net = MLP([n, 128, FEATURE_DIM, c.n_identities], rng)
    opt = Adam(net.parameters(), lr)
    fg_masks = np.array([world.foreground(i)[1].ravel() for i in range(c.n_identities)])
    for step in range(steps):
        ids = rng.integers(0, c.n_identities, size=batch)
        ctxs = rng.integers(0, c.n_contexts, size=batch)
        x = world.gen_batch(ids, ctxs, rng)
        masked = rng.uniform(size=batch) < p_masked
        x = np.where(masked[:, None], x * fg_masks[ids], x)
        logp = net(Tensor(x)).log_softmax(axis=1)
        onehot = np.zeros((batch, c.n_identities))
        onehot[np.arange(batch), ids] = 1.0
        loss = -(logp * Tensor(onehot)).sum() * (1.0 / batch)
        opt.zero_grad()
        loss.backward()
        opt.lr = lr * min(1.0, (steps - step) / (0.3 * steps))
        opt.step()
    net.freeze()
    return IdentityExtractor(net)


def extractor_margins(extractor, world: ToyWorld, identity_ids, rng):
    """Mean within-identity vs across-identity feature cosine, two contexts per identity."""
    c = world.config
    feats = []
    for ident in identity_ids:
        ctx = rng.choice(c.n_contexts, size=2, replace=False)
        x = world.gen_batch([ident, ident], ctx, rng)
        with no_grad():
            feats.append(extractor.features(Tensor(x)).data)
    feats = np.array(feats)
    unit = feats / np.linalg.norm(feats, axis=-1, keepdims=True)
    within = float(np.mean(np.sum(unit[:, 0] * unit[:, 1], axis=-1)))
    sims = unit[:, 0] @ unit[:, 1].T
    off = ~np.eye(len(identity_ids), dtype=bool)
    across = float(np.mean(sims[off]))
    return {"within": within, "across": across, "margin": within - across}


# -- identity head -----------------------------------------------------------

class IdentityHead:
    def __init__(self, encoder, projector: MLP, emb_dim: int):
        self.encoder = encoder
        self.projector = projector
        self.emb_dim = emb_dim

    @classmethod
    def create(cls, encoder, emb_dim, rng, hidden=64):
        projector = MLP([FEATURE_DIM, hidden, hidden, 2 * emb_dim], rng)
        return cls(encoder, projector, emb_dim)

    def parameters(self):
        return self.projector.parameters()

    def project(self, I):
        out = self.projector(as_tensor(I).reshape(-1))
        return out.reshape(2, self.emb_dim)

    def encoder_checksum(self):
        return params_checksum([p.data for p in self.encoder.parameters()])

    def state(self):
        return self.projector.state("projector")


def encode_identity(image, head: IdentityHead) -> Tensor:
    image = as_tensor(image)
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) latent image, got {image.shape}")
    with no_grad():
        return head.encoder.features(image).reshape(-1)


def _priors(prior):
    return prior if isinstance(prior, tuple) else (prior, prior)


def project_and_land(I, head: IdentityHead, prior, use_adain=True):
    """Two landed word embeddings for features ``I`` (differentiable in the projector)."""
    v = head.project(I)
    if not use_adain:
        return v[0], v[1]
    p1, p2 = _priors(prior)
    return adain_land(v[0], p1), adain_land(v[1], p2)


# -- loss ---------------------------------------------------------------------

def select_loss_branch(t, alpha, T):
    if not 1 <= t < T:
        raise ValueError(f"timestep {t} outside [1, {T})")
    return NOISE if t >= alpha * T else RECONSTRUCTION


def loss_branch(t, cfg: TrainConfig, T):
    if cfg.loss_mode == "noise_only":
        return NOISE
    if cfg.loss_mode == "rec_only":
        return RECONSTRUCTION
    return select_loss_branch(t, cfg.alpha, T)


def error_map(eps_hat, z_t, z0, eps, t, s: Schedule, branch):
    """Per-element squared error for the chosen branch."""
    if branch == NOISE:
        d = as_tensor(eps_hat) - as_tensor(eps)
    else:
        d = predict_z0(z_t, eps_hat, t, s) - as_tensor(z0)
    return d * d


def masked_reduce(err, mask_face, mask_hair, beta, use_mask=True, normalized=False):
    if not use_mask:
        return err.mean()
    mf, mh = Tensor(mask_face), Tensor(mask_hair)
    if normalized:
        face = (err * mf).sum() * (1.0 / max(mf.data.sum() * err.shape[0], 1.0))
        hair = (err * mh).sum() * (1.0 / max(mh.data.sum() * err.shape[0], 1.0))
    else:
        face = (err * mf).mean()
        hair = (err * mh).mean()
    return face + hair * beta


def masked_two_phase_loss(sample, g, t, eps, model: Denoiser, s: Schedule, cfg: TrainConfig):
    """Masked two-phase loss for one sample and embedding group ``g``.

    Returns the scalar loss tensor; the chosen branch is available from
    ``loss_branch(t, cfg, s.T)``.
    """
    z0 = as_tensor(sample.z0)
    z_t = forward_noise(z0, t, eps, s)
    eps_hat = denoise(model, z_t, t, model.condition(g))
    branch = loss_branch(t, cfg, s.T)
    err = error_map(eps_hat, z_t, z0, eps, t, s, branch)
    return masked_reduce(err, sample.mask_face, sample.mask_hair, cfg.beta_hair,
                         cfg.use_mask, cfg.mask_normalized)


# -- augmentation --------------------------------------------------------------

def _shift(a, dy, dx, fill):
    out = np.full_like(a, fill)
    H, W = a.shape
    ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
    xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
    out[yd, xd] = a[ys, xs]
    return out


def _crop_resize(a, top, left, size):
    H, W = a.shape
    rows = top + (np.arange(H) * size) // H
    cols = left + (np.arange(W) * size) // W
    return a[np.ix_(rows, cols)]


def augment(image, masks, rng, jitter=0.1, max_shift=2, min_crop=13):
    """Colour jitter, integer shift, random crop + nearest-neighbour resize.

    Masks are moved exactly like the image.  ``jitter=0, max_shift=0,
    min_crop=H`` is the identity transform.
    """
    img = np.array(as_tensor(image).data)
    mf, mh = (np.array(m, dtype=np.float64) for m in masks)
    C, H, W = img.shape
    scale = 1.0 + rng.uniform(-jitter, jitter)
    offset = rng.uniform(-jitter, jitter)
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    crop = int(rng.integers(min_crop, H + 1))
    top, left = rng.integers(0, H - crop + 1), rng.integers(0, W - crop + 1)
    planes = []
    for ch in range(C):
        p = np.clip(img[ch] * scale + offset, -1.0, 1.0)
        p = _shift(p, int(dy), int(dx), fill=float(np.median(p)))
        planes.append(_crop_resize(p, top, left, crop))
    mf = _crop_resize(_shift(mf, int(dy), int(dx), 0.0), top, left, crop)
    mh = _crop_resize(_shift(mh, int(dy), int(dx), 0.0), top, left, crop)
    return Tensor(np.stack(planes)), (mf, mh)


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    head: IdentityHead
    embeddings: np.ndarray
    trace: list
    checksums: dict


class _Sample:
    __slots__ = ("z0", "mask_face", "mask_hair")

    def __init__(self, z0, mf, mh):
        self.z0, self.mask_face, self.mask_hair = z0, mf, mh


def training_prompt(step, tdict: TokenDict, n_contexts, mode="context"):
    p1, p2 = tdict.placeholder_ids
    if mode == "bare":
        return [p1, p2]
    return [p1, p2, tdict.context_token(step % n_contexts)]


def final_embeddings(image, head, prior, use_adain=True):
    I = encode_identity(image, head)
    with no_grad():
        v1, v2 = project_and_land(I, head, prior, use_adain)
    return np.stack([v1.data, v2.data])


def stratified_timesteps(n, T, rng, block=50):
    """``n`` timesteps in [1, T), each marginally uniform.

    Every run of ``block`` consecutive draws covers ``block`` equal strata
    once, so windowed means of the loss trace are comparable.
    """
    out = np.empty(n, dtype=np.int64)
    for start in range(0, n, block):
        k = min(block, n - start)
        u = (rng.permutation(block)[:k] + rng.uniform(size=k)) / block
        out[start:start + k] = 1 + np.minimum((u * (T - 1)).astype(np.int64), T - 2)
    return out


def train_customizer(image, masks, model: Denoiser, prior, tdict: TokenDict, s: Schedule,
                     cfg: TrainConfig, head: IdentityHead, n_contexts=8):
    """Optimise ``head.projector`` on one image; everything else stays frozen.

    Each step draws an augmentation, a timestep uniform over [1, T) (stratified
    in blocks, see ``stratified_timesteps``) and a noise
    sample, builds the prompt "[v1*][v2*] <context>" from the current landed
    embeddings, and takes one optimiser step on the masked two-phase loss.
    """
    if not model.frozen:
        raise ValueError("the denoiser must be frozen before customization")
    rng = np.random.default_rng([cfg.seed, 0xC057])
    image = as_tensor(image)
    before = {"denoiser": model.checksum(), "dictionary": params_checksum([tdict.embeddings.data]),
              "encoder": head.encoder_checksum()}
    opt = make_optimizer(cfg.optimizer, head.parameters(), cfg.learning_rate)
    trace = []
    ts = stratified_timesteps(cfg.steps * cfg.batch, s.T, rng)
    for step in range(cfg.steps):
        opt.zero_grad()
        total = 0.0
        for b in range(cfg.batch):
            if cfg.augment:
                img, (mf, mh) = augment(image, masks, rng)
            else:
                img, (mf, mh) = image, masks
            I = encode_identity(img, head)
            v1, v2 = project_and_land(I, head, prior, cfg.use_adain)
            g = compose_prompt(training_prompt(step, tdict, n_contexts, cfg.prompt_mode), tdict, (v1, v2))
            t = int(ts[step * cfg.batch + b])
            eps = Tensor(rng.standard_normal(image.shape))
            loss = masked_two_phase_loss(_Sample(img, mf, mh), g, t, eps, model, s, cfg)
            if not np.isfinite(loss.item()):
                raise NumericError(f"loss became non-finite at step {step} (t={t})")
            (loss * (1.0 / cfg.batch)).backward()
            total += loss.item() / cfg.batch
            trace.append((step, t, loss_branch(t, cfg, s.T), loss.item()))
        opt.step()
        for p in head.parameters():
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"projector parameters diverged at step {step}")
    after = {"denoiser": model.checksum(), "dictionary": params_checksum([tdict.embeddings.data]),
             "encoder": head.encoder_checksum()}
    if after != before:
        raise RuntimeError(f"frozen parameters changed during customization: {before} -> {after}")
    emb = final_embeddings(image, head, prior, cfg.use_adain)
    return TrainResult(head, emb, trace, after)
