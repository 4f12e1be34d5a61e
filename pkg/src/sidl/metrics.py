"""Evaluation battery: identity similarity, diversity, trusted diversity,
Fréchet distance and prompt alignment."""
from __future__ import annotations

import csv
import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .numcore import MLP, Adam, Tensor, as_tensor, no_grad

EVAL_COLUMNS = ("clip_i_analog", "prompt_alignment", "identity_similarity", "diversity",
                "trusted_diversity", "frechet")


@dataclass
class EvalReport:
    identity_similarity: float
    diversity: float
    trusted_diversity: float
    frechet: float
    prompt_alignment: float
    sample_count: int
    clip_i_analog: float = float("nan")

    def __post_init__(self):
        if -1e-8 <= self.frechet < 0:
            self.frechet = 0.0

    def row(self):
        d = asdict(self)
        return [d[c] for c in EVAL_COLUMNS]


def _arr(x):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def cosine(a, b):
    a, b = _arr(a).ravel(), _arr(b).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def _features(encoder, images):
    with no_grad():
        return encoder.features(Tensor(np.stack([_arr(im).reshape(-1) for im in images]))).data


def face_region(images, mask):
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    return [_arr(im).reshape(-1) * m for im in images]


def identity_similarity(generated, reference, head, mask_face=None):
    """Mean cosine between extractor features of generated and reference faces."""
    if len(generated) == 0:
        raise ValueError("no generated samples")
    imgs = list(generated) + [reference]
    if mask_face is not None:
        imgs = face_region(imgs, mask_face)
    feats = _features(head.encoder if hasattr(head, "encoder") else head, imgs)
    ref = feats[-1]
    return float(np.mean([cosine(f, ref) for f in feats[:-1]]))


def perceptual_features(img, mask=None):
    """Fixed perceptual descriptor: centred face-region pixels plus finite differences."""
    a = _arr(img).reshape(_arr(img).shape[-2:])
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        a = a * m
        a = a - m * (a.sum() / max(m.sum(), 1.0))
    else:
        a = a - a.mean()
    return np.concatenate([a.ravel(), np.diff(a, axis=0).ravel(), np.diff(a, axis=1).ravel()])


def pairwise_diversity(generated, feature_fn=perceptual_features):
    """Mean cosine distance over all unordered pairs."""
    if len(generated) < 2:
        raise ValueError("diversity needs at least two samples")
    feats = [feature_fn(g) for g in generated]
    return float(np.mean([1.0 - cosine(a, b) for a, b in itertools.combinations(feats, 2)]))


def trusted_terms(similarities, distances):
    """Per-pair products: mean of the two identity similarities times the pair distance."""
    sims = list(similarities)
    return [0.5 * (sims[i] + sims[j]) * distances[(i, j)]
            for i, j in itertools.combinations(range(len(sims)), 2)]


def trusted_diversity(generated, reference, head, mask_face=None, feature_fn=None):
    if len(generated) < 2:
        raise ValueError("trusted diversity needs at least two samples")
    feature_fn = feature_fn or (lambda im: perceptual_features(im, mask_face))
    sims = [identity_similarity([g], reference, head, mask_face) for g in generated]
    feats = [feature_fn(g) for g in generated]
    dist = {(i, j): 1.0 - cosine(feats[i], feats[j])
            for i, j in itertools.combinations(range(len(feats)), 2)}
    return float(np.mean(trusted_terms(sims, dist)))


def _sqrt_psd(S):
    w, V = np.linalg.eigh((S + S.T) / 2)
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def frechet_distance(feats_a, feats_b):
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)), population covariances.

    The trace of the product square root is taken from the eigenvalues of the
    symmetric form Sa^(1/2) Sb Sa^(1/2), negatives clamped to zero.
    """
    a, b = _arr(feats_a), _arr(feats_b)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or len(a) < 1 or len(b) < 1:
        raise ValueError(f"incompatible feature sets {a.shape} and {b.shape}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    Sa = np.cov(a, rowvar=False, bias=True).reshape(a.shape[1], a.shape[1])
    Sb = np.cov(b, rowvar=False, bias=True).reshape(b.shape[1], b.shape[1])
    root_a = _sqrt_psd(Sa)
    M = root_a @ Sb @ root_a
    w = np.linalg.eigvalsh((M + M.T) / 2)
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0, None))))
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(Sa) + np.trace(Sb) - 2 * tr_sqrt)
    return 0.0 if -1e-8 <= d < 0 else d


# -- context probe -----------------------------------------------------------

class ContextProbe:
    """Frozen context classifier standing in for text-image similarity."""

    def __init__(self, net: MLP):
        self.net = net

    @property
    def n_contexts(self):
        return self.net.sizes[-1]

    def probabilities(self, images):
        x = np.stack([_arr(im).reshape(-1) for im in images])
        with no_grad():
            return np.exp(self.net(Tensor(x)).log_softmax(axis=1).data)

    def parameters(self):
        return self.net.parameters()


def train_probe(world, rng, steps=2000, batch=64, lr=2e-3, p_noise=0.15):
    """Context classifier on toy samples.

    A fraction of each batch is uniform noise with a uniform target so the
    probe is calibrated to chance on images without any pattern.
    """
    c = world.config
    n = c.size * c.size
    net = MLP([n, 64, c.n_contexts], rng)
    opt = Adam(net.parameters(), lr)
    for step in range(steps):
        ids = rng.integers(0, world.n_total_identities, size=batch)
        ctxs = rng.integers(0, c.n_contexts, size=batch)
        x = world.gen_batch(ids, ctxs, rng)
        target = np.zeros((batch, c.n_contexts))
        target[np.arange(batch), ctxs] = 1.0
        noisy = rng.uniform(size=batch) < p_noise
        x[noisy] = rng.uniform(-1, 1, size=(int(noisy.sum()), n))
        target[noisy] = 1.0 / c.n_contexts
        logp = net(Tensor(x)).log_softmax(axis=1)
        loss = -(logp * Tensor(target)).sum() * (1.0 / batch)
        opt.zero_grad()
        loss.backward()
        opt.lr = lr * min(1.0, (steps - step) / (0.3 * steps))
        opt.step()
    net.freeze()
    return ContextProbe(net)


def prompt_alignment(generated, context_id, probe: ContextProbe):
    if len(generated) == 0:
        raise ValueError("no generated samples")
    if not 0 <= context_id < probe.n_contexts:
        raise ValueError(f"unknown context {context_id}")
    return float(np.mean(probe.probabilities(generated)[:, context_id]))


def probe_accuracy(probe, world, rng, n=512):
    c = world.config
    ids = rng.integers(0, world.n_total_identities, size=n)
    ctxs = rng.integers(0, c.n_contexts, size=n)
    x = world.gen_batch(ids, ctxs, rng)
    return float(np.mean(probe.probabilities(x).argmax(axis=1) == ctxs))


def write_eval_csv(rows, path, key_columns=("identity", "prompt_set")):
    """``rows`` is a list of (keys tuple, EvalReport)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(list(key_columns) + list(EVAL_COLUMNS) + ["sample_count"])
        for keys, rep in rows:
            w.writerow(list(keys) + [_fmt(v) for v in rep.row()] + [rep.sample_count])


def _fmt(v):
    return f"{v:.10g}"
