"""Procedural "identities in contexts" world and its token dictionary.

An identity is a shaded ellipse (the face) with a thin band along its upper
rim (the hair).  A context is a striped background pattern.  Each draw also
jitters the stripe phase and the face lighting, which no prompt controls.  Images are single-channel 16x16 latents with values in [-1, 1];
there is no autoencoder, the toy image *is* the latent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import Tensor, as_tensor, concat, matmul

IDENTITY_PARAM_NAMES = ("cx", "cy", "rx", "ry", "hair", "tone", "gx", "gy", "hair_tone", "eye")
# lower / upper bound of each identity parameter
_PARAM_RANGES = np.array([
    [6.5, 9.5],    # cx
    [6.5, 9.0],    # cy
    [3.0, 4.8],    # rx
    [3.0, 4.8],    # ry
    [1.0, 2.2],    # hair band thickness
    [0.1, 0.9],    # face tone
    [-0.4, 0.4],   # horizontal shading
    [-0.4, 0.4],   # vertical shading
    [-0.9, -0.4],  # hair tone
    [1.0, 2.0],    # eye spacing
])
BG_AMPLITUDE = 0.6
PHASE_JITTER = 0.5
LIGHT_JITTER = 0.25


@dataclass
class ToySample:
    z0: Tensor
    identity_id: int
    context_id: int
    mask_face: np.ndarray
    mask_hair: np.ndarray

    @property
    def masks(self):
        return self.mask_face, self.mask_hair


@dataclass
class WorldConfig:
    n_identities: int = 64
    n_heldout: int = 16
    n_contexts: int = 8
    size: int = 16
    emb_dim: int = 16
    emb_scale: float = 0.05
    seed: int = 0


def face_region(params, size):
    cx, cy, rx, ry = params[:4]
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0


def hair_region(params, size):
    cx, cy, rx, ry, h = params[:5]
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    outer = ((x - cx) / (rx + h)) ** 2 + ((y - cy) / (ry + h)) ** 2 <= 1.0
    return outer & ~face_region(params, size) & (y <= cy)


def context_pattern(context_id, phase, size, n_contexts=8):
    """Stripes: orientation from ``context_id % 4``, frequency from the upper half."""
    theta = np.pi * (context_id % 4) / 4
    freq = 1.5 if context_id < n_contexts // 2 else 3.0
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    u = x * np.cos(theta) + y * np.sin(theta)
    return BG_AMPLITUDE * np.cos(2 * np.pi * freq * u / size + phase)


class ToyWorld:
    def __init__(self, config: WorldConfig | None = None):
        self.config = config or WorldConfig()
        c = self.config
        rng = np.random.default_rng([c.seed, 0xFACE])
        n = c.n_identities + c.n_heldout
        u = rng.uniform(size=(n, len(_PARAM_RANGES)))
        self.identity_params = _PARAM_RANGES[:, 0] + u * (_PARAM_RANGES[:, 1] - _PARAM_RANGES[:, 0])
        self._fg = {}

    @property
    def n_total_identities(self):
        return self.config.n_identities + self.config.n_heldout

    def heldout_ids(self):
        c = self.config
        return list(range(c.n_identities, c.n_identities + c.n_heldout))

    def normalized_params(self, identity_id):
        lo, hi = _PARAM_RANGES[:, 0], _PARAM_RANGES[:, 1]
        return 2 * (self.identity_params[identity_id] - lo) / (hi - lo) - 1

    def _check(self, identity_id, context_id):
        if not 0 <= identity_id < self.n_total_identities:
            raise ValueError(f"identity {identity_id} out of range")
        if not 0 <= context_id < self.config.n_contexts:
            raise ValueError(f"context {context_id} out of range")

    def foreground(self, identity_id):
        """(face/hair pixel values, face mask, hair mask) for one identity."""
        if identity_id in self._fg:
            return self._fg[identity_id]
        size = self.config.size
        p = self.identity_params[identity_id]
        cx, cy, rx, ry, _, tone, gx, gy, hair_tone, eye = p
        face = face_region(p, size)
        hair = hair_region(p, size)
        y, x = np.mgrid[0:size, 0:size].astype(np.float64)
        values = np.clip(tone + gx * (x - cx) / rx + gy * (y - cy) / ry, -1.0, 1.0)
        ey = int(round(cy - 1))
        for ex in (int(round(cx - eye)), int(round(cx + eye))):
            if face[ey, ex]:
                values[ey, ex] = tone - 0.9
        values = np.where(face, values, 0.0)
        values = np.where(hair, hair_tone, values)
        fg = (np.clip(values, -1, 1), face.astype(np.float64), hair.astype(np.float64))
        for a in fg:
            a.setflags(write=False)
        self._fg[identity_id] = fg
        return fg

    def render(self, identity_id, context_id, phase, light=0.0):
        """Image for fixed nuisance values (background phase, face lighting offset)."""
        values, face, hair = self.foreground(identity_id)
        bg = context_pattern(context_id, phase, self.config.size, self.config.n_contexts)
        img = np.where(face > 0, np.clip(values + light, -1.0, 1.0), values)
        return np.where((face + hair) > 0, img, bg)

    def compose(self, identity_id, context_id, phase, light=0.0):
        self._check(identity_id, context_id)
        _, face, hair = self.foreground(identity_id)
        img = self.render(identity_id, context_id, phase, light)
        return ToySample(Tensor(img[None]), identity_id, context_id, face.copy(), hair.copy())

    def _nuisance(self, u):
        return (2 * u[..., 0] - 1) * PHASE_JITTER, (2 * u[..., 1] - 1) * LIGHT_JITTER

    def gen_sample(self, identity_id, context_id, rng):
        self._check(identity_id, context_id)
        phase, light = self._nuisance(rng.uniform(size=2))
        return self.compose(identity_id, context_id, phase, light)

    def gen_batch(self, identity_ids, context_ids, rng):
        """Flattened images; row i equals the i-th of successive ``gen_sample`` calls on ``rng``."""
        phases, lights = self._nuisance(rng.uniform(size=(len(identity_ids), 2)))
        imgs = np.empty((len(identity_ids), self.config.size * self.config.size))
        for i, (ident, ctx) in enumerate(zip(identity_ids, context_ids)):
            self._check(int(ident), int(ctx))
            imgs[i] = self.render(int(ident), int(ctx), phases[i], lights[i]).ravel()
        return imgs


# -- token dictionary --------------------------------------------------------

PLACEHOLDER_1 = "<v1*>"
PLACEHOLDER_2 = "<v2*>"
NULL_TOKEN = "<null>"


@dataclass
class TokenDict:
    vocab: list
    embeddings: Tensor
    index: dict = field(init=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def placeholder_ids(self):
        return self.index[PLACEHOLDER_1], self.index[PLACEHOLDER_2]

    def id(self, token):
        try:
            return self.index[token]
        except KeyError:
            raise KeyError(f"unknown token {token!r}") from None

    def identity_tokens(self, identity_id):
        return self.id(f"first_{identity_id}"), self.id(f"last_{identity_id}")

    def context_token(self, context_id):
        return self.id(f"ctx_{context_id}")

    def identity_rows(self):
        """(n_identities, 2, d) first/last embeddings of every named identity."""
        n = sum(tok.startswith("first_") for tok in self.vocab)
        ids = [self.identity_tokens(i) for i in range(n)]
        return self.embeddings.data[np.array(ids)]


def build_token_dict(world: ToyWorld) -> TokenDict:
    """Deterministic dictionary for the named (pretraining) identities.

    Identity embeddings are a fixed linear read-out of the identity geometry
    plus jitter, so the embedding space is smooth in identity parameters.
    First-name and last-name rows share a common offset.
    """
    c = world.config
    rng = np.random.default_rng([c.seed, 0x70CE])
    d, k = c.emb_dim, len(IDENTITY_PARAM_NAMES)
    s = c.emb_scale
    offset = rng.normal(0.0, s, size=d)
    read_first = rng.normal(0.0, s / np.sqrt(k), size=(k, d))
    read_last = rng.normal(0.0, s / np.sqrt(k), size=(k, d))
    vocab, rows = [], []
    for i in range(c.n_identities):
        p = world.normalized_params(i)
        vocab += [f"first_{i}", f"last_{i}"]
        rows.append(offset + p @ read_first + rng.normal(0.0, 0.2 * s, size=d))
        rows.append(offset + p @ read_last + rng.normal(0.0, 0.2 * s, size=d))
    for j in range(c.n_contexts):
        vocab.append(f"ctx_{j}")
        rows.append(rng.normal(0.0, s, size=d))
    vocab.append(NULL_TOKEN)
    rows.append(rng.normal(0.0, s, size=d))
    # placeholder rows are never read; compose_prompt substitutes the learned vectors
    vocab += [PLACEHOLDER_1, PLACEHOLDER_2]
    rows += [np.zeros(d), np.zeros(d)]
    emb = np.array(rows)
    emb.setflags(write=False)
    return TokenDict(vocab, Tensor(emb))


def compose_prompt(tokens, tdict: TokenDict, placeholders=None) -> Tensor:
    """Embedding group (l x d) for a token-id list.

    ``placeholders`` is the pair of learned vectors substituted for the two
    placeholder ids; they may be tracked tensors so gradients reach them.
    """
    if len(tokens) == 0:
        raise ValueError("empty prompt")
    p1, p2 = tdict.placeholder_ids
    V = len(tdict.vocab)
    rows = []
    for tok in tokens:
        if not 0 <= tok < V:
            raise KeyError(f"unknown token id {tok}")
        if tok in (p1, p2):
            if placeholders is None:
                raise ValueError("prompt uses placeholders but none were supplied")
            rows.append(as_tensor(placeholders[0 if tok == p1 else 1]).reshape(1, -1))
        else:
            rows.append(tdict.embeddings[tok:tok + 1])
    return rows[0] if len(rows) == 1 else concat(rows, axis=0)


def context_condition(g, mixer_weights) -> Tensor:
    """Fixed positional linear mixer standing in for the text transformer.

    cond = sum_i g[i] @ W[i].  ``g`` may be (l, d) or a batch (B, l, d);
    ``mixer_weights`` has shape (L_max * d, k).
    """
    g = as_tensor(g)
    W = as_tensor(mixer_weights)
    batched = g.ndim == 3
    if g.ndim not in (2, 3) or g.shape[-2] == 0:
        raise ValueError(f"embedding group must be (l, d) or (B, l, d), got {g.shape}")
    l, d = g.shape[-2:]
    if l * d > W.shape[0]:
        raise ValueError(f"prompt of length {l} exceeds the mixer's {W.shape[0] // d} positions")
    flat = g.reshape(-1, l * d)
    cond = matmul(flat, W[: l * d])
    return cond if batched else cond.reshape(-1)


def to_pgm(img, path):
    """Write a [-1, 1] image as binary 8-bit PGM (P5)."""
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    arr = arr.reshape(arr.shape[-2:])
    px = np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    _write_p5(px, path)


def mask_to_pgm(mask, path):
    px = (np.asarray(mask) > 0).astype(np.uint8) * 255
    _write_p5(px, path)


def _write_p5(px, path):
    h, w = px.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(px.tobytes())


def read_pgm(path):
    """Read P5 PGM back to a float array in [-1, 1] (and the raw bytes)."""
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    px = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return px.astype(np.float64) / maxval * 2.0 - 1.0
