"""Prior embedding space built from named identities, and AdaIN landing into it."""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .numcore import Tensor, as_tensor

EPS_STD = 1e-8


@dataclass(frozen=True)
class PriorSpace:
    C: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray

    @property
    def n(self):
        return self.C.shape[0]

    @property
    def d(self):
        return self.C.shape[1]


def build_prior(rows) -> PriorSpace:
    C = np.array(rows.data if isinstance(rows, Tensor) else rows, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] < 2:
        raise ValueError("a prior needs at least two rows")
    mu = C.mean(axis=0)
    sigma = np.sqrt(((C - mu) ** 2).mean(axis=0))
    flat = np.flatnonzero(sigma == 0)
    if flat.size:
        raise ValueError(f"prior dimensions {flat.tolist()} have zero spread")
    arrays = (C, mu, sigma, C.min(axis=0), C.max(axis=0))
    for a in arrays:
        a.setflags(write=False)
    return PriorSpace(*arrays)


def adain_land(v_prime, prior: PriorSpace, eps_std=EPS_STD) -> Tensor:
    """Standardise ``v_prime`` by its own scalar mean/std, then rescale per dimension.

    A single tape op; the backward is the usual normalisation gradient
    (sigma_C * g, minus its mean and its projection on the standardised input, over std).
    """
    v = as_tensor(v_prime)
    if v.shape != (prior.d,):
        raise ValueError(f"expected a {prior.d}-vector, got shape {v.shape}")
    x = v.data
    m = x.mean()
    s = np.sqrt(((x - m) ** 2).mean())
    if s <= eps_std:
        raise ValueError(f"input spread {s:.3g} too small to standardise")
    xhat = (x - m) / s

    def back(g):
        gs = g * prior.sigma
        return ((gs - gs.mean() - xhat * (gs * xhat).mean()) / s,)

    return Tensor._make(prior.sigma * xhat + prior.mu, (v,), back, "adain")


def slot_priors(identity_rows, mode="shared"):
    """Priors for the two placeholder slots from (n, 2, d) first/last rows.

    ``shared`` pools both slots into one 2n-row prior; ``separate`` builds one
    prior per slot.
    """
    rows = np.asarray(identity_rows)
    if mode == "shared":
        p = build_prior(rows.reshape(-1, rows.shape[-1]))
        return p, p
    if mode == "separate":
        return build_prior(rows[:, 0]), build_prior(rows[:, 1])
    raise ValueError(f"unknown prior mode {mode!r}")


def prior_arrays(prior: PriorSpace, prefix="prior"):
    return {f"{prefix}.C": prior.C}


def write_prior_csv(prior: PriorSpace, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dimension", "mu", "sigma", "min", "max"])
        for j in range(prior.d):
            w.writerow([j] + [repr(float(x)) for x in
                              (prior.mu[j], prior.sigma[j], prior.vmin[j], prior.vmax[j])])


# -- name filtering ----------------------------------------------------------

TOY_SUBWORDS = (
    "tom", "cruise", "emma", "stone", "brad", "pitt", "anne", "hat", "away", "zoo", "ey",
    "des", "chan", "el", "kate", "win", "slet", "ryan", "gos", "ling", "will", "smith",
    "lee", "park", "mar", "got", "rob", "bie", "jo", "hn", "son", "ann", "a", "e", "i",
    "o", "u", "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "q", "r", "s",
    "t", "v", "w", "x", "y", "z",
)


class GreedyTokenizer:
    """Greedy longest-match word splitter over a fixed subword list.

    Single letters are in the list, so every lowercase ASCII word tokenizes.
    """

    def __init__(self, subwords=TOY_SUBWORDS):
        self.vocab = {w: i for i, w in enumerate(dict.fromkeys(subwords))}
        self.max_len = max(map(len, self.vocab))

    def __call__(self, word):
        word = word.lower()
        out, i = [], 0
        while i < len(word):
            for j in range(min(len(word), i + self.max_len), i, -1):
                if word[i:j] in self.vocab:
                    out.append(self.vocab[word[i:j]])
                    i = j
                    break
            else:
                raise ValueError(f"cannot tokenize {word!r} at {word[i:]!r}")
        return out


def filter_names(names, tokenizer, max_tokens=6):
    """Keep two-word names whose words are one token each.

    Returns ``(accepted, histogram)`` where the histogram counts two-word
    names by total token count for 2..``max_tokens`` (longer names land in
    the last bin).
    """
    hist = Counter({k: 0 for k in range(2, max_tokens + 1)})
    accepted = []
    for name in names:
        words = name.split()
        if len(words) != 2:
            continue
        counts = [len(tokenizer(w)) for w in words]
        hist[min(sum(counts), max_tokens)] += 1
        if counts == [1, 1]:
            accepted.append(name)
    return accepted, dict(sorted(hist.items()))
