"""Gibbs-sampling denoiser for noisy tabular rows.

A chain starts at the observed row ``e`` and repeatedly resamples every
feature from a full conditional learned from the clean training data. The
retained samples are weighted by how well they explain ``e`` under a
per-feature mismatch model and the label distribution is the weighted mean
of the per-sample predictions.

All chain functions accept a single row of shape (n,) or a batch of
independent rows of shape (R, n).
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MAX_ENUMERATION = 10 ** 6


def total_variation(p, q):
    return 0.5 * np.abs(np.asarray(p, float) - np.asarray(q, float)).sum(axis=-1)


# ---------------------------------------------------------------------------
# emission model
# ---------------------------------------------------------------------------

@dataclass
class EmissionModel:
    eps: float

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"deviation rate must lie in (0, 1), got {self.eps}")

    def log_weight(self, x_hat, e):
        agree = (np.asarray(x_hat) == np.asarray(e)).sum(axis=-1)
        n = np.shape(e)[-1]
        return agree * math.log1p(-self.eps) + (n - agree) * math.log(self.eps)

    def weight(self, x_hat, e):
        return np.exp(self.log_weight(x_hat, e))


def emission_weight(x_hat, e, eps):
    """(1 - eps)^m * eps^(n - m), m = number of agreeing features."""
    agree = (np.asarray(x_hat) == np.asarray(e)).sum(axis=-1)
    n = np.shape(e)[-1]
    with np.errstate(divide="ignore"):
        logw = agree * np.log1p(-eps) + (n - agree) * np.log(eps)
    return np.exp(logw)


# ---------------------------------------------------------------------------
# conditional models
# ---------------------------------------------------------------------------

def _normalize_rows(p, what):
    s = p.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError(f"{what}: conditional is all zero")
    return p / s


class ExactCPT:
    """Conditionals read off a tabulated joint P(X) and P(Y | X)."""

    kind = "exact_cpt"

    def __init__(self, p_x, p_y_given_x):
        self.p_x = np.asarray(p_x, dtype=float)
        self.p_y_given_x = np.asarray(p_y_given_x, dtype=float)
        self.domains = list(self.p_x.shape)
        self.n_classes = self.p_y_given_x.shape[-1]

    def feature_conditional(self, i, x, y=None):
        x = np.atleast_2d(x)
        others = tuple(x[:, j] for j in range(x.shape[1]) if j != i)
        p = np.moveaxis(self.p_x, i, -1)[others]
        if y is not None:
            pyx = np.moveaxis(self.p_y_given_x, i, -1)   # (..., n_classes, D_i)
            p = p * pyx[others + (np.asarray(y),)]
        return _normalize_rows(p, f"feature {i}")

    def predict_y(self, x):
        x = np.atleast_2d(x)
        return self.p_y_given_x[tuple(x.T)]


class KNNConditional:
    """Laplace-smoothed k-nearest-neighbour conditionals over D_train.

    Distances are Hamming over the conditioning features (plus the label when
    one is supplied). Ties at the k-th distance are broken by training-row
    order so the neighbour set is deterministic.
    """

    kind = "knn"

    def __init__(self, X_train, y_train, domains, k=15, smoothing=1.0, n_classes=None):
        X_train = np.asarray(X_train)
        if len(X_train) == 0:
            raise ValueError("empty training set")
        if k < 1:
            raise ValueError("k must be >= 1")
        if smoothing <= 0:
            raise ValueError("smoothing must be positive")
        self.X = X_train
        self.y = np.asarray(y_train)
        self.domains = [int(d) for d in domains]
        self.k = min(int(k), len(X_train))
        self.smoothing = float(smoothing)
        self.n_classes = int(n_classes or (self.y.max() + 1))

    def _neighbours(self, dist):
        n = self.X.shape[0]
        key = dist.astype(np.int64) * n + np.arange(n)
        if self.k == n:
            return np.broadcast_to(np.arange(n), key.shape)
        return np.argpartition(key, self.k - 1, axis=1)[:, : self.k]

    def _smoothed_counts(self, values, size):
        r = values.shape[0]
        counts = np.zeros((r, size))
        np.add.at(counts, (np.repeat(np.arange(r), values.shape[1]), values.ravel()), 1.0)
        return (counts + self.smoothing) / (values.shape[1] + self.smoothing * size)

    def feature_conditional(self, i, x, y=None):
        x = np.atleast_2d(x)
        cols = [j for j in range(x.shape[1]) if j != i]
        dist = (self.X[None, :, cols] != x[:, None, cols]).sum(-1)
        if y is not None:
            dist = dist + (self.y[None, :] != np.asarray(y)[:, None])
        nn = self._neighbours(dist)
        return self._smoothed_counts(self.X[nn, i], self.domains[i])

    def predict_y(self, x):
        x = np.atleast_2d(x)
        dist = (self.X[None, :, :] != x[:, None, :]).sum(-1)
        nn = self._neighbours(dist)
        return self._smoothed_counts(self.y[nn], self.n_classes)


def knn_conditional(i, x, X_train, y_train, domains, k, smoothing, y=None):
    """Distribution over feature ``i`` given the other entries of ``x``."""
    model = KNNConditional(X_train, y_train, domains, k, smoothing)
    return model.feature_conditional(i, np.asarray(x)[None], None if y is None else [y])[0]


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _sample_rows(p, rng):
    c = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[0])[:, None] * c[:, -1:]
    return np.minimum((c <= u).sum(axis=-1), p.shape[-1] - 1)


def gibbs_sweep(x_hat, conditional, rng, y_hat=None, joint=True):
    """One systematic-scan sweep over features 1..n.

    With ``joint`` the label is redrawn from P(Y | x) first and every feature
    conditional is also conditioned on it. Returns (x_hat, y_hat).
    """
    x = np.atleast_2d(np.array(x_hat, copy=True))
    if joint:
        y_hat = _sample_rows(_normalize_rows(conditional.predict_y(x), "label"), rng)
    for i in range(x.shape[1]):
        p = conditional.feature_conditional(i, x, y_hat if joint else None)
        x[:, i] = _sample_rows(_normalize_rows(np.asarray(p, float), f"feature {i}"), rng)
    if np.ndim(x_hat) == 1:
        return x[0], (None if y_hat is None else y_hat[0])
    return x, y_hat


@dataclass
class GibbsChain:
    """Retained samples of one or more chains over R rows.

    ``samples`` has shape (n_burn + n_keep, R, n); the retained set is the
    last ``n_keep`` sweeps.
    """

    samples: np.ndarray
    burn_in: int
    log_weights: np.ndarray      # (n_keep, R)
    predictive: np.ndarray       # (n_keep, R, n_classes)
    evidence: np.ndarray         # (R, n)
    extra: dict = field(default_factory=dict)

    @property
    def retained(self):
        return self.samples[self.burn_in:]

    @property
    def weights(self):
        return np.exp(self.log_weights)

    def __len__(self):
        return self.samples.shape[0] - self.burn_in


def run_chain(e, conditional, emission, rng, n_burn=5, n_keep=10, mode="joint"):
    """Run a chain from x(0) = e for n_burn + n_keep sweeps."""
    if n_burn < 0 or n_keep < 1:
        raise ValueError("need n_burn >= 0 and n_keep >= 1")
    if mode not in ("joint", "marginal"):
        raise ValueError(f"unknown chain mode {mode!r}")
    e2 = np.atleast_2d(np.asarray(e))
    x, y = e2.copy(), None
    samples = []
    for _ in range(n_burn + n_keep):
        x, y = gibbs_sweep(x, conditional, rng, y, joint=(mode == "joint"))
        samples.append(x.copy())
    samples = np.stack(samples)
    kept = samples[n_burn:]
    logw = np.stack([emission.log_weight(s, e2) for s in kept])
    pred = np.stack([conditional.predict_y(s) for s in kept])
    return GibbsChain(samples, n_burn, logw, pred, e2)


def pool_chains(chains):
    """Concatenate the retained sets of independent chains over the same rows."""
    first = chains[0]
    return GibbsChain(
        np.concatenate([c.retained for c in chains], axis=0),
        0,
        np.concatenate([c.log_weights for c in chains], axis=0),
        np.concatenate([c.predictive for c in chains], axis=0),
        first.evidence,
        {"chains": chains},
    )


def predictive_marginalize(chain, weighted=True):
    """Weighted (default) or plain mean of the retained predictive distributions.

    Returns an array (R, n_classes). Rows whose weights all vanish fall back
    to the plain mean.
    """
    pred = chain.predictive
    if not weighted:
        out = pred.mean(axis=0)
    else:
        logw = chain.log_weights
        top = np.max(logw, axis=0, keepdims=True)
        with np.errstate(invalid="ignore"):
            w = np.exp(logw - top)
        w = np.where(np.isfinite(w), w, 0.0)
        z = w.sum(axis=0)
        bad = ~(z > 0)
        if np.any(bad):
            log.warning("all emission weights are zero for %d row(s); using the unweighted mean",
                        int(bad.sum()))
            w[:, bad] = 1.0
            z = w.sum(axis=0)
        out = (w[:, :, None] * pred).sum(axis=0) / z[:, None]
    return out / out.sum(axis=-1, keepdims=True)


def chain_agreement(chains, weighted=True):
    """Largest pairwise total variation between per-chain estimates, per row."""
    ests = [predictive_marginalize(c, weighted) for c in chains]
    worst = np.zeros(ests[0].shape[0])
    for a, b in itertools.combinations(ests, 2):
        worst = np.maximum(worst, total_variation(a, b))
    return worst


class TabRIM:
    """Noisy-row classifier: pooled Gibbs chains + emission-weighted averaging."""

    def __init__(self, conditional, eps, n_burn=5, n_keep=10, n_chains=4, mode="joint",
                 weighted=True, seed=0):
        self.conditional = conditional
        self.emission = EmissionModel(eps)
        self.n_burn, self.n_keep, self.n_chains = n_burn, n_keep, n_chains
        self.mode, self.weighted, self.seed = mode, weighted, seed
        self.last_agreement = None

    def chains(self, E):
        ss = np.random.SeedSequence([self.seed, 0x7ab])
        return [run_chain(E, self.conditional, self.emission, np.random.default_rng(child),
                          self.n_burn, self.n_keep, self.mode)
                for child in ss.spawn(self.n_chains)]

    def predict_proba(self, E):
        E = np.atleast_2d(np.asarray(E))
        chains = self.chains(E)
        if len(chains) > 1:
            self.last_agreement = chain_agreement(chains, self.weighted)
        return predictive_marginalize(pool_chains(chains), self.weighted)


# ---------------------------------------------------------------------------
# exact oracle
# ---------------------------------------------------------------------------

@dataclass
class GenerativeSpec:
    """Tabulated P(X), P(Y | X) and the emission deviation rate."""

    p_x: np.ndarray
    p_y_given_x: np.ndarray
    eps: float

    @property
    def domains(self):
        return list(np.shape(self.p_x))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"domains": self.domains, "eps": self.eps,
                       "p_x": np.asarray(self.p_x).tolist(),
                       "p_y_given_x": np.asarray(self.p_y_given_x).tolist()}, fh, indent=1)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        spec = cls(np.array(d["p_x"], dtype=float), np.array(d["p_y_given_x"], dtype=float),
                   float(d["eps"]))
        if list(spec.p_x.shape) != list(d["domains"]):
            raise ValueError("p_x shape does not match the declared domains")
        return spec

    def sample(self, n, rng):
        """Draw (x, y, e) triples."""
        flat = rng.choice(self.p_x.size, size=n, p=self.p_x.ravel())
        x = np.stack(np.unravel_index(flat, self.p_x.shape), axis=1)
        py = self.p_y_given_x[tuple(x.T)]
        y = (rng.random(n)[:, None] > np.cumsum(py, axis=1)).sum(1)
        e = x.copy()
        for j, dsize in enumerate(self.domains):
            flip = rng.random(n) < self.eps
            # a deviating cell takes one of the other values uniformly
            shift = rng.integers(1, dsize, size=n) if dsize > 1 else np.zeros(n, int)
            e[flip, j] = (x[flip, j] + shift[flip]) % dsize
        return x, y, e


def brute_force_posterior(e, spec):
    """Exact P(Y | E = e) by summing P(x) P(e | x) P(Y | x) over every x."""
    size = int(np.prod(spec.domains, dtype=np.int64))
    if size > MAX_ENUMERATION:
        raise ValueError(f"joint domain has {size} assignments (limit {MAX_ENUMERATION})")
    grid = np.stack(np.unravel_index(np.arange(size), spec.domains), axis=1)
    pe = emission_weight(grid, np.asarray(e), spec.eps)
    joint = spec.p_x.ravel() * pe
    post = (joint[:, None] * spec.p_y_given_x.reshape(size, -1)).sum(axis=0)
    return post / post.sum()


def make_reference_net(seed=7, n_features=3, eps=0.2):
    """Chain-structured binary net X1 -> X2 -> ... with Y depending on all X."""
    rng = np.random.default_rng(seed)
    p1 = rng.uniform(0.2, 0.8)
    trans = rng.uniform(0.1, 0.9, size=(n_features - 1, 2))   # P(X_k = 1 | X_{k-1})
    shape = (2,) * n_features
    p_x = np.zeros(shape)
    for x in itertools.product((0, 1), repeat=n_features):
        p = p1 if x[0] else 1 - p1
        for k in range(1, n_features):
            q = trans[k - 1, x[k - 1]]
            p *= q if x[k] else 1 - q
        p_x[x] = p
    logits = rng.normal(0, 1.5, size=n_features) * 1.0
    bias = rng.normal(0, 0.5)
    p_y = np.zeros(shape + (2,))
    for x in itertools.product((0, 1), repeat=n_features):
        s = 1 / (1 + math.exp(-(bias + float(np.dot(logits, np.array(x) * 2 - 1)))))
        p_y[x] = (1 - s, s)
    return GenerativeSpec(p_x, p_y, eps)
