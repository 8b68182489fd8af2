"""Reweighters: merge a candidate update with its accepted history.

Every reweighter is called as ``rw(candidate, history)`` where ``history`` is
a list of previously accepted tensors, most recent first. The return value
has the candidate's shape.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from rimkit import tensor as T
from rimkit.backbones import multihead_attention

REWEIGHTER_KINDS = (
    "identity",
    "ema_fixed",
    "ema_learnable_scalar",
    "ema_gated_vector",
    "transformer_lookback",
)
SCOPES = ("both", "solver_only", "generator_only")


class History:
    """Bounded most-recent-first buffer of accepted values."""

    def __init__(self, capacity, seed=None):
        if capacity < 1:
            raise ValueError("history capacity must be >= 1")
        self._buf = deque(maxlen=capacity)
        if seed is not None:
            self._buf.appendleft(seed)

    def push(self, value):
        self._buf.appendleft(value)

    def entries(self):
        return list(self._buf)

    def __len__(self):
        return len(self._buf)

    def __getitem__(self, i):
        return self._buf[i]


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------

def identity_reweight(candidate, prev=None):
    return candidate


def ema_reweight(candidate, prev, alpha):
    """alpha * candidate + (1 - alpha) * prev, with scalar or tensor alpha."""
    if candidate.shape != prev.shape:
        raise T.ShapeError(f"ema: candidate {candidate.shape} vs prev {prev.shape}")
    if isinstance(alpha, T.Tensor):
        return alpha * candidate + (1.0 - alpha) * prev
    alpha = float(alpha)
    return T.scale(candidate, alpha) + T.scale(prev, 1.0 - alpha)


def gate_alpha(candidate, w, b):
    """Per-token, per-dimension coefficient sigmoid(candidate @ w + b)."""
    return T.sigmoid(candidate @ w + b)


def lookback_reweight(candidate, history, params, heads=4, return_attention=False):
    """Transformer-block reweighting over (candidate, history...).

    Attention runs along the time axis, separately at every token position:
    the candidate row at position t attends over the m = 1 + len(history)
    versions of position t. Entries are RMS-normalized and a learned recency
    vector per slot is added to the query/key inputs only, plus a learned
    per-slot logit bias. With ``A`` the attention output the result is
    ``mlp(norm(A)) + A``.
    """
    if not history:
        raise ValueError("lookback reweighter needs a non-empty history")
    entries = [candidate] + list(history)
    m = len(entries)
    rec = params["recency"]
    if m > rec.shape[0]:
        raise ValueError(f"history of {m - 1} exceeds history capacity {rec.shape[0] - 1}")
    for e in entries[1:]:
        if e.shape != candidate.shape:
            raise T.ShapeError(f"history entry {e.shape} vs candidate {candidate.shape}")
    b, L, d = candidate.shape
    normed = [T.reshape(T.rms_norm(e), (b * L, 1, d)) for e in entries]
    values = T.concat(normed, axis=1)                      # (b*L, m, d)
    keys = values + T.getitem(rec, slice(0, m))
    query = normed[0] + T.getitem(rec, slice(0, 1))
    a, att = multihead_attention(query, keys, params["w_q"], params["w_k"], params["w_v"],
                                 params["w_o"], heads, v_in=values,
                                 score_bias=T.getitem(params["slot_bias"], slice(0, m)))
    a = T.reshape(a, (b, L, d))
    hid = T.silu(T.rms_norm(a) @ params["w1"] + params["b1"])
    out = hid @ params["w2"] + params["b2"] + a
    if return_attention:
        return out, att.reshape(b, L, heads, m)
    return out


# ---------------------------------------------------------------------------
# stateful wrappers holding parameters
# ---------------------------------------------------------------------------

class Reweighter:
    kind = "identity"
    learnable = False

    def __init__(self):
        self.last_gate_mean = float("nan")

    def __call__(self, candidate, history):
        return identity_reweight(candidate)

    def param_names(self):
        return []


class IdentityReweighter(Reweighter):
    def __call__(self, candidate, history):
        self.last_gate_mean = 1.0
        return candidate


class FixedEMA(Reweighter):
    kind = "ema_fixed"

    def __init__(self, alpha):
        super().__init__()
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"fixed alpha {alpha} outside [0, 1]")
        self.alpha = float(alpha)

    def __call__(self, candidate, history):
        self.last_gate_mean = self.alpha
        return ema_reweight(candidate, history[0], self.alpha)


class LearnableScalarEMA(Reweighter):
    """alpha = sigmoid(theta) with one trainable scalar theta."""

    kind = "ema_learnable_scalar"
    learnable = True

    def __init__(self, store, name, init_alpha=0.88):
        super().__init__()
        self.name = name
        self.theta = store.add(name, np.array([math.log(init_alpha / (1 - init_alpha))]))

    def alpha(self):
        return T.sigmoid(self.theta)

    def __call__(self, candidate, history):
        a = self.alpha()
        self.last_gate_mean = float(a.data[0])
        return ema_reweight(candidate, history[0], a)

    def param_names(self):
        return [self.name]


class GatedEMA(Reweighter):
    """alpha = sigmoid(Linear(candidate)), one coefficient per token and dimension."""

    kind = "ema_gated_vector"
    learnable = True

    def __init__(self, store, prefix, d, rng, bias_init=2.0, weight_std=None):
        super().__init__()
        self.prefix = prefix
        std = weight_std if weight_std is not None else 0.1 / math.sqrt(d)
        self.w = store.add(f"{prefix}.gate_w", rng.standard_normal((d, d)) * std)
        self.b = store.add(f"{prefix}.gate_b", np.full(d, bias_init))

    def __call__(self, candidate, history):
        a = gate_alpha(candidate, self.w, self.b)
        self.last_gate_mean = float(a.data.mean())
        return ema_reweight(candidate, history[0], a)

    def param_names(self):
        return [f"{self.prefix}.gate_w", f"{self.prefix}.gate_b"]


class LookbackReweighter(Reweighter):
    """One transformer block over the candidate and up to k+1 past values."""

    kind = "transformer_lookback"
    learnable = True

    def __init__(self, store, prefix, d, k, rng, heads=4, expansion=4, candidate_bias=2.0):
        super().__init__()
        self.prefix, self.k, self.heads = prefix, k, heads
        s = 1.0 / math.sqrt(d)
        hid = expansion * d
        eye = np.eye(d)
        self.params = {
            "w_q": store.add(f"{prefix}.w_q", rng.standard_normal((d, d)) * s),
            "w_k": store.add(f"{prefix}.w_k", rng.standard_normal((d, d)) * s),
            # identity-like value path: at init the block averages its inputs
            "w_v": store.add(f"{prefix}.w_v", eye + rng.standard_normal((d, d)) * 0.01 * s),
            "w_o": store.add(f"{prefix}.w_o", eye + rng.standard_normal((d, d)) * 0.01 * s),
            "recency": store.add(f"{prefix}.recency", np.zeros((k + 2, d))),
            # start mostly on the candidate, like the EMA gates at alpha ~ 0.88
            "slot_bias": store.add(f"{prefix}.slot_bias", np.eye(1, k + 2)[0] * candidate_bias),
            "w1": store.add(f"{prefix}.mlp_w1", rng.standard_normal((d, hid)) * s),
            "b1": store.add(f"{prefix}.mlp_b1", np.zeros(hid)),
            "w2": store.add(f"{prefix}.mlp_w2", rng.standard_normal((hid, d)) * 0.1 / math.sqrt(hid)),
            "b2": store.add(f"{prefix}.mlp_b2", np.zeros(d)),
        }

    def __call__(self, candidate, history):
        hist = list(history)[: self.k + 1]
        out, att = lookback_reweight(candidate, hist, self.params, self.heads, return_attention=True)
        # attention mass on the candidate itself
        self.last_gate_mean = float(att[..., 0].mean())
        return out

    def param_names(self):
        return [f"{self.prefix}.{n}" for n in ("w_q", "w_k", "w_v", "w_o", "recency", "slot_bias", "mlp_w1",
                                                "mlp_b1", "mlp_w2", "mlp_b2")]


def build_pair(config, store, rng):
    """Return the (L-stream, H-stream) reweighters described by ``config``."""
    kind, scope = config.reweighter_kind, config.reweighter_scope

    def make(stream):
        active = (scope == "both"
                  or (scope == "solver_only" and stream == "L")
                  or (scope == "generator_only" and stream == "H"))
        if kind == "identity" or not active:
            return IdentityReweighter()
        if kind == "ema_fixed":
            return FixedEMA(config.alpha_L if stream == "L" else config.alpha_H)
        if kind == "ema_learnable_scalar":
            return LearnableScalarEMA(store, f"rw_{stream}.theta", config.scalar_init)
        if kind == "ema_gated_vector":
            return GatedEMA(store, f"rw_{stream}", config.d, rng, bias_init=config.gate_bias_init)
        if kind == "transformer_lookback":
            return LookbackReweighter(store, f"rw_{stream}", config.d, config.lookback, rng,
                                      heads=config.heads)
        raise ValueError(f"unknown reweighter kind {kind!r}")

    return make("L"), make("H")
