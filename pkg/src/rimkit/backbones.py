"""Token embedding/decoding and the residual backbones used as Solver/Generator."""

from __future__ import annotations

import math

import numpy as np

from rimkit import tensor as T

BACKBONE_KINDS = ("mlp_mixer", "attention")
NORM_STYLES = ("post", "pre")


def _normal(rng, shape, std):
    return rng.standard_normal(shape) * std


def multihead_attention(q_in, kv_in, w_q, w_k, w_v, w_o, heads, v_in=None, score_bias=None):
    """Scaled dot-product attention of ``q_in`` rows over ``kv_in`` rows.

    q_in: (B, Lq, d), kv_in: (B, Lk, d). Values are read from ``v_in`` when
    given (same shape as kv_in); ``score_bias`` (Lk,) is added to the logits.
    Returns (B, Lq, d) and the attention weights as a plain array of shape
    (B, heads, Lq, Lk).
    """
    b, lq, d = q_in.shape
    lk = kv_in.shape[1]
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(x, n):
        return T.swapaxes(T.reshape(x, (b, n, heads, dh)), 1, 2)

    q = split(q_in @ w_q, lq)
    k = split(kv_in @ w_k, lk)
    v = split((kv_in if v_in is None else v_in) @ w_v, lk)
    scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh))
    if score_bias is not None:
        scores = scores + score_bias
    att = T.softmax(scores)
    ctx = T.reshape(T.swapaxes(att @ v, 1, 2), (b, lq, d))
    return ctx @ w_o, att.data


class IOHeads:
    """Input embedding (token + learned position) and the linear output head."""

    def __init__(self, store, vocab, seq_len, d, rng, prefix="io"):
        self.vocab, self.seq_len, self.d = vocab, seq_len, d
        self.prefix = prefix
        self.tok = store.add(f"{prefix}.tok_emb", _normal(rng, (vocab, d), 1.0))
        self.pos = store.add(f"{prefix}.pos_emb", _normal(rng, (seq_len, d), 0.1))
        self.head_w = store.add(f"{prefix}.head_w", _normal(rng, (d, vocab), 1.0 / math.sqrt(d)))
        self.head_b = store.add(f"{prefix}.head_b", np.zeros(vocab))

    def embed_input(self, tokens, use_pos=True):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[-1] != self.seq_len:
            raise T.ShapeError(f"expected {self.seq_len} tokens, got {tokens.shape[-1]}")
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise ValueError(f"token outside vocabulary [0, {self.vocab})")
        x = T.embedding(self.tok, tokens.astype(np.int64))
        if use_pos:
            x = x + self.pos
        return x

    def logits(self, y):
        return y @ self.head_w + self.head_b

    def decode(self, y):
        # np.argmax returns the first maximum: ties go to the lowest token index
        with T.no_grad():
            return np.argmax(self.logits(y).data, axis=-1)


class Backbone:
    """Residual backbone f(z, y, x): inputs are summed, then ``depth`` blocks.

    ``norm="pre"`` gives blocks of the form h + branch(norm(h)); zeroing the
    final projection of every branch makes the whole stack the identity.
    ``norm="post"`` gives norm(h + branch(h)), which keeps activations at unit
    RMS across long recursions and is the training default.
    """

    def __init__(self, store, prefix, kind, d, seq_len, depth=2, heads=4, expansion=4,
                 norm="post", rng=None):
        if kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {kind!r}")
        if norm not in NORM_STYLES:
            raise ValueError(f"unknown norm style {norm!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store, self.prefix, self.kind = store, prefix, kind
        self.d, self.seq_len, self.depth, self.heads, self.norm = d, seq_len, depth, heads, norm
        self.blocks = []
        hid = expansion * d
        for i in range(depth):
            p = f"{prefix}.block{i}"
            blk = {}
            if kind == "mlp_mixer":
                blk["tok_w"] = store.add(f"{p}.tok_w", _normal(rng, (seq_len, seq_len), 1.0 / math.sqrt(seq_len)))
                blk["tok_b"] = store.add(f"{p}.tok_b", np.zeros((seq_len, 1)))
            else:
                s = 1.0 / math.sqrt(d)
                for name in ("w_q", "w_k", "w_v", "w_o"):
                    blk[name] = store.add(f"{p}.{name}", _normal(rng, (d, d), s))
            blk["w1"] = store.add(f"{p}.mlp_w1", _normal(rng, (d, hid), 1.0 / math.sqrt(d)))
            blk["b1"] = store.add(f"{p}.mlp_b1", np.zeros(hid))
            blk["w2"] = store.add(f"{p}.mlp_w2", _normal(rng, (hid, d), 1.0 / math.sqrt(hid)))
            blk["b2"] = store.add(f"{p}.mlp_b2", np.zeros(d))
            self.blocks.append(blk)

    def final_projections(self):
        """Names of the parameters whose zeroing silences each residual branch."""
        names = []
        for i in range(self.depth):
            p = f"{self.prefix}.block{i}"
            names += [f"{p}.tok_w", f"{p}.tok_b"] if self.kind == "mlp_mixer" else [f"{p}.w_o"]
            names += [f"{p}.mlp_w2", f"{p}.mlp_b2"]
        return names

    def checksum(self):
        return self.store.checksum(self.prefix + ".")

    def num_params(self):
        return self.store.num_params(self.prefix + ".")

    def _mix(self, blk, h):
        if self.kind == "mlp_mixer":
            return T.matmul(blk["tok_w"], h) + blk["tok_b"]
        out, _ = multihead_attention(h, h, blk["w_q"], blk["w_k"], blk["w_v"], blk["w_o"], self.heads)
        return out

    def _mlp(self, blk, h):
        return T.silu(h @ blk["w1"] + blk["b1"]) @ blk["w2"] + blk["b2"]

    def __call__(self, *inputs):
        inputs = [t for t in inputs if t is not None]
        if not inputs:
            raise ValueError("backbone needs at least one input")
        for t in inputs:
            if t.shape[-2:] != (self.seq_len, self.d):
                raise T.ShapeError(
                    f"backbone input shape {t.shape} does not end in ({self.seq_len}, {self.d})")
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError("non-finite backbone input")
        h = inputs[0]
        for t in inputs[1:]:
            h = h + t
        for blk in self.blocks:
            if self.norm == "pre":
                h = h + self._mix(blk, T.rms_norm(h))
                h = h + self._mlp(blk, T.rms_norm(h))
            else:
                h = T.rms_norm(h + self._mix(blk, h))
                h = T.rms_norm(h + self._mlp(blk, h))
        return h
