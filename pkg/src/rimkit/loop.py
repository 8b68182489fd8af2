"""The unrolled Solver / Reweighter / Generator loop.

One run executes N outer steps. Each outer step proposes T state candidates
with the Solver, each merged into the state by the L-stream reweighter, then
proposes one solution candidate with the Generator, merged into the solution
by the H-stream reweighter.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from rimkit import tensor as T
from rimkit.backbones import BACKBONE_KINDS, NORM_STYLES, Backbone, IOHeads
from rimkit.params import ParamStore
from rimkit.reweighters import REWEIGHTER_KINDS, SCOPES, History, build_pair


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class NonFiniteError(FloatingPointError):
    def __init__(self, outer, inner, what):
        super().__init__(f"non-finite {what} at outer step i={outer}, inner step j={inner}")
        self.outer, self.inner = outer, inner


@dataclass
class RimConfig:
    T: int = 3
    N: int = 2
    d: int = 128
    seq_len: int = 16
    vocab: int = 5
    reweighter_kind: str = "identity"
    alpha_L: float = 1.0
    alpha_H: float = 1.0
    reweighter_scope: str = "both"
    backbone_kind: str = "shared"  # shared (one f) or decoupled (f_L, f_H)
    arch: str = "mlp_mixer"
    depth: int = 2
    heads: int = 4
    expansion: int = 4
    norm: str = "post"
    lookback: int = 1
    supervision_segments: int = 4
    gate_bias_init: float = 2.0
    scalar_init: float = 0.88

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("T", "N", "d", "seq_len", "vocab", "depth", "heads", "expansion",
                     "supervision_segments"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        if self.reweighter_kind not in REWEIGHTER_KINDS:
            raise ConfigError("reweighter_kind", f"must be one of {REWEIGHTER_KINDS}")
        if self.reweighter_scope not in SCOPES:
            raise ConfigError("reweighter_scope", f"must be one of {SCOPES}")
        if self.backbone_kind not in ("shared", "decoupled"):
            raise ConfigError("backbone_kind", "must be 'shared' or 'decoupled'")
        if self.arch not in BACKBONE_KINDS:
            raise ConfigError("arch", f"must be one of {BACKBONE_KINDS}")
        if self.norm not in NORM_STYLES:
            raise ConfigError("norm", f"must be one of {NORM_STYLES}")
        for name in ("alpha_L", "alpha_H"):
            a = getattr(self, name)
            if not 0.0 <= a <= 1.0:
                raise ConfigError(name, f"must lie in [0, 1], got {a}")
        if not 0.0 < self.scalar_init < 1.0:
            raise ConfigError("scalar_init", "must lie in (0, 1)")
        if self.lookback < 0 or self.lookback > max(self.T, self.N):
            raise ConfigError("lookback", f"must lie in [0, max(T, N)] = [0, {max(self.T, self.N)}]")
        if self.d % self.heads and (self.arch == "attention"
                                    or self.reweighter_kind == "transformer_lookback"):
            raise ConfigError("heads", f"width {self.d} not divisible by {self.heads}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        return cls(**d)


@dataclass
class LatentTrace:
    """Everything a run proposed and accepted, as plain arrays."""

    x: np.ndarray
    y: list = field(default_factory=list)              # y(0) .. y(N)
    y_candidates: list = field(default_factory=list)   # ~y(1) .. ~y(N)
    z: list = field(default_factory=list)              # per outer step: z(0) .. z(T)
    z_candidates: list = field(default_factory=list)   # per outer step: ~z(1) .. ~z(T)
    gate_L: list = field(default_factory=list)         # per outer step, per inner step
    gate_H: list = field(default_factory=list)

    def counts(self):
        return {
            "z_candidates": sum(len(s) for s in self.z_candidates),
            "z_accepted": sum(len(s) - 1 for s in self.z),
            "y_candidates": len(self.y_candidates),
            "y_accepted": len(self.y) - 1,
        }

    def dump(self, path):
        """One JSON record per (i, j) with norms and gate means."""
        with open(path, "w") as fh:
            for i, (zs, zc) in enumerate(zip(self.z, self.z_candidates), start=1):
                for j, cand in enumerate(zc, start=1):
                    fh.write(json.dumps({
                        "i": i, "j": j, "stream": "L",
                        "cand_norm": float(np.linalg.norm(cand)),
                        "accepted_norm": float(np.linalg.norm(zs[j])),
                        "gate_mean": self.gate_L[i - 1][j - 1],
                    }) + "\n")
                fh.write(json.dumps({
                    "i": i, "j": 0, "stream": "H",
                    "cand_norm": float(np.linalg.norm(self.y_candidates[i - 1])),
                    "accepted_norm": float(np.linalg.norm(self.y[i])),
                    "gate_mean": self.gate_H[i - 1],
                }) + "\n")


def _check_finite(t, i, j, what):
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(i, j, what)


class RIM:
    """A recursive inference machine: IO heads, Solver/Generator backbones,
    the two reweighters and learned initial solution/state vectors, all
    backed by one ParamStore.
    """

    def __init__(self, config, seed=0, dtype=T.DEFAULT_DTYPE, weights=None):
        self.config = config
        rng = np.random.default_rng(seed)
        self.store = ParamStore(dtype)
        c = config
        self.io = IOHeads(self.store, c.vocab, c.seq_len, c.d, rng)
        bb = dict(kind=c.arch, d=c.d, seq_len=c.seq_len, depth=c.depth, heads=c.heads,
                  expansion=c.expansion, norm=c.norm)
        if c.backbone_kind == "shared":
            self.solver = Backbone(self.store, "f", rng=rng, **bb)
            self.generator = self.solver
        else:
            self.solver = Backbone(self.store, "f_L", rng=rng, **bb)
            self.generator = Backbone(self.store, "f_H", rng=rng, **bb)
        self.y_init = self.store.add("init.y", rng.standard_normal(c.d))
        self.z_init = self.store.add("init.z", rng.standard_normal(c.d))
        self.rw_L, self.rw_H = build_pair(c, self.store, rng)
        if weights is not None:
            self.load_weights(weights)

    def load_weights(self, other):
        for n, p in self.store.items():
            if n not in other:
                raise KeyError(f"checkpoint lacks parameter {n!r}")
            if other[n].shape != p.shape:
                raise ValueError(f"shape mismatch for {n}: {other[n].shape} vs {p.shape}")
            p.data[...] = other[n].data

    # capacities of the history buffers
    def _capacity(self):
        return self.config.lookback + 1

    def solver_step(self, z_prev, y_cur, x):
        return solver_step(z_prev, y_cur, x, self.solver)

    def generator_step(self, y_prev, z_last):
        return generator_step(y_prev, z_last, self.generator)

    def initial_carry(self, batch):
        shape = (batch, self.config.seq_len, self.config.d)
        zeros = np.zeros(shape, dtype=self.store.dtype)
        return self.y_init + zeros, self.z_init + zeros

    def embed(self, tokens):
        return self.io.embed_input(tokens)

    def rollout(self, x, y, z, record=False, collect=None):
        """Run N outer steps from (y, z). Returns (y, z, trace or None).

        When ``collect`` is a list, every accepted solution y(1)..y(N) is
        appended to it (graph attached).
        """
        c = self.config
        trace = LatentTrace(x=x.data.copy()) if record else None
        if record:
            trace.y.append(y.data.copy())
        hist_H = History(self._capacity(), seed=y)
        for i in range(1, c.N + 1):
            hist_L = History(self._capacity(), seed=z)
            zs, zc, gl = ([z.data.copy()], [], []) if record else (None, None, None)
            for j in range(1, c.T + 1):
                z_cand = self.solver_step(z, y, x)
                _check_finite(z_cand, i, j, "state candidate")
                z = self.rw_L(z_cand, hist_L.entries())
                _check_finite(z, i, j, "state")
                hist_L.push(z)
                if record:
                    zc.append(z_cand.data.copy())
                    zs.append(z.data.copy())
                    gl.append(self.rw_L.last_gate_mean)
            y_cand = self.generator_step(y, z)
            _check_finite(y_cand, i, 0, "solution candidate")
            y = self.rw_H(y_cand, hist_H.entries())
            _check_finite(y, i, 0, "solution")
            hist_H.push(y)
            if collect is not None:
                collect.append(y)
            if record:
                trace.z.append(zs)
                trace.z_candidates.append(zc)
                trace.gate_L.append(gl)
                trace.y_candidates.append(y_cand.data.copy())
                trace.y.append(y.data.copy())
                trace.gate_H.append(self.rw_H.last_gate_mean)
        return y, z, trace

    def forward(self, tokens, carry=None, record=False):
        x = self.embed(tokens)
        if carry is None:
            y, z = self.initial_carry(x.shape[0])
        else:
            y, z = (T.Tensor(c) if not isinstance(c, T.Tensor) else c for c in carry)
        return self.rollout(x, y, z, record=record)

    def logits(self, y):
        return self.io.logits(y)

    def decode(self, y):
        return self.io.decode(y)


def solver_step(z_prev, y_cur, x, solver):
    if not (z_prev.shape == y_cur.shape == x.shape):
        raise T.ShapeError(f"solver_step shapes differ: {z_prev.shape}, {y_cur.shape}, {x.shape}")
    return solver(z_prev, y_cur, x)


def generator_step(y_prev, z_last, generator):
    # the problem description is deliberately not an input here
    if y_prev.shape != z_last.shape:
        raise T.ShapeError(f"generator_step shapes differ: {y_prev.shape}, {z_last.shape}")
    return generator(y_prev, z_last)


def run_rim(x_tokens, model, segments=1, record=True):
    """Run ``segments`` consecutive rollouts and decode the final solution.

    Returns (decoded tokens, trace of the last segment).
    """
    tokens = np.asarray(x_tokens)
    squeeze = tokens.ndim == 1
    with T.no_grad():
        carry = None
        for _ in range(segments):
            y, z, trace = model.forward(tokens, carry=carry, record=record)
            carry = (y, z)
        decoded = model.decode(y)
    return (decoded[0] if squeeze else decoded), trace
