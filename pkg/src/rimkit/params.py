"""Named parameter storage, checkpoint I/O and the AdamW optimizer."""

from __future__ import annotations

import hashlib
import json
import os
from collections import OrderedDict

import numpy as np

from rimkit.tensor import DEFAULT_DTYPE, Tensor

MANIFEST = "manifest.json"


class ParamStore:
    """Ordered name -> trainable Tensor mapping.

    Iteration order is insertion order, which is also the on-disk order.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self._params = OrderedDict()

    def add(self, name, value):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return self._params.keys()

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def view(self, prefix):
        """A store sharing (not copying) the tensors whose names start with ``prefix``."""
        out = ParamStore(self.dtype)
        for n, p in self._params.items():
            if n.startswith(prefix):
                out._params[n] = p
        return out

    def zero_grad(self):
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def num_params(self, prefix=""):
        return int(sum(p.data.size for n, p in self._params.items() if n.startswith(prefix)))

    def checksum(self, prefix=""):
        h = hashlib.sha256()
        for n, p in self._params.items():
            if n.startswith(prefix):
                h.update(n.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def grad_norm(self):
        return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.values())))

    def astype(self, dtype):
        """Deep copy with every parameter cast to ``dtype``."""
        out = ParamStore(dtype)
        for n, p in self._params.items():
            out.add(n, p.data)
        return out

    def copy_from(self, other):
        for n, p in self._params.items():
            p.data[...] = other[n].data

    def state_dict(self):
        return OrderedDict((n, p.data.copy()) for n, p in self._params.items())

    # checkpoint container: manifest + one raw little-endian float32 blob per param
    def save(self, path, meta=None):
        os.makedirs(path, exist_ok=True)
        entries = []
        for i, (n, p) in enumerate(self._params.items()):
            fname = f"{i:04d}.bin"
            with open(os.path.join(path, fname), "wb") as fh:
                fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
            entries.append({"name": n, "shape": list(p.shape), "dtype": "float32", "file": fname})
        manifest = {"params": entries, "meta": meta or {}}
        tmp = os.path.join(path, MANIFEST + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=1)
        os.replace(tmp, os.path.join(path, MANIFEST))

    @classmethod
    def load(cls, path, dtype=DEFAULT_DTYPE):
        manifest = read_manifest(path)
        store = cls(dtype)
        for e in manifest["params"]:
            raw = np.fromfile(os.path.join(path, e["file"]), dtype="<f4")
            if raw.size != int(np.prod(e["shape"], dtype=np.int64)):
                raise ValueError(f"blob size mismatch for {e['name']}")
            store.add(e["name"], raw.reshape(e["shape"]))
        return store


def read_manifest(path):
    with open(os.path.join(path, MANIFEST)) as fh:
        return json.load(fh)


class AdamW:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, store, lr=1e-3, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0,
                 clip_norm=1.0, no_decay=lambda name: False):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.no_decay = no_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self):
        if self.lr == 0:
            return
        self.t += 1
        scale = 1.0
        if self.clip_norm:
            gn = self.store.grad_norm()
            if gn > self.clip_norm:
                scale = self.clip_norm / (gn + 1e-12)
        bc1 = 1 - self.b1 ** self.t
        bc2 = 1 - self.b2 ** self.t
        for n, p in self.store.items():
            g = p.grad * scale
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and not self.no_decay(n):
                p.data *= 1 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)
