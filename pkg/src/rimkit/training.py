"""Deep-supervision training of a RIM and exact-match evaluation."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from rimkit import tensor as T
from rimkit.loop import RIM, NonFiniteError
from rimkit.params import AdamW

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "segment", "loss", "exact_match", "wall_seconds")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.1
    supervision_segments: int = 4
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 1
    warmup_steps: int = 50
    lr_schedule: str = "cosine"     # constant or cosine (decays to min_lr_ratio * lr)
    min_lr_ratio: float = 0.1
    time_budget: float = 0.0        # seconds; 0 means no limit
    supervise_all_outer: bool = False

    def __post_init__(self):
        from rimkit.loop import ConfigError

        for name in ("epochs", "batch_size", "supervision_segments", "eval_every"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(name, f"must be a positive integer, got {v!r}")
        for name in ("lr", "weight_decay", "clip_norm", "time_budget", "warmup_steps", "min_lr_ratio"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule", "must be 'constant' or 'cosine'")

    def to_dict(self):
        return asdict(self)


def lr_at(cfg, step, total_steps):
    """Learning rate for optimizer step ``step`` (0-based) of ``total_steps``."""
    scale = 1.0
    if cfg.warmup_steps:
        scale = min(1.0, (step + 1) / cfg.warmup_steps)
    if cfg.lr_schedule == "cosine" and total_steps > cfg.warmup_steps:
        t = min(1.0, max(0.0, (step - cfg.warmup_steps) / (total_steps - cfg.warmup_steps)))
        scale *= cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + np.cos(np.pi * t))
    return cfg.lr * scale


def segment_loss(model, logits_of, targets, ys):
    if len(ys) == 1:
        return T.cross_entropy(logits_of(ys[0]), targets)
    total = None
    for y in ys:
        term = T.cross_entropy(logits_of(y), targets)
        total = term if total is None else total + term
    return T.scale(total, 1.0 / len(ys))


def supervised_segment(model, tokens, targets, carry=None, supervise_all_outer=False):
    """One full rollout from a detached carry.

    Returns (loss tensor, new carry as plain arrays). The carry never holds
    graph references, so gradients cannot cross segment boundaries.
    """
    x = model.embed(tokens)
    if carry is None:
        y, z = model.initial_carry(x.shape[0])
    else:
        y, z = T.Tensor(carry[0]), T.Tensor(carry[1])
    ys = [] if supervise_all_outer else None
    y, z, _ = model.rollout(x, y, z, collect=ys)
    if ys is None:
        ys = [y]
    loss = segment_loss(model, model.logits, targets, ys)
    return loss, (y.data.copy(), z.data.copy())


def evaluate(model, dataset, segments=None, batch_size=256):
    """Exact-match and per-token accuracy after ``segments`` carried rollouts."""
    if dataset.vocab != model.config.vocab:
        raise ValueError(f"dataset vocabulary {dataset.vocab} != model vocabulary {model.config.vocab}")
    if dataset.seq_len != model.config.seq_len:
        raise ValueError(f"dataset sequence length {dataset.seq_len} != model {model.config.seq_len}")
    segments = segments or model.config.supervision_segments
    preds = predict(model, dataset.inputs, segments, batch_size)
    return score(preds, dataset.targets)


def predict(model, inputs, segments, batch_size=256):
    out = []
    with T.no_grad():
        for s in range(0, len(inputs), batch_size):
            tok = inputs[s:s + batch_size]
            carry = None
            for _ in range(segments):
                y, z, _ = model.forward(tok, carry=carry)
                carry = (y, z)
            out.append(model.decode(y))
    return np.concatenate(out, axis=0)


def score(preds, targets):
    preds, targets = np.asarray(preds), np.asarray(targets)
    return {
        "exact_match": float(np.mean(np.all(preds == targets, axis=1))),
        "per_token_accuracy": float(np.mean(preds == targets)),
    }


class MetricsLog:
    """Append-only CSV metrics log."""

    def __init__(self, path):
        self.path = path
        if path:
            new = not os.path.exists(path)
            self._fh = open(path, "a", newline="")
            self._w = csv.writer(self._fh)
            if new:
                self._w.writerow(METRIC_COLUMNS)
                self._fh.flush()
        self.rows = []

    def write(self, epoch, segment, loss, exact_match, wall):
        row = [epoch, segment, f"{loss:.6f}", "" if exact_match is None else f"{exact_match:.6f}", f"{wall:.2f}"]
        self.rows.append(row)
        if self.path:
            self._w.writerow(row)
            self._fh.flush()

    def close(self):
        if self.path:
            self._fh.close()


def train(model, train_set, eval_set, cfg, metrics_path=None, checkpoint_dir=None, meta=None):
    """Train ``model`` in place. Returns a dict with the final metrics and history."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if eval_set is not None and train_set.keys() & eval_set.keys():
        raise ValueError("train and eval splits overlap")
    rng = np.random.default_rng([cfg.seed, 0x7a1])
    decay_ok = lambda n: n.endswith("_w") or n.endswith("w1") or n.endswith("w2") or ".w_" in n  # noqa: E731
    opt = AdamW(model.store, lr=cfg.lr, betas=(0.9, 0.95), weight_decay=cfg.weight_decay,
                clip_norm=cfg.clip_norm, no_decay=lambda n: not decay_ok(n))
    metrics = MetricsLog(metrics_path)
    t0 = time.perf_counter()
    S = cfg.supervision_segments
    total_steps = cfg.epochs * -(-len(train_set) // cfg.batch_size) * S
    step = 0
    history = []
    out_of_time = False
    em = None
    try:
        for epoch in range(1, cfg.epochs + 1):
            seg_losses = [[] for _ in range(S)]
            perm = rng.permutation(len(train_set))
            for b0 in range(0, len(perm), cfg.batch_size):
                idx = perm[b0:b0 + cfg.batch_size]
                tok, tgt = train_set.inputs[idx], train_set.targets[idx]
                carry = None
                for s in range(S):
                    opt.lr = lr_at(cfg, step, total_steps)
                    model.store.zero_grad()
                    try:
                        loss, carry = supervised_segment(model, tok, tgt, carry, cfg.supervise_all_outer)
                    except NonFiniteError as exc:
                        log.warning("epoch %d segment %d skipped: %s", epoch, s, exc)
                        break
                    if not np.isfinite(loss.data):
                        log.warning("epoch %d segment %d skipped: non-finite loss", epoch, s)
                        break
                    loss.backward()
                    opt.step()
                    step += 1
                    seg_losses[s].append(float(loss.data))
                if cfg.time_budget and time.perf_counter() - t0 > cfg.time_budget:
                    out_of_time = True
                    break
            last_epoch = out_of_time or epoch == cfg.epochs
            em = None
            if eval_set is not None and (epoch % cfg.eval_every == 0 or last_epoch):
                em = evaluate(model, eval_set, S)["exact_match"]
            wall = time.perf_counter() - t0
            for s in range(S):
                lo = float(np.mean(seg_losses[s])) if seg_losses[s] else float("nan")
                metrics.write(epoch, s + 1, lo, em if s == S - 1 else None, wall)
            history.append({"epoch": epoch, "loss": [float(np.mean(v)) if v else float("nan") for v in seg_losses],
                            "exact_match": em, "wall_seconds": wall})
            log.info("epoch %d loss %s exact_match %s (%.1fs)", epoch,
                     history[-1]["loss"][-1], em, wall)
            if out_of_time:
                break
    finally:
        metrics.close()
    if checkpoint_dir:
        save_checkpoint(model, checkpoint_dir, meta)
    return {"history": history, "exact_match": em, "steps": step,
            "wall_seconds": time.perf_counter() - t0}


def save_checkpoint(model, path, meta=None):
    m = {"rim_config": model.config.to_dict()}
    m.update(meta or {})
    model.store.save(path, meta=m)


def load_checkpoint(path):
    from rimkit.loop import RimConfig
    from rimkit.params import ParamStore, read_manifest

    manifest = read_manifest(path)
    cfg = RimConfig.from_dict(manifest["meta"]["rim_config"])
    store = ParamStore.load(path)
    return RIM(cfg, weights=store), manifest["meta"]
