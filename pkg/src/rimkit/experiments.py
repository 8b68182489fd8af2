"""Seeding, named tasks and the reweighter ablation grid.

Everything here is shared by the command-line entry point and the
acceptance tests so both exercise the same code path.
"""

from __future__ import annotations

import logging
import math
import os
import re
import zlib

import numpy as np

from rimkit.loop import RIM, ConfigError, RimConfig
from rimkit.tasks import make_split, read_dataset, write_dataset
from rimkit.training import TrainConfig, train

log = logging.getLogger(__name__)

ARTIFACT_ENV = "RIM_ARTIFACT_ROOT"

REWEIGHTER_ALIASES = {
    "none": "identity",
    "fixed": "ema_fixed",
    "ema": "ema_fixed",
    "ema_scalar": "ema_learnable_scalar",
    "learnable_scalar": "ema_learnable_scalar",
    "ema_gated": "ema_gated_vector",
    "gated": "ema_gated_vector",
    "lookback": "transformer_lookback",
    "rimformer": "transformer_lookback",
}


def artifact_root():
    return os.environ.get(ARTIFACT_ENV) or os.path.join(os.getcwd(), "artifacts")


def derive_seed(master, label):
    """Independent 32-bit seed for the consumer named ``label``."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(label.encode())])
    return int(ss.generate_state(1)[0])


def resolve_reweighter(name):
    return REWEIGHTER_ALIASES.get(name, name)


# ---------------------------------------------------------------------------
# named tasks
# ---------------------------------------------------------------------------

_TASK_RE = re.compile(r"^(sudoku|maze)(\d+)$")


def parse_task_name(name):
    """'sudoku4' -> ('sudoku', 4). Raises ValueError for anything else."""
    m = _TASK_RE.match(name or "")
    if not m:
        raise ValueError(f"unknown task {name!r}; expected sudoku<size> or maze<size>")
    task, size = m.group(1), int(m.group(2))
    if task == "sudoku" and size not in (4, 6, 9):
        raise ValueError(f"sudoku size must be 4, 6 or 9, got {size}")
    if task == "maze" and (size < 9 or size % 2 == 0):
        raise ValueError(f"maze size must be odd and >= 9, got {size}")
    return task, size


def load_named_task(name, n_train, n_test, seed=0, cache_dir=None):
    """Generate (or reload from ``cache_dir``) a disjoint train/test split."""
    task, size = parse_task_name(name)
    if cache_dir:
        stem = os.path.join(cache_dir, f"{name}-n{n_train}-m{n_test}-s{seed}")
        tr_path, te_path = stem + ".train.txt", stem + ".test.txt"
        if os.path.exists(tr_path) and os.path.exists(te_path):
            return read_dataset(tr_path), read_dataset(te_path)
    train_set, test_set = make_split(task, size, n_train, n_test, seed)
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        write_dataset(tr_path, train_set)
        write_dataset(te_path, test_set)
    return train_set, test_set


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

def _cells():
    cells = [("identity", {"reweighter_kind": "identity"})]
    for a in (0.2, 0.4, 0.6, 0.8):
        cells.append((f"fixed_alpha_{a}", {"reweighter_kind": "ema_fixed", "alpha_L": a, "alpha_H": a}))
    cells += [
        ("learnable_scalar", {"reweighter_kind": "ema_learnable_scalar"}),
        ("zL_only", {"reweighter_kind": "ema_gated_vector", "reweighter_scope": "solver_only"}),
        ("zH_only", {"reweighter_kind": "ema_gated_vector", "reweighter_scope": "generator_only"}),
        ("gated", {"reweighter_kind": "ema_gated_vector"}),
    ]
    return cells


# row order: identity, fixed alpha grid, learnable scalars, partial gates, full gate
TABLE_CELLS = dict(_cells())
TABLE_ORDER = [name for name, _ in _cells()]


def cell_overrides(name, base=None):
    """Config overrides for a grid cell. ``rimformer`` uses lookback max(N, T)."""
    if name in TABLE_CELLS:
        return dict(TABLE_CELLS[name])
    if name == "rimformer":
        base = base or RimConfig()
        return {"reweighter_kind": "transformer_lookback", "lookback": max(base.N, base.T)}
    raise ConfigError("cells", f"unknown grid cell {name!r}")


def run_cell(overrides, seed, train_set, test_set, rim_base, train_base, out_dir=None):
    """Train one (cell, seed) pair; returns the result dict of ``train``."""
    cfg = RimConfig.from_dict({**rim_base.to_dict(), **overrides})
    model = RIM(cfg, seed=derive_seed(seed, "model"))
    tcfg = TrainConfig(**{**train_base.to_dict(), "seed": derive_seed(seed, "train"),
                          "supervision_segments": cfg.supervision_segments})
    metrics = ckpt = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics = os.path.join(out_dir, "metrics.csv")
        ckpt = os.path.join(out_dir, "checkpoint")
    return train(model, train_set, test_set, tcfg, metrics_path=metrics, checkpoint_dir=ckpt,
                 meta={"seed": seed, "cell_overrides": overrides})


def table_order(cells):
    """Sort cell names into the canonical table order; unknown names go last."""
    rank = {c: i for i, c in enumerate(TABLE_ORDER)}
    return sorted(cells, key=lambda c: rank.get(c, len(TABLE_ORDER)))


def unique_labels(names):
    """Suffix repeated cell names (#2, #3, ...) so each keeps its own summary row."""
    seen, out = {}, []
    for n in names:
        seen[n] = seen.get(n, 0) + 1
        out.append(n if seen[n] == 1 else f"{n}#{seen[n]}")
    return out


def run_grid(cells, seeds, train_set, test_set, rim_base, train_base, out_dir=None):
    """Train every cell under every seed.

    Returns a list of run records {cell, seed, exact_match, status, wall_seconds}.
    A failing cell is recorded with status 'failed' and does not stop the grid.
    """
    runs = []
    labels = unique_labels([c if isinstance(c, str) else c[0] for c in cells])
    for name, label in zip(cells, labels):
        try:
            overrides = cell_overrides(name, rim_base) if isinstance(name, str) else name[1]
        except ConfigError as exc:
            runs += [{"cell": label, "seed": s, "exact_match": None, "status": "failed",
                      "error": str(exc), "wall_seconds": 0.0} for s in seeds]
            continue
        for s in seeds:
            sub = os.path.join(out_dir, f"{label}-seed{s}") if out_dir else None
            try:
                res = run_cell(overrides, s, train_set, test_set, rim_base, train_base, sub)
                runs.append({"cell": label, "seed": s, "exact_match": res["exact_match"],
                             "status": "ok", "wall_seconds": res["wall_seconds"]})
            except Exception as exc:  # a broken cell must not sink the table
                log.exception("cell %s seed %s failed", label, s)
                runs.append({"cell": label, "seed": s, "exact_match": None, "status": "failed",
                             "error": str(exc), "wall_seconds": 0.0})
            log.info("cell %s seed %s: %s", label, s, runs[-1]["exact_match"])
    return runs


def summarize(runs):
    """Per-cell mean and (population) standard deviation, in first-seen order."""
    order, groups = [], {}
    for r in runs:
        if r["cell"] not in groups:
            order.append(r["cell"])
            groups[r["cell"]] = []
        groups[r["cell"]].append(r)
    out = []
    for cell in order:
        vals = [r["exact_match"] for r in groups[cell] if r["status"] == "ok" and r["exact_match"] is not None]
        failed = len(groups[cell]) - len(vals)
        out.append({
            "cell": cell,
            "n": len(vals),
            "mean": float(np.mean(vals)) if vals else math.nan,
            "std": float(np.std(vals)) if vals else math.nan,
            "status": "ok" if not failed else ("failed" if not vals else f"partial({failed} failed)"),
        })
    return out


ABLATION_COLUMNS = ("row", "cell", "seed", "exact_match", "mean", "std", "status")


def write_ablation_csv(path, runs, summary):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in runs:
            em = "" if r["exact_match"] is None else f"{r['exact_match']:.6f}"
            w.writerow(["run", r["cell"], r["seed"], em, "", "", r["status"]])
        for s in summary:
            w.writerow(["summary", s["cell"], "", "", f"{s['mean']:.6f}", f"{s['std']:.6f}", s["status"]])
