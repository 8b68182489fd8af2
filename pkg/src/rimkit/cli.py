"""rimkit command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 invalid input. Every command
that produces artifacts also writes ``manifest.json`` next to them, even when
it fails.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from rimkit import experiments as ex
from rimkit.loop import ConfigError, RimConfig
from rimkit.tabrim import (GenerativeSpec, ExactCPT, KNNConditional, TabRIM,
                           brute_force_posterior, total_variation)
from rimkit.tasks import (corrupt_features, discretize, effective_mismatch_rate, feature_domains,
                          make_puzzles, make_split, make_synthetic_tabular, read_dataset,
                          read_tabular_csv, write_dataset, write_tabular_csv)
from rimkit.training import TrainConfig, evaluate, load_checkpoint

log = logging.getLogger("rimkit")

OK, RUNTIME_FAILURE, INVALID_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def content_hash(paths):
    """git-style blob hashes of the given input files."""
    out = {}
    for p in paths:
        if p and os.path.isfile(p):
            with open(p, "rb") as fh:
                data = fh.read()
            out[p] = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
    return out


class Manifest:
    def __init__(self, path, command, config, seed, inputs=()):
        self.path = path
        self.record = {
            "command": command,
            "config": config,
            "seed": seed,
            "started": _now(),
            "finished": None,
            "status": "running",
            "exit_code": None,
            "artifacts": [],
            "inputs": content_hash(inputs),
        }

    def add(self, path):
        if path not in self.record["artifacts"]:
            self.record["artifacts"].append(path)

    def close(self, code, error=None):
        self.record.update(finished=_now(), exit_code=code,
                           status="ok" if code == OK else "failed")
        if error:
            self.record["error"] = error
        if self.path:
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            with open(self.path, "w") as fh:
                json.dump(self.record, fh, indent=2, default=str)


def _load_config_file(path):
    if not path:
        return {}
    if not os.path.isfile(path):
        raise InputError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: expected a JSON object of key/value pairs")
    return cfg


def _split_config(merged):
    """Split a flat key/value dict into RimConfig and TrainConfig kwargs."""
    rim_keys = {f.name for f in dataclasses.fields(RimConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    rim, tr, rest = {}, {}, {}
    for k, v in merged.items():
        if k in rim_keys:
            rim[k] = v
        if k in train_keys:
            tr[k] = v
        if k not in rim_keys and k not in train_keys:
            rest[k] = v
    return rim, tr, rest


# flag name -> config key, for the model/training surface shared by train and ablate
_MODEL_FLAGS = [
    ("T", int), ("N", int), ("d", int), ("depth", int), ("heads", int), ("expansion", int),
    ("lookback", int), ("arch", str), ("norm", str), ("backbone_kind", str),
    ("reweighter_scope", str), ("alpha_L", float), ("alpha_H", float),
    ("gate_bias_init", float), ("scalar_init", float),
]
_TRAIN_FLAGS = [
    ("epochs", int), ("batch_size", int), ("lr", float), ("weight_decay", float),
    ("supervision_segments", int), ("clip_norm", float), ("eval_every", int),
    ("warmup_steps", int), ("time_budget", float), ("lr_schedule", str), ("min_lr_ratio", float),
]


def _add_model_flags(p):
    g = p.add_argument_group("model")
    for name, typ in _MODEL_FLAGS:
        g.add_argument(f"--{name.replace('_', '-')}" if len(name) > 1 else f"--{name}",
                       dest=name, type=typ, default=None)
    g.add_argument("--reweighter", default=None, help="reweighter kind or alias (e.g. ema_gated)")
    g.add_argument("--alpha", type=float, default=None, help="fixed EMA coefficient for both streams")
    t = p.add_argument_group("training")
    for name, typ in _TRAIN_FLAGS:
        t.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)
    t.add_argument("--supervise-all-outer", dest="supervise_all_outer", action="store_true",
                   default=None)
    p.add_argument("--config", help="JSON file of configuration keys; flags override it")


def _flag_overrides(args):
    out = {}
    for name, _ in _MODEL_FLAGS + _TRAIN_FLAGS + [("supervise_all_outer", bool)]:
        v = getattr(args, name, None)
        if v is not None:
            out[name] = v
    if getattr(args, "reweighter", None):
        out["reweighter_kind"] = ex.resolve_reweighter(args.reweighter)
    if getattr(args, "alpha", None) is not None:
        out["alpha_L"] = out["alpha_H"] = args.alpha
    return out


def _load_puzzles(args, seed):
    """Returns (train_set, test_set, input paths)."""
    if args.train_file:
        if not os.path.isfile(args.train_file):
            raise InputError(f"dataset not found: {args.train_file}")
        if args.test_file and not os.path.isfile(args.test_file):
            raise InputError(f"dataset not found: {args.test_file}")
        try:
            tr = read_dataset(args.train_file)
            te = read_dataset(args.test_file) if args.test_file else None
        except (ValueError, KeyError) as exc:
            raise InputError(str(exc)) from None
        return tr, te, [args.train_file, args.test_file]
    if not args.task:
        raise InputError("give --task NAME or --train-file PATH")
    if os.sep in args.task or args.task.endswith(".txt"):
        if not os.path.isfile(args.task):
            raise InputError(f"dataset not found: {args.task}")
        try:
            return read_dataset(args.task), None, [args.task]
        except (ValueError, KeyError) as exc:
            raise InputError(str(exc)) from None
    try:
        ex.parse_task_name(args.task)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    cache = os.path.join(ex.artifact_root(), "datasets")
    tr, te = ex.load_named_task(args.task, args.n_train, args.n_test, seed, cache_dir=cache)
    return tr, te, []


def _resolve_configs(args, train_set):
    merged = _load_config_file(args.config)
    merged.update(_flag_overrides(args))
    merged.setdefault("seq_len", train_set.seq_len)
    merged.setdefault("vocab", train_set.vocab)
    rim, tr, rest = _split_config(merged)
    if rest:
        raise InputError(f"unknown configuration key {sorted(rest)[0]!r}")
    rim_cfg = RimConfig(**rim)
    tr.setdefault("supervision_segments", rim_cfg.supervision_segments)
    return rim_cfg, TrainConfig(**tr)


def _default_out(kind, name):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return os.path.join(ex.artifact_root(), kind, f"{name}-{stamp}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _gen_task(args, man):
    out = args.out
    if args.task in ("sudoku", "maze"):
        if args.test_count:
            tr, te = make_split(args.task, args.size, args.count, args.test_count, args.seed,
                                args.givens)
            test_out = args.test_out or out.replace(".txt", "") + ".test.txt"
            write_dataset(out, tr)
            write_dataset(test_out, te)
            man.add(out)
            man.add(test_out)
        else:
            write_dataset(out, make_puzzles(args.task, args.size, args.count, args.seed, args.givens))
            man.add(out)
        return
    n_test = args.test_count or max(1, args.count // 2)
    task = make_synthetic_tabular(args.count, n_test, args.size, args.seed)
    write_tabular_csv(out, task.X_train, task.y_train, task.names)
    man.add(out)
    test_out = args.test_out or out.replace(".csv", "") + ".test.csv"
    noisy = corrupt_features(task, args.corrupt, ex.derive_seed(args.seed, "corrupt"))
    write_tabular_csv(test_out, noisy.X_test, noisy.y_test, task.names)
    man.add(test_out)


def cmd_gen_task(args):
    man = Manifest(args.manifest or (args.out + ".manifest.json"), "gen-task", vars(args), args.seed)
    if args.task == "sudoku" and args.size not in (4, 6, 9):
        man.close(INVALID_INPUT, "sudoku size must be 4, 6 or 9")
        print("error: sudoku size must be 4, 6 or 9", file=sys.stderr)
        return INVALID_INPUT
    if args.task == "maze" and (args.size < 9 or args.size % 2 == 0):
        man.close(INVALID_INPUT, "maze size must be odd and >= 9")
        print("error: maze size must be odd and >= 9", file=sys.stderr)
        return INVALID_INPUT
    if args.count < 1 or not 0.0 <= args.corrupt <= 1.0:
        man.close(INVALID_INPUT, "need --count >= 1 and --corrupt in [0, 1]")
        print("error: need --count >= 1 and --corrupt in [0, 1]", file=sys.stderr)
        return INVALID_INPUT
    try:
        _gen_task(args, man)
    except Exception as exc:
        log.exception("generation failed")
        man.close(RUNTIME_FAILURE, str(exc))
        return RUNTIME_FAILURE
    man.close(OK)
    print("\n".join(man.record["artifacts"]))
    return OK


def cmd_train(args):
    out = args.out or _default_out("runs", args.task or "train")
    os.makedirs(out, exist_ok=True)
    man = Manifest(os.path.join(out, "manifest.json"), "train", {}, args.seed)
    try:
        train_set, test_set, inputs = _load_puzzles(args, ex.derive_seed(args.seed, "data"))
        man.record["inputs"] = content_hash(inputs)
        rim_cfg, tcfg = _resolve_configs(args, train_set)
        tcfg = dataclasses.replace(tcfg, seed=ex.derive_seed(args.seed, "train"))
        man.record["config"] = {"rim": rim_cfg.to_dict(), "train": tcfg.to_dict(), "task": args.task,
                                "n_train": args.n_train, "n_test": args.n_test}
    except (InputError, ConfigError) as exc:
        man.close(INVALID_INPUT, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return INVALID_INPUT
    from rimkit.loop import RIM
    from rimkit.training import train

    metrics = os.path.join(out, "metrics.csv")
    ckpt = os.path.join(out, "checkpoint")
    try:
        model = RIM(rim_cfg, seed=ex.derive_seed(args.seed, "model"))
        man.add(metrics)
        res = train(model, train_set, test_set, tcfg, metrics_path=metrics, checkpoint_dir=ckpt,
                    meta={"seed": args.seed, "task": args.task})
        man.add(ckpt)
        man.record["result"] = {"exact_match": res["exact_match"], "steps": res["steps"],
                                "wall_seconds": res["wall_seconds"]}
    except Exception as exc:
        log.exception("training failed")
        man.close(RUNTIME_FAILURE, str(exc))
        return RUNTIME_FAILURE
    man.close(OK)
    print(json.dumps({"out": out, **man.record["result"]}))
    return OK


def cmd_eval(args):
    if not os.path.isdir(args.checkpoint):
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return INVALID_INPUT
    if not os.path.isfile(args.data):
        print(f"error: dataset not found: {args.data}", file=sys.stderr)
        return INVALID_INPUT
    try:
        model, _ = load_checkpoint(args.checkpoint)
        ds = read_dataset(args.data)
        res = evaluate(model, ds, args.segments)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID_INPUT
    print(json.dumps(res))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(res, fh, indent=2)
    return OK


def cmd_ablate(args):
    out = args.out or _default_out("ablations", args.task or "grid")
    os.makedirs(out, exist_ok=True)
    man = Manifest(os.path.join(out, "manifest.json"), "ablate", {}, args.seeds)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        if not seeds:
            raise InputError("--seeds is empty")
        cells = [c.strip() for c in args.cells.split(",") if c.strip()] if args.cells else ex.TABLE_ORDER
        cells = ex.table_order(cells)
        train_set, test_set, inputs = _load_puzzles(args, ex.derive_seed(args.data_seed, "data"))
        if test_set is None:
            raise InputError("ablation needs a held-out split (named task or --test-file)")
        man.record["inputs"] = content_hash(inputs)
        rim_cfg, tcfg = _resolve_configs(args, train_set)
        for c in cells:
            ex.cell_overrides(c, rim_cfg)
    except (InputError, ConfigError, ValueError) as exc:
        man.close(INVALID_INPUT, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return INVALID_INPUT
    man.record["config"] = {"rim": rim_cfg.to_dict(), "train": tcfg.to_dict(), "cells": cells,
                            "seeds": seeds, "task": args.task}
    table = os.path.join(out, "ablation.csv")
    try:
        runs = ex.run_grid(cells, seeds, train_set, test_set, rim_cfg, tcfg,
                           out_dir=None if args.no_run_dirs else out)
        summary = ex.summarize(runs)
        ex.write_ablation_csv(table, runs, summary)
        man.add(table)
    except Exception as exc:
        log.exception("ablation failed")
        man.close(RUNTIME_FAILURE, str(exc))
        return RUNTIME_FAILURE
    man.close(OK)
    for s in summary:
        print(f"{s['cell']:<18} {s['mean']:.4f} +/- {s['std']:.4f}  ({s['status']})")
    return OK


def _read_tab(path, what):
    if not os.path.isfile(path):
        raise InputError(f"{what} not found: {path}")
    try:
        return read_tabular_csv(path)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def cmd_tabrim(args):
    out = args.out
    man = Manifest(args.manifest or (out + ".manifest.json"), "tabrim", vars(args), args.seed,
                   [args.train, args.test])
    try:
        names, types, Xtr_raw, ytr = _read_tab(args.train, "training CSV")
        names_te, _, Xte_raw, yte = _read_tab(args.test, "test CSV")
        if ytr is None:
            raise InputError(f"{args.train}: training data needs a label column")
        if names_te != names:
            raise InputError("train and test schemas differ")
        Xtr, Xte = discretize(Xtr_raw, Xte_raw, types, args.bins)
        doms = feature_domains(Xtr, Xte)
        sizes = [int(d.max()) + 1 for d in doms]
        eps = args.eps
        if eps is None:
            if args.corruption is None:
                raise InputError("give --eps or --corruption")
            eps = float(np.mean([effective_mismatch_rate(args.corruption, len(d)) for d in doms]))
        if args.burn < 0 or args.keep < 1 or args.chains < 1:
            raise InputError("need --burn >= 0, --keep >= 1, --chains >= 1")
        if not 0.0 < eps < 1.0:
            raise InputError(f"--eps must lie in (0, 1), got {eps}")
        man.record["config"]["eps_resolved"] = eps
    except InputError as exc:
        man.close(INVALID_INPUT, str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return INVALID_INPUT
    try:
        cond = KNNConditional(Xtr, ytr, sizes, k=args.k, smoothing=args.smoothing)
        model = TabRIM(cond, eps, args.burn, args.keep, args.chains, args.mode,
                       weighted=not args.unweighted, seed=args.seed)
        proba = model.predict_proba(Xte)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row_id", "p_y1", "label"])
            for i, p in enumerate(proba):
                w.writerow([i, f"{p[1]:.6f}", int(np.argmax(p))])
        man.add(out)
        summary = {"rows": len(proba)}
        if model.last_agreement is not None:
            summary["max_chain_tv"] = float(model.last_agreement.max())
        if yte is not None and len(np.unique(yte)) == 2:
            from sklearn.metrics import average_precision_score, roc_auc_score

            summary["auc_roc"] = float(roc_auc_score(yte, proba[:, 1]))
            summary["auc_pr"] = float(average_precision_score(yte, proba[:, 1]))
        man.record["result"] = summary
    except Exception as exc:
        log.exception("tabrim failed")
        man.close(RUNTIME_FAILURE, str(exc))
        return RUNTIME_FAILURE
    man.close(OK)
    print(json.dumps(summary))
    return OK


def oracle_check(spec, n_evidence=20, burn=500, keep=2000, chains=4, seed=0):
    """Largest TV between TabRIM and exact enumeration over random evidence rows."""
    rng = np.random.default_rng(ex.derive_seed(seed, "evidence"))
    _, _, E = spec.sample(n_evidence, rng)
    model = TabRIM(ExactCPT(spec.p_x, spec.p_y_given_x), spec.eps, burn, keep, chains,
                   seed=ex.derive_seed(seed, "chains"))
    est = model.predict_proba(E)
    exact = np.stack([brute_force_posterior(e, spec) for e in E])
    return total_variation(est, exact), E


def cmd_oracle_check(args):
    if not os.path.isfile(args.fixture):
        print(f"error: fixture not found: {args.fixture}", file=sys.stderr)
        return INVALID_INPUT
    try:
        spec = GenerativeSpec.from_json(args.fixture)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {args.fixture}: {exc}", file=sys.stderr)
        return INVALID_INPUT
    tv, _ = oracle_check(spec, args.n_evidence, args.burn, args.keep, args.chains, args.seed)
    worst = float(tv.max())
    ok = worst < args.tol
    print(json.dumps({"max_tv": worst, "mean_tv": float(tv.mean()), "tol": args.tol,
                      "pass": bool(ok)}))
    return OK if ok else RUNTIME_FAILURE


def _read_metrics(path):
    """Rows of a metrics CSV; raises InputError naming the bad line."""
    from rimkit.training import METRIC_COLUMNS

    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise InputError(f"{path}: line 1: expected header {','.join(METRIC_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(METRIC_COLUMNS):
                raise InputError(f"{path}: line {lineno}: expected {len(METRIC_COLUMNS)} fields")
            try:
                rows.append({"epoch": int(rec[0]), "segment": int(rec[1]), "loss": float(rec[2]),
                             "exact_match": float(rec[3]) if rec[3] else None,
                             "wall_seconds": float(rec[4])})
            except ValueError:
                raise InputError(f"{path}: line {lineno}: malformed field") from None
    return rows


def _read_ablation(path):
    runs = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(ex.ABLATION_COLUMNS):
                raise InputError(f"{path}: line {lineno}: expected {len(ex.ABLATION_COLUMNS)} fields")
            if rec[0] != "run":
                continue
            try:
                em = float(rec[3]) if rec[3] else None
                runs.append({"cell": rec[1], "seed": int(rec[2]), "exact_match": em, "status": rec[6]})
            except ValueError:
                raise InputError(f"{path}: line {lineno}: malformed field") from None
    return runs


def cmd_report(args):
    summary, curves, ablation = [], [], []
    try:
        for path in args.files:
            if not os.path.isfile(path):
                raise InputError(f"file not found: {path}")
            with open(path) as fh:
                first = fh.readline().strip()
            if first == ",".join(ex.ABLATION_COLUMNS):
                ablation += ex.summarize(_read_ablation(path))
                continue
            rows = _read_metrics(path)
            run = os.path.basename(os.path.dirname(os.path.abspath(path))) or path
            evals = [r for r in rows if r["exact_match"] is not None]
            final = evals[-1]["exact_match"] if evals else float("nan")
            summary.append({
                "run": run, "path": path,
                "epochs": max((r["epoch"] for r in rows), default=0),
                "final_loss": rows[-1]["loss"] if rows else float("nan"),
                "final_exact_match": final,
                "best_exact_match": max((r["exact_match"] for r in evals), default=float("nan")),
                "wall_seconds": rows[-1]["wall_seconds"] if rows else 0.0,
            })
            for r in rows:
                curves.append({"run": run, **r})
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID_INPUT

    summary.sort(key=lambda s: -s["final_exact_match"] if s["final_exact_match"] == s["final_exact_match"] else 1.0)
    cols = ("run", "path", "epochs", "final_loss", "final_exact_match", "best_exact_match", "wall_seconds")
    if args.summary_out:
        _write_dicts(args.summary_out, cols, summary)
    if args.curves_out:
        _write_dicts(args.curves_out, ("run", "epoch", "segment", "loss", "exact_match", "wall_seconds"),
                     curves)
    if args.ablation_out and ablation:
        _write_dicts(args.ablation_out, ("cell", "n", "mean", "std", "status"), ablation)
    for s in summary:
        print(f"{s['run']:<32} epochs={s['epochs']:<4} exact_match={s['final_exact_match']:.4f} "
              f"loss={s['final_loss']:.4f}")
    for a in ablation:
        print(f"{a['cell']:<18} {a['mean']:.4f} +/- {a['std']:.4f}")
    return OK


def _write_dicts(path, cols, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_task_flags(p):
    p.add_argument("--task", help="named task (sudoku4, maze9, ...) or a dataset file")
    p.add_argument("--train-file", dest="train_file")
    p.add_argument("--test-file", dest="test_file")
    p.add_argument("--n-train", dest="n_train", type=int, default=3000)
    p.add_argument("--n-test", dest="n_test", type=int, default=500)


def build_parser():
    ap = argparse.ArgumentParser(prog="rimkit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-task", help="generate a dataset file")
    p.add_argument("--task", choices=("sudoku", "maze", "tabular"), required=True)
    p.add_argument("--size", type=int, required=True,
                   help="grid size (puzzles) or number of features (tabular)")
    p.add_argument("--count", type=int, required=True, help="instances (training rows for tabular)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--test-count", dest="test_count", type=int, default=0)
    p.add_argument("--test-out", dest="test_out")
    p.add_argument("--givens", type=int, default=None, help="sudoku givens (default by size)")
    p.add_argument("--corrupt", type=float, default=0.25, help="tabular test corruption rate")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_gen_task)

    p = sub.add_parser("train", help="train a RIM on a puzzle task")
    _add_task_flags(p)
    _add_model_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="run directory (default under the artifact root)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="exact match of a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--segments", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train a grid of reweighter cells over shared seeds")
    _add_task_flags(p)
    _add_model_flags(p)
    p.add_argument("--cells", help=f"comma list (default: {','.join(ex.TABLE_ORDER)})")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--data-seed", dest="data_seed", type=int, default=0)
    p.add_argument("--no-run-dirs", dest="no_run_dirs", action="store_true",
                   help="skip per-run checkpoints and metrics")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("tabrim", help="denoise-and-predict a noisy tabular CSV")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--corruption", type=float, default=None,
                   help="known corruption rate; sets eps to the effective mismatch rate")
    p.add_argument("--burn", type=int, default=5)
    p.add_argument("--keep", type=int, default=10)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--mode", choices=("joint", "marginal"), default="joint")
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--smoothing", type=float, default=1.0)
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--unweighted", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_tabrim)

    p = sub.add_parser("oracle-check", help="TabRIM vs exact enumeration on a frozen net")
    p.add_argument("--fixture", required=True)
    p.add_argument("--n-evidence", dest="n_evidence", type=int, default=20)
    p.add_argument("--burn", type=int, default=500)
    p.add_argument("--keep", type=int, default=2000)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("report", help="merge metrics or ablation CSVs")
    p.add_argument("files", nargs="+")
    p.add_argument("--summary-out", dest="summary_out")
    p.add_argument("--curves-out", dest="curves_out")
    p.add_argument("--ablation-out", dest="ablation_out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID_INPUT
    except Exception as exc:
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_FAILURE


if __name__ == "__main__":
    sys.exit(main())
