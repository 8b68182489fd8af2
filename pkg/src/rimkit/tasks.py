"""Desk-scale task generators and file formats.

Sudoku grids use tokens 0 (blank) and 1..size. Mazes use the five tokens in
``MAZE_TOKENS``. Tabular tasks are integer-coded discrete feature matrices
with binary labels.
"""

from __future__ import annotations

import hashlib
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

WALL, FREE, START, GOAL, PATH = range(5)
MAZE_TOKENS = {"wall": WALL, "free": FREE, "start": START, "goal": GOAL, "path": PATH}
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # N, E, S, W

SUDOKU_BOXES = {4: (2, 2), 6: (2, 3), 9: (3, 3)}


class GenerationError(RuntimeError):
    pass


@dataclass
class PuzzleInstance:
    task: str
    grid_shape: tuple
    inputs: np.ndarray
    targets: np.ndarray
    difficulty: int

    def key(self):
        return hashlib.sha256(self.inputs.astype(np.int8).tobytes()).hexdigest()


@dataclass
class PuzzleDataset:
    task: str
    grid_shape: tuple
    vocab: int
    inputs: np.ndarray   # (n, L) int
    targets: np.ndarray  # (n, L) int

    def __len__(self):
        return len(self.inputs)

    @property
    def seq_len(self):
        return self.inputs.shape[1]

    def subset(self, idx):
        return PuzzleDataset(self.task, self.grid_shape, self.vocab, self.inputs[idx], self.targets[idx])

    def keys(self):
        return {hashlib.sha256(r.astype(np.int8).tobytes()).hexdigest() for r in self.inputs}


# ---------------------------------------------------------------------------
# sudoku
# ---------------------------------------------------------------------------

def _sudoku_units(size):
    br, bc = SUDOKU_BOXES[size]
    return br, bc


def sudoku_valid(grid):
    """True when every row, column and box of a full grid is all-different."""
    g = np.asarray(grid)
    size = g.shape[0]
    br, bc = _sudoku_units(size)
    want = set(range(1, size + 1))
    for k in range(size):
        if set(g[k]) != want or set(g[:, k]) != want:
            return False
    for r0 in range(0, size, br):
        for c0 in range(0, size, bc):
            if set(g[r0:r0 + br, c0:c0 + bc].ravel()) != want:
                return False
    return True


def _candidates(g, r, c, size, br, bc):
    used = set(g[r]) | set(g[:, c])
    r0, c0 = r - r % br, c - c % bc
    used |= set(g[r0:r0 + br, c0:c0 + bc].ravel())
    return [v for v in range(1, size + 1) if v not in used]


def count_solutions(grid, limit=2):
    """Number of completions of ``grid`` (0 = blank), stopping at ``limit``."""
    g = np.array(grid, dtype=np.int64)
    size = g.shape[0]
    br, bc = _sudoku_units(size)
    count = 0

    def solve():
        nonlocal count
        blanks = np.argwhere(g == 0)
        if len(blanks) == 0:
            count += 1
            return count >= limit
        best, best_c = None, None
        for r, c in blanks:
            cand = _candidates(g, r, c, size, br, bc)
            if best_c is None or len(cand) < len(best_c):
                best, best_c = (r, c), cand
                if not cand:
                    return False
        r, c = best
        for v in best_c:
            g[r, c] = v
            if solve():
                g[r, c] = 0
                return True
        g[r, c] = 0
        return False

    solve()
    return count


def solve_sudoku(grid):
    """One completion of ``grid`` or None."""
    g = np.array(grid, dtype=np.int64)
    size = g.shape[0]
    br, bc = _sudoku_units(size)

    def fill():
        blanks = np.argwhere(g == 0)
        if len(blanks) == 0:
            return True
        r, c = blanks[0]
        for v in _candidates(g, r, c, size, br, bc):
            g[r, c] = v
            if fill():
                return True
        g[r, c] = 0
        return False

    return g if fill() else None


def _random_full_grid(size, rng):
    g = np.zeros((size, size), dtype=np.int64)
    br, bc = _sudoku_units(size)
    cells = [(r, c) for r in range(size) for c in range(size)]

    def fill(k):
        if k == len(cells):
            return True
        r, c = cells[k]
        cand = _candidates(g, r, c, size, br, bc)
        rng.shuffle(cand)
        for v in cand:
            g[r, c] = v
            if fill(k + 1):
                return True
        g[r, c] = 0
        return False

    fill(0)
    return g


def gen_sudoku(size, n_givens, seed, max_retries=50):
    """Random Sudoku with exactly ``n_givens`` clues and a unique solution."""
    if size not in SUDOKU_BOXES:
        raise ValueError(f"unsupported sudoku size {size}")
    if not 0 <= n_givens <= size * size:
        raise ValueError("n_givens out of range")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        solution = _random_full_grid(size, rng)
        puzzle = solution.copy()
        filled = size * size
        for flat in rng.permutation(size * size):
            if filled == n_givens:
                break
            r, c = divmod(int(flat), size)
            keep = puzzle[r, c]
            puzzle[r, c] = 0
            if count_solutions(puzzle, limit=2) == 1:
                filled -= 1
            else:
                puzzle[r, c] = keep
        if filled == n_givens:
            return PuzzleInstance("sudoku", (size, size), puzzle.ravel(), solution.ravel(), n_givens)
    raise GenerationError(f"no unique {size}x{size} sudoku with {n_givens} givens after {max_retries} tries")


# ---------------------------------------------------------------------------
# mazes
# ---------------------------------------------------------------------------

def bfs_shortest_path(grid, start, goal):
    """Shortest path over non-wall cells, neighbours expanded N, E, S, W.

    Returns the list of cells from start to goal inclusive, or None.
    """
    grid = np.asarray(grid)
    h, w = grid.shape
    prev = {tuple(start): None}
    queue = deque([tuple(start)])
    goal = tuple(goal)
    while queue:
        cur = queue.popleft()
        if cur == goal:
            break
        for dr, dc in MOVES:
            nr, nc = cur[0] + dr, cur[1] + dc
            if 0 <= nr < h and 0 <= nc < w and grid[nr, nc] != WALL and (nr, nc) not in prev:
                prev[(nr, nc)] = cur
                queue.append((nr, nc))
    if goal not in prev:
        return None
    path, node = [], goal
    while node is not None:
        path.append(node)
        node = prev[node]
    return path[::-1]


def gen_maze(size, seed, start=None, goal=None, extra_openings=0):
    """Recursive-backtracker maze on a ``size`` x ``size`` grid (odd size >= 9).

    Rooms sit at odd coordinates. ``extra_openings`` knocks out additional
    interior walls to create loops. The target marks every shortest-path cell
    (start and goal included) with PATH.
    """
    if size < 9 or size % 2 == 0:
        raise ValueError("maze size must be odd and >= 9")
    rng = np.random.default_rng(seed)
    grid = np.full((size, size), WALL, dtype=np.int64)
    rooms = [(r, c) for r in range(1, size, 2) for c in range(1, size, 2)]
    first = rooms[rng.integers(len(rooms))]
    grid[first] = FREE
    stack, seen = [first], {first}
    while stack:
        r, c = stack[-1]
        nbrs = [(r + 2 * dr, c + 2 * dc) for dr, dc in MOVES
                if 0 < r + 2 * dr < size and 0 < c + 2 * dc < size and (r + 2 * dr, c + 2 * dc) not in seen]
        if not nbrs:
            stack.pop()
            continue
        nr, nc = nbrs[rng.integers(len(nbrs))]
        grid[(r + nr) // 2, (c + nc) // 2] = FREE
        grid[nr, nc] = FREE
        seen.add((nr, nc))
        stack.append((nr, nc))
    if extra_openings:
        walls = [(r, c) for r in range(1, size - 1) for c in range(1, size - 1)
                 if grid[r, c] == WALL and (r % 2) != (c % 2)]
        for k in rng.permutation(len(walls))[:extra_openings]:
            grid[walls[k]] = FREE
    if start is None or goal is None:
        a, b = rng.choice(len(rooms), size=2, replace=False)
        start = rooms[a] if start is None else tuple(start)
        goal = rooms[b] if goal is None else tuple(goal)
    start, goal = tuple(start), tuple(goal)
    if grid[start] == WALL or grid[goal] == WALL:
        raise ValueError("start and goal must be free cells")
    path = bfs_shortest_path(grid, start, goal)
    inputs = grid.copy()
    inputs[start] = START
    inputs[goal] = GOAL
    targets = inputs.copy()
    for cell in path:
        targets[cell] = PATH
    return PuzzleInstance("maze", (size, size), inputs.ravel(), targets.ravel(), size)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def _vocab_for(task, size):
    return size + 1 if task == "sudoku" else len(MAZE_TOKENS)


def make_puzzles(task, size, count, seed, n_givens=None, exclude=(), max_attempts=None):
    """``count`` distinct instances whose input hash is not in ``exclude``."""
    exclude = set(exclude)
    out, keys = [], set()
    ss = np.random.SeedSequence([seed, 0x5eed])
    max_attempts = max_attempts or count * 50 + 100
    for child in ss.spawn(max_attempts):
        if len(out) == count:
            break
        s = int(child.generate_state(1)[0])
        if task == "sudoku":
            inst = gen_sudoku(size, n_givens if n_givens is not None else default_givens(size), s)
        elif task == "maze":
            inst = gen_maze(size, s)
        else:
            raise ValueError(f"unknown puzzle task {task!r}")
        k = inst.key()
        if k in keys or k in exclude:
            continue
        keys.add(k)
        out.append(inst)
    if len(out) < count:
        raise GenerationError(f"only {len(out)} distinct {task} instances after {max_attempts} attempts")
    return PuzzleDataset(task, out[0].grid_shape, _vocab_for(task, size),
                         np.stack([i.inputs for i in out]), np.stack([i.targets for i in out]))


def default_givens(size):
    return {4: 6, 6: 18, 9: 30}[size]


def make_split(task, size, n_train, n_test, seed, n_givens=None):
    """Disjoint train/test sets (no test input appears in train)."""
    train = make_puzzles(task, size, n_train, seed * 2 + 1, n_givens)
    test = make_puzzles(task, size, n_test, seed * 2 + 2, n_givens, exclude=train.keys())
    return train, test


def _open_for_write(path):
    parent = os.path.dirname(str(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    return open(path, "w")


def write_dataset(path, ds):
    with _open_for_write(path) as fh:
        shape = "x".join(str(s) for s in ds.grid_shape)
        fh.write(f"# task={ds.task} shape={shape} vocab={ds.vocab} count={len(ds)}\n")
        for x, y in zip(ds.inputs, ds.targets):
            fh.write(" ".join(map(str, x)) + " | " + " ".join(map(str, y)) + "\n")


def read_dataset(path):
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError(f"{path}: line 1: missing dataset header")
        meta = dict(kv.split("=", 1) for kv in header[1:].split())
        xs, ys = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                a, b = line.split("|")
                xs.append([int(t) for t in a.split()])
                ys.append([int(t) for t in b.split()])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed instance") from None
    shape = tuple(int(s) for s in meta["shape"].split("x"))
    ds = PuzzleDataset(meta["task"], shape, int(meta["vocab"]),
                       np.array(xs, dtype=np.int64).reshape(-1, int(np.prod(shape))),
                       np.array(ys, dtype=np.int64).reshape(-1, int(np.prod(shape))))
    if int(meta.get("count", len(ds))) != len(ds):
        raise ValueError(f"{path}: header count {meta['count']} but {len(ds)} instances")
    return ds


# ---------------------------------------------------------------------------
# tabular
# ---------------------------------------------------------------------------

@dataclass
class TabularTask:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    domains: list
    names: list = field(default_factory=list)
    corruption_rate: float = 0.0
    corruption_mask: np.ndarray = None
    X_test_clean: np.ndarray = None   # kept for oracle evaluation only

    @property
    def n_features(self):
        return self.X_train.shape[1]


def feature_domains(*matrices):
    """Sorted observed values per column, pooled over the given matrices."""
    stacked = np.concatenate([np.asarray(m) for m in matrices], axis=0)
    return [np.unique(stacked[:, j]) for j in range(stacked.shape[1])]


def corrupt_features(task, p, seed):
    """Replace exactly round(p * #cells) test cells with uniform draws from
    each feature's observed domain."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("corruption rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    clean = task.X_test if task.X_test_clean is None else task.X_test_clean
    n, m = clean.shape
    k = int(round(p * n * m))
    mask = np.zeros(n * m, dtype=bool)
    mask[rng.choice(n * m, size=k, replace=False)] = True
    mask = mask.reshape(n, m)
    noisy = clean.copy()
    for j in range(m):
        rows = np.flatnonzero(mask[:, j])
        dom = np.asarray(task.domains[j])
        noisy[rows, j] = dom[rng.integers(len(dom), size=len(rows))]
    return TabularTask(task.X_train, task.y_train, noisy, task.y_test, task.domains, task.names,
                       p, mask, clean.copy())


def make_synthetic_tabular(n_train=400, n_test=200, n_features=8, seed=0, flip=0.15):
    """Binary features generated from a binary label and a binary nuisance factor.

    Each feature copies either the label or the nuisance factor and is
    flipped with probability ``flip``, so features are strongly dependent on
    one another and redundant views of the label.
    """
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    y = rng.integers(2, size=n)
    g = rng.integers(2, size=n)
    source = np.where(np.arange(n_features) % 4 == 3, 1, 0)  # every 4th feature follows g
    base = np.where(source[None, :] == 0, y[:, None], g[:, None])
    flips = rng.random((n, n_features)) < flip
    X = np.where(flips, 1 - base, base).astype(np.int64)
    names = [f"f{j}" for j in range(n_features)]
    return TabularTask(X[:n_train], y[:n_train], X[n_train:], y[n_train:],
                       [np.array([0, 1])] * n_features, names, 0.0, None, X[n_train:].copy())


def quantile_edges(column, n_bins=8):
    qs = np.quantile(np.asarray(column, dtype=float), np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.unique(qs)


def apply_bins(column, edges):
    return np.searchsorted(edges, np.asarray(column, dtype=float), side="right").astype(np.int64)


def read_tabular_csv(path):
    """Read a CSV whose first line is '#name:type,...' (type: cat, num, label).

    Returns (names, types, raw rows as float array, labels or None).
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: line 1: missing schema preamble")
    schema = [c.split(":") for c in lines[0][1:].split(",")]
    if any(len(c) != 2 or c[1] not in ("cat", "num", "label") for c in schema):
        raise ValueError(f"{path}: line 1: schema entries must be name:cat|num|label")
    names = [c[0] for c in schema]
    types = [c[1] for c in schema]
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(schema):
            raise ValueError(f"{path}: line {lineno}: expected {len(schema)} fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: non-numeric field") from None
    data = np.array(rows, dtype=float).reshape(-1, len(schema))
    label_cols = [i for i, t in enumerate(types) if t == "label"]
    feat_cols = [i for i, t in enumerate(types) if t != "label"]
    labels = data[:, label_cols[0]].astype(np.int64) if label_cols else None
    return ([names[i] for i in feat_cols], [types[i] for i in feat_cols], data[:, feat_cols], labels)


def write_tabular_csv(path, X, y=None, names=None, types=None):
    X = np.asarray(X)
    names = names or [f"f{j}" for j in range(X.shape[1])]
    types = types or ["cat"] * X.shape[1]
    cols = [f"{n}:{t}" for n, t in zip(names, types)]
    if y is not None:
        cols.append("y:label")
    with _open_for_write(path) as fh:
        fh.write("#" + ",".join(cols) + "\n")
        for i, row in enumerate(X):
            vals = [_fmt(v) for v in row]
            if y is not None:
                vals.append(str(int(y[i])))
            fh.write(",".join(vals) + "\n")


def _fmt(v):
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def discretize(train_X, test_X, types, n_bins=8):
    """Integer-code both matrices; numeric columns are quantile-binned on train."""
    tr = np.empty(train_X.shape, dtype=np.int64)
    te = np.empty(test_X.shape, dtype=np.int64)
    for j, t in enumerate(types):
        if t == "num":
            edges = quantile_edges(train_X[:, j], n_bins)
            tr[:, j] = apply_bins(train_X[:, j], edges)
            te[:, j] = apply_bins(test_X[:, j], edges)
        else:
            tr[:, j] = train_X[:, j].astype(np.int64)
            te[:, j] = test_X[:, j].astype(np.int64)
    return tr, te


def effective_mismatch_rate(p, domain_size):
    """Probability that a cell differs from its clean value under uniform replacement."""
    return p * (1.0 - 1.0 / domain_size)
