"""Reward-collection selection of reference cameras.

Every previously aligned camera is a node of a complete graph whose edge
lengths are distances between camera centres and whose node reward is the
negative training loss of that camera.  We want ``d`` nodes with maximum total
reward whose shortest open path is at least ``s_th`` long.  Two solvers are
provided: a greedy walk from an auxiliary start node and an exhaustive search
used as an oracle and as the slow side of the runtime comparison.
"""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceededError

# C(16, 6) * 2**6 * 6**2 -- the largest default brute-force instance
DEFAULT_BUDGET = math.comb(16, 6) * 2**6 * 6**2


@dataclass
class PoseGraph:
    positions: np.ndarray  # (n, 3)
    rewards: np.ndarray  # (n,)
    edges: np.ndarray  # (n, n)

    @property
    def n(self):
        return len(self.rewards)

    @classmethod
    def from_positions(cls, positions, rewards):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
        if len(positions) == 0:
            raise ValueError("pose graph needs at least one node")
        if len(positions) != len(rewards):
            raise ValueError(
                f"got {len(positions)} positions but {len(rewards)} rewards")
        diff = positions[:, None, :] - positions[None, :, :]
        edges = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        return cls(positions, rewards, edges)


@dataclass(frozen=True)
class SelectionConfig:
    d: int
    s_th: float = 0.0
    lam: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be a positive integer")
        if not (math.isfinite(self.s_th) and self.s_th >= 0):
            raise ValueError("s_th must be finite and nonnegative")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("lambda must be finite and nonnegative")


@dataclass
class Selection:
    nodes: list
    total_reward: float
    path_length: float
    feasible: bool


def build_graph(poses, rewards):
    if len(poses) == 0:
        raise ValueError("pose graph needs at least one camera")
    if len(poses) != len(rewards):
        raise ValueError(f"got {len(poses)} poses but {len(rewards)} rewards")
    return PoseGraph.from_positions([p.trans for p in poses], rewards)


def shortest_hamiltonian_path(g, subset):
    """Length of the shortest open path visiting every node of ``subset`` once.

    Held-Karp over bitmasks; endpoints are free, so every node may start.
    """
    nodes = list(subset)
    if not nodes:
        raise ValueError("subset must contain at least one node")
    k = len(nodes)
    if k == 1:
        return 0.0
    e = g.edges[np.ix_(nodes, nodes)].tolist()
    full = 1 << k
    inf = math.inf
    # best[mask][j]: shortest path covering `mask` that ends at j
    best = [[inf] * k for _ in range(full)]
    for j in range(k):
        best[1 << j][j] = 0.0
    for mask in range(1, full):
        row = best[mask]
        for j in range(k):
            cost = row[j]
            if cost == inf:
                continue
            ej = e[j]
            for nxt in range(k):
                bit = 1 << nxt
                if mask & bit:
                    continue
                cand = cost + ej[nxt]
                target = best[mask | bit]
                if cand < target[nxt]:
                    target[nxt] = cand
    return min(best[full - 1])


def _check_d(g, cfg):
    if cfg.d > g.n:
        raise ValueError(f"cannot select d={cfg.d} nodes from a graph of {g.n}")


def greedy_order(g, cfg):
    """Greedy walk maximising ``R_i + lam * (s_th / d - e_ki)`` at each hop.

    The walk starts from an auxiliary node joined to every camera by a
    zero-length edge, so the first pick is the highest-reward camera.  Ties go
    to the lowest index.  Returns the visit order only.
    """
    _check_d(g, cfg)
    # plain lists: this runs on small graphs where numpy call overhead dominates
    base = [r + cfg.lam * cfg.s_th / cfg.d for r in g.rewards.tolist()]
    scores = base  # distances from the auxiliary node are 0
    unvisited = list(range(g.n))
    order = []
    for _ in range(cfg.d):
        # max() keeps the first maximum, i.e. the lowest index on ties
        k = max(unvisited, key=scores.__getitem__)
        order.append(k)
        unvisited.remove(k)
        scores = [b - cfg.lam * e for b, e in zip(base, g.edges[k].tolist())]
    return order


def greedy_select(g, cfg):
    """:func:`greedy_order` plus the path length and coverage flag of the pick.

    Feasibility is reported, not enforced.
    """
    order = greedy_order(g, cfg)
    length = shortest_hamiltonian_path(g, order)
    return Selection(order, float(g.rewards[order].sum()), length, length >= cfg.s_th)


def brute_force_select(g, cfg, budget=DEFAULT_BUDGET):
    """Exhaustive search over all ``d``-subsets.

    Among subsets whose shortest path reaches ``s_th`` the one with the largest
    reward wins, ties going to the lexicographically smallest index set.  If no
    subset is feasible the best-reward subset is returned flagged infeasible.
    """
    _check_d(g, cfg)
    cost = math.comb(g.n, cfg.d) * 2**cfg.d * cfg.d**2
    if cost > budget:
        raise BudgetExceededError(
            f"brute force over C({g.n},{cfg.d}) subsets costs {cost} > budget {budget}")
    best = None
    best_any = None
    for combo in itertools.combinations(range(g.n), cfg.d):
        reward = float(g.rewards[list(combo)].sum())
        if best_any is None or reward > best_any[0]:
            best_any = (reward, combo)
        length = shortest_hamiltonian_path(g, combo)
        if length >= cfg.s_th and (best is None or reward > best[0]):
            best = (reward, combo, length)
    if best is None:
        reward, combo = best_any
        length = shortest_hamiltonian_path(g, combo)
        return Selection(list(combo), reward, length, False)
    reward, combo, length = best
    return Selection(list(combo), reward, length, True)


BENCH_COLUMNS = ["instance_seed", "n", "d", "solver", "reward", "path_length",
                 "feasible", "micros"]


def random_graph(n, seed):
    """Camera positions uniform in the unit cube, rewards uniform in ``[0, 1]``."""
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, 1.0, size=(n, 3))
    rewards = rng.uniform(0.0, 1.0, size=n)
    return PoseGraph.from_positions(positions, rewards)


def time_call(fn, *args, repeat=5, min_total=0.05):
    """Best-of-``repeat`` wall-clock time in microseconds and the last result.

    Calls that already take ``min_total`` seconds are run once.
    """
    best = math.inf
    elapsed = 0.0
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn(*args)
        dt = time.perf_counter() - start
        best = min(best, dt)
        elapsed += dt
        if elapsed >= min_total:
            break
    return out, best * 1e6


def reward_ratio(reward, optimum):
    """``reward / optimum``; 1.0 when both are equal (including zero)."""
    if reward == optimum:
        return 1.0
    return reward / optimum


def bench_solvers(sizes, cfg, seeds, budget=DEFAULT_BUDGET):
    """Time both solvers on seeded random graphs; one row per (instance, solver).

    Greedy timings cover the selection walk only.  Brute force is skipped
    wherever it would exceed ``budget``; where it ran, every row carries
    ``reward_ratio`` = row reward / brute-force reward.
    """
    rows = []
    for n in sizes:
        d = min(cfg.d, n)
        run_cfg = SelectionConfig(d, cfg.s_th, cfg.lam)
        for seed in seeds:
            g = random_graph(n, seed)
            order, t_greedy = time_call(greedy_order, g, run_cfg)
            length = shortest_hamiltonian_path(g, order)
            results = [("greedy", Selection(order, float(g.rewards[order].sum()), length,
                                            length >= run_cfg.s_th), t_greedy)]
            brute = None
            if math.comb(n, d) * 2**d * d**2 <= budget:
                brute, t_brute = time_call(brute_force_select, g, run_cfg, budget)
                results.append(("brute_force", brute, t_brute))
            for name, sel, micros in results:
                row = {
                    "instance_seed": seed, "n": n, "d": d, "solver": name,
                    "reward": sel.total_reward, "path_length": sel.path_length,
                    "feasible": sel.feasible, "micros": micros,
                }
                if brute is not None:
                    row["reward_ratio"] = reward_ratio(sel.total_reward, brute.total_reward)
                rows.append(row)
    return rows


def write_bench_csv(rows, path):
    cols = BENCH_COLUMNS + ["reward_ratio"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            out = dict(row)
            out.setdefault("reward_ratio", "")
            out["feasible"] = int(bool(out["feasible"]))
            out["micros"] = f"{out['micros']:.1f}"
            writer.writerow(out)
