import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from incremental_nerf.errors import BudgetExceededError
from incremental_nerf.geometry import CameraPose
from incremental_nerf.pose_graph import (BENCH_COLUMNS, PoseGraph, SelectionConfig,
                                         bench_solvers, brute_force_select, build_graph,
                                         greedy_order, greedy_select, random_graph,
                                         shortest_hamiltonian_path, time_call,
                                         write_bench_csv)
from oracles import naive_select, path_by_permutations


def cams(*centres):
    return [CameraPose(np.eye(3), c) for c in centres]


def test_build_graph_examples():
    g = build_graph(cams([0, 0, 0], [3, 4, 0]), [0.0, 0.0])
    assert g.edges[0, 1] == 5.0
    one = build_graph(cams([1, 2, 3]), [0.0])
    assert one.edges.shape == (1, 1) and one.edges[0, 0] == 0.0
    line = build_graph(cams([0, 0, 0], [1, 0, 0], [2, 0, 0]), [0.0] * 3)
    assert line.edges[0, 2] == 2.0


def test_build_graph_errors():
    with pytest.raises(ValueError):
        build_graph([], [])
    with pytest.raises(ValueError):
        build_graph(cams([0, 0, 0]), [1.0, 2.0])


@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_graph_edges_are_distances(n, seed):
    g = random_graph(n, seed)
    assert np.array_equal(g.edges, g.edges.T)
    assert np.all(np.diag(g.edges) == 0)
    i, j = np.triu_indices(n, 1)
    np.testing.assert_allclose(g.edges[i, j], np.linalg.norm(g.positions[i] - g.positions[j],
                                                              axis=1), atol=1e-12)


def test_hamiltonian_path_examples():
    g = PoseGraph.from_positions([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [0, 0, 0])
    assert shortest_hamiltonian_path(g, [1]) == 0.0
    assert shortest_hamiltonian_path(g, [0, 2, 1]) == 2.0
    with pytest.raises(ValueError):
        shortest_hamiltonian_path(g, [])


def test_hamiltonian_path_matches_permutations():
    for seed in range(10):
        g = random_graph(5, seed)
        assert shortest_hamiltonian_path(g, range(5)) == pytest.approx(
            path_by_permutations(g.positions, range(5)), abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.permutations(list(range(6))))
@settings(max_examples=30)
def test_hamiltonian_path_permutation_invariant(seed, perm):
    g = random_graph(6, seed)
    assert shortest_hamiltonian_path(g, perm) == pytest.approx(
        shortest_hamiltonian_path(g, range(6)), abs=1e-12)


def test_greedy_examples():
    g = PoseGraph.from_positions(np.eye(3), [5.0, 1.0, 1.0])
    assert greedy_select(g, SelectionConfig(1, 0.0, 0.0)).nodes == [0]
    for lam in (0.0, 1.0, 10.0):
        assert sorted(greedy_select(g, SelectionConfig(3, 0.0, lam)).nodes) == [0, 1, 2]
    with pytest.raises(ValueError):
        greedy_select(g, SelectionConfig(4))


def test_greedy_follows_edge_rule():
    # from node 0, node 2 is close and node 1 far; equal rewards so distance decides
    g = PoseGraph.from_positions([[0, 0, 0], [5, 0, 0], [1, 0, 0]], [2.0, 1.0, 1.0])
    assert greedy_order(g, SelectionConfig(2, 0.0, 1.0)) == [0, 2]
    # with a large threshold the same rule still prefers short hops; feasibility is reported
    sel = greedy_select(g, SelectionConfig(2, 3.0, 1.0))
    assert sel.nodes == [0, 2] and not sel.feasible


def test_greedy_ties_take_lowest_index():
    g = PoseGraph.from_positions(np.zeros((4, 3)), [1.0, 1.0, 1.0, 1.0])
    assert greedy_order(g, SelectionConfig(3)) == [0, 1, 2]


def test_brute_force_examples():
    g = random_graph(7, 4)
    sel = brute_force_select(g, SelectionConfig(1))
    assert sel.nodes == [int(np.argmax(g.rewards))]
    square = PoseGraph.from_positions([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], [1.0] * 4)
    sel = brute_force_select(square, SelectionConfig(2, 1.2))
    assert sel.nodes in ([0, 3], [1, 2]) and sel.feasible
    assert sel.path_length == pytest.approx(math.sqrt(2))


def test_brute_force_infeasible_flag():
    g = random_graph(5, 0)
    sel = brute_force_select(g, SelectionConfig(2, 100.0))
    assert not sel.feasible
    assert sel.total_reward == pytest.approx(np.sort(g.rewards)[-2:].sum())


def test_brute_force_budget():
    with pytest.raises(BudgetExceededError):
        brute_force_select(random_graph(20, 0), SelectionConfig(8))


def test_brute_force_matches_naive_enumerator_n8():
    for seed in range(5):
        g = random_graph(8, seed)
        cfg = SelectionConfig(3, 0.5 * g.edges[np.triu_indices(8, 1)].mean())
        sel = brute_force_select(g, cfg)
        nodes, reward, feasible = naive_select(g.positions, g.rewards, 3, cfg.s_th)
        assert (sel.nodes, sel.feasible) == (nodes, feasible)
        assert sel.total_reward == pytest.approx(reward, abs=1e-12)


@given(st.integers(1, 9), st.integers(1, 4), st.integers(0, 2**32 - 1),
       st.floats(0, 1.5), st.floats(0, 3))
@settings(max_examples=40, deadline=None)
def test_solver_invariants(n, d, seed, s_th, lam):
    d = min(d, n)
    g = random_graph(n, seed)
    cfg = SelectionConfig(d, s_th, lam)
    greedy = greedy_select(g, cfg)
    brute = brute_force_select(g, cfg)
    for sel in (greedy, brute):
        assert len(sel.nodes) == d == len(set(sel.nodes))
        assert sel.total_reward == pytest.approx(g.rewards[sel.nodes].sum(), abs=1e-9)
        assert sel.feasible == (sel.path_length >= s_th)
    if greedy.feasible:
        assert brute.feasible and brute.total_reward >= greedy.total_reward - 1e-12


def test_single_node_solvers_agree():
    g = random_graph(1, 0)
    cfg = SelectionConfig(1)
    assert greedy_select(g, cfg).nodes == brute_force_select(g, cfg).nodes == [0]


def test_bench_rows_and_csv(tmp_path):
    rows = bench_solvers([8, 10], SelectionConfig(3), seeds=[0, 1])
    assert {(r["n"], r["solver"]) for r in rows} == {
        (n, s) for n in (8, 10) for s in ("greedy", "brute_force")}
    assert all(r["reward_ratio"] <= 1.0 for r in rows)
    path = tmp_path / "bench.csv"
    write_bench_csv(rows, path)
    with open(path) as fh:
        read = list(csv.DictReader(fh))
    assert list(read[0])[:len(BENCH_COLUMNS)] == BENCH_COLUMNS
    assert len(read) == len(rows)


def test_bench_skips_brute_force_over_budget():
    rows = bench_solvers([194], SelectionConfig(10), seeds=[0])
    assert [r["solver"] for r in rows] == ["greedy"]
    assert "reward_ratio" not in rows[0]


def test_greedy_runtime_grows_linearly():
    # 4x the nodes should cost about 4x; 8 leaves room for timer noise, 16 would be quadratic
    cfg = SelectionConfig(10)
    times = {n: time_call(greedy_order, random_graph(n, 0), cfg, repeat=20)[1]
             for n in (50, 100, 200)}
    assert times[100] / times[50] < 4
    assert times[200] / times[50] < 8
