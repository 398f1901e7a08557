import numpy as np
import pytest
from hypothesis import given, strategies as st

from gnnmpc.graph import (
    GraphTopology,
    NodeState,
    SystemState,
    Trajectory,
    chain_topology,
    flatten_state,
    read_trajectory_csv,
    unflatten_state,
    write_trajectory_csv,
)


def test_flatten_zero_single_node():
    s = SystemState.from_nodes([NodeState(np.zeros(3), np.zeros(3))])
    assert np.array_equal(flatten_state(s), np.zeros(6))


def test_flatten_concatenation_order():
    s = SystemState.from_nodes([NodeState([1.0], [2.0]), NodeState([3.0], [4.0])])
    assert np.array_equal(flatten_state(s), [1.0, 2.0, 3.0, 4.0])


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_flatten_roundtrip(m, n_p, seed):
    rng = np.random.default_rng(seed)
    s = SystemState(rng.standard_normal((m, 2 * n_p)))
    back = unflatten_state(flatten_state(s), m)
    assert np.array_equal(back.array, s.array)


def test_chain_single_node():
    topo = chain_topology(1)
    assert topo.in_neighbors == ((),)


def test_chain_three_nodes():
    topo = chain_topology(3)
    assert topo.in_neighbors == ((1,), (0, 2), (1,))


def test_chain_four_nodes_bound():
    topo = chain_topology(4)
    assert all(len(ns) <= 2 for ns in topo.in_neighbors)


@given(st.integers(1, 40))
def test_chain_invariants(m):
    topo = chain_topology(m)
    assert topo.node_count == m
    assert topo.neighbor_bound == 2
    for i, ns in enumerate(topo.in_neighbors):
        assert len(ns) <= topo.neighbor_bound
        assert len(set(ns)) == len(ns)
        assert i not in ns
        assert all(0 <= j < m for j in ns)


def test_chain_rejects_zero():
    with pytest.raises(ValueError):
        chain_topology(0)


def test_topology_validation():
    with pytest.raises(ValueError):
        GraphTopology(2, ((1, 1), ()), 2)  # duplicate
    with pytest.raises(ValueError):
        GraphTopology(2, ((0,), ()), 2)  # self reference
    with pytest.raises(ValueError):
        GraphTopology(2, ((5,), ()), 2)  # out of range
    with pytest.raises(ValueError):
        GraphTopology(2, ((1,), (0,)), 0)  # bad bound


def test_closed_neighbors_and_edges():
    topo = chain_topology(3)
    assert topo.closed_neighbors(1) == (1, 0, 2)
    assert topo.edges == [(0, 1), (1, 0), (1, 2), (2, 1)]


def test_state_immutability():
    s = SystemState(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        s.array[0, 0] = 1.0


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        SystemState(np.array([[np.nan, 0.0, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        NodeState([np.inf], [0.0])


def test_trajectory_length_check():
    with pytest.raises(ValueError):
        Trajectory(states=np.zeros((3, 1, 2)), inputs=np.zeros((3, 1)), dt=0.1)


def test_trajectory_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    traj = Trajectory(states=rng.standard_normal((6, 2, 4)), inputs=rng.standard_normal((5, 3)), dt=0.01)
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, traj)
    back = read_trajectory_csv(path, node_count=2)
    assert np.array_equal(back.states, traj.states)
    assert np.array_equal(back.inputs, traj.inputs)
    assert back.dt == pytest.approx(traj.dt)


def test_trajectory_csv_header(tmp_path):
    traj = Trajectory(states=np.zeros((2, 1, 2)), inputs=np.zeros((1, 2)), dt=0.5)
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, traj)
    header = path.read_text().splitlines()[0]
    assert header == "t,u_1,u_2,x_1,x_2"
