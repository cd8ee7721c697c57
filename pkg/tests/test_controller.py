import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from formation_forge.controller import (
    ControllerError,
    DisplacementController,
    ShapeTemplate,
    af_targets,
    compute_control,
    displacements_from_targets,
    fs_targets,
    lyapunov_value,
    safety_filter,
    saturate,
    solve_inputs,
)
from formation_forge.core import (
    EntityKind,
    EntityState,
    FormationGraph,
    build_incidence,
    default_graph,
    displacement_errors,
)

A, P = EntityKind.AGENT, EntityKind.PAYLOAD


def team(points, payload=(1.5, 1.0)):
    return [EntityState(i, A, p) for i, p in enumerate(points)] + [EntityState(len(points), P, payload)]


def test_single_agent_example():
    ents = [EntityState(0, A, (1.3, 0.0)), EntityState(1, P, (1.0, 0.0))]
    cmd = compute_control(FormationGraph(((0, 1, False),)), ents, v_max=10.0)
    np.testing.assert_allclose(cmd.velocities, [[-0.3, 0.0]], atol=1e-15)
    assert not cmd.saturated.any()
    sat = compute_control(FormationGraph(((0, 1, False),)), ents)
    np.testing.assert_allclose(sat.velocities, [[-0.2, 0.0]], atol=1e-15)
    assert sat.saturated.all()


def test_exact_formation_zero_input():
    ents = team([(1, 1), (2, 1), (2, 2), (1, 2)])
    graph = default_graph(range(4), 4)
    graph = graph.with_displacements(displacement_errors(graph, ents))
    np.testing.assert_allclose(compute_control(graph, ents).velocities, 0, atol=1e-15)
    assert lyapunov_value(graph, ents) == 0.0


def test_uncontrollable_velocity_feedforward():
    ents = [EntityState(0, A, (1.0, 0.0)), EntityState(1, P, (1.0, 0.0))]
    cmd = compute_control(FormationGraph(((0, 1, False),)), ents, {1: (0.1, -0.05)})
    np.testing.assert_allclose(cmd.velocities, [[0.1, -0.05]], atol=1e-15)


def test_normal_equations_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ents = team(rng.uniform(0, 3, (4, 2)))
        graph = default_graph(range(4), 4).with_displacements(rng.normal(size=(10, 2)))
        inc = build_incidence(graph, ents)
        e = displacement_errors(graph, ents)
        s_dot = rng.normal(size=(1, 2)) * 0.1
        u = solve_inputs(inc.B1, inc.B2, e, s_dot)
        rhs = -e - inc.B2 @ s_dot
        u_ne = np.linalg.solve(inc.B1.T @ inc.B1, inc.B1.T @ rhs)
        np.testing.assert_allclose(u, u_ne, atol=1e-10)
        r1 = np.linalg.norm(inc.B1 @ u - rhs)
        r2 = np.linalg.norm(inc.B1 @ u_ne - rhs)
        assert abs(r1 - r2) < 1e-8


def test_rank_deficient_names_agents():
    ents = team([(0, 0), (1, 0), (2, 0)])
    graph = FormationGraph(((0, 1, True), (1, 0, True), (2, 3, False)))
    with pytest.raises(ControllerError, match=r"\[0, 1\]"):
        compute_control(graph, ents)


def test_lyapunov_examples():
    ents = [EntityState(0, A, (1.0, 0.0)), EntityState(1, P, (0.0, 0.0))]
    assert lyapunov_value(FormationGraph(((0, 1, False),), [(0, 0)]), ents) == 0.5
    rng = np.random.default_rng(1)
    ents = team(rng.uniform(0, 3, (4, 2)))
    graph = default_graph(range(4), 4).with_displacements(rng.normal(size=(10, 2)))
    pos = {e.id: np.array(e.position) for e in ents}
    brute = 0.0
    for (t, h, _), d in zip(graph.edges, graph.desired_displacements):
        err = pos[t] - pos[h] - d
        brute += 0.5 * (err[0] ** 2 + err[1] ** 2)
    assert lyapunov_value(graph, ents) == pytest.approx(brute, rel=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    pts, payload = rng.uniform(0, 3, (4, 2)), rng.uniform(0, 2, 2)
    graph = default_graph(range(4), 4).with_displacements(rng.normal(size=(10, 2)) * 0.1)
    shift = rng.uniform(-1, 1, 2)
    u1 = compute_control(graph, team(pts, payload)).velocities
    u2 = compute_control(graph, team(pts + shift, payload + shift)).velocities
    np.testing.assert_allclose(u1, u2, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_saturation_preserves_direction(seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(5, 2)) * rng.uniform(0.01, 2)
    out, flags = saturate(u, 0.2)
    norms = np.linalg.norm(u, axis=1)
    np.testing.assert_allclose(out, u * np.minimum(1, 0.2 / norms)[:, None], rtol=1e-14)
    assert np.all(np.linalg.norm(out, axis=1) <= 0.2 + 1e-15)
    np.testing.assert_array_equal(flags, norms > 0.2)


def test_box_template():
    box = ShapeTemplate.box()
    got = {tuple(np.round(t, 12)) for t in fs_targets((0, 0), box)}
    assert got == {(0.3, 0.3), (-0.3, 0.3), (-0.3, -0.3), (0.3, -0.3)}
    np.testing.assert_allclose(fs_targets((1, 2), box), fs_targets((0, 0), box) + [1, 2])
    with pytest.raises(ValueError):
        ShapeTemplate(np.array([[0.3, 0.3], [0.3, 0.3]]))


def test_af_targets():
    box = ShapeTemplate.box()
    np.testing.assert_array_equal(af_targets((0.5, 0.5), 0.0, box), fs_targets((0.5, 0.5), box))
    np.testing.assert_allclose(af_targets((0, 0), math.pi / 2, box)[0], [-0.3, 0.3], atol=1e-15)
    rng = np.random.default_rng(2)
    for _ in range(20):
        t = af_targets(rng.uniform(0, 3, 2), rng.uniform(-math.pi, math.pi), box)
        for a, b in itertools.combinations(range(4), 2):
            assert np.linalg.norm(t[a] - t[b]) == pytest.approx(np.linalg.norm(box.offsets[a] - box.offsets[b]))


def test_displacements_from_targets():
    graph = default_graph(range(2), 2)
    d = displacements_from_targets(graph, {0: (1, 1), 1: (2, 1)}, {2: (1.5, 0)})
    np.testing.assert_allclose(d, [[-1, 0], [-0.5, 1], [0.5, 1]])


def test_filter_examples():
    u, flags = safety_filter([[1.0, 0.0]], [[0.0, 0.0]], [[0.15, 0.0]], 0.25)
    np.testing.assert_allclose(u, [[0.0, 0.0]], atol=1e-15)
    assert flags[0]
    u, flags = safety_filter([[0.1, 0.05]], [[0.0, 0.0]], [[2.0, 2.0]], 0.25)
    np.testing.assert_array_equal(u, [[0.1, 0.05]])
    assert not flags[0]
    u, _ = safety_filter([[1.0, 1.0]], [[0.0, 0.0]], [[0.15, 0.0]], 0.25)
    np.testing.assert_allclose(u, [[0.0, 1.0]], atol=1e-15)
    with pytest.raises(ValueError):
        safety_filter([[0, 0]], [[0, 0]], [[1, 1]], 0.0)


def test_filter_property_sweep():
    rng = np.random.default_rng(3)
    margin = 0.25
    for _ in range(1000):
        agents = rng.uniform(0, 1, (4, 2))
        hazards = rng.uniform(0, 1, (rng.integers(1, 5), 2))
        u = rng.normal(size=(4, 2)) * 0.2
        out, _ = safety_filter(u, agents, hazards, margin)
        for i, x in enumerate(agents):
            others = np.vstack([hazards, np.delete(agents, i, axis=0)])
            for s in others:
                d = s - x
                dist = np.linalg.norm(d)
                if 1e-12 < dist < margin:
                    assert out[i] @ d / dist <= 1e-12
            if not any(1e-12 < np.linalg.norm(s - x) < margin for s in others):
                np.testing.assert_array_equal(out[i], u[i])


def test_fast_path_matches_compute_control():
    rng = np.random.default_rng(4)
    ents = team(rng.uniform(0, 3, (4, 2)))
    graph = default_graph(range(4), 4).with_displacements(rng.normal(size=(10, 2)) * 0.05)
    ctrl = DisplacementController(graph, ents)
    nodes = np.array([e.position for e in ents])
    u, sat, _ = ctrl.command(nodes, graph.desired_displacements, np.zeros((1, 2)))
    ref = compute_control(graph, ents)
    np.testing.assert_allclose(u, ref.velocities, atol=1e-12)
    np.testing.assert_array_equal(sat, ref.saturated)


def test_lyapunov_decreases_static_world():
    rng = np.random.default_rng(5)
    payload = np.array([1.6, 1.0])
    ents = team(payload + rng.uniform(-0.8, 0.8, (4, 2)), payload)
    graph = default_graph(range(4), 4)
    box = fs_targets(payload, ShapeTemplate.box())
    desired = displacements_from_targets(graph, dict(enumerate(box)), {4: payload})
    ctrl = DisplacementController(graph, ents, v_max=1e9)
    nodes = np.array([e.position for e in ents])
    dt, prev = 1 / 30, math.inf
    for _ in range(600):
        u, _, e = ctrl.command(nodes, desired, np.zeros((1, 2)))
        V = 0.5 * float(np.sum(e * e))
        assert V <= prev + 1e-9
        prev = V
        nodes[:4] += u * dt
    assert prev < 1e-4
