"""Transport plans, distances, cycles, feasibility, and plan export."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsca.data import CompositionSpace
from tsca.diffcore import Tape, finite_diff_check
from tsca.errors import ConfigError, ContractError
from tsca.sets import DiscreteDistribution, TriSet
from tsca.transport import (
    CostMatrix,
    Temperature,
    TransportPlan,
    attach_ct_pair,
    attach_cycle_loss,
    backward_plan,
    cost_matrix,
    ct_distance,
    cycle_loss,
    cycle_matrix,
    export_plan_csv,
    export_plan_pgm,
    feasibility_scores,
    filter_compositions,
    forward_plan,
    read_plan_csv,
    similarity_matrix,
    total_ct,
)

RNG = np.random.default_rng(20)


def random_dist(d, n, rng):
    points = rng.normal(size=(d, n))
    w = rng.uniform(0.1, 1.0, size=n)
    return DiscreteDistribution(points=points, weights=w / w.sum())


def simplex(rng, n):
    w = rng.uniform(0.1, 1.0, size=n)
    return w / w.sum()


def reference_ct(p, q, psi):
    """Straight-line double-loop transport distance; the oracle."""
    xn = p.points / np.linalg.norm(p.points, axis=0)
    yn = q.points / np.linalg.norm(q.points, axis=0)
    n, m = p.size, q.size
    total = 0.0
    for i in range(n):
        denom = sum(q.weights[j] * math.exp(xn[:, i] @ yn[:, j] / math.exp(psi)) for j in range(m))
        for j in range(m):
            pij = q.weights[j] * math.exp(xn[:, i] @ yn[:, j] / math.exp(psi)) / denom
            total += p.weights[i] * pij * (1.0 - xn[:, i] @ yn[:, j])
    for j in range(m):
        denom = sum(p.weights[i] * math.exp(xn[:, i] @ yn[:, j] / math.exp(psi)) for i in range(n))
        for i in range(n):
            pji = p.weights[i] * math.exp(xn[:, i] @ yn[:, j] / math.exp(psi)) / denom
            total += q.weights[j] * pji * (1.0 - xn[:, i] @ yn[:, j])
    return total


# ---------------------------------------------------------------------------
# costs and similarities
# ---------------------------------------------------------------------------


def test_cost_identical_orthogonal_antipodal():
    e1 = np.array([[1.0], [0.0]])
    e2 = np.array([[0.0], [1.0]])
    assert cost_matrix(e1, e1).values[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert cost_matrix(e1, e2).values[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert cost_matrix(e1, -e1).values[0, 0] == pytest.approx(2.0, abs=1e-12)


def test_cost_ignores_column_scale():
    x = RNG.normal(size=(4, 3))
    y = RNG.normal(size=(4, 5))
    a = cost_matrix(x, y).values
    b = cost_matrix(3.0 * x, 0.5 * y).values
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 10_000))
def test_cost_range_property(seed):
    rng = np.random.default_rng(seed)
    c = cost_matrix(rng.normal(size=(3, 4)), rng.normal(size=(3, 2))).values
    assert (c >= 0).all() and (c <= 2).all()


def test_cost_dim_mismatch():
    with pytest.raises(ContractError):
        cost_matrix(np.ones((3, 1)), np.ones((4, 1)))


def test_cost_matrix_type_rejects_out_of_range():
    with pytest.raises(ContractError):
        CostMatrix(values=np.array([[2.5]]))


def test_similarity_hand_example():
    x = np.array([[1.0], [0.0]])
    y = np.array([[2.0], [0.0]])
    s = similarity_matrix(x, y, Temperature(psi=math.log(2.0)))
    np.testing.assert_allclose(s, [[1.0]], atol=1e-12)


def test_similarity_is_unnormalized():
    x = RNG.normal(size=(3, 2))
    y = RNG.normal(size=(3, 2))
    t = Temperature(psi=0.0)
    np.testing.assert_allclose(
        similarity_matrix(2.0 * x, y, t), 2.0 * similarity_matrix(x, y, t), atol=1e-12
    )


def test_temperature_value_and_validation():
    assert Temperature().value == pytest.approx(0.07)
    with pytest.raises(ContractError):
        Temperature(psi=math.inf)


# ---------------------------------------------------------------------------
# plans
# ---------------------------------------------------------------------------


def test_forward_plan_hand_example():
    plan = forward_plan(
        np.array([1.0]), np.array([0.5, 0.5]), np.array([[math.log(2.0), 0.0]])
    )
    np.testing.assert_allclose(plan.joint, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-12)
    np.testing.assert_allclose(plan.conditional, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-12)


def test_backward_plan_hand_example():
    plan = backward_plan(
        np.array([0.25, 0.75]), np.array([1.0]), np.zeros((2, 1))
    )
    np.testing.assert_allclose(plan.joint, [[0.25, 0.75]], atol=1e-12)


def test_equal_similarities_give_outer_product():
    theta = simplex(RNG, 4)
    alpha = simplex(RNG, 3)
    plan = forward_plan(theta, alpha, np.full((4, 3), 1.7))
    np.testing.assert_allclose(plan.joint, np.outer(theta, alpha), atol=1e-12)


def test_backward_equals_mirrored_forward():
    rng = np.random.default_rng(5)
    theta, alpha = simplex(rng, 4), simplex(rng, 3)
    s = rng.normal(size=(4, 3))
    bwd = backward_plan(theta, alpha, s)
    mirrored = forward_plan(alpha, theta, np.ascontiguousarray(s.T))
    np.testing.assert_array_equal(bwd.joint, mirrored.joint)


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 10_000))
def test_plan_marginal_property(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    theta, alpha = simplex(rng, n), simplex(rng, m)
    s = rng.normal(scale=3.0, size=(n, m))
    plan = forward_plan(theta, alpha, s)
    np.testing.assert_allclose(plan.joint.sum(axis=1), theta, atol=1e-9)
    np.testing.assert_allclose(plan.conditional.sum(axis=1), np.ones(n), atol=1e-9)
    assert (plan.joint >= 0).all()


def test_plan_row_shift_invariance():
    rng = np.random.default_rng(6)
    theta, alpha = simplex(rng, 3), simplex(rng, 4)
    s = rng.normal(size=(3, 4))
    shifted = s + rng.normal(size=(3, 1))  # per-row constant
    a = forward_plan(theta, alpha, s)
    b = forward_plan(theta, alpha, shifted)
    np.testing.assert_allclose(a.joint, b.joint, atol=1e-12)


def test_sharp_similarities_approach_one_hot():
    rng = np.random.default_rng(7)
    theta, alpha = simplex(rng, 3), simplex(rng, 4)
    s = rng.normal(size=(3, 4))
    plan = forward_plan(theta, alpha, s * 1e4)
    for i in range(3):
        j = int(np.argmax(s[i]))
        assert plan.conditional[i, j] == pytest.approx(1.0, abs=1e-9)


def test_forward_plan_validation():
    with pytest.raises(ContractError):
        forward_plan(np.array([0.5, 0.6]), np.array([1.0]), np.zeros((2, 1)))
    with pytest.raises(ContractError):
        forward_plan(np.array([1.0]), np.array([1.0]), np.zeros((2, 1)))


def test_transport_plan_type_validation():
    with pytest.raises(ContractError):
        TransportPlan(
            joint=np.array([[0.5, 0.5]]),
            source_marginal=np.array([0.9]),
            conditional=np.array([[0.5, 0.5]]),
        )
    with pytest.raises(ContractError):
        TransportPlan(
            joint=np.array([[0.5, 0.5]]),
            source_marginal=np.array([1.0]),
            conditional=np.array([[0.7, 0.5]]),
        )


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def test_ct_identical_single_points_is_zero():
    p = DiscreteDistribution(points=np.array([[1.0], [0.0]]), weights=np.array([1.0]))
    value, fwd, bwd = ct_distance(p, p, Temperature(psi=0.0))
    assert value == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(fwd.joint, [[1.0]])
    np.testing.assert_allclose(bwd.joint, [[1.0]])


def test_ct_orthogonal_single_points_is_two():
    p = DiscreteDistribution(points=np.array([[1.0], [0.0]]), weights=np.array([1.0]))
    q = DiscreteDistribution(points=np.array([[0.0], [1.0]]), weights=np.array([1.0]))
    value, _, _ = ct_distance(p, q, Temperature(psi=0.0))
    assert value == pytest.approx(2.0, abs=1e-12)


def test_ct_antipodal_single_points_is_four():
    p = DiscreteDistribution(points=np.array([[1.0], [0.0]]), weights=np.array([1.0]))
    q = DiscreteDistribution(points=-p.points, weights=np.array([1.0]))
    value, _, _ = ct_distance(p, q, Temperature(psi=0.0))
    assert value == pytest.approx(4.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_ct_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    p = random_dist(3, 5, rng)
    q = random_dist(3, 7, rng)
    psi = float(rng.normal(scale=0.5))
    value, fwd, bwd = ct_distance(p, q, Temperature(psi=psi))
    assert value == pytest.approx(reference_ct(p, q, psi), abs=1e-10)
    np.testing.assert_allclose(fwd.joint.sum(axis=1), p.weights, atol=1e-9)
    np.testing.assert_allclose(bwd.joint.sum(axis=1), q.weights, atol=1e-9)


def test_ct_is_symmetric():
    rng = np.random.default_rng(9)
    p = random_dist(4, 3, rng)
    q = random_dist(4, 5, rng)
    t = Temperature(psi=-0.3)
    assert ct_distance(p, q, t)[0] == pytest.approx(ct_distance(q, p, t)[0], abs=1e-12)


def test_ct_nonnegative_property():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        value, _, _ = ct_distance(
            random_dist(3, 4, rng), random_dist(3, 3, rng), Temperature(psi=0.0)
        )
        assert value >= 0.0


def make_triset(rng, d=4, n=5, n_states=2, n_objects=2):
    m = n_states * n_objects
    k = n_states + n_objects
    beta_s = simplex(rng, n_states)
    beta_o = simplex(rng, n_objects)
    return TriSet(
        p1=random_dist(d, n, rng),
        p2=random_dist(d, m, rng),
        p3=random_dist(d, k, rng),
        beta_s=beta_s,
        beta_o=beta_o,
        cls_c=rng.normal(size=d),
        cls_s=rng.normal(size=d),
        cls_o=rng.normal(size=d),
        gt_composition=0,
        gt_state=0,
        gt_object=0,
    )


def test_total_ct_sums_three_pairs():
    rng = np.random.default_rng(12)
    tri = make_triset(rng)
    t = Temperature(psi=math.log(0.07))
    value, plans = total_ct(tri, t)
    v12 = ct_distance(tri.p1, tri.p2, t)[0]
    v13 = ct_distance(tri.p1, tri.p3, t)[0]
    v23 = ct_distance(tri.p2, tri.p3, t)[0]
    assert value == pytest.approx(v12 + v13 + v23, abs=1e-12)
    np.testing.assert_array_equal(
        plans.patches_to_compositions.joint, ct_distance(tri.p1, tri.p2, t)[1].joint
    )
    np.testing.assert_array_equal(
        plans.primitives_to_compositions.joint, ct_distance(tri.p2, tri.p3, t)[2].joint
    )


def test_total_ct_split_temperatures():
    rng = np.random.default_rng(13)
    tri = make_triset(rng)
    temps = (Temperature(psi=0.0), Temperature(psi=0.5), Temperature(psi=-0.5))
    value, _ = total_ct(tri, temps)
    expected = (
        ct_distance(tri.p1, tri.p2, temps[0])[0]
        + ct_distance(tri.p1, tri.p3, temps[1])[0]
        + ct_distance(tri.p2, tri.p3, temps[2])[0]
    )
    assert value == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ContractError):
        total_ct(tri, (temps[0], temps[1]))


# ---------------------------------------------------------------------------
# cycle consistency
# ---------------------------------------------------------------------------


def perm_plan(perm, n):
    cond = np.eye(n)[perm]
    marginal = np.full(len(perm), 1.0 / len(perm))
    return TransportPlan(joint=marginal[:, None] * cond, source_marginal=marginal, conditional=cond)


def test_cycle_of_permutations_is_their_product():
    a = perm_plan([1, 0, 2], 3)  # 3 -> 3
    b = perm_plan([2, 1, 0], 3)
    c = perm_plan([0, 2, 1], 3)
    cycle = cycle_matrix(a, b, c)
    expected = a.conditional @ b.conditional @ c.conditional
    np.testing.assert_array_equal(cycle, expected)
    np.testing.assert_allclose(cycle.sum(axis=1), np.ones(3), atol=1e-12)


def test_cycle_identity_chain_gives_zero_loss():
    eye = perm_plan([0, 1, 2], 3)
    cycle = cycle_matrix(eye, eye, eye)
    for g in range(3):
        assert cycle_loss(cycle, g) == pytest.approx(0.0, abs=1e-12)


def test_cycle_matches_triple_product_oracle():
    rng = np.random.default_rng(15)
    tri = make_triset(rng, n=3)
    t = Temperature(psi=0.2)
    _, plans = total_ct(tri, t)
    cycle = cycle_matrix(
        plans.compositions_to_patches,
        plans.patches_to_primitives,
        plans.primitives_to_compositions,
    )
    m, n, k = 4, 3, 4
    a = plans.compositions_to_patches.conditional
    b = plans.patches_to_primitives.conditional
    c = plans.primitives_to_compositions.conditional
    expected = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            expected[i, j] = sum(
                a[i, u] * b[u, v] * c[v, j] for u in range(n) for v in range(k)
            )
    np.testing.assert_allclose(cycle, expected, atol=1e-12)
    np.testing.assert_allclose(cycle.sum(axis=1), np.ones(m), atol=1e-9)
    # chains of row-stochastic matrices stay row-stochastic
    np.testing.assert_allclose(
        np.linalg.matrix_power(cycle, 3).sum(axis=1), np.ones(m), atol=1e-9
    )


def test_cycle_loss_uniform_row():
    cycle = np.full((4, 4), 0.25)
    # |0.25 - 1| + 3 * 0.25
    assert cycle_loss(cycle, 2) == pytest.approx(1.5, abs=1e-12)


def test_cycle_loss_range_and_validation():
    rng = np.random.default_rng(16)
    tri = make_triset(rng)
    _, plans = total_ct(tri, Temperature(psi=0.0))
    cycle = cycle_matrix(
        plans.compositions_to_patches,
        plans.patches_to_primitives,
        plans.primitives_to_compositions,
    )
    loss = cycle_loss(cycle, 1)
    assert 0.0 <= loss <= 2.0
    with pytest.raises(ContractError):
        cycle_loss(cycle, 9)
    with pytest.raises(ContractError):
        cycle_loss(np.zeros((2, 3)), 0)


def test_cycle_chain_shape_mismatch():
    with pytest.raises(ContractError):
        cycle_matrix(perm_plan([0, 1], 2), perm_plan([0, 1, 2], 3), perm_plan([0, 1], 2))


# ---------------------------------------------------------------------------
# feasibility and filtering
# ---------------------------------------------------------------------------


def grid_space(n_states=2, n_objects=2, unseen=None):
    pairs = tuple((s, o) for s in range(n_states) for o in range(n_objects))
    unseen = unseen if unseen is not None else {(n_states - 1, n_objects - 1)}
    seen_mask = np.array([p not in unseen for p in pairs])
    return CompositionSpace(
        states=tuple(f"s{i}" for i in range(n_states)),
        objects=tuple(f"o{i}" for i in range(n_objects)),
        pairs=pairs,
        seen_mask=seen_mask,
        unseen_mask=~seen_mask,
        test_pairs=tuple(range(len(pairs))),
    )


def label_plans(rng, space):
    m = len(space.pairs)
    k = space.n_states + space.n_objects
    s_fwd = rng.normal(size=(m, k))
    fwd = forward_plan(np.full(m, 1.0 / m), np.full(k, 1.0 / k), s_fwd)
    bwd = backward_plan(np.full(m, 1.0 / m), np.full(k, 1.0 / k), s_fwd)
    return fwd, bwd


def test_feasibility_hand_products():
    space = grid_space()
    rng = np.random.default_rng(17)
    fwd, bwd = label_plans(rng, space)
    scores = feasibility_scores(fwd, bwd, space)
    tf, tb = fwd.conditional, bwd.conditional
    for j, (s, o) in enumerate(space.pairs):
        expected = tf[j, s] * tf[j, 2 + o] + tb[s, j] * tb[2 + o, j]
        assert scores[j] == pytest.approx(expected, abs=1e-12)


def test_feasibility_uniform_plans_tie():
    space = grid_space()
    m, k = 4, 4
    fwd = forward_plan(np.full(m, 0.25), np.full(k, 0.25), np.zeros((m, k)))
    bwd = backward_plan(np.full(m, 0.25), np.full(k, 0.25), np.zeros((m, k)))
    scores = feasibility_scores(fwd, bwd, space)
    np.testing.assert_allclose(scores, scores[0], atol=1e-12)


def test_feasibility_rewards_own_primitives():
    space = grid_space()
    # composition 0 = (s0, o0): point its row mass at columns s0 and o0
    s = np.zeros((4, 4))
    s[0, 0] = s[0, 2] = 8.0
    fwd = forward_plan(np.full(4, 0.25), np.full(4, 0.25), s)
    bwd = backward_plan(np.full(4, 0.25), np.full(4, 0.25), s)
    scores = feasibility_scores(fwd, bwd, space)
    assert scores[0] > scores[1] and scores[0] > scores[2] and scores[0] > scores[3]


def test_feasibility_shape_check():
    space = grid_space()
    fwd = forward_plan(np.full(3, 1 / 3), np.full(4, 0.25), np.zeros((3, 4)))
    bwd = backward_plan(np.full(3, 1 / 3), np.full(4, 0.25), np.zeros((3, 4)))
    with pytest.raises(ContractError):
        feasibility_scores(fwd, bwd, space)


def test_filter_low_threshold_keeps_all():
    space = grid_space()
    scores = np.array([0.4, 0.1, 0.3, 0.2])
    kept = filter_compositions(scores, space, threshold=0.0)
    np.testing.assert_array_equal(kept, [0, 1, 2, 3])


def test_filter_median_quantile():
    space = grid_space(3, 3, unseen={(1, 2), (2, 2)})
    scores = np.array([0.9, 0.8, 0.1, 0.7, 0.6, 0.2, 0.5, 0.4, 0.3])
    cut = float(np.quantile(scores, 0.5))  # 0.5
    kept = filter_compositions(scores, space, quantile=0.5, keep_seen=False)
    np.testing.assert_array_equal(kept, [0, 1, 3, 4, 6])
    # keep_seen forces the low-scoring seen pairs (0,2) and (2,1) back in
    kept_seen = filter_compositions(scores, space, quantile=0.5, keep_seen=True)
    np.testing.assert_array_equal(kept_seen, [0, 1, 2, 3, 4, 6, 7])
    assert cut == pytest.approx(0.5)


def test_filter_quantile_one_keeps_exactly_seen():
    space = grid_space()
    scores = np.array([0.1, 0.9, 0.9, 0.9])
    kept = filter_compositions(scores, space, quantile=1.0, keep_seen=True)
    np.testing.assert_array_equal(kept, np.flatnonzero(space.seen_mask))
    with pytest.raises(ConfigError, match="lower the threshold"):
        filter_compositions(scores, space, quantile=1.0, keep_seen=False)


def test_filter_exclude_mode_flips_rule():
    space = grid_space()
    scores = np.array([0.1, 0.2, 0.3, 0.4])
    kept = filter_compositions(scores, space, threshold=0.25, keep_seen=False, exclude_mode=True)
    np.testing.assert_array_equal(kept, [0, 1])


def test_filter_argument_validation():
    space = grid_space()
    scores = np.ones(4)
    with pytest.raises(ConfigError):
        filter_compositions(scores, space)
    with pytest.raises(ConfigError):
        filter_compositions(scores, space, threshold=0.5, quantile=0.5)
    with pytest.raises(ConfigError):
        filter_compositions(scores, space, quantile=1.5)
    with pytest.raises(ConfigError):
        filter_compositions(scores, space, threshold=math.inf)


def test_filter_sorted_against_sort_oracle():
    rng = np.random.default_rng(18)
    space = grid_space(3, 3, unseen={(2, 2), (1, 2)})
    scores = rng.uniform(size=9)
    kept = filter_compositions(scores, space, quantile=0.5, keep_seen=False)
    cut = np.quantile(scores, 0.5)
    expected = sorted(j for j in range(9) if scores[j] >= cut)
    np.testing.assert_array_equal(kept, expected)


# ---------------------------------------------------------------------------
# graph path agrees with the value path
# ---------------------------------------------------------------------------


def test_graph_ct_matches_value_path():
    rng = np.random.default_rng(19)
    p = random_dist(4, 5, rng)
    q = random_dist(4, 3, rng)
    psi = -0.4
    value, fwd, bwd = ct_distance(p, q, Temperature(psi=psi))

    t = Tape()
    x = t.leaf(p.points, name="x")
    y = t.leaf(q.points, name="y")
    wx = t.const(p.weights)
    wy = t.const(q.weights)
    psi_node = t.leaf(np.array(psi), name="psi")
    nodes = attach_ct_pair(t, x, y, wx, wy, psi_node)
    assert float(t.forward(nodes.distance)) == pytest.approx(value, abs=1e-12)
    np.testing.assert_allclose(t.value(nodes.joint_fwd), fwd.joint, atol=1e-12)
    np.testing.assert_allclose(t.value(nodes.cond_bwd), bwd.conditional, atol=1e-12)
    np.testing.assert_allclose(
        t.value(nodes.cost), np.clip(t.value(nodes.cost), 0.0, 2.0), atol=1e-12
    )


def test_graph_cycle_matches_value_path():
    rng = np.random.default_rng(21)
    tri = make_triset(rng, n=3)
    psi = 0.1
    _, plans = total_ct(tri, Temperature(psi=psi))
    expected = cycle_loss(
        cycle_matrix(
            plans.compositions_to_patches,
            plans.patches_to_primitives,
            plans.primitives_to_compositions,
        ),
        tri.gt_composition,
    )

    t = Tape()
    x = t.leaf(tri.p1.points, name="x")
    y = t.leaf(tri.p2.points, name="y")
    z = t.leaf(tri.p3.points, name="z")
    psi_node = t.leaf(np.array(psi), name="psi")
    w1, w2, w3 = t.const(tri.p1.weights), t.const(tri.p2.weights), t.const(tri.p3.weights)
    pair12 = attach_ct_pair(t, x, y, w1, w2, psi_node)
    pair13 = attach_ct_pair(t, x, z, w1, w3, psi_node)
    pair23 = attach_ct_pair(t, y, z, w2, w3, psi_node)
    onehot = np.zeros(tri.p2.size)
    onehot[tri.gt_composition] = 1.0
    loss = attach_cycle_loss(
        t, pair12.cond_bwd, pair13.cond_fwd, pair23.cond_bwd, t.const(onehot)
    )
    assert float(t.forward(loss)) == pytest.approx(expected, abs=1e-12)


def test_transport_graph_gradients():
    rng = np.random.default_rng(22)
    d, n, m, k = 3, 4, 4, 4
    x0 = rng.normal(size=(d, n))
    y0 = rng.normal(size=(d, m))
    z0 = rng.normal(size=(d, k))
    w1, w2, w3 = simplex(rng, n), simplex(rng, m), simplex(rng, k)
    onehot = np.zeros(m)
    onehot[1] = 1.0

    def program(tape, leaves):
        x, y, z, psi = leaves
        c1, c2, c3 = tape.const(w1), tape.const(w2), tape.const(w3)
        p12 = attach_ct_pair(tape, x, y, c1, c2, psi)
        p13 = attach_ct_pair(tape, x, z, c1, c3, psi)
        p23 = attach_ct_pair(tape, y, z, c2, c3, psi)
        cyc = attach_cycle_loss(
            tape, p12.cond_bwd, p13.cond_fwd, p23.cond_bwd, tape.const(onehot)
        )
        total = tape.add(tape.add(p12.distance, p13.distance), tape.add(p23.distance, cyc))
        return total

    err = finite_diff_check(program, [x0, y0, z0, np.array(0.2)], step=1e-6)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def test_plan_csv_round_trip(tmp_path):
    rng = np.random.default_rng(23)
    matrix = rng.uniform(size=(3, 5))
    path = tmp_path / "plan.csv"
    export_plan_csv(path, matrix)
    header = path.read_text().splitlines()[0]
    assert header == "3,5"
    np.testing.assert_array_equal(read_plan_csv(path), matrix)


def test_plan_csv_header_mismatch(tmp_path):
    path = tmp_path / "plan.csv"
    path.write_text("2,2\n1.0,2.0\n")
    with pytest.raises(ContractError):
        read_plan_csv(path)


def test_plan_pgm_bytes(tmp_path):
    matrix = np.array([[0.0, 0.5], [1.0, 0.25]])
    path = tmp_path / "plan.pgm"
    export_plan_pgm(path, matrix)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n2 2\n255\n")
    pixels = np.frombuffer(blob[len(b"P5\n2 2\n255\n"):], dtype=np.uint8).reshape(2, 2)
    np.testing.assert_array_equal(pixels, [[0, 128], [255, 64]])


def test_plan_pgm_constant_matrix(tmp_path):
    path = tmp_path / "flat.pgm"
    export_plan_pgm(path, np.full((2, 3), 0.7))
    blob = path.read_bytes()
    pixels = np.frombuffer(blob.split(b"255\n", 1)[1], dtype=np.uint8)
    assert (pixels == 0).all()
