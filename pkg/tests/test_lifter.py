import numpy as np
import pytest

from conftest import fd_check, perturbed_flow, perturbed_lifters, toy_flows
from poselift import data as data_mod
from poselift.errors import ConfigError  # noqa: F401  (used across tests)
from poselift.geometry import bone_lengths, lift_batch, rotation_matrices, rotate_batch
from poselift.lifter import (
    BONE_WEIGHT,
    CANDIDATE_NAMES,
    LifterNet,
    LossBreakdown,
    assemble,
    bone_loss,
    build_candidates,
    consistency_cycle,
    cycle_backward,
    cycle_forward,
    deformation_loss,
    flatten_nonroot,
    init_lifters,
    lift_candidates,
    segment_flat_columns,
    segment_input,
    train_lifters,
    unflatten_nonroot,
)
from poselift.topology import SEGMENT_NAMES


def _random_pose_batch(rng, n, topology):
    y = 0.08 * rng.standard_normal((n, topology.n_joints, 2))
    y[:, topology.root_index] = 0.0
    return y


def _bone_means(topology):
    rng = np.random.default_rng(99)
    pose = rng.standard_normal((topology.n_joints, 3))
    rel = bone_lengths(pose, topology)
    return rel / rel.sum()


# ---------------------------------------------------------------------------
# lifter network


def test_zero_initialized_lifter_lifts_to_camera_plane(topo):
    model = LifterNet.init(np.random.default_rng(0), "legs", 6, width=8)
    for p in model.params():
        p[...] = 0.0
    x = np.random.default_rng(1).standard_normal((4, 12))
    (d, e), _ = model.forward(x)
    assert np.all(d == 0.0)
    assert np.all(e == 0.0)
    pts, _ = lift_batch(np.zeros((4, 17, 2)), np.zeros((4, 17)), 10.0)
    assert np.all(pts[..., 2] == 10.0)


def test_lifter_deterministic(topo):
    model = LifterNet.init(np.random.default_rng(2), "torso", 10, width=16)
    x = np.random.default_rng(3).standard_normal((5, 20))
    (d1, e1), _ = model.forward(x)
    (d2, e2), _ = model.forward(x)
    assert np.array_equal(d1, d2)
    assert np.array_equal(e1, e2)


def test_lifter_input_dimension_checked():
    model = LifterNet.init(np.random.default_rng(4), "legs", 6, width=8)
    with pytest.raises(ConfigError):
        model.forward(np.zeros((2, 10)))


def test_lifter_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    model = LifterNet.init(rng, "legs", 3, width=6)
    x = rng.standard_normal((4, 6))
    gd = rng.standard_normal((4, 3))
    ge = rng.standard_normal(4)

    def loss_fn():
        (d, e), _ = model.forward(x)
        return float((d * gd).sum() + (e * ge).sum())

    (_, _), tape = model.forward(x)
    _, grads = model.backward(tape, gd, ge)
    fd_check(loss_fn, model.params(), grads, max_entries=10, rng=rng)


# ---------------------------------------------------------------------------
# assembly


def test_assemble_zero_offsets_gives_flat_candidates(topo):
    n = 3
    depths = {s: np.zeros((n, len(topo.segments[s]))) for s in SEGMENT_NAMES}
    elevs = {s: np.zeros(n) for s in SEGMENT_NAMES}
    out = assemble(depths, elevs, topo)
    assert set(out) == set(CANDIDATE_NAMES)
    y2d = _random_pose_batch(np.random.default_rng(6), n, topo)
    poses = {}
    for name, (D, alpha) in out.items():
        assert np.all(D == 0.0)
        assert np.all(alpha == 0.0)
        pts, _ = lift_batch(y2d, D, 10.0)
        poses[name] = pts
    for name in CANDIDATE_NAMES[1:]:
        assert np.array_equal(poses[name], poses[CANDIDATE_NAMES[0]])
        assert np.all(poses[name][..., 2] == 10.0)


def test_assemble_candidates_2_and_3_differ_only_on_spine_chain(topo):
    rng = np.random.default_rng(7)
    n = 4
    depths = {s: rng.standard_normal((n, len(topo.segments[s]))) for s in SEGMENT_NAMES}
    elevs = {s: rng.standard_normal(n) for s in SEGMENT_NAMES}
    out = assemble(depths, elevs, topo)
    D2, a2 = out["left-right-r"]
    D3, a3 = out["left-right-l"]
    chain = list(topo.spine_chain)
    other = [j for j in range(17) if j not in chain]
    assert np.array_equal(D2[:, other], D3[:, other])
    assert not np.array_equal(D2[:, chain], D3[:, chain])
    assert np.array_equal(a2, a3)
    # agreement case: identical side predictions on the chain collapse 2 and 3
    seg_l, seg_r = list(topo.segments["left"]), list(topo.segments["right"])
    for j in chain:
        depths["left"][:, seg_l.index(j)] = depths["right"][:, seg_r.index(j)]
    out = assemble(depths, elevs, topo)
    assert np.array_equal(out["left-right-r"][0], out["left-right-l"][0])


def test_assemble_missing_segment_rejected(topo):
    depths = {"legs": np.zeros((2, 6))}
    with pytest.raises(ConfigError):
        assemble(depths, {"legs": np.zeros(2)}, topo)


def test_candidate_routing_partitions_non_root(topo):
    for cand in build_candidates(topo):
        routed = [j for _, joints in cand.routing for j in joints]
        assert sorted(routed) == list(range(1, 17))


def test_elevation_averaging_rule(topo):
    n = 2
    depths = {s: np.zeros((n, len(topo.segments[s]))) for s in SEGMENT_NAMES}
    elevs = {"legs": np.full(n, 0.2), "torso": np.full(n, 0.4),
             "left": np.full(n, -0.6), "right": np.full(n, 0.8)}
    out = assemble(depths, elevs, topo)
    assert np.allclose(out["legs-torso"][1], 0.3)
    assert np.allclose(out["left-right-r"][1], 0.1)
    assert np.allclose(out["left-right-l"][1], 0.1)


# ---------------------------------------------------------------------------
# loss terms


def test_bone_loss_zero_at_exact_means(topo):
    rng = np.random.default_rng(8)
    pose = rng.standard_normal((17, 3))
    means = bone_lengths(pose, topo)
    assert bone_loss(pose, means, topo) == 0.0


def test_bone_loss_single_deviation(topo):
    rng = np.random.default_rng(9)
    pose = rng.standard_normal((17, 3))
    means = bone_lengths(pose, topo).copy()
    delta = 0.017
    means[4] += delta
    assert bone_loss(pose, means, topo) == pytest.approx(delta ** 2 / 16)


def test_bone_loss_matches_direct_formula(topo):
    rng = np.random.default_rng(10)
    pose = rng.standard_normal((17, 3))
    means = np.abs(rng.standard_normal(16))
    means /= means.sum()
    direct = float(np.mean((bone_lengths(pose, topo) - means) ** 2))
    assert bone_loss(pose, means, topo) == pytest.approx(direct, rel=1e-12)


def test_deformation_loss_duplicates_and_agreement():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((4, 17, 3))
    dup = np.repeat(a[:2], 2, axis=0)  # pairs (x, x)
    assert deformation_loss(dup, rng.standard_normal(dup.shape) * 0 + dup) == 0.0
    assert deformation_loss(dup, dup.copy()) == 0.0
    assert deformation_loss(a, a.copy()) == 0.0  # virtual equals real
    assert deformation_loss(a[:1], a[:1]) == 0.0  # batch of one


def test_deformation_loss_matches_direct_formula():
    rng = np.random.default_rng(12)
    a = rng.standard_normal((6, 5, 3))
    b = rng.standard_normal((6, 5, 3))
    direct = np.mean([np.sum(((a[2 * i] - a[2 * i + 1]) - (b[2 * i] - b[2 * i + 1])) ** 2)
                      for i in range(3)])
    assert deformation_loss(a, b) == pytest.approx(direct, rel=1e-12)


def test_loss_breakdown_total_is_exact_sum():
    bd = LossBreakdown(l_nf=-1.25, l_2d=0.5, l_3d=0.25, l_def=2.0, l_b=0.003)
    assert bd.total == -1.25 + 0.5 + 0.25 + 2.0 + BONE_WEIGHT * 0.003


# ---------------------------------------------------------------------------
# consistency cycle


def test_identity_rotation_gives_zero_consistency_losses(topo):
    """Azimuth 0 with zero elevation output: the virtual view equals the
    original, so both consistency losses vanish for any deterministic lifter."""
    rng = np.random.default_rng(13)
    lifters = perturbed_lifters(rng, topo, width=8)
    for model in lifters.values():
        model.elev_head.W[...] = 0.0
        model.elev_head.b[...] = 0.0
    flows = toy_flows(rng, topo, n_blocks=2, width=8)
    y2d = _random_pose_batch(rng, 6, topo)
    bd = consistency_cycle(y2d, lifters, flows, _bone_means(topo), topo,
                           azimuths=np.zeros(6))
    assert bd.l_2d < 1e-12
    assert bd.l_3d < 1e-12
    assert bd.l_def < 1e-12


def test_oracle_lifter_zeroes_consistency_losses(topo):
    records = data_mod.generate_synthetic(8, seed=77)
    y2d = data_mod.stack_2d(records)
    d_true = np.stack([data_mod.true_depth_offsets(r) for r in records])
    pts, _ = lift_batch(y2d, d_true, 10.0)
    az = np.random.default_rng(14).uniform(-np.pi, np.pi, 8)
    virt = rotate_batch(pts, rotation_matrices(az, np.zeros(8)), root=0)
    v_depths = virt[:, :, 2] - 10.0

    class ScriptedLifter:
        """Replays precomputed depths: first call sees the original view,
        later calls the (identical for all candidates) virtual view."""

        def __init__(self, joints):
            self.outs = [d_true[:, joints], v_depths[:, joints]]
            self.calls = 0

        def forward(self, x):
            d = self.outs[min(self.calls, 1)]
            self.calls += 1
            return (d, np.zeros(x.shape[0])), None

    lifters = {name: ScriptedLifter(list(topo.segments[name])) for name in SEGMENT_NAMES}
    flows = toy_flows(np.random.default_rng(15), topo, n_blocks=2, width=8)
    means = data_mod.compute_bone_stats(records, topo).values
    bd = consistency_cycle(y2d, lifters, flows, means, topo, azimuths=az)
    assert bd.l_2d < 1e-9
    assert bd.l_3d < 1e-9
    assert bd.l_def < 1e-9
    assert bd.l_b < 1e-9  # synthetic skeletons share their relative bone lengths


def test_cycle_l2d_matches_independent_recomputation(topo):
    """Step-by-step re-evaluation of the candidate losses with plain numpy."""
    rng = np.random.default_rng(16)
    lifters = perturbed_lifters(rng, topo, width=8)
    flows = toy_flows(rng, topo, n_blocks=2, width=8)
    y2d = _random_pose_batch(rng, 5, topo)
    az = rng.uniform(-np.pi, np.pi, 5)
    means = _bone_means(topo)
    bd = consistency_cycle(y2d, lifters, flows, means, topo, azimuths=az)

    def explicit_rot(azv, elv):
        ca, sa, ce, se = np.cos(azv), np.sin(azv), np.cos(elv), np.sin(elv)
        A = np.array([[ca, 0, sa], [0, 1, 0], [-sa, 0, ca]])
        E = np.array([[1, 0, 0], [0, ce, -se], [0, se, ce]])
        return E @ A

    def explicit_lift(xy, d):
        z = np.maximum(1.0, d + 10.0)
        return np.stack([xy[:, 0] * z, xy[:, 1] * z, z], axis=1)

    l2d_candidates = []
    for cand in build_candidates(topo):
        per_sample = []
        for i in range(5):
            seg_out = {}
            for name in SEGMENT_NAMES:
                x = y2d[i:i + 1, list(topo.segments[name])].reshape(1, -1)
                (d, e), _ = lifters[name].forward(x)
                seg_out[name] = (d[0], e[0])
            D = np.zeros(17)
            for lname, joints in cand.routing:
                seg = list(topo.segments[lname])
                for j in joints:
                    D[j] = seg_out[lname][0][seg.index(j)]
            alpha = np.mean([seg_out[l][1] for l in cand.elevation_from])
            hat = explicit_lift(y2d[i], D)
            R = explicit_rot(az[i], alpha)
            root = hat[0]
            V = (hat - root) @ R.T + root
            virt2d = V[:, :2] / V[:, 2:]
            seg2 = {}
            for lname, joints in cand.routing:
                x2 = virt2d[None, list(topo.segments[lname])].reshape(1, -1)
                (d2, _), _ = lifters[lname].forward(x2)
                seg2[lname] = d2[0]
            D2 = np.zeros(17)
            for lname, joints in cand.routing:
                seg = list(topo.segments[lname])
                for j in joints:
                    D2[j] = seg2[lname][seg.index(j)]
            tilde = explicit_lift(virt2d, D2)
            W = (tilde - tilde[0]) @ R + tilde[0]
            back = W[:, :2] / W[:, 2:]
            per_sample.append(np.abs(y2d[i, 1:] - back[1:]).mean())
        l2d_candidates.append(np.mean(per_sample))
    assert bd.l_2d == pytest.approx(float(np.mean(l2d_candidates)), abs=1e-12)


def test_l2d_errors_outside_segment_do_not_reach_depth_path(topo):
    """Exclusion rule: a torso keypoint's 2D error is invisible to the legs
    lifter's depth path (finite perturbation leaves it bit-identical)."""
    rng = np.random.default_rng(17)
    lifters = perturbed_lifters(rng, topo, width=8)
    flows = toy_flows(rng, topo, n_blocks=2, width=8)
    y2d = _random_pose_batch(rng, 4, topo)
    az = rng.uniform(-np.pi, np.pi, 4)
    means = _bone_means(topo)
    torso_joints = list(topo.segments["torso"])

    def joint_l2d(joints):
        bd, state = cycle_forward(y2d, lifters, flows, means, topo, azimuths=az)
        assert bd.skipped == 0
        entry = state.per_candidate[0]  # legs+torso candidate
        nonroot = [j for j in range(17) if j != 0]
        pos = [nonroot.index(j) for j in joints]
        return entry["diff2d"][:, pos].copy()

    before = joint_l2d(torso_joints)
    legs_before = joint_l2d(topo.segments["legs"])
    legs = lifters["legs"]
    lo, hi = legs.depth_path_param_range()
    params = legs.params()
    for idx in range(lo, hi):
        params[idx] += 1e-3  # small perturbation of the depth path only
    assert np.array_equal(before, joint_l2d(torso_joints))
    # sanity: the same perturbation does change the legs keypoints' errors
    assert not np.array_equal(legs_before, joint_l2d(topo.segments["legs"]))


def test_candidate_weights_select_terms(topo):
    rng = np.random.default_rng(25)
    lifters = perturbed_lifters(rng, topo, width=8)
    flows = toy_flows(rng, topo, n_blocks=2, width=8)
    y2d = _random_pose_batch(rng, 4, topo)
    az = rng.uniform(-np.pi, np.pi, 4)
    means = _bone_means(topo)
    only_first = consistency_cycle(y2d, lifters, flows, means, topo, azimuths=az,
                                   candidate_weights=[1.0, 0.0, 0.0])
    bd1, _ = cycle_forward(y2d, lifters, flows, means, topo, azimuths=az,
                           candidates=build_candidates(topo)[:1],
                           candidate_weights=[1.0])
    for field in ("l_nf", "l_2d", "l_3d", "l_def", "l_b"):
        assert getattr(only_first, field) == pytest.approx(getattr(bd1, field), rel=1e-12)
    with pytest.raises(ConfigError):
        consistency_cycle(y2d, lifters, flows, means, topo, azimuths=az,
                          candidate_weights=[1.0, 1.0])


def test_cycle_gradients_with_candidate_weights(toy_topo):
    rng = np.random.default_rng(26)
    lifters = perturbed_lifters(rng, toy_topo, width=6)
    flows = toy_flows(rng, toy_topo, n_blocks=2, width=6)
    means = _bone_means(toy_topo)
    y2d = _random_pose_batch(rng, 4, toy_topo)
    az = rng.uniform(-np.pi, np.pi, 4)
    weights = [0.6, 0.3, 0.1]

    def loss_fn():
        bd, _ = cycle_forward(y2d, lifters, flows, means, toy_topo, azimuths=az,
                              candidate_weights=weights)
        return bd.total

    _, state = cycle_forward(y2d, lifters, flows, means, toy_topo, azimuths=az,
                             candidate_weights=weights)
    grads = cycle_backward(state, lifters, flows, toy_topo)
    for name in SEGMENT_NAMES:
        fd_check(loss_fn, lifters[name].params(), grads[name], max_entries=4, rng=rng)


def test_cycle_gradients_match_finite_differences_toy(toy_topo):
    rng = np.random.default_rng(18)
    lifters = perturbed_lifters(rng, toy_topo, width=6)
    flows = toy_flows(rng, toy_topo, n_blocks=2, width=6)
    means = _bone_means(toy_topo)
    y2d = _random_pose_batch(rng, 4, toy_topo)
    az = rng.uniform(-np.pi, np.pi, 4)

    def loss_fn():
        bd, _ = cycle_forward(y2d, lifters, flows, means, toy_topo, azimuths=az)
        return bd.total

    _, state = cycle_forward(y2d, lifters, flows, means, toy_topo, azimuths=az)
    grads = cycle_backward(state, lifters, flows, toy_topo)
    for name in SEGMENT_NAMES:
        fd_check(loss_fn, lifters[name].params(), grads[name], max_entries=6, rng=rng)


def test_cycle_gradients_match_finite_differences_default_topology(topo):
    rng = np.random.default_rng(19)
    lifters = perturbed_lifters(rng, topo, width=6)
    flows = toy_flows(rng, topo, n_blocks=2, width=6)
    means = _bone_means(topo)
    y2d = _random_pose_batch(rng, 3, topo)
    az = rng.uniform(-np.pi, np.pi, 3)

    def loss_fn():
        bd, _ = cycle_forward(y2d, lifters, flows, means, topo, azimuths=az)
        return bd.total

    _, state = cycle_forward(y2d, lifters, flows, means, topo, azimuths=az)
    grads = cycle_backward(state, lifters, flows, topo)
    for name in SEGMENT_NAMES:
        fd_check(loss_fn, lifters[name].params(), grads[name], max_entries=3, rng=rng)


# ---------------------------------------------------------------------------
# flattening helpers


def test_flatten_roundtrip(topo):
    rng = np.random.default_rng(20)
    y2d = _random_pose_batch(rng, 6, topo)
    flat = flatten_nonroot(y2d, topo)
    assert flat.shape == (6, 32)
    assert np.array_equal(unflatten_nonroot(flat, topo), y2d)
    for name in SEGMENT_NAMES:
        cols = segment_flat_columns(topo, name)
        assert np.array_equal(flat[:, cols], segment_input(y2d, topo, name))


# ---------------------------------------------------------------------------
# training


def test_train_lifters_zero_epochs_is_noop(topo):
    rng = np.random.default_rng(21)
    lifters = init_lifters(5, topo, width=8)
    before = {n: [p.copy() for p in lifters[n].params()] for n in SEGMENT_NAMES}
    flows = toy_flows(rng, topo, n_blocks=2, width=8)
    full = perturbed_flow(rng, 32, n_blocks=2, width=8)
    trace = train_lifters(lifters, _random_pose_batch(rng, 32, topo), flows, full,
                          _bone_means(topo), topo, epochs=0, batch_size=16, seed=1)
    assert trace == []
    for n in SEGMENT_NAMES:
        for p, b in zip(lifters[n].params(), before[n]):
            assert np.array_equal(p, b)


def test_train_lifters_smoke_reduces_loss(topo):
    records = data_mod.generate_synthetic(96, seed=31)
    y2d = data_mod.stack_2d(records)
    means = data_mod.compute_bone_stats(records, topo).values
    rng = np.random.default_rng(22)
    flows = toy_flows(rng, topo, n_blocks=2, width=16, scale=0.02)
    full = perturbed_flow(rng, 32, n_blocks=2, width=16, scale=0.02)
    lifters = init_lifters(6, topo, width=16)
    trace = train_lifters(lifters, y2d, flows, full, means, topo, epochs=4,
                          batch_size=32, seed=2, sigma=0.2)
    assert len(trace) == 4
    totals = [row[6] for row in trace]
    assert totals[-1] < totals[0]
    assert all(row[7] == 0 for row in trace)  # no skipped samples


def test_train_lifters_is_deterministic(topo):
    records = data_mod.generate_synthetic(48, seed=32)
    y2d = data_mod.stack_2d(records)
    means = data_mod.compute_bone_stats(records, topo).values

    def run():
        rng = np.random.default_rng(23)
        flows = toy_flows(rng, topo, n_blocks=2, width=8, scale=0.02)
        full = perturbed_flow(rng, 32, n_blocks=2, width=8, scale=0.02)
        lifters = init_lifters(7, topo, width=8)
        trace = train_lifters(lifters, y2d, flows, full, means, topo, epochs=2,
                              batch_size=16, seed=3, sigma=0.2)
        return lifters, trace

    l1, t1 = run()
    l2, t2 = run()
    assert t1 == t2
    for n in SEGMENT_NAMES:
        for a, b in zip(l1[n].params(), l2[n].params()):
            assert np.array_equal(a, b)


@pytest.mark.slow
def test_trained_lifter_beats_zero_offset_depth_error(desk_run, topo):
    """Mean depth-offset error of the trained lifters on a held-out split is
    strictly below the all-zero-offset baseline."""
    from poselift.cli import load_lifter_dir

    records = data_mod.load_dataset(desk_run["heldout"]).records
    y2d = data_mod.stack_2d(records)
    d_true = np.stack([data_mod.true_depth_offsets(r) for r in records])
    lifters = load_lifter_dir(desk_run["lifters"])
    pred, _ = lift_candidates(lifters, y2d, topo)["legs-torso"]
    d_pred = pred[:, :, 2] - 10.0
    err_trained = np.abs(d_pred[:, 1:] - d_true[:, 1:]).mean()
    err_zero = np.abs(d_true[:, 1:]).mean()
    assert err_trained < err_zero


def test_lift_candidates_shapes(topo):
    rng = np.random.default_rng(24)
    lifters = perturbed_lifters(rng, topo, width=8)
    y2d = _random_pose_batch(rng, 5, topo)
    out = lift_candidates(lifters, y2d, topo)
    assert set(out) == set(CANDIDATE_NAMES)
    for pts, alpha in out.values():
        assert pts.shape == (5, 17, 3)
        assert alpha.shape == (5,)
        assert np.allclose(pts[:, 0], (0, 0, 10))
