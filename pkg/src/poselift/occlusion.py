"""Occlusion scenarios, partial lifting, and lift-then-fill completion.

A scenario masks a limb-level keypoint set (Table-style named scenarios or
a custom list) and routes every visible non-root keypoint to one lifter
whose entire input segment is still visible. The 3D fill network is
trained by distillation: the unoccluded lifters provide the target
coordinates for the hidden part, with the partial pose and target rotated
by a shared random azimuth about the root for augmentation. The 2D
baseline fills missing coordinates in image space first (its targets are
the data itself) and lifts the completed pose afterwards.

Masked joints are represented as NaN rows so accidental use fails loudly;
visible coordinates are passed through bit-exactly.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, DataError, DivergenceError, UnsupportedScenarioError
from .geometry import (
    CAMERA_DISTANCE,
    lift_batch,
    rotate_batch,
    rotation_matrices,
    mpjpe_batch,
    n_mpjpe_batch,
    pa_mpjpe_batch,
)
from .lifter import lift_candidates, segment_input
from .topology import SEGMENT_NAMES

SCENARIO_NAMES = (
    "left-arm", "right-arm", "left-leg", "right-leg",
    "left-arm-and-leg", "right-arm-and-leg", "both-legs", "full-torso",
)

OCCLUSION_EPOCHS = 10
NET_BLOCKS = 3
NET_WIDTH = 256

_ROUTING_PRIORITY = ("legs", "torso", "left", "right")


def _named_mask(name, topology):
    j = topology.joint_index
    arm = {
        "left": (j("left_shoulder"), j("left_elbow"), j("left_wrist")),
        "right": (j("right_shoulder"), j("right_elbow"), j("right_wrist")),
    }
    leg = {
        "left": (j("left_hip"), j("left_knee"), j("left_ankle")),
        "right": (j("right_hip"), j("right_knee"), j("right_ankle")),
    }
    masks = {
        "left-arm": arm["left"],
        "right-arm": arm["right"],
        "left-leg": leg["left"],
        "right-leg": leg["right"],
        "left-arm-and-leg": arm["left"] + leg["left"],
        "right-arm-and-leg": arm["right"] + leg["right"],
        "both-legs": leg["left"] + leg["right"],
        "full-torso": tuple(topology.segments["torso"]),
    }
    return tuple(sorted(masks[name]))


def derive_routing(masked, topology):
    """Greedy routing: walk lifters in fixed priority, use each whose whole
    input segment is visible, assign its not-yet-covered visible joints."""
    masked = set(masked)
    visible = set(range(topology.n_joints)) - masked - {topology.root_index}
    routing = []
    uncovered = set(visible)
    for name in _ROUTING_PRIORITY:
        seg = set(topology.segments[name])
        if seg & masked:
            continue
        take = tuple(sorted(seg & uncovered))
        if take:
            routing.append((name, take))
            uncovered -= set(take)
        if not uncovered:
            break
    if uncovered:
        raise UnsupportedScenarioError(
            f"no fully-visible lifter covers joints {sorted(uncovered)}; "
            "this occlusion pattern is unsupported")
    return tuple(routing)


@dataclass(frozen=True)
class OcclusionScenario:
    name: str
    masked: tuple     # joint indices, sorted
    routing: tuple    # ((lifter_name, joint_tuple), ...)

    def __post_init__(self):
        routed = [j for _, joints in self.routing for j in joints]
        if len(routed) != len(set(routed)):
            raise ConfigError(f"scenario {self.name!r} routes a joint twice")
        if set(routed) & set(self.masked):
            raise ConfigError(f"scenario {self.name!r} routes a masked joint")

    @property
    def lifters_used(self):
        return tuple(lname for lname, _ in self.routing)

    @classmethod
    def named(cls, name, topology):
        if name not in SCENARIO_NAMES:
            raise ConfigError(f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}")
        masked = _named_mask(name, topology)
        return cls(name, masked, derive_routing(masked, topology))

    @classmethod
    def custom(cls, masked_joints, topology, name="custom"):
        masked = tuple(sorted(set(int(j) for j in masked_joints)))
        if topology.root_index in masked:
            raise ConfigError("the root keypoint cannot be masked")
        if any(j < 0 or j >= topology.n_joints for j in masked):
            raise ConfigError("masked joint index out of range")
        return cls(name, masked, derive_routing(masked, topology))

    def to_json_obj(self):
        return {"name": self.name, "masked": list(self.masked),
                "routing": [[lname, list(joints)] for lname, joints in self.routing]}

    @classmethod
    def from_json_obj(cls, obj):
        return cls(obj["name"], tuple(obj["masked"]),
                   tuple((lname, tuple(joints)) for lname, joints in obj["routing"]))

    def visible(self, topology):
        """All visible joint indices including the root, sorted."""
        masked = set(self.masked)
        return tuple(j for j in range(topology.n_joints) if j not in masked)


def all_named_scenarios(topology):
    return [OcclusionScenario.named(name, topology) for name in SCENARIO_NAMES]


# ---------------------------------------------------------------------------
# masking and partial lifting


def mask_pose(pose_2d, scenario):
    """Masked joints become NaN; visible coordinates are untouched."""
    out = np.array(pose_2d, dtype=np.float64, copy=True)
    out[..., list(scenario.masked), :] = np.nan
    return out


def partial_lift(partial_2d, scenario, lifters, topology, c=CAMERA_DISTANCE):
    """Lift the visible part of a masked 2D pose batch.

    Returns (pts, elevation): pts is (n, k, 3) with NaN at masked joints and
    the root at (0, 0, c); elevation is the mean over the lifters used.
    """
    y2d = np.asarray(partial_2d, dtype=np.float64)
    single = y2d.ndim == 2
    if single:
        y2d = y2d[None]
    n, k, _ = y2d.shape
    vis = [j for j in range(k) if j not in set(scenario.masked)]
    if not np.all(np.isfinite(y2d[:, vis])):
        raise DataError("visible keypoints contain non-finite values")

    D = np.zeros((n, k))
    elevs = []
    for lname, joints in scenario.routing:
        seg = list(topology.segments[lname])
        x = segment_input(y2d, topology, lname)
        if not np.all(np.isfinite(x)):
            raise DataError(f"lifter {lname!r} input segment is not fully visible")
        (d, e), _ = lifters[lname].forward(x)
        pos = [seg.index(j) for j in joints]
        D[:, list(joints)] = d[:, pos]
        elevs.append(e)
    elevation = np.mean(elevs, axis=0) if elevs else np.zeros(n)

    pts, _ = lift_batch(np.nan_to_num(y2d), D, c)
    pts[:, list(scenario.masked), :] = np.nan
    if single:
        return pts[0], elevation[0]
    return pts, elevation


# ---------------------------------------------------------------------------
# fill networks


class OcclusionNet:
    """Residual MLP predicting the masked joints from the visible ones.

    One network per (scenario, space); 3d nets map flattened camera-frame
    coordinates of the visible joints (root included) to the masked joints'
    coordinates, 2d nets do the same in image space.
    """

    def __init__(self, scenario, space, stack, head, width, n_joints):
        if space not in ("3d", "2d"):
            raise ConfigError(f"space must be '3d' or '2d', got {space!r}")
        self.scenario = scenario
        self.space = space
        self.stack = stack
        self.head = head
        self.width = width
        self.n_joints = n_joints

    @classmethod
    def init(cls, rng, scenario, space, topology, width=NET_WIDTH):
        dims = 3 if space == "3d" else 2
        n_vis = topology.n_joints - len(scenario.masked)
        stack = nn.ResidualStack.init(rng, dims * n_vis, width, NET_BLOCKS)
        head = nn.Dense.init(rng, width, dims * len(scenario.masked))
        return cls(scenario, space, stack, head, width, topology.n_joints)

    @property
    def dims(self):
        return 3 if self.space == "3d" else 2

    def params(self):
        return self.stack.params() + self.head.params()

    def forward(self, x):
        h, t1 = self.stack.forward(x)
        y, t2 = self.head.forward(h)
        return y, (t1, t2)

    def backward(self, tape, dy, want_param_grads=True):
        t1, t2 = tape
        dh, g2 = self.head.backward(t2, dy, want_param_grads)
        dx, g1 = self.stack.backward(t1, dh, want_param_grads)
        return dx, g1 + g2

    def architecture(self):
        return {
            "scenario": self.scenario.to_json_obj(),
            "space": self.space,
            "width": int(self.width),
            "blocks": NET_BLOCKS,
            "n_joints": int(self.n_joints),
        }

    @classmethod
    def from_architecture(cls, arch):
        scenario = OcclusionScenario.from_json_obj(arch["scenario"])
        dims = 3 if arch["space"] == "3d" else 2
        n_vis = arch["n_joints"] - len(scenario.masked)
        rng = np.random.default_rng(0)  # placeholder weights, overwritten by caller
        stack = nn.ResidualStack.init(rng, dims * n_vis, arch["width"], arch["blocks"])
        head = nn.Dense.init(rng, arch["width"], dims * len(scenario.masked))
        return cls(scenario, arch["space"], stack, head, arch["width"], arch["n_joints"])


def _vis_list(net):
    masked = set(net.scenario.masked)
    return [j for j in range(net.n_joints) if j not in masked]


def fill_pose(net, partial):
    """Complete a partial pose (2d or 3d per the net's space).

    Visible joints pass through bit-exactly; masked joints are replaced by
    the network's predictions.
    """
    pts = np.asarray(partial, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    dims = net.dims
    if pts.shape[1] != net.n_joints or pts.shape[2] != dims:
        raise ConfigError(f"expected (n, {net.n_joints}, {dims}) pose, got {pts.shape}")
    vis = _vis_list(net)
    x = pts[:, vis, :].reshape(pts.shape[0], -1)
    if not np.all(np.isfinite(x)):
        raise DataError("partial pose mask does not match the network's scenario")
    y, _ = net.forward(np.ascontiguousarray(x))
    out = pts.copy()
    out[:, list(net.scenario.masked), :] = y.reshape(pts.shape[0], -1, dims)
    return out[0] if single else out


def fill_3d(net, partial_3d):
    if net.space != "3d":
        raise ConfigError("fill_3d needs a 3d-space network")
    return fill_pose(net, partial_3d)


def fill_2d(net, partial_2d):
    if net.space != "2d":
        raise ConfigError("fill_2d needs a 2d-space network")
    return fill_pose(net, partial_2d)


# ---------------------------------------------------------------------------
# training (knowledge distillation for 3d; direct regression for 2d)


def occlusion_training_batch(net, lifters, y2d, topology, rng, c=CAMERA_DISTANCE,
                             augment=True):
    """Build (input, target) rows for one batch of unoccluded poses."""
    scenario = net.scenario
    vis = _vis_list(net)
    masked = list(scenario.masked)
    n = y2d.shape[0]
    if net.space == "2d":
        x = y2d[:, vis, :].reshape(n, -1)
        t = y2d[:, masked, :].reshape(n, -1)
        return np.ascontiguousarray(x), np.ascontiguousarray(t)

    candidates = lift_candidates(lifters, y2d, topology, c)
    teacher, _ = candidates["legs-torso"]
    partial, _ = partial_lift(mask_pose(y2d, scenario), scenario, lifters, topology, c)
    if augment:
        az = rng.uniform(-np.pi, np.pi, size=n)
        R = rotation_matrices(az, np.zeros(n))
        teacher = rotate_batch(teacher, R, root=topology.root_index)
        partial_f = np.nan_to_num(partial)
        partial_f = rotate_batch(partial_f, R, root=topology.root_index)
        partial = partial_f
    else:
        partial = np.nan_to_num(partial)
    x = partial[:, vis, :].reshape(n, -1)
    t = teacher[:, masked, :].reshape(n, -1)
    return np.ascontiguousarray(x), np.ascontiguousarray(t)


def train_occlusion(net, lifters, y2d_data, topology, epochs=OCCLUSION_EPOCHS,
                    batch_size=256, seed=0, base_lr=nn.BASE_LR, lr_decay=nn.LR_DECAY,
                    c=CAMERA_DISTANCE, augment=True, log=None):
    """Fit the fill network; teachers (the lifters) stay frozen.

    Returns per-epoch (epoch, mse) trace rows.
    """
    data = np.ascontiguousarray(y2d_data, dtype=np.float64)
    n = data.shape[0]
    rng = np.random.default_rng(seed)
    params = net.params()
    opt = nn.AdamState(params, base_lr=base_lr, lr_decay=lr_decay)
    trace = []
    for epoch in range(epochs):
        opt.set_epoch(epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x, t = occlusion_training_batch(net, lifters, data[idx], topology, rng,
                                            c=c, augment=augment)
            y, tape = net.forward(x)
            diff = y - t
            loss = float((diff * diff).mean())
            if not np.isfinite(loss):
                raise DivergenceError(f"occlusion training diverged at epoch {epoch}")
            dy = diff * (2.0 / diff.size)
            _, grads = net.backward(tape, dy)
            opt.step(params, grads)
            epoch_loss += loss * len(idx)
        trace.append((epoch, epoch_loss / n))
        if log:
            log(epoch, epoch_loss / n)
    return trace


# ---------------------------------------------------------------------------
# evaluation


def _center_on_root(pts, root):
    return pts - pts[:, root:root + 1, :]


def evaluate_paths(scenario, net3d, net2d, lifters, y2d, gt_mm, topology,
                   c=CAMERA_DISTANCE):
    """PA-/N-MPJPE of the O_3D and O_2D completion paths for one scenario.

    Returns {"3d": (pa, n), "2d": (pa, n)} with entries missing when the
    corresponding net is None. Ground truth is root-relative millimetres.
    """
    root = topology.root_index
    masked2d = mask_pose(y2d, scenario)
    gt_c = _center_on_root(gt_mm, root)
    out = {}
    if net3d is not None:
        partial, _ = partial_lift(masked2d, scenario, lifters, topology, c)
        pred = fill_3d(net3d, partial)
        pred_c = _center_on_root(pred, root)
        out["3d"] = (float(pa_mpjpe_batch(pred_c, gt_c).mean()),
                     float(n_mpjpe_batch(pred_c, gt_c).mean()))
    if net2d is not None:
        completed = fill_2d(net2d, masked2d)
        pred, _ = lift_candidates(lifters, completed, topology, c)["legs-torso"]
        pred_c = _center_on_root(pred, root)
        out["2d"] = (float(pa_mpjpe_batch(pred_c, gt_c).mean()),
                     float(n_mpjpe_batch(pred_c, gt_c).mean()))
    return out


def evaluate_occlusion(scenarios, nets3d, nets2d, lifters, y2d, gt_mm, topology,
                       c=CAMERA_DISTANCE):
    """Table of per-scenario completion errors.

    nets3d/nets2d map scenario name -> OcclusionNet (missing entries are
    skipped with a warning). Returns (rows, warnings); each row is a dict
    with scenario, space, pa_mpjpe, n_mpjpe, sample_count.
    """
    rows = []
    warnings = []
    for scenario in scenarios:
        net3 = nets3d.get(scenario.name) if nets3d else None
        net2 = nets2d.get(scenario.name) if nets2d else None
        if net3 is None and nets3d is not None:
            warnings.append(f"no 3d net for scenario {scenario.name!r}; row skipped")
        if net2 is None and nets2d is not None:
            warnings.append(f"no 2d net for scenario {scenario.name!r}; row skipped")
        res = evaluate_paths(scenario, net3, net2, lifters, y2d, gt_mm, topology, c)
        for space in ("3d", "2d"):
            if space in res:
                pa, nm = res[space]
                rows.append({"scenario": scenario.name, "space": space,
                             "pa_mpjpe": pa, "n_mpjpe": nm,
                             "sample_count": y2d.shape[0]})
    return rows, warnings
