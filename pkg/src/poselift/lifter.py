"""Segment lifting networks and their unsupervised training cycle.

Four lifters (legs, torso, left, right) each map their segment's 2D
coordinates to per-joint depth offsets plus one elevation angle. Their
outputs are assembled into three full-pose candidates; each candidate is
rotated by a random azimuth and its predicted elevation, reprojected,
scored under the segment flows, re-lifted, rotated back and compared with
the original — the consistency objective. Everything here is reverse-mode
differentiated by hand; the finite-difference tests check the whole chain.

Lifters are evaluated in a fixed order (original view in SEGMENT_NAMES
order, then per candidate in routing order), which keeps training
bit-reproducible and lets tests inject scripted oracle lifters.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, DivergenceError
from .geometry import (
    CAMERA_DISTANCE,
    lift_batch,
    lift_batch_bwd,
    project_batch,
    project_batch_bwd,
    relative_bone_lengths_batch,
    relative_bone_lengths_batch_bwd,
    rotate_batch,
    rotate_batch_bwd,
    rotation_matrices,
    rotation_matrices_delev,
)
from .topology import SEGMENT_NAMES

BONE_WEIGHT = 50.0
PATH_BLOCKS = 3
SHARED_BLOCKS = 1
DEFAULT_WIDTH = 256

CANDIDATE_NAMES = ("legs-torso", "left-right-r", "left-right-l")


@dataclass(frozen=True)
class Candidate:
    """One full-pose assembly rule: which lifter owns which joints."""

    name: str
    routing: tuple  # ((lifter_name, joint_index_tuple), ...)
    elevation_from: tuple


def build_candidates(topology):
    """The three assembled poses: legs+torso, and left+right with the shared
    spine chain taken from the right or the left lifter."""
    chain = topology.spine_chain
    left_x = topology.side_exclusive("left")
    right_x = topology.side_exclusive("right")
    return (
        Candidate(
            "legs-torso",
            (("legs", tuple(topology.segments["legs"])),
             ("torso", tuple(topology.segments["torso"]))),
            ("legs", "torso"),
        ),
        Candidate(
            "left-right-r",
            (("left", left_x), ("right", tuple(sorted(right_x + chain)))),
            ("left", "right"),
        ),
        Candidate(
            "left-right-l",
            (("left", tuple(sorted(left_x + chain))), ("right", right_x)),
            ("left", "right"),
        ),
    )


@dataclass
class LossBreakdown:
    """Eq.-10 style objective terms (each averaged over the three candidates)."""

    l_nf: float
    l_2d: float
    l_3d: float
    l_def: float
    l_b: float
    skipped: int = 0

    @property
    def total(self):
        return self.l_nf + self.l_2d + self.l_3d + self.l_def + BONE_WEIGHT * self.l_b


class LifterNet:
    """Shared residual trunk with separate depth and elevation heads."""

    def __init__(self, segment, seg_size, shared, depth_blocks, depth_head,
                 elev_blocks, elev_head, width):
        self.segment = segment
        self.seg_size = seg_size
        self.shared = shared
        self.depth_blocks = list(depth_blocks)
        self.depth_head = depth_head
        self.elev_blocks = list(elev_blocks)
        self.elev_head = elev_head
        self.width = width

    @classmethod
    def init(cls, rng, segment, seg_size, width=DEFAULT_WIDTH):
        shared = nn.ResidualStack.init(rng, 2 * seg_size, width, SHARED_BLOCKS)
        depth_blocks = [nn.ResidualBlock.init(rng, width) for _ in range(PATH_BLOCKS)]
        depth_head = nn.Dense.init(rng, width, seg_size)
        elev_blocks = [nn.ResidualBlock.init(rng, width) for _ in range(PATH_BLOCKS)]
        elev_head = nn.Dense.init(rng, width, 1)
        return cls(segment, seg_size, shared, depth_blocks, depth_head,
                   elev_blocks, elev_head, width)

    def params(self):
        out = self.shared.params()
        for blk in self.depth_blocks:
            out += blk.params()
        out += self.depth_head.params()
        for blk in self.elev_blocks:
            out += blk.params()
        out += self.elev_head.params()
        return out

    def depth_path_param_range(self):
        """Index range of the depth-path-exclusive parameters in params()."""
        n_shared = len(self.shared.params())
        n_depth = 4 * PATH_BLOCKS + 2
        return n_shared, n_shared + n_depth

    def forward(self, x):
        """x: (n, 2 * seg_size) -> ((depths (n, seg_size), elevation (n,)), tape)."""
        if x.ndim != 2 or x.shape[1] != 2 * self.seg_size:
            raise ConfigError(
                f"lifter {self.segment!r} expects (n, {2 * self.seg_size}), got {x.shape}")
        h, tape_sh = self.shared.forward(x)
        hd = h
        tapes_d = []
        for blk in self.depth_blocks:
            hd, t = blk.forward(hd)
            tapes_d.append(t)
        d, tape_dh = self.depth_head.forward(hd)
        he = h
        tapes_e = []
        for blk in self.elev_blocks:
            he, t = blk.forward(he)
            tapes_e.append(t)
        ev, tape_eh = self.elev_head.forward(he)
        tape = (tape_sh, tapes_d, tape_dh, tapes_e, tape_eh)
        return (d, ev[:, 0]), tape

    def backward(self, tape, dd, de, want_param_grads=True):
        tape_sh, tapes_d, tape_dh, tapes_e, tape_eh = tape
        dhd, g_dh = self.depth_head.backward(tape_dh, dd, want_param_grads)
        g_dblocks = []
        for blk, t in zip(reversed(self.depth_blocks), reversed(tapes_d)):
            dhd, g = blk.backward(t, dhd, want_param_grads)
            g_dblocks = g + g_dblocks
        dhe, g_eh = self.elev_head.backward(tape_eh, de[:, None], want_param_grads)
        g_eblocks = []
        for blk, t in zip(reversed(self.elev_blocks), reversed(tapes_e)):
            dhe, g = blk.backward(t, dhe, want_param_grads)
            g_eblocks = g + g_eblocks
        dx, g_sh = self.shared.backward(tape_sh, dhd + dhe, want_param_grads)
        return dx, g_sh + g_dblocks + g_dh + g_eblocks + g_eh

    def architecture(self):
        return {
            "segment": self.segment,
            "seg_size": int(self.seg_size),
            "width": int(self.width),
            "shared_blocks": SHARED_BLOCKS,
            "path_blocks": PATH_BLOCKS,
        }

    @classmethod
    def from_architecture(cls, arch):
        if (arch.get("shared_blocks"), arch.get("path_blocks")) != (SHARED_BLOCKS,
                                                                    PATH_BLOCKS):
            raise ConfigError(
                f"checkpoint lifter layout {arch.get('shared_blocks')}/"
                f"{arch.get('path_blocks')} blocks does not match this build")
        rng = np.random.default_rng(0)  # placeholder weights, overwritten by caller
        return cls.init(rng, arch["segment"], arch["seg_size"], arch["width"])


def init_lifters(seed, topology, width=DEFAULT_WIDTH):
    """One lifter per segment, each with its own derived init stream."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(len(SEGMENT_NAMES))
    return {
        name: LifterNet.init(np.random.default_rng(children[i]), name,
                             len(topology.segments[name]), width)
        for i, name in enumerate(SEGMENT_NAMES)
    }


# ---------------------------------------------------------------------------
# segment flattening


def segment_input(y2d, topology, name):
    seg = list(topology.segments[name])
    n = y2d.shape[0]
    return np.ascontiguousarray(y2d[:, seg, :].reshape(n, -1))


def flatten_nonroot(y2d, topology):
    """Full-pose flow layout: non-root joints in index order, xy interleaved."""
    non_root = [j for j in range(topology.n_joints) if j != topology.root_index]
    return np.ascontiguousarray(y2d[:, non_root, :].reshape(y2d.shape[0], -1))


def unflatten_nonroot(rows, topology):
    n = rows.shape[0]
    k = topology.n_joints
    out = np.zeros((n, k, 2))
    non_root = [j for j in range(k) if j != topology.root_index]
    out[:, non_root, :] = rows.reshape(n, k - 1, 2)
    return out


def segment_flat_columns(topology, name):
    """Columns of a segment inside the flattened full-pose layout."""
    non_root = [j for j in range(topology.n_joints) if j != topology.root_index]
    pos = {j: i for i, j in enumerate(non_root)}
    cols = []
    for j in topology.segments[name]:
        cols.extend((2 * pos[j], 2 * pos[j] + 1))
    return np.asarray(cols, dtype=np.int64)


# ---------------------------------------------------------------------------
# assembly


def assemble(seg_depths, seg_elevs, topology, candidates=None):
    """Merge per-segment lifter outputs into the three full-pose candidates.

    seg_depths[name]: (n, seg_size) depth offsets in segment-joint order.
    Returns {candidate: (depth_grid (n, k), elevation (n,))}; the root depth
    is fixed at zero.
    """
    candidates = candidates or build_candidates(topology)
    missing = [s for s in SEGMENT_NAMES if s not in seg_depths]
    if missing:
        raise ConfigError(f"missing segment predictions: {missing}")
    n = next(iter(seg_depths.values())).shape[0]
    k = topology.n_joints
    out = {}
    for cand in candidates:
        D = np.zeros((n, k))
        for lname, joints in cand.routing:
            seg = list(topology.segments[lname])
            pos = [seg.index(j) for j in joints]
            D[:, list(joints)] = seg_depths[lname][:, pos]
        alpha = np.mean([seg_elevs[lname] for lname in cand.elevation_from], axis=0)
        out[cand.name] = (D, alpha)
    return out


def lift_candidates(lifters, y2d, topology, c=CAMERA_DISTANCE):
    """Run all four lifters and return {candidate: (pose3d (n,k,3), elevation)}."""
    seg_depths, seg_elevs = {}, {}
    for name in SEGMENT_NAMES:
        (d, e), _ = lifters[name].forward(segment_input(y2d, topology, name))
        seg_depths[name] = d
        seg_elevs[name] = e
    out = {}
    for cname, (D, alpha) in assemble(seg_depths, seg_elevs, topology).items():
        pts, _ = lift_batch(y2d, D, c)
        out[cname] = (pts, alpha)
    return out


# ---------------------------------------------------------------------------
# standalone loss terms


def bone_loss(pose_3d, mean_lengths, topology):
    """Mean squared deviation of relative bone lengths from the given means."""
    from .geometry import bone_lengths

    rel = bone_lengths(pose_3d, topology)
    mean_lengths = np.asarray(mean_lengths, dtype=np.float64)
    if mean_lengths.shape != rel.shape:
        raise ConfigError("mean bone lengths do not match the topology")
    return float(((rel - mean_lengths) ** 2).mean())


def deformation_loss(real_batch, virtual_batch):
    """Pairwise deformation consistency over adjacent batch positions."""
    a = np.asarray(real_batch, dtype=np.float64)
    b = np.asarray(virtual_batch, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError("real/virtual batches must have the same shape")
    n_pairs = a.shape[0] // 2
    if n_pairs == 0:
        return 0.0
    m = 2 * n_pairs
    delta = (a[0:m:2] - a[1:m:2]) - (b[0:m:2] - b[1:m:2])
    return float((delta ** 2).sum(axis=(1, 2)).mean())


# ---------------------------------------------------------------------------
# consistency cycle


class _InvalidRows(Exception):
    def __init__(self, mask):
        self.mask = mask


def _nonroot_mask(topology):
    m = np.ones(topology.n_joints, dtype=bool)
    m[topology.root_index] = False
    return m


class CycleState:
    """Forward caches of one consistency-cycle evaluation."""

    def __init__(self):
        self.per_candidate = []
        self.first_tapes = {}
        self.seg_depths = {}
        self.seg_elevs = {}


def cycle_forward(y2d, lifters, flows, bone_means, topology,
                  azimuths=None, rng=None, c=CAMERA_DISTANCE, candidates=None,
                  candidate_weights=None, _retry=True):
    """Evaluate Eq.-10 losses for a batch. Returns (LossBreakdown, CycleState).

    ``azimuths`` overrides the random draw (finite-difference tests, the
    identity-rotation property); otherwise one azimuth per sample is drawn
    uniformly from [-pi, pi]. Each loss term is a weighted mean over the
    three candidates (uniform by default). Rows whose virtual view
    degenerates (non-positive depth after rotation or non-finite flow
    likelihood) are dropped and counted in ``skipped``.
    """
    y2d = np.ascontiguousarray(y2d, dtype=np.float64)
    n, k, _ = y2d.shape
    candidates = candidates or build_candidates(topology)
    if candidate_weights is None:
        candidate_weights = np.full(len(candidates), 1.0 / len(candidates))
    else:
        candidate_weights = np.asarray(candidate_weights, dtype=np.float64)
        if candidate_weights.shape != (len(candidates),) or np.any(candidate_weights < 0):
            raise ConfigError(f"candidate_weights must be {len(candidates)} "
                              "non-negative reals")
    if azimuths is None:
        if rng is None:
            raise ConfigError("cycle needs either azimuths or an rng")
        azimuths = rng.uniform(-np.pi, np.pi, size=n)
    else:
        azimuths = np.asarray(azimuths, dtype=np.float64)
        if azimuths.shape != (n,):
            raise ConfigError(f"azimuths must be ({n},)")

    parents, children = topology.bone_index_arrays()
    bone_means = np.asarray(bone_means, dtype=np.float64)
    nr = _nonroot_mask(topology)
    n_nr = int(nr.sum())
    root = topology.root_index

    state = CycleState()
    state.y2d = y2d
    state.azimuths = azimuths
    state.candidates = candidates
    state.weights = candidate_weights
    state.nr = nr
    state.n_nr = n_nr
    state.root = root
    state.bone_means = bone_means
    state.parents, state.children = parents, children
    state.c = c

    try:
        breakdown = _cycle_forward_inner(state, lifters, flows, topology)
    except _InvalidRows as bad:
        if bad.mask.all():
            raise DivergenceError("every sample in the batch produced a degenerate "
                                  "virtual view")
        if not _retry:
            raise DivergenceError("virtual views still degenerate after dropping "
                                  "bad samples")
        keep = ~bad.mask
        sub, sub_state = cycle_forward(
            y2d[keep], lifters, flows, bone_means, topology,
            azimuths=azimuths[keep], c=c, candidates=candidates,
            candidate_weights=candidate_weights, _retry=False)
        sub.skipped = int(bad.mask.sum())
        return sub, sub_state
    return breakdown, state


def _cycle_forward_inner(state, lifters, flows, topology):
    y2d = state.y2d
    n = y2d.shape[0]
    nr, n_nr, root, c = state.nr, state.n_nr, state.root, state.c
    weights = state.weights

    for name in SEGMENT_NAMES:
        x = segment_input(y2d, topology, name)
        (d, e), tape = lifters[name].forward(x)
        state.seg_depths[name] = d
        state.seg_elevs[name] = e
        state.first_tapes[name] = tape

    assembled = assemble(state.seg_depths, state.seg_elevs, topology, state.candidates)

    l_nf = l_2d = l_3d = l_def = l_b = 0.0
    bad = np.zeros(n, dtype=bool)
    for ci, cand in enumerate(state.candidates):
        D, alpha = assembled[cand.name]
        pts_hat, active_hat = lift_batch(y2d, D, c)
        R = rotation_matrices(state.azimuths, alpha)
        V = rotate_batch(pts_hat, R, root=root, inverse=False)
        if np.any(V[:, :, 2] <= 0.0) or not np.all(np.isfinite(V)):
            bad |= (V[:, :, 2] <= 0.0).any(axis=1) | ~np.isfinite(V).all(axis=(1, 2))
            raise _InvalidRows(bad)
        y2d_virt = project_batch(V)

        flow_parts = []
        for sname in SEGMENT_NAMES:
            xs = segment_input(y2d_virt, topology, sname)
            logp, z, tapes = flows[sname].log_prob_with_tape(xs)
            if not np.all(np.isfinite(logp)):
                bad |= ~np.isfinite(logp)
                raise _InvalidRows(bad)
            flow_parts.append((sname, logp, z, tapes))
        l_nf_cand = float(np.mean([-lp.mean() for _, lp, _, _ in flow_parts]))

        relift_tapes = {}
        d2 = {}
        for lname, joints in cand.routing:
            x2 = segment_input(y2d_virt, topology, lname)
            (dep, _e2), tape2 = lifters[lname].forward(x2)
            relift_tapes[lname] = tape2
            d2[lname] = dep
        D2 = np.zeros((n, y2d.shape[1]))
        for lname, joints in cand.routing:
            seg = list(topology.segments[lname])
            pos = [seg.index(j) for j in joints]
            D2[:, list(joints)] = d2[lname][:, pos]
        pts_tilde, active_tilde = lift_batch(y2d_virt, D2, c)
        W = rotate_batch(pts_tilde, R, root=root, inverse=True)
        y2d_back = project_batch(W)

        diff2d = y2d[:, nr] - y2d_back[:, nr]
        l_2d_cand = float(np.abs(diff2d).mean())
        diff3d = pts_hat[:, nr] - W[:, nr]
        l_3d_cand = float(np.abs(diff3d).mean())

        # deformation compares pair differences in the original frame
        # (virtual prediction after the inverse rotation), so a perfect
        # lifter scores exactly zero
        n_pairs = n // 2
        if n_pairs:
            m = 2 * n_pairs
            delta = (pts_hat[0:m:2] - pts_hat[1:m:2]) - (W[0:m:2] - W[1:m:2])
            l_def_cand = float((delta ** 2).sum(axis=(1, 2)).mean())
        else:
            delta = None
            l_def_cand = 0.0

        rel, bone_cache = relative_bone_lengths_batch(pts_hat, state.parents, state.children)
        l_b_cand = float(((rel - state.bone_means) ** 2).mean())

        state.per_candidate.append({
            "cand": cand, "D": D, "alpha": alpha,
            "pts_hat": pts_hat, "active_hat": active_hat, "R": R, "V": V,
            "y2d_virt": y2d_virt, "flow_parts": flow_parts,
            "relift_tapes": relift_tapes, "d2": d2, "D2": D2,
            "pts_tilde": pts_tilde, "active_tilde": active_tilde,
            "W": W, "diff2d": diff2d, "diff3d": diff3d,
            "delta": delta, "rel": rel, "bone_cache": bone_cache,
        })
        w = weights[ci]
        l_nf += l_nf_cand * w
        l_2d += l_2d_cand * w
        l_3d += l_3d_cand * w
        l_def += l_def_cand * w
        l_b += l_b_cand * w

    return LossBreakdown(l_nf=l_nf, l_2d=l_2d, l_3d=l_3d, l_def=l_def, l_b=l_b)


def cycle_backward(state, lifters, flows, topology):
    """Gradients of LossBreakdown.total for every lifter parameter.

    Returns {lifter_name: grads aligned with lifter.params()}.
    """
    y2d = state.y2d
    n, k, _ = y2d.shape
    nr, n_nr, root, c = state.nr, state.n_nr, state.root, state.c

    dd_first = {name: np.zeros_like(state.seg_depths[name]) for name in SEGMENT_NAMES}
    de_first = {name: np.zeros_like(state.seg_elevs[name]) for name in SEGMENT_NAMES}
    total_grads = {name: [np.zeros_like(p) for p in lifters[name].params()]
                   for name in SEGMENT_NAMES}

    for ci, entry in enumerate(state.per_candidate):
        cc = state.weights[ci]
        cand = entry["cand"]
        pts_hat, W = entry["pts_hat"], entry["W"]
        pts_tilde, y2d_virt = entry["pts_tilde"], entry["y2d_virt"]
        R, alpha = entry["R"], entry["alpha"]

        dpts_hat = np.zeros_like(pts_hat)
        dpts_tilde = np.zeros_like(pts_tilde)
        dW = np.zeros_like(W)
        dy2d_virt = np.zeros_like(y2d_virt)

        # L_2D: mean absolute deviation over non-root 2D coords
        coeff_2d = cc / (n * n_nr * 2)
        dy2d_back = np.zeros((n, k, 2))
        dy2d_back[:, nr] = -np.sign(entry["diff2d"]) * coeff_2d

        # L_3D
        coeff_3d = cc / (n * n_nr * 3)
        sign3 = np.sign(entry["diff3d"]) * coeff_3d
        dpts_hat[:, nr] += sign3
        dW[:, nr] -= sign3

        # L_def
        if entry["delta"] is not None:
            n_pairs = entry["delta"].shape[0]
            ddelta = entry["delta"] * (2.0 * cc / n_pairs)
            m = 2 * n_pairs
            dpts_hat[0:m:2] += ddelta
            dpts_hat[1:m:2] -= ddelta
            dW[0:m:2] -= ddelta
            dW[1:m:2] += ddelta

        # bone term (weighted inside the total)
        drel = (entry["rel"] - state.bone_means) * (2.0 * BONE_WEIGHT * cc /
                                                    (entry["rel"].shape[1] * n))
        dpts_hat += relative_bone_lengths_batch_bwd(
            entry["bone_cache"], state.parents, state.children, k, drel)

        # project(W) -> y2d_back
        dW += project_batch_bwd(W, dy2d_back)

        # W = rotate^{-1}(pts_tilde)
        dpt, dR_inv = rotate_batch_bwd(pts_tilde, R, dW, root=root, inverse=True)
        dpts_tilde += dpt
        dR = dR_inv

        # pts_tilde = lift(y2d_virt, D2)
        dxy_t, dD2 = lift_batch_bwd(y2d_virt, pts_tilde, entry["active_tilde"], dpts_tilde)
        dy2d_virt += dxy_t

        # re-lift backward per routed lifter
        for lname, joints in cand.routing:
            seg = list(topology.segments[lname])
            pos = [seg.index(j) for j in joints]
            dd2 = np.zeros((n, len(seg)))
            dd2[:, pos] = dD2[:, list(joints)]
            dx2, g2 = lifters[lname].backward(entry["relift_tapes"][lname], dd2,
                                              np.zeros(n))
            for acc, g in zip(total_grads[lname], g2):
                acc += g
            dy2d_virt[:, seg] += dx2.reshape(n, len(seg), 2)

        # flow likelihood backward (flows frozen; input gradient only)
        dlogp = np.full(n, -cc / (len(SEGMENT_NAMES) * n))
        for sname, _logp, z, tapes in entry["flow_parts"]:
            dxs, _ = flows[sname].log_prob_bwd(z, tapes, dlogp, want_param_grads=False)
            seg = list(topology.segments[sname])
            dy2d_virt[:, seg] += dxs.reshape(n, len(seg), 2)

        # y2d_virt = project(V)
        dV = project_batch_bwd(entry["V"], dy2d_virt)

        # V = rotate(pts_hat)
        dph, dR_fwd = rotate_batch_bwd(pts_hat, R, dV, root=root, inverse=False)
        dpts_hat += dph
        dR += dR_fwd

        # elevation gradient through both rotation usages
        dRde = rotation_matrices_delev(state.azimuths, alpha)
        dalpha = (dR * dRde).sum(axis=(1, 2))

        # pts_hat = lift(y2d, D)
        _, dD = lift_batch_bwd(y2d, pts_hat, entry["active_hat"], dpts_hat)

        for lname, joints in cand.routing:
            seg = list(topology.segments[lname])
            pos = [seg.index(j) for j in joints]
            dd_first[lname][:, pos] += dD[:, list(joints)]
        share = 1.0 / len(cand.elevation_from)
        for lname in cand.elevation_from:
            de_first[lname] += dalpha * share

    for name in SEGMENT_NAMES:
        _, g1 = lifters[name].backward(state.first_tapes[name], dd_first[name],
                                       de_first[name])
        for acc, g in zip(total_grads[name], g1):
            acc += g
    return total_grads


def consistency_cycle(y2d, lifters, flows, bone_means, topology,
                      azimuths=None, rng=None, c=CAMERA_DISTANCE,
                      candidate_weights=None):
    """Forward-only convenience wrapper returning the LossBreakdown."""
    breakdown, _ = cycle_forward(y2d, lifters, flows, bone_means, topology,
                                 azimuths=azimuths, rng=rng, c=c,
                                 candidate_weights=candidate_weights)
    return breakdown


# ---------------------------------------------------------------------------
# training


def train_lifters(lifters, y2d_data, seg_flows, full_flow, bone_means, topology,
                  epochs=100, batch_size=256, seed=0, base_lr=nn.BASE_LR,
                  lr_decay=nn.LR_DECAY, sigma=0.2, c=CAMERA_DISTANCE,
                  candidate_weights=None, log=None):
    """Joint unsupervised training of the four lifters.

    Each batch is augmented with perturbed-latent samples from the
    full-pose flow; the Eq.-10 objective is evaluated over all three
    candidates and each lifter is updated by its own Adam state in a fixed
    order. Returns per-epoch trace rows
    (epoch, l_nf, l_2d, l_3d, l_def, l_b, total, skipped).
    """
    data = np.ascontiguousarray(y2d_data, dtype=np.float64)
    n = data.shape[0]
    rng = np.random.default_rng(seed)
    opts = {name: nn.AdamState(lifters[name].params(), base_lr=base_lr, lr_decay=lr_decay)
            for name in SEGMENT_NAMES}
    trace = []
    last_good = None
    flat_full = flatten_nonroot(data, topology)
    for epoch in range(epochs):
        for name in SEGMENT_NAMES:
            opts[name].set_epoch(epoch)
        order = rng.permutation(n)
        sums = np.zeros(6)
        rows_seen = 0
        skipped = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = data[idx]
            if sigma > 0 and full_flow is not None:
                sampled = full_flow.sample_perturbed(flat_full[idx], sigma, rng)
                batch = np.concatenate([batch, unflatten_nonroot(sampled, topology)])
            try:
                breakdown, cstate = cycle_forward(
                    batch, lifters, seg_flows, bone_means, topology, rng=rng, c=c,
                    candidate_weights=candidate_weights)
            except DivergenceError as err:
                raise DivergenceError(
                    f"lifter training diverged at epoch {epoch}", last_good) from err
            if not np.isfinite(breakdown.total):
                raise DivergenceError(
                    f"non-finite lifting loss at epoch {epoch}", last_good)
            grads = cycle_backward(cstate, lifters, seg_flows, topology)
            for name in SEGMENT_NAMES:
                opts[name].step(lifters[name].params(), grads[name])
            nb = len(batch)
            sums += nb * np.array([breakdown.l_nf, breakdown.l_2d, breakdown.l_3d,
                                   breakdown.l_def, breakdown.l_b, breakdown.total])
            rows_seen += nb
            skipped += breakdown.skipped
        means = sums / max(rows_seen, 1)
        trace.append((epoch, *means.tolist(), skipped))
        if log:
            log(epoch, means[5])
        last_good = {name: [p.copy() for p in lifters[name].params()]
                     for name in SEGMENT_NAMES}
    return trace
