"""Pose geometry: normalization, perspective lifting, rotations, alignment
and evaluation metrics.

Conventions:
  * 2D poses are (k, 2) arrays in normalized image coordinates, root at
    index 0 sitting at the origin.
  * 3D poses are (k, 3) camera-frame arrays, z positive into the scene.
    A lifted pose has its root at (0, 0, c).
  * Batched variants take (n, k, ...) arrays and carry hand-derived
    backward companions used by the training loops.

All numerics are float64.
"""

import numpy as np

from . import backend as K
from .errors import DataError, DegeneratePoseError

CAMERA_DISTANCE = 10.0

PCK_THRESHOLD = 150.0
AUC_THRESHOLDS = np.arange(0.0, 151.0, 1.0)

METRIC_NAMES = ("mpjpe", "pa-mpjpe", "n-mpjpe", "pck150", "auc")


def as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# normalization


def normalize_pose(raw_2d, c=CAMERA_DISTANCE, root=0, head=9):
    """Root-center and rescale a raw 2D pose so the head sits 1/c from the root.

    Returns (pose, scale) where ``scale`` is the factor the raw coordinates
    were multiplied by; dividing by it undoes the normalization (after
    adding the root back).
    """
    raw = as_f64(raw_2d)
    if raw.ndim != 2 or raw.shape[1] != 2:
        raise DataError(f"expected (k, 2) pose, got {raw.shape}")
    dist = float(np.linalg.norm(raw[head] - raw[root]))
    if dist < 1e-12:
        raise DegeneratePoseError("head coincides with root; cannot normalize")
    scale = (1.0 / c) / dist
    return (raw - raw[root]) * scale, scale


# ---------------------------------------------------------------------------
# perspective lift / projection


def perspective_lift(pose_2d, depth_offsets, c=CAMERA_DISTANCE):
    """Lift a normalized 2D pose to 3D: (x, y) -> (x*z, y*z, z), z = max(1, d + c)."""
    xy = as_f64(pose_2d)
    d = as_f64(depth_offsets)
    pts, _ = lift_batch(xy[None], d[None], c)
    return pts[0]


def project(pose_3d):
    """Perspective projection (X, Y, Z) -> (X/Z, Y/Z). Requires all Z > 0."""
    pts = as_f64(pose_3d)
    if np.any(pts[..., 2] <= 0.0):
        raise DataError("projection undefined: non-positive depth")
    return pts[..., :2] / pts[..., 2:3]


def lift_batch(xy, d, c):
    """Batched lift. xy: (n, k, 2), d: (n, k). Returns (pts, active).

    ``active`` flags joints where the depth clamp z = max(1, d + c) is not
    engaged; the backward pass needs it.
    """
    z = d + c
    active = z > 1.0
    z = np.where(active, z, 1.0)
    pts = np.empty(xy.shape[:2] + (3,))
    pts[..., 0] = xy[..., 0] * z
    pts[..., 1] = xy[..., 1] * z
    pts[..., 2] = z
    return pts, active


def lift_batch_bwd(xy, pts, active, g):
    """Gradients of lift_batch w.r.t. the 2D input and the depth offsets."""
    z = pts[..., 2]
    dxy = np.empty_like(xy)
    dxy[..., 0] = g[..., 0] * z
    dxy[..., 1] = g[..., 1] * z
    dd = g[..., 0] * xy[..., 0] + g[..., 1] * xy[..., 1] + g[..., 2]
    dd *= active
    return dxy, dd


def project_batch(pts):
    return pts[..., :2] / pts[..., 2:3]


def project_batch_bwd(pts, g):
    z = pts[..., 2]
    dpts = np.empty_like(pts)
    dpts[..., 0] = g[..., 0] / z
    dpts[..., 1] = g[..., 1] / z
    dpts[..., 2] = -(g[..., 0] * pts[..., 0] + g[..., 1] * pts[..., 1]) / (z * z)
    return dpts


# ---------------------------------------------------------------------------
# rotations


def rotation_matrices(azimuth, elevation):
    """Batched R = R_elev(elevation) @ R_azim(azimuth).

    Azimuth rotates about the vertical (y) axis, elevation about the
    horizontal (x) axis; both arrays are (n,).
    """
    az = np.asarray(azimuth, dtype=np.float64)
    el = np.asarray(elevation, dtype=np.float64)
    n = az.shape[0]
    ca, sa = np.cos(az), np.sin(az)
    ce, se = np.cos(el), np.sin(el)
    R = np.zeros((n, 3, 3))
    R[:, 0, 0] = ca
    R[:, 0, 2] = sa
    R[:, 1, 0] = se * sa
    R[:, 1, 1] = ce
    R[:, 1, 2] = -se * ca
    R[:, 2, 0] = -ce * sa
    R[:, 2, 1] = se
    R[:, 2, 2] = ce * ca
    return R


def rotation_matrices_delev(azimuth, elevation):
    """d/d(elevation) of rotation_matrices, for backprop into the elevation."""
    az = np.asarray(azimuth, dtype=np.float64)
    el = np.asarray(elevation, dtype=np.float64)
    n = az.shape[0]
    ca, sa = np.cos(az), np.sin(az)
    ce, se = np.cos(el), np.sin(el)
    dR = np.zeros((n, 3, 3))
    dR[:, 1, 0] = ce * sa
    dR[:, 1, 1] = -se
    dR[:, 1, 2] = -ce * ca
    dR[:, 2, 0] = se * sa
    dR[:, 2, 1] = ce
    dR[:, 2, 2] = -se * ca
    return dR


def rotate_pose(pose_3d, azimuth, elevation, inverse=False, root=0):
    """Rotate a 3D pose about its root by R = R_elev @ R_azim (or R^-1)."""
    pts = as_f64(pose_3d)
    R = rotation_matrices(np.array([azimuth]), np.array([elevation]))
    return K.rotate_about(pts[None], R, root, bool(inverse))[0]


def rotate_batch(pts, R, root=0, inverse=False):
    return K.rotate_about(pts, R, root, bool(inverse))


def rotate_batch_bwd(pts, R, g, root=0, inverse=False):
    return K.rotate_about_bwd(pts, R, root, bool(inverse), g)


# ---------------------------------------------------------------------------
# alignment and metrics


def _check_pair(pred, gt):
    p = as_f64(pred)
    g = as_f64(gt)
    if p.shape != g.shape or p.ndim != 2 or p.shape[1] != 3:
        raise DataError(f"pose shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def procrustes_align(pred, target):
    """Align pred to target by the least-squares similarity transform.

    Rotation is constrained to be proper (no reflection). Raises on a
    degenerate (all-coincident) prediction.
    """
    p, q = _check_pair(pred, target)
    mu_p = p.mean(axis=0)
    mu_q = q.mean(axis=0)
    p0 = p - mu_p
    q0 = q - mu_q
    var_p = float(np.sum(p0 * p0))
    if var_p < 1e-24:
        raise DegeneratePoseError("cannot Procrustes-align an all-coincident pose")
    C = q0.T @ p0
    U, S, Vt = np.linalg.svd(C)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    s = float(np.sum(S * np.diag(D))) / var_p
    t = mu_q - s * (R @ mu_p)
    return s * (p @ R.T) + t


def _optimal_l1_scale(pred, gt):
    """Scale minimizing mean_i ||s*pred_i - gt_i|| (convex in s; golden section)."""
    norm_p = np.linalg.norm(pred, axis=1).mean()
    norm_g = np.linalg.norm(gt, axis=1).mean()
    if norm_p < 1e-300:
        return 1.0
    bound = 2.0 * norm_g / norm_p + 1.0

    def f(s):
        return np.linalg.norm(s * pred - gt, axis=1).mean()

    lo, hi = -bound, bound
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(200):
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = f(x2)
    return 0.5 * (lo + hi)


def _joint_distances(pred, gt):
    return np.linalg.norm(pred - gt, axis=-1)


def compute_metrics(pred, gt, protocol):
    """Single-pose metric under one protocol from METRIC_NAMES.

    ``gt`` is expected in millimetres for the threshold-based protocols.
    N-MPJPE applies the error-optimal uniform scale to pred (never worse
    than raw MPJPE); PA-MPJPE applies the full similarity alignment.
    """
    p, g = _check_pair(pred, gt)
    if protocol == "mpjpe":
        return float(_joint_distances(p, g).mean())
    if protocol == "pa-mpjpe":
        return float(_joint_distances(procrustes_align(p, g), g).mean())
    if protocol == "n-mpjpe":
        s = _optimal_l1_scale(p, g)
        return float(_joint_distances(s * p, g).mean())
    if protocol == "pck150":
        return float((_joint_distances(p, g) <= PCK_THRESHOLD).mean())
    if protocol == "auc":
        d = _joint_distances(p, g)
        return float((d[None, :] <= AUC_THRESHOLDS[:, None]).mean())
    raise DataError(f"unknown protocol {protocol!r}; expected one of {METRIC_NAMES}")


def procrustes_align_batch(pred, gt):
    """Vectorized similarity alignment of (n, k, 3) predictions to targets."""
    mu_p = pred.mean(axis=1, keepdims=True)
    mu_q = gt.mean(axis=1, keepdims=True)
    p0 = pred - mu_p
    q0 = gt - mu_q
    var_p = np.sum(p0 * p0, axis=(1, 2))
    if np.any(var_p < 1e-24):
        raise DegeneratePoseError("cannot Procrustes-align an all-coincident pose")
    C = np.einsum("nki,nkj->nij", q0, p0)
    U, S, Vt = np.linalg.svd(C)
    d = np.sign(np.linalg.det(U @ Vt))
    S_fix = S.copy()
    S_fix[:, 2] *= d
    U_fix = U.copy()
    U_fix[:, :, 2] *= d[:, None]
    R = U_fix @ Vt
    s = S_fix.sum(axis=1) / var_p
    return s[:, None, None] * np.einsum("nkj,nij->nki", pred, R) + (
        mu_q - s[:, None, None] * np.einsum("nkj,nij->nki", mu_p, R)
    )


def mpjpe_batch(pred, gt):
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def pa_mpjpe_batch(pred, gt):
    return mpjpe_batch(procrustes_align_batch(pred, gt), gt)


def n_mpjpe_batch(pred, gt):
    out = np.empty(pred.shape[0])
    for i in range(pred.shape[0]):
        s = _optimal_l1_scale(pred[i], gt[i])
        out[i] = _joint_distances(s * pred[i], gt[i]).mean()
    return out


# ---------------------------------------------------------------------------
# bones


def bone_lengths(pose_3d, topology):
    """Relative bone lengths: per-bone Euclidean length over the total."""
    pts = as_f64(pose_3d)
    parents, children = topology.bone_index_arrays()
    v = pts[children] - pts[parents]
    lengths = np.linalg.norm(v, axis=-1)
    total = lengths.sum()
    if total < 1e-12:
        raise DataError("zero total bone length")
    return lengths / total


def bone_lengths_2d(pose_2d, topology):
    """Relative bone lengths of a 2D pose (used for sampled-pose diagnostics)."""
    pts = as_f64(pose_2d)
    parents, children = topology.bone_index_arrays()
    lengths = np.linalg.norm(pts[children] - pts[parents], axis=-1)
    total = lengths.sum()
    if total < 1e-12:
        raise DataError("zero total bone length")
    return lengths / total


def relative_bone_lengths_batch(pts, parents, children):
    """(n, n_bones) relative lengths plus a cache for the backward pass."""
    v = pts[:, children] - pts[:, parents]
    lengths = np.linalg.norm(v, axis=-1)
    total = lengths.sum(axis=1)
    if np.any(total < 1e-12):
        raise DataError("zero total bone length")
    rel = lengths / total[:, None]
    return rel, (v, lengths, total)


def relative_bone_lengths_batch_bwd(cache, parents, children, n_joints, drel):
    """Scatter gradients on relative lengths back to the joint positions."""
    v, lengths, total = cache
    # d rel_b / d length_j = delta_bj / total - length_b / total^2
    dlen = drel / total[:, None]
    dlen -= ((drel * lengths).sum(axis=1) / (total * total))[:, None]
    safe = np.where(lengths > 1e-300, lengths, 1.0)
    dv = (dlen / safe)[:, :, None] * v
    n = v.shape[0]
    dpts = np.zeros((n, n_joints, 3))
    np.add.at(dpts, (slice(None), children), dv)
    np.subtract.at(dpts, (slice(None), parents), dv)
    return dpts
