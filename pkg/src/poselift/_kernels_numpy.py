"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in ``_kernels_numba``; the backend
dispatcher picks one set at runtime. Keep the floating-point operation
order identical between the twins so the two paths agree to round-off.

All arrays are float64. ``x`` batches are (n, d); dense weights are
(out, in) so a layer computes ``x @ W.T + b``.
"""

import numpy as np


def dense_fwd(x, W, b):
    return x @ W.T + b


def dense_relu_fwd(x, W, b):
    y = x @ W.T + b
    np.maximum(y, 0.0, out=y)
    return y


def dense_bwd(x, W, dy):
    """Returns (dx, dW, db) for y = x @ W.T + b."""
    dW = dy.T @ x
    db = dy.sum(axis=0)
    dx = dy @ W
    return dx, dW, db


def dense_bwd_input(W, dy):
    """Input gradient only; used when the layer's parameters are frozen."""
    return dy @ W


def relu_bwd(y, dy):
    """dpre for y = relu(pre), using y > 0 as the active mask."""
    return dy * (y > 0.0)


def adam_update(p, g, m, v, step, lr, beta1, beta2, eps):
    """In-place Adam update on 1-D views; ``step`` is the post-increment count."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def soft_cap_fwd(raw, cap):
    """Bounded log-scale: cap * tanh(raw / cap); identity near zero."""
    return cap * np.tanh(raw / cap)


def soft_cap_bwd(s, cap, ds):
    return ds * (1.0 - (s / cap) ** 2)


def affine_fwd(xu, s, t):
    """Coupling transform zu = xu * exp(s) + t. Returns (zu, exp_s)."""
    exp_s = np.exp(s)
    return xu * exp_s + t, exp_s


def affine_bwd(xu, exp_s, dzu, dlogdet):
    """Gradients of zu = xu*exp(s) + t with per-row logdet coefficient added to ds."""
    dxu = dzu * exp_s
    ds = dzu * xu * exp_s + dlogdet[:, None]
    return dxu, ds, dzu


def affine_inv(zu, s, t):
    return (zu - t) * np.exp(-s)


def rotate_about(pts, R, root, transpose):
    """Rotate each pose about its root joint.

    pts: (n, k, 3) row-vector points; R: (n, 3, 3) column-vector rotation
    matrices. transpose=True applies the inverse rotation R^T.
    """
    ctr = pts[:, root:root + 1, :]
    u = pts - ctr
    if transpose:
        out = np.einsum("nkj,nji->nki", u, R)
    else:
        out = np.einsum("nkj,nij->nki", u, R)
    out += ctr
    return out


def rotate_about_bwd(pts, R, root, transpose, g):
    """Returns (dpts, dR) for rotate_about; accounts for the root-centering."""
    ctr = pts[:, root:root + 1, :]
    u = pts - ctr
    if transpose:
        du = np.einsum("nki,nji->nkj", g, R)
        dR = np.einsum("nki,nkj->nji", g, u)
    else:
        du = np.einsum("nki,nij->nkj", g, R)
        dR = np.einsum("nki,nkj->nij", g, u)
    dpts = du.copy()
    g_sum = g.sum(axis=1) - g[:, root]
    du_sum = du.sum(axis=1) - du[:, root]
    dpts[:, root] = g[:, root] + g_sum - du_sum
    return dpts, dR
