"""Numba @njit twins of the reference kernels in ``_kernels_numpy``.

Matrix products go through np.dot (BLAS); the surrounding elementwise
work is fused into the same pass to avoid the temporaries the numpy
expressions allocate. fastmath stays off so both backends agree to
round-off and runs are reproducible.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, fastmath=False)


@njit(**_JIT)
def dense_fwd(x, W, b):
    y = np.dot(x, W.T)
    n, d = y.shape
    for i in range(n):
        for j in range(d):
            y[i, j] += b[j]
    return y


@njit(**_JIT)
def dense_relu_fwd(x, W, b):
    y = np.dot(x, W.T)
    n, d = y.shape
    for i in range(n):
        for j in range(d):
            y[i, j] += b[j]
            if y[i, j] < 0.0:
                y[i, j] = 0.0
    return y


@njit(**_JIT)
def dense_bwd(x, W, dy):
    dW = np.dot(dy.T, x)
    n, d = dy.shape
    db = np.zeros(d)
    for i in range(n):
        for j in range(d):
            db[j] += dy[i, j]
    dx = np.dot(dy, W)
    return dx, dW, db


@njit(**_JIT)
def dense_bwd_input(W, dy):
    return np.dot(dy, W)


@njit(**_JIT)
def relu_bwd(y, dy):
    n, d = y.shape
    out = np.empty((n, d))
    for i in range(n):
        for j in range(d):
            out[i, j] = dy[i, j] if y[i, j] > 0.0 else 0.0
    return out


@njit(**_JIT)
def adam_update(p, g, m, v, step, lr, beta1, beta2, eps):
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for i in range(p.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


@njit(**_JIT)
def soft_cap_fwd(raw, cap):
    n, d = raw.shape
    out = np.empty((n, d))
    for i in range(n):
        for j in range(d):
            out[i, j] = cap * np.tanh(raw[i, j] / cap)
    return out


@njit(**_JIT)
def soft_cap_bwd(s, cap, ds):
    n, d = s.shape
    out = np.empty((n, d))
    for i in range(n):
        for j in range(d):
            r = s[i, j] / cap
            out[i, j] = ds[i, j] * (1.0 - r * r)
    return out


@njit(**_JIT)
def affine_fwd(xu, s, t):
    n, d = xu.shape
    zu = np.empty((n, d))
    exp_s = np.empty((n, d))
    for i in range(n):
        for j in range(d):
            e = np.exp(s[i, j])
            exp_s[i, j] = e
            zu[i, j] = xu[i, j] * e + t[i, j]
    return zu, exp_s


@njit(**_JIT)
def affine_bwd(xu, exp_s, dzu, dlogdet):
    n, d = xu.shape
    dxu = np.empty((n, d))
    ds = np.empty((n, d))
    for i in range(n):
        for j in range(d):
            dxu[i, j] = dzu[i, j] * exp_s[i, j]
            ds[i, j] = dzu[i, j] * xu[i, j] * exp_s[i, j] + dlogdet[i]
    return dxu, ds, dzu


@njit(**_JIT)
def affine_inv(zu, s, t):
    n, d = zu.shape
    xu = np.empty((n, d))
    for i in range(n):
        for j in range(d):
            xu[i, j] = (zu[i, j] - t[i, j]) * np.exp(-s[i, j])
    return xu


@njit(**_JIT)
def rotate_about(pts, R, root, transpose):
    n, k, _ = pts.shape
    out = np.empty((n, k, 3))
    for i in range(n):
        cx = pts[i, root, 0]
        cy = pts[i, root, 1]
        cz = pts[i, root, 2]
        Ri = R[i]
        for j in range(k):
            ux = pts[i, j, 0] - cx
            uy = pts[i, j, 1] - cy
            uz = pts[i, j, 2] - cz
            if transpose:
                vx = Ri[0, 0] * ux + Ri[1, 0] * uy + Ri[2, 0] * uz
                vy = Ri[0, 1] * ux + Ri[1, 1] * uy + Ri[2, 1] * uz
                vz = Ri[0, 2] * ux + Ri[1, 2] * uy + Ri[2, 2] * uz
            else:
                vx = Ri[0, 0] * ux + Ri[0, 1] * uy + Ri[0, 2] * uz
                vy = Ri[1, 0] * ux + Ri[1, 1] * uy + Ri[1, 2] * uz
                vz = Ri[2, 0] * ux + Ri[2, 1] * uy + Ri[2, 2] * uz
            out[i, j, 0] = vx + cx
            out[i, j, 1] = vy + cy
            out[i, j, 2] = vz + cz
    return out


@njit(**_JIT)
def rotate_about_bwd(pts, R, root, transpose, g):
    n, k, _ = pts.shape
    dpts = np.empty((n, k, 3))
    dR = np.zeros((n, 3, 3))
    for i in range(n):
        cx = pts[i, root, 0]
        cy = pts[i, root, 1]
        cz = pts[i, root, 2]
        Ri = R[i]
        gsx = 0.0
        gsy = 0.0
        gsz = 0.0
        dsx = 0.0
        dsy = 0.0
        dsz = 0.0
        for j in range(k):
            gx = g[i, j, 0]
            gy = g[i, j, 1]
            gz = g[i, j, 2]
            if transpose:
                dux = Ri[0, 0] * gx + Ri[0, 1] * gy + Ri[0, 2] * gz
                duy = Ri[1, 0] * gx + Ri[1, 1] * gy + Ri[1, 2] * gz
                duz = Ri[2, 0] * gx + Ri[2, 1] * gy + Ri[2, 2] * gz
            else:
                dux = Ri[0, 0] * gx + Ri[1, 0] * gy + Ri[2, 0] * gz
                duy = Ri[0, 1] * gx + Ri[1, 1] * gy + Ri[2, 1] * gz
                duz = Ri[0, 2] * gx + Ri[1, 2] * gy + Ri[2, 2] * gz
            dpts[i, j, 0] = dux
            dpts[i, j, 1] = duy
            dpts[i, j, 2] = duz
            ux = pts[i, j, 0] - cx
            uy = pts[i, j, 1] - cy
            uz = pts[i, j, 2] - cz
            if transpose:
                dR[i, 0, 0] += ux * gx
                dR[i, 0, 1] += ux * gy
                dR[i, 0, 2] += ux * gz
                dR[i, 1, 0] += uy * gx
                dR[i, 1, 1] += uy * gy
                dR[i, 1, 2] += uy * gz
                dR[i, 2, 0] += uz * gx
                dR[i, 2, 1] += uz * gy
                dR[i, 2, 2] += uz * gz
            else:
                dR[i, 0, 0] += gx * ux
                dR[i, 0, 1] += gx * uy
                dR[i, 0, 2] += gx * uz
                dR[i, 1, 0] += gy * ux
                dR[i, 1, 1] += gy * uy
                dR[i, 1, 2] += gy * uz
                dR[i, 2, 0] += gz * ux
                dR[i, 2, 1] += gz * uy
                dR[i, 2, 2] += gz * uz
            if j != root:
                gsx += gx
                gsy += gy
                gsz += gz
                dsx += dux
                dsy += duy
                dsz += duz
        dpts[i, root, 0] = g[i, root, 0] + gsx - dsx
        dpts[i, root, 1] = g[i, root, 1] + gsy - dsy
        dpts[i, root, 2] = g[i, root, 2] + gsz - dsz
    return dpts, dR
