"""Kernel backend selection.

Hot numeric kernels exist twice: a numba @njit version and a pure-numpy
reference. The active set is chosen once at import from the LINKS_BACKEND
environment variable ("numba" or "numpy"; default numba when importable)
and can be switched at runtime with :func:`use_backend` — tests and the
benchmark use that to compare paths.
"""

import os

from . import _kernels_numpy
from .errors import ConfigError

_BACKENDS = {"numpy": _kernels_numpy}
_active = _kernels_numpy
_active_name = "numpy"


def _load_numba():
    if "numba" not in _BACKENDS:
        from . import _kernels_numba

        _BACKENDS["numba"] = _kernels_numba
    return _BACKENDS["numba"]


def use_backend(name):
    """Select the kernel implementation; returns the previously active name."""
    global _active, _active_name
    prev = _active_name
    if name == "numpy":
        _active = _kernels_numpy
    elif name == "numba":
        _active = _load_numba()
    else:
        raise ConfigError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")
    _active_name = name
    return prev


def active_backend():
    return _active_name


def backend_module(name):
    """Direct access to one implementation set (benchmark/tests)."""
    if name == "numpy":
        return _kernels_numpy
    if name == "numba":
        return _load_numba()
    raise ConfigError(f"unknown backend {name!r}")


def _init_from_env():
    requested = os.environ.get("LINKS_BACKEND", "").strip().lower()
    if requested:
        use_backend(requested)
        return
    try:
        use_backend("numba")
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
        use_backend("numpy")


def dense_fwd(x, W, b):
    return _active.dense_fwd(x, W, b)


def dense_relu_fwd(x, W, b):
    return _active.dense_relu_fwd(x, W, b)


def dense_bwd(x, W, dy):
    return _active.dense_bwd(x, W, dy)


def dense_bwd_input(W, dy):
    return _active.dense_bwd_input(W, dy)


def relu_bwd(y, dy):
    return _active.relu_bwd(y, dy)


def adam_update(p, g, m, v, step, lr, beta1, beta2, eps):
    return _active.adam_update(p, g, m, v, step, lr, beta1, beta2, eps)


def soft_cap_fwd(raw, cap):
    return _active.soft_cap_fwd(raw, cap)


def soft_cap_bwd(s, cap, ds):
    return _active.soft_cap_bwd(s, cap, ds)


def affine_fwd(xu, s, t):
    return _active.affine_fwd(xu, s, t)


def affine_bwd(xu, exp_s, dzu, dlogdet):
    return _active.affine_bwd(xu, exp_s, dzu, dlogdet)


def affine_inv(zu, s, t):
    return _active.affine_inv(zu, s, t)


def rotate_about(pts, R, root, transpose):
    return _active.rotate_about(pts, R, root, transpose)


def rotate_about_bwd(pts, R, root, transpose, g):
    return _active.rotate_about_bwd(pts, R, root, transpose, g)


_init_from_env()
