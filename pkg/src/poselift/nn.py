"""Minimal dense-network substrate with hand-derived reverse-mode gradients.

Modules follow one convention:

  forward(x)  -> (y, tape)          tape caches what backward needs
  backward(tape, dy, want_param_grads=True) -> (dx, grads)

``grads`` aligns with ``params()`` (a flat list of the module's arrays,
weights before biases, in layer order). There is no graph engine; each
composite module spells out its own chain rule, and the finite-difference
suite keeps everything honest.
"""

import json

import numpy as np

from . import backend as K
from .errors import ConfigError, DivergenceError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BASE_LR = 2e-4
LR_DECAY = 0.95

INIT_SCHEME = "kaiming-uniform-fan-in"


def kaiming_uniform(rng, out_dim, in_dim):
    bound = np.sqrt(6.0 / in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


class Dense:
    """y = x @ W.T + b with optional fused rectified-linear activation."""

    def __init__(self, W, b, relu=False):
        self.W = np.ascontiguousarray(W, dtype=np.float64)
        self.b = np.ascontiguousarray(b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ConfigError(f"bad dense shapes W={self.W.shape} b={self.b.shape}")
        self.relu = relu

    @classmethod
    def init(cls, rng, in_dim, out_dim, relu=False, zero=False):
        if zero:
            W = np.zeros((out_dim, in_dim))
        else:
            W = kaiming_uniform(rng, out_dim, in_dim)
        return cls(W, np.zeros(out_dim), relu=relu)

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigError(f"dense expected (n, {self.in_dim}) input, got {x.shape}")
        if self.relu:
            y = K.dense_relu_fwd(x, self.W, self.b)
        else:
            y = K.dense_fwd(x, self.W, self.b)
        return y, (x, y)

    def backward(self, tape, dy, want_param_grads=True):
        x, y = tape
        if dy.shape != y.shape or x.shape[1] != self.in_dim or y.shape[1] != self.out_dim:
            raise ConfigError("backward tape does not match this layer")
        dpre = K.relu_bwd(y, dy) if self.relu else dy
        if want_param_grads:
            dx, dW, db = K.dense_bwd(x, self.W, dpre)
            return dx, [dW, db]
        return K.dense_bwd_input(self.W, dpre), []


class MLP:
    """Plain stack of Dense layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        tapes = []
        for layer in self.layers:
            x, tape = layer.forward(x)
            tapes.append(tape)
        return x, tapes

    def backward(self, tapes, dy, want_param_grads=True):
        grads = []
        for layer, tape in zip(reversed(self.layers), reversed(tapes)):
            dy, g = layer.backward(tape, dy, want_param_grads)
            grads = g + grads
        return dy, grads


class ResidualBlock:
    """x + relu(fc2(relu(fc1(x)))) with both layers at the same width."""

    def __init__(self, fc1, fc2):
        if fc1.in_dim != fc1.out_dim or fc2.in_dim != fc2.out_dim or fc1.in_dim != fc2.in_dim:
            raise ConfigError("residual block layers must share one width")
        self.fc1 = fc1
        self.fc2 = fc2

    @classmethod
    def init(cls, rng, width):
        return cls(
            Dense.init(rng, width, width, relu=True),
            Dense.init(rng, width, width, relu=True),
        )

    @property
    def width(self):
        return self.fc1.in_dim

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def forward(self, x):
        h1, t1 = self.fc1.forward(x)
        h2, t2 = self.fc2.forward(h1)
        return x + h2, (t1, t2)

    def backward(self, tape, dy, want_param_grads=True):
        t1, t2 = tape
        dh1, g2 = self.fc2.backward(t2, dy, want_param_grads)
        dx, g1 = self.fc1.backward(t1, dh1, want_param_grads)
        return dy + dx, g1 + g2


class ResidualStack:
    """Dense embed followed by residual blocks; shared building block of the
    lifters and occlusion networks."""

    def __init__(self, embed, blocks):
        self.embed = embed
        self.blocks = list(blocks)

    @classmethod
    def init(cls, rng, in_dim, width, n_blocks):
        embed = Dense.init(rng, in_dim, width, relu=True)
        return cls(embed, [ResidualBlock.init(rng, width) for _ in range(n_blocks)])

    def params(self):
        out = self.embed.params()
        for blk in self.blocks:
            out += blk.params()
        return out

    def forward(self, x):
        h, t0 = self.embed.forward(x)
        tapes = [t0]
        for blk in self.blocks:
            h, t = blk.forward(h)
            tapes.append(t)
        return h, tapes

    def backward(self, tapes, dy, want_param_grads=True):
        grads = []
        for blk, tape in zip(reversed(self.blocks), reversed(tapes[1:])):
            dy, g = blk.backward(tape, dy, want_param_grads)
            grads = g + grads
        dx, g0 = self.embed.backward(tapes[0], dy, want_param_grads)
        return dx, g0 + grads


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Adam with bias correction and a per-epoch exponential lr decay.

    An all-zero gradient array leaves its parameter and moments untouched,
    so a zero gradient is a strict no-op regardless of accumulated state.
    """

    def __init__(self, params, base_lr=BASE_LR, beta1=ADAM_BETA1, beta2=ADAM_BETA2,
                 eps=ADAM_EPS, lr_decay=LR_DECAY):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0
        self.epoch = 0
        self.base_lr = base_lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_decay = lr_decay

    @property
    def lr(self):
        return self.base_lr * self.lr_decay ** self.epoch

    def set_epoch(self, epoch):
        self.epoch = int(epoch)

    def step(self, params, grads):
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ConfigError("optimizer state does not match the parameter list")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient; training aborted")
        self.step_count += 1
        lr = self.lr
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not g.any():
                continue
            K.adam_update(p.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                          m.reshape(-1), v.reshape(-1), self.step_count,
                          lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind, architecture, params, rng_seed=None, extra=None):
    """Versioned JSON checkpoint; float repr round-trips bit-exactly."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "architecture": architecture,
        "init_scheme": INIT_SCHEME,
        "rng_seed": rng_seed,
        "params": [p.tolist() for p in params],
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path, expect_kind=None):
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version!r} in {path}")
    if expect_kind is not None and payload.get("kind") != expect_kind:
        raise ConfigError(
            f"expected a {expect_kind!r} checkpoint, found {payload.get('kind')!r} in {path}"
        )
    payload["params"] = [np.asarray(p, dtype=np.float64) for p in payload["params"]]
    return payload


def assign_params(params, values):
    """Copy checkpoint arrays into live parameter storage, validating shapes."""
    if len(params) != len(values):
        raise ConfigError(f"checkpoint has {len(values)} arrays, model expects {len(params)}")
    for p, v in zip(params, values):
        if p.shape != v.shape:
            raise ConfigError(f"checkpoint array shape {v.shape} != model shape {p.shape}")
        p[...] = v
