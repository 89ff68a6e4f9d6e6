"""Affine-coupling normalizing flows over flattened 2D pose segments.

encode maps data to the standard-Gaussian latent and accumulates the exact
log-determinant (sum of the per-block log-scales); decode is the algebraic
inverse. Scale outputs pass through a bounded soft nonlinearity before
exponentiation so early training cannot blow up; coupling masks alternate
halves with a fixed shuffle between blocks so every dimension is
transformed. Subnet output layers start at zero, making a fresh flow an
exact identity.
"""

import numpy as np

from . import backend as K
from . import nn
from .errors import ConfigError, DivergenceError

N_COUPLING_BLOCKS = 8
SUBNET_WIDTH = 1024
SCALE_CAP = 1.5
DEFAULT_SIGMA = 0.2

LOG_2PI = np.log(2.0 * np.pi)


def _subnet(rng, in_dim, out_dim, width):
    """Two dense layers; final layer zero so the block starts as identity."""
    return nn.MLP([
        nn.Dense.init(rng, in_dim, width, relu=True),
        nn.Dense.init(rng, width, out_dim, zero=True),
    ])


class CouplingBlock:
    """One affine coupling transform: pass-through dims condition the rest."""

    def __init__(self, pass_idx, trans_idx, subnet_s, subnet_t, cap=SCALE_CAP):
        self.pass_idx = np.asarray(pass_idx, dtype=np.int64)
        self.trans_idx = np.asarray(trans_idx, dtype=np.int64)
        self.subnet_s = subnet_s
        self.subnet_t = subnet_t
        self.cap = float(cap)

    @classmethod
    def init(cls, rng, pass_idx, trans_idx, width, cap=SCALE_CAP):
        s = _subnet(rng, len(pass_idx), len(trans_idx), width)
        t = _subnet(rng, len(pass_idx), len(trans_idx), width)
        return cls(pass_idx, trans_idx, s, t, cap)

    @property
    def dim(self):
        return len(self.pass_idx) + len(self.trans_idx)

    def params(self):
        return self.subnet_s.params() + self.subnet_t.params()

    def encode_fwd(self, x):
        xm = np.ascontiguousarray(x[:, self.pass_idx])
        xu = np.ascontiguousarray(x[:, self.trans_idx])
        raw, tape_s = self.subnet_s.forward(xm)
        s = K.soft_cap_fwd(raw, self.cap)
        t, tape_t = self.subnet_t.forward(xm)
        zu, exp_s = K.affine_fwd(xu, s, t)
        z = np.empty_like(x)
        z[:, self.pass_idx] = xm
        z[:, self.trans_idx] = zu
        logdet = s.sum(axis=1)
        return z, logdet, (xu, s, exp_s, tape_s, tape_t)

    def encode_bwd(self, tape, dz, dlogdet, want_param_grads=True):
        xu, s, exp_s, tape_s, tape_t = tape
        dzu = np.ascontiguousarray(dz[:, self.trans_idx])
        dxu, ds, dt = K.affine_bwd(xu, exp_s, dzu, dlogdet)
        draw = K.soft_cap_bwd(s, self.cap, ds)
        dxm_s, gs = self.subnet_s.backward(tape_s, draw, want_param_grads)
        dxm_t, gt = self.subnet_t.backward(tape_t, dt, want_param_grads)
        dx = np.empty_like(dz)
        dx[:, self.pass_idx] = dz[:, self.pass_idx] + dxm_s + dxm_t
        dx[:, self.trans_idx] = dxu
        return dx, gs + gt

    def decode(self, z):
        zm = np.ascontiguousarray(z[:, self.pass_idx])
        zu = np.ascontiguousarray(z[:, self.trans_idx])
        raw, _ = self.subnet_s.forward(zm)
        s = K.soft_cap_fwd(raw, self.cap)
        t, _ = self.subnet_t.forward(zm)
        xu = K.affine_inv(zu, s, t)
        x = np.empty_like(z)
        x[:, self.pass_idx] = zm
        x[:, self.trans_idx] = xu
        return x


class FlowModel:
    """Stack of coupling blocks with fixed inter-block shuffles."""

    def __init__(self, blocks, perms, segment="full", width=SUBNET_WIDTH, cap=SCALE_CAP):
        self.blocks = list(blocks)
        self.perms = [np.asarray(p, dtype=np.int64) for p in perms]
        if len(self.perms) != len(self.blocks) - 1:
            raise ConfigError("need one permutation between each pair of blocks")
        self.segment = segment
        self.width = width
        self.cap = cap

    @classmethod
    def init(cls, rng, dim, segment="full", n_blocks=N_COUPLING_BLOCKS,
             width=SUBNET_WIDTH, cap=SCALE_CAP):
        if dim < 2:
            raise ConfigError("flow needs at least 2 dims")
        split = dim // 2
        first, second = np.arange(split), np.arange(split, dim)
        blocks = []
        for i in range(n_blocks):
            pa, tr = (first, second) if i % 2 == 0 else (second, first)
            blocks.append(CouplingBlock.init(rng, pa, tr, width, cap))
        # fixed shuffles between blocks; the last one undoes their composition
        # so an identity-initialized flow maps x to exactly x
        perms = []
        total = np.arange(dim)
        for _ in range(max(n_blocks - 2, 0)):
            p = rng.permutation(dim)
            perms.append(p)
            total = total[p]
        if n_blocks >= 2:
            perms.append(np.argsort(total))
        return cls(blocks, perms, segment, width, cap)

    @property
    def dim(self):
        return self.blocks[0].dim

    def params(self):
        return [p for blk in self.blocks for p in blk.params()]

    def _check(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ConfigError(f"flow expects (n, {self.dim}) input, got {x.shape}")
        return x, single

    def encode(self, x):
        """Data -> latent. Returns (z, logdet) without the training tape."""
        x, single = self._check(x)
        z, logdet, _ = self.encode_with_tape(x)
        if single:
            return z[0], logdet[0]
        return z, logdet

    def encode_with_tape(self, x):
        logdet = np.zeros(x.shape[0])
        tapes = []
        for i, blk in enumerate(self.blocks):
            x, ld, tape = blk.encode_fwd(x)
            logdet += ld
            tapes.append(tape)
            if i < len(self.perms):
                x = np.ascontiguousarray(x[:, self.perms[i]])
        return x, logdet, tapes

    def encode_bwd(self, tapes, dz, dlogdet, want_param_grads=True):
        grads = []
        for i in range(len(self.blocks) - 1, -1, -1):
            if i < len(self.perms):
                dy = np.empty_like(dz)
                dy[:, self.perms[i]] = dz
                dz = dy
            dz, g = self.blocks[i].encode_bwd(tapes[i], dz, dlogdet, want_param_grads)
            grads = g + grads
        return dz, grads

    def decode(self, z):
        """Latent -> data; exact inverse of encode."""
        z, single = self._check(z)
        for i in range(len(self.blocks) - 1, -1, -1):
            if i < len(self.perms):
                y = np.empty_like(z)
                y[:, self.perms[i]] = z
                z = y
            z = self.blocks[i].decode(z)
        return z[0] if single else z

    def log_prob(self, x):
        """Exact log density under the standard-Gaussian latent."""
        x, single = self._check(x)
        logp, _, _ = self.log_prob_with_tape(x)
        if not np.all(np.isfinite(logp)):
            raise DivergenceError("non-finite log-probability")
        return logp[0] if single else logp

    def log_prob_with_tape(self, x):
        z, logdet, tapes = self.encode_with_tape(x)
        with np.errstate(over="ignore", invalid="ignore"):  # -> -inf, caught upstream
            logp = -0.5 * (z * z).sum(axis=1) - 0.5 * self.dim * LOG_2PI + logdet
        return logp, z, tapes

    def log_prob_bwd(self, z, tapes, dlogp, want_param_grads=True):
        dz = -dlogp[:, None] * z
        return self.encode_bwd(tapes, dz, dlogp, want_param_grads)

    def sample_perturbed(self, x, sigma, rng):
        """Latent-space perturbation: decode(z + sigma * z * eps), eps ~ N(0, 1)."""
        if sigma < 0:
            raise ConfigError("sigma must be non-negative")
        x, single = self._check(x)
        z, _, _ = self.encode_with_tape(x)
        eps = rng.standard_normal(z.shape)
        out = self.decode(z + sigma * z * eps)
        return out[0] if single else out

    def architecture(self):
        return {
            "dim": int(self.dim),
            "segment": self.segment,
            "n_blocks": len(self.blocks),
            "width": int(self.width),
            "scale_cap": float(self.cap),
            "pass_idx": [blk.pass_idx.tolist() for blk in self.blocks],
            "perms": [p.tolist() for p in self.perms],
        }

    @classmethod
    def from_architecture(cls, arch):
        dim = arch["dim"]
        rng = np.random.default_rng(0)  # placeholder weights, overwritten by caller
        blocks = []
        for pass_list in arch["pass_idx"]:
            pa = np.asarray(pass_list, dtype=np.int64)
            tr = np.asarray([i for i in range(dim) if i not in set(pass_list)], dtype=np.int64)
            blocks.append(CouplingBlock.init(rng, pa, tr, arch["width"], arch["scale_cap"]))
        return cls(blocks, arch["perms"], arch["segment"], arch["width"], arch["scale_cap"])


# ---------------------------------------------------------------------------
# training


def nll_loss_and_grads(flow, rows, n_real, want_param_grads=True):
    """Eq.-style joint NLL: -(1/n_real) * sum(log p(row)). Returns loss, grads."""
    logp, z, tapes = flow.log_prob_with_tape(rows)
    loss = -logp.sum() / n_real
    dlogp = np.full(rows.shape[0], -1.0 / n_real)
    _, grads = flow.log_prob_bwd(z, tapes, dlogp, want_param_grads)
    return loss, grads


def train_flow(flow, segment_data, full_data=None, full_flow=None, segment_cols=None,
               epochs=100, batch_size=256, seed=0, base_lr=nn.BASE_LR,
               lr_decay=nn.LR_DECAY, sigma=DEFAULT_SIGMA, log=None):
    """Train a flow on ground-truth segments plus perturbed-latent samples.

    The four segment flows draw their sampled poses from the trained
    full-pose flow (``full_flow``/``full_data``; samples are sliced with
    ``segment_cols``); the full-pose flow samples from itself. Returns the
    per-epoch mean NLL trace; the model is updated in place.
    """
    data = np.ascontiguousarray(segment_data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != flow.dim:
        raise ConfigError(f"training data shape {data.shape} does not match flow dim {flow.dim}")
    if full_flow is None:
        sample_flow, sample_data = flow, data
        cols = np.arange(flow.dim)
    else:
        if full_data is None or segment_cols is None:
            raise ConfigError("segment flows need full_data and segment_cols for sampling")
        sample_flow = full_flow
        sample_data = np.ascontiguousarray(full_data, dtype=np.float64)
        cols = np.asarray(segment_cols, dtype=np.int64)

    rng = np.random.default_rng(seed)
    params = flow.params()
    opt = nn.AdamState(params, base_lr=base_lr, lr_decay=lr_decay)
    trace = []
    n = data.shape[0]
    for epoch in range(epochs):
        opt.set_epoch(epoch)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            real = data[idx]
            if sigma > 0:
                sampled = sample_flow.sample_perturbed(sample_data[idx], sigma, rng)
                rows = np.vstack([real, np.ascontiguousarray(sampled[:, cols])])
            else:
                rows = real
            loss, grads = nll_loss_and_grads(flow, rows, len(idx))
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"flow NLL diverged at epoch {epoch}", last_good=None)
            opt.step(params, grads)
            epoch_loss += loss * len(idx)
        trace.append((epoch, epoch_loss / n))
        if log:
            log(epoch, epoch_loss / n)
    return trace
