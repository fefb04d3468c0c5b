"""Residual blocks whose activations and convolution weights both evolve in time.

Activations take forward-Euler steps on [0, 1]; each convolution kernel of the
block is evolved by the RDA operator in :mod:`anodev2.spectral` and snapshots
of that trajectory feed the Euler steps. Backward is reverse-mode through the
exact discrete forward (discretize-then-optimize); by default only the block
input is kept and the interior is recomputed during backward.
"""
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .spectral import rda_trajectory, rda_trajectory_backward


@dataclass(frozen=True)
class OdeBlockSchedule:
    config: int
    n_z: int
    n_theta: int
    applied_indices: tuple = ()

    def __post_init__(self):
        if self.config not in (1, 2):
            raise ValueError(f"config must be 1 or 2, got {self.config}")
        if self.n_z < 1 or self.n_theta < 1:
            raise ValueError("n_z and n_theta must be >= 1")
        if not self.applied_indices:
            object.__setattr__(self, "applied_indices", self._default_indices())
        idx = tuple(self.applied_indices)
        object.__setattr__(self, "applied_indices", idx)
        if len(idx) != self.n_z:
            raise ValueError(f"need one applied index per z-step, got {len(idx)} for n_z={self.n_z}")
        if any(i < 0 or i > self.n_theta for i in idx):
            raise ValueError(f"applied indices {idx} outside trajectory 0..{self.n_theta}")
        if self.config == 1 and (self.n_theta != self.n_z or idx != tuple(range(self.n_z))):
            raise ValueError("configuration 1 needs n_theta == n_z and indices 0..n_z-1")

    def _default_indices(self):
        if self.config == 1:
            return tuple(range(self.n_z))
        if self.n_z == 1:
            return (0,)
        if self.n_theta % (self.n_z - 1):
            raise ValueError(f"n_theta={self.n_theta} not divisible into {self.n_z - 1} z-intervals")
        stride = self.n_theta // (self.n_z - 1)
        return tuple(j * stride for j in range(self.n_z))

    @classmethod
    def config1(cls, n=5):
        return cls(1, n, n)

    @classmethod
    def config2(cls, n_z=2, n_theta=10):
        return cls(2, n_z, n_theta)

    @classmethod
    def single_step(cls):
        return cls(1, 1, 1)


# f(z; theta) layouts. Each entry is (op, index); convs index the evolved kernels,
# bns index per-step batch-norm layers.
FIELD_LAYOUTS = {
    "resnet": (("conv", 0), ("bn", 0), ("relu", None), ("conv", 1), ("bn", 1)),
    "alexnet": (("conv", 0), ("bn", 0)),
    "conv": (("conv", 0),),
}


@dataclass
class BlockTape:
    """What a forward pass leaves behind for the backward pass."""

    z0: np.ndarray
    thetas: list
    rda_caches: list
    train: bool
    step_caches: list = None
    stored_activations: int = 0
    extra: dict = field(default_factory=dict)


class ODEBlock:
    """Coupled activation/weight ODE block.

    Parameters are registered in ``self.params`` under ``name``-prefixed keys:
    ``conv{i}.weight`` (initial kernels w0), ``conv{i}.rda`` (d, vx, vy, rho),
    optional ``conv{i}.bias`` and per-step ``bn{i}.weight``/``bn{i}.bias`` of
    shape (n_z, channels).
    """

    def __init__(self, name, channels, kernel_size, schedule, kind="resnet",
                 nonlinearity="tanh", post="relu", bias=False, checkpoint=True,
                 dtype=np.float64):
        if kind not in FIELD_LAYOUTS:
            raise ValueError(f"unknown block kind {kind!r}")
        self.name = name
        self.channels = channels
        self.kernel_size = kernel_size
        self.schedule = schedule
        self.kind = kind
        self.layout = FIELD_LAYOUTS[kind]
        self.nonlinearity = nonlinearity
        self.post = post
        self.checkpoint = checkpoint
        self.pad = kernel_size // 2
        n_conv = sum(op == "conv" for op, _ in self.layout)
        n_bn = sum(op == "bn" for op, _ in self.layout)
        c, k, n_z = channels, kernel_size, schedule.n_z
        self.params = {}
        self.kinds = {}
        for i in range(n_conv):
            self._add(f"conv{i}.weight", np.zeros((c, c, k, k), dtype), "weight")
            self._add(f"conv{i}.rda", np.zeros(4, dtype), "rda")
            if bias:
                self._add(f"conv{i}.bias", np.zeros(c, dtype), "bias")
        for i in range(n_bn):
            self._add(f"bn{i}.weight", np.ones((n_z, c), dtype), "bn")
            self._add(f"bn{i}.bias", np.zeros((n_z, c), dtype), "bn")
        self.n_conv, self.n_bn, self.has_bias = n_conv, n_bn, bias
        self.bn_states = [[L.BNState(c, dtype) for _ in range(n_z)] for _ in range(n_bn)]
        self.grads = {}
        self._tape = None

    def _add(self, key, value, kind):
        self.params[f"{self.name}.{key}"] = value
        self.kinds[f"{self.name}.{key}"] = kind

    def p(self, key):
        return self.params[f"{self.name}.{key}"]

    # ------------------------------------------------------------ f(z; theta)

    def field(self, z, kernels, step, train, update_stats):
        cache = []
        x = z
        for op, i in self.layout:
            if op == "conv":
                b = self.p(f"conv{i}.bias") if self.has_bias else None
                x, c = L.conv2d(x, kernels[i], b, 1, self.pad)
            elif op == "bn":
                x, c = L.batchnorm2d(
                    x, self.p(f"bn{i}.weight")[step], self.p(f"bn{i}.bias")[step],
                    self.bn_states[i][step], train=train, update=update_stats,
                )
            else:
                x, c = L.activation(x, "relu")
            cache.append(c)
        return x, cache

    def field_backward(self, df, cache, step, grads):
        """Backprop through f; returns (dz, dkernels) and adds static grads."""
        dk = [None] * self.n_conv
        g = df
        for (op, i), c in zip(reversed(self.layout), reversed(cache)):
            if op == "conv":
                g, dw, db = L.conv2d_backward(g, c)
                dk[i] = dw
                if db is not None:
                    grads[f"{self.name}.conv{i}.bias"] += db
            elif op == "bn":
                g, dgam, dbet = L.batchnorm2d_backward(g, c)
                grads[f"{self.name}.bn{i}.weight"][step] += dgam
                grads[f"{self.name}.bn{i}.bias"][step] += dbet
            else:
                g = L.activation_backward(g, c)
        return g, dk

    # ------------------------------------------------------------ time stepping

    def _evolve(self):
        s = self.schedule
        thetas, caches = [], []
        for i in range(self.n_conv):
            n_theta = max(s.applied_indices) if s.config == 1 else s.n_theta
            if n_theta == 0:
                traj = self.p(f"conv{i}.weight")[None].copy()
                cache = []
            else:
                # config 1 uses snapshots 0..n-1 on a grid of width 1/n
                horizon = n_theta / s.n_theta
                traj, cache = rda_trajectory(
                    self.p(f"conv{i}.weight"), self.p(f"conv{i}.rda"), n_theta,
                    self.nonlinearity, horizon=horizon, return_caches=True,
                )
            thetas.append(traj)
            caches.append(cache)
        return thetas, caches

    def _run_steps(self, z0, thetas, train, store, update_stats):
        s = self.schedule
        h = 1.0 / s.n_z
        z = z0
        caches = [] if store else None
        for j, a in enumerate(s.applied_indices):
            kernels = [t[a] for t in thetas]
            f, fc = self.field(z, kernels, j, train, update_stats)
            u = z + h * f
            z = L.relu(u) if self.post == "relu" else u
            if store:
                caches.append((fc, u))
        return z, caches

    def forward(self, z0, train=True):
        if z0.ndim != 4 or z0.shape[1] != self.channels:
            raise L.ShapeError(
                f"{self.name}: expected input with {self.channels} channels, got shape {z0.shape}"
            )
        thetas, rda_caches = self._evolve()
        store = not self.checkpoint
        z1, caches = self._run_steps(z0, thetas, train, store, update_stats=train)
        tape = BlockTape(z0=z0, thetas=thetas, rda_caches=rda_caches, train=train)
        if store:
            tape.step_caches = caches
            # per step: every cached tensor of f plus the pre-activation u
            tape.stored_activations = 1 + sum(len(fc) + 1 for fc, _ in caches)
        else:
            tape.stored_activations = 1
        self._tape = tape
        return z1

    def backward(self, grad_z1, tape=None):
        """Returns grad w.r.t. the block input; parameter grads go to ``self.grads``."""
        tape = tape or self._tape
        if tape is None:
            raise RuntimeError(f"{self.name}: backward called without a forward")
        if grad_z1.shape != tape.z0.shape:
            raise L.ShapeError(f"{self.name}: gradient shape {grad_z1.shape} != output {tape.z0.shape}")
        caches = tape.step_caches
        if caches is None:
            _, caches = self._run_steps(tape.z0, tape.thetas, tape.train, True, update_stats=False)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        grad_traj = [np.zeros_like(t) for t in tape.thetas]
        h = 1.0 / self.schedule.n_z
        g = grad_z1
        for j in range(self.schedule.n_z - 1, -1, -1):
            fc, u = caches[j]
            gu = g * (u > 0) if self.post == "relu" else g
            dz, dk = self.field_backward(h * gu, fc, j, grads)
            g = gu + dz
            a = self.schedule.applied_indices[j]
            for i in range(self.n_conv):
                grad_traj[i][a] += dk[i]
        for i in range(self.n_conv):
            if tape.rda_caches[i]:
                gw, gp = rda_trajectory_backward(grad_traj[i], tape.rda_caches[i])
            else:
                gw, gp = grad_traj[i][0], np.zeros(4)
            grads[f"{self.name}.conv{i}.weight"] += gw
            grads[f"{self.name}.conv{i}.rda"] += gp
        self.grads = grads
        return g

    # ------------------------------------------------------------ accounting

    def forward_flops(self, z_shape):
        """Approximate forward FLOPs for one batch of shape ``z_shape``."""
        n, c, hh, ww = z_shape
        k = self.kernel_size
        elems = n * c * hh * ww
        per_f = 0
        for op, _ in self.layout:
            if op == "conv":
                per_f += 2 * elems * c * k * k
            elif op == "bn":
                per_f += 4 * elems
            else:
                per_f += elems
        steps = self.schedule.n_z * (per_f + 3 * elems)
        s = self.schedule
        n_theta = max(s.applied_indices) if s.config == 1 else s.n_theta
        # direct DFT: two k x k complex matmuls each way, 8 flops per complex MAC
        per_slice = 2 * 2 * 8 * k**3 + 8 * k * k
        rda = self.n_conv * n_theta * c * c * per_slice
        return steps + rda


def residual_forward_flops(channels, kernel_size, z_shape, kind="resnet"):
    """FLOPs of the matching single-step baseline block (no weight evolution)."""
    blk = ODEBlock("tmp", channels, kernel_size, OdeBlockSchedule.single_step(), kind=kind)
    return blk.forward_flops(z_shape)
