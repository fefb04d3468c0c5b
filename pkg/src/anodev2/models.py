"""Residual AlexNet, ResNet-4 and ResNet-10 in baseline and coupled-ODE variants."""
import csv
import io
from dataclasses import dataclass, asdict

import numpy as np

from . import layers as L
from .ode import ODEBlock, OdeBlockSchedule

ARCHITECTURES = ("alexnet", "resnet4", "resnet10")
VARIANTS = ("baseline", "anodev2_c1", "anodev2_c2")

# Baseline totals from the parameter-comparison table (1756.68K / 7.71K / 44.19K).
BASELINE_TARGETS = {"alexnet": 1_756_682, "resnet4": 7_706, "resnet10": 44_186}
OVERHEAD_BOUNDS = {"anodev2_c1": 0.067, "anodev2_c2": 0.036}

RDA_INIT = (0.01, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "resnet4"
    variant: str = "baseline"
    precision: str = "float64"
    width: int = 16
    nonlinearity: str = "tanh"
    n_z: int = 0
    n_theta: int = 0
    checkpoint: bool = True
    input_hw: int = 32

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def schedule(self):
        if self.variant == "anodev2_c1":
            return OdeBlockSchedule.config1(self.n_z or 5)
        if self.variant == "anodev2_c2":
            return OdeBlockSchedule.config2(self.n_z or 2, self.n_theta or 10)
        return None

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- modules


class Module:
    def __init__(self, name):
        self.name = name
        self.params = {}
        self.kinds = {}
        self.grads = {}

    def _add(self, key, value, kind):
        full = f"{self.name}.{key}"
        self.params[full] = value
        self.kinds[full] = kind
        return full

    def p(self, key):
        return self.params[f"{self.name}.{key}"]

    def buffers(self):
        return {}


class Conv(Module):
    def __init__(self, name, c_in, c_out, k, stride=1, padding=0, bias=False, dtype=np.float64):
        super().__init__(name)
        self.stride, self.padding, self.has_bias = stride, padding, bias
        self._add("weight", np.zeros((c_out, c_in, k, k), dtype), "weight")
        if bias:
            self._add("bias", np.zeros(c_out, dtype), "bias")

    def forward(self, x, train=True):
        b = self.p("bias") if self.has_bias else None
        out, self._cache = L.conv2d(x, self.p("weight"), b, self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, dw, db = L.conv2d_backward(dout, self._cache)
        self.grads = {f"{self.name}.weight": dw}
        if self.has_bias:
            self.grads[f"{self.name}.bias"] = db
        return dx


class BatchNorm(Module):
    def __init__(self, name, c, dtype=np.float64):
        super().__init__(name)
        self._add("weight", np.ones(c, dtype), "bn")
        self._add("bias", np.zeros(c, dtype), "bn")
        self.state = L.BNState(c, dtype)

    def forward(self, x, train=True):
        out, self._cache = L.batchnorm2d(x, self.p("weight"), self.p("bias"), self.state, train=train)
        return out

    def backward(self, dout):
        dx, dg, db = L.batchnorm2d_backward(dout, self._cache)
        self.grads = {f"{self.name}.weight": dg, f"{self.name}.bias": db}
        return dx

    def buffers(self):
        return {f"{self.name}.running_mean": self.state.mean, f"{self.name}.running_var": self.state.var}


class ReLU(Module):
    def forward(self, x, train=True):
        out, self._cache = L.activation(x, "relu")
        return out

    def backward(self, dout):
        return L.activation_backward(dout, self._cache)


class MaxPool(Module):
    def __init__(self, name, k, stride):
        super().__init__(name)
        self.k, self.stride = k, stride

    def forward(self, x, train=True):
        out, self._cache = L.maxpool2d(x, self.k, self.stride)
        return out

    def backward(self, dout):
        return L.maxpool2d_backward(dout, self._cache)


class Flatten(Module):
    def forward(self, x, train=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Linear(Module):
    def __init__(self, name, n_in, n_out, dtype=np.float64):
        super().__init__(name)
        self._add("weight", np.zeros((n_out, n_in), dtype), "weight")
        self._add("bias", np.zeros(n_out, dtype), "bias")

    def forward(self, x, train=True):
        out, self._cache = L.linear(x, self.p("weight"), self.p("bias"))
        return out

    def backward(self, dout):
        dx, dw, db = L.linear_backward(dout, self._cache)
        self.grads = {f"{self.name}.weight": dw, f"{self.name}.bias": db}
        return dx


class Sequential(Module):
    def __init__(self, name, modules):
        super().__init__(name)
        self.modules = modules
        for m in modules:
            self.params.update(m.params)
            self.kinds.update(m.kinds)

    def forward(self, x, train=True):
        for m in self.modules:
            x = m.forward(x, train)
        return x

    def backward(self, dout):
        self.grads = {}
        for m in reversed(self.modules):
            dout = m.backward(dout)
            self.grads.update(m.grads)
        return dout

    def buffers(self):
        out = {}
        for m in self.modules:
            out.update(m.buffers())
        return out


class ResidualBlock(Module):
    """Discrete residual block: relu(shortcut(z) + f(z)).

    ``kind="resnet"``: f = bn1(conv1(relu(bn0(conv0(z))))), optional stride-2
    first conv with a 1x1 projection + BN shortcut. ``kind="alexnet"``:
    f = bn0(conv0(z) + b).
    """

    def __init__(self, name, c_in, c_out, k, kind="resnet", stride=1, bias=False, dtype=np.float64):
        super().__init__(name)
        pad = k // 2
        if kind == "resnet":
            body = [
                Conv(f"{name}.conv0", c_in, c_out, k, stride, pad, bias, dtype),
                BatchNorm(f"{name}.bn0", c_out, dtype),
                ReLU(f"{name}.relu"),
                Conv(f"{name}.conv1", c_out, c_out, k, 1, pad, bias, dtype),
                BatchNorm(f"{name}.bn1", c_out, dtype),
            ]
        elif kind == "alexnet":
            body = [Conv(f"{name}.conv0", c_in, c_out, k, stride, pad, bias, dtype), BatchNorm(f"{name}.bn0", c_out, dtype)]
        else:
            raise ValueError(f"unknown block kind {kind!r}")
        self.body = Sequential(f"{name}.body", body)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = Sequential(
                f"{name}.shortcut",
                [Conv(f"{name}.shortcut.conv", c_in, c_out, 1, stride, 0, False, dtype),
                 BatchNorm(f"{name}.shortcut.bn", c_out, dtype)],
            )
        for m in (self.body, self.shortcut):
            if m is not None:
                self.params.update(m.params)
                self.kinds.update(m.kinds)

    def forward(self, x, train=True):
        f = self.body.forward(x, train)
        s = self.shortcut.forward(x, train) if self.shortcut else x
        u = s + f
        self._u = u
        return L.relu(u)

    def backward(self, dout):
        gu = dout * (self._u > 0)
        dx = self.body.backward(gu)
        self.grads = dict(self.body.grads)
        if self.shortcut:
            dx = dx + self.shortcut.backward(gu)
            self.grads.update(self.shortcut.grads)
        else:
            dx = gu + dx
        return dx

    def buffers(self):
        out = self.body.buffers()
        if self.shortcut:
            out.update(self.shortcut.buffers())
        return out


class ODEModule(Module):
    """Adapter exposing :class:`ODEBlock` through the Module interface."""

    def __init__(self, block):
        super().__init__(block.name)
        self.block = block
        self.params = block.params
        self.kinds = block.kinds

    def forward(self, x, train=True):
        return self.block.forward(x, train)

    def backward(self, dout):
        dx = self.block.backward(dout)
        self.grads = self.block.grads
        return dx

    def buffers(self):
        out = {}
        for i, states in enumerate(self.block.bn_states):
            for j, st in enumerate(states):
                out[f"{self.name}.bn{i}.{j}.running_mean"] = st.mean
                out[f"{self.name}.bn{i}.{j}.running_var"] = st.var
        return out


# ---------------------------------------------------------------- model


class Model:
    def __init__(self, spec, net):
        self.spec = spec
        self.net = net
        self.params = net.params
        self.kinds = net.kinds
        self.grads = {}

    @property
    def ode_blocks(self):
        return [m.block for m in _walk(self.net) if isinstance(m, ODEModule)]

    def forward(self, x, train=True):
        return self.net.forward(x.astype(self.spec.dtype, copy=False), train)

    def backward(self, dlogits):
        self.net.backward(dlogits)
        self.grads = {k: self.net.grads[k] for k in self.params}
        return self.grads

    def loss_and_grads(self, x, labels, train=True):
        logits = self.forward(x, train)
        loss, dlogits = L.softmax_cross_entropy(logits, labels)
        return loss, self.backward(dlogits)

    def buffers(self):
        return self.net.buffers()

    def state_arrays(self):
        out = dict(self.params)
        out.update(self.buffers())
        return out


def _walk(m):
    yield m
    for child in getattr(m, "modules", []):
        yield from _walk(child)


def _residual(name, c, k, spec, kind, bias, dtype):
    sched = spec.schedule()
    if sched is None:
        return ResidualBlock(name, c, c, k, kind, 1, bias, dtype)
    blk = ODEBlock(name, c, k, sched, kind=kind, nonlinearity=spec.nonlinearity,
                   bias=bias, checkpoint=spec.checkpoint, dtype=dtype)
    return ODEModule(blk)


def build_model(spec, seed=0):
    """Construct and initialize a model.

    ``spec.width`` scales the ResNet channel counts (16 is the published
    size). ``spec.input_hw`` allows smaller images for gradient checks; the
    final pooling window is a quarter of the input side either way.
    """
    if isinstance(spec, dict):
        spec = ModelSpec(**spec)
    dt = spec.dtype
    input_hw = spec.input_hw
    a = spec.architecture
    if a == "alexnet":
        mods = [
            Conv("conv1", 3, 64, 5, 1, 2, True, dt),
            BatchNorm("bn1", 64, dt),
            ReLU("relu1"),
            MaxPool("pool1", 2, 2),
            _residual("conv2", 64, 5, spec, "alexnet", True, dt),
            MaxPool("pool2", 2, 2),
            Flatten("flatten"),
            Linear("fc1", 64 * (input_hw // 4) ** 2, 384, dt),
            ReLU("relu3"),
            Linear("fc2", 384, 192, dt),
            ReLU("relu4"),
            Linear("fc3", 192, 10, dt),
        ]
    else:
        c = spec.width
        mods = [Conv("conv1", 3, c, 3, 1, 1, False, dt), BatchNorm("bn1", c, dt), ReLU("relu1"),
                _residual("layer1_1", c, 3, spec, "resnet", False, dt)]
        pool = input_hw // 4
        final_hw = input_hw
        c_final = c
        if a == "resnet10":
            mods.append(_residual("layer1_2", c, 3, spec, "resnet", False, dt))
            mods.append(ResidualBlock("layer2_1", c, 2 * c, 3, "resnet", 2, False, dt))
            mods.append(_residual("layer2_2", 2 * c, 3, spec, "resnet", False, dt))
            final_hw = input_hw // 2
            c_final = 2 * c
        out_hw = (final_hw - pool) // pool + 1
        mods += [MaxPool("pool", pool, pool), Flatten("flatten"), Linear("fc", c_final * out_hw**2, 10, dt)]
    model = Model(spec, Sequential("net", mods))
    init_params(model, seed)
    return model


def init_params(model, seed=0):
    """He-normal (fan-in) weights, zero biases, BN gamma=1 beta=0, RDA near identity."""
    rng = np.random.default_rng(seed)
    for name in sorted(model.params):
        arr = model.params[name]
        kind = model.kinds[name]
        if kind == "weight":
            fan_in = int(np.prod(arr.shape[1:]))
            arr[...] = rng.standard_normal(arr.shape) * np.sqrt(2.0 / fan_in)
        elif kind == "bias":
            arr[...] = 0
        elif kind == "bn":
            arr[...] = 1 if name.endswith(".weight") else 0
        elif kind == "rda":
            arr[...] = RDA_INIT


# ---------------------------------------------------------------- accounting


@dataclass
class ParamReport:
    counts: dict
    total: int

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["layer", "count"])
        for k, v in self.counts.items():
            wr.writerow([k, v])
        wr.writerow(["total", self.total])
        return buf.getvalue()


def count_parameters(model):
    """Trainable scalars per parameter array (running statistics excluded)."""
    counts = {k: int(v.size) for k, v in model.params.items()}
    return ParamReport(counts, sum(counts.values()))
