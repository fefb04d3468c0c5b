"""Gradient comparisons used by the CLI and the acceptance tests."""
import numpy as np

from .adjoint import (compare_gradients, finite_difference_gradient, scalar_growth_closed_form,
                      scalar_growth_system, solve_kkt)
from .layers import record_switches, softmax_cross_entropy
from .models import ModelSpec, build_model
from .ode import ODEBlock, OdeBlockSchedule

SCALAR_RHO = float(np.log(2.0))
SCALAR_TOL = 1e-3
MODEL_TOL = 1e-5


# ---------------------------------------------------------------- scalar system


def scalar_block(n, rho=SCALAR_RHO, w0=1.0):
    """The scalar system dz/dt = theta*z, dw/dt = rho*w as a 1x1x1x1 ODE block."""
    blk = ODEBlock("s", 1, 1, OdeBlockSchedule.config1(n), kind="conv",
                   nonlinearity="identity", post="identity")
    blk.p("conv0.weight")[...] = w0
    blk.p("conv0.rda")[:] = (0.0, 0.0, 0.0, rho)
    return blk


def scalar_dto(n, rho=SCALAR_RHO, w0=1.0, z0=1.0):
    """(z1, dJ/dw0, dJ/drho) by reverse mode through the discrete block."""
    blk = scalar_block(n, rho, w0)
    z1 = blk.forward(np.full((1, 1, 1, 1), z0), train=True)
    blk.backward(np.ones_like(z1))
    g = blk.grads
    return float(z1.ravel()[0]), float(g["s.conv0.weight"].ravel()[0]), float(g["s.conv0.rda"][3])


def scalar_kkt(n, rho=SCALAR_RHO, w0=1.0, z0=1.0):
    g_w0, g_p = solve_kkt(scalar_growth_system(), [z0], [w0], [rho], n)
    return float(g_w0[0]), float(g_p[0])


def scalar_fd(eps=1e-5, rho=SCALAR_RHO, w0=1.0, z0=1.0):
    """Central differences of the exact objective z(1) in (w0, rho)."""
    with np.errstate(over="ignore", invalid="ignore"):
        return finite_difference_gradient(
            lambda v: scalar_growth_closed_form(v[1], w0=v[0], z0=z0)[0], [w0, rho], eps
        )


def scalar_system_report(nt=512, nkkt=4096, eps=1e-5):
    _, dw, dr = scalar_dto(nt)
    report = compare_gradients([dw, dr], scalar_kkt(nkkt), scalar_fd(eps))
    return report, SCALAR_TOL


# ---------------------------------------------------------------- tiny ResNet-4


def tiny_resnet4(config=1, nt=None, ntheta=None, seed=1):
    """Width-4 ResNet-4 on 8x8 inputs with non-trivial RDA and BN parameters."""
    variant = {1: "anodev2_c1", 2: "anodev2_c2", 0: "baseline"}[config]
    spec = ModelSpec("resnet4", variant, width=4, input_hw=8, n_z=nt or 0, n_theta=ntheta or 0)
    model = build_model(spec, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for k, v in model.params.items():
        if model.kinds[k] == "rda":
            v[:] = (0.05, 0.3, -0.2, 0.1)
        elif model.kinds[k] == "bn":
            v += 0.1 * rng.standard_normal(v.shape)
    data_rng = np.random.default_rng(seed)
    x = data_rng.standard_normal((3, 3, 8, 8))
    y = np.array([1, 4, 7])
    return model, x, y


def _same_switches(a, b):
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def model_fd_report(model, x, y, eps=1e-5, tol=MODEL_TOL):
    """DTO vs central differences over every parameter of ``model``.

    A coordinate is marked invalid when its +-eps stencil flips a ReLU or a
    max-pool winner (the loss is not differentiable across that interval), or
    when the gradient is so small that one ulp of the loss divided by eps
    already exceeds ``tol`` of it.
    """
    names = list(model.params)
    with record_switches() as base:
        loss0, dlogits = softmax_cross_entropy(model.forward(x, train=True), y)
    grads = model.backward(dlogits)
    dto = np.concatenate([grads[k].ravel() for k in names])
    flat = np.concatenate([model.params[k].ravel() for k in names])
    crossed = []

    def assign(v):
        off = 0
        for k in names:
            a = model.params[k]
            a[...] = v[off:off + a.size].reshape(a.shape)
            off += a.size

    def loss(v):
        assign(v)
        with record_switches() as log:
            out = softmax_cross_entropy(model.forward(x, train=True), y)[0]
        crossed.append(not _same_switches(base, log))
        return out

    try:
        fd = finite_difference_gradient(loss, flat, eps)
    finally:
        assign(flat)
    kink = np.array(crossed).reshape(-1, 2).any(axis=1)
    floor = 4 * np.spacing(abs(loss0)) / (eps * tol)
    tiny = np.maximum(np.abs(dto), np.abs(fd)) < floor
    report = compare_gradients(dto, None, fd)
    report.valid = ~(kink | tiny)
    return report


def tiny_resnet4_report(config=1, nt=None, ntheta=None, eps=1e-5, seed=1):
    model, x, y = tiny_resnet4(config, nt, ntheta, seed)
    return model_fd_report(model, x, y, eps), MODEL_TOL
