"""Continuous-adjoint (optimize-then-discretize) gradients for small coupled systems.

This is an independent check on the discretize-then-optimize gradients of
:mod:`anodev2.ode`. With the time kernel fixed to a Dirac delta (theta = w)
the stationarity conditions of the Lagrangian are

    alpha(1) = -dJ/dz(1),        d(alpha)/dt = -(df/dz)^T alpha
    gamma(t) = (df/dtheta)^T alpha(t)
    beta(1)  = 0,                d(beta)/dt  = -(dq/dw)^T beta - gamma
    g_w0 = dR/dw0 - beta(0),     g_p = dR/dp - int_0^1 (dq/dp)^T beta dt

Away from a stationary point g_w0 and g_p are exactly the gradients of
J + R, which is what :func:`solve_kkt` returns.
"""
import csv
import io
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass
class SmallSystem:
    """Low-dimensional coupled ODE with analytic Jacobians.

    ``f(z, theta)`` drives the activations and ``q(w, p)`` the weights. All
    Jacobians return dense 2D arrays (rows = output components).
    """

    f: Callable
    f_z: Callable
    f_theta: Callable
    q: Callable
    q_w: Callable
    q_p: Callable
    J: Callable
    J_z: Callable
    R: Optional[Callable] = None
    R_w0: Optional[Callable] = None
    R_p: Optional[Callable] = None

    def objective(self, z1, w0, p):
        r = self.R(w0, p) if self.R is not None else 0.0
        return self.J(z1) + r


@dataclass
class AdjointState:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    t: np.ndarray


def forward_euler(system, z0, w0, p, n):
    """Forward Euler for (w, z) on a uniform grid of n steps; returns trajectories."""
    h = 1.0 / n
    z = np.empty((n + 1, len(z0)))
    w = np.empty((n + 1, len(w0)))
    z[0], w[0] = z0, w0
    for i in range(n):
        w[i + 1] = w[i] + h * system.q(w[i], p)
        z[i + 1] = z[i] + h * system.f(z[i], w[i])
    return z, w


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {name}; system too stiff for the grid")


def solve_kkt(system, z0, w0, p, n, return_state=False):
    """Gradients (g_w0, g_p) of J(z(1)) + R(w0, p) from the adjoint equations.

    Every ODE (forward and adjoint) uses explicit Euler with n steps; the
    adjoints are integrated backwards in time from their terminal conditions.
    """
    if n < 2:
        raise ValueError(f"grid needs at least 2 points, got n={n}")
    z0, w0, p = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (z0, w0, p))
    h = 1.0 / n
    with np.errstate(over="ignore", invalid="ignore"):
        z, w = forward_euler(system, z0, w0, p, n)
    _check_finite("forward state", z)
    _check_finite("forward state", w)

    alpha = np.empty_like(z)
    alpha[n] = -np.atleast_1d(system.J_z(z[n]))
    for i in range(n, 0, -1):
        alpha[i - 1] = alpha[i] + h * system.f_z(z[i], w[i]).T @ alpha[i]
    gamma = np.stack([system.f_theta(z[i], w[i]).T @ alpha[i] for i in range(n + 1)])

    beta = np.empty_like(w)
    beta[n] = 0.0
    for i in range(n, 0, -1):
        beta[i - 1] = beta[i] + h * (system.q_w(w[i], p).T @ beta[i] + gamma[i])
    _check_finite("adjoint state", alpha)
    _check_finite("adjoint state", beta)

    g_w0 = -beta[0]
    integrand = np.stack([system.q_p(w[i], p).T @ beta[i] for i in range(n + 1)])
    g_p = -h * (integrand.sum(axis=0) - 0.5 * (integrand[0] + integrand[-1]))
    if system.R_w0 is not None:
        g_w0 = g_w0 + system.R_w0(w0, p)
    if system.R_p is not None:
        g_p = g_p + system.R_p(w0, p)
    if return_state:
        return g_w0, g_p, AdjointState(alpha, beta, gamma, np.linspace(0.0, 1.0, n + 1))
    return g_w0, g_p


def scalar_growth_system():
    """f = theta*z, q = rho*w, J = z(1); used with z0 = w0 = 1."""
    one = np.ones((1, 1))
    return SmallSystem(
        f=lambda z, th: th * z,
        f_z=lambda z, th: th.reshape(1, 1),
        f_theta=lambda z, th: z.reshape(1, 1),
        q=lambda w, p: p * w,
        q_w=lambda w, p: np.asarray(p, float).reshape(1, 1),
        q_p=lambda w, p: w.reshape(1, 1),
        J=lambda z1: float(z1[0]),
        J_z=lambda z1: one[0],
    )


def scalar_growth_closed_form(rho, w0=1.0, z0=1.0):
    """Exact z(1), dJ/dw0 and dJ/drho for :func:`scalar_growth_system`."""
    e = np.exp(rho)
    integral = (e - 1) / rho
    z1 = z0 * np.exp(w0 * integral)
    return z1, z1 * integral, z1 * w0 * (rho * e - e + 1) / rho**2


# ---------------------------------------------------------------- FD and reports


def finite_difference_gradient(loss, params, eps=1e-5):
    """Central differences, one coordinate at a time in index order."""
    x = np.array(params, dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = loss(x)
        flat[i] = old - eps
        fm = loss(x)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss at coordinate {i}")
        g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


@dataclass
class GradientReport:
    """Per-coordinate gradient comparison.

    ``valid`` optionally marks the coordinates where the finite-difference
    value is trustworthy; :meth:`max_error` ignores the others unless
    ``strict`` is set.
    """

    dto: np.ndarray
    kkt: Optional[np.ndarray]
    fd: np.ndarray
    valid: Optional[np.ndarray] = None

    @property
    def relerr_dto_fd(self):
        return relative_error(self.dto, self.fd)

    @property
    def relerr_kkt_fd(self):
        return None if self.kkt is None else relative_error(self.kkt, self.fd)

    @property
    def relerr_dto_kkt(self):
        return None if self.kkt is None else relative_error(self.dto, self.kkt)

    def max_error(self, strict=False):
        keep = slice(None) if (strict or self.valid is None) else self.valid
        errs = [self.relerr_dto_fd[keep].max(initial=0.0)]
        if self.kkt is not None:
            errs += [self.relerr_kkt_fd[keep].max(initial=0.0), self.relerr_dto_kkt[keep].max(initial=0.0)]
        return float(max(errs))

    @property
    def n_excluded(self):
        return 0 if self.valid is None else int((~self.valid).sum())

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["index", "dto", "kkt", "fd", "relerr_dto_fd", "relerr_kkt_fd"])
        e1, e2 = self.relerr_dto_fd, self.relerr_kkt_fd
        for i in range(len(self.dto)):
            kkt = "" if self.kkt is None else repr(float(self.kkt[i]))
            e_k = "" if e2 is None else repr(float(e2[i]))
            wr.writerow([i, repr(float(self.dto[i])), kkt, repr(float(self.fd[i])), repr(float(e1[i])), e_k])
        return buf.getvalue()


def compare_gradients(dto_grad, kkt_grad, fd_grad):
    dto = np.ravel(np.asarray(dto_grad, float))
    fd = np.ravel(np.asarray(fd_grad, float))
    kkt = None if kkt_grad is None else np.ravel(np.asarray(kkt_grad, float))
    if len(dto) != len(fd) or (kkt is not None and len(kkt) != len(dto)):
        raise ValueError(
            f"gradient length mismatch: dto={len(dto)}, kkt={None if kkt is None else len(kkt)}, fd={len(fd)}"
        )
    return GradientReport(dto, kkt, fd)
