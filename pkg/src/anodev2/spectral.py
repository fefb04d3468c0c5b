"""Reaction-diffusion-advection evolution of convolution kernels.

The weight field lives on the periodic unit square sampled on a k x k grid
(cell size 1/k). Axis -1 is x (columns), axis -2 is y (rows). Grid index m
maps to the integer frequency f = m for m <= k/2 and m - k otherwise, and the
angular wavenumber is 2*pi*f.

The linear operator d*lap(w) + vx*dw/dx + vy*dw/dy + rho*w is diagonal in
Fourier space, so one step of length dt multiplies every bin by

    s = exp(dt * (-d*|kappa|^2 + i*(kappa_x*vx + kappa_y*vy) + rho))

Advection with velocity v moves patterns towards -v: w(x, t) = w0(x + v t).

On even grids the Nyquist row/column has no conjugate partner, so there the
advection phase exp(i*a) is replaced by its real part cos(a). That keeps the
symbol Hermitian (real fields stay real) and keeps whole-cell shifts exact;
the price is that the semigroup law only holds when that phase is a multiple
of pi or the grid is odd.
"""
from dataclasses import dataclass, astuple

import numpy as np

IMAG_TOL = 1e-9


class ImaginaryResidueError(ArithmeticError):
    """Inverse DFT produced a non-negligible imaginary part."""


class CFLError(ValueError):
    """Explicit integrator step violates a stability bound."""


@dataclass
class RDACoefficients:
    """Per-layer evolution coefficients shared by every kernel slice."""

    d: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    rho: float = 0.0

    def __post_init__(self):
        if self.d < 0:
            raise ValueError(f"diffusion must be non-negative, got d={self.d}")

    def as_array(self):
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        d, vx, vy, rho = (float(v) for v in a)
        return cls(max(d, 0.0), vx, vy, rho)


def _coeffs(p):
    if isinstance(p, RDACoefficients):
        return p.d, p.vx, p.vy, p.rho
    d, vx, vy, rho = (float(v) for v in p)
    return d, vx, vy, rho


# ---------------------------------------------------------------- DFT


def _dft_matrix(k):
    m = np.arange(k)
    return np.exp(-2j * np.pi * np.outer(m, m) / k)


def dft2(grid):
    """Unnormalized 2D DFT over the last two axes (direct matrix form)."""
    grid = np.asarray(grid)
    k0, k1 = grid.shape[-2:]
    return _dft_matrix(k0) @ grid @ _dft_matrix(k1).T


def idft2(spec, tol=IMAG_TOL):
    """Inverse of :func:`dft2`; returns the real part.

    Raises ImaginaryResidueError when the discarded imaginary part exceeds
    ``tol`` (scaled by the field magnitude when that is above 1).
    """
    k0, k1 = spec.shape[-2:]
    out = np.conj(_dft_matrix(k0)) @ spec @ np.conj(_dft_matrix(k1)).T / (k0 * k1)
    resid = np.abs(out.imag).max() if out.size else 0.0
    scale = max(1.0, float(np.abs(out.real).max())) if out.size else 1.0
    if resid > tol * scale:
        raise ImaginaryResidueError(f"imaginary residue {resid:.3e} exceeds {tol:.1e}")
    return np.ascontiguousarray(out.real)


def imaginary_residue(spec):
    """Max |imag| of the inverse transform, for diagnostics."""
    k0, k1 = spec.shape[-2:]
    out = np.conj(_dft_matrix(k0)) @ spec @ np.conj(_dft_matrix(k1)).T / (k0 * k1)
    return float(np.abs(out.imag).max())


# ---------------------------------------------------------------- symbol


def frequencies(k):
    m = np.arange(k)
    return np.where(m <= k // 2, m, m - k)


def _axis_terms(k):
    """Angular wavenumbers and a mask of the unpaired Nyquist bin."""
    f = frequencies(k)
    nyq = np.zeros(k, dtype=bool)
    if k % 2 == 0:
        nyq[k // 2] = True
    return 2 * np.pi * f, nyq


def _advection_factor(kappa, nyq, v, dt):
    """Per-axis advection multiplier and its derivative w.r.t. v."""
    a = kappa * v * dt
    fac = np.where(nyq, np.cos(a), np.exp(1j * a))
    dfac = np.where(nyq, -kappa * dt * np.sin(a), 1j * kappa * dt * np.exp(1j * a))
    return fac, dfac


def rda_symbol(p, k, dt, with_derivatives=False):
    """Spectral multiplier for one RDA step of length ``dt`` on a k x k grid.

    With ``with_derivatives`` also returns an array of shape (4, k, k) holding
    ds/dd, ds/dvx, ds/dvy, ds/drho.
    """
    d, vx, vy, rho = _coeffs(p)
    kap, nyq = _axis_terms(k)
    ky, kx = kap[:, None], kap[None, :]
    decay = np.exp(dt * (-d * (kx**2 + ky**2) + rho))
    ax, dax = _advection_factor(kap, nyq, vx, dt)
    ay, day = _advection_factor(kap, nyq, vy, dt)
    adv = ay[:, None] * ax[None, :]
    s = decay * adv
    if not with_derivatives:
        return s
    ds = np.empty((4, k, k), dtype=complex)
    ds[0] = -dt * (kx**2 + ky**2) * s
    ds[1] = decay * ay[:, None] * dax[None, :]
    ds[2] = decay * day[:, None] * ax[None, :]
    ds[3] = dt * s
    return s, ds


# ---------------------------------------------------------------- stepping


def _apply_sigma(x, nonlinearity):
    if nonlinearity == "tanh":
        return np.tanh(x)
    if nonlinearity == "identity":
        return x
    raise ValueError(f"unknown nonlinearity {nonlinearity!r}")


def rda_step(w, p, dt, nonlinearity="tanh", return_cache=False):
    """Advance a kernel field (..., k, k) by ``dt``: sigma(F^-1(s * F(w))).

    All leading slices share the same coefficients.
    """
    k = w.shape[-1]
    if w.shape[-2] != k:
        raise ValueError(f"kernel slices must be square, got {w.shape[-2:]}")
    s = rda_symbol(p, k, dt)
    pre = idft2(s * dft2(w))
    out = _apply_sigma(pre, nonlinearity)
    if return_cache:
        return out, (w, out, p, dt, nonlinearity)
    return out


def rda_step_backward(grad_out, cache):
    """Reverse-mode through :func:`rda_step`.

    Returns (grad_w, grad_p) where grad_p is a length-4 array ordered
    (d, vx, vy, rho), summed over all slices.
    """
    w, out, p, dt, nonlinearity = cache
    k = w.shape[-1]
    if nonlinearity == "tanh":
        g = grad_out * (1 - out * out)
    else:
        g = grad_out
    s, ds = rda_symbol(p, k, dt, with_derivatives=True)
    G = dft2(g)
    grad_w = idft2(np.conj(s) * G)
    W = dft2(w)
    # Parseval: <g, F^-1(ds * W)> = Re sum(conj(G) * ds * W) / k^2
    cross = (np.conj(G) * W).reshape(-1, k, k).sum(axis=0)
    grad_p = np.real(np.einsum("pij,ij->p", ds, cross)) / (k * k)
    return grad_w, grad_p


def rda_trajectory(w0, p, n_steps, nonlinearity="tanh", horizon=1.0, return_caches=False):
    """Evolve ``w0`` over [0, horizon] in ``n_steps`` equal steps.

    Returns an array of shape (n_steps + 1, *w0.shape) with entry 0 equal to
    ``w0`` and, optionally, the per-step caches for the backward pass.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    dt = horizon / n_steps
    traj = np.empty((n_steps + 1,) + w0.shape, dtype=w0.dtype)
    traj[0] = w0
    caches = []
    for j in range(n_steps):
        nxt, cache = rda_step(traj[j], p, dt, nonlinearity, return_cache=True)
        traj[j + 1] = nxt
        caches.append(cache)
    if return_caches:
        return traj, caches
    return traj


def rda_trajectory_backward(grad_traj, caches):
    """Accumulate gradients given for every trajectory entry back to (w0, p).

    ``grad_traj`` has the trajectory's shape; rows may be zero for snapshots
    that were not used downstream.
    """
    g = grad_traj[-1].copy()
    gp = np.zeros(4)
    for j in range(len(caches) - 1, -1, -1):
        gw, gpj = rda_step_backward(g, caches[j])
        gp += gpj
        g = gw + grad_traj[j]
    return g, gp


# ---------------------------------------------------------------- oracle


def _lap(w, h):
    return (
        np.roll(w, 1, -1) + np.roll(w, -1, -1) + np.roll(w, 1, -2) + np.roll(w, -1, -2) - 4 * w
    ) / (h * h)


def _grad(w, h, axis):
    return (np.roll(w, -1, axis) - np.roll(w, 1, axis)) / (2 * h)


def rda_explicit_oracle(w, p, dt, substeps, nonlinearity="identity"):
    """Forward-Euler finite-difference integration of dw/dt = sigma(L w).

    Uses the 5-point periodic Laplacian and centred first differences. This
    path shares no code with the spectral solver.
    """
    d, vx, vy, rho = _coeffs(p)
    k = w.shape[-1]
    h = 1.0 / k
    tau = dt / substeps
    if d * tau / (h * h) > 0.25:
        raise CFLError(f"diffusion bound violated: d*tau/h^2 = {d * tau / h**2:.3g} > 0.25")
    speed = float(np.hypot(vx, vy))
    if speed * tau / h > 0.5:
        raise CFLError(f"advection bound violated: |v|*tau/h = {speed * tau / h:.3g} > 0.5")
    w = np.array(w, dtype=np.float64)
    for _ in range(substeps):
        rhs = d * _lap(w, h) + vx * _grad(w, h, -1) + vy * _grad(w, h, -2) + rho * w
        w = w + tau * _apply_sigma(rhs, nonlinearity)
    return w


def discrete_laplacian_symbol(k):
    """Eigenvalues of the 5-point periodic Laplacian on the unit square."""
    f = frequencies(k)
    lam = -4 * k * k * np.sin(np.pi * f / k) ** 2
    return lam[:, None] + lam[None, :]
