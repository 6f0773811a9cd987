"""Cell-local D3Q19 math: velocity set, equilibrium, collision, scaling.

Everything here is a pure function of its arguments.  Lattice units are
fixed to dx = dt = 1 on level 0; level-L quantities use dx_L = dt_L = 2^-L
only where a formula demands it (parameter scaling, norm weights).

The incompressible equilibrium is

    f_eq[a] = w[a] * (rho + rho_0 * (3 (e.u) + 4.5 (e.u)^2 - 1.5 u.u))

with c = 1 and c_s^2 = 1/3.  Macroscopic moments sum the PDFs themselves:
rho = sum_a f[a], u = (1/rho_0) sum_a e[a] f[a].
"""

from __future__ import annotations

import numpy as np

# D3Q19 velocity set.  Index 0 is the rest direction, 1..6 the axis
# directions and 7..18 the edge diagonals.  Opposite directions are
# adjacent pairs so INVERSE stays a flat table.
E = np.array(
    [
        [0, 0, 0],
        [1, 0, 0], [-1, 0, 0],
        [0, 1, 0], [0, -1, 0],
        [0, 0, 1], [0, 0, -1],
        [1, 1, 0], [-1, -1, 0],
        [1, -1, 0], [-1, 1, 0],
        [1, 0, 1], [-1, 0, -1],
        [1, 0, -1], [-1, 0, 1],
        [0, 1, 1], [0, -1, -1],
        [0, 1, -1], [0, -1, 1],
    ],
    dtype=np.int8,
)

W = np.array(
    [1.0 / 3.0]
    + [1.0 / 18.0] * 6
    + [1.0 / 36.0] * 12,
    dtype=np.float64,
)

INVERSE = np.array(
    [0, 2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11, 14, 13, 16, 15, 18, 17],
    dtype=np.int64,
)

Q = 19
CS2 = 1.0 / 3.0


def equilibrium(rho, u, rho_0=1.0):
    """Incompressible equilibrium PDFs.

    ``rho`` is a scalar or array of densities, ``u`` a 3-vector or an
    array whose last axis has length 3.  Returns an array with a leading
    axis of length 19.
    """
    rho = np.asarray(rho, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    eu = np.tensordot(E.astype(np.float64), u, axes=([1], [-1]))  # (19, ...)
    uu = np.sum(u * u, axis=-1)
    shape = (Q,) + (1,) * max(rho.ndim, uu.ndim)
    w = W.reshape(shape)
    return w * (rho + rho_0 * (3.0 * eu + 4.5 * eu * eu - 1.5 * uu))


def macroscopic(f, rho_0=1.0, force=None, dt=1.0):
    """First two moments of ``f`` (leading axis 19) -> (rho, u).

    With ``force`` given, adds the half-step correction dt*F/(2 rho_0) to
    the velocity.  That corrected velocity is for output and error
    evaluation only; collision equilibria use the uncorrected moments.
    """
    f = np.asarray(f, dtype=np.float64)
    rho = f.sum(axis=0)
    u = np.tensordot(E.astype(np.float64), f, axes=([0], [0])) / rho_0
    u = np.moveaxis(u, 0, -1)
    if force is not None:
        u = u + dt * np.asarray(force, dtype=np.float64) / (2.0 * rho_0)
    return rho, u


def force_term(accel, rho_0=1.0):
    """Discrete body-force term F[a] = w[a] rho_0 (e[a].a) / c_s^2."""
    accel = np.asarray(accel, dtype=np.float64)
    return W * rho_0 * (E.astype(np.float64) @ accel) / CS2


def collide_srt(f, omega, force_term=None, dt=1.0, rho_0=1.0):
    """Single-relaxation-time collision, optionally forced."""
    f = np.asarray(f, dtype=np.float64)
    rho, u = macroscopic(f, rho_0)
    feq = equilibrium(rho, u, rho_0)
    out = f - omega * (f - feq)
    if force_term is not None:
        out = out + dt * np.reshape(
            np.asarray(force_term, dtype=np.float64), (Q,) + (1,) * (f.ndim - 1)
        )
    return out


def collide_trt(f, lambda_e, lambda_o, force_term=None, dt=1.0, rho_0=1.0):
    """Two-relaxation-time collision.

    Splits f and f_eq into even/odd parts about the inverse-direction
    pairing and relaxes them with separate rates.  The rest direction has
    no odd part.  TRT with lambda_e = lambda_o reproduces SRT exactly.
    """
    f = np.asarray(f, dtype=np.float64)
    rho, u = macroscopic(f, rho_0)
    feq = equilibrium(rho, u, rho_0)
    fbar = f[INVERSE]
    feqbar = feq[INVERSE]
    f_even = 0.5 * (f + fbar)
    f_odd = 0.5 * (f - fbar)
    feq_even = 0.5 * (feq + feqbar)
    feq_odd = 0.5 * (feq - feqbar)
    out = f - lambda_e * (f_even - feq_even) - lambda_o * (f_odd - feq_odd)
    if force_term is not None:
        out = out + dt * np.reshape(
            np.asarray(force_term, dtype=np.float64), (Q,) + (1,) * (f.ndim - 1)
        )
    return out


def omega_from_viscosity(nu, dx=1.0, dt=1.0):
    """Relaxation parameter from kinematic viscosity, omega in (0,2)."""
    if nu <= 0.0:
        raise ValueError(f"viscosity must be positive, got {nu}")
    c = dx / dt
    omega = 2.0 * c * c * dt / (6.0 * nu + c * c * dt)
    if not 0.0 < omega < 2.0:
        raise ValueError(f"omega {omega} outside (0, 2)")
    return omega


def viscosity_from_omega(omega, dx=1.0, dt=1.0):
    if not 0.0 < omega < 2.0:
        raise ValueError(f"omega {omega} outside (0, 2)")
    c = dx / dt
    return (c * c / 3.0) * (1.0 / omega - 0.5) * dt


def scale_omega(omega_k, k, l):
    """Scale omega from level k to level l under acoustic scaling.

    omega_L = 2^(K+1) omega_K / (2^(L+1) + (2^K - 2^L) omega_K).
    """
    num = 2.0 ** (k + 1) * omega_k
    den = 2.0 ** (l + 1) + (2.0 ** k - 2.0 ** l) * omega_k
    omega_l = num / den
    if not 0.0 < omega_l < 2.0:
        raise ValueError(
            f"omega {omega_k} at level {k} scales to {omega_l} at level {l}"
        )
    return omega_l


def lambda_odd(lambda_e, lambda_eo):
    """Odd relaxation rate from the even rate and the magic parameter.

    lambda_o = (4 - 2 lambda_e) / (2 + (4 Lambda_eo - 1) lambda_e).
    Substituting back into the magic-parameter product reproduces
    lambda_eo, which is what keeps the wall location fixed across levels.
    """
    if not 0.0 < lambda_e < 2.0:
        raise ValueError(f"lambda_e {lambda_e} outside (0, 2)")
    den = 2.0 + (4.0 * lambda_eo - 1.0) * lambda_e
    if den == 0.0:
        raise ValueError("degenerate lambda_e / lambda_eo combination")
    lo = (4.0 - 2.0 * lambda_e) / den
    if not 0.0 < lo < 2.0:
        raise ValueError(f"lambda_o {lo} outside (0, 2)")
    return lo


def magic_parameter(lambda_e, lambda_o):
    """Lambda_eo = (1/lambda_e - 1/2)(1/lambda_o - 1/2)."""
    return (1.0 / lambda_e - 0.5) * (1.0 / lambda_o - 0.5)


def scale_acceleration(a_k, k, l):
    """a*_L = 2^(K-L) a*_K; exact for integer level differences."""
    a_k = np.asarray(a_k, dtype=np.float64)
    return a_k * 2.0 ** (k - l)
