"""Shared arithmetic for the backward solvers.

Both backward solvers (the semi-linear one and the fully non-linear one) are
thin front-ends over :func:`backward_sweep`.  Keeping the recursion in one
place is not just deduplication: the semi-linear reduction property -- a
gamma-free problem must produce the same Y and Z through either solver --
holds to near machine precision precisely because both run the identical
sequence of floating-point operations, differing only in whether a
second-order column is maintained.

Conventions used throughout:

* ``X`` has shape (J, N+1, d); ``dW[:, n]`` is the increment over
  ``[t_n, t_{n+1}]``.
* Step ``n`` of the backward loop computes values at node ``n-1`` from node
  ``n`` and the increment ``dW[:, n-1]``.
* Paths that exited the domain are frozen: a path with ``stop_index <= n-1``
  copies its value backward (``Y[n-1] = Y[n]``), carries zero ``Z``/``Gamma``
  rows, and accrues no driver correction.  Regressions are fitted on the
  still-alive subset when it is large enough to identify the basis, and on
  all paths otherwise.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import regress
from .errors import NonFinite, SingularSigma
from .model import ProblemSpec, as_points
from .paths import PathBatch


def phi_transform(spec: ProblemSpec) -> Callable:
    """Itô-form driver ``phi = f + mu'z + 0.5*Tr[sigma sigma' gamma]``.

    The returned callable has signature ``phi(t, x, y, z, gamma) -> (J,)``.
    """

    def phi(t, x, y, z, gamma):
        f_val = np.asarray(spec.f(t, x, y, z, gamma), dtype=np.float64)
        mu = np.asarray(spec.mu(x), dtype=np.float64)
        mu_z = np.einsum("jd,jd->j", mu, np.asarray(z, dtype=np.float64))
        sig = np.asarray(spec.sigma(x), dtype=np.float64)
        ssT = np.einsum("jab,jcb->jac", sig, sig)
        trace = np.einsum("jab,jba->j", ssT, np.asarray(gamma, dtype=np.float64))
        return (f_val + mu_z) + 0.5 * trace

    return phi


def terminal_gradient_impl(spec: ProblemSpec, X_T) -> tuple:
    """Gradient of the terminal condition per path.

    Returns ``(grad, kinked, used_fd)``.  With ``spec.dg`` present the
    declared gradient is evaluated directly and no kink detection runs.
    Otherwise each component uses a central difference with step
    ``h = 1e-5 * (1 + |x_i|)``, and a component is flagged as kinked when its
    one-sided slopes disagree beyond what smooth curvature explains.
    """
    x = as_points(X_T, spec.dim)
    J, d = x.shape
    if spec.dg is not None:
        grad = np.asarray(spec.dg(x), dtype=np.float64)
        grad = grad.reshape(J, d)
        if not np.all(np.isfinite(grad)):
            j = int(np.argmax(~np.isfinite(grad).all(axis=1)))
            raise NonFinite(f"non-finite terminal gradient at path {j}")
        return grad, np.zeros((J, d), dtype=bool), False

    grad = np.empty((J, d))
    kinked = np.zeros((J, d), dtype=bool)
    g0 = np.asarray(spec.g(x), dtype=np.float64)
    for i in range(d):
        h = 1e-5 * (1.0 + np.abs(x[:, i]))
        xp = x.copy()
        xm = x.copy()
        xp[:, i] += h
        xm[:, i] -= h
        gp = np.asarray(spec.g(xp), dtype=np.float64)
        gm = np.asarray(spec.g(xm), dtype=np.float64)
        grad[:, i] = (gp - gm) / (2.0 * h)
        fwd = (gp - g0) / h
        bwd = (g0 - gm) / h
        kinked[:, i] = np.abs(fwd - bwd) > 0.05 * (1.0 + np.abs(fwd) + np.abs(bwd))
    if not np.all(np.isfinite(grad)):
        j = int(np.argmax(~np.isfinite(grad).all(axis=1)))
        raise NonFinite(f"non-finite terminal gradient at path {j}")
    return grad, kinked, True


def terminal_hessian_impl(spec: ProblemSpec, X_T) -> np.ndarray:
    """Hessian of the terminal condition per path, symmetrized.

    Differentiates ``spec.dg`` centrally when available (one rounding level
    better than second differences of ``g``); otherwise falls back to second
    differences of ``g`` with a wider step to keep cancellation noise down.
    """
    x = as_points(X_T, spec.dim)
    J, d = x.shape
    H = np.empty((J, d, d))
    if spec.dg is not None:
        for j_dim in range(d):
            h = 1e-5 * (1.0 + np.abs(x[:, j_dim]))
            xp = x.copy()
            xm = x.copy()
            xp[:, j_dim] += h
            xm[:, j_dim] -= h
            dp = np.asarray(spec.dg(xp), dtype=np.float64).reshape(J, d)
            dm = np.asarray(spec.dg(xm), dtype=np.float64).reshape(J, d)
            H[:, :, j_dim] = (dp - dm) / (2.0 * h)[:, None]
    else:
        g0 = np.asarray(spec.g(x), dtype=np.float64)
        steps = [1e-4 * (1.0 + np.abs(x[:, i])) for i in range(d)]
        for i in range(d):
            xp = x.copy()
            xm = x.copy()
            xp[:, i] += steps[i]
            xm[:, i] -= steps[i]
            gp = np.asarray(spec.g(xp), dtype=np.float64)
            gm = np.asarray(spec.g(xm), dtype=np.float64)
            H[:, i, i] = (gp - 2.0 * g0 + gm) / steps[i] ** 2
            for j_dim in range(i + 1, d):
                xpp = x.copy()
                xpm = x.copy()
                xmp = x.copy()
                xmm = x.copy()
                for arr, si, sj in (
                    (xpp, 1.0, 1.0),
                    (xpm, 1.0, -1.0),
                    (xmp, -1.0, 1.0),
                    (xmm, -1.0, -1.0),
                ):
                    arr[:, i] += si * steps[i]
                    arr[:, j_dim] += sj * steps[j_dim]
                cross = (
                    np.asarray(spec.g(xpp), dtype=np.float64)
                    - np.asarray(spec.g(xpm), dtype=np.float64)
                    - np.asarray(spec.g(xmp), dtype=np.float64)
                    + np.asarray(spec.g(xmm), dtype=np.float64)
                ) / (4.0 * steps[i] * steps[j_dim])
                H[:, i, j_dim] = cross
                H[:, j_dim, i] = cross
    H = 0.5 * (H + np.transpose(H, (0, 2, 1)))
    if not np.all(np.isfinite(H)):
        raise NonFinite("non-finite terminal Hessian")
    return H


def _solve_sigma_T(sig: np.ndarray, rhs: np.ndarray, step: int) -> np.ndarray:
    """Batched solve of ``sigma' v = rhs`` with a located error on failure."""
    sig_T = np.transpose(sig, (0, 2, 1))
    try:
        return np.linalg.solve(sig_T, rhs)
    except np.linalg.LinAlgError:
        dets = np.abs(np.linalg.det(sig_T))
        j = int(np.argmin(dets))
        raise SingularSigma(
            f"singular diffusion matrix at path {j}, step {step}"
        ) from None


def picard_y(Ey: np.ndarray, correction: Callable, dt: float, iters: int):
    """Fixed-point sweeps for ``y = Ey - correction(y) * dt``.

    Starts at ``Ey`` and applies ``iters`` sweeps; returns the final iterate
    together with the last evaluated correction (None when ``iters == 0``),
    which is exactly the per-path driver value the update charged.
    """
    y = Ey
    last = None
    for _ in range(iters):
        last = np.asarray(correction(y), dtype=np.float64)
        y = Ey - last * dt
    return y, last


def backward_sweep(
    spec: ProblemSpec,
    batch: PathBatch,
    basis: regress.BasisSpec,
    picard_iters: int,
    phi: Callable,
    with_gamma: bool,
):
    """Run the backward recursion; the solver modules wrap the result.

    ``phi(t, x, y, z, gamma)`` is the Itô-form driver; when ``with_gamma`` is
    False no second-order column is maintained and ``phi`` receives ``None``
    for ``gamma``.

    Returns ``(Y, Z, Gamma, root_mean, pathwise, fits, diagnostics)`` where
    ``pathwise`` is the per-path accumulated functional (terminal payout
    minus the driver corrections actually charged); by mean preservation of
    the per-step projections its sample mean tracks the nested root value, so
    its spread is the honest CLT scale for the reported estimate.
    """
    if picard_iters < 0:
        raise ValueError("picard_iters must be non-negative")
    grid = batch.grid
    N, J, d = grid.N, batch.J, batch.dim
    dt = grid.dt
    times = grid.times
    X, dW, stop = batch.X, batch.dW, batch.stop_index
    p = regress.basis_size(basis, d)

    Y = np.empty((J, N + 1))
    Z = np.zeros((J, N + 1, d))
    Y[:, N] = np.asarray(spec.g(X[:, N]), dtype=np.float64)
    if not np.all(np.isfinite(Y[:, N])):
        j = int(np.argmax(~np.isfinite(Y[:, N])))
        raise NonFinite(f"non-finite terminal value at path {j}")
    grad_T, kinked, used_fd = terminal_gradient_impl(spec, X[:, N])
    Z[:, N] = grad_T
    Gamma = None
    if with_gamma:
        Gamma = np.zeros((J, N + 1, d, d))
        Gamma[:, N] = terminal_hessian_impl(spec, X[:, N])

    pathwise = Y[:, N].copy()
    fits = []
    for n in range(N, 0, -1):
        Xp = X[:, n - 1]
        alive = stop > (n - 1)
        n_alive = int(alive.sum())
        fit_idx = alive if n_alive >= max(p, 2) else slice(None)
        states = Xp[fit_idx]
        t_prev = times[n - 1]
        fit_g = None

        if with_gamma:
            target_g = (Z[:, n][:, :, None] * dW[:, n - 1][:, None, :]).reshape(J, d * d)
            fit_g = regress.fit(states, target_g[fit_idx], basis)
            G = regress.predict(fit_g, Xp[alive]).reshape(n_alive, d, d) / dt
            sig_alive = np.asarray(spec.sigma(Xp[alive]), dtype=np.float64)
            G = np.transpose(
                _solve_sigma_T(sig_alive, np.transpose(G, (0, 2, 1)), n - 1),
                (0, 2, 1),
            )
            G = 0.5 * (G + np.transpose(G, (0, 2, 1)))
            Gamma[:, n - 1] = 0.0
            Gamma[alive, n - 1] = G
            assert np.array_equal(
                Gamma[:, n - 1], np.transpose(Gamma[:, n - 1], (0, 2, 1))
            )

        target_z = dW[:, n - 1] * Y[:, n][:, None]
        fit_z = regress.fit(states, target_z[fit_idx], basis)
        Ez = regress.predict(fit_z, Xp[alive]).reshape(n_alive, d)
        sig_alive = np.asarray(spec.sigma(Xp[alive]), dtype=np.float64)
        z_alive = _solve_sigma_T(sig_alive, (Ez / dt)[:, :, None], n - 1)[:, :, 0]
        Z[:, n - 1] = 0.0
        Z[alive, n - 1] = z_alive

        fit_y = regress.fit(states, Y[fit_idx, n], basis)
        Ey = regress.predict(fit_y, Xp[alive])
        gamma_alive = Gamma[alive, n - 1] if with_gamma else None

        def correction(y, _t=t_prev, _x=Xp[alive], _z=z_alive, _g=gamma_alive):
            return phi(_t, _x, y, _z, _g)

        y_alive, phi_last = picard_y(Ey, correction, dt, picard_iters)
        Y[:, n - 1] = Y[:, n]
        Y[alive, n - 1] = y_alive
        if phi_last is not None:
            pathwise[alive] -= phi_last * dt

        cols_ok = np.all(np.isfinite(Y[:, n - 1])) and np.all(
            np.isfinite(Z[:, n - 1])
        )
        if with_gamma:
            cols_ok = cols_ok and np.all(np.isfinite(Gamma[:, n - 1]))
        if not cols_ok:
            raise NonFinite(f"non-finite backward value at step {n - 1}")

        fits.append(
            {
                "n": n - 1,
                "t": t_prev,
                "y": fit_y,
                "z": fit_z,
                "gamma": fit_g,
                "alive": n_alive,
            }
        )

    fits.reverse()
    diagnostics = {
        "terminal_gradient_fd": used_fd,
        "terminal_kink_fraction": float(np.mean(np.any(kinked, axis=1))),
        "terminal_kinked": kinked,
    }
    root_mean = float(np.mean(Y[:, 0]))
    return Y, Z, Gamma, root_mean, pathwise, fits, diagnostics
