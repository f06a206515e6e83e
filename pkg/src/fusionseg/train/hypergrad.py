"""Implicit-differentiation hypergradients (matrix-free CG on Hessian-vector products).

Inner problem: theta*(omega) = argmin_theta L^f(theta; omega). Outer loss L^s(theta, omega).
Stationarity of the inner problem gives

    d theta*/d omega = -(H_thth)^-1 H_thom,   H = second derivatives of L^f,

so the hypergradient is  dL^s/domega = grad_omega L^s - H_omth v  with  H_thth v = grad_theta L^s.
The theta* dependence is on the fusion-side parameters (the only ones L^f sees); the
printed formula's subscript on the segmentation side is read that way.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from ..tensor import Tensor, backward, gradient, hvp, rel_error
from ..tensor import ops
from ..rng import stream

INNER_TOL = 1e-5
EQ5_NOTE = "theta* is differentiated w.r.t. the fusion parameters omega_f (the printed omega_s subscript is read as omega_f)"


class InnerSolveError(RuntimeError):
    pass


@dataclass
class CGResult:
    x: np.ndarray
    iters: int
    residuals: list
    converged: bool


def cg_solve(hvp_fn: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray, max_iters: int = 50,
             tol: float = 1e-6, damping: float = 0.0) -> CGResult:
    """Conjugate gradients on (H + damping I) x = rhs; ``tol`` is relative to ||rhs||.

    On non-convergence a warning is issued and the iterate with the smallest
    residual is returned.
    """
    b = np.asarray(rhs, dtype=np.float64).reshape(-1)
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return CGResult(x, 0, [0.0], True)

    def op(v):
        out = np.asarray(hvp_fn(v), dtype=np.float64).reshape(-1)
        return out + damping * v if damping else out

    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    residuals = [math.sqrt(rs) / bnorm]
    best, best_res = x.copy(), residuals[0]
    it = 0
    for it in range(1, max_iters + 1):
        hp = op(p)
        php = float(p @ hp)
        if php <= 0.0:
            warnings.warn(f"cg_solve: non-positive curvature {php:.3e} at iteration {it}", RuntimeWarning)
            break
        alpha = rs / php
        x = x + alpha * p
        r = r - alpha * hp
        rs_new = float(r @ r)
        res = math.sqrt(rs_new) / bnorm
        residuals.append(res)
        if res < best_res:
            best, best_res = x.copy(), res
        if res < tol:
            return CGResult(x, it, residuals, True)
        p = r + (rs_new / rs) * p
        rs = rs_new
    warnings.warn(f"cg_solve: relative residual {best_res:.3e} above tol {tol:.1e} after {it} iterations",
                  RuntimeWarning)
    return CGResult(best, it, residuals, False)


def hutchinson_trace(hvp_fn, dim: int, rng: np.random.Generator, n: int = 8) -> float:
    est = 0.0
    for _ in range(n):
        z = rng.choice([-1.0, 1.0], size=dim)
        est += float(z @ hvp_fn(z))
    return est / n


def auto_damping(hvp_fn, dim: int, rng: np.random.Generator, scale: float = 1e-3) -> float:
    """mu = scale * (trace estimate) / dim, floored at zero."""
    return max(scale * hutchinson_trace(hvp_fn, dim, rng) / dim, 0.0)


class BilevelProblem:
    """Subclass hook: tensors ``theta`` / ``omega`` are leaves that the losses read.

    ``inner_loss`` and ``outer_loss`` build fresh graphs from the current leaf data.
    ``residual`` (optional) expresses the inner loss as 0.5 * ||r||^2 for Gauss-Newton.
    """

    theta: Tensor
    omega: Tensor

    def inner_loss(self) -> Tensor:
        raise NotImplementedError

    def outer_loss(self) -> Tensor:
        raise NotImplementedError

    def residual(self) -> Tensor:
        raise NotImplementedError

    def solve_inner(self) -> None:
        """Drive grad_theta L^f towards zero in place."""
        raise NotImplementedError


@dataclass
class HypergradReport:
    implicit_grad: list
    joint_grad: list | None = None
    analytic_grad: list | None = None
    fd_grad: list | None = None
    cg_iters: int = 0
    cg_residuals: list = field(default_factory=list)
    inner_grad_norm: float = 0.0
    damping: float = 0.0
    mode: str = "exact"
    rel_err_analytic: float | None = None
    rel_err_fd: float | None = None
    rel_err_joint: float | None = None
    tol_analytic: float = 1e-4
    tol_fd: float = 1e-3
    tol_joint: float = 1e-3
    passed: bool | None = None
    note: str = EQ5_NOTE

    def finite(self) -> bool:
        vals = [*self.implicit_grad, *(self.analytic_grad or []), *(self.fd_grad or []),
                *(self.joint_grad or []), self.inner_grad_norm, *self.cg_residuals]
        return all(math.isfinite(v) for v in vals)

    def as_dict(self) -> dict:
        return asdict(self)


def _mixed_product(problem: BilevelProblem, v: np.ndarray, eps: float | None = None) -> np.ndarray:
    """H_omega,theta v = d/dt grad_omega L^f(theta + t v; omega) at t = 0, central difference."""
    th0 = problem.theta.data.copy()
    if eps is None:
        eps = 1e-4 * (1.0 + float(np.abs(th0).max())) / (float(np.abs(v).max()) + 1e-12)
    dv = v.reshape(th0.shape)
    try:
        problem.theta.data = th0 + eps * dv
        gp = gradient(problem.inner_loss, [problem.omega])
        problem.theta.data = th0 - eps * dv
        gm = gradient(problem.inner_loss, [problem.omega])
    finally:
        problem.theta.data = th0
    return (gp - gm) / (2.0 * eps)


def _gauss_newton_product(problem: BilevelProblem, v: np.ndarray) -> np.ndarray:
    """J^T J v with J = d r / d theta: J v by central difference, J^T u by one backward."""
    th0 = problem.theta.data.copy()
    eps = 1e-4 * (1.0 + float(np.abs(th0).max())) / (float(np.abs(v).max()) + 1e-12)
    dv = v.reshape(th0.shape)
    try:
        problem.theta.data = th0 + eps * dv
        rp = problem.residual().data.copy()
        problem.theta.data = th0 - eps * dv
        rm = problem.residual().data.copy()
    finally:
        problem.theta.data = th0
    jv = (rp - rm) / (2.0 * eps)
    problem.theta.grad = None
    r = problem.residual()
    backward(r, jv)
    out = problem.theta.grad.reshape(-1).copy()
    problem.theta.grad = None
    problem.omega.grad = None
    return out


def hypergradient_implicit(problem: BilevelProblem, damping: float | str = 0.0, mode: str = "exact",
                           max_iters: int = 50, tol: float = 1e-10, rng=None) -> HypergradReport:
    """Hypergradient of the outer loss w.r.t. omega through the inner argmin.

    ``damping`` is a float mu or ``"auto"`` (1e-3 * Hutchinson trace / dim).
    ``mode`` is ``"exact"`` (finite-difference HVP) or ``"gauss_newton"`` (J^T J).
    """
    if mode not in ("exact", "gauss_newton"):
        raise ValueError(f"unknown mode {mode!r}")
    problem.solve_inner()
    g_inner = gradient(problem.inner_loss, [problem.theta])
    gnorm = float(np.linalg.norm(g_inner))
    if not gnorm <= INNER_TOL:
        raise InnerSolveError(f"inner problem not converged: ||grad_theta L^f|| = {gnorm:.3e} > {INNER_TOL}")

    g_theta = gradient(problem.outer_loss, [problem.theta])
    direct = gradient(problem.outer_loss, [problem.omega])

    if mode == "exact":
        def h(v):
            return hvp(problem.inner_loss, [problem.theta], v)
    else:
        def h(v):
            return _gauss_newton_product(problem, v)

    if damping == "auto":
        damping = auto_damping(h, g_theta.size, rng or stream(0, "hutchinson"))
    cg = cg_solve(h, g_theta, max_iters=max_iters, tol=tol, damping=float(damping))
    mixed = _mixed_product(problem, cg.x) if np.any(cg.x) else np.zeros_like(direct)
    return HypergradReport(
        implicit_grad=(direct - mixed).tolist(), cg_iters=cg.iters, cg_residuals=cg.residuals,
        inner_grad_norm=gnorm, damping=float(damping), mode=mode,
    )


# ------------------------------------------------------------------ toy problem

class ToyQuadratic(BilevelProblem):
    """L^f = 0.5 th^T A th - (B om)^T th,  L^s = 0.5 ||th - t||^2,  th* = A^-1 B om."""

    def __init__(self, seed: int = 0, n: int = 6, m: int = 4, outer_uses_theta: bool = True):
        rng = stream(seed, "toy-bilevel")
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        self.A = q @ np.diag(rng.uniform(1.0, 4.0, n)) @ q.T
        self.B = rng.standard_normal((n, m))
        self.t = rng.standard_normal((n, 1))
        self.chol = np.linalg.cholesky(self.A)
        # column vectors so every product is a plain 2-D matmul
        self.theta = Tensor(np.zeros((n, 1)), requires_grad=True)
        self.omega = Tensor(rng.standard_normal((m, 1)), requires_grad=True)
        self.outer_uses_theta = outer_uses_theta
        eig = np.linalg.eigvalsh(self.A)
        self.step = 2.0 / (eig[0] + eig[-1])

    def inner_loss_of(self, theta: Tensor, omega: Tensor) -> Tensor:
        quad = ops.mul(ops.sum_(ops.mul(theta, ops.matmul(Tensor(self.A), theta))), 0.5)
        return ops.sub(quad, ops.sum_(ops.mul(ops.matmul(Tensor(self.B), omega), theta)))

    def inner_loss(self) -> Tensor:
        return self.inner_loss_of(self.theta, self.omega)

    def outer_loss_of(self, theta: Tensor, omega: Tensor) -> Tensor:
        if self.outer_uses_theta:
            return ops.mul(ops.sum_(ops.square(ops.sub(theta, self.t))), 0.5)
        # theta-free variant: only a direct omega term remains
        return ops.mul(ops.sum_(ops.square(omega)), 0.5)

    def outer_loss(self) -> Tensor:
        return self.outer_loss_of(self.theta, self.omega)

    def residual(self) -> Tensor:
        # 0.5 ||L^T th - L^-1 B om||^2 equals L^f up to a theta-free constant (A = L L^T)
        c = np.linalg.solve(self.chol, self.B @ self.omega.data)
        return ops.sub(ops.matmul(Tensor(self.chol.T), self.theta), c)

    def solve_inner(self, max_steps: int = 10_000, tol: float = 1e-12) -> None:
        """Plain gradient descent with the optimal fixed step."""
        th = self.theta.data.copy()
        b = self.B @ self.omega.data
        for _ in range(max_steps):
            g = self.A @ th - b
            if np.linalg.norm(g) < tol:
                break
            th = th - self.step * g
        self.theta.data = th

    def theta_star(self, omega: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.A, self.B @ omega)

    def analytic(self) -> np.ndarray:
        th = self.theta_star(self.omega.data)
        if not self.outer_uses_theta:
            return self.omega.data.ravel().copy()
        return (self.B.T @ np.linalg.solve(self.A, th - self.t)).ravel()

    def outer_at(self, omega: np.ndarray) -> float:
        """Re-solve the inner problem at ``omega`` and evaluate the outer loss."""
        saved = (self.theta.data.copy(), self.omega.data.copy())
        try:
            self.omega.data = np.asarray(omega, dtype=np.float64).copy()
            self.theta.data = np.zeros_like(saved[0])
            self.solve_inner()
            return self.outer_loss().item()
        finally:
            self.theta.data, self.omega.data = saved

    def fd_hypergrad(self, h: float = 1e-5) -> np.ndarray:
        om = self.omega.data.copy()
        out = np.zeros(om.size)
        for j in range(om.size):
            e = np.zeros(om.size)
            e[j] = h
            e = e.reshape(om.shape)
            out[j] = (self.outer_at(om + e) - self.outer_at(om - e)) / (2 * h)
        return out

    def joint_grad(self, steps: int = 200) -> np.ndarray:
        """Differentiate straight through an unrolled inner solve recorded on the tape."""
        om = Tensor(self.omega.data.copy(), requires_grad=True)
        th = Tensor(np.zeros_like(self.theta.data))
        A, B = Tensor(self.A), Tensor(self.B)
        for _ in range(steps):
            g = ops.sub(ops.matmul(A, th), ops.matmul(B, om))
            th = ops.sub(th, ops.mul(g, self.step))
        backward(self.outer_loss_of(th, om))
        return om.grad.ravel().copy()


def verify_hypergrad(seed: int = 0, damping: float | str = 0.0, mode: str = "exact") -> tuple[HypergradReport, bool]:
    """Toy bi-level check: implicit vs closed form, finite differences through the argmin, and unrolled joint."""
    prob = ToyQuadratic(seed)
    rep = hypergradient_implicit(prob, damping=damping, mode=mode)
    imp = np.asarray(rep.implicit_grad)
    ana, fd, joint = prob.analytic(), prob.fd_hypergrad(), prob.joint_grad()
    rep.analytic_grad, rep.fd_grad, rep.joint_grad = ana.tolist(), fd.tolist(), joint.tolist()
    rep.rel_err_analytic = rel_error(imp, ana)
    rep.rel_err_fd = rel_error(imp, fd)
    rep.rel_err_joint = rel_error(imp, joint)
    ok = (rep.finite() and rep.rel_err_analytic < rep.tol_analytic and rep.rel_err_fd < rep.tol_fd
          and rep.rel_err_joint < rep.tol_joint)
    rep.passed = bool(ok)
    return rep, rep.passed
