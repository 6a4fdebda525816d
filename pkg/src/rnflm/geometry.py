"""Pull-back Riemannian geometry induced by a flow stack.

The metric at ``z`` is ``G(z) = J(z)^T J(z)`` with ``J`` the stack Jacobian.
Curves are discretized uniformly on ``[a, b]`` and integrated with
left-endpoint sums, so the energy below is exactly the objective the
geodesic solver descends.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError
from .flows import FlowStack, project_u, stack_forward, stack_jacobian

log = logging.getLogger(__name__)


@dataclass
class Curve:
    points: np.ndarray
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        self.points = np.array(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 2:
            raise ContractError(f"Curve needs at least two points, got shape {self.points.shape}")
        if not self.b > self.a:
            raise ContractError("Curve parameter interval must satisfy b > a")

    @property
    def n_segments(self) -> int:
        return self.points.shape[0] - 1

    @property
    def dt(self) -> float:
        return (self.b - self.a) / self.n_segments

    @classmethod
    def straight(cls, za, zb, n_segments: int, a: float = 0.0, b: float = 1.0) -> "Curve":
        t = np.linspace(0.0, 1.0, n_segments + 1)[:, None]
        za, zb = np.asarray(za, dtype=np.float64), np.asarray(zb, dtype=np.float64)
        return cls((1.0 - t) * za + t * zb, a, b)


@dataclass
class MetricTensor:
    G: np.ndarray
    source: FlowStack | None = None

    def inner(self, u, v) -> float:
        return float(np.asarray(u) @ self.G @ np.asarray(v))


@dataclass
class GeodesicResult:
    curve: Curve
    energies: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def warning(self) -> bool:
        return not self.converged


def pullback_metric(s: FlowStack, z) -> MetricTensor:
    jac = stack_jacobian(s, np.asarray(z, dtype=np.float64).reshape(1, -1))[0]
    return MetricTensor(jac.T @ jac, s)


def metric_field(s: FlowStack, points: np.ndarray) -> np.ndarray:
    """``G`` at every row of ``points`` as an ``(n, d, d)`` array."""
    jac = stack_jacobian(s, points)
    return np.swapaxes(jac, 1, 2) @ jac


def det_metric(s: FlowStack, z) -> float | np.ndarray:
    """``det G = exp(2 * sum of raw log-dets)``; vectorized over rows."""
    z = np.asarray(z, dtype=np.float64)
    with ag.no_grad():
        _, logdet = stack_forward(s, Tensor(np.atleast_2d(z)))
    out = np.exp(2.0 * logdet.data)
    return float(out[0]) if z.ndim == 1 else out


def _pushforward_tangent(s: FlowStack, z: Tensor, v: Tensor) -> Tensor:
    """``J(z) v`` row-wise, built from differentiable ops."""
    for flow in s.flows:
        u_hat = project_u(flow)
        w_col = ag.reshape(flow.w, (flow.dim, 1))
        h = ag.tanh(ag.matmul(z, w_col) + flow.b)
        row_u = ag.reshape(u_hat, (1, flow.dim))
        v = v + (1.0 - ag.square(h)) * ag.matmul(v, w_col) * row_u
        z = z + h * row_u
    return v


def segment_sq_norms(s: FlowStack, points: Tensor) -> Tensor:
    """``dgamma_i^T G(gamma_i) dgamma_i`` for each segment."""
    points = ag.astensor(points)
    n = points.shape[0]
    delta = points[1:] - points[: n - 1]
    jv = _pushforward_tangent(s, points[: n - 1], delta)
    return ag.sum_(ag.square(jv), axis=1)


def curve_length(s: FlowStack, c: Curve) -> float:
    with ag.no_grad():
        sq = segment_sq_norms(s, Tensor(c.points)).data
    return float(np.sum(np.sqrt(np.maximum(sq, 0.0))))


def curve_energy_tensor(s: FlowStack, points: Tensor, dt: float) -> Tensor:
    return 0.5 * ag.sum_(segment_sq_norms(s, points)) / dt


def curve_energy(s: FlowStack, c: Curve) -> float:
    with ag.no_grad():
        return float(curve_energy_tensor(s, Tensor(c.points), c.dt).data)


def _energy_and_grad(s: FlowStack, points: np.ndarray, dt: float) -> tuple[float, np.ndarray]:
    p = Tensor(points, requires_grad=True)
    energy = curve_energy_tensor(s, p, dt)
    ag.backward(energy)
    return float(energy.data), p.grad[1:-1]


def _metric_hessian(s: FlowStack, points: np.ndarray, dt: float) -> np.ndarray:
    """Energy Hessian in the interior points with ``G`` frozen (Gauss-Newton).

    Block tridiagonal: diagonal ``(G_{j-1} + G_j) / dt``, off-diagonal
    ``-G_j / dt``, where ``G_i`` is the metric at the left end of segment ``i``.
    """
    n_seg, d = points.shape[0] - 1, points.shape[1]
    G = metric_field(s, points[:-1])
    n_int = n_seg - 1
    H = np.zeros((n_int * d, n_int * d))
    for j in range(n_int):
        blk = slice(j * d, (j + 1) * d)
        H[blk, blk] = G[j] + G[j + 1]
        if j + 1 < n_int:
            nxt = slice((j + 1) * d, (j + 2) * d)
            H[blk, nxt] = -G[j + 1]
            H[nxt, blk] = -G[j + 1]
    H /= dt
    # a tiny ridge keeps the solve well posed when G is nearly singular
    H[np.diag_indices_from(H)] += 1e-12 * np.trace(H) / H.shape[0]
    return H


def geodesic(s: FlowStack, za, zb, N: int = 32, iters: int = 500, tol: float = 1e-12,
             a: float = 0.0, b: float = 1.0) -> GeodesicResult:
    """Minimize the discrete curve energy between fixed endpoints.

    Each descent direction solves the energy Hessian with the metric held
    fixed (a Gauss-Newton step; for a flat metric this is exact, so one step
    suffices).  A step is accepted only if it lowers the energy; otherwise
    it is halved, at most 30 times.  Accepted steps double the next trial
    step, capped at the full step.  Never raises on non-convergence; the
    result then carries ``converged=False``.
    """
    za, zb = np.asarray(za, dtype=np.float64), np.asarray(zb, dtype=np.float64)
    if np.array_equal(za, zb):
        raise ContractError("geodesic: endpoints must differ")
    curve = Curve.straight(za, zb, N, a, b)
    dt = curve.dt
    points = curve.points
    d = points.shape[1]
    energy, grad = _energy_and_grad(s, points, dt)
    energies = [energy]
    lr = 1.0
    converged = N < 2
    for _ in range(iters if not converged else 0):
        H = _metric_hessian(s, points, dt)
        direction = np.linalg.solve(H, grad.reshape(-1)).reshape(-1, d)
        accepted = False
        trial_lr = lr
        for _ in range(31):
            trial = points.copy()
            trial[1:-1] -= trial_lr * direction
            with ag.no_grad():
                trial_energy = float(curve_energy_tensor(s, Tensor(trial), dt).data)
            if trial_energy < energy:
                accepted = True
                break
            trial_lr *= 0.5
        if not accepted:
            converged = True
            break
        improvement = energy - trial_energy
        points = trial
        energy, grad = _energy_and_grad(s, points, dt)
        energies.append(energy)
        lr = min(2.0 * trial_lr, 1.0)
        if improvement <= tol * max(1.0, energy):
            converged = True
            break
    if not converged:
        log.warning("geodesic: no convergence after %d iterations (energy %.6g)", iters, energy)
    return GeodesicResult(Curve(points, a, b), energies, converged)


def curvature_grid(s: FlowStack, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """``sqrt(det G)`` on a 2-D grid; rows follow ``ys``, columns ``xs``."""
    if s.flows and s.flows[0].dim != 2:
        raise ContractError("curvature_grid needs a 2-D latent space")
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return np.sqrt(det_metric(s, pts)).reshape(len(ys), len(xs))
