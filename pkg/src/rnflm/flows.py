"""Planar normalizing flows ``f(z) = z + u_hat * tanh(w.z + b)``.

``u`` is left unconstrained during optimisation; every forward pass maps it
to ``u_hat`` with ``u_hat.w = -1 + softplus(w.u) >= -1`` so each flow stays
invertible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DegenerateDirectionError, ShapeError, SingularFlowError

SINGULAR_TOL = 1e-12
DEGENERATE_TOL = 1e-12
# log(e - 1), nudged to the float where -1 + softplus is exactly 0
IDENTITY_ALIGNMENT = 0.5413248546129182


@dataclass
class PlanarFlowParams:
    u: Tensor
    w: Tensor
    b: Tensor

    @property
    def dim(self) -> int:
        return self.u.shape[0]

    @classmethod
    def from_arrays(cls, u, w, b, requires_grad: bool = False) -> "PlanarFlowParams":
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        if u.shape != w.shape:
            raise ShapeError(f"planar flow: u {u.shape} and w {w.shape} differ")
        return cls(Tensor(u, requires_grad), Tensor(w, requires_grad),
                   Tensor(np.reshape(b, (1,)), requires_grad))

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, scale: float = 0.1,
               requires_grad: bool = True) -> "PlanarFlowParams":
        return cls.from_arrays(rng.normal(0.0, scale, dim), rng.normal(0.0, scale, dim), 0.0,
                               requires_grad=requires_grad)

    @classmethod
    def identity(cls, w, b=0.0, requires_grad: bool = False) -> "PlanarFlowParams":
        """A flow whose projected ``u_hat`` vanishes, so ``f`` is the identity.

        Under the softplus projection ``u = 0`` is *not* the identity; the
        fixed point is ``w.u = log(e - 1)``, where ``-1 + softplus(w.u) = 0``.
        ``u_hat`` is then zero up to rounding.
        """
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        u = IDENTITY_ALIGNMENT * w / np.dot(w, w)
        return cls.from_arrays(u, w, b, requires_grad)

    def parameters(self) -> dict[str, Tensor]:
        return {"u": self.u, "w": self.w, "b": self.b}


@dataclass
class FlowStack:
    flows: list[PlanarFlowParams] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.flows)

    def __iter__(self):
        return iter(self.flows)

    @classmethod
    def random(cls, n_flows: int, dim: int, rng: np.random.Generator, scale: float = 0.1,
               requires_grad: bool = True) -> "FlowStack":
        return cls([PlanarFlowParams.random(dim, rng, scale, requires_grad) for _ in range(n_flows)])

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, flow in enumerate(self.flows):
            for name, t in flow.parameters().items():
                out[f"{i}.{name}"] = t
        return out


def _projected(p: PlanarFlowParams) -> tuple[Tensor, Tensor]:
    w_sq = ag.sum_(ag.square(p.w))
    if w_sq.data < DEGENERATE_TOL**2:
        raise DegenerateDirectionError(f"planar flow: |w| = {np.sqrt(w_sq.data):.3g} is degenerate")
    wu = ag.sum_(p.w * p.u)
    m = ag.softplus(wu) - 1.0
    u_hat = p.u + (m - wu) * p.w / w_sq
    return u_hat, m


def project_u(p: PlanarFlowParams) -> Tensor:
    """Return ``u_hat`` satisfying ``u_hat.w = -1 + softplus(w.u)``."""
    return _projected(p)[0]


def planar_forward(p: PlanarFlowParams, z: Tensor) -> tuple[Tensor, Tensor]:
    """Apply one flow to a ``(batch, d)`` latent batch.

    Returns the transformed batch and ``log|1 + u_hat.w * tanh'(w.z + b)|``
    per row.
    """
    z = ag.astensor(z)
    if z.ndim != 2 or z.shape[1] != p.dim:
        raise ShapeError(f"planar_forward: latent batch {z.shape} vs flow dim {p.dim}")
    u_hat, m = _projected(p)
    pre = ag.matmul(z, ag.reshape(p.w, (p.dim, 1))) + p.b
    h = ag.tanh(pre)
    z_out = z + h * ag.reshape(u_hat, (1, p.dim))
    det = 1.0 + (1.0 - ag.square(h)) * m
    if np.any(np.abs(det.data) < SINGULAR_TOL):
        raise SingularFlowError("planar_forward: Jacobian determinant below 1e-12")
    logdet = ag.log(ag.abs_(det))
    return z_out, ag.reshape(logdet, (z.shape[0],))


def stack_forward(s: FlowStack, z0: Tensor) -> tuple[Tensor, Tensor]:
    """Compose the flows in order; the first flow applies first."""
    z = ag.astensor(z0)
    total = None
    for flow in s.flows:
        z, logdet = planar_forward(flow, z)
        total = logdet if total is None else total + logdet
    if total is None:
        total = Tensor(np.zeros(z.shape[0]))
    return z, total


def stack_trajectory(s: FlowStack, z0: np.ndarray) -> list[np.ndarray]:
    """Intermediate points ``[z0, z1, ..., zT]`` as plain arrays."""
    points = [np.asarray(z0, dtype=np.float64)]
    with ag.no_grad():
        z = Tensor(points[0])
        for flow in s.flows:
            z, _ = planar_forward(flow, z)
            points.append(z.data)
    return points


def planar_jacobian(p: PlanarFlowParams, z: np.ndarray) -> np.ndarray:
    """Dense ``(batch, d, d)`` Jacobian ``I + u_hat phi w^T``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    with ag.no_grad():
        u_hat = project_u(p).data
    w, b = p.w.data, p.b.data[0]
    phi = 1.0 - np.tanh(z @ w + b) ** 2
    eye = np.eye(p.dim)
    return eye[None] + phi[:, None, None] * np.outer(u_hat, w)[None]


def stack_jacobian(s: FlowStack, z0: np.ndarray) -> np.ndarray:
    """Chained Jacobian ``J_T ... J_1`` of the whole stack at each row of ``z0``."""
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    points = stack_trajectory(s, z0)
    jac = np.broadcast_to(np.eye(z0.shape[1]), (z0.shape[0], z0.shape[1], z0.shape[1])).copy()
    for flow, z in zip(s.flows, points[:-1]):
        jac = planar_jacobian(flow, z) @ jac
    return jac


def planar_inverse(p: PlanarFlowParams, y: np.ndarray, tol: float = 1e-13, max_iter: int = 200) -> np.ndarray:
    """Invert one flow numerically.

    Writing ``a = w.z``, the image satisfies ``w.y = a + (w.u_hat) tanh(a + b)``,
    which is nondecreasing in ``a``; it is solved by bisection and ``z`` is
    recovered as ``y - u_hat tanh(a + b)``.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    with ag.no_grad():
        u_hat = project_u(p).data
    w, b = p.w.data, p.b.data[0]
    wu = float(w @ u_hat)
    target = y @ w
    span = abs(wu) + 1.0
    lo, hi = target - span, target + span
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        too_big = mid + wu * np.tanh(mid + b) > target
        hi = np.where(too_big, mid, hi)
        lo = np.where(too_big, lo, mid)
        if np.max(hi - lo) < tol:
            break
    a = 0.5 * (lo + hi)
    return y - np.tanh(a + b)[:, None] * u_hat[None, :]


def stack_inverse(s: FlowStack, y: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(y, dtype=np.float64))
    for flow in reversed(s.flows):
        z = planar_inverse(flow, z)
    return z


def check_dims(s: FlowStack, dim: int) -> None:
    for i, flow in enumerate(s.flows):
        if flow.dim != dim:
            raise ContractError(f"flow {i} has dimension {flow.dim}, expected {dim}")
