"""Kernel regularization of planar-flow Jacobians against latent clusters.

The regularized determinant of a flow at ``z`` is the raw determinant
scaled by a kernel evaluated between ``z`` and its nearest cluster center,
so points far from every cluster need a larger Jacobian to score the same.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, ShapeError
from .flows import FlowStack, PlanarFlowParams, planar_forward

DEFAULT_S_VALUES = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)
KERNEL_KINDS = ("inverse-multiquadratic", "gaussian")


@dataclass(frozen=True)
class ClusterSet:
    centers: np.ndarray

    def __post_init__(self):
        centers = np.array(self.centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] < 1:
            raise ContractError(f"ClusterSet needs a non-empty K x d matrix, got shape {centers.shape}")
        if len(np.unique(centers, axis=0)) != len(centers):
            raise ContractError("ClusterSet centers must be pairwise distinct")
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "inverse-multiquadratic"
    d: int = 32
    s_values: tuple[float, ...] = field(default=DEFAULT_S_VALUES)
    beta: float = 10.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ContractError(f"unknown kernel kind {self.kind!r}")
        object.__setattr__(self, "s_values", tuple(float(s) for s in self.s_values))
        if self.kind == "inverse-multiquadratic":
            if not self.s_values or any(s <= 0 for s in self.s_values):
                raise ContractError("inverse-multiquadratic kernel needs positive s values")
        elif self.beta <= 0:
            raise ContractError("gaussian kernel needs beta > 0")

    @property
    def max_value(self) -> float:
        return float(len(self.s_values)) if self.kind == "inverse-multiquadratic" else 1.0


def _sq_dists(z: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = z[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def nearest_cluster(z, cs: ClusterSet) -> tuple[int, float]:
    """Index of the closest center (lowest index on ties) and its squared distance."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != cs.dim:
        raise ShapeError(f"nearest_cluster: z has width {z.shape[1]}, clusters have {cs.dim}")
    d2 = _sq_dists(z, cs.centers)[0]
    k = int(np.argmin(d2))
    return k, float(d2[k])


def nearest_clusters(z: np.ndarray, cs: ClusterSet) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != cs.dim:
        raise ShapeError(f"nearest_clusters: z has width {z.shape[1]}, clusters have {cs.dim}")
    return np.argmin(_sq_dists(z, cs.centers), axis=1)


def _log_kernel_sq(d2: Tensor, cfg: KernelConfig) -> Tensor:
    if cfg.kind == "gaussian":
        return -cfg.beta * d2
    total = None
    for s in cfg.s_values:
        c = 2.0 * cfg.d * s
        term = c / (c + d2)
        total = term if total is None else total + term
    return ag.log(total)


def log_kernel(z: Tensor, centers, cfg: KernelConfig) -> Tensor:
    """Row-wise log kernel between a ``(batch, d)`` tensor and matched centers."""
    z = ag.astensor(z)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape != z.shape:
        raise ShapeError(f"log_kernel: z {z.shape} vs centers {centers.shape}")
    d2 = ag.sum_(ag.square(z - centers), axis=1)
    return _log_kernel_sq(d2, cfg)


def kernel_value(z, c, cfg: KernelConfig) -> Tensor:
    """Kernel value ``K(z, c)``; differentiable w.r.t. ``z``."""
    z = ag.astensor(z)
    c = np.asarray(c, dtype=np.float64)
    if z.shape[-1] != c.shape[-1]:
        raise ShapeError(f"kernel_value: z {z.shape} vs center {c.shape}")
    d2 = ag.sum_(ag.square(z - c), axis=-1)
    if cfg.kind == "gaussian":
        return ag.exp(-cfg.beta * d2)
    total = None
    for s in cfg.s_values:
        const = 2.0 * cfg.d * s
        term = const / (const + d2)
        total = term if total is None else total + term
    return total


def regularized_logdet(p: PlanarFlowParams, z: Tensor, cs: ClusterSet, cfg: KernelConfig) -> Tensor:
    """``log|1 + u_hat phi(z) w| + log K(z, c_nearest)`` for each row of ``z``.

    The nearest-center assignment is computed from the values of ``z`` and
    held constant under differentiation.
    """
    z = ag.astensor(z)
    _, raw = planar_forward(p, z)
    return raw + log_kernel(z, cs.centers[nearest_clusters(z.data, cs)], cfg)


def stack_forward_regularized(s: FlowStack, z0: Tensor, cs: ClusterSet | None,
                              cfg: KernelConfig | None) -> tuple[Tensor, Tensor, Tensor | None]:
    """Push ``z0`` through the stack, summing raw and regularized log-dets.

    Each flow's kernel term is evaluated at that flow's input.  When
    ``cs`` is ``None`` the regularized sum is ``None``.
    """
    z = ag.astensor(z0)
    raw_total = Tensor(np.zeros(z.shape[0]))
    reg_total = Tensor(np.zeros(z.shape[0])) if cs is not None else None
    for flow in s.flows:
        if cs is not None:
            lk = log_kernel(z, cs.centers[nearest_clusters(z.data, cs)], cfg)
        z, raw = planar_forward(flow, z)
        raw_total = raw_total + raw
        if cs is not None:
            reg_total = reg_total + (raw + lk)
    return z, raw_total, reg_total


def _kmeans_pp(codes: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = codes.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((codes - codes[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise ContractError("gather_clusters: fewer distinct codes than clusters")
        idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((codes - codes[idx]) ** 2, axis=1))
    return codes[chosen].copy()


def gather_clusters(codes, K: int = 20, seed: int = 0, max_iter: int = 100) -> ClusterSet:
    """Lloyd's k-means with k-means++ seeding over an ``N x d`` code matrix."""
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2:
        raise ShapeError(f"gather_clusters: codes must be N x d, got {codes.shape}")
    if codes.shape[0] < K:
        raise ContractError(f"gather_clusters: N = {codes.shape[0]} < K = {K}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(codes, K, rng)
    assign = None
    for _ in range(max_iter):
        new_assign = np.argmin(_sq_dists(codes, centers), axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(K):
            members = codes[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # empty cluster: move it to the point worst served by the others
                far = int(np.argmax(np.min(_sq_dists(codes, centers), axis=1)))
                centers[j] = codes[far]
    return ClusterSet(centers)


_HEADER = struct.Struct("<QQ")


def save_clusters(cs: ClusterSet, path) -> None:
    """Write ``K, d`` as two little-endian uint64 then row-major float64 centers."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(cs.K, cs.dim))
        fh.write(np.ascontiguousarray(cs.centers, dtype="<f8").tobytes())


def load_clusters(path) -> ClusterSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ContractError(f"{path}: truncated cluster file")
    k, d = _HEADER.unpack_from(raw)
    body = raw[_HEADER.size:]
    if len(body) != 8 * k * d:
        raise ContractError(f"{path}: expected {k}x{d} centers, found {len(body)} bytes")
    return ClusterSet(np.frombuffer(body, dtype="<f8").reshape(k, d).copy())
