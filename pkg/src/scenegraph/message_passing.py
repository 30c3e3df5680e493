"""Attention-based message passing over fully connected object graphs.

Three variants share the residual form ``z_i = x_i + W * relu(context_i)``:

* GCMP: concatenation scores ``w^T [x_i, x_j]``.
* S-GCMP: receiver-independent scores ``w_e^T x_j``.
* DMP: tri-linear, direction-aware scores over subject, object and union
  features; the attention map and its transpose are both used to weight
  neighbours, followed by a small transformer block with layer norm.

The neighbourhood of node ``i`` is every other node. Features live in an
``n x d`` matrix; union features in an ``n x n x d_u`` array (diagonal
ignored). Every forward has a ``*_backward`` that takes the cache it
returned.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

from .errors import DataError, DimensionError, EmptyNeighborhoodError
from .linalg import (LN_EPS, as_mat, check_shape, layer_norm, layer_norm_backward, relu,
                     softmax_rows, softmax_rows_backward)


class _Params:
    """Mixin for parameter dataclasses: name -> array views and copying."""

    def arrays(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self):
        return type(self)(**{k: np.zeros_like(v) for k, v in self.arrays().items()})


@dataclass
class GCMPParams(_Params):
    W_z: np.ndarray  # d x d
    W_v: np.ndarray  # d x d
    w: np.ndarray    # 2d

    def validate(self, d: int) -> None:
        check_shape("W_z", self.W_z, (d, d))
        check_shape("W_v", self.W_v, (d, d))
        check_shape("w", self.w, (2 * d,))


@dataclass
class SGCMPParams(_Params):
    W_z: np.ndarray  # d x d
    W_v: np.ndarray  # d x d
    w_e: np.ndarray  # d

    def validate(self, d: int) -> None:
        check_shape("W_z", self.W_z, (d, d))
        check_shape("W_v", self.W_v, (d, d))
        check_shape("w_e", self.w_e, (d,))


@dataclass
class DMPParams(_Params):
    W_s: np.ndarray      # d x d
    W_o: np.ndarray      # d x d
    W_u: np.ndarray      # d x d_u
    w_e: np.ndarray      # d
    W_t3: np.ndarray     # d/2 x d  (d x d for the no-stack ablation)
    W_t2: np.ndarray     # h x d
    W_t1: np.ndarray     # d x h
    ln_gain: np.ndarray  # h
    ln_bias: np.ndarray  # h

    @property
    def d(self) -> int:
        return self.W_s.shape[0]

    @property
    def d_u(self) -> int:
        return self.W_u.shape[1]

    @property
    def h(self) -> int:
        return self.W_t2.shape[0]

    @property
    def stacked(self) -> bool:
        return 2 * self.W_t3.shape[0] == self.d

    def validate(self, d: int | None = None, d_u: int | None = None) -> None:
        d = self.d if d is None else d
        d_u = self.d_u if d_u is None else d_u
        h = self.W_t2.shape[0]
        if d % 2:
            raise DimensionError(f"DMP feature dimension d={d} must be even")
        check_shape("W_s", self.W_s, (d, d))
        check_shape("W_o", self.W_o, (d, d))
        check_shape("W_u", self.W_u, (d, d_u))
        check_shape("w_e", self.w_e, (d,))
        if self.W_t3.shape not in ((d // 2, d), (d, d)):
            raise DimensionError(f"W_t3: expected ({d // 2}, {d}) or ({d}, {d}), got {self.W_t3.shape}")
        check_shape("W_t2", self.W_t2, (h, d))
        check_shape("W_t1", self.W_t1, (d, h))
        check_shape("ln_gain", self.ln_gain, (h,))
        check_shape("ln_bias", self.ln_bias, (h,))


def uniform_init(rng: np.random.Generator, shape) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in is the last axis."""
    bound = 1.0 / np.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape)


def init_gcmp(rng, d: int) -> GCMPParams:
    return GCMPParams(uniform_init(rng, (d, d)), uniform_init(rng, (d, d)), uniform_init(rng, (2 * d,)))


def init_sgcmp(rng, d: int) -> SGCMPParams:
    return SGCMPParams(uniform_init(rng, (d, d)), uniform_init(rng, (d, d)), uniform_init(rng, (d,)))


def init_dmp(rng, d: int, d_u: int, h: int | None = None, stack: bool = True) -> DMPParams:
    if d % 2:
        raise DimensionError(f"DMP feature dimension d={d} must be even")
    h = h or max(1, d // 4)
    return DMPParams(
        W_s=uniform_init(rng, (d, d)),
        W_o=uniform_init(rng, (d, d)),
        W_u=uniform_init(rng, (d, d_u)),
        w_e=uniform_init(rng, (d,)),
        W_t3=uniform_init(rng, (d // 2 if stack else d, d)),
        W_t2=uniform_init(rng, (h, d)),
        W_t1=uniform_init(rng, (d, h)),
        ln_gain=np.ones(h),
        ln_bias=np.zeros(h),
    )


def neighborhood_mask(n: int) -> np.ndarray:
    """True on excluded entries: a node is not its own neighbour."""
    return np.eye(n, dtype=bool)


def as_union_features(U, n: int) -> np.ndarray:
    """Accept an ``n x n x d_u`` array or a ``{(i, j): vector}`` mapping."""
    if isinstance(U, Mapping):
        first = next(iter(U.values()), None)
        if first is None:
            if n > 1:
                raise DataError("union features missing for pair (0, 1)")
            return np.zeros((n, n, 1))
        out = np.zeros((n, n, len(first)))
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                if (i, j) not in U:
                    raise DataError(f"union features missing for pair ({i}, {j})")
                out[i, j] = U[(i, j)]
        return out
    U = as_mat(U)
    if U.ndim != 3 or U.shape[:2] != (n, n):
        raise DataError(f"union features must be {n}x{n}xd_u, got shape {U.shape}")
    return U


# --------------------------------------------------------------------------
# GCMP / S-GCMP
# --------------------------------------------------------------------------

def _context_forward(X, scores, W_v, W_z):
    n = X.shape[0]
    if n == 1:
        return X.copy(), np.zeros((1, 1)), None
    A = softmax_rows(scores, neighborhood_mask(n))
    V = X @ W_v.T
    Q = A @ V
    Z = X + relu(Q) @ W_z.T
    return Z, A, (X, A, V, Q)


def _context_backward(cache, dZ, W_v, W_z):
    """Returns (dX_direct, dscores, dW_v, dW_z)."""
    X, A, V, Q = cache
    R = relu(Q)
    dW_z = dZ.T @ R
    dQ = (dZ @ W_z) * (Q > 0)
    dA = dQ @ V.T
    dV = A.T @ dQ
    dW_v = dV.T @ X
    dX = dZ + dV @ W_v
    return dX, softmax_rows_backward(A, dA), dW_v, dW_z


def gcmp_scores(X, w) -> np.ndarray:
    d = X.shape[1]
    return (X @ w[:d])[:, None] + (X @ w[d:])[None, :]


def gcmp_forward(X, params: GCMPParams):
    """Returns ``(Z, A, cache)``; ``A[i, j]`` is c_ij."""
    X = as_mat(X)
    params.validate(X.shape[1])
    Z, A, cache = _context_forward(X, gcmp_scores(X, params.w), params.W_v, params.W_z)
    return Z, A, cache


def gcmp_backward(cache, dZ, params: GCMPParams):
    """Returns ``(dX, grads)`` with ``grads`` a :class:`GCMPParams`."""
    if cache is None:
        return dZ.copy(), params.zeros_like()
    X = cache[0]
    d = X.shape[1]
    dX, dS, dW_v, dW_z = _context_backward(cache, dZ, params.W_v, params.W_z)
    row, col = dS.sum(axis=1), dS.sum(axis=0)
    dw = np.concatenate([X.T @ row, X.T @ col])
    dX = dX + np.outer(row, params.w[:d]) + np.outer(col, params.w[d:])
    return dX, GCMPParams(dW_z, dW_v, dw)


def sgcmp_forward(X, params: SGCMPParams):
    X = as_mat(X)
    params.validate(X.shape[1])
    n = X.shape[0]
    scores = np.tile(X @ params.w_e, (n, 1))
    return _context_forward(X, scores, params.W_v, params.W_z)


def sgcmp_backward(cache, dZ, params: SGCMPParams):
    if cache is None:
        return dZ.copy(), params.zeros_like()
    X = cache[0]
    dX, dS, dW_v, dW_z = _context_backward(cache, dZ, params.W_v, params.W_z)
    col = dS.sum(axis=0)
    dX = dX + np.outer(col, params.w_e)
    return dX, SGCMPParams(dW_z, dW_v, X.T @ col)


# --------------------------------------------------------------------------
# DMP
# --------------------------------------------------------------------------

def dmp_coefficients(X, U, params: DMPParams) -> np.ndarray:
    """``E[i, j] = w_e^T (W_s x_i * W_o x_j * W_u u_ij)``; diagonal is 0."""
    X = as_mat(X)
    n = X.shape[0]
    U = as_union_features(U, n)
    params.validate(X.shape[1], U.shape[2])
    E, _ = _dmp_coefficients(X, U, params)
    return E


def _dmp_coefficients(X, U, p: DMPParams):
    S = X @ p.W_s.T
    O = X @ p.W_o.T
    # Row-wise reductions instead of batched matmul: mirrored pairs then round
    # identically, so tied W_s = W_o with symmetric U gives E == E.T exactly.
    Uu = (U[:, :, None, :] * p.W_u).sum(axis=-1)
    P = S[:, None, :] * O[None, :, :] * Uu
    E = (P * p.w_e).sum(axis=-1)
    np.fill_diagonal(E, 0.0)
    return E, (S, O, Uu, P)


def dmp_normalize(E) -> np.ndarray:
    """Row softmax over each node's neighbourhood (diagonal excluded)."""
    E = as_mat(E)
    n = E.shape[0]
    if n < 2:
        raise EmptyNeighborhoodError("dmp_normalize needs at least two nodes")
    return softmax_rows(E, neighborhood_mask(n))


def dmp_aggregate(A, X, params: DMPParams) -> np.ndarray:
    """Row i is ``sum_j [A_ij, A_ji]^T (x) W_t3 x_j``: the forward-weighted sum
    in the first half, the backward-weighted sum in the second."""
    A, X = as_mat(A), as_mat(X)
    M = X @ params.W_t3.T
    if not params.stacked:
        raise DimensionError("dmp_aggregate requires W_t3 of shape (d/2, d)")
    return np.concatenate([A @ M, A.T @ M], axis=1)


def _transformer_forward(X, G, p: DMPParams):
    H = G @ p.W_t2.T
    L = layer_norm(H, p.ln_gain, p.ln_bias, LN_EPS)
    R = relu(L)
    return X + R @ p.W_t1.T, (H, L, R)


def _forward(X, U, p: DMPParams, stack: bool):
    X = as_mat(X)
    n = X.shape[0]
    U = as_union_features(U, n)
    p.validate(X.shape[1], U.shape[2])
    if stack != p.stacked:
        want = "d/2" if stack else "d"
        raise DimensionError(f"W_t3 must have {want} rows for this variant, got {p.W_t3.shape[0]}")
    if n == 1:
        return X.copy(), np.zeros((1, 1)), None
    E, ecache = _dmp_coefficients(X, U, p)
    A = dmp_normalize(E)
    M = X @ p.W_t3.T
    G = np.concatenate([A @ M, A.T @ M], axis=1) if stack else A @ M
    Z, tcache = _transformer_forward(X, G, p)
    return Z, A, {"X": X, "U": U, "A": A, "M": M, "G": G, "E": ecache, "T": tcache, "stack": stack}


def dmp_forward(X, U, params: DMPParams):
    """Full DMP block. Returns ``(Z, A, cache)``."""
    return _forward(X, U, params, stack=True)


def no_stack_forward(X, U, params: DMPParams):
    """Ablation: only the forward direction ``A_ij W_t3' x_j`` with ``W_t3'`` d x d."""
    return _forward(X, U, params, stack=False)


def dmp_backward(cache, dZ, params: DMPParams):
    """Returns ``(dX, dU, grads)``; works for both the stacked and ablation forms."""
    if cache is None:
        return dZ.copy(), None, params.zeros_like()
    p = params
    X, U, A, M, G = cache["X"], cache["U"], cache["A"], cache["M"], cache["G"]
    H, L, R = cache["T"]
    S, O, Uu, P = cache["E"]

    dX = dZ.copy()
    dW_t1 = dZ.T @ R
    dL = (dZ @ p.W_t1) * (L > 0)
    dH, dgain, dbias = layer_norm_backward(H, p.ln_gain, p.ln_bias, dL, LN_EPS)
    dW_t2 = dH.T @ G
    dG = dH @ p.W_t2
    if cache["stack"]:
        k = M.shape[1]
        dG1, dG2 = dG[:, :k], dG[:, k:]
        dA = dG1 @ M.T + M @ dG2.T
        dM = A.T @ dG1 + A @ dG2
    else:
        dA = dG @ M.T
        dM = A.T @ dG
    dW_t3 = dM.T @ X
    dX += dM @ p.W_t3

    dE = softmax_rows_backward(A, dA)
    np.fill_diagonal(dE, 0.0)
    dP = dE[:, :, None] * p.w_e
    dw_e = np.einsum("ij,ijk->k", dE, P)
    dS = np.einsum("ijk,jk,ijk->ik", dP, O, Uu)
    dO = np.einsum("ijk,ik,ijk->jk", dP, S, Uu)
    dUu = dP * S[:, None, :] * O[None, :, :]
    dW_s = dS.T @ X
    dW_o = dO.T @ X
    dW_u = np.einsum("ijk,ijl->kl", dUu, U)
    dU = dUu @ p.W_u
    dX += dS @ p.W_s + dO @ p.W_o
    grads = DMPParams(dW_s, dW_o, dW_u, dw_e, dW_t3, dW_t2, dW_t1, dgain, dbias)
    return dX, dU, grads


# --------------------------------------------------------------------------
# attention export
# --------------------------------------------------------------------------

def export_attention(A, path) -> None:
    """Write an n x n attention map as CSV with 6 significant digits."""
    A = as_mat(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"attention map must be square, got {A.shape}")
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in A:
                writer.writerow([f"{v:.6g}" for v in row])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write attention map: {exc.strerror}", str(path)) from exc


def read_attention(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
