"""Dense float64 numerics with paired forward / vector-Jacobian operations.

Matrices are plain ``numpy`` float64 arrays; vectors are 1-D arrays. Each
differentiable primitive has a ``*_backward`` companion taking the forward
inputs and the upstream gradient and returning one gradient per input.
:func:`finite_diff_check` is the independent oracle for all of them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, EmptyNeighborhoodError, NumericalError

LN_EPS = 1e-5

Mat = np.ndarray


def as_mat(x) -> Mat:
    return np.asarray(x, dtype=np.float64)


def _shape(x) -> str:
    return "x".join(str(s) for s in np.shape(x))


def check_shape(name: str, arr, shape) -> None:
    if tuple(np.shape(arr)) != tuple(shape):
        raise DimensionError(f"{name}: expected shape {tuple(shape)}, got {tuple(np.shape(arr))}")


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def mat_to_dict(m) -> dict:
    """``{rows, cols, data}`` in row-major order. Vectors are stored as n x 1."""
    m = as_mat(m)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2:
        raise DimensionError(f"cannot serialize array of shape {_shape(m)} as Mat")
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "data": m.ravel().tolist()}


def mat_from_dict(obj: dict, shape=None) -> Mat:
    rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    if rows <= 0 or cols <= 0 or len(data) != rows * cols:
        raise DimensionError(f"Mat payload {rows}x{cols} carries {len(data)} values")
    m = np.array(data, dtype=np.float64).reshape(rows, cols)
    if shape is not None:
        shape = tuple(shape)
        fits = {1: (rows, cols) == (shape[0], 1), 2: (rows, cols) == shape}
        if not fits.get(len(shape), int(np.prod(shape)) == m.size):
            raise DimensionError(f"stored Mat {rows}x{cols} does not fit declared shape {shape}")
        m = m.reshape(shape)
    return m


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def matmul(a, b) -> Mat:
    a, b = as_mat(a), as_mat(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {_shape(a)} by {_shape(b)}")
    return a @ b


def matmul_backward(a, b, upstream):
    g = as_mat(upstream)
    return g @ as_mat(b).T, as_mat(a).T @ g


def hadamard(a, b) -> Mat:
    a, b = as_mat(a), as_mat(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {_shape(a)} and {_shape(b)} differ")
    return a * b


def hadamard_backward(a, b, upstream):
    g = as_mat(upstream)
    return g * as_mat(b), g * as_mat(a)


def _mask_array(n: int, mask) -> np.ndarray:
    """Boolean array, True where an index is excluded."""
    out = np.zeros(n, dtype=bool)
    if mask is None:
        return out
    m = np.asarray(mask)
    if m.dtype == bool:
        if m.shape != (n,):
            raise DimensionError(f"mask of shape {_shape(m)} for vector of length {n}")
        return m.copy()
    out[m.astype(int)] = True
    return out


def softmax_row(v, mask=None) -> np.ndarray:
    """Softmax over the unmasked entries; masked entries are exactly 0.

    ``mask`` is either an index collection of excluded positions or a
    boolean array (True = excluded). Masked entries are left out of the
    normalizing sum rather than set to -inf.
    """
    v = as_mat(v)
    excluded = _mask_array(v.shape[0], mask)
    keep = ~excluded
    if not keep.any():
        raise EmptyNeighborhoodError("softmax_row: every index is masked")
    out = np.zeros_like(v)
    shifted = v[keep] - v[keep].max()
    e = np.exp(shifted)
    out[keep] = e / e.sum()
    return out


def softmax_row_backward(v, upstream, mask=None):
    s = softmax_row(v, mask)
    g = as_mat(upstream)
    return s * (g - np.dot(s, g))


def softmax_rows(E, mask=None) -> Mat:
    """Row-wise :func:`softmax_row`; ``mask`` is a boolean matrix (True = excluded)."""
    E = as_mat(E)
    if mask is None:
        mask = np.zeros(E.shape, dtype=bool)
    if np.any(mask.all(axis=1)):
        raise EmptyNeighborhoodError("softmax_rows: a row has every index masked")
    keep = ~mask
    shifted = np.where(keep, E, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(A, upstream) -> Mat:
    """Backward through row softmax, given its output ``A`` (masked entries 0)."""
    g = as_mat(upstream)
    return A * (g - np.sum(A * g, axis=1, keepdims=True))


def log_softmax(v) -> np.ndarray:
    v = as_mat(v)
    m = v.max(axis=-1, keepdims=True)
    return v - m - np.log(np.sum(np.exp(v - m), axis=-1, keepdims=True))


def log_softmax_backward(v, upstream):
    g = as_mat(upstream)
    s = np.exp(log_softmax(v))
    return g - s * np.sum(g, axis=-1, keepdims=True)


def sigmoid(v) -> np.ndarray:
    v = as_mat(v)
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid_backward(v, upstream):
    s = sigmoid(v)
    return as_mat(upstream) * s * (1.0 - s)


def relu(v) -> np.ndarray:
    return np.maximum(as_mat(v), 0.0)


def relu_backward(v, upstream):
    # subgradient 0 at the kink
    return as_mat(upstream) * (as_mat(v) > 0)


def layer_norm(v, gain, bias, eps: float = LN_EPS) -> np.ndarray:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    v, gain, bias = as_mat(v), as_mat(gain), as_mat(bias)
    if gain.shape != v.shape[-1:] or bias.shape != v.shape[-1:]:
        raise DimensionError(
            f"layer_norm: gain {_shape(gain)} / bias {_shape(bias)} vs input width {v.shape[-1]}")
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(var + eps) * gain + bias


def layer_norm_backward(v, gain, bias, upstream, eps: float = LN_EPS):
    v, gain, g = as_mat(v), as_mat(gain), as_mat(upstream)
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    dxhat = g * gain
    dv = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(g.ndim - 1))
    return dv, (g * xhat).sum(axis=red), g.sum(axis=red)


def kron_stack2(alpha_fwd: float, alpha_bwd: float, m) -> np.ndarray:
    """``[alpha_fwd, alpha_bwd]^T (x) m`` -- the two scaled copies of ``m`` stacked."""
    m = as_mat(m)
    return np.concatenate([alpha_fwd * m, alpha_bwd * m])


def kron_stack2_backward(alpha_fwd, alpha_bwd, m, upstream):
    m, g = as_mat(m), as_mat(upstream)
    k = m.shape[0]
    g1, g2 = g[:k], g[k:]
    return float(g1 @ m), float(g2 @ m), alpha_fwd * g1 + alpha_bwd * g2


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

@dataclass
class DiffOp:
    """A forward function plus its vector-Jacobian product.

    ``forward(*inputs) -> array``; ``backward(inputs, upstream) -> list`` of
    gradients, one per input, shaped like the inputs.
    """

    name: str
    forward: Callable
    backward: Callable


@dataclass
class InputReport:
    name: str
    max_rel_error: float
    worst_index: tuple
    kinks: int = 0


@dataclass
class GradCheckReport:
    op: str
    tolerance: float
    inputs: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.inputs), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def failing(self) -> list:
        return [r.name for r in self.inputs if r.max_rel_error > self.tolerance]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = [f"{r.name}={r.max_rel_error:.2e}" + (f" ({r.kinks} kinks)" if r.kinks else "")
                 for r in self.inputs]
        return f"{status} {self.op} max_rel={self.max_rel_error:.2e} tol={self.tolerance:.0e} :: " \
               + ", ".join(parts)


def finite_diff_check(op: DiffOp, inputs: Sequence, tolerance: float = 1e-5, *,
                      projection=None, seed: int = 0, names: Sequence[str] | None = None,
                      kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare ``op.backward`` against central finite differences.

    The output is reduced to a scalar by a fixed random projection
    (``sum(projection * out)``), which is also the upstream gradient handed
    to ``backward``. Step per entry is ``1e-6 * max(1, |x|)``. An entry whose
    left and right one-sided slopes disagree by more than ``kink_tol``
    (relative) sits on a non-differentiable point and is excluded.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    out = np.asarray(op.forward(*inputs), dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{op.name}: forward produced non-finite values; check aborted")
    if projection is None:
        projection = np.random.default_rng(seed).standard_normal(out.shape)
    projection = np.asarray(projection, dtype=np.float64)

    def scalar(args):
        val = float(np.sum(projection * np.asarray(op.forward(*args), dtype=np.float64)))
        if not np.isfinite(val):
            raise NumericalError(f"{op.name}: non-finite forward value during probing; check aborted")
        return val

    analytic = op.backward(inputs, projection)
    f0 = scalar(inputs)
    report = GradCheckReport(op=op.name, tolerance=tolerance)
    for k, x in enumerate(inputs):
        ga = np.asarray(analytic[k], dtype=np.float64)
        if ga.shape != x.shape:
            raise DimensionError(
                f"{op.name}: backward gradient for {names[k]} has shape {_shape(ga)}, "
                f"input has {_shape(x)}")
        worst, worst_idx, kinks = 0.0, (), 0
        for idx in np.ndindex(*x.shape):
            orig = x[idx]
            h = 1e-6 * max(1.0, abs(orig))
            x[idx] = orig + h
            fp = scalar(inputs)
            x[idx] = orig - h
            fm = scalar(inputs)
            x[idx] = orig
            numeric = (fp - fm) / (2 * h)
            right, left = (fp - f0) / h, (f0 - fm) / h
            if abs(right - left) > kink_tol * max(1.0, abs(right), abs(left)):
                kinks += 1
                continue
            a = float(ga[idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst, worst_idx = err, idx
        report.inputs.append(InputReport(names[k], worst, worst_idx, kinks))
    return report


def primitive_ops() -> dict:
    """Every primitive as a :class:`DiffOp`, keyed by name."""
    diag_mask = lambda n: np.eye(n, dtype=bool)  # noqa: E731
    return {
        "matmul": DiffOp("matmul", matmul, lambda ins, g: list(matmul_backward(*ins, g))),
        "hadamard": DiffOp("hadamard", hadamard, lambda ins, g: list(hadamard_backward(*ins, g))),
        "softmax_row": DiffOp("softmax_row", lambda v: softmax_row(v, [1]),
                              lambda ins, g: [softmax_row_backward(ins[0], g, [1])]),
        "softmax_rows": DiffOp(
            "softmax_rows", lambda E: softmax_rows(E, diag_mask(E.shape[0])),
            lambda ins, g: [softmax_rows_backward(softmax_rows(ins[0], diag_mask(ins[0].shape[0])), g)]),
        "log_softmax": DiffOp("log_softmax", log_softmax,
                              lambda ins, g: [log_softmax_backward(ins[0], g)]),
        "sigmoid": DiffOp("sigmoid", sigmoid, lambda ins, g: [sigmoid_backward(ins[0], g)]),
        "relu": DiffOp("relu", relu, lambda ins, g: [relu_backward(ins[0], g)]),
        "layer_norm": DiffOp("layer_norm", layer_norm,
                             lambda ins, g: list(layer_norm_backward(*ins, g))),
        "kron_stack2": DiffOp(
            "kron_stack2", lambda af, ab, m: kron_stack2(float(af[0]), float(ab[0]), m),
            lambda ins, g: [np.array([v]) if np.isscalar(v) else v for v in
                            kron_stack2_backward(float(ins[0][0]), float(ins[1][0]), ins[2], g)]),
    }


def primitive_fixture(name: str, rng: np.random.Generator, d: int = 16, n: int = 4) -> list:
    """Random inputs for :func:`primitive_ops` entry ``name``."""
    r = rng.standard_normal
    return {
        "matmul": lambda: [r((n, d)), r((d, n))],
        "hadamard": lambda: [r((n, d)), r((n, d))],
        "softmax_row": lambda: [r(d)],
        "softmax_rows": lambda: [r((n, n))],
        "log_softmax": lambda: [r(d)],
        "sigmoid": lambda: [r(d)],
        "relu": lambda: [r(d)],
        "layer_norm": lambda: [r((n, d)), 1.0 + 0.1 * r(d), 0.1 * r(d)],
        "kron_stack2": lambda: [r(1), r(1), r(d)],
    }[name]()
