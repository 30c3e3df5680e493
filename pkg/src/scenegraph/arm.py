"""Relationship classification with an adaptively gated frequency prior.

The visual term fuses subject, object and union features in two stages::

    x * y = relu(Wx x + Wy y) - (Wx x - Wy y)**2

read left to right: ``(z_i * z_j) * u_ij``, each stage with its own
projections. The prior term is the log-softmax-softened class-pair
frequency vector, scaled per pair by ``sigmoid(W_p u_ij)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .linalg import as_mat, check_shape, log_softmax, relu, sigmoid
from .message_passing import _Params, uniform_init

# bias modes: "arm" = gated softened prior, "raw" = ungated raw probabilities, "none"
BIAS_MODES = ("arm", "raw", "none")


@dataclass
class ARMParams(_Params):
    W_p: np.ndarray   # R x d_u
    W_r: np.ndarray   # R x f
    W_x1: np.ndarray  # f x d
    W_y1: np.ndarray  # f x d
    W_x2: np.ndarray  # f x f
    W_y2: np.ndarray  # f x d_u

    @property
    def f(self) -> int:
        return self.W_r.shape[1]

    def validate(self, R: int, d: int, d_u: int) -> None:
        f = self.f
        check_shape("W_p", self.W_p, (R, d_u))
        check_shape("W_r", self.W_r, (R, f))
        check_shape("W_x1", self.W_x1, (f, d))
        check_shape("W_y1", self.W_y1, (f, d))
        check_shape("W_x2", self.W_x2, (f, f))
        check_shape("W_y2", self.W_y2, (f, d_u))


def init_arm(rng, R: int, d: int, d_u: int, f: int) -> ARMParams:
    return ARMParams(
        W_p=uniform_init(rng, (R, d_u)),
        W_r=uniform_init(rng, (R, f)),
        W_x1=uniform_init(rng, (f, d)),
        W_y1=uniform_init(rng, (f, d)),
        W_x2=uniform_init(rng, (f, f)),
        W_y2=uniform_init(rng, (f, d_u)),
    )


def soften_prior(p_vec) -> np.ndarray:
    return log_softmax(as_mat(p_vec))


def bias_gate(u, W_p) -> np.ndarray:
    u, W_p = as_mat(u), as_mat(W_p)
    if W_p.shape[-1] != u.shape[-1]:
        raise DimensionError(f"bias_gate: W_p {W_p.shape} cannot project union feature of length {u.shape[-1]}")
    return sigmoid(u @ W_p.T)


def fuse(x, y, W_x, W_y) -> np.ndarray:
    """Works on single vectors or on row-stacked batches."""
    x, y = as_mat(x), as_mat(y)
    if W_x.shape[1] != x.shape[-1] or W_y.shape[1] != y.shape[-1] or W_x.shape[0] != W_y.shape[0]:
        raise DimensionError(
            f"fuse: W_x {W_x.shape} / W_y {W_y.shape} vs inputs {x.shape[-1]}, {y.shape[-1]}")
    a, b = x @ W_x.T, y @ W_y.T
    return relu(a + b) - (a - b) ** 2


def _fuse_backward(a, b, dh):
    on = (a + b) > 0
    diff = 2.0 * (a - b) * dh
    return dh * on - diff, dh * on + diff


def rel_logits(zs, zo, u, prior, params: ARMParams, bias: str = "arm", softened: bool = False):
    """Pre-softmax scores for a batch of P pairs.

    ``zs``/``zo`` are P x d subject/object features, ``u`` P x d_u, ``prior``
    P x R raw prior vectors (or already softened when ``softened``).
    Returns ``(logits, cache)``.
    """
    zs, zo, u, prior = as_mat(zs), as_mat(zo), as_mat(u), as_mat(prior)
    if bias not in BIAS_MODES:
        raise ValueError(f"unknown bias mode {bias!r}")
    p = params
    a1, b1 = zs @ p.W_x1.T, zo @ p.W_y1.T
    h1 = relu(a1 + b1) - (a1 - b1) ** 2
    a2, b2 = h1 @ p.W_x2.T, u @ p.W_y2.T
    h2 = relu(a2 + b2) - (a2 - b2) ** 2
    logits = h2 @ p.W_r.T
    gate = ptil = None
    if bias == "arm":
        ptil = prior if softened else log_softmax(prior)
        gate = sigmoid(u @ p.W_p.T)
        logits = logits + gate * ptil
    elif bias == "raw":
        logits = logits + prior
    cache = dict(zs=zs, zo=zo, u=u, a1=a1, b1=b1, h1=h1, a2=a2, b2=b2, h2=h2,
                 gate=gate, ptil=ptil, bias=bias)
    return logits, cache


def rel_logits_backward(cache, dlogits, params: ARMParams):
    """Returns ``(dzs, dzo, du, grads)``."""
    p, c = params, cache
    dW_r = dlogits.T @ c["h2"]
    dh2 = dlogits @ p.W_r
    du = np.zeros_like(c["u"])
    dW_p = np.zeros_like(p.W_p)
    if c["bias"] == "arm":
        g = c["gate"]
        dpre = dlogits * c["ptil"] * g * (1.0 - g)
        dW_p = dpre.T @ c["u"]
        du += dpre @ p.W_p
    da2, db2 = _fuse_backward(c["a2"], c["b2"], dh2)
    dW_x2 = da2.T @ c["h1"]
    dW_y2 = db2.T @ c["u"]
    du += db2 @ p.W_y2
    dh1 = da2 @ p.W_x2
    da1, db1 = _fuse_backward(c["a1"], c["b1"], dh1)
    dW_x1 = da1.T @ c["zs"]
    dW_y1 = db1.T @ c["zo"]
    dzs = da1 @ p.W_x1
    dzo = db1 @ p.W_y1
    return dzs, dzo, du, ARMParams(dW_p, dW_r, dW_x1, dW_y1, dW_x2, dW_y2)


def rel_scores(z_i, z_j, u_ij, prior_vec, params: ARMParams, softened: bool = False,
               bias: str = "arm") -> np.ndarray:
    """Relationship distribution for one ordered pair (softmax of :func:`rel_logits`)."""
    z_i, z_j, u_ij, prior_vec = map(as_mat, (z_i, z_j, u_ij, prior_vec))
    params.validate(prior_vec.shape[0], z_i.shape[0], u_ij.shape[0])
    if z_j.shape != z_i.shape:
        raise DimensionError(f"rel_scores: subject {z_i.shape} and object {z_j.shape} differ")
    logits, _ = rel_logits(z_i[None], z_j[None], u_ij[None], prior_vec[None], params, bias, softened)
    return np.exp(log_softmax(logits[0]))


def predict_relationship(p_ij, exclude_background: bool = False) -> int:
    """Argmax predicate; ties go to the lowest index."""
    p_ij = as_mat(p_ij)
    if exclude_background:
        return 1 + int(np.argmax(p_ij[1:]))
    return int(np.argmax(p_ij))
