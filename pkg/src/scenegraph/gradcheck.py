"""Finite-difference audit of every differentiable operation and of the joint
DMP -> classifier -> ARM loss, on seeded random fixtures."""
from __future__ import annotations

import time

import numpy as np

from .arm import ARMParams, BIAS_MODES, init_arm, rel_logits, rel_logits_backward
from .graph import BBox, Node, SceneGraph, Triplet, build_frequency_prior
from .linalg import DiffOp, finite_diff_check, primitive_fixture, primitive_ops
from .loss import LossConfig, nps_loss_batch
from .message_passing import (DMPParams, GCMPParams, SGCMPParams, dmp_backward, dmp_forward,
                              gcmp_backward, gcmp_forward, init_dmp, init_gcmp, init_sgcmp,
                              no_stack_forward, sgcmp_backward, sgcmp_forward)
from .trainer import ModelParams, image_loss, init_model, sample_pairs


def _symmetric_union(rng, n, d_u):
    U = rng.standard_normal((n, n, d_u))
    return (U + U.transpose(1, 0, 2)) / 2


def _mp_op(name, cls, forward, backward):
    def fwd(X, *arrs):
        return forward(X, cls(*arrs))[0]

    def bwd(ins, g):
        p = cls(*ins[1:])
        dX, grads = backward(forward(ins[0], p)[2], g, p)
        return [dX] + list(grads.arrays().values())
    return DiffOp(name, fwd, bwd)


def _dmp_op(name, forward):
    def fwd(X, U, *arrs):
        return forward(X, U, DMPParams(*arrs))[0]

    def bwd(ins, g):
        p = DMPParams(*ins[2:])
        dX, dU, grads = dmp_backward(forward(ins[0], ins[1], p)[2], g, p)
        return [dX, dU] + list(grads.arrays().values())
    return DiffOp(name, fwd, bwd)


def _arm_op(bias, prior):
    def fwd(zs, zo, u, *arrs):
        return rel_logits(zs, zo, u, prior, ARMParams(*arrs), bias)[0]

    def bwd(ins, g):
        p = ARMParams(*ins[3:])
        _, cache = rel_logits(ins[0], ins[1], ins[2], prior, p, bias)
        dzs, dzo, du, grads = rel_logits_backward(cache, g, p)
        return [dzs, dzo, du] + list(grads.arrays().values())
    return DiffOp(f"arm[{bias}]", fwd, bwd)


def fixture_graph(rng, n: int = 4, O: int = 6, R: int = 5) -> SceneGraph:
    """Random n-node graph with a chain of triplets so every node is covered."""
    nodes = [Node(int(rng.integers(1, O)), BBox(0.0 + i, 0.0, 10.0 + i, 10.0)) for i in range(n)]
    trips = [Triplet(i, int(rng.integers(1, R)), i + 1) for i in range(n - 1)]
    return SceneGraph(nodes, trips, "fixture")


def pipeline_op(graph, X, U, pairs, labels, prior, names, loss_cfg=LossConfig(), bias="arm",
                flip: str | None = None) -> DiffOp:
    """Total loss as a function of every parameter matrix. ``flip`` negates the
    analytic gradient of one parameter (fault injection for the checker)."""
    def params_of(arrs):
        return ModelParams.from_arrays(dict(zip(names, arrs)))

    def fwd(*arrs):
        ol, rl, _ = image_loss(params_of(arrs), X, U, graph, pairs, labels, prior, loss_cfg, bias, False)
        return np.array(ol + rl)

    def bwd(ins, g):
        _, _, grads = image_loss(params_of(ins), X, U, graph, pairs, labels, prior, loss_cfg, bias)
        flat = grads.arrays()
        return [(-1.0 if k == flip else 1.0) * float(g) * flat[k] for k in names]
    return DiffOp("pipeline", fwd, bwd)


def run_suite(seeds=range(10), d: int = 16, n: int = 4, d_u: int = 16, f: int = 8, O: int = 6,
              R: int = 5, tolerance: float = 1e-5, flip: str | None = None,
              include_pipeline: bool = True):
    """Returns ``(reports, seconds)``. One report per (operation, seed)."""
    t0 = time.perf_counter()
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, op in primitive_ops().items():
            reports.append(finite_diff_check(op, primitive_fixture(name, rng, d, n), tolerance, seed=seed))
        X = rng.standard_normal((n, d))
        U = _symmetric_union(rng, n, d_u)
        g = init_gcmp(rng, d)
        reports.append(finite_diff_check(_mp_op("gcmp", GCMPParams, gcmp_forward, gcmp_backward),
                                         [X] + list(g.arrays().values()), tolerance, seed=seed,
                                         names=["X"] + list(g.arrays())))
        s = init_sgcmp(rng, d)
        reports.append(finite_diff_check(_mp_op("sgcmp", SGCMPParams, sgcmp_forward, sgcmp_backward),
                                         [X] + list(s.arrays().values()), tolerance, seed=seed,
                                         names=["X"] + list(s.arrays())))
        for name, fwd, stack in (("dmp", dmp_forward, True), ("no_stack", no_stack_forward, False)):
            p = init_dmp(rng, d, d_u, stack=stack)
            p.ln_gain += 0.1 * rng.standard_normal(p.ln_gain.shape)
            p.ln_bias += 0.1 * rng.standard_normal(p.ln_bias.shape)
            reports.append(finite_diff_check(_dmp_op(name, fwd), [X, U] + list(p.arrays().values()),
                                             tolerance, seed=seed, names=["X", "U"] + list(p.arrays())))
        P = n * (n - 1)
        prior = rng.dirichlet(np.ones(R), size=P)
        a = init_arm(rng, R, d, d_u, f)
        ins = [rng.standard_normal((P, d)), rng.standard_normal((P, d)), rng.standard_normal((P, d_u))]
        for bias in BIAS_MODES:
            reports.append(finite_diff_check(_arm_op(bias, prior), ins + list(a.arrays().values()),
                                             tolerance, seed=seed,
                                             names=["z_subj", "z_obj", "u"] + list(a.arrays())))
        logits = rng.standard_normal((n, O))
        labels = rng.integers(0, O, n)
        thetas = rng.uniform(0, 1, n)
        thetas[0] = 1.0
        nps = DiffOp("nps_loss_batch", lambda L: np.array(nps_loss_batch(L, labels, thetas)[0]),
                     lambda ins, g: [float(g) * nps_loss_batch(ins[0], labels, thetas)[1]])
        reports.append(finite_diff_check(nps, [logits], tolerance, seed=seed, names=["logits"]))
        if include_pipeline:
            graph = fixture_graph(rng, n, O, R)
            pairs, plabels = sample_pairs(graph, 3.0, rng)
            prior_stats = build_frequency_prior([graph], O, R)
            model = init_model(seed, O, R, d, d_u, f)
            names = list(model.arrays())
            op = pipeline_op(graph, X, U, pairs, plabels, prior_stats, names, flip=flip)
            reports.append(finite_diff_check(op, list(model.arrays().values()), tolerance,
                                             projection=np.array(1.0), names=names))
    return reports, time.perf_counter() - t0
