"""End-to-end toy pipeline: DMP -> object classifier (NPS loss) -> ARM
(relationship cross-entropy), trained jointly with SGD + momentum."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .arm import ARMParams, init_arm, rel_logits, rel_logits_backward
from .errors import ConfigError, DimensionError, DivergenceError
from .graph import (BACKGROUND, FrequencyPrior, Node, SceneGraph, Triplet, box_overlap,
                    node_priority)
from .linalg import check_shape, log_softmax, mat_from_dict, mat_to_dict
from .loss import LossConfig, cross_entropy_batch, nps_loss_batch
from .message_passing import DMPParams, dmp_backward, dmp_forward, init_dmp, uniform_init

log = logging.getLogger(__name__)


@dataclass
class ModelParams:
    dmp: DMPParams
    obj_cls: np.ndarray  # O x d
    arm: ARMParams

    @property
    def dims(self) -> dict:
        return {"O": self.obj_cls.shape[0], "R": self.arm.W_r.shape[0], "d": self.dmp.d,
                "d_u": self.dmp.d_u, "f": self.arm.f, "h": self.dmp.h}

    def arrays(self) -> dict:
        """Flat ``name -> array`` view (shares memory with the parameters)."""
        out = {f"dmp.{k}": v for k, v in self.dmp.arrays().items()}
        out["obj_cls"] = self.obj_cls
        out.update({f"arm.{k}": v for k, v in self.arm.arrays().items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ModelParams":
        dmp = DMPParams(**{k[4:]: v for k, v in arrays.items() if k.startswith("dmp.")})
        arm = ARMParams(**{k[4:]: v for k, v in arrays.items() if k.startswith("arm.")})
        return cls(dmp, arrays["obj_cls"], arm)

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays({k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams.from_arrays({k: np.zeros_like(v) for k, v in self.arrays().items()})

    def validate(self, O: int, R: int, d: int, d_u: int) -> None:
        self.dmp.validate(d, d_u)
        check_shape("obj_cls", self.obj_cls, (O, d))
        self.arm.validate(R, d, d_u)


def init_model(seed: int, O: int, R: int, d: int, d_u: int, f: int = 64, h: int | None = None) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(init_dmp(rng, d, d_u, h), uniform_init(rng, (O, d)), init_arm(rng, R, d, d_u, f))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 6
    epochs: int = 50
    bg_fg_ratio: float = 3.0
    mu: float = 4.0
    seed: int = 0
    clip_norm: float = 10.0
    bias: str = "arm"

    def validate(self) -> "TrainConfig":
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.bg_fg_ratio < 0:
            raise ConfigError("need lr >= 0, batch_size >= 1, epochs >= 0, bg_fg_ratio >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        LossConfig(self.mu)
        return self


# --------------------------------------------------------------------------
# pairs
# --------------------------------------------------------------------------

def sample_pairs(graph: SceneGraph, ratio: float, rng: np.random.Generator):
    """All annotated ordered pairs plus up to ``ratio`` x that many background
    pairs drawn without replacement. Returns ``(pairs P x 2, labels P)``."""
    pos = [(t.subject, t.object, t.predicate) for t in graph.triplets if t.predicate != BACKGROUND]
    related = {(s, o) for s, o, _ in pos}
    n = graph.num_nodes
    bg = [(i, j) for i in range(n) for j in range(n) if i != j and (i, j) not in related]
    want = min(len(bg), int(np.floor(ratio * len(pos) + 1e-9)))
    chosen = [bg[k] for k in sorted(rng.choice(len(bg), size=want, replace=False))] if want else []
    pairs = [(s, o) for s, o, _ in pos] + chosen
    labels = [r for _, _, r in pos] + [BACKGROUND] * len(chosen)
    return np.array(pairs, dtype=int).reshape(-1, 2), np.array(labels, dtype=int)


def all_pairs(n: int) -> np.ndarray:
    return np.array([(i, j) for i in range(n) for j in range(n) if i != j], dtype=int).reshape(-1, 2)


def overlap_filter(boxes) -> set:
    """Ordered pairs whose boxes share positive intersection area."""
    return {(i, j) for i in range(len(boxes)) for j in range(len(boxes))
            if i != j and box_overlap(boxes[i], boxes[j])}


def prior_matrix(prior: FrequencyPrior, classes, pairs, softened: bool) -> np.ndarray:
    if len(pairs) == 0:
        return np.zeros((0, prior.num_predicate_classes))
    rows = [prior.softened(classes[s], classes[o]) if softened else prior.probabilities[classes[s], classes[o]]
            for s, o in pairs]
    return np.array(rows)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def forward_image(params: ModelParams, X, U, pairs, pair_classes, prior: FrequencyPrior,
                  bias: str = "arm") -> dict:
    """Refined features, object logits and relationship logits for ``pairs``.

    ``pair_classes`` are the node classes used for the prior lookup.
    """
    Z, A, dcache = dmp_forward(X, U, params.dmp)
    obj_logits = Z @ params.obj_cls.T
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    out = {"Z": Z, "A": A, "obj_logits": obj_logits, "pairs": pairs, "dmp_cache": dcache}
    if len(pairs):
        pri = prior_matrix(prior, pair_classes, pairs, softened=(bias == "arm"))
        logits, acache = rel_logits(Z[pairs[:, 0]], Z[pairs[:, 1]], U[pairs[:, 0], pairs[:, 1]],
                                    pri, params.arm, bias, softened=True)
        out.update(rel_logits=logits, rel_probs=np.exp(log_softmax(logits)), arm_cache=acache)
    else:
        out.update(rel_logits=np.zeros((0, params.arm.W_r.shape[0])),
                   rel_probs=np.zeros((0, params.arm.W_r.shape[0])), arm_cache=None)
    return out


def image_loss(params: ModelParams, X, U, graph: SceneGraph, pairs, labels, prior: FrequencyPrior,
               loss_config: LossConfig = LossConfig(), bias: str = "arm", with_grad: bool = True):
    """``(obj_loss, rel_loss, grads)`` for one image; ``grads`` is None when
    ``with_grad`` is false. Node priorities come from ``graph`` (ground truth)."""
    classes = graph.classes
    out = forward_image(params, X, U, pairs, classes, prior, bias)
    thetas = node_priority(graph).theta
    obj_loss, dobj = nps_loss_batch(out["obj_logits"], classes, thetas, loss_config)
    rel_loss, drel = cross_entropy_batch(out["rel_logits"], labels)
    if not with_grad:
        return obj_loss, rel_loss, None
    Z = out["Z"]
    dZ = dobj @ params.obj_cls
    grads_obj = dobj.T @ Z
    if out["arm_cache"] is not None:
        dzs, dzo, _, garm = rel_logits_backward(out["arm_cache"], drel, params.arm)
        p = out["pairs"]
        np.add.at(dZ, p[:, 0], dzs)
        np.add.at(dZ, p[:, 1], dzo)
    else:
        garm = params.arm.zeros_like()
    _, _, gdmp = dmp_backward(out["dmp_cache"], dZ, params.dmp)
    return obj_loss, rel_loss, ModelParams(gdmp, grads_obj, garm)


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.arrays().items()})


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState, lr: float, momentum: float) -> None:
    """In place: ``v <- m v - lr g``; ``p <- p + v``."""
    for k, p in params.items():
        v = state.velocity[k]
        v *= momentum
        v -= lr * grads[k]
        p += v


@dataclass
class EpochLoss:
    epoch: int
    obj_loss: float
    rel_loss: float

    @property
    def total(self) -> float:
        return self.obj_loss + self.rel_loss


def train(graphs, features, model: ModelParams, prior: FrequencyPrior, config: TrainConfig = TrainConfig()):
    """Returns ``(trained ModelParams, [EpochLoss, ...])``. The input model is not modified."""
    config.validate()
    loss_cfg = LossConfig(config.mu)
    params = model.copy()
    flat = params.arrays()
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng(config.seed)
    curve = []
    order = np.arange(len(graphs))
    for epoch in range(1, config.epochs + 1):
        rng.shuffle(order)
        obj_sum = rel_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = {k: np.zeros_like(v) for k, v in flat.items()}
            for idx in batch:
                g = graphs[idx]
                X, U = features[idx]
                pairs, labels = sample_pairs(g, config.bg_fg_ratio, rng)
                ol, rl, grads = image_loss(params, X, U, g, pairs, labels, prior, loss_cfg, config.bias)
                if not (np.isfinite(ol) and np.isfinite(rl)):
                    raise DivergenceError(epoch)
                obj_sum += ol
                rel_sum += rl
                for k, v in grads.arrays().items():
                    acc[k] += v
            for v in acc.values():
                v /= len(batch)
            clip_global_norm(acc, config.clip_norm)
            sgd_momentum_step(flat, acc, state, config.lr, config.momentum)
        m = max(len(graphs), 1)
        rec = EpochLoss(epoch, obj_sum / m, rel_sum / m)
        if not np.isfinite(rec.total) or not all(np.all(np.isfinite(v)) for v in flat.values()):
            raise DivergenceError(epoch)
        log.info("epoch %d obj %.5f rel %.5f total %.5f", epoch, rec.obj_loss, rec.rel_loss, rec.total)
        curve.append(rec)
    return params, curve


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def predict_image(params: ModelParams, X, U, graph: SceneGraph, prior: FrequencyPrior,
                  mode: str = "predcls", bias: str = "arm") -> SceneGraph:
    """Scored triplets for every candidate pair and every foreground predicate.

    ``predcls`` keeps ground-truth labels (object score 1); ``sgcls`` and
    ``sgdet`` label nodes with the classifier's best non-background class.
    ``sgdet`` only scores pairs with overlapping boxes.
    """
    n = graph.num_nodes
    Z, _, _ = dmp_forward(X, U, params.dmp)
    probs = np.exp(log_softmax(Z @ params.obj_cls.T))
    if mode == "predcls":
        classes = graph.classes
        scores = np.ones(n)
    else:
        classes = [1 + int(np.argmax(p[1:])) for p in probs]
        scores = np.array([probs[i, c] for i, c in enumerate(classes)])
    pairs = all_pairs(n)
    if mode == "sgdet":
        keep = overlap_filter(graph.boxes)
        pairs = np.array([p for p in pairs.tolist() if tuple(p) in keep], dtype=int).reshape(-1, 2)
    nodes = [Node(int(c), nd.bbox) for c, nd in zip(classes, graph.nodes)]
    trips = []
    if len(pairs):
        out = forward_image(params, X, U, pairs, classes, prior, bias)
        for (s, o), p in zip(pairs, out["rel_probs"]):
            for r in range(1, len(p)):
                trips.append(Triplet(int(s), r, int(o), float(scores[s] * p[r] * scores[o])))
    return SceneGraph(nodes, trips, graph.image_id)


def predict_corpus(params, graphs, features, prior, mode="predcls", bias="arm") -> list:
    return [predict_image(params, X, U, g, prior, mode, bias) for g, (X, U) in zip(graphs, features)]


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------

def save_weights(path, params: ModelParams, config_echo: dict | None = None, seed: int | None = None) -> None:
    payload = {"dims": params.dims,
               "params": {k: mat_to_dict(v) for k, v in params.arrays().items()},
               "config": config_echo or {}, "seed": seed}
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_weights(path, O: int | None = None, R: int | None = None, d: int | None = None,
                 d_u: int | None = None) -> ModelParams:
    with open(path) as fh:
        payload = json.load(fh)
    dims = payload["dims"]
    for name, want in (("O", O), ("R", R), ("d", d), ("d_u", d_u)):
        if want is not None and dims[name] != want:
            raise ConfigError(f"weights file has {name}={dims[name]}, configuration says {want}")
    Od, Rd, dd, du, f, h = (dims[k] for k in ("O", "R", "d", "d_u", "f", "h"))
    template = init_model(0, Od, Rd, dd, du, f, h)
    arrays = {}
    for k, ref in template.arrays().items():
        if k not in payload["params"]:
            raise ConfigError(f"weights file lacks parameter {k}")
        try:
            arrays[k] = mat_from_dict(payload["params"][k], ref.shape)
        except DimensionError as exc:
            raise ConfigError(f"{k}: {exc}") from exc
    return ModelParams.from_arrays(arrays)


def write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "obj_loss", "rel_loss", "total"])
        for rec in curve:
            w.writerow([rec.epoch, repr(rec.obj_loss), repr(rec.rel_loss), repr(rec.total)])


def config_echo(cfg) -> dict:
    return asdict(cfg)
