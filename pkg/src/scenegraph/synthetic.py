"""Deterministic toy corpora with a planted relationship rule.

Every object class ``1..O-1`` has a fixed embedding; node features are that
embedding plus Gaussian noise. Each unordered node pair carries a latent
spatial code in ``0..7``. A rule table maps ``(subject class, object class,
code)`` to a predicate (0 = no relationship), so ground truth is a pure
function of latent attributes. The table is stratified: foreground cells are
split among predicates ``1..R-1`` in proportion to ``r ** -tail_exponent``,
which makes the corpus-level predicate marginal follow that power law.

Union features are symmetric in the pair: a projection of the summed class
embeddings plus a code embedding, plus noise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .graph import BBox, Node, SceneGraph, Triplet
from .linalg import mat_from_dict, mat_to_dict

NUM_CODES = 8


@dataclass(frozen=True)
class GenConfig:
    O: int = 6
    R: int = 5
    d: int = 32
    d_u: int = 32
    n_images: int = 300
    min_nodes: int = 3
    max_nodes: int = 5
    noise_sigma: float = 0.0
    tail_exponent: float = 1.0
    fg_fraction: float = 0.5
    seed: int = 1

    def validate(self) -> "GenConfig":
        if self.O < 2 or self.R < 2:
            raise ConfigError(f"need O >= 2 and R >= 2, got O={self.O}, R={self.R}")
        if self.R - 1 > NUM_CODES:
            raise ConfigError(f"R-1={self.R - 1} predicates exceed {NUM_CODES} spatial codes")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.min_nodes < 2 or self.max_nodes < self.min_nodes:
            raise ConfigError(f"nodes per image range [{self.min_nodes}, {self.max_nodes}] is infeasible")
        if self.n_images < 1 or self.d < 2 or self.d % 2 or self.d_u < 1:
            raise ConfigError("n_images >= 1, even d >= 2 and d_u >= 1 required")
        if not 0.0 < self.fg_fraction <= 1.0:
            raise ConfigError("fg_fraction must lie in (0, 1]")
        return self


@dataclass
class SyntheticCorpus:
    config: GenConfig
    graphs: list
    features: list            # per image: (X n x d, U n x n x d_u)
    codes: list               # per image: n x n symmetric int matrix, -1 on the diagonal
    rule_table: np.ndarray    # O x O x NUM_CODES predicate ids
    class_embeddings: np.ndarray
    planted_weights: np.ndarray = field(default=None)  # target predicate marginal over 1..R-1

    def subset(self, idx) -> "SyntheticCorpus":
        idx = list(idx)
        return SyntheticCorpus(self.config, [self.graphs[i] for i in idx],
                               [self.features[i] for i in idx], [self.codes[i] for i in idx],
                               self.rule_table, self.class_embeddings, self.planted_weights)

    def __len__(self):
        return len(self.graphs)

    def index_of(self, image_id: str) -> int:
        for k, g in enumerate(self.graphs):
            if g.image_id == image_id:
                return k
        raise KeyError(image_id)


def planted_marginal(R: int, tail_exponent: float) -> np.ndarray:
    w = np.arange(1, R, dtype=np.float64) ** -tail_exponent
    return w / w.sum()


def _stratified_counts(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment with at least one cell each."""
    k = len(weights)
    counts = np.ones(k, dtype=int)
    rest = total - k
    raw = weights * rest
    counts += np.floor(raw).astype(int)
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    counts[order[: total - counts.sum()]] += 1
    return counts


def build_rule_table(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    classes = cfg.O - 1 if cfg.O > 2 else cfg.O
    cells = classes * classes * NUM_CODES
    n_fg = max(cfg.R - 1, int(round(cfg.fg_fraction * cells)))
    per_pred = _stratified_counts(n_fg, planted_marginal(cfg.R, cfg.tail_exponent))
    flat = np.zeros(cells, dtype=int)
    flat[:n_fg] = np.repeat(np.arange(1, cfg.R), per_pred)
    rng.shuffle(flat)
    table = np.zeros((cfg.O, cfg.O, NUM_CODES), dtype=int)
    lo = cfg.O - classes
    table[lo:, lo:, :] = flat.reshape(classes, classes, NUM_CODES)
    return table


def _random_box(rng) -> BBox:
    x1, y1 = rng.uniform(0, 80, size=2)
    w, h = rng.uniform(5, 40, size=2)
    return BBox(float(x1), float(y1), float(x1 + w), float(y1 + h))


def gen_corpus(config: GenConfig) -> SyntheticCorpus:
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    table = build_rule_table(cfg, rng)
    emb = rng.standard_normal((cfg.O, cfg.d))
    pair_proj = rng.standard_normal((cfg.d_u, cfg.d)) / np.sqrt(cfg.d)
    code_emb = rng.standard_normal((NUM_CODES, cfg.d_u))
    lo = 1 if cfg.O > 2 else 0

    graphs, feats, codes = [], [], []
    for k in range(cfg.n_images):
        while True:
            n = int(rng.integers(cfg.min_nodes, cfg.max_nodes + 1))
            cls = rng.integers(lo, cfg.O, size=n)
            code = np.full((n, n), -1, dtype=int)
            iu = np.triu_indices(n, 1)
            code[iu] = rng.integers(0, NUM_CODES, size=len(iu[0]))
            code.T[iu] = code[iu]
            trips = [Triplet(i, int(table[cls[i], cls[j], code[i, j]]), j)
                     for i in range(n) for j in range(n)
                     if i != j and table[cls[i], cls[j], code[i, j]] != 0]
            boxes = [_random_box(rng) for _ in range(n)]
            X = emb[cls] + cfg.noise_sigma * rng.standard_normal((n, cfg.d))
            noise = cfg.noise_sigma * rng.standard_normal((n, n, cfg.d_u))
            noise = np.triu(noise.transpose(2, 0, 1), 1)
            noise = (noise + noise.transpose(0, 2, 1)).transpose(1, 2, 0)
            base = (emb[cls] @ pair_proj.T)
            U = base[:, None, :] + base[None, :, :] + code_emb[np.maximum(code, 0)] + noise
            U[np.arange(n), np.arange(n)] = 0.0
            if trips:
                break
        nodes = [Node(int(c), b) for c, b in zip(cls, boxes)]
        graphs.append(SceneGraph(nodes, trips, f"img{k:05d}"))
        feats.append((X, U))
        codes.append(code)
    return SyntheticCorpus(cfg, graphs, feats, codes, table, emb,
                           planted_marginal(cfg.R, cfg.tail_exponent))


def split_indices(n: int, train_fraction: float = 0.7, seed: int = 0):
    """Sorted train and held-out index lists from a seeded permutation."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_fraction * n))
    return sorted(order[:cut].tolist()), sorted(order[cut:].tolist())


def split(corpus: SyntheticCorpus, train_fraction: float = 0.7, seed: int = 0):
    train_idx, test_idx = split_indices(len(corpus), train_fraction, seed)
    return corpus.subset(train_idx), corpus.subset(test_idx)


def rule_consistent(corpus: SyntheticCorpus) -> bool:
    """Re-derive every image's triplets from latent attributes and the table."""
    for g, code in zip(corpus.graphs, corpus.codes):
        cls = g.classes
        n = len(cls)
        expect = {(i, int(corpus.rule_table[cls[i], cls[j], code[i, j]]), j)
                  for i in range(n) for j in range(n) if i != j}
        expect = {t for t in expect if t[1] != 0}
        if expect != {t.key for t in g.triplets}:
            return False
    return True


def predicate_histogram(graphs, R: int) -> np.ndarray:
    hist = np.zeros(R, dtype=int)
    for g in graphs:
        for t in g.triplets:
            hist[t.predicate] += 1
    return hist


# --------------------------------------------------------------------------
# feature sidecar
# --------------------------------------------------------------------------

def write_features(path, corpus: SyntheticCorpus) -> None:
    with open(path, "w") as fh:
        for g, (X, U), code in zip(corpus.graphs, corpus.features, corpus.codes):
            n, _, du = U.shape
            fh.write(json.dumps({
                "image_id": g.image_id,
                "X": mat_to_dict(X),
                "U": mat_to_dict(U.reshape(n * n, du)),
                "spatial_codes": code.tolist(),
            }) + "\n")


def read_features(path) -> dict:
    """``{image_id: (X, U)}``."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                X = mat_from_dict(obj["X"])
                n = X.shape[0]
                U = mat_from_dict(obj["U"]).reshape(n, n, -1)
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed feature record: {exc}") from exc
            out[obj["image_id"]] = (X, U)
    return out


def write_meta(path, corpus: SyntheticCorpus) -> None:
    with open(path, "w") as fh:
        json.dump({"config": asdict(corpus.config),
                   "rule_table": corpus.rule_table.tolist(),
                   "class_embeddings": mat_to_dict(corpus.class_embeddings)}, fh)
