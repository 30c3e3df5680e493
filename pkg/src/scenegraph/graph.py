"""Scene-graph data model, node priority, frequency prior, box geometry."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, EmptyGraphError, ValidationError
from .linalg import log_softmax

BACKGROUND = 0
PRIOR_EPS = 1e-3


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValidationError(f"degenerate box {self.as_list()}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]

    def contains(self, other: "BBox") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)


@dataclass(frozen=True)
class Node:
    class_id: int
    bbox: BBox
    scores: tuple | None = None

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"negative class id {self.class_id}")
        if self.scores is not None and abs(sum(self.scores) - 1.0) > 1e-9:
            raise ValidationError("node score vector is not a probability vector")


@dataclass(frozen=True)
class Triplet:
    subject: int
    predicate: int
    object: int
    confidence: float | None = None

    def __post_init__(self):
        if self.subject == self.object:
            raise ValidationError(f"triplet relates node {self.subject} to itself")
        if self.predicate < 0:
            raise ValidationError(f"negative predicate id {self.predicate}")

    @property
    def key(self) -> tuple:
        return (self.subject, self.predicate, self.object)


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple
    triplets: tuple
    image_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "triplets", tuple(self.triplets))
        n = len(self.nodes)
        for t in self.triplets:
            if not (0 <= t.subject < n and 0 <= t.object < n):
                raise DataError(f"image {self.image_id!r}: triplet {t.key} references a missing node")

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def classes(self) -> list:
        return [nd.class_id for nd in self.nodes]

    @property
    def boxes(self) -> list:
        return [nd.bbox for nd in self.nodes]

    def validate(self, num_object_classes: int | None = None,
                 num_predicates: int | None = None, ground_truth: bool = True) -> "SceneGraph":
        if num_object_classes is not None:
            for nd in self.nodes:
                if nd.class_id >= num_object_classes:
                    raise DataError(f"image {self.image_id!r}: class {nd.class_id} >= O={num_object_classes}")
                if nd.scores is not None and len(nd.scores) != num_object_classes:
                    raise DataError(f"image {self.image_id!r}: score vector length != O")
        if num_predicates is not None:
            for t in self.triplets:
                if t.predicate >= num_predicates:
                    raise DataError(f"image {self.image_id!r}: predicate {t.predicate} >= R={num_predicates}")
        if ground_truth:
            keys = [t.key for t in self.triplets]
            if len(set(keys)) != len(keys):
                raise DataError(f"image {self.image_id!r}: duplicate ground-truth triplets")
        return self

    def relation_map(self) -> dict:
        """``{(subject, object): predicate}`` for the annotated pairs."""
        return {(t.subject, t.object): t.predicate for t in self.triplets}


# --------------------------------------------------------------------------
# node priority
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorityVector:
    theta: np.ndarray
    triplet_total: int


def count_triplets(graph: SceneGraph, node: int) -> int:
    if not 0 <= node < graph.num_nodes:
        raise IndexError(f"node index {node} out of range for {graph.num_nodes} nodes")
    return sum(1 for t in graph.triplets if node in (t.subject, t.object))


def node_priority(graph: SceneGraph) -> PriorityVector:
    """theta_i = (#triplets touching node i) / (#triplets in the graph).

    Nodes in no triplet get 0.
    """
    total = len(graph.triplets)
    if total == 0:
        raise EmptyGraphError(f"image {graph.image_id!r} has no triplets; node priority undefined")
    counts = np.zeros(graph.num_nodes)
    for t in graph.triplets:
        counts[t.subject] += 1
        counts[t.object] += 1
    return PriorityVector(counts / total, total)


# --------------------------------------------------------------------------
# frequency prior
# --------------------------------------------------------------------------

@dataclass
class FrequencyPrior:
    num_object_classes: int
    num_predicate_classes: int
    counts: np.ndarray
    probabilities: np.ndarray
    _softened: dict = field(default_factory=dict, repr=False)

    def softened(self, subj_class: int, obj_class: int) -> np.ndarray:
        """Log-softmax of the lookup, cached per ordered class pair."""
        key = (subj_class, obj_class)
        if key not in self._softened:
            self._softened[key] = log_softmax(prior_lookup(self, subj_class, obj_class))
        return self._softened[key]


def build_frequency_prior(corpus: Iterable[SceneGraph], num_object_classes: int,
                          num_predicates: int, eps: float = PRIOR_EPS) -> FrequencyPrior:
    """Predicate counts per (subject class, object class), normalized with
    additive smoothing ``eps`` per cell. Background triplets are not counted."""
    O, R = num_object_classes, num_predicates
    counts = np.zeros((O, O, R), dtype=np.int64)
    for g in corpus:
        cls = g.classes
        for t in g.triplets:
            s, o = cls[t.subject], cls[t.object]
            if not (0 <= s < O and 0 <= o < O and 0 <= t.predicate < R):
                raise DataError(f"image {g.image_id!r}: triplet classes out of bounds")
            if t.predicate != BACKGROUND:
                counts[s, o, t.predicate] += 1
    smoothed = counts + eps
    probs = smoothed / smoothed.sum(axis=2, keepdims=True)
    return FrequencyPrior(O, R, counts, probs)


def prior_lookup(prior: FrequencyPrior, subj_class: int, obj_class: int) -> np.ndarray:
    O = prior.num_object_classes
    if not (0 <= subj_class < O and 0 <= obj_class < O):
        raise IndexError(f"class pair ({subj_class}, {obj_class}) out of range for O={O}")
    return prior.probabilities[subj_class, obj_class]


# --------------------------------------------------------------------------
# boxes
# --------------------------------------------------------------------------

def _intersection(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return max(w, 0.0) * max(h, 0.0)


def iou(a: BBox, b: BBox) -> float:
    inter = _intersection(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def union_box(a: BBox, b: BBox) -> BBox:
    return BBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def box_overlap(a: BBox, b: BBox) -> bool:
    return _intersection(a, b) > 0.0


# --------------------------------------------------------------------------
# JSONL corpus format
# --------------------------------------------------------------------------

def graph_to_json(g: SceneGraph) -> dict:
    nodes = []
    for nd in g.nodes:
        entry = {"class_id": nd.class_id, "bbox": nd.bbox.as_list()}
        if nd.scores is not None:
            entry["scores"] = list(nd.scores)
        nodes.append(entry)
    trips = []
    for t in g.triplets:
        row = [t.subject, t.predicate, t.object]
        if t.confidence is not None:
            row.append(t.confidence)
        trips.append(row)
    return {"image_id": g.image_id, "nodes": nodes, "triplets": trips}


def graph_from_json(obj: dict) -> SceneGraph:
    try:
        nodes = [Node(int(nd["class_id"]), BBox(*map(float, nd["bbox"])),
                      tuple(nd["scores"]) if nd.get("scores") is not None else None)
                 for nd in obj["nodes"]]
        trips = [Triplet(int(row[0]), int(row[1]), int(row[2]),
                         float(row[3]) if len(row) > 3 else None)
                 for row in obj["triplets"]]
        return SceneGraph(nodes, trips, str(obj.get("image_id", "")))
    except (KeyError, TypeError, IndexError) as exc:
        raise DataError(f"malformed scene graph record: {exc}") from exc


def write_jsonl(path, graphs: Sequence[SceneGraph]) -> None:
    with open(path, "w") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_json(g)) + "\n")


def read_jsonl(path, num_object_classes=None, num_predicates=None,
               ground_truth: bool = True) -> list:
    graphs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            graphs.append(graph_from_json(obj).validate(num_object_classes, num_predicates, ground_truth))
    return graphs


def write_vocab(path, object_classes: Sequence[str], predicate_classes: Sequence[str]) -> None:
    if object_classes[0] != "__background__" or predicate_classes[0] != "__background__":
        raise DataError("vocabulary index 0 must be '__background__'")
    with open(path, "w") as fh:
        json.dump({"object_classes": list(object_classes),
                   "predicate_classes": list(predicate_classes)}, fh, indent=2)


def read_vocab(path) -> tuple:
    with open(path) as fh:
        obj = json.load(fh)
    oc, pc = obj["object_classes"], obj["predicate_classes"]
    if not oc or not pc or oc[0] != "__background__" or pc[0] != "__background__":
        raise DataError(f"{path}: vocabulary index 0 must be '__background__'")
    return oc, pc

