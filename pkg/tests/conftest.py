import numpy as np
import pytest

from scenegraph.graph import BBox, Node, SceneGraph, Triplet


def make_graph(classes, triplets, image_id="g", boxes=None):
    """Nodes on a horizontal strip unless boxes are given; triplets as (s, r, o[, conf])."""
    if boxes is None:
        boxes = [BBox(10.0 * i, 0.0, 10.0 * i + 5.0, 5.0) for i in range(len(classes))]
    nodes = [Node(int(c), b) for c, b in zip(classes, boxes)]
    return SceneGraph(nodes, [Triplet(*t) for t in triplets], image_id)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import verdicts
    if verdicts.LINES:
        terminalreporter.section("acceptance verdicts")
        for line in verdicts.LINES:
            terminalreporter.write_line(line)
