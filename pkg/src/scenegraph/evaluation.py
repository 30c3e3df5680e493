"""Scene-graph metrics: Recall@K, mean Recall@K, per-predicate AP, wmAP, score_wtd.

Predictions for an image are a :class:`SceneGraph` whose triplets carry a
``confidence`` (subject score x predicate score x object score). Several
predicates per ordered pair are allowed; the per-pair filter decides how
many survive (``k_per_pair=1`` is the usual graph constraint, ``None``
keeps them all). Ground-truth triplets are matched at most once, greedily
in descending confidence.

In ``predcls`` and ``sgcls`` the predicted nodes are the ground-truth
boxes, so predicted node ``i`` is ground-truth node ``i`` and matching is by
index. In ``sgdet`` both boxes must reach the IoU threshold.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .graph import BBox, SceneGraph, iou, union_box

MODES = ("predcls", "sgcls", "sgdet")
DEFAULT_KS = (20, 50, 100)


@dataclass(frozen=True)
class BoxedTriplet:
    subj_class: int
    predicate: int
    obj_class: int
    subj_box: BBox
    obj_box: BBox


def boxed(graph: SceneGraph, t) -> BoxedTriplet:
    s, o = graph.nodes[t.subject], graph.nodes[t.object]
    return BoxedTriplet(s.class_id, t.predicate, o.class_id, s.bbox, o.bbox)


def match_triplet(pred: BoxedTriplet, gt: BoxedTriplet, iou_thresh: float = 0.5,
                  phrase: bool = False) -> bool:
    """Labels equal and boxes overlap enough; ``phrase`` compares union boxes."""
    if (pred.subj_class, pred.predicate, pred.obj_class) != (gt.subj_class, gt.predicate, gt.obj_class):
        return False
    if phrase:
        return iou(union_box(pred.subj_box, pred.obj_box), union_box(gt.subj_box, gt.obj_box)) >= iou_thresh
    return iou(pred.subj_box, gt.subj_box) >= iou_thresh and iou(pred.obj_box, gt.obj_box) >= iou_thresh


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValidationError(f"unknown evaluation mode {mode!r}; expected one of {MODES}")


def ranked_triplets(pred: SceneGraph, k_per_pair: int | None = 1, top_k: int | None = None) -> list:
    """Indices of ``pred.triplets`` entering the pool, best first.

    Keeps the ``k_per_pair`` most confident predicates of every ordered pair,
    sorts by confidence (ties: original order) and cuts at ``top_k``.
    """
    order = sorted(range(len(pred.triplets)),
                   key=lambda i: (-(pred.triplets[i].confidence or 0.0), i))
    if k_per_pair is not None:
        seen: dict = {}
        kept = []
        for i in order:
            t = pred.triplets[i]
            pair = (t.subject, t.object)
            if seen.get(pair, 0) < k_per_pair:
                seen[pair] = seen.get(pair, 0) + 1
                kept.append(i)
        order = kept
    return order if top_k is None else order[:top_k]


def _match_score(pred: SceneGraph, p, gt: SceneGraph, g, mode: str, iou_thresh: float):
    """None if no match, else a score to rank competing ground truths (higher is better)."""
    if mode in ("predcls", "sgcls"):
        if (p.subject, p.object, p.predicate) != (g.subject, g.object, g.predicate):
            return None
        if (pred.nodes[p.subject].class_id != gt.nodes[g.subject].class_id
                or pred.nodes[p.object].class_id != gt.nodes[g.object].class_id):
            return None
        return 1.0
    bp, bg = boxed(pred, p), boxed(gt, g)
    if not match_triplet(bp, bg, iou_thresh):
        return None
    return min(iou(bp.subj_box, bg.subj_box), iou(bp.obj_box, bg.obj_box))


def match_image(pred: SceneGraph, gt: SceneGraph, pool: Sequence[int], mode: str,
                iou_thresh: float = 0.5) -> np.ndarray:
    """Greedy one-to-one matching. Returns a boolean array over GT triplets."""
    matched = np.zeros(len(gt.triplets), dtype=bool)
    for i in pool:
        p = pred.triplets[i]
        best, best_score = -1, -1.0
        for k, g in enumerate(gt.triplets):
            if matched[k]:
                continue
            s = _match_score(pred, p, gt, g, mode, iou_thresh)
            if s is not None and s > best_score:
                best, best_score = k, s
        if best >= 0:
            matched[best] = True
    return matched


def _image_matches(preds, gts, K, mode, k_per_pair, iou_thresh):
    _check_mode(mode)
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} prediction graphs for {len(gts)} ground-truth graphs")
    for pred, gt in zip(preds, gts):
        if not gt.triplets:
            continue
        pool = ranked_triplets(pred, k_per_pair, K)
        yield gt, match_image(pred, gt, pool, mode, iou_thresh)


def recall_at_k(preds, gts, K: int, mode: str = "predcls", graph_constraint: bool = True,
                iou_thresh: float = 0.5) -> float:
    """Mean over images (with at least one GT triplet) of the matched GT fraction."""
    return recall_topk_per_pair(preds, gts, K, 1 if graph_constraint else None, mode, iou_thresh)


def recall_topk_per_pair(preds, gts, K: int, k_per_pair: int | None, mode: str = "predcls",
                         iou_thresh: float = 0.5, num_predicates: int | None = None) -> float:
    if k_per_pair is not None and (k_per_pair < 1 or (num_predicates is not None and k_per_pair > num_predicates)):
        raise ValidationError(f"k_per_pair={k_per_pair} outside [1, {num_predicates or 'R'}]")
    recalls = [m.mean() for _, m in _image_matches(preds, gts, K, mode, k_per_pair, iou_thresh)]
    return float(np.mean(recalls)) if recalls else 0.0


def mean_recall_at_k(preds, gts, K: int, mode: str = "predcls", graph_constraint: bool = True,
                     iou_thresh: float = 0.5):
    """Per-predicate recall (averaged over the images containing that
    predicate), then the unweighted mean over predicates seen in GT.

    Returns ``(mR, {predicate: recall})``.
    """
    return mean_recall_topk_per_pair(preds, gts, K, 1 if graph_constraint else None, mode, iou_thresh)


def mean_recall_topk_per_pair(preds, gts, K: int, k_per_pair: int | None, mode: str = "predcls",
                              iou_thresh: float = 0.5):
    per_class: dict = {}
    for gt, m in _image_matches(preds, gts, K, mode, k_per_pair, iou_thresh):
        labels = np.array([t.predicate for t in gt.triplets])
        for c in np.unique(labels):
            per_class.setdefault(int(c), []).append(m[labels == c].mean())
    table = {c: float(np.mean(v)) for c, v in sorted(per_class.items())}
    mr = float(np.mean(list(table.values()))) if table else 0.0
    return mr, table


def average_precision(tp: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve.
    ``tp`` is the TP flag of each detection in descending confidence."""
    if num_gt == 0:
        raise ValidationError("average precision undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap_per_predicate(preds, gts, match: str = "rel", k_per_pair: int | None = 1,
                     iou_thresh: float = 0.5) -> dict:
    """AP for every predicate present in GT. ``match`` is ``"rel"`` (both
    boxes) or ``"phr"`` (union boxes). Detections of one class are ranked
    across all images; each GT triplet absorbs at most one detection."""
    if match not in ("rel", "phr"):
        raise ValidationError(f"match must be 'rel' or 'phr', got {match!r}")
    phrase = match == "phr"
    gt_boxed = [[boxed(g, t) for t in g.triplets] for g in gts]
    num_gt: dict = {}
    for gb in gt_boxed:
        for b in gb:
            num_gt[b.predicate] = num_gt.get(b.predicate, 0) + 1
    dets: dict = {}
    for img, pred in enumerate(preds):
        for i in ranked_triplets(pred, k_per_pair, None):
            t = pred.triplets[i]
            dets.setdefault(t.predicate, []).append((-(t.confidence or 0.0), img, i, boxed(pred, t)))
    out = {}
    for c in sorted(num_gt):
        cand = sorted(dets.get(c, []), key=lambda x: (x[0], x[1], x[2]))
        used: set = set()
        flags = []
        for _, img, _, b in cand:
            best, best_s = None, -1.0
            for k, g in enumerate(gt_boxed[img]):
                if (img, k) in used or not match_triplet(b, g, iou_thresh, phrase):
                    continue
                if phrase:
                    s = iou(union_box(b.subj_box, b.obj_box), union_box(g.subj_box, g.obj_box))
                else:
                    s = min(iou(b.subj_box, g.subj_box), iou(b.obj_box, g.obj_box))
                if s > best_s:
                    best, best_s = k, s
            if best is not None:
                used.add((img, best))
            flags.append(best is not None)
        out[c] = average_precision(flags, num_gt[c])
    return out


def gt_predicate_counts(gts) -> dict:
    counts: dict = {}
    for g in gts:
        for t in g.triplets:
            counts[t.predicate] = counts.get(t.predicate, 0) + 1
    return counts


def wmap(per_class_ap: dict, gt_counts: dict) -> float:
    """AP averaged with weights proportional to GT instances per class."""
    total = sum(c for c in gt_counts.values() if c > 0)
    if total <= 0:
        raise ValidationError("wmAP undefined: no ground-truth instances")
    return float(sum(cnt / total * per_class_ap.get(c, 0.0) for c, cnt in gt_counts.items() if cnt > 0))


def score_wtd(r50: float, wmap_rel: float, wmap_phr: float) -> float:
    return 0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class MetricReport:
    mode: str
    convention: str
    recall: dict = field(default_factory=dict)
    mean_recall: dict = field(default_factory=dict)
    per_predicate_recall: dict = field(default_factory=dict)
    ap_rel: dict = field(default_factory=dict)
    ap_phr: dict = field(default_factory=dict)
    wmap_rel: float = 0.0
    wmap_phr: float = 0.0
    score_wtd: float = 0.0

    def to_json(self) -> dict:
        out = asdict(self)
        for key in ("recall", "mean_recall", "per_predicate_recall", "ap_rel", "ap_phr"):
            out[key] = {str(k): v for k, v in out[key].items()}
        return out

    def to_text(self, predicate_names: Sequence[str] | None = None) -> str:
        name = (lambda c: predicate_names[c]) if predicate_names else str
        lines = [f"mode: {self.mode}   convention: {self.convention}",
                 f"{'K':>6} {'R@K':>8} {'mR@K':>8}"]
        for k in self.recall:
            lines.append(f"{k:>6} {self.recall[k]:>8.4f} {self.mean_recall.get(k, 0.0):>8.4f}")
        lines.append(f"wmAP_rel {self.wmap_rel:.4f}   wmAP_phr {self.wmap_phr:.4f}   "
                     f"score_wtd {self.score_wtd:.2f}")
        if self.per_predicate_recall:
            kmax = max(self.per_predicate_recall)
            lines.append(f"per-predicate recall @{kmax}:")
            width = max(len(name(c)) for c in self.per_predicate_recall[kmax]) if self.per_predicate_recall[kmax] else 4
            for c, r in self.per_predicate_recall[kmax].items():
                lines.append(f"  {name(c):<{width}} {r:.4f}")
        return "\n".join(lines)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["mode", "convention", "recall", "mean_recall", "per_predicate_recall",
                 "ap_rel", "ap_phr", "wmap_rel", "wmap_phr", "score_wtd"],
    "properties": {
        "mode": {"enum": list(MODES)},
        "convention": {"type": "string"},
        "recall": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "mean_recall": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "per_predicate_recall": {"type": "object", "additionalProperties": {
            "type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}}},
        "ap_rel": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "ap_phr": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "wmap_rel": {"type": "number", "minimum": 0, "maximum": 1},
        "wmap_phr": {"type": "number", "minimum": 0, "maximum": 1},
        "score_wtd": {"type": "number", "minimum": 0, "maximum": 100},
    },
}


def convention_label(graph_constraint: bool, k_per_pair: int | None) -> str:
    if k_per_pair is not None:
        return f"k_per_pair={k_per_pair}"
    return "graph-constrained (k=1)" if graph_constraint else "unconstrained (all predicates per pair)"


def evaluate(preds, gts, Ks: Sequence[int] = DEFAULT_KS, mode: str = "predcls",
             graph_constraint: bool = True, k_per_pair: int | None = None,
             iou_thresh: float = 0.5) -> MetricReport:
    _check_mode(mode)
    kpp = k_per_pair if k_per_pair is not None else (1 if graph_constraint else None)
    report = MetricReport(mode=mode, convention=convention_label(graph_constraint, k_per_pair))
    for K in Ks:
        report.recall[K] = recall_topk_per_pair(preds, gts, K, kpp, mode, iou_thresh)
        mr, table = mean_recall_topk_per_pair(preds, gts, K, kpp, mode, iou_thresh)
        report.mean_recall[K] = mr
        report.per_predicate_recall[K] = table
    counts = gt_predicate_counts(gts)
    if counts:
        report.ap_rel = ap_per_predicate(preds, gts, "rel", kpp, iou_thresh)
        report.ap_phr = ap_per_predicate(preds, gts, "phr", kpp, iou_thresh)
        report.wmap_rel = wmap(report.ap_rel, counts)
        report.wmap_phr = wmap(report.ap_phr, counts)
    r50 = report.recall.get(50, recall_topk_per_pair(preds, gts, 50, kpp, mode, iou_thresh))
    report.score_wtd = score_wtd(100 * r50, 100 * report.wmap_rel, 100 * report.wmap_phr)
    return report


def write_report(report: MetricReport, json_path, text_path=None, predicate_names=None) -> None:
    with open(json_path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2)
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.write(report.to_text(predicate_names) + "\n")
