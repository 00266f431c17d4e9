"""Panoptic Quality (with a brute-force verification oracle) and desk-scale
proxy image-quality metrics.

PQ matching uses the IoU > 0.5 rule, which is provably unique for
non-overlapping segment maps; the oracle enumerates all one-to-one
assignments instead and must agree field-for-field.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import Config, PanopticMap, Rng
from .losses import FeaturePyramid
from .nnblocks import LEAKY_SLOPE, conv3, init_module

__all__ = [
    "PQReport", "CategoryStats", "pq_stats", "merge_stats", "report_from_stats",
    "panoptic_quality", "pq_oracle", "inception_proxy", "diversity_score",
    "ProxyClassifier", "train_proxy_classifier",
]

IOU_THRESHOLD = 0.5
ORACLE_MAX_SEGMENTS = 6


@dataclass
class CategoryStats:
    is_thing: bool
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0


@dataclass
class PQReport:
    PQ: float
    SQ: float
    RQ: float
    PQ_th: float
    SQ_th: float
    RQ_th: float
    PQ_st: float
    SQ_st: float
    RQ_st: float
    per_category: dict[int, CategoryStats] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in
                ("PQ", "SQ", "RQ", "PQ_th", "SQ_th", "RQ_th", "PQ_st", "SQ_st", "RQ_st")}


def _segments_by_category(p: PanopticMap):
    by_cat: dict[int, list] = {}
    for o in p.objects:
        by_cat.setdefault(o.category_id, []).append(o)
    return by_cat


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    if inter == 0:
        return 0.0
    union = np.logical_or(a, b).sum()
    return float(inter) / float(union)


def pq_stats(pred: PanopticMap, gt: PanopticMap) -> dict[int, CategoryStats]:
    """TP/FP/FN and IoU sums per category for one map pair."""
    if pred.objects[0].mask.shape != gt.objects[0].mask.shape:
        raise ValueError("canvas size mismatch between prediction and ground truth")
    preds = _segments_by_category(pred)
    gts = _segments_by_category(gt)
    stats: dict[int, CategoryStats] = {}
    for cat in sorted(set(preds) | set(gts)):
        ps = preds.get(cat, [])
        gs = gts.get(cat, [])
        is_thing = (ps + gs)[0].is_thing
        st = CategoryStats(is_thing=is_thing)
        matched_p: set[int] = set()
        matched_g: set[int] = set()
        for i, p in enumerate(ps):
            hits = [(j, _iou(p.mask, g.mask)) for j, g in enumerate(gs)]
            hits = [(j, iou) for j, iou in hits if iou > IOU_THRESHOLD]
            # disjoint maps make the > 0.5 match unique per segment
            assert len(hits) <= 1, f"category {cat}: non-unique IoU>0.5 match"
            if hits:
                j, iou = hits[0]
                assert j not in matched_g, f"category {cat}: gt segment matched twice"
                matched_p.add(i)
                matched_g.add(j)
                st.tp += 1
                st.iou_sum += iou
        st.fp = len(ps) - len(matched_p)
        st.fn = len(gs) - len(matched_g)
        stats[cat] = st
    return stats


def merge_stats(into: dict[int, CategoryStats], extra: dict[int, CategoryStats]) -> dict[int, CategoryStats]:
    for cat, st in extra.items():
        acc = into.setdefault(cat, CategoryStats(is_thing=st.is_thing))
        acc.tp += st.tp
        acc.fp += st.fp
        acc.fn += st.fn
        acc.iou_sum += st.iou_sum
    return into


def _averages(stats: dict[int, CategoryStats], keep) -> tuple[float, float, float]:
    pq = sq = rq = 0.0
    n = 0
    for st in stats.values():
        if not keep(st):
            continue
        n += 1
        denom = st.tp + 0.5 * st.fp + 0.5 * st.fn
        if st.tp > 0:
            sq_c = st.iou_sum / st.tp
            rq_c = st.tp / denom
        else:
            sq_c = rq_c = 0.0
        pq += sq_c * rq_c
        sq += sq_c
        rq += rq_c
    if n == 0:
        return 0.0, 0.0, 0.0
    return pq / n, sq / n, rq / n


def report_from_stats(stats: dict[int, CategoryStats]) -> PQReport:
    pq, sq, rq = _averages(stats, lambda s: True)
    pqt, sqt, rqt = _averages(stats, lambda s: s.is_thing)
    pqs, sqs, rqs = _averages(stats, lambda s: not s.is_thing)
    return PQReport(pq, sq, rq, pqt, sqt, rqt, pqs, sqs, rqs, per_category=stats)


def panoptic_quality(pred: PanopticMap, gt: PanopticMap) -> PQReport:
    """PQ = SQ x RQ per category with the IoU > 0.5 matching rule,
    macro-averaged over categories present in either map."""
    return report_from_stats(pq_stats(pred, gt))


def pq_oracle(pred: PanopticMap, gt: PanopticMap) -> PQReport:
    """Brute-force PQ: maximise |TP| over all one-to-one assignments with
    category match and IoU > 0.5.  Must equal :func:`panoptic_quality`."""
    preds = _segments_by_category(pred)
    gts = _segments_by_category(gt)
    stats: dict[int, CategoryStats] = {}
    for cat in sorted(set(preds) | set(gts)):
        ps = preds.get(cat, [])
        gs = gts.get(cat, [])
        if max(len(ps), len(gs)) > ORACLE_MAX_SEGMENTS:
            raise ValueError(f"category {cat}: too many segments for the oracle")
        is_thing = (ps + gs)[0].is_thing
        best_tp, best_iou = 0, 0.0
        indices = list(range(len(gs)))
        for k in range(min(len(ps), len(gs)), -1, -1):
            if k < best_tp:
                break
            for p_sel in itertools.combinations(range(len(ps)), k):
                for g_sel in itertools.permutations(indices, k):
                    tp, iou_sum = 0, 0.0
                    ok = True
                    for pi, gj in zip(p_sel, g_sel):
                        iou = _iou(ps[pi].mask, gs[gj].mask)
                        if iou <= IOU_THRESHOLD:
                            ok = False
                            break
                        tp += 1
                        iou_sum += iou
                    if ok and (tp > best_tp or (tp == best_tp and iou_sum > best_iou)):
                        best_tp, best_iou = tp, iou_sum
        st = CategoryStats(is_thing=is_thing, tp=best_tp,
                           fp=len(ps) - best_tp, fn=len(gs) - best_tp,
                           iou_sum=best_iou)
        stats[cat] = st
    return report_from_stats(stats)


# --- proxy image-quality metrics --------------------------------------------


class ProxyClassifier(nn.Module):
    """Small fixed CNN classifying domain-B images by thing count (1..4)."""

    N_CLASSES = 4

    def __init__(self, seed: int = 0):
        super().__init__()
        self.c1 = conv3(3, 16, stride=2, pad_mode="zeros")
        self.c2 = conv3(16, 32, stride=2, pad_mode="zeros")
        self.c3 = conv3(32, 64, stride=2, pad_mode="zeros")
        self.fc = nn.Linear(64, self.N_CLASSES)
        init_module(self, Rng(seed), prefix="proxy_cls")

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = img.unsqueeze(0) if img.dim() == 3 else img
        x = F.leaky_relu(self.c1(x), LEAKY_SLOPE)
        x = F.leaky_relu(self.c2(x), LEAKY_SLOPE)
        x = F.leaky_relu(self.c3(x), LEAKY_SLOPE)
        return self.fc(x.mean(dim=(-2, -1)))

    def probabilities(self, images: list[np.ndarray]) -> np.ndarray:
        with torch.no_grad():
            batch = torch.stack([torch.from_numpy(im).permute(2, 0, 1) for im in images])
            return F.softmax(self(batch), dim=-1).numpy()


def train_proxy_classifier(samples, seed: int = 0, steps: int = 300,
                           batch_size: int = 16, lr: float = 1e-3) -> ProxyClassifier:
    """Seed-pinned training recipe: Adam on cross-entropy over thing counts."""
    clf = ProxyClassifier(seed=seed)
    images = torch.stack([torch.from_numpy(s.b).permute(2, 0, 1) for s in samples])
    labels = torch.tensor(
        [sum(o.is_thing for o in s.pmap.objects) - 1 for s in samples],
        dtype=torch.long).clamp(0, ProxyClassifier.N_CLASSES - 1)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    order = Rng(seed).stream("proxy_train")
    for step in range(steps):
        idx = torch.from_numpy(order.integers(0, len(samples), size=batch_size))
        logits = clf(images[idx])
        loss = F.cross_entropy(logits, labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    clf.eval()
    return clf


def inception_proxy(images: list[np.ndarray], classifier) -> float:
    """exp(mean_x KL(p(y|x) || mean_x p(y|x))) with the proxy classifier."""
    if not images:
        raise ValueError("empty image list")
    probs = classifier.probabilities(images) if hasattr(classifier, "probabilities") \
        else np.asarray(classifier(images))
    probs = np.clip(probs, 1e-12, 1.0)
    marginal = probs.mean(axis=0, keepdims=True)
    kl = (probs * (np.log(probs) - np.log(marginal))).sum(axis=1)
    return float(np.exp(kl.mean()))


def diversity_score(pairs: list[tuple[np.ndarray, np.ndarray]],
                    phi: FeaturePyramid) -> float:
    """Mean channel-normalised squared L2 feature distance, unit layer weights."""
    if not pairs:
        raise ValueError("empty pair list")
    total = 0.0
    with torch.no_grad():
        for a, b in pairs:
            ta = torch.from_numpy(a).permute(2, 0, 1)
            tb = torch.from_numpy(b).permute(2, 0, 1)
            feats_a = phi(ta)
            feats_b = phi(tb)
            d = 0.0
            for fa, fb in zip(feats_a, feats_b):
                na = fa / (fa.norm(dim=1, keepdim=True) + 1e-10)
                nb = fb / (fb.norm(dim=1, keepdim=True) + 1e-10)
                d += float((na - nb).pow(2).sum(dim=1).mean())
            total += d / len(feats_a)
    return total / len(pairs)
