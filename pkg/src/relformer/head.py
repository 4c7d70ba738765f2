"""Relation prediction head: link binarization, classeme features, frequency
bias, predicate classification, and triplet assembly/filtering/ensembling.

The no-relation class occupies one extra logit slot after the real predicate
categories; its frequency bias is always zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TimeSlot, Tracklet, VideoSample, Vocab
from .errors import DataError, UsageError
from .nn import MlpSpec, ParamStore, mlp_forward, softmax_lastdim


@dataclass(frozen=True)
class RelationTriplet:
    """One scored prediction; the slot is the intersection of the two
    linked tracklets' slots."""

    subject_tracklet_id: int
    object_tracklet_id: int
    predicate: int
    score: float
    slot: TimeSlot

    def key(self) -> tuple[int, int, int]:
        return (self.predicate, self.subject_tracklet_id, self.object_tracklet_id)


def binarize_links(attention: np.ndarray) -> np.ndarray:
    """(m, 2) argmax tracklet index per (query, role); ties pick the lowest index."""
    if attention.shape[2] < 1:
        raise DataError("cannot binarize links with zero tracklets")
    return np.stack([np.argmax(attention[0], axis=1),
                     np.argmax(attention[1], axis=1)], axis=1)


def classeme(probs: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Probability-weighted average of category embeddings: table^T @ probs."""
    return table.T @ np.asarray(probs, dtype=np.float64)


def build_freq_bias(samples: list[VideoSample], n_objects: int, n_predicates: int,
                    smoothing: float = 1e-3) -> np.ndarray:
    """(C_obj, C_obj, C_rel) log-probabilities of predicate given the
    subject/object category pair, from add-epsilon smoothed training counts.
    Unseen pairs get the uniform log 1/|C_rel|."""
    counts = np.zeros((n_objects, n_objects, n_predicates))
    for sample in samples:
        cats = {t.id: t.category for t in sample.gt_objects}
        for rel in sample.gt_relations:
            counts[cats[rel.subject_gt_id], cats[rel.object_gt_id], rel.predicate] += 1.0
    totals = counts.sum(axis=2, keepdims=True)
    return np.log((counts + smoothing) / (totals + smoothing * n_predicates))


def classify_predicates(store: ParamStore, queries: Tensor, links: np.ndarray,
                        classemes: np.ndarray, categories: np.ndarray,
                        spec: MlpSpec) -> Tensor:
    """(m, |C_rel|+1) probabilities from [query; subject classeme; object
    classeme] plus the category pair's frequency-bias fiber (zero for the
    no-relation slot)."""
    m = queries.shape[0]
    f_s = classemes[links[:, 0]]
    f_o = classemes[links[:, 1]]
    joint = ad.concat([queries, ad.constant(f_s), ad.constant(f_o)], axis=1)
    logits = mlp_forward(store, "head.classify", spec, joint)
    bias = store["tables.freq_bias"].data
    fibers = bias[categories[links[:, 0]], categories[links[:, 1]]]
    padded = np.concatenate([fibers, np.zeros((m, 1))], axis=1)
    return softmax_lastdim(logits + ad.constant(padded))


def infer_triplets(probs: np.ndarray, links: np.ndarray, tracklets: list[Tracklet],
                   top_k_per_query: int = 10) -> list[RelationTriplet]:
    """Assemble candidates: per query, the top-k non-background categories by
    probability; drop self-paired and temporally disjoint links; deduplicate
    by (predicate, subject, object) keeping the best score."""
    if not tracklets:
        return []
    n_rel = probs.shape[1] - 1
    k = min(top_k_per_query, n_rel)
    candidates = []
    for j in range(len(probs)):
        si, oi = int(links[j, 0]), int(links[j, 1])
        sub, obj = tracklets[si], tracklets[oi]
        if sub.id == obj.id:
            continue
        inter = sub.slot.intersect(obj.slot)
        if inter is None:
            continue
        row = probs[j, :n_rel]
        order = np.argsort(-row, kind="stable")[:k]
        for cat in order:
            candidates.append(RelationTriplet(
                subject_tracklet_id=sub.id, object_tracklet_id=obj.id,
                predicate=int(cat), score=float(row[cat]), slot=inter))
    return filter_duplicates(candidates)


def filter_duplicates(triplets: list[RelationTriplet]) -> list[RelationTriplet]:
    """Keep the highest score per (predicate, subject, object); order by
    descending score, then key."""
    best: dict[tuple[int, int, int], RelationTriplet] = {}
    for t in triplets:
        cur = best.get(t.key())
        if cur is None or t.score > cur.score:
            best[t.key()] = t
    return sorted(best.values(), key=lambda t: (-t.score, t.key()))


def ensemble_merge(per_model: list[list[RelationTriplet]],
                   video_ids: list[str] | None = None) -> list[RelationTriplet]:
    """Concatenate per-model predictions for one video and deduplicate."""
    if not per_model:
        raise UsageError("ensemble_merge needs at least one prediction list")
    if video_ids is not None and len(set(video_ids)) > 1:
        raise UsageError(f"ensemble_merge: mismatched video ids {sorted(set(video_ids))}")
    merged: list[RelationTriplet] = []
    for preds in per_model:
        merged.extend(preds)
    return filter_duplicates(merged)


def triplets_to_json(video_id: str, triplets: list[RelationTriplet]) -> dict:
    return {
        "video_id": video_id,
        "relations": [
            {"subject_tid": t.subject_tracklet_id, "object_tid": t.object_tracklet_id,
             "predicate": t.predicate, "score": t.score,
             "start": t.slot.start, "end": t.slot.end}
            for t in triplets
        ],
    }


def load_embedding_table(path: str, n_objects: int, d_w: int) -> np.ndarray:
    """Load a pluggable word-embedding table from a TRKF feature file."""
    from .dataset_io import read_feature_file
    table = read_feature_file(path).astype(np.float64)
    if table.shape != (n_objects, d_w):
        raise DataError(
            f"{path}: embedding table shape {table.shape} != ({n_objects}, {d_w})")
    return table
