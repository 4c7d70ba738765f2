"""Tracklet and relation data types, vIoU, and ground-truth assignment.

Frame-index convention used everywhere: a normalized slot (s, e) over a
video with F frames covers the integer frames floor(s*F) .. ceil(e*F)-1.
Since 0 <= s < e <= 1, every valid slot covers at least one frame.

All types are immutable after construction; operations on distinct samples
are safe to run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class TimeSlot:
    """Normalized (start, end) fractions of the video length, 0 <= s < e <= 1."""

    start: float
    end: float

    def __post_init__(self):
        if not (0.0 <= self.start < self.end <= 1.0):
            raise DataError(f"invalid time slot ({self.start}, {self.end})")

    def frame_span(self, frame_count: int) -> tuple[int, int]:
        """(first_frame, last_frame_exclusive) covered by this slot.

        A 1e-9 guard keeps exact frame fractions (k / frame_count) on the
        frame they name despite float rounding.
        """
        return (int(math.floor(self.start * frame_count + 1e-9)),
                int(math.ceil(self.end * frame_count - 1e-9)))

    def frame_length(self, frame_count: int) -> int:
        a, b = self.frame_span(frame_count)
        return b - a

    def intersect(self, other: "TimeSlot") -> "TimeSlot | None":
        s = max(self.start, other.start)
        e = min(self.end, other.end)
        return TimeSlot(s, e) if s < e else None


def _validate_boxes(boxes: np.ndarray, label: str) -> None:
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise DataError(f"{label}: boxes must be (l, 4), got {boxes.shape}")
    if np.any(boxes < 0.0) or np.any(boxes > 1.0):
        raise DataError(f"{label}: box coordinates must lie in [0, 1]")
    if np.any(boxes[:, 0] >= boxes[:, 2]) or np.any(boxes[:, 1] >= boxes[:, 3]):
        raise DataError(f"{label}: boxes must satisfy x1<x2 and y1<y2")


@dataclass(frozen=True)
class Tracklet:
    """One object trajectory: a time slot plus per-frame boxes and features.

    ``probs`` is the per-category classification probability vector; it is
    optional for ground-truth objects. ``appearance`` rows are stored as
    float32 (the on-disk dtype) and widened to float64 at model input.
    """

    id: int
    slot: TimeSlot
    boxes: np.ndarray          # (l, 4) float64, normalized xyxy
    appearance: np.ndarray     # (l, d_a) float32
    category: int
    probs: np.ndarray | None = None

    def __post_init__(self):
        label = f"tracklet {self.id}"
        boxes = np.asarray(self.boxes, dtype=np.float64)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "appearance",
                           np.asarray(self.appearance, dtype=np.float32))
        if len(boxes) < 2:
            raise DataError(f"{label}: needs at least 2 frames, got {len(boxes)}")
        _validate_boxes(boxes, label)
        if self.appearance.ndim != 2 or len(self.appearance) != len(boxes):
            raise DataError(
                f"{label}: appearance rows {self.appearance.shape} != boxes {len(boxes)}")
        if self.probs is not None:
            probs = np.asarray(self.probs, dtype=np.float64)
            object.__setattr__(self, "probs", probs)
            if probs.ndim != 1:
                raise DataError(f"{label}: probs must be 1-d")
            if abs(float(probs.sum()) - 1.0) > 1e-6 or np.any(probs < 0.0):
                raise DataError(f"{label}: probs must be a probability vector")

    @property
    def length(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class GtRelation:
    """Ground-truth triplet: subject/object GT-object ids, predicate, slot."""

    subject_gt_id: int
    object_gt_id: int
    predicate: int
    slot: TimeSlot

    def __post_init__(self):
        if self.subject_gt_id == self.object_gt_id:
            raise DataError("relation subject and object must differ")
        if self.predicate < 0:
            raise DataError(f"invalid predicate id {self.predicate}")


@dataclass(frozen=True)
class Vocab:
    """Object and predicate category names. No explicit background entry:
    the no-relation class is an extra logit slot in the relation head."""

    objects: tuple[str, ...]
    predicates: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "predicates", tuple(self.predicates))
        if len(set(self.objects)) != len(self.objects):
            raise DataError("duplicate object category names")
        if len(set(self.predicates)) != len(self.predicates):
            raise DataError("duplicate predicate category names")
        if not self.objects or not self.predicates:
            raise DataError("vocab must have at least one object and one predicate")


@dataclass(frozen=True)
class VideoSample:
    """One video's detected tracklets, GT objects, and GT relations."""

    video_id: str
    frame_count: int
    tracklets: tuple[Tracklet, ...]
    gt_objects: tuple[Tracklet, ...]
    gt_relations: tuple[GtRelation, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "tracklets", tuple(self.tracklets))
        object.__setattr__(self, "gt_objects", tuple(self.gt_objects))
        object.__setattr__(self, "gt_relations", tuple(self.gt_relations))
        vid = f"video {self.video_id}"
        if self.frame_count < 2:
            raise DataError(f"{vid}: frame_count must be >= 2")
        for group_name, group in (("tracklets", self.tracklets),
                                  ("gt_objects", self.gt_objects)):
            seen: set[int] = set()
            for t in group:
                if t.id in seen:
                    raise DataError(f"{vid}: duplicate id {t.id} in {group_name}")
                seen.add(t.id)
                if t.slot.frame_length(self.frame_count) != t.length:
                    raise DataError(
                        f"{vid}: {group_name} id {t.id}: slot covers "
                        f"{t.slot.frame_length(self.frame_count)} frames but has "
                        f"{t.length} boxes")
        gt_ids = {t.id for t in self.gt_objects}
        for rel in self.gt_relations:
            for role, rid in (("subject", rel.subject_gt_id), ("object", rel.object_gt_id)):
                if rid not in gt_ids:
                    raise DataError(f"{vid}: relation {role} id {rid} not in gt_objects")

    def gt_object(self, gt_id: int) -> Tracklet:
        for t in self.gt_objects:
            if t.id == gt_id:
                return t
        raise DataError(f"video {self.video_id}: unknown gt object id {gt_id}")


# ---------------------------------------------------------------------------
# vIoU
# ---------------------------------------------------------------------------


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of two (k, 4) xyxy box arrays."""
    ix1 = np.maximum(a[:, 0], b[:, 0])
    iy1 = np.maximum(a[:, 1], b[:, 1])
    ix2 = np.minimum(a[:, 2], b[:, 2])
    iy2 = np.minimum(a[:, 3], b[:, 3])
    iw = np.clip(ix2 - ix1, 0.0, None)
    ih = np.clip(iy2 - iy1, 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


@dataclass(frozen=True)
class BoxTrack:
    """Minimal tracklet view for vIoU: a slot plus its per-frame boxes."""

    slot: TimeSlot
    boxes: np.ndarray


def restrict_track(track, slot: TimeSlot, frame_count: int) -> BoxTrack | None:
    """The sub-track of ``track`` over ``slot`` (None if no temporal overlap)."""
    inter = track.slot.intersect(slot)
    if inter is None:
        return None
    t0, _ = track.slot.frame_span(frame_count)
    f0, f1 = inter.frame_span(frame_count)
    return BoxTrack(inter, track.boxes[f0 - t0:f1 - t0])


def compute_viou(a, b, frame_count: int) -> float:
    """Voluminal IoU: per-frame box IoU summed over the temporal intersection,
    divided by the number of frames in the temporal union."""
    a0, a1 = a.slot.frame_span(frame_count)
    b0, b1 = b.slot.frame_span(frame_count)
    lo, hi = max(a0, b0), min(a1, b1)
    union = (a1 - a0) + (b1 - b0) - max(0, hi - lo)
    if hi <= lo:
        return 0.0
    ious = box_iou(a.boxes[lo - a0:hi - a0], b.boxes[lo - b0:hi - b0])
    return float(ious.sum() / union)


# ---------------------------------------------------------------------------
# tracklet -> ground-truth assignment
# ---------------------------------------------------------------------------


def assign_tracklets_to_gt(sample: VideoSample, threshold: float = 0.5,
                           ) -> tuple[dict[int, list[int]], dict[int, tuple[int, float]]]:
    """Assign detected tracklets to GT objects by vIoU.

    Two rules: (1) a tracklet joins its argmax-vIoU GT object when that vIoU
    clears ``threshold``; (2) every GT object additionally receives its own
    argmax-vIoU tracklet when that vIoU is positive and the tracklet is still
    unassigned (the low-quality-match rescue). Ties break toward the lower id.
    A tracklet is never assigned to two GT objects.

    Returns (gt_id -> sorted tracklet ids, tracklet_id -> (best gt id, vIoU)).
    """
    tracklets = sample.tracklets
    gts = sample.gt_objects
    assigned: dict[int, int] = {}
    best_gt: dict[int, tuple[int, float]] = {}
    if not tracklets or not gts:
        return {g.id: [] for g in gts}, best_gt

    viou = np.zeros((len(tracklets), len(gts)))
    for i, t in enumerate(tracklets):
        for j, g in enumerate(gts):
            viou[i, j] = compute_viou(t, g, sample.frame_count)

    for i, t in enumerate(tracklets):
        top = viou[i].max()
        j = min((jj for jj in range(len(gts)) if viou[i, jj] == top),
                key=lambda jj: gts[jj].id)
        best_gt[t.id] = (gts[j].id, float(top))
        if top >= threshold:
            assigned[t.id] = gts[j].id

    for j, g in enumerate(gts):
        top = viou[:, j].max()
        i = min((ii for ii in range(len(tracklets)) if viou[ii, j] == top),
                key=lambda ii: tracklets[ii].id)
        if top > 0.0 and tracklets[i].id not in assigned:
            assigned[tracklets[i].id] = g.id

    by_gt: dict[int, list[int]] = {g.id: [] for g in gts}
    for tid, gid in assigned.items():
        by_gt[gid].append(tid)
    for gid in by_gt:
        by_gt[gid].sort()
    return by_gt, best_gt
