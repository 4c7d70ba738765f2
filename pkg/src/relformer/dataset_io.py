"""Dataset directory reader/writer.

Layout:
  vocab.json                {"objects": [...], "predicates": [...]}
  video_<id>.json           one per video (see below)
  video_<id>.trkf           feature matrix file referenced by the JSON

A video JSON holds {video_id, frame_count, tracklets, gt_objects,
gt_relations}. Each tracklet entry is {id, start, end, category, probs,
boxes, features}; gt_objects drop the probs field; gt_relations entries are
{subject, object, predicate, start, end}. ``features`` is "<file>#<row>",
pointing at consecutive rows of a feature file.

Feature files are little-endian float32 matrices, row-major, with a 16-byte
header: magic "TRKF", uint32 rows, uint32 cols, 4 reserved zero bytes.

All JSON this package writes is canonical: sorted keys, compact separators,
floats via repr (shortest round-trip), trailing newline. Identical data
produces identical bytes.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .data import GtRelation, TimeSlot, Tracklet, VideoSample, Vocab
from .errors import DataError

TRKF_MAGIC = b"TRKF"
TRKF_HEADER_BYTES = 16


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True) + "\n"


def write_feature_file(path: str, matrix: np.ndarray) -> None:
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise DataError(f"{path}: feature matrix must be 2-d, got {arr.shape}")
    rows, cols = arr.shape
    header = TRKF_MAGIC + np.array([rows, cols, 0], dtype="<u4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def read_feature_file(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read feature file: {exc}") from exc
    if len(raw) < TRKF_HEADER_BYTES or raw[:4] != TRKF_MAGIC:
        raise DataError(f"{path}: not a TRKF feature file")
    rows, cols, _ = np.frombuffer(raw, dtype="<u4", count=3, offset=4)
    expect = TRKF_HEADER_BYTES + int(rows) * int(cols) * 4
    if len(raw) != expect:
        raise DataError(f"{path}: size {len(raw)} != expected {expect} for {rows}x{cols}")
    return np.frombuffer(raw, dtype="<f4", count=int(rows) * int(cols),
                         offset=TRKF_HEADER_BYTES).reshape(int(rows), int(cols)).copy()


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise DataError(f"{where}: missing field {key!r}")
    return obj[key]


def _track_to_json(t: Tracklet, feature_ref: str, with_probs: bool) -> dict:
    entry = {
        "id": t.id,
        "start": t.slot.start,
        "end": t.slot.end,
        "category": t.category,
        "boxes": [[float(v) for v in row] for row in t.boxes],
        "features": feature_ref,
    }
    if with_probs:
        if t.probs is None:
            raise DataError(f"tracklet {t.id}: missing probs on a detected tracklet")
        entry["probs"] = [float(v) for v in t.probs]
    return entry


def _track_from_json(obj: dict, features: np.ndarray, where: str,
                     with_probs: bool) -> Tracklet:
    for key in ("id", "start", "end", "category", "boxes", "features"):
        _require(obj, key, where)
    ref = obj["features"]
    try:
        _, row_str = ref.rsplit("#", 1)
        row = int(row_str)
    except (AttributeError, ValueError):
        raise DataError(f"{where}: bad features reference {ref!r}") from None
    boxes = np.asarray(obj["boxes"], dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise DataError(f"{where}: boxes must be a list of 4-vectors")
    rows = len(boxes)
    if row < 0 or row + rows > len(features):
        raise DataError(f"{where}: features reference {ref!r} out of range")
    probs = None
    if with_probs:
        probs = np.asarray(_require(obj, "probs", where), dtype=np.float64)
    try:
        return Tracklet(id=int(obj["id"]), slot=TimeSlot(obj["start"], obj["end"]),
                        boxes=boxes, appearance=features[row:row + rows],
                        category=int(obj["category"]), probs=probs)
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from None


def save_dataset(directory: str, samples: list[VideoSample], vocab: Vocab,
                 force: bool = False) -> None:
    os.makedirs(directory, exist_ok=True)
    existing = [p for p in os.listdir(directory) if not p.startswith(".")]
    if existing and not force:
        raise DataError(f"{directory}: not empty (use force to overwrite)")
    with open(os.path.join(directory, "vocab.json"), "w", encoding="utf-8") as f:
        f.write(canonical_json({"objects": list(vocab.objects),
                                "predicates": list(vocab.predicates)}))
    for sample in samples:
        feat_name = f"video_{sample.video_id}.trkf"
        rows: list[np.ndarray] = []
        offset = 0
        doc = {"video_id": sample.video_id, "frame_count": sample.frame_count,
               "tracklets": [], "gt_objects": [], "gt_relations": []}
        for group_key, group, with_probs in (("tracklets", sample.tracklets, True),
                                             ("gt_objects", sample.gt_objects, False)):
            for t in group:
                doc[group_key].append(
                    _track_to_json(t, f"{feat_name}#{offset}", with_probs))
                rows.append(t.appearance)
                offset += t.length
        for rel in sample.gt_relations:
            doc["gt_relations"].append({
                "subject": rel.subject_gt_id, "object": rel.object_gt_id,
                "predicate": rel.predicate,
                "start": rel.slot.start, "end": rel.slot.end})
        if rows:
            matrix = np.concatenate(rows, axis=0)
        else:
            matrix = np.zeros((0, 1), dtype=np.float32)
        write_feature_file(os.path.join(directory, feat_name), matrix)
        with open(os.path.join(directory, f"video_{sample.video_id}.json"),
                  "w", encoding="utf-8") as f:
            f.write(canonical_json(doc))


def load_dataset(directory: str) -> tuple[list[VideoSample], Vocab]:
    """Read and validate a dataset directory. Videos sort by video_id."""
    vocab_path = os.path.join(directory, "vocab.json")
    try:
        with open(vocab_path, encoding="utf-8") as f:
            vocab_doc = json.load(f)
    except OSError as exc:
        raise DataError(f"{vocab_path}: cannot read: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{vocab_path}: invalid JSON: {exc}") from exc
    vocab = Vocab(objects=_require(vocab_doc, "objects", "vocab.json"),
                  predicates=_require(vocab_doc, "predicates", "vocab.json"))

    samples = []
    names = sorted(p for p in os.listdir(directory)
                   if p.startswith("video_") and p.endswith(".json"))
    for name in names:
        path = os.path.join(directory, name)
        try:
            with open(path, encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON: {exc}") from exc
        samples.append(_sample_from_json(doc, directory, name, vocab))
    samples.sort(key=lambda s: s.video_id)
    return samples, vocab


def _sample_from_json(doc: dict, directory: str, name: str, vocab: Vocab) -> VideoSample:
    video_id = str(_require(doc, "video_id", name))
    frame_count = int(_require(doc, "frame_count", name))

    feature_cache: dict[str, np.ndarray] = {}

    def features_for(entry: dict, where: str) -> np.ndarray:
        ref = _require(entry, "features", where)
        fname = str(ref).rsplit("#", 1)[0]
        if fname not in feature_cache:
            feature_cache[fname] = read_feature_file(os.path.join(directory, fname))
        return feature_cache[fname]

    def tracks(key: str, with_probs: bool) -> list[Tracklet]:
        out = []
        for i, entry in enumerate(_require(doc, key, name)):
            where = f"{name}: {key}[{i}]"
            track = _track_from_json(entry, features_for(entry, where), where, with_probs)
            if track.category < 0 or track.category >= len(vocab.objects):
                raise DataError(f"{where}: category {track.category} outside vocab")
            if with_probs and len(track.probs) != len(vocab.objects):
                raise DataError(f"{where}: probs length {len(track.probs)} != "
                                f"|object vocab| {len(vocab.objects)}")
            out.append(track)
        return out

    relations = []
    for i, entry in enumerate(_require(doc, "gt_relations", name)):
        where = f"{name}: gt_relations[{i}]"
        for key in ("subject", "object", "predicate", "start", "end"):
            _require(entry, key, where)
        if not (0 <= int(entry["predicate"]) < len(vocab.predicates)):
            raise DataError(f"{where}: predicate {entry['predicate']} outside vocab")
        try:
            relations.append(GtRelation(
                subject_gt_id=int(entry["subject"]), object_gt_id=int(entry["object"]),
                predicate=int(entry["predicate"]),
                slot=TimeSlot(entry["start"], entry["end"])))
        except DataError as exc:
            raise DataError(f"{where}: {exc}") from None

    try:
        return VideoSample(video_id=video_id, frame_count=frame_count,
                           tracklets=tracks("tracklets", True),
                           gt_objects=tracks("gt_objects", False),
                           gt_relations=relations)
    except DataError as exc:
        raise DataError(f"{name}: {exc}") from None
