"""Online tubelet tracking: per-class identity assignment driven by the
appearance similarity of attention-map descriptors combined with box
overlap.

Each tubelet keeps the most recent detections of one identity (newest
first). A detection inherits the id of its best-scoring tubelet when the
similarity exceeds the match threshold; contested tubelets keep only
their best claimant; confident leftovers found a new identity. Tubelets
unseen for longer than max_miss frames are dropped, and ids are never
reused.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError
from .postproc import Detection, iou
from .tensor import Tensor, bilinear_resize_array, load_tnsr

AV_GRID = 7          # each low-level attention map resamples to 7x7
AV_LEVELS = 3        # number of low-level maps feeding the descriptor
AV_DIM = AV_LEVELS * AV_GRID * AV_GRID   # 147


@dataclass
class TrackerParams:
    match_threshold: float = 1.0      # similarity needed to inherit an id
    generation_score: float = 0.3     # confidence needed to found a new id
    tub_len_max: int = 10
    max_miss: int = 10
    similarity: str = "attention_iou"  # or "iou_only"

    def validate(self):
        if self.match_threshold <= 0:
            raise ConfigError(f"match_threshold must be > 0, got {self.match_threshold}")
        if not 0 < self.generation_score <= 1:
            raise ConfigError(
                f"generation_score must be in (0,1], got {self.generation_score}")
        if self.tub_len_max < 1:
            raise ConfigError(f"tub_len_max must be >= 1, got {self.tub_len_max}")
        if self.similarity not in ("attention_iou", "iou_only"):
            raise ConfigError(f"unknown similarity mode {self.similarity!r}")
        return self


@dataclass
class Tubelet:
    id: int
    class_id: int
    objs: list               # Detections, most recent first, <= tub_len_max
    last_seen: int


@dataclass
class TrackState:
    tubs: dict = field(default_factory=dict)    # class_id -> [Tubelet]
    next_id: int = 0


def _as_map(m):
    m = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    return m[None] if m.ndim == 2 else m


def attention_vector(att_maps):
    """Whole-map descriptor: the three low-level attention maps resampled
    to 7x7 each, flattened and concatenated (length 147)."""
    if len(att_maps) < AV_LEVELS:
        raise ConfigError(f"need {AV_LEVELS} low-level maps, got {len(att_maps)}")
    parts = [bilinear_resize_array(_as_map(m), AV_GRID, AV_GRID).reshape(-1)
             for m in att_maps[:AV_LEVELS]]
    return np.concatenate(parts)


def attention_vector_for_box(att_maps, box):
    """Descriptor sampled over one box: a 7x7 bilinear grid inside the
    box region of each low-level map (same half-pixel convention)."""
    if len(att_maps) < AV_LEVELS:
        raise ConfigError(f"need {AV_LEVELS} low-level maps, got {len(att_maps)}")
    x1, y1, x2, y2 = (float(v) for v in box)
    parts = []
    for m in att_maps[:AV_LEVELS]:
        m = _as_map(m)[0]
        s = m.shape[0]
        gx = np.clip((x1 + (np.arange(AV_GRID) + 0.5) / AV_GRID * (x2 - x1)) * s - 0.5,
                     0, s - 1)
        gy = np.clip((y1 + (np.arange(AV_GRID) + 0.5) / AV_GRID * (y2 - y1)) * s - 0.5,
                     0, s - 1)
        x0 = np.floor(gx).astype(int)
        y0 = np.floor(gy).astype(int)
        x1i = np.minimum(x0 + 1, s - 1)
        y1i = np.minimum(y0 + 1, s - 1)
        fx = gx - x0
        fy = gy - y0
        top = m[y0][:, x0] * (1 - fx) + m[y0][:, x1i] * fx
        bot = m[y1i][:, x0] * (1 - fx) + m[y1i][:, x1i] * fx
        parts.append((top * (1 - fy)[:, None] + bot * fy[:, None]).reshape(-1))
    return np.concatenate(parts)


def attention_similarity(av_i, av_j):
    """Cosine similarity; defined as 0 for a zero vector (cannot arise
    from sigmoid outputs, guarded anyway)."""
    ni = np.linalg.norm(av_i)
    nj = np.linalg.norm(av_j)
    if ni == 0.0 or nj == 0.0:
        return 0.0
    return float(np.dot(av_i, av_j) / (ni * nj))


def tubelet_similarity(det: Detection, tub: Tubelet, mode="attention_iou"):
    """exp(IoU with the tubelet's newest box) times the mean appearance
    similarity over all tubelet members (1 in iou_only mode)."""
    o = iou(det.box, tub.objs[0].box)
    if mode == "iou_only":
        return float(np.exp(o))
    sims = [attention_similarity(det.av, member.av) for member in tub.objs]
    return float(np.exp(o) * (sum(sims) / len(sims)))


def update_tracks(dets, state: TrackState, params: TrackerParams, frame_idx):
    """One frame of identity assignment; mutates dets' ids and the state.

    Per class (ascending), detections in descending score order:
      1. each detection takes the id of its highest-similarity tubelet if
         that similarity strictly exceeds the match threshold;
      2. a tubelet claimed by several detections keeps only the best one,
         the rest fall back to -1;
      3. any unassigned detection whose confidence strictly exceeds the
         generation score receives a fresh, never-reused id;
      4. matched tubelets absorb their detection (newest first, truncated
         to tub_len_max), stale tubelets are dropped, new ids found new
         tubelets. Classes without tubelets skip straight to step 3.
    """
    params.validate()
    classes = sorted(set(d.class_id for d in dets) | set(state.tubs))
    for cls in classes:
        tubs = state.tubs.get(cls, [])
        objs = sorted([d for d in dets if d.class_id == cls],
                      key=lambda d: -d.score)
        claims = {}          # tubelet id -> list of (similarity, claimant)
        if tubs:
            for obj in objs:
                s_max, candidate = 0.0, None
                for tub in tubs:
                    s = tubelet_similarity(obj, tub, params.similarity)
                    if s > s_max:
                        s_max, candidate = s, tub
                if candidate is not None and s_max > params.match_threshold:
                    obj.id = candidate.id
                    claims.setdefault(candidate.id, []).append((s_max, obj))
            for tub in tubs:
                contest = claims.get(tub.id, [])
                if len(contest) > 1:
                    best = max(range(len(contest)), key=lambda i: contest[i][0])
                    for i, (_s, obj) in enumerate(contest):
                        if i != best:
                            obj.id = -1
                    claims[tub.id] = [contest[best]]
        for obj in objs:
            if obj.id == -1 and obj.score > params.generation_score:
                obj.id = state.next_id
                state.next_id += 1
                tubs.append(Tubelet(obj.id, cls, [obj], frame_idx))
        matched = {tid: c[0][1] for tid, c in claims.items() if c}
        kept = []
        for tub in tubs:
            if tub.id in matched:
                tub.objs = [matched[tub.id]] + tub.objs
                tub.objs = tub.objs[:params.tub_len_max]
                tub.last_seen = frame_idx
            if frame_idx - tub.last_seen <= params.max_miss:
                kept.append(tub)
        if kept:
            state.tubs[cls] = kept
        else:
            state.tubs.pop(cls, None)
    return dets, state


class TubeletTracker:
    """Stateful wrapper for one stream."""

    def __init__(self, params: TrackerParams | None = None):
        self.params = (params or TrackerParams()).validate()
        self.state = TrackState()

    def update(self, dets, frame_idx):
        dets, self.state = update_tracks(dets, self.state, self.params, frame_idx)
        return dets


def track_frames(frames, params: TrackerParams | None = None):
    """Run the tracker over [(frame_idx, dets), ...] in order."""
    tracker = TubeletTracker(params)
    return [(fidx, tracker.update(dets, fidx)) for fidx, dets in frames]


# ---------------------------------------------------------------------------
# MOT result CSV: frame,id,bb_left,bb_top,bb_width,bb_height,conf,-1,-1,-1
# frame and id are 1-based integers, coordinates in canvas pixels.


def write_mot_csv(path, frames, canvas=96):
    with open(path, "w") as fh:
        for fidx, dets in frames:
            for d in dets:
                if d.id < 0:
                    continue
                x1, y1, x2, y2 = d.box * canvas
                fh.write(f"{int(fidx)},{d.id + 1},{x1:.2f},{y1:.2f},"
                         f"{x2 - x1:.2f},{y2 - y1:.2f},{d.score:.4f},-1,-1,-1\n")


def read_mot_csv(path):
    """Rows as (frame, id, left, top, width, height, conf, extras...)."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 7:
                raise ParseError(f"{path}:{lineno}: expected >= 7 columns, "
                                 f"got {len(parts)}")
            try:
                frame = int(float(parts[0]))
                tid = int(float(parts[1]))
                vals = [float(v) for v in parts[2:7]]
                extras = [float(v) for v in parts[7:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad number ({exc})") from exc
            rows.append((frame, tid, *vals, *extras))
    return rows


def ingest_detections(csv_path, embeddings_path=None, canvas=96):
    """Read externally produced results back into per-frame Detection lists.

    Rows follow the result CSV layout; an 11th column, when present, is
    the class id. An optional TNSR sidecar supplies one embedding per row
    (row order), which lands in the detection's appearance slot.
    """
    rows = read_mot_csv(csv_path)
    emb = None
    if embeddings_path is not None:
        emb = load_tnsr(embeddings_path)
        if emb.ndim != 2 or len(emb) != len(rows):
            raise ParseError(f"{embeddings_path}: need one embedding row per "
                             f"detection ({len(rows)}), got shape {emb.shape}")
    frames = {}
    for i, row in enumerate(rows):
        frame, tid, left, top, w, h, conf = row[:7]
        cls = int(row[10]) if len(row) > 10 else 1
        box = np.array([left, top, left + w, top + h], dtype=np.float64) / canvas
        det = Detection(cls, float(conf), box,
                        av=None if emb is None else emb[i].copy(),
                        id=int(tid) - 1 if tid >= 1 else -1)
        frames.setdefault(int(frame), []).append(det)
    return [(f, frames[f]) for f in sorted(frames)]
