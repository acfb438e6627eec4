"""Prior boxes, box coding, NMS, and assembly of per-frame detections.

Boxes are corner-form (x1, y1, x2, y2) normalized to [0, 1]; priors are
kept in center form (cx, cy, w, h). Offsets use the usual center/size
encoding with log-scaled extents and variances 0.1 / 0.2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError

VARIANCES = (0.1, 0.2)

TOY_SIZES = (24, 12, 6, 3, 2, 1)
PRIORS_PER_CELL = 2
SCALE_MIN = 0.1
SCALE_MAX = 0.9


@dataclass
class Profile:
    """Per-dataset inference settings."""
    nms_iou: float
    keep_top: int


PROFILES = {
    "vid": Profile(nms_iou=0.45, keep_top=200),
    "mot": Profile(nms_iou=0.3, keep_top=400),
}


def get_profile(name):
    if name not in PROFILES:
        raise ConfigError(f"unknown dataset profile {name!r} (expected vid|mot)")
    return PROFILES[name]


@dataclass
class Detection:
    """One decoded object."""
    class_id: int
    score: float
    box: np.ndarray                    # corner form, normalized
    av: np.ndarray | None = None       # appearance vector (length 147 in-network)
    id: int = -1
    prior_index: int | None = None     # provenance inside the prior grid

    def copy(self):
        return Detection(self.class_id, self.score, self.box.copy(),
                         None if self.av is None else self.av.copy(),
                         self.id, self.prior_index)


def level_offsets(sizes=TOY_SIZES, priors_per_cell=PRIORS_PER_CELL):
    """First global prior index of each pyramid level."""
    offs = [0]
    for s in sizes:
        offs.append(offs[-1] + priors_per_cell * s * s)
    return offs


def num_priors(sizes=TOY_SIZES, priors_per_cell=PRIORS_PER_CELL):
    return level_offsets(sizes, priors_per_cell)[-1]


def make_priors(sizes=TOY_SIZES, priors_per_cell=PRIORS_PER_CELL,
                scale_min=SCALE_MIN, scale_max=SCALE_MAX):
    """Center-form priors for every cell of every level.

    Two square priors per cell: one at the level's scale, one at the
    geometric mean with the next level's scale. Scales are spaced linearly
    from scale_min to scale_max across levels. Corners are clamped to the
    unit square before conversion back to center form, so decoding a zero
    offset reproduces the stored prior exactly.
    """
    if priors_per_cell != 2:
        raise ConfigError(f"prior grid is defined for 2 priors per cell, got {priors_per_cell}")
    n = len(sizes)
    step = (scale_max - scale_min) / (n - 1)
    scales = [scale_min + step * i for i in range(n)] + [scale_max + step]
    rows = []
    for lvl, s in enumerate(sizes):
        sc = (scales[lvl], np.sqrt(scales[lvl] * scales[lvl + 1]))
        for y in range(s):
            for x in range(s):
                cx = (x + 0.5) / s
                cy = (y + 0.5) / s
                for j in range(priors_per_cell):
                    rows.append((cx, cy, sc[j], sc[j]))
    cf = np.asarray(rows, dtype=np.float64)
    corners = np.clip(center_to_corner(cf), 0.0, 1.0)
    return corner_to_center(corners)


def center_to_corner(cf):
    out = np.empty_like(cf)
    out[:, 0] = cf[:, 0] - cf[:, 2] / 2
    out[:, 1] = cf[:, 1] - cf[:, 3] / 2
    out[:, 2] = cf[:, 0] + cf[:, 2] / 2
    out[:, 3] = cf[:, 1] + cf[:, 3] / 2
    return out


def corner_to_center(corners):
    out = np.empty_like(corners)
    out[:, 0] = (corners[:, 0] + corners[:, 2]) / 2
    out[:, 1] = (corners[:, 1] + corners[:, 3]) / 2
    out[:, 2] = corners[:, 2] - corners[:, 0]
    out[:, 3] = corners[:, 3] - corners[:, 1]
    return out


def iou(a, b):
    """Jaccard overlap of two corner-form boxes; 0 when the union is empty."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b):
    """Pairwise IoU of [N,4] x [M,4] corner-form boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode(boxes_corner, priors_cf, variances=VARIANCES):
    """Corner-form boxes -> per-prior offset targets."""
    g = corner_to_center(np.asarray(boxes_corner, dtype=np.float64).reshape(-1, 4))
    p = priors_cf
    out = np.empty_like(g)
    out[:, 0] = (g[:, 0] - p[:, 0]) / (variances[0] * p[:, 2])
    out[:, 1] = (g[:, 1] - p[:, 1]) / (variances[0] * p[:, 3])
    out[:, 2] = np.log(g[:, 2] / p[:, 2]) / variances[1]
    out[:, 3] = np.log(g[:, 3] / p[:, 3]) / variances[1]
    return out


def decode(priors_cf, deltas, variances=VARIANCES):
    """Per-prior offsets -> corner-form boxes clamped to [0, 1]."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if d.shape[0] != priors_cf.shape[0]:
        raise ConfigError(f"decode: {d.shape[0]} deltas for {priors_cf.shape[0]} priors")
    cf = np.empty_like(d)
    cf[:, 0] = priors_cf[:, 0] + d[:, 0] * variances[0] * priors_cf[:, 2]
    cf[:, 1] = priors_cf[:, 1] + d[:, 1] * variances[0] * priors_cf[:, 3]
    cf[:, 2] = priors_cf[:, 2] * np.exp(d[:, 2] * variances[1])
    cf[:, 3] = priors_cf[:, 3] * np.exp(d[:, 3] * variances[1])
    return np.clip(center_to_corner(cf), 0.0, 1.0)


def nms(dets, iou_thresh, keep_top):
    """Greedy per-class suppression.

    Highest score first, ties by input order; a box is dropped when its
    IoU with an already-kept box exceeds iou_thresh; at most keep_top
    survive.
    """
    if not dets:
        return []
    boxes = np.stack([d.box for d in dets])
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    alive = np.ones(len(dets), dtype=bool)
    kept = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(int(i))
        if len(kept) >= keep_top:
            break
        alive &= iou_matrix(boxes[i:i + 1], boxes)[0] <= iou_thresh
        alive[i] = False
    return [dets[i] for i in kept]


def softmax_rows(logits):
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def select_class_candidates(scores, boxes, class_id, conf_thresh, profile,
                            prior_ids=None):
    """Threshold + NMS for one class; returns surviving Detections."""
    mask = scores > conf_thresh
    idx = np.nonzero(mask)[0]
    cand = [Detection(class_id, float(scores[i]), boxes[i],
                      prior_index=int(i if prior_ids is None else prior_ids[i]))
            for i in idx]
    return nms(cand, profile.nms_iou, profile.keep_top)


def detect(head_out, att_maps, conf_thresh, dataset_profile, priors=None,
           canvas=None):
    """Full per-frame pipeline: softmax, threshold, per-class NMS, and
    appearance-vector attachment from the low-level attention maps.

    head_out is anything exposing deltas() [P,4] and logits() [P,K+1], or
    a plain (deltas, logits) array pair.
    """
    profile = get_profile(dataset_profile)
    if isinstance(head_out, tuple):
        deltas, logits = head_out
    else:
        deltas, logits = head_out.deltas(), head_out.logits()
    if priors is None:
        priors = make_priors()
    boxes = decode(priors, deltas)
    probs = softmax_rows(np.asarray(logits, dtype=np.float64))
    num_classes = probs.shape[1] - 1
    out = []
    for c in range(1, num_classes + 1):
        out.extend(select_class_candidates(probs[:, c], boxes, c, conf_thresh, profile))
    if att_maps is not None:
        from .tracker import attention_vector_for_box
        for det in out:
            det.av = attention_vector_for_box(att_maps, det.box)
    return out


# ---------------------------------------------------------------------------
# detections JSONL: one object per line, av omitted when absent


def write_detections_jsonl(path, frames):
    """frames: iterable of (frame_index, list[Detection]); 1-based frames."""
    with open(path, "w") as fh:
        for fidx, dets in frames:
            for d in dets:
                rec = {"frame": int(fidx), "class": int(d.class_id),
                       "score": float(d.score),
                       "box": [float(v) for v in d.box], "id": int(d.id)}
                if d.av is not None:
                    rec["av"] = [float(v) for v in d.av]
                fh.write(json.dumps(rec) + "\n")


def read_detections_jsonl(path):
    """Returns {frame_index: [Detection, ...]} preserving line order."""
    frames = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                det = Detection(int(rec["class"]), float(rec["score"]),
                                np.asarray(rec["box"], dtype=np.float64),
                                av=None if "av" not in rec
                                else np.asarray(rec["av"], dtype=np.float64),
                                id=int(rec.get("id", -1)))
                frames.setdefault(int(rec["frame"]), []).append(det)
            except (KeyError, ValueError, TypeError) as exc:
                raise ParseError(f"{path}:{lineno}: bad detection record ({exc})") from exc
    return frames
