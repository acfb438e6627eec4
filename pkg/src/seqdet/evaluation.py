"""Detection mAP and CLEAR-MOT tracking metrics.

mAP follows the all-points convention: detections are matched greedily by
score against unmatched same-class boxes at IoU >= 0.5 within each frame,
and AP integrates the precision envelope over recall. Classes without any
ground truth are excluded from the mean.

The MOT evaluator keeps the last known track-to-hypothesis correspondence
and reuses it while still gated, matching the remaining pairs greedily by
IoU per frame. MOTA = 1 - (FP + FN + IDS) / num_gt; MOTP is the mean IoU
of matched pairs; MT/ML count trajectories tracked for >= 80% / < 20% of
their lifetime. An id switch is counted whenever a track's match
contradicts its last known correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .postproc import iou


def _ap_all_points(recalls, precisions):
    mrec = np.concatenate([[0.0], recalls, [1.0]])
    mpre = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def voc_map(dets_by_frame, gts_by_frame, iou_thresh=0.5, num_classes=4):
    """dets_by_frame: {frame: [Detection]}; gts_by_frame: {frame: (boxes, classes)}.

    Returns (per-class AP dict, mAP). A detection is a true positive when
    its best-IoU unmatched ground-truth box of the same class reaches
    iou_thresh; each box is creditable once.
    """
    aps = {}
    for c in range(1, num_classes + 1):
        gt_count = 0
        gt_used = {}
        for f, (boxes, classes) in gts_by_frame.items():
            mask = np.asarray(classes, dtype=int) == c
            gt_used[f] = (np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[mask],
                          np.zeros(int(mask.sum()), dtype=bool))
            gt_count += int(mask.sum())
        if gt_count == 0:
            continue
        cand = []
        for f in sorted(dets_by_frame):
            for i, d in enumerate(dets_by_frame[f]):
                if d.class_id == c:
                    cand.append((-d.score, f, i, d))
        cand.sort(key=lambda r: (r[0], r[1], r[2]))
        tp = np.zeros(len(cand))
        fp = np.zeros(len(cand))
        for rank, (_s, f, _i, d) in enumerate(cand):
            boxes, used = gt_used.get(f, (np.empty((0, 4)), np.empty(0, dtype=bool)))
            best, best_iou = -1, 0.0
            for g in range(len(boxes)):
                v = iou(d.box, boxes[g])
                if v > best_iou:
                    best, best_iou = g, v
            if best >= 0 and best_iou >= iou_thresh and not used[best]:
                used[best] = True
                tp[rank] = 1
            else:
                fp[rank] = 1
        ctp = np.cumsum(tp)
        cfp = np.cumsum(fp)
        recalls = ctp / gt_count
        precisions = ctp / np.maximum(ctp + cfp, 1e-12)
        aps[c] = _ap_all_points(recalls, precisions) if len(cand) else 0.0
    mean = float(np.mean(list(aps.values()))) if aps else 0.0
    return aps, mean


# ---------------------------------------------------------------------------
# CLEAR-MOT


@dataclass
class MotReport:
    mota: float
    motp: float
    mt: float                 # fraction of trajectories mostly tracked
    ml: float                 # fraction mostly lost
    fp: int
    fn: int
    ids: int
    num_gt: int
    num_tracks: int
    mt_count: int
    ml_count: int
    num_matches: int
    motp_sum: float

    def row(self):
        return {"MOTA": self.mota, "MOTP": self.motp, "MT": self.mt, "ML": self.ml,
                "FP": self.fp, "FN": self.fn, "IDS": self.ids}


def _rows_by_frame(rows):
    frames = {}
    for r in rows:
        frame, tid, left, top, w, h = int(r[0]), int(r[1]), r[2], r[3], r[4], r[5]
        frames.setdefault(frame, []).append(
            (tid, np.array([left, top, left + w, top + h], dtype=np.float64)))
    return frames


def mot_metrics(result_rows, gt_rows, iou_gate=0.5):
    """CLEAR-MOT over one sequence of MOT-format rows."""
    gt_frames = _rows_by_frame(gt_rows)
    hyp_frames = _rows_by_frame(result_rows)
    corr = {}                       # gt id -> last matched hypothesis id
    fp = fn = ids = 0
    num_gt = sum(len(v) for v in gt_frames.values())
    motp_sum = 0.0
    num_matches = 0
    track_total = {}
    track_matched = {}
    for frame in sorted(set(gt_frames) | set(hyp_frames)):
        gts = gt_frames.get(frame, [])
        hyps = hyp_frames.get(frame, [])
        for gid, _ in gts:
            track_total[gid] = track_total.get(gid, 0) + 1
        hyp_by_id = {hid: i for i, (hid, _b) in enumerate(hyps)}
        gt_free = list(range(len(gts)))
        hyp_free = set(range(len(hyps)))
        matches = []
        # persistence: keep an existing correspondence while still gated
        for gi in list(gt_free):
            gid, gbox = gts[gi]
            hid = corr.get(gid)
            if hid is not None and hid in hyp_by_id and hyp_by_id[hid] in hyp_free:
                hi = hyp_by_id[hid]
                v = iou(gbox, hyps[hi][1])
                if v >= iou_gate:
                    matches.append((gi, hi, v))
                    gt_free.remove(gi)
                    hyp_free.discard(hi)
        # remaining pairs matched greedily by descending IoU
        pairs = []
        for gi in gt_free:
            for hi in hyp_free:
                v = iou(gts[gi][1], hyps[hi][1])
                if v >= iou_gate:
                    pairs.append((-v, gi, hi))
        pairs.sort()
        taken_g, taken_h = set(), set()
        for nv, gi, hi in pairs:
            if gi not in taken_g and hi not in taken_h:
                taken_g.add(gi)
                taken_h.add(hi)
                matches.append((gi, hi, -nv))
        for gi, hi, v in matches:
            gid = gts[gi][0]
            hid = hyps[hi][0]
            if gid in corr and corr[gid] != hid:
                ids += 1
            corr[gid] = hid
            motp_sum += v
            num_matches += 1
            track_matched[gid] = track_matched.get(gid, 0) + 1
        fp += len(hyps) - len(matches)
        fn += len(gts) - len(matches)
    num_tracks = len(track_total)
    mt_count = ml_count = 0
    for gid, total in track_total.items():
        ratio = track_matched.get(gid, 0) / total
        if ratio >= 0.8:
            mt_count += 1
        elif ratio < 0.2:
            ml_count += 1
    mota = 1.0 - (fp + fn + ids) / num_gt if num_gt else 0.0
    motp = motp_sum / num_matches if num_matches else 0.0
    return MotReport(mota, motp,
                     mt_count / num_tracks if num_tracks else 0.0,
                     ml_count / num_tracks if num_tracks else 0.0,
                     fp, fn, ids, num_gt, num_tracks, mt_count, ml_count,
                     num_matches, motp_sum)


def aggregate_reports(reports):
    """Pool per-video reports: counts add, rates recompute over the pool."""
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    ids = sum(r.ids for r in reports)
    num_gt = sum(r.num_gt for r in reports)
    num_matches = sum(r.num_matches for r in reports)
    motp_sum = sum(r.motp_sum for r in reports)
    num_tracks = sum(r.num_tracks for r in reports)
    mt_count = sum(r.mt_count for r in reports)
    ml_count = sum(r.ml_count for r in reports)
    return MotReport(
        1.0 - (fp + fn + ids) / num_gt if num_gt else 0.0,
        motp_sum / num_matches if num_matches else 0.0,
        mt_count / num_tracks if num_tracks else 0.0,
        ml_count / num_tracks if num_tracks else 0.0,
        fp, fn, ids, num_gt, num_tracks, mt_count, ml_count,
        num_matches, motp_sum)


MOT_COLUMNS = ("MOTA", "MOTP", "MT", "ML", "FP", "FN", "IDS")


def format_mot_table(named_reports):
    """Aligned text table, one row per (name, MotReport)."""
    header = ["Video"] + list(MOT_COLUMNS)
    rows = [header]
    for name, r in named_reports:
        d = r.row()
        rows.append([name, f"{d['MOTA'] * 100:.1f}", f"{d['MOTP'] * 100:.1f}",
                     f"{d['MT'] * 100:.1f}%", f"{d['ML'] * 100:.1f}%",
                     str(d["FP"]), str(d["FN"]), str(d["IDS"])])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    return "\n".join(lines) + "\n"


def mot_report_csv(named_reports):
    lines = ["video," + ",".join(c.lower() for c in MOT_COLUMNS)]
    for name, r in named_reports:
        d = r.row()
        lines.append(f"{name},{d['MOTA']:.6f},{d['MOTP']:.6f},{d['MT']:.6f},"
                     f"{d['ML']:.6f},{d['FP']},{d['FN']},{d['IDS']}")
    return "\n".join(lines) + "\n"
