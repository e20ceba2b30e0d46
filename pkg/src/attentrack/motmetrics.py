"""CLEAR-MOT bookkeeping and nuScenes-style AMOTA/AMOTP.

Predictions and ground truth are matched per frame by centre distance, greedily in
ascending order and only inside a threshold. Scores are swept to hit evenly spaced
recall targets; AMOTA averages the recall-normalised MOTA (MOTAR) over those targets.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .pipeline import TrackerOutput
from .simworld import CLASSES, Scenario

MT_RATIO = 0.8
ML_RATIO = 0.2
FAF_NORMALIZATION = 100.0

# column order of the per-class report table
REPORT_COLUMNS = ("class", "amota", "amotp", "recall", "motar", "gt", "mota", "motp",
                  "mt", "ml", "faf", "ids", "tp", "fp", "fn")


@dataclass(frozen=True)
class Box:
    obj_id: int
    x: float
    y: float
    score: float = 1.0


@dataclass
class FrameMatchResult:
    matches: list[tuple[int, int, float]] = field(default_factory=list)  # (pred id, gt id, distance)
    false_positives: list[int] = field(default_factory=list)
    misses: list[int] = field(default_factory=list)
    switches: list[int] = field(default_factory=list)                    # gt ids that switched


def match_frame(preds: Sequence[Box], gts: Sequence[Box], threshold_m: float,
                last_match: Optional[dict[int, int]] = None) -> FrameMatchResult:
    """Greedy one-to-one matching by ascending centre distance within ``threshold_m``.

    ``last_match`` maps gt id -> last matched pred id; it is updated in place and an
    id switch is recorded whenever a gt is matched to a different pred than before.
    """
    if threshold_m <= 0:
        raise ValueError(f"matching threshold must be positive, got {threshold_m}")
    res = FrameMatchResult()
    pairs = []
    for gi, g in enumerate(gts):
        for pi, p in enumerate(preds):
            dist = math.hypot(p.x - g.x, p.y - g.y)
            if dist <= threshold_m:
                pairs.append((dist, gi, pi))
    pairs.sort()
    used_g, used_p = set(), set()
    for dist, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        g, p = gts[gi], preds[pi]
        res.matches.append((p.obj_id, g.obj_id, dist))
        if last_match is not None:
            prior = last_match.get(g.obj_id)
            if prior is not None and prior != p.obj_id:
                res.switches.append(g.obj_id)
            last_match[g.obj_id] = p.obj_id
    res.false_positives = [p.obj_id for pi, p in enumerate(preds) if pi not in used_p]
    res.misses = [g.obj_id for gi, g in enumerate(gts) if gi not in used_g]
    return res


@dataclass
class ClearStats:
    gt: int = 0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    frames: int = 0
    dist_sum: float = 0.0
    mt: int = 0
    ml: int = 0
    trajectories: int = 0

    def merge(self, other: ClearStats) -> ClearStats:
        return ClearStats(*(a + b for a, b in zip(astuple_stats(self), astuple_stats(other))))

    @property
    def recall(self) -> float:
        return self.tp / self.gt if self.gt else 0.0

    @property
    def mota(self) -> float:
        return 1.0 - (self.fn + self.fp + self.ids) / self.gt if self.gt else 0.0

    @property
    def motp(self) -> float:
        return self.dist_sum / self.tp if self.tp else math.nan

    @property
    def motar(self) -> float:
        return motar(self.ids, self.fp, self.fn, self.tp, self.gt)

    def faf(self, normalization: float = FAF_NORMALIZATION) -> float:
        return self.fp / self.frames * normalization if self.frames else 0.0


def astuple_stats(s: ClearStats) -> tuple:
    return (s.gt, s.tp, s.fp, s.fn, s.ids, s.frames, s.dist_sum, s.mt, s.ml, s.trajectories)


def motar(ids: int, fp: int, fn: int, tp: int, gt: int) -> float:
    """``max(0, 1 - (IDS + FP + FN - (1 - r) P) / (r P))`` at achieved recall ``r = TP / P``."""
    if gt == 0 or tp == 0:
        return 0.0
    r = tp / gt
    return max(0.0, 1.0 - (ids + fp + fn - (1.0 - r) * gt) / (r * gt))


def accumulate(results: Sequence[FrameMatchResult], gt_frames: Sequence[Sequence[Box]]) -> ClearStats:
    """Aggregate one sequence. ``gt_frames`` gives each gt trajectory its lifetime for MT/ML."""
    if len(results) != len(gt_frames):
        raise ValueError(f"{len(results)} match results for {len(gt_frames)} gt frames")
    st = ClearStats(frames=len(results))
    life: dict[int, int] = {}
    hit: dict[int, int] = {}
    for frame in gt_frames:
        for g in frame:
            life[g.obj_id] = life.get(g.obj_id, 0) + 1
    st.gt = sum(life.values())
    for r in results:
        st.tp += len(r.matches)
        st.fp += len(r.false_positives)
        st.fn += len(r.misses)
        st.ids += len(r.switches)
        for _, gid, dist in r.matches:
            st.dist_sum += dist
            hit[gid] = hit.get(gid, 0) + 1
    st.trajectories = len(life)
    for gid, n in life.items():
        ratio = hit.get(gid, 0) / n
        if ratio >= MT_RATIO:
            st.mt += 1
        elif ratio <= ML_RATIO:
            st.ml += 1
    return st


def evaluate_sequence(pred_frames: Sequence[Sequence[Box]], gt_frames: Sequence[Sequence[Box]],
                      threshold_m: float, min_score: float = -math.inf) -> tuple[ClearStats, list[float]]:
    """Match a whole sequence; returns stats and the scores of matched predictions."""
    if len(pred_frames) != len(gt_frames):
        raise ValueError(f"sequence length mismatch: {len(pred_frames)} predicted vs {len(gt_frames)} gt frames")
    last: dict[int, int] = {}
    results, tp_scores = [], []
    for preds, gts in zip(pred_frames, gt_frames):
        kept = [p for p in preds if p.score >= min_score]
        r = match_frame(kept, gts, threshold_m, last)
        by_id = {p.obj_id: p.score for p in kept}
        tp_scores.extend(by_id[pid] for pid, _, _ in r.matches)
        results.append(r)
    return accumulate(results, gt_frames), tp_scores


@dataclass
class ClassMetrics:
    cls: str
    amota: float
    amotp: float
    recall: float
    motar: float
    gt: int
    mota: float
    motp: float
    mt: int
    ml: int
    faf: float
    ids: int
    tp: int
    fp: int
    fn: int


@dataclass
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    absent: list[str]
    overall: dict[str, float]
    n_points: int
    threshold_m: float

    def to_json(self) -> str:
        payload = {
            "n_points": self.n_points,
            "threshold_m": self.threshold_m,
            "overall": self.overall,
            "per_class": {c: _clean(asdict(m)) for c, m in self.per_class.items()},
            "absent": self.absent,
        }
        return json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for c in CLASSES:
            if c in self.per_class:
                m = asdict(self.per_class[c])
                m["class"] = m.pop("cls")
                w.writerow([_fmt(m[k]) for k in REPORT_COLUMNS])
        o = dict(self.overall)
        o["class"] = "overall"
        w.writerow([_fmt(o.get(k, "")) for k in REPORT_COLUMNS])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def _clean(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def _class_frames(output: TrackerOutput, scenario: Scenario, cls: str):
    preds = [[Box(r.track_id, r.position[0], r.position[1], r.score) for r in frame if r.cls == cls]
             for frame in output.frames]
    gts = [[Box(g.gt_id, g.position[0], g.position[1]) for g in f.gt_objects if g.cls == cls]
           for f in scenario.frames]
    return preds, gts


def class_amota(sequences: Sequence[tuple[list, list]], n_points: int, threshold_m: float) -> tuple[float, float, ClearStats]:
    """AMOTA, AMOTP and the all-predictions stats for one class over several sequences."""
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")
    full = ClearStats()
    tp_scores: list[float] = []
    for preds, gts in sequences:
        st, sc = evaluate_sequence(preds, gts, threshold_m)
        full = full.merge(st)
        tp_scores.extend(sc)
    p_total = full.gt
    tp_scores.sort(reverse=True)
    cache: dict[float, ClearStats] = {}
    motars, motps = [], []
    for k in range(1, n_points):
        r = k / (n_points - 1)
        need = max(1, math.ceil(r * p_total - 1e-9))
        if need > len(tp_scores):
            motars.append(0.0)
            motps.append(threshold_m)
            continue
        thr = tp_scores[need - 1]
        if thr not in cache:
            st = ClearStats()
            for preds, gts in sequences:
                st = st.merge(evaluate_sequence(preds, gts, threshold_m, thr)[0])
            cache[thr] = st
        st = cache[thr]
        motars.append(st.motar)
        motps.append(st.motp if st.tp else threshold_m)
    return float(np.mean(motars)), float(np.mean(motps)), full


def compute_amota(outputs: Sequence[TrackerOutput], scenarios: Sequence[Scenario],
                  n_points: int = 40, threshold_m: float = 2.0,
                  faf_normalization: float = FAF_NORMALIZATION) -> MetricsReport:
    """Per-class and overall metrics; classes without ground truth are reported absent."""
    if len(outputs) != len(scenarios):
        raise ValueError(f"{len(outputs)} tracker outputs for {len(scenarios)} scenarios")
    per_class: dict[str, ClassMetrics] = {}
    absent = []
    for cls in CLASSES:
        seqs = [_class_frames(o, s, cls) for o, s in zip(outputs, scenarios)]
        if sum(len(f) for _, gts in seqs for f in gts) == 0:
            absent.append(cls)
            continue
        amota, amotp, st = class_amota(seqs, n_points, threshold_m)
        per_class[cls] = ClassMetrics(cls, amota, amotp, st.recall, st.motar, st.gt, st.mota, st.motp,
                                      st.mt, st.ml, st.faf(faf_normalization), st.ids, st.tp, st.fp, st.fn)
    overall: dict[str, float] = {}
    if per_class:
        ms = list(per_class.values())
        for key in ("amota", "amotp", "recall", "motar", "mota", "motp", "faf"):
            vals = [getattr(m, key) for m in ms if not math.isnan(getattr(m, key))]
            overall[key] = float(np.mean(vals)) if vals else math.nan
        for key in ("gt", "mt", "ml", "ids", "tp", "fp", "fn"):
            overall[key] = int(sum(getattr(m, key) for m in ms))
    return MetricsReport(per_class, absent, overall, n_points, threshold_m)
