import csv
import io
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attentrack.motmetrics import (REPORT_COLUMNS, Box, accumulate, class_amota, compute_amota,
                                   evaluate_sequence, match_frame, motar)
from attentrack.pipeline import TrackerOutput, TrackRecord
from attentrack.simworld import Frame, ObjectState, Scenario, ScenarioConfig

THR = 2.0


def B(i, x, y=0.0, score=1.0):
    return Box(i, float(x), float(y), score)


def stats(preds, gts, thr=THR):
    return evaluate_sequence(preds, gts, thr)[0]


# --- hand-built mini scenarios: (preds per frame, gts per frame, expected) ---
# expected = (MOTA, IDS, MT, ML), all computed by hand in the comments

MINI = {
    # 2 objects, 3 frames, tracked perfectly: GT 6, no errors
    "perfect": ([[B(10, 0), B(11, 30)]] * 3, [[B(1, 0), B(2, 30)]] * 3, (1.0, 0, 2, 0)),
    # one pred 10 m from the only gt: FP 1 + FN 1 over GT 1 -> 1 - 2 = -1
    "far_pred": ([[B(5, 10)]], [[B(1, 0)]], (-1.0, 0, 0, 1)),
    # pred id for one gt changes once over 3 frames: 1 - 1/3
    "one_switch": ([[B(5, 0)], [B(5, 0)], [B(6, 0)]], [[B(1, 0)]] * 3, (2 / 3, 1, 1, 0)),
    # seen in 1 of 10 frames: FN 9 -> 1 - 9/10; 10% of life -> ML
    "seen_once": ([[B(5, 0)]] + [[]] * 9, [[B(1, 0)]] * 10, (0.1, 0, 0, 1)),
    # nothing predicted: FN 4 over GT 4
    "silent": ([[], []], [[B(1, 0), B(2, 30)]] * 2, (0.0, 0, 0, 2)),
    # tracked plus one far false alarm per frame: FP 2 over GT 2
    "clutter": ([[B(5, 0), B(9, 50)]] * 2, [[B(1, 0)]] * 2, (0.0, 0, 1, 0)),
    # greedy by distance: p1 takes B (0.7 m) before A (0.8 m); p2 is 2.4 m from A -> FP; A missed
    # TP 1, FP 1, FN 1 over GT 2 -> 0; A never hit (ML), B always (MT)
    "greedy_order": ([[B(7, 0.8), B(8, 2.4)]], [[B(1, 0), B(2, 1.5)]], (0.0, 0, 1, 1)),
    # ids 1,2,1,1 -> two switches over GT 4 -> 0.5
    "flip_back": ([[B(1, 0)], [B(2, 0)], [B(1, 0)], [B(1, 0)]], [[B(1, 0)]] * 4, (0.5, 2, 1, 0)),
    # id 1, miss, id 2: the switch is remembered across the gap; FN 1 + IDS 1 over GT 3
    # hit 2 of 3 frames -> neither MT nor ML
    "gap_switch": ([[B(1, 0)], [], [B(2, 0)]], [[B(1, 0)]] * 3, (1 / 3, 1, 0, 0)),
    # first gt hit 4/5 (MT at exactly 80%), second 1/5 (ML at exactly 20%); FN 5 over GT 10
    "mt_ml_edges": ([[B(1, 0), B(2, 50)], [B(1, 0)], [B(1, 0)], [B(1, 0)], []],
                    [[B(1, 0), B(2, 50)]] * 5, (0.5, 0, 1, 1)),
}


@pytest.mark.parametrize("name", sorted(MINI))
def test_mini_scenarios(name):
    preds, gts, (mota, ids, mt, ml) = MINI[name]
    st_ = stats(preds, gts)
    assert st_.mota == pytest.approx(mota, abs=1e-12)
    assert (st_.ids, st_.mt, st_.ml) == (ids, mt, ml)
    assert st_.mt + st_.ml <= st_.trajectories


def test_match_exact_overlap():
    r = match_frame([B(1, 0), B(2, 5, 5)], [B(7, 0), B(8, 5, 5)], THR)
    assert sorted((p, g) for p, g, _ in r.matches) == [(1, 7), (2, 8)]
    assert r.false_positives == [] and r.misses == []


def test_match_far_pair():
    r = match_frame([B(1, 10)], [B(7, 0)], THR)
    assert r.matches == [] and r.false_positives == [1] and r.misses == [7]


def test_match_bad_threshold():
    with pytest.raises(ValueError):
        match_frame([], [], 0.0)


def _max_matching(preds, gts, thr):
    best = 0
    for perm in itertools.permutations(range(len(preds))):
        n = sum(math.hypot(preds[p].x - g.x, preds[p].y - g.y) <= thr for g, p in zip(gts, perm))
        best = max(best, n)
    return best


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_match_against_exhaustive_6x6(seed):
    r = np.random.default_rng(seed)
    gts = [B(i, *r.uniform(0, 6, size=2)) for i in range(6)]
    preds = [B(i + 10, *r.uniform(0, 6, size=2)) for i in range(6)]
    res = match_frame(preds, gts, THR)
    assert len(res.matches) <= _max_matching(preds, gts, THR)
    assert all(d <= THR for _, _, d in res.matches)
    assert len({p for p, _, _ in res.matches}) == len(res.matches) == len({g for _, g, _ in res.matches})
    assert len(res.matches) + len(res.misses) == 6 and len(res.matches) + len(res.false_positives) == 6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_match_symmetric_under_pred_relabel(seed):
    r = np.random.default_rng(seed)
    frames = 5
    gts = [[B(i, *r.uniform(0, 8, size=2)) for i in range(4)] for _ in range(frames)]
    preds = [[B(int(r.integers(0, 5)) + 10 * i, g.x + r.normal(0, 0.5), g.y) for i, g in enumerate(f)]
             for f in gts]
    relabel = {}
    shuffled = [[Box(relabel.setdefault(p.obj_id, 1000 + len(relabel)), p.x, p.y, p.score) for p in f]
                for f in preds]
    a, b = stats(preds, gts), stats(shuffled, gts)
    assert (a.tp, a.fp, a.fn, a.ids, a.mt, a.ml) == (b.tp, b.fp, b.fn, b.ids, b.mt, b.ml)


def _brute_force_ids(preds, gts, thr):
    """Replay matches and scan each gt's history of matched pred ids for changes."""
    history = {}
    for p, g in zip(preds, gts):
        for pid, gid, _ in match_frame(p, g, thr).matches:
            history.setdefault(gid, []).append(pid)
    return sum(sum(a != b for a, b in zip(h, h[1:])) for h in history.values())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_ids_against_history_scan(seed):
    r = np.random.default_rng(seed)
    gts, preds = [], []
    for _ in range(8):
        gts.append([B(i, 10 * i, 0) for i in range(3) if r.uniform() < 0.8])
        preds.append([B(int(r.integers(0, 4)) + 100 * k, g.x + r.normal(0, 0.3), 0)
                      for k, g in enumerate(gts[-1]) if r.uniform() < 0.8])
    assert stats(preds, gts).ids == _brute_force_ids(preds, gts, THR)


def test_accumulate_perfect():
    gts = [[B(1, 0), B(2, 20)]] * 4
    st_ = stats(gts, gts)
    assert st_.recall == 1.0 and st_.ids == 0 and st_.mt == 2 and st_.ml == 0


def test_accumulate_constructed_switch():
    gts = [[B(1, 0)]] * 3
    preds = [[B(3, 0)], [B(3, 0)], [B(4, 0)]]
    results = []
    last = {}
    for p, g in zip(preds, gts):
        results.append(match_frame(p, g, THR, last))
    assert accumulate(results, gts).ids == 1


def test_faf_and_motp():
    preds = [[B(1, 0.5), B(9, 50)], [B(1, 0.25)]]
    gts = [[B(1, 0)], [B(1, 0)]]
    st_ = stats(preds, gts)
    assert st_.faf(100.0) == pytest.approx(50.0)
    assert st_.motp == pytest.approx(0.375)


# --- AMOTA ---

def _two_track_case():
    """Track a (score 0.9) sits 0.3 m from g1 for 5 frames; track b (0.5) sits 0.6 m from g2
    for frames 0-2, then is a far false alarm in frame 3 and absent in frame 4."""
    gts = [[B(1, 0), B(2, 20)] for _ in range(5)]
    preds = []
    for k in range(5):
        f = [B(100, 0.3, score=0.9)]
        if k < 3:
            f.append(B(200, 20.6, score=0.5))
        elif k == 3:
            f.append(B(200, 60, score=0.5))
        preds.append(f)
    return preds, gts


def test_amota_two_track_hand_evaluation_11_points():
    # P = 10. Targets r = k/10, k = 1..10.
    # k <= 5: threshold 0.9 keeps track a: TP 5, FP 0, FN 5, r = 0.5 -> MOTAR 1 - (5 - 5)/5 = 1
    # k = 6..8: threshold 0.5 keeps both: TP 8, FP 1, FN 2, r = 0.8 -> 1 - (3 - 2)/8 = 0.875
    # k = 9, 10: only 8 true positives exist -> 0
    amota_hand = (5 * 1.0 + 3 * 0.875) / 10
    # MOTP: 0.3 with a alone, (5*0.3 + 3*0.6)/8 with both, unreachable points take the threshold
    amotp_hand = (5 * 0.3 + 3 * ((5 * 0.3 + 3 * 0.6) / 8) + 2 * THR) / 10
    amota, amotp, _ = class_amota([_two_track_case()], 11, THR)
    assert amota == pytest.approx(amota_hand, abs=1e-9)
    assert amota_hand == pytest.approx(0.7625, abs=1e-12)
    assert amotp == pytest.approx(amotp_hand, abs=1e-9)


def test_amota_two_track_hand_evaluation_40_points():
    # r = k/39: ceil(10 r) <= 5 for k = 1..19 (MOTAR 1); 6..8 for k = 20..31 (0.875); else 0
    amota_hand = (19 * 1.0 + 12 * 0.875) / 39
    amota, _, _ = class_amota([_two_track_case()], 40, THR)
    assert amota == pytest.approx(amota_hand, abs=1e-9)


def test_motar_formula_and_clamp():
    assert motar(0, 0, 0, 10, 10) == 1.0
    assert motar(0, 1, 2, 8, 10) == pytest.approx(0.875)
    assert motar(5, 20, 5, 5, 10) == 0.0
    assert motar(0, 0, 10, 0, 10) == 0.0


def test_n_points_too_small():
    with pytest.raises(ValueError):
        class_amota([_two_track_case()], 1, THR)


def _scenario_from(gt_frames, classes=None):
    frames = []
    for k, f in enumerate(gt_frames):
        objs = [ObjectState(b.obj_id, (classes or {}).get(b.obj_id, "car"), (b.x, b.y), 0.0, 0.0, (4.0, 2.0),
                            (b.x, b.y), 0.0) for b in f]
        frames.append(Frame(k, k * 0.5, (0.0, 0.0, 0.0), objs, []))
    return Scenario(frames, ScenarioConfig(), 0)


def _output_from(pred_frames, cls="car"):
    out = TrackerOutput()
    for k, f in enumerate(pred_frames):
        out.timestamps.append(k * 0.5)
        out.frames.append([TrackRecord(b.obj_id, cls, (b.x, b.y), 0.0, b.score) for b in f])
    return out


def test_perfect_tracker_amota_one():
    gts = [[B(1, 0), B(2, 20), B(3, -15, 5)]] * 6
    preds = [[Box(b.obj_id + 50, b.x, b.y, 0.7) for b in f] for f in gts]
    rep = compute_amota([_output_from(preds)], [_scenario_from(gts)])
    assert rep.per_class["car"].amota == 1.0
    assert rep.overall["amota"] == 1.0
    assert set(rep.absent) == {"truck", "bus", "pedestrian", "bicycle", "motorcycle", "trailer"}


def test_silent_tracker_amota_zero():
    gts = [[B(1, 0), B(2, 20)]] * 4
    rep = compute_amota([_output_from([[]] * 4)], [_scenario_from(gts)])
    assert rep.overall["amota"] == 0.0
    assert rep.overall["ids"] == 0 and rep.overall["fn"] == 8


def test_class_of_record_decides_bucket():
    gts = [[B(1, 0), B(2, 20)]] * 3
    sc = _scenario_from(gts, {2: "pedestrian"})
    preds = [[Box(10, 0, 0, 0.8)]] * 3
    out = _output_from(preds)
    out.frames = [f + [TrackRecord(11, "pedestrian", (20.0, 0.0), 0.0, 0.8)] for f in out.frames]
    rep = compute_amota([out], [sc])
    assert rep.per_class["car"].amota == 1.0 and rep.per_class["pedestrian"].amota == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_extra_false_tracks_never_raise_amota(seed, n_extra):
    r = np.random.default_rng(seed)
    gts = [[B(i, 15 * i, 0) for i in range(3) if r.uniform() < 0.9] for _ in range(6)]
    preds = [[Box(int(r.integers(0, 3)) * 10 + g.obj_id, g.x + r.normal(0, 0.5), g.y, float(r.uniform(0.3, 1)))
              for g in f if r.uniform() < 0.85] for f in gts]
    base = compute_amota([_output_from(preds)], [_scenario_from(gts)], n_points=11).overall["amota"]
    noisy = [f + [Box(900 + k, float(r.uniform(100, 200)), 0.0, float(r.uniform(0, 1)))
                  for k in range(n_extra)] for f in preds]
    worse = compute_amota([_output_from(noisy)], [_scenario_from(gts)], n_points=11).overall["amota"]
    assert worse <= base + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_report_ranges(seed):
    r = np.random.default_rng(seed)
    gts = [[B(i, 15 * i, 0) for i in range(4) if r.uniform() < 0.8] for _ in range(5)]
    preds = [[Box(int(r.integers(0, 6)), g.x + r.normal(0, 1.5), g.y, float(r.uniform()))
              for g in f if r.uniform() < 0.8] + [Box(50, 300.0, 0.0, 0.5)] for f in gts]
    rep = compute_amota([_output_from(preds)], [_scenario_from(gts)], n_points=11)
    for m in rep.per_class.values():
        assert m.mota <= 1.0 and 0.0 <= m.motar <= 1.0 and 0.0 <= m.amota <= 1.0
        assert m.mt + m.ml <= len({g.obj_id for f in gts for g in f})


def test_report_serialisation():
    preds, gts = _two_track_case()
    rep = compute_amota([_output_from(preds)], [_scenario_from(gts)], n_points=11)
    payload = json.loads(rep.to_json())
    assert payload["per_class"]["car"]["amota"] == pytest.approx(0.7625)
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert [r[0] for r in rows[1:]] == ["car", "overall"]
