"""Frame-by-frame tracker: encode, enhance, extract features, associate, manage tracks.

Track management is deliberately minimal: a track matched to the dead column is
removed at once and never revived, and any unmatched detection above the spawn
threshold starts a new track.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numcore as nc
from .da import AssociationDecision, fuse_dual_da, greedy_match
from .model import MODES, MotionTrack, PrevObjects, gate_qem
from .numcore import Tensor
from .simworld import SCHEMA_VERSION, Frame, Scenario, SchemaError, check_header, raw_features

TRACKS_SCHEMA = "attentrack.tracks"

__all__ = ["gate_qem", "step", "run_sequence", "TrackerState", "TrackedObject",
           "TrackRecord", "TrackerOutput", "SequencingError"]


class SequencingError(ValueError):
    """Frames were presented out of timestamp order."""


@dataclass
class TrackedObject:
    track_id: int
    cls: str
    position: tuple[float, float]
    heading: float
    qin: np.ndarray
    qfeat: np.ndarray
    qfine: Optional[np.ndarray]
    age: int
    born_at: int
    score: float


@dataclass
class TrackerState:
    tracks: list[TrackedObject] = field(default_factory=list)
    next_id: int = 0
    frames_seen: int = 0
    last_timestamp: Optional[float] = None


@dataclass(frozen=True)
class TrackRecord:
    track_id: int
    cls: str
    position: tuple[float, float]
    heading: float
    score: float

    def to_dict(self) -> dict:
        return {"track_id": self.track_id, "class": self.cls, "position": list(self.position),
                "heading": self.heading, "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> TrackRecord:
        return cls(d["track_id"], d["class"], tuple(d["position"]), d["heading"], d["score"])


@dataclass
class TrackerOutput:
    timestamps: list[float] = field(default_factory=list)
    frames: list[list[TrackRecord]] = field(default_factory=list)

    def to_jsonl(self, meta: Optional[dict] = None) -> str:
        header = {"schema": TRACKS_SCHEMA, "version": SCHEMA_VERSION, "n_frames": len(self.frames)}
        if meta:
            header["meta"] = meta
        lines = [json.dumps(header, sort_keys=True)]
        for k, (ts, recs) in enumerate(zip(self.timestamps, self.frames)):
            lines.append(json.dumps({"index": k, "timestamp": ts,
                                     "tracks": [r.to_dict() for r in recs]}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> TrackerOutput:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise SchemaError("empty tracks file")
        check_header(json.loads(lines[0]), TRACKS_SCHEMA)
        out = cls()
        for ln in lines[1:]:
            rec = json.loads(ln)
            out.timestamps.append(rec["timestamp"])
            out.frames.append([TrackRecord.from_dict(t) for t in rec["tracks"]])
        return out


def _prev_objects(tracks: list[TrackedObject], fusion: bool) -> PrevObjects:
    return PrevObjects(
        positions=np.array([t.position for t in tracks], dtype=np.float64).reshape(-1, 2),
        headings=np.array([t.heading for t in tracks], dtype=np.float64),
        qin=Tensor(np.array([t.qin for t in tracks])),
        qfeat=Tensor(np.array([t.qfeat for t in tracks])),
        qfine=Tensor(np.array([t.qfine for t in tracks])) if fusion else None,
    )


def decide(model: MotionTrack, prev: PrevObjects, feats, mode: str) -> AssociationDecision:
    coarse, fine = model.association(prev, feats)
    coarse_dec = greedy_match(coarse)
    if mode != "fusion":
        return coarse_dec
    fine_dec = greedy_match(fine)
    return fuse_dual_da((coarse, coarse_dec), (fine, fine_dec))


def step(model: MotionTrack, state: TrackerState, frame: Frame,
         mode: Optional[str] = None) -> tuple[TrackerState, list[TrackRecord]]:
    """Advance the tracker by one frame. Does not mutate ``state``."""
    mode = mode or model.config.mode
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "fusion" and not model.fusion:
        raise ValueError("fusion mode needs a model built in fusion mode")
    if state.last_timestamp is not None and frame.timestamp <= state.last_timestamp:
        raise SequencingError(f"frame at t={frame.timestamp} after t={state.last_timestamp}")
    fusion = mode == "fusion"
    dets = frame.detections
    positions = np.array([d.position for d in dets], dtype=np.float64).reshape(-1, 2)
    prev = _prev_objects(state.tracks, fusion) if state.tracks else None

    with nc.no_grad():
        feats = model.frame_features(raw_features(dets), positions, prev)
        if prev is None or not dets:
            decision = AssociationDecision.from_tracks([None] * len(state.tracks), len(dets),
                                                       [0.0] * len(state.tracks))
        else:
            decision = decide(model, prev, feats, mode)

    def snapshot(j: int, track_id: int, age: int, born_at: int) -> TrackedObject:
        d = dets[j]
        return TrackedObject(track_id, d.cls, tuple(d.position), d.heading_meas,
                             feats.qin.data[j].copy(), feats.qfeat.data[j].copy(),
                             feats.qfine.data[j].copy() if fusion else None,
                             age, born_at, d.heatmap_score)

    tracks: list[TrackedObject] = []
    next_id = state.next_id
    claimed = set()
    for i, j in enumerate(decision.track_to_query):
        if j is None:
            continue  # dead immediately, no re-identification buffer
        old = state.tracks[i]
        tracks.append(snapshot(j, old.track_id, old.age + 1, old.born_at))
        claimed.add(j)
    for j, d in enumerate(dets):
        if j in claimed or d.heatmap_score < model.config.spawn_threshold:
            continue
        tracks.append(snapshot(j, next_id, 1, state.frames_seen))
        next_id += 1

    records = [TrackRecord(t.track_id, t.cls, t.position, t.heading, t.score) for t in tracks]
    new_state = TrackerState(tracks, next_id, state.frames_seen + 1, frame.timestamp)
    return new_state, records


def run_sequence(scenario: Scenario, model: MotionTrack, mode: Optional[str] = None) -> TrackerOutput:
    state = TrackerState()
    out = TrackerOutput()
    for frame in scenario.frames:
        state, records = step(model, state, frame, mode)
        out.timestamps.append(frame.timestamp)
        out.frames.append(records)
    return out
