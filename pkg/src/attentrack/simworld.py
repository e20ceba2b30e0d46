"""Synthetic bird's-eye-view world, toy detector and ground-truth association labels.

Objects move with constant velocity plus small heading/speed jitter in a world frame;
the ego vehicle translates and turns; everything the tracker sees is expressed in the
ego frame and clipped to a square box around the ego.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .attention import Mlp2, wrap_angle
from .numcore import DimensionError, Tensor

SCENARIO_SCHEMA = "attentrack.scenario"
SCHEMA_VERSION = 1

CLASSES = ("car", "truck", "bus", "pedestrian", "bicycle", "motorcycle", "trailer")
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}

# nuScenes validation GT counts per class
CLASS_COUNTS = {"car": 58317, "truck": 9650, "bus": 2112, "pedestrian": 25423,
                "bicycle": 1993, "motorcycle": 1977, "trailer": 2425}
SPEED_CAP = {"car": 20.0, "truck": 15.0, "bus": 15.0, "pedestrian": 2.5,
             "bicycle": 7.0, "motorcycle": 15.0, "trailer": 12.0}
MEAN_SIZE = {"car": (4.6, 1.9), "truck": (6.9, 2.5), "bus": (11.0, 2.9),
             "pedestrian": (0.7, 0.7), "bicycle": (1.7, 0.6), "motorcycle": (2.1, 0.8),
             "trailer": (12.0, 2.9)}

POS_SCALE = 0.25
RAW_DIM = 2 + 2 + len(CLASSES) + 2 + 1
CLASS_LOGIT_GAIN = 4.0


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ScenarioConfig:
    n_frames: int = 40
    period: float = 0.5
    half_extent: float = 40.0
    initial_objects: int = 8
    max_objects: int = 10
    birth_rate: float = 0.2          # Poisson mean of new objects per frame
    death_prob: float = 0.01         # per object per frame
    p_miss: float = 0.0
    clutter_rate: float = 0.0        # Poisson mean of false positives per frame
    sigma_pos: float = 0.0
    sigma_heading: float = 0.0
    sigma_size: float = 0.0          # relative
    class_noise: float = 0.0         # std of additive noise on class logits
    heading_jitter: float = 0.02     # process noise, rad per frame
    speed_jitter: float = 0.2        # process noise, m/s per frame
    speed_fraction: float = 0.5      # initial speed ~ U(0, fraction * class cap)
    min_spawn_gap: float = 6.0
    ego_speed: float = 2.0
    ego_yaw_rate: float = 0.0
    class_mix: Optional[dict] = None

    def validate(self) -> ScenarioConfig:
        checks = [
            ("n_frames", self.n_frames >= 2),
            ("period", self.period > 0),
            ("half_extent", self.half_extent > 0),
            ("initial_objects", self.initial_objects >= 0),
            ("max_objects", self.max_objects >= self.initial_objects),
            ("birth_rate", self.birth_rate >= 0),
            ("death_prob", 0 <= self.death_prob <= 1),
            ("p_miss", 0 <= self.p_miss <= 1),
            ("clutter_rate", self.clutter_rate >= 0),
            ("sigma_pos", self.sigma_pos >= 0),
            ("sigma_heading", self.sigma_heading >= 0),
            ("sigma_size", self.sigma_size >= 0),
            ("class_noise", self.class_noise >= 0),
            ("heading_jitter", self.heading_jitter >= 0),
            ("speed_jitter", self.speed_jitter >= 0),
            ("speed_fraction", 0 <= self.speed_fraction <= 1),
            ("min_spawn_gap", self.min_spawn_gap >= 0),
            ("ego_speed", self.ego_speed >= 0),
        ]
        bad = [name for name, ok in checks if not ok]
        if self.class_mix is not None:
            unknown = set(self.class_mix) - set(CLASSES)
            if unknown or not self.class_mix or any(v < 0 for v in self.class_mix.values()) \
                    or sum(self.class_mix.values()) <= 0:
                bad.append("class_mix")
        if bad:
            raise ConfigError("invalid scenario config field(s): " + ", ".join(bad))
        return self

    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError("unknown scenario config field(s): " + ", ".join(unknown))
        return cls(**d).validate()

    def class_probs(self) -> np.ndarray:
        mix = self.class_mix or CLASS_COUNTS
        w = np.array([float(mix.get(c, 0.0)) for c in CLASSES])
        return w / w.sum()


@dataclass
class ObjectState:
    gt_id: int
    cls: str
    position: tuple[float, float]        # ego frame
    heading: float                        # ego frame
    speed: float
    size: tuple[float, float]
    world_position: tuple[float, float]
    world_heading: float

    def to_dict(self) -> dict:
        return {"gt_id": self.gt_id, "class": self.cls, "position": list(self.position),
                "heading": self.heading, "speed": self.speed, "size": list(self.size),
                "world_position": list(self.world_position), "world_heading": self.world_heading}

    @classmethod
    def from_dict(cls, d: dict) -> ObjectState:
        return cls(d["gt_id"], d["class"], tuple(d["position"]), d["heading"], d["speed"],
                   tuple(d["size"]), tuple(d["world_position"]), d["world_heading"])


@dataclass
class DetectionQuery:
    position: tuple[float, float]
    heatmap_score: float
    class_logits: list[float]
    heading_meas: float
    size_meas: tuple[float, float]
    source_gt: Optional[int] = None      # hidden from the tracker

    @property
    def cls(self) -> str:
        return CLASSES[int(np.argmax(self.class_logits))]

    def to_dict(self) -> dict:
        return {"position": list(self.position), "heatmap_score": self.heatmap_score,
                "class_logits": list(self.class_logits), "heading_meas": self.heading_meas,
                "size_meas": list(self.size_meas), "source_gt": self.source_gt}

    @classmethod
    def from_dict(cls, d: dict) -> DetectionQuery:
        return cls(tuple(d["position"]), d["heatmap_score"], list(d["class_logits"]),
                   d["heading_meas"], tuple(d["size_meas"]), d["source_gt"])


@dataclass
class Frame:
    index: int
    timestamp: float
    ego_pose: tuple[float, float, float]
    gt_objects: list[ObjectState] = field(default_factory=list)
    detections: list[DetectionQuery] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"index": self.index, "timestamp": self.timestamp, "ego_pose": list(self.ego_pose),
                "gt_objects": [o.to_dict() for o in self.gt_objects],
                "detections": [d.to_dict() for d in self.detections]}

    @classmethod
    def from_dict(cls, d: dict) -> Frame:
        return cls(d["index"], d["timestamp"], tuple(d["ego_pose"]),
                   [ObjectState.from_dict(o) for o in d["gt_objects"]],
                   [DetectionQuery.from_dict(q) for q in d["detections"]])


@dataclass
class Scenario:
    frames: list[Frame]
    config: ScenarioConfig
    seed: int

    def to_jsonl(self) -> str:
        header = {"schema": SCENARIO_SCHEMA, "version": SCHEMA_VERSION, "seed": self.seed,
                  "n_frames": len(self.frames), "config": dataclasses.asdict(self.config)}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(f.to_dict(), sort_keys=True) for f in self.frames]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> Scenario:
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise SchemaError("empty scenario file")
        header = json.loads(lines[0])
        check_header(header, SCENARIO_SCHEMA)
        frames = [Frame.from_dict(json.loads(ln)) for ln in lines[1:]]
        if len(frames) != header.get("n_frames", len(frames)):
            raise SchemaError(f"header promises {header['n_frames']} frames, file has {len(frames)}")
        return cls(frames, ScenarioConfig.from_dict(header["config"]), header["seed"])


class SchemaError(ValueError):
    """File does not carry the expected schema name/version."""


def check_header(header: dict, schema: str) -> None:
    if header.get("schema") != schema:
        raise SchemaError(f"expected schema {schema!r}, got {header.get('schema')!r}")
    if header.get("version") != SCHEMA_VERSION:
        raise SchemaError(f"{schema} version {header.get('version')} not supported "
                          f"(expected {SCHEMA_VERSION})")


# ---------------------------------------------------------------------------
# geometry


def world_to_ego(xy, ego_pose) -> np.ndarray:
    ex, ey, yaw = ego_pose
    p = np.asarray(xy, dtype=np.float64) - (ex, ey)
    c, s = math.cos(yaw), math.sin(yaw)
    return np.stack([c * p[..., 0] + s * p[..., 1], -s * p[..., 0] + c * p[..., 1]], axis=-1)


def ego_to_world(xy, ego_pose) -> np.ndarray:
    ex, ey, yaw = ego_pose
    p = np.asarray(xy, dtype=np.float64)
    c, s = math.cos(yaw), math.sin(yaw)
    return np.stack([c * p[..., 0] - s * p[..., 1] + ex, s * p[..., 0] + c * p[..., 1] + ey], axis=-1)


# ---------------------------------------------------------------------------
# generation


@dataclass
class _Obj:
    gt_id: int
    cls: str
    xy: np.ndarray
    heading: float
    speed: float
    size: tuple[float, float]


def _spawn(rng, config, gt_id, ego_pose, existing: list[_Obj], probs) -> Optional[_Obj]:
    h = config.half_extent
    for _ in range(20):
        local = rng.uniform(-h * 0.9, h * 0.9, size=2)
        xy = ego_to_world(local, ego_pose)
        if all(np.hypot(*(xy - o.xy)) >= config.min_spawn_gap for o in existing):
            break
    else:
        return None
    cls = CLASSES[rng.choice(len(CLASSES), p=probs)]
    ml, mw = MEAN_SIZE[cls]
    size = (ml * rng.uniform(0.85, 1.15), mw * rng.uniform(0.85, 1.15))
    return _Obj(gt_id, cls, xy, float(rng.uniform(-math.pi, math.pi)),
                float(rng.uniform(0.0, config.speed_fraction * SPEED_CAP[cls])), size)


def _class_logits(rng, cls: str, noise: float) -> list[float]:
    logits = np.zeros(len(CLASSES))
    logits[CLASS_INDEX[cls]] = CLASS_LOGIT_GAIN
    if noise > 0:
        logits = logits + rng.normal(0.0, noise, size=len(CLASSES))
    return [float(v) for v in logits]


def generate_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    """Pure function of ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng(seed)
    probs = config.class_probs()
    ego = (0.0, 0.0, 0.0)
    objs: list[_Obj] = []
    next_id = 0
    for _ in range(config.initial_objects):
        o = _spawn(rng, config, next_id, ego, objs, probs)
        if o is not None:
            objs.append(o)
            next_id += 1
    frames = []
    h = config.half_extent
    for k in range(config.n_frames):
        if k > 0:
            dt = config.period
            ex, ey, yaw = ego
            ego = (ex + config.ego_speed * dt * math.cos(yaw),
                   ey + config.ego_speed * dt * math.sin(yaw),
                   float(wrap_angle(yaw + config.ego_yaw_rate * dt)))
            survivors = []
            for o in objs:
                o.heading = float(wrap_angle(o.heading + rng.normal(0.0, config.heading_jitter)))
                o.speed = float(np.clip(o.speed + rng.normal(0.0, config.speed_jitter), 0.0, SPEED_CAP[o.cls]))
                o.xy = o.xy + o.speed * dt * np.array([math.cos(o.heading), math.sin(o.heading)])
                if rng.uniform() < config.death_prob:
                    continue
                survivors.append(o)
            objs = survivors
            for _ in range(rng.poisson(config.birth_rate)):
                if len(objs) >= config.max_objects:
                    break
                o = _spawn(rng, config, next_id, ego, objs, probs)
                if o is not None:
                    objs.append(o)
                    next_id += 1
        # objects leaving the box die
        local = [world_to_ego(o.xy, ego) for o in objs]
        keep = [i for i, p in enumerate(local) if abs(p[0]) <= h and abs(p[1]) <= h]
        objs = [objs[i] for i in keep]
        local = [local[i] for i in keep]

        gts, dets = [], []
        for o, p in zip(objs, local):
            rel_heading = float(wrap_angle(o.heading - ego[2]))
            gts.append(ObjectState(o.gt_id, o.cls, (float(p[0]), float(p[1])), rel_heading, o.speed,
                                   o.size, (float(o.xy[0]), float(o.xy[1])), o.heading))
            if rng.uniform() < config.p_miss:
                continue
            noisy = p + rng.normal(0.0, config.sigma_pos, size=2) if config.sigma_pos > 0 else p
            hd = rel_heading + (rng.normal(0.0, config.sigma_heading) if config.sigma_heading > 0 else 0.0)
            if config.sigma_size > 0:
                sz = tuple(float(max(0.1, s * (1 + rng.normal(0.0, config.sigma_size)))) for s in o.size)
            else:
                sz = o.size
            dets.append(DetectionQuery((float(noisy[0]), float(noisy[1])),
                                       float(0.35 + 0.65 * rng.beta(5.0, 2.0)),
                                       _class_logits(rng, o.cls, config.class_noise),
                                       float(wrap_angle(hd)), sz, o.gt_id))
        for _ in range(rng.poisson(config.clutter_rate)):
            cls = CLASSES[rng.choice(len(CLASSES), p=probs)]
            ml, mw = MEAN_SIZE[cls]
            dets.append(DetectionQuery(
                tuple(float(v) for v in rng.uniform(-h, h, size=2)),
                float(rng.beta(2.0, 5.0)),
                _class_logits(rng, cls, config.class_noise),
                float(rng.uniform(-math.pi, math.pi)),
                (ml * float(rng.uniform(0.85, 1.15)), mw * float(rng.uniform(0.85, 1.15))),
                None))
        frames.append(Frame(k, round(k * config.period, 9), ego, gts, dets))
    return Scenario(frames, config, seed)


# ---------------------------------------------------------------------------
# toy observation encoder and labels


def raw_features(detections: Iterable[DetectionQuery]) -> np.ndarray:
    """Per-detection raw vector: position, size, soft class one-hot, heading sin/cos, score."""
    rows = []
    for d in detections:
        z = np.asarray(d.class_logits, dtype=np.float64)
        p = np.exp(z - z.max())
        p /= p.sum()
        rows.append(np.concatenate([
            np.asarray(d.position) * POS_SCALE,
            [d.size_meas[0] / 10.0, d.size_meas[1] / 3.0],
            p,
            [math.sin(d.heading_meas), math.cos(d.heading_meas)],
            [d.heatmap_score],
        ]))
    return np.array(rows, dtype=np.float64).reshape(len(rows), RAW_DIM)


def encode_observations(frame: Frame, encoder: Mlp2) -> Tensor:
    if encoder.d_in != RAW_DIM:
        raise DimensionError(f"encoder input width {encoder.d_in} != raw feature width {RAW_DIM}")
    raw = raw_features(frame.detections)
    if raw.shape[0] == 0:
        return Tensor(np.zeros((0, encoder.d_out)))
    return encoder(Tensor(raw))


def label_associations(prev: Frame, curr: Frame) -> np.ndarray:
    """Target column for each previous detection; the dead column is ``len(curr.detections)``."""
    dead = len(curr.detections)
    where = {d.source_gt: j for j, d in enumerate(curr.detections) if d.source_gt is not None}
    return np.array([where.get(d.source_gt, dead) if d.source_gt is not None else dead
                     for d in prev.detections], dtype=np.int64)


def detection_targets(detections: Iterable[DetectionQuery], gts: dict[int, ObjectState]) -> np.ndarray:
    """Regression targets (true position, size, heading sin/cos) for detections with a source."""
    rows = []
    for d in detections:
        g = gts[d.source_gt]
        rows.append([g.position[0] * POS_SCALE, g.position[1] * POS_SCALE,
                     g.size[0] / 10.0, g.size[1] / 3.0, math.sin(g.heading), math.cos(g.heading)])
    return np.array(rows, dtype=np.float64).reshape(len(rows), 6)
