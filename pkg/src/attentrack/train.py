"""Staged training on two-frame samples.

Stage ``encoder`` fits the toy detector (encoder, feature layers, detection head, and the
QEM when the model has one) to a detection regression objective. Stage ``da_frozen`` freezes everything but the
association heads. Stage ``joint`` trains association, QEM and feature layers together
with the encoder held fixed as the backbone.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import numcore as nc
from .da import association_loss, greedy_match
from .model import DET_REG_DIM, ModelConfig, MotionTrack, PrevObjects
from .numcore import AdamW, ContractViolation, OptimizerState, Tensor
from .simworld import (CLASS_INDEX, CLASSES, SCHEMA_VERSION, ConfigError, DetectionQuery, Frame,
                       Scenario, SchemaError, check_header, detection_targets, label_associations,
                       raw_features)

STAGES = ("encoder", "da_frozen", "joint")
CHECKPOINT_SCHEMA = "attentrack.checkpoint"

FROZEN_DESCRIPTION = {
    "encoder": "trainable: encoder, feature layers, detection head, QEM if enabled; frozen: DA heads",
    "da_frozen": "trainable: DA heads; frozen: everything else",
    "joint": "trainable: DA heads, QEM, feature layers, detection head; frozen: encoder",
}


@dataclass
class TrainConfig:
    stage: str = "da_frozen"
    epochs: int = 1
    steps_per_epoch: int = 5000
    max_lr: float = 1e-3
    weight_decay: float = 0.01
    beta1_range: tuple[float, float] = (0.85, 0.95)
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: float = 0.3
    det_weight: float = 1.0
    augment: bool = False
    context_frames: int = 2
    seed: int = 0

    def __post_init__(self):
        self.beta1_range = tuple(self.beta1_range)

    def validate(self) -> TrainConfig:
        bad = []
        if self.stage not in STAGES:
            bad.append("stage")
        if self.epochs < 1:
            bad.append("epochs")
        if self.steps_per_epoch < 1:
            bad.append("steps_per_epoch")
        if self.max_lr <= 0:
            bad.append("max_lr")
        if self.weight_decay < 0:
            bad.append("weight_decay")
        lo, hi = self.beta1_range
        if not 0 <= lo <= hi < 1:
            bad.append("beta1_range")
        if not 0 <= self.beta2 < 1:
            bad.append("beta2")
        if not 0 <= self.warmup <= 1:
            bad.append("warmup")
        if self.context_frames < 0:
            bad.append("context_frames")
        if bad:
            raise ConfigError("invalid train config field(s): " + ", ".join(bad))
        return self

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError("unknown train config field(s): " + ", ".join(unknown))
        return cls(**d).validate()


@dataclass
class TrainingPair:
    prev: Frame
    curr: Frame
    labels: np.ndarray
    context: list[Frame] = field(default_factory=list)  # frames before ``prev``, oldest first


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    optimizer_state: Optional[OptimizerState] = None
    steps_done: int = 0


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Sampler randomness for one optimisation step; pure in (seed, step)."""
    return np.random.default_rng([seed, step])


def sample_pair(pool: Sequence[Scenario], rng: np.random.Generator, context: int = 0) -> TrainingPair:
    """Uniform scenario, then a uniform consecutive frame pair inside it.

    Up to ``context`` frames preceding the pair are attached; they only ever feed the
    previous frame's QEM memory and carry no gradient.
    """
    if not pool:
        raise ConfigError("training pool is empty")
    sc = pool[int(rng.integers(len(pool)))]
    if len(sc.frames) < 2:
        raise ConfigError("training scenarios need at least 2 frames")
    k = int(rng.integers(len(sc.frames) - 1))
    prev, curr = sc.frames[k], sc.frames[k + 1]
    return TrainingPair(prev, curr, label_associations(prev, curr), sc.frames[max(0, k - context):k])


def augment_pair(pair: TrainingPair, rng: np.random.Generator,
                 drop_prob: float = 0.1, fp_rate: float = 0.5) -> TrainingPair:
    """Randomly drop detections from both frames and inject false positives into the current one.

    Dropping current detections is what produces dead labels for tracks whose object is still alive.
    """
    keep = [d for d in pair.prev.detections if rng.uniform() >= drop_prob] or pair.prev.detections[:1]
    kept_curr = [d for d in pair.curr.detections if rng.uniform() >= drop_prob]
    extra = []
    for _ in range(rng.poisson(fp_rate)):
        src = kept_curr[int(rng.integers(len(kept_curr)))] if kept_curr else None
        if src is None:
            break
        x, y = src.position
        extra.append(DetectionQuery((x + float(rng.normal(0, 3.0)), y + float(rng.normal(0, 3.0))),
                                    float(rng.beta(2.0, 5.0)), list(src.class_logits),
                                    float(rng.uniform(-math.pi, math.pi)), src.size_meas, None))
    prev = dataclasses.replace(pair.prev, detections=keep)
    curr = dataclasses.replace(pair.curr, detections=kept_curr + extra)
    return TrainingPair(prev, curr, label_associations(prev, curr), pair.context)


def _positions(frame: Frame) -> np.ndarray:
    return np.array([d.position for d in frame.detections], dtype=np.float64).reshape(-1, 2)


def _select(n_in: int, cols: Sequence[int]) -> Tensor:
    s = np.zeros((n_in, len(cols)))
    s[list(cols), np.arange(len(cols))] = 1.0
    return Tensor(s)


def detection_loss(model: MotionTrack, feats, frame: Frame) -> tuple[Optional[Tensor], Optional[Tensor]]:
    """(regression MSE, class cross-entropy) over detections that have a true source."""
    idx = [j for j, d in enumerate(frame.detections) if d.source_gt is not None]
    if not idx:
        return None, None
    gts = {g.gt_id: g for g in frame.gt_objects}
    dets = [frame.detections[j] for j in idx]
    target = detection_targets(dets, gts)
    classes = [CLASS_INDEX[gts[d.source_gt].cls] for d in dets]
    out = nc.take_rows(model.detect(feats), idx)
    width = DET_REG_DIM + len(CLASSES)
    reg = nc.matmul(out, _select(width, range(DET_REG_DIM)))
    logits = nc.matmul(out, _select(width, range(DET_REG_DIM, width)))
    mse = nc.mean(nc.square(nc.sub(reg, Tensor(target))))
    ce = nc.cross_entropy(logits, np.array(classes, dtype=np.int64))
    return mse, ce


def detection_error(model: MotionTrack, scenarios: Sequence[Scenario], use_qem: Optional[bool] = None) -> float:
    """Mean squared regression error of the detection head over all sourced detections.

    Frames are processed in order with the previous frame's detections as QEM context.
    """
    total, count = 0.0, 0
    with nc.no_grad():
        for sc in scenarios:
            prev_objs = None
            for frame in sc.frames:
                feats = model.frame_features(raw_features(frame.detections), _positions(frame),
                                             prev_objs, use_qem=use_qem)
                mse, _ = detection_loss(model, feats, frame)
                n = sum(d.source_gt is not None for d in frame.detections)
                if mse is not None:
                    total += mse.item() * n
                    count += n
                prev_objs = _as_prev(frame, feats) if frame.detections else None
    return total / max(count, 1)


def _as_prev(frame: Frame, feats) -> PrevObjects:
    return PrevObjects(_positions(frame),
                       np.array([d.heading_meas for d in frame.detections], dtype=np.float64),
                       feats.qin, feats.qfeat, feats.qfine)


def warm_memory(model: MotionTrack, frames: Sequence[Frame], use_qem: bool) -> Optional[PrevObjects]:
    """Run ``frames`` forward without gradient, as the tracker would, and return the last memory."""
    prev_objs = None
    with nc.no_grad():
        for frame in frames:
            if not frame.detections:
                prev_objs = None
                continue
            feats = model.frame_features(raw_features(frame.detections), _positions(frame), prev_objs,
                                         use_qem=use_qem)
            prev_objs = _as_prev(frame, feats)
    return prev_objs


def trainable_groups(model: MotionTrack, stage: str) -> list[str]:
    if stage == "encoder":
        return ["encoder", "detector"] + (["qem"] if model.config.use_qem else [])
    if stage == "da_frozen":
        return ["da"] if model.config.use_transformer_da else []
    groups = ["detector"]
    if model.config.use_transformer_da:
        groups.append("da")
    if model.config.use_qem:
        groups.append("qem")
    return groups


def freeze_for_stage(model: MotionTrack, stage: str) -> dict[str, Tensor]:
    """Mark only the stage's parameters as trainable and return them by name."""
    model.set_trainable(False)
    params: dict[str, Tensor] = {}
    for g in trainable_groups(model, stage):
        params.update(model.group(g))
    for p in params.values():
        p.requires_grad = True
    return params


def pair_loss(model: MotionTrack, pair: TrainingPair, stage: str,
              det_weight: float = 1.0) -> tuple[Tensor, float]:
    """Loss for one pair and the per-row association accuracy (nan for stage ``encoder``)."""
    curr_raw, curr_pos = raw_features(pair.curr.detections), _positions(pair.curr)
    if stage == "encoder":
        prev = None
        if model.config.use_qem and pair.prev.detections:
            memory = warm_memory(model, pair.context, True)
            prev_feats = model.frame_features(raw_features(pair.prev.detections), _positions(pair.prev),
                                              memory, use_qem=True)
            prev = _as_prev(pair.prev, prev_feats)
        feats = model.frame_features(curr_raw, curr_pos, prev)
        mse, ce = detection_loss(model, feats, pair.curr)
        if mse is None:
            raise ValueError("pair has no sourced detections")
        return nc.add(mse, ce), float("nan")
    use_qem = stage == "joint" and model.config.use_qem
    memory = warm_memory(model, pair.context, use_qem) if use_qem else None
    prev_feats = model.frame_features(raw_features(pair.prev.detections), _positions(pair.prev), memory,
                                      use_qem=use_qem)
    prev = _as_prev(pair.prev, prev_feats)
    feats = model.frame_features(curr_raw, curr_pos, prev, use_qem=use_qem)
    coarse, fine = model.association(prev, feats)
    loss = association_loss(coarse, pair.labels)
    if fine is not None:
        loss = nc.add(loss, association_loss(fine, pair.labels))
    pred = coarse.numpy().argmax(axis=1)
    acc = float(np.mean(pred == pair.labels))
    if stage == "joint":
        mse, ce = detection_loss(model, feats, pair.curr)
        if mse is not None:
            loss = nc.add(loss, nc.scale(nc.add(mse, ce), det_weight))
    return loss, acc


def _usable(pair: TrainingPair, stage: str) -> bool:
    if stage == "encoder":
        return any(d.source_gt is not None for d in pair.curr.detections)
    return len(pair.prev.detections) > 0


def draw_pair(pool: Sequence[Scenario], seed: int, step: int, stage: str, augment: bool,
              context: int = 0) -> TrainingPair:
    rng = step_rng(seed, step)
    for _ in range(1000):
        pair = sample_pair(pool, rng, context)
        if augment:
            pair = augment_pair(pair, rng)
        if _usable(pair, stage):
            return pair
    raise ConfigError("training pool has no usable frame pairs")


def _context(model: MotionTrack, config: TrainConfig) -> int:
    if config.stage == "joint" or (config.stage == "encoder" and model.config.use_qem):
        return config.context_frames
    return 0


def train_stage(model: MotionTrack, config: TrainConfig, pool: Sequence[Scenario], *,
                start_step: int = 0, optimizer_state: Optional[OptimizerState] = None,
                stop_after: Optional[int] = None,
                callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Optimise the stage's trainable set, one frame pair per step.

    ``start_step``/``optimizer_state`` resume an interrupted run; ``stop_after`` ends
    the run early (after that many steps in total) without changing the schedule.
    """
    config.validate()
    params = freeze_for_stage(model, config.stage)
    result = TrainResult()
    total = config.total_steps
    end = total if stop_after is None else min(total, stop_after)
    if not params:
        result.steps_done = end
        return result
    opt = AdamW(params, max_lr=config.max_lr, weight_decay=config.weight_decay,
                beta1_range=config.beta1_range, beta2=config.beta2, eps=config.eps,
                warmup=config.warmup)
    if optimizer_state is not None:
        opt.state = copy.deepcopy(optimizer_state)
    for step in range(start_step, end):
        pair = draw_pair(pool, config.seed, step, config.stage, config.augment,
                         _context(model, config))
        opt.zero_grad()
        loss, acc = pair_loss(model, pair, config.stage, config.det_weight)
        nc.backward(loss)
        for p in params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        opt.step(step / (total - 1) if total > 1 else 1.0)
        result.losses.append(loss.item())
        result.accuracies.append(acc)
        if callback is not None:
            callback(step, loss.item())
    opt.zero_grad()
    result.optimizer_state = opt.state
    result.steps_done = end
    return result


def check_frozen(before: dict[str, np.ndarray], model: MotionTrack, trainable: set[str]) -> None:
    """Raise if any parameter outside ``trainable`` changed."""
    for k, p in model.named_parameters().items():
        if k not in trainable and not np.array_equal(before[k], p.data):
            raise ContractViolation(f"frozen parameter {k!r} changed during training")


def evaluate_association(model: MotionTrack, pairs: Sequence[TrainingPair],
                         use_qem: bool = False) -> tuple[float, float]:
    """(mean association loss, per-row argmax accuracy) over ``pairs``."""
    losses, hits, rows = [], 0, 0
    with nc.no_grad():
        for pair in pairs:
            if not pair.prev.detections:
                continue
            prev_feats = model.frame_features(raw_features(pair.prev.detections), _positions(pair.prev),
                                              None, use_qem=False)
            prev = _as_prev(pair.prev, prev_feats)
            feats = model.frame_features(raw_features(pair.curr.detections), _positions(pair.curr),
                                         prev, use_qem=use_qem)
            coarse, _ = model.association(prev, feats)
            losses.append(association_loss(coarse, pair.labels).item())
            hits += int(np.sum(coarse.numpy().argmax(axis=1) == pair.labels))
            rows += len(pair.labels)
    return float(np.mean(losses)), hits / max(rows, 1)


def greedy_accuracy(model: MotionTrack, pairs: Sequence[TrainingPair]) -> float:
    """Per-row accuracy after greedy matching (what the tracker actually uses)."""
    hits = rows = 0
    with nc.no_grad():
        for pair in pairs:
            prev_feats = model.frame_features(raw_features(pair.prev.detections), _positions(pair.prev),
                                              None, use_qem=False)
            prev = _as_prev(pair.prev, prev_feats)
            feats = model.frame_features(raw_features(pair.curr.detections), _positions(pair.curr),
                                         prev, use_qem=False)
            coarse, _ = model.association(prev, feats)
            dec = greedy_match(coarse)
            hits += sum(dec.column(i) == pair.labels[i] for i in range(dec.n_tracks))
            rows += dec.n_tracks
    return hits / max(rows, 1)


# ---------------------------------------------------------------------------
# checkpoints


class StageOrderError(ContractViolation):
    """A stage was started without the checkpoint of the stage before it."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    stages_done: list[str]
    stage: Optional[str] = None               # stage in progress or last finished
    train_config: Optional[TrainConfig] = None
    step: int = 0                             # steps completed in ``stage``
    optimizer: Optional[OptimizerState] = None

    @property
    def complete(self) -> bool:
        return self.stage is not None and self.stage in self.stages_done

    def build_model(self) -> MotionTrack:
        model = MotionTrack(self.model_config)
        model.load_state_dict(self.params)
        return model

    def to_json(self) -> str:
        opt = None
        if self.optimizer is not None:
            opt = {"step": self.optimizer.step, "schedule_pos": self.optimizer.schedule_pos,
                   "m": _pack(self.optimizer.m), "v": _pack(self.optimizer.v)}
        tc = None
        if self.train_config is not None:
            tc = dataclasses.asdict(self.train_config)
            tc["beta1_range"] = list(tc["beta1_range"])
        payload = {"schema": CHECKPOINT_SCHEMA, "version": SCHEMA_VERSION,
                   "model_config": dataclasses.asdict(self.model_config),
                   "stages_done": list(self.stages_done), "stage": self.stage, "step": self.step,
                   "train_config": tc, "params": _pack(self.params), "optimizer": opt}
        return json.dumps(payload, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> Checkpoint:
        d = json.loads(text)
        check_header(d, CHECKPOINT_SCHEMA)
        try:
            opt = None
            if d["optimizer"] is not None:
                o = d["optimizer"]
                opt = OptimizerState(_unpack(o["m"]), _unpack(o["v"]), int(o["step"]), float(o["schedule_pos"]))
            tc = TrainConfig.from_dict(d["train_config"]) if d["train_config"] is not None else None
            return cls(ModelConfig(**d["model_config"]), _unpack(d["params"]), list(d["stages_done"]),
                       d["stage"], tc, int(d["step"]), opt)
        except (KeyError, TypeError) as e:
            raise SchemaError(f"malformed checkpoint: {e!r}") from None


def _pack(arrays: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(a.shape), "data": a.ravel().tolist()} for k, a in sorted(arrays.items())}


def _unpack(d: dict) -> dict[str, np.ndarray]:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def check_stage_order(stage: str, init: Optional[Checkpoint]) -> None:
    """Stages run encoder -> da_frozen -> joint; each later stage needs the previous one finished."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    k = STAGES.index(stage)
    if k == 0:
        return
    needed = STAGES[k - 1]
    if init is None:
        raise StageOrderError(f"stage {stage!r} needs a checkpoint from stage {needed!r}")
    if needed not in init.stages_done:
        raise StageOrderError(f"stage {stage!r} needs stage {needed!r} finished; "
                              f"checkpoint has {init.stages_done or 'no stages'}")
