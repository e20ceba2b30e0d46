"""Benchmark worlds and training recipes shared by the scripts and the acceptance suite."""

from __future__ import annotations

import copy
import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import ModelConfig, MotionTrack
from .motmetrics import MetricsReport, compute_amota
from .pipeline import run_sequence
from .simworld import Scenario, ScenarioConfig, generate_scenario, label_associations
from .train import STAGES, TrainConfig, TrainingPair, TrainResult, detection_error, train_stage

# the noisy benchmark: misses, clutter and position noise as required, plus attribute
# noise large enough that a second look at an object carries information
BENCHMARK_NOISE = dict(p_miss=0.1, clutter_rate=0.5, sigma_pos=0.3,
                       sigma_heading=0.2, sigma_size=0.2, class_noise=1.0)

POOL_SEEDS = range(1000, 1100)
BENCHMARK_TEST_SEEDS = range(5000, 5020)
ORACLE_TEST_SEEDS = range(7000, 7020)
STAGE_SEEDS = {"encoder": 1, "da_frozen": 2, "joint": 3}


def benchmark_world(**overrides) -> ScenarioConfig:
    return ScenarioConfig(**{**BENCHMARK_NOISE, **overrides})


def oracle_world(**overrides) -> ScenarioConfig:
    """Noise-free, clutter-free, no misses."""
    return ScenarioConfig(**overrides)


def make_scenarios(config: ScenarioConfig, seeds: Sequence[int]) -> list[Scenario]:
    return [generate_scenario(config, int(s)) for s in seeds]


@dataclass
class Recipe:
    steps: dict = field(default_factory=lambda: {s: 20000 for s in STAGES})
    augment: dict = field(default_factory=lambda: {"encoder": False, "da_frozen": True, "joint": True})
    seeds: dict = field(default_factory=lambda: dict(STAGE_SEEDS))

    def config(self, stage: str) -> TrainConfig:
        return TrainConfig(stage=stage, steps_per_epoch=self.steps[stage], seed=self.seeds[stage],
                           augment=self.augment[stage])


def train_stages(model: MotionTrack, pool: Sequence[Scenario], recipe: Recipe,
                 stages: Sequence[str] = STAGES,
                 log: Optional[Callable[[str], None]] = None) -> dict[str, TrainResult]:
    results = {}
    for stage in stages:
        t0 = time.perf_counter()
        results[stage] = r = train_stage(model, recipe.config(stage), pool)
        if log is not None:
            tail = r.losses[-500:]
            log(f"{stage:<10} {len(r.losses):>6} steps  {time.perf_counter() - t0:6.1f}s  "
                f"loss {np.mean(tail) if tail else float('nan'):.5f}")
    return results


def evaluate_tracking(model: MotionTrack, scenarios: Sequence[Scenario], n_points: int = 40,
                      threshold_m: float = 2.0) -> MetricsReport:
    return compute_amota([run_sequence(s, model) for s in scenarios], scenarios, n_points, threshold_m)


def with_config(model: MotionTrack, **changes) -> MotionTrack:
    """Copy of ``model`` (weights included) with some config flags changed."""
    twin = copy.deepcopy(model)
    twin.config = dataclasses.replace(model.config, **changes)
    return twin


@dataclass
class AblationArms:
    with_component: MotionTrack
    without_component: MotionTrack
    logs: list[str] = field(default_factory=list)


def train_da_ablation(pool: Sequence[Scenario], recipe: Recipe, seed: int = 0) -> AblationArms:
    """Both arms share the detector stage, which does not involve the association heads."""
    logs: list[str] = []
    a = MotionTrack(ModelConfig(seed=seed))
    train_stages(a, pool, recipe, ["encoder"], logs.append)
    b = with_config(a, use_transformer_da=False)
    train_stages(a, pool, recipe, ["da_frozen", "joint"], lambda s: logs.append("A " + s))
    train_stages(b, pool, recipe, ["da_frozen", "joint"], lambda s: logs.append("B " + s))
    return AblationArms(a, b, logs)


def train_qem_detectors(pool: Sequence[Scenario], recipe: Recipe, seed: int = 0) -> AblationArms:
    """Stage-1 detectors with and without the QEM, same initial weights and sample stream."""
    logs: list[str] = []
    a = MotionTrack(ModelConfig(seed=seed))
    b = MotionTrack(ModelConfig(seed=seed, use_qem=False))
    train_stages(a, pool, recipe, ["encoder"], lambda s: logs.append("A " + s))
    train_stages(b, pool, recipe, ["encoder"], lambda s: logs.append("B " + s))
    return AblationArms(a, b, logs)


def qem_detection_errors(arms: AblationArms, scenarios: Sequence[Scenario]) -> tuple[float, float]:
    return detection_error(arms.with_component, scenarios), detection_error(arms.without_component, scenarios)


def two_frame_pairs(n: int = 50, max_objects: int = 10, seed0: int = 0) -> tuple[list[Scenario], list[TrainingPair]]:
    """Pool of two-frame scenarios with at most ``max_objects`` objects, and the pairs they hold."""
    cfg = ScenarioConfig(n_frames=2, initial_objects=min(8, max_objects), max_objects=max_objects)
    pool = make_scenarios(cfg, range(seed0, seed0 + n))
    pairs = [TrainingPair(s.frames[0], s.frames[1], label_associations(s.frames[0], s.frames[1])) for s in pool]
    return pool, pairs
