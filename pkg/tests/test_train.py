import dataclasses
import math

import numpy as np
import pytest

from attentrack import numcore as nc
from attentrack.model import ModelConfig, MotionTrack
from attentrack.numcore import AdamW, ContractViolation
from attentrack.simworld import ConfigError, ScenarioConfig, SchemaError, generate_scenario, label_associations
from attentrack.train import (STAGES, Checkpoint, StageOrderError, TrainConfig, TrainingPair, augment_pair,
                              check_frozen, check_stage_order, draw_pair, freeze_for_stage, pair_loss,
                              sample_pair, train_stage, trainable_groups)

from conftest import GRAD_SEEDS, assert_grads_match

# fixed object count, nothing leaves the box: every pair has M = 8 detections
STEADY = ScenarioConfig(n_frames=6, initial_objects=8, birth_rate=0.0, death_prob=0.0, half_extent=1e5)


def _pool(n=4, cfg=None):
    cfg = cfg or ScenarioConfig(n_frames=5, p_miss=0.1, clutter_rate=0.5, sigma_pos=0.3)
    return [generate_scenario(cfg, s) for s in range(n)]


def _snapshot(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


def test_defaults():
    tc = TrainConfig()
    assert tc.max_lr == 1e-3 and tc.weight_decay == 0.01 and tc.beta1_range == (0.85, 0.95)
    assert tc.steps_per_epoch == 5000


@pytest.mark.parametrize("field,value", [("stage", "warmup"), ("epochs", 0), ("max_lr", 0.0),
                                         ("beta1_range", (0.95, 0.85)), ("warmup", 1.5)])
def test_config_validation(field, value):
    with pytest.raises(ConfigError, match=field):
        TrainConfig(**{field: value}).validate()


def test_config_unknown_field():
    with pytest.raises(ConfigError, match="lr"):
        TrainConfig.from_dict({"lr": 0.1})


# --- sampler ---

def test_single_two_frame_scenario_always_gives_that_pair():
    sc = generate_scenario(ScenarioConfig(n_frames=2), 0)
    rng = np.random.default_rng(0)
    for _ in range(20):
        pair = sample_pair([sc], rng)
        assert pair.prev is sc.frames[0] and pair.curr is sc.frames[1]


def test_labels_match_labeler():
    pool = _pool()
    rng = np.random.default_rng(1)
    for _ in range(30):
        pair = sample_pair(pool, rng)
        assert np.array_equal(pair.labels, label_associations(pair.prev, pair.curr))


def test_sampler_seeded():
    pool = _pool()
    a = [sample_pair(pool, np.random.default_rng(5)) for _ in range(3)]
    b = [sample_pair(pool, np.random.default_rng(5)) for _ in range(3)]
    for x, y in zip(a, b):
        assert x.prev is y.prev and x.curr is y.curr
    assert draw_pair(pool, 3, 17, "da_frozen", True).curr == draw_pair(pool, 3, 17, "da_frozen", True).curr


def test_sampler_covers_pool_uniformly():
    pool = _pool(3, ScenarioConfig(n_frames=3))
    rng = np.random.default_rng(2)
    counts = {}
    for _ in range(3000):
        p = sample_pair(pool, rng)
        counts[id(p.prev)] = counts.get(id(p.prev), 0) + 1
    freq = np.array(list(counts.values())) / 3000
    assert len(freq) == 6 and np.all(np.abs(freq - 1 / 6) < 0.03)


def test_empty_pool():
    with pytest.raises(ConfigError):
        sample_pair([], np.random.default_rng(0))


def test_context_frames_precede_pair():
    sc = generate_scenario(ScenarioConfig(n_frames=8), 0)
    rng = np.random.default_rng(3)
    for _ in range(20):
        pair = sample_pair([sc], rng, context=2)
        k = sc.frames.index(pair.prev)
        assert pair.context == sc.frames[max(0, k - 2):k]


def test_augment_relabels():
    pool = _pool()
    rng = np.random.default_rng(4)
    for _ in range(30):
        pair = augment_pair(sample_pair(pool, rng), rng, drop_prob=0.3, fp_rate=2.0)
        assert np.array_equal(pair.labels, label_associations(pair.prev, pair.curr))
        assert pair.prev.detections


# --- stages ---

@pytest.mark.parametrize("stage", STAGES)
def test_stage_leaves_frozen_parameters_bitwise(stage):
    model = MotionTrack(ModelConfig(seed=1))
    before = _snapshot(model)
    trainable = set(freeze_for_stage(model, stage))
    train_stage(model, TrainConfig(stage=stage, steps_per_epoch=30, seed=2), _pool())
    check_frozen(before, model, trainable)
    changed = {k for k, v in model.state_dict().items() if not np.array_equal(before[k], v)}
    assert changed and changed <= trainable


def test_da_frozen_encoder_unchanged_after_100_steps():
    model = MotionTrack(ModelConfig(seed=0))
    before = _snapshot(model)
    train_stage(model, TrainConfig(stage="da_frozen", steps_per_epoch=100), _pool())
    after = model.state_dict()
    for k in before:
        if not k.startswith("da."):
            assert np.array_equal(before[k], after[k]), k


def test_joint_freezes_only_the_encoder():
    model = MotionTrack(ModelConfig(seed=0))
    groups = trainable_groups(model, "joint")
    assert "encoder" not in groups and {"da", "qem", "detector"} <= set(groups)
    assert trainable_groups(model, "da_frozen") == ["da"]


def test_fusion_model_trains_both_heads():
    model = MotionTrack(ModelConfig(seed=0, mode="fusion"))
    names = set(freeze_for_stage(model, "da_frozen"))
    assert any(k.startswith("da_fine.") for k in names) and any(k.startswith("da.") for k in names)


def test_single_pair_overfits():
    sc = generate_scenario(ScenarioConfig(n_frames=2, initial_objects=6, birth_rate=0.0, death_prob=0.0), 3)
    res = train_stage(MotionTrack(ModelConfig(seed=0)), TrainConfig(stage="da_frozen", steps_per_epoch=500), [sc])
    losses = np.array(res.losses)
    assert len(losses) == 500
    assert min(losses) < 0.05 and losses[-1] < 0.05
    # decreasing on average: each block of 100 steps ends lower than the one before
    means = losses.reshape(5, 100).mean(axis=1)
    assert np.all(np.diff(means) < 0)


def _learn(labels_random, steps=1500):
    pool = [generate_scenario(STEADY, s) for s in range(10)]
    model = MotionTrack(ModelConfig(seed=0))
    opt = AdamW(freeze_for_stage(model, "da_frozen"))
    rng = np.random.default_rng(0)
    losses = []
    for k in range(steps):
        pair = sample_pair(pool, rng)
        assert len(pair.curr.detections) == 8
        if labels_random:
            pair = dataclasses.replace(pair, labels=rng.integers(0, 9, size=len(pair.labels)))
        opt.zero_grad()
        loss, _ = pair_loss(model, pair, "da_frozen")
        nc.backward(loss)
        opt.step(k / (steps - 1))
        losses.append(loss.item())
    return float(np.mean(losses[-300:]))


def test_shuffled_labels_sit_at_chance_true_labels_learn():
    chance = math.log(9)
    shuffled = _learn(True)
    assert abs(shuffled - chance) < 0.1
    assert _learn(False) < 0.5 * chance


def test_qem_gets_gradient_in_joint_stage():
    model = MotionTrack(ModelConfig(seed=0))
    params = freeze_for_stage(model, "joint")
    pool = _pool(cfg=ScenarioConfig(n_frames=6, clutter_rate=1.0, sigma_pos=0.3, birth_rate=1.0))
    # the QEM only touches detections within the gate radius of a previous object
    seen = 0
    for step in range(40):
        pair = draw_pair(pool, 0, step, "joint", False, context=2)
        for p in params.values():
            p.grad = None
        loss, _ = pair_loss(model, pair, "joint")
        nc.backward(loss)
        qem = {k: p for k, p in params.items() if k.startswith("qem.")}
        if any(p.grad is not None and np.any(p.grad != 0) for p in qem.values()):
            seen += 1
    assert seen > 0


@pytest.mark.slow
@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_full_model_grad(seed):
    # every parameter of a small fusion model, through the joint-stage loss
    r = np.random.default_rng(seed)
    model = MotionTrack(ModelConfig(d=4, hidden=4, mode="fusion", seed=seed))
    for k, p in model.named_parameters().items():
        if k.endswith(("gamma", "beta", "bias", "w_out")):
            p.data = r.normal(size=p.shape) * 0.5
    cfg = ScenarioConfig(n_frames=2, initial_objects=3, max_objects=4, clutter_rate=0.7, p_miss=0.2,
                         sigma_pos=0.8, birth_rate=0.5)
    f0, f1 = generate_scenario(cfg, seed).frames
    pair = TrainingPair(f0, f1, label_associations(f0, f1))
    assert_grads_match(lambda: pair_loss(model, pair, "joint")[0], list(model.named_parameters().values()))


def test_one_pair_per_optimizer_step():
    model = MotionTrack(ModelConfig(seed=0))
    res = train_stage(model, TrainConfig(stage="da_frozen", steps_per_epoch=25), _pool())
    assert res.optimizer_state.step == 25 == len(res.losses) == res.steps_done


def test_frozen_parameter_in_optimizer_raises():
    model = MotionTrack(ModelConfig(seed=0))
    freeze_for_stage(model, "da_frozen")
    opt = AdamW(model.group("encoder"))
    for p in model.group("encoder").values():
        p.grad = np.zeros_like(p.data)
    with pytest.raises(ContractViolation, match="frozen"):
        opt.step(0.0)


def test_check_frozen_catches_change():
    model = MotionTrack(ModelConfig(seed=0))
    before = _snapshot(model)
    model.encoder.fc1.weight.data[0, 0] += 1e-12
    with pytest.raises(ContractViolation, match="encoder"):
        check_frozen(before, model, set(model.group("da")))


def test_resume_matches_uninterrupted_run():
    pool = _pool()
    cfg = TrainConfig(stage="da_frozen", steps_per_epoch=20, seed=4)
    straight = MotionTrack(ModelConfig(seed=0))
    full = train_stage(straight, cfg, pool)
    split = MotionTrack(ModelConfig(seed=0))
    first = train_stage(split, cfg, pool, stop_after=8)
    ck = Checkpoint.from_json(Checkpoint(split.config, split.state_dict(), [], "da_frozen", cfg, 8,
                                         first.optimizer_state).to_json())
    resumed = ck.build_model()
    rest = train_stage(resumed, cfg, pool, start_step=8, optimizer_state=ck.optimizer)
    assert first.losses + rest.losses == full.losses
    for k, v in straight.state_dict().items():
        assert np.array_equal(v, resumed.state_dict()[k]), k


# --- checkpoints and ordering ---

def test_checkpoint_round_trip():
    model = MotionTrack(ModelConfig(seed=3, mode="fusion", use_qem=False))
    ck = Checkpoint(model.config, model.state_dict(), ["encoder"], "encoder", TrainConfig(stage="encoder"), 5000)
    again = Checkpoint.from_json(ck.to_json())
    assert again.model_config == model.config and again.stages_done == ["encoder"] and again.complete
    assert again.train_config == ck.train_config
    for k, v in again.build_model().state_dict().items():
        assert np.array_equal(v, model.state_dict()[k])


def test_checkpoint_schema_errors():
    model = MotionTrack(ModelConfig(seed=0))
    text = Checkpoint(model.config, model.state_dict(), [], None).to_json()
    with pytest.raises(SchemaError):
        Checkpoint.from_json(text.replace('"attentrack.checkpoint"', '"attentrack.tracks"'))
    with pytest.raises(SchemaError):
        Checkpoint.from_json(text.replace('"stages_done"', '"stages"'))


def test_stage_order():
    model = MotionTrack(ModelConfig(seed=0))
    check_stage_order("encoder", None)
    with pytest.raises(StageOrderError):
        check_stage_order("da_frozen", None)
    with pytest.raises(StageOrderError):
        check_stage_order("joint", Checkpoint(model.config, model.state_dict(), ["encoder"], "encoder"))
    check_stage_order("joint", Checkpoint(model.config, model.state_dict(), ["encoder", "da_frozen"], "da_frozen"))
    with pytest.raises(ConfigError):
        check_stage_order("pretrain", None)
