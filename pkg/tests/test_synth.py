import math

import numpy as np
import pytest

from failband.core import FailureMode, Label
from failband.synth import (
    ConfigError,
    Embedding,
    EnvState,
    FailureSpec,
    ScriptedPolicy,
    SynthConfig,
    config_from_json,
    config_to_json,
    generate_dataset,
    load_config,
    parse_failure_spec,
    policy_from_header,
    policy_sample,
    success_oracle,
)


def _state(obj, tgt, grip=0):
    return EnvState(np.zeros(2), grip, np.asarray(obj, float), np.asarray(tgt, float))


def test_success_oracle_examples():
    assert success_oracle(_state([0.3, 0.4], [0.3, 0.4]), 0.05)
    assert not success_oracle(_state([0.3, 0.4], [0.3, 0.5]), 0.05)
    assert not success_oracle(_state([0.3, 0.4], [0.3, 0.4], grip=1), 0.05)
    assert success_oracle(_state([0.0, 0.0], [9.0, 9.0]), math.inf)


def test_nominal_noise_free_all_succeed():
    _, rolls = generate_dataset(SynthConfig(n_rollouts=20, noise=0.0, seed=5))
    assert all(r.label is Label.SUCCESS for r in rolls)
    assert all(r.failure_mode is None and r.injection_time is None for r in rolls)


def test_slip_always_fails():
    _, rolls = generate_dataset(SynthConfig(n_rollouts=15, failure_spec=(FailureSpec("Slip", 1.0),)))
    assert all(r.label is Label.FAILURE and r.failure_mode is FailureMode.SLIP for r in rolls)
    assert all(r.injection_time is not None for r in rolls)


@pytest.mark.parametrize("mode", ["SensorShift", "OodInit"])
def test_other_modes_fail(mode):
    _, rolls = generate_dataset(SynthConfig(n_rollouts=10, failure_spec=(FailureSpec(mode, 1.0),)))
    assert sum(r.label is Label.FAILURE for r in rolls) >= 9


def test_seeded_generation_is_bit_identical():
    cfg = SynthConfig(n_rollouts=5, seed=9, failure_spec=(FailureSpec("Jitter", 0.5),))
    h1, a = generate_dataset(cfg)
    h2, b = generate_dataset(cfg)
    assert a == b
    assert h1 == h2
    _, c = generate_dataset(SynthConfig(n_rollouts=5, seed=10))
    assert a[0] != c[0]


def test_start_index_continues_the_same_world():
    _, whole = generate_dataset(SynthConfig(n_rollouts=6, seed=2))
    _, tail = generate_dataset(SynthConfig(n_rollouts=3, seed=2, start_index=3))
    assert whole[3:] == tail
    assert [r.id for r in tail] == ["r00003", "r00004", "r00005"]


def test_shapes_and_time_grid():
    cfg = SynthConfig(n_rollouts=3)
    header, rolls = generate_dataset(cfg)
    assert (header.d_O, header.d_a, header.H, header.H_prime) == (cfg.d_obs, 3, 16, 8)
    assert cfg.d_obs == 2 * (16 + 3)
    for r in rolls:
        assert np.array_equal(r.t_grid, np.arange(len(r)) * 8)
        assert r.t_grid[-1] < cfg.T_max
        assert r.actions.shape[1:] == (16, 3)


def test_policy_noise_zero_identical_chunks():
    cfg = SynthConfig(noise=0.0)
    header, rolls = generate_dataset(SynthConfig(n_rollouts=1, noise=0.0))
    policy = policy_from_header(header)
    chunks = policy_sample(policy, rolls[0].steps[2].obs, 7, seed=1)
    assert chunks.shape == (7, 16, 3)
    assert np.all(chunks == chunks[0])
    assert cfg.noise == 0.0
    with pytest.raises(ValueError):
        policy_sample(policy, rolls[0].steps[0].obs, 0)


def test_policy_sample_matches_recorded_chunk_when_noise_free():
    header, rolls = generate_dataset(SynthConfig(n_rollouts=2, noise=0.0))
    policy = policy_from_header(header)
    for r in rolls:
        for s in r.steps[:5]:
            assert np.allclose(policy_sample(policy, s.obs, 1)[0], s.action_chunk, atol=1e-9)


def test_consecutive_plans_overlap():
    header, rolls = generate_dataset(SynthConfig(n_rollouts=5, noise=0.0, seed=1))
    gaps = []
    for r in rolls:
        acts = r.actions
        for a, b in zip(acts[:-1], acts[1:]):
            gaps.append(np.abs(a[8:, :2] - b[:8, :2]).max())
    # the executed half lands where the previous plan said it would on most steps
    assert np.median(gaps) < 0.02


def test_policy_recovers_scene_from_features():
    cfg = SynthConfig()
    emb = Embedding.create(cfg.d_feature, 0)
    policy = ScriptedPolicy(cfg, emb)
    scene = np.array([0.1, 0.2, 0.0, 0.5, 0.6, 0.8, 0.9])
    frame = np.concatenate([emb.weights @ scene, [0.1, 0.2, 0.0]])
    eff, grip, obj, tgt = policy.perceive(np.concatenate([frame, frame]))
    assert np.allclose(obj, [0.5, 0.6]) and np.allclose(tgt, [0.8, 0.9])
    assert grip == 0 and np.allclose(eff, [0.1, 0.2])
    assert Embedding.from_json(emb.to_json()) .weights.tolist() == emb.weights.tolist()


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(H=8, H_prime=8)
    with pytest.raises(ConfigError):
        SynthConfig(failure_spec=(FailureSpec("Slip", 0.7), FailureSpec("Stall", 0.7)))
    with pytest.raises(ConfigError):
        FailureSpec("Slip", 1.5)
    with pytest.raises(ValueError):
        FailureSpec("Wobble", 0.1)
    with pytest.raises(ConfigError):
        SynthConfig(noise=-1.0)


def test_failure_spec_parsing():
    specs = parse_failure_spec("Slip:0.2, SensorShift:0.1:4.0")
    assert specs[0].mode is FailureMode.SLIP and specs[0].probability == 0.2
    assert specs[0].value == 0.2  # default slip distance
    assert specs[1].value == 4.0
    with pytest.raises(ConfigError, match="unknown mode"):
        parse_failure_spec("Wobble:0.1")
    with pytest.raises(ConfigError):
        parse_failure_spec("Slip")
    with pytest.raises(ConfigError):
        parse_failure_spec("Slip:x")


def test_config_file_and_json_roundtrip(tmp_path):
    p = tmp_path / "synth.cfg"
    p.write_text("n_rollouts = 7\nT_max = 96\nfailure_spec = Slip:0.5\nnoise = 0.001\n")
    cfg = load_config(p, {"seed": 4})
    assert (cfg.n_rollouts, cfg.T_max, cfg.seed, cfg.noise) == (7, 96, 4, 0.001)
    assert config_from_json(config_to_json(cfg)) == cfg
    p.write_text("bogus = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        load_config(p)
    p.write_text("H = many\n")
    with pytest.raises(ConfigError, match="'H'"):
        load_config(p)
