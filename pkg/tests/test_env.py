import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfrl import env as env_mod
from cfrl.env import (
    EnvConfig,
    GROUP_BASE,
    HD_GRAVITIES,
    NOISE_DIM,
    STATE_DIM,
    TerminalStateError,
    Transition,
    deterministic_step,
    deterministic_step_batch,
    generate_hd_dataset,
    generate_trials,
    initial_state,
    is_terminal,
    meta_path,
    read_metadata,
    read_transitions,
    step,
    step_given_noise,
    subject_group,
    transitions_to_arrays,
    window,
    write_transitions,
)

CFG = EnvConfig()


class TestDeterministicStep:
    def test_hand_derived_step_from_origin(self):
        # from rest with full push and no noise, one Euler step:
        # temp = 10/1.1, thetaacc = -(g*temp... ) reduces to exact rationals
        nxt = deterministic_step(np.zeros(4), 1.0, CFG)
        assert nxt[0] == 0.0
        assert nxt[1] == pytest.approx(8.0 / 41.0, abs=1e-15)
        assert nxt[2] == 0.0
        assert nxt[3] == pytest.approx(-12.0 / 41.0, abs=1e-15)

    def test_neutral_action_from_origin_is_mirror(self):
        # a = 0 pushes with force -10: antisymmetric to a = 1 at the origin
        plus = deterministic_step(np.zeros(4), 1.0, CFG)
        minus = deterministic_step(np.zeros(4), 0.0, CFG)
        assert np.allclose(plus, -minus, atol=1e-15)

    def test_midpoint_action_means_zero_force(self):
        nxt = deterministic_step(np.zeros(4), 0.5, CFG)
        assert np.allclose(nxt, 0.0, atol=1e-15)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(0)
        states = rng.normal(size=(40, 4)) * 0.05
        actions = rng.uniform(size=40)
        batch = deterministic_step_batch(states, actions, CFG)
        for i in range(40):
            assert np.allclose(batch[i], deterministic_step(states[i], actions[i], CFG),
                               atol=1e-15)

    def test_gravity_changes_dynamics(self):
        s = np.array([0.0, 0.0, 0.05, 0.0])
        a = EnvConfig(gravity=3.7)
        b = EnvConfig(gravity=24.79)
        assert not np.allclose(deterministic_step(s, 0.5, a),
                               deterministic_step(s, 0.5, b))

    @settings(max_examples=50)
    @given(st.integers(min_value=0, max_value=10**6))
    def test_zero_noise_recovers_deterministic(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=4) * 0.05
        a = float(rng.uniform())
        got = step_given_noise(s, a, np.zeros(NOISE_DIM), CFG)
        assert np.allclose(got, deterministic_step(s, a, CFG), atol=1e-14)

    def test_noise_is_multiplicative(self):
        s = np.array([0.1, 0.2, 0.03, -0.1])
        a = 0.7
        det = deterministic_step(s, a, CFG)
        noise = np.array([0.0, 0.5, -0.5, 0.25, 1.0])
        got = step_given_noise(s, a, noise, CFG)
        assert got == pytest.approx(det * (1.0 + noise[1:]))


class TestStep:
    def test_reward_one_while_alive(self):
        rng = np.random.default_rng(0)
        nxt, reward, done, noise = step(np.zeros(4), 0.5, CFG, rng)
        assert reward == 1.0 and not done
        assert noise.shape == (NOISE_DIM,)

    def test_reward_zero_when_terminal(self):
        # huge velocity guarantees the cart exits the track this step
        state = np.array([2.3, 120.0, 0.0, 0.0])
        rng = np.random.default_rng(0)
        nxt, reward, done, _ = step(state, 0.5, CFG, rng)
        assert done and reward == 0.0

    def test_step_from_terminal_raises(self):
        with pytest.raises(TerminalStateError):
            step(np.array([3.0, 0, 0, 0]), 0.5, CFG, np.random.default_rng(0))

    def test_action_range_validated(self):
        with pytest.raises(ValueError):
            step(np.zeros(4), 1.5, CFG, np.random.default_rng(0))

    def test_nonfinite_state_rejected(self):
        with pytest.raises(ValueError):
            step(np.array([np.nan, 0, 0, 0]), 0.5, CFG, np.random.default_rng(0))

    def test_terminal_boundaries(self):
        assert not is_terminal(np.array([2.39, 0, 0, 0]), CFG)
        assert is_terminal(np.array([2.41, 0, 0, 0]), CFG)
        theta_lim = CFG.theta_threshold
        assert not is_terminal(np.array([0, 0, theta_lim * 0.99, 0]), CFG)
        assert is_terminal(np.array([0, 0, theta_lim * 1.01, 0]), CFG)


class TestActionGrid:
    def test_eleven_levels_spaced_by_tenth(self):
        grid = CFG.action_grid()
        assert len(grid) == 11
        assert grid[0] == 0.0 and grid[-1] == 1.0
        assert np.allclose(np.diff(grid), 0.1)


class TestGenerateTrials:
    def test_reproducible(self):
        a = generate_trials(CFG, 5, seed=7)
        b = generate_trials(CFG, 5, seed=7)
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert np.array_equal(x.state, y.state)
            assert x.action == y.action

    def test_prefix_property(self):
        # trials draw from per-trial streams, so smaller sets are prefixes
        small = generate_trials(CFG, 3, seed=11)
        big = generate_trials(CFG, 6, seed=11)
        prefix = [tr for tr in big if tr.trial_id < 3]
        assert len(small) == len(prefix)
        for x, y in zip(small, prefix):
            assert np.array_equal(x.state, y.state)
            assert np.array_equal(x.next_state, y.next_state)

    def test_trial_shape_and_termination(self):
        records = generate_trials(CFG, 30, seed=3)
        by_trial = {}
        for tr in records:
            by_trial.setdefault(tr.trial_id, []).append(tr)
        assert set(by_trial) == set(range(30))
        for trial in by_trial.values():
            assert len(trial) <= CFG.max_steps
            assert [tr.t for tr in trial] == list(range(len(trial)))
            for tr in trial[:-1]:
                assert not tr.done and tr.reward == 1.0
            if len(trial) < CFG.max_steps:
                assert trial[-1].done and trial[-1].reward == 0.0
            # consecutive states chain
            for a, b in zip(trial, trial[1:]):
                assert np.array_equal(a.next_state, b.state)

    def test_noise_recorded_and_replayable(self):
        records = generate_trials(CFG, 5, seed=9)
        for tr in records[:50]:
            replay = step_given_noise(tr.state, tr.action, tr.noise, CFG)
            assert np.allclose(replay, tr.next_state, atol=1e-12)

    def test_subject_ids_match_trials(self):
        records = generate_trials(CFG, 4, seed=1)
        for tr in records:
            assert tr.subject_id == tr.trial_id

    def test_subject_offset(self):
        records = generate_trials(CFG, 3, seed=1, subject_offset=100)
        assert {tr.subject_id for tr in records} == {100, 101, 102}


class TestHdDataset:
    def test_five_groups_with_offsets(self):
        records, gravity_map = generate_hd_dataset(4, seed=2)
        subjects = {tr.subject_id for tr in records}
        for g_idx, gravity in enumerate(HD_GRAVITIES):
            group_ids = {s for s in subjects if subject_group(s) == g_idx}
            assert group_ids == {g_idx * GROUP_BASE + i for i in range(4)}
            for s in group_ids:
                assert gravity_map[s] == gravity

    def test_groups_use_their_gravity(self):
        records, gravity_map = generate_hd_dataset(3, seed=5)
        for tr in records[:100]:
            cfg_g = EnvConfig(gravity=gravity_map[tr.subject_id])
            replay = step_given_noise(tr.state, tr.action, tr.noise, cfg_g)
            assert np.allclose(replay, tr.next_state, atol=1e-12)


class TestWindow:
    def test_windows_are_consecutive(self):
        records = generate_trials(CFG, 10, seed=4)
        wins = window(records, 5)
        assert wins, "expected at least one window"
        for w in wins:
            assert len(w) == 5
            sid = w[0].subject_id
            for a, b in zip(w, w[1:]):
                assert b.subject_id == sid
                assert b.t == a.t + 1

    def test_window_count_per_subject(self):
        records = generate_trials(CFG, 10, seed=4)
        wins = window(records, 5)
        by_subject = {}
        for tr in records:
            by_subject.setdefault(tr.subject_id, []).append(tr)
        expect = sum(max(0, len(v) - 4) for v in by_subject.values())
        assert len(wins) == expect

    def test_short_subjects_skipped_with_warning(self):
        records = generate_trials(CFG, 10, seed=4)
        short = [tr for tr in records if tr.subject_id == 0][:3]
        with pytest.warns(UserWarning):
            wins = window(short, 5)
        assert wins == []

    def test_tau_one_is_each_step(self):
        records = generate_trials(CFG, 3, seed=4)
        assert len(window(records, 1)) == len(records)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        records = generate_trials(CFG, 5, seed=6)
        path = tmp_path / "data.jsonl"
        write_transitions(path, records, CFG, seed=6)
        loaded = read_transitions(path)
        assert len(loaded) == len(records)
        for a, b in zip(records, loaded):
            assert np.allclose(a.state, b.state, atol=0)
            assert np.allclose(a.next_state, b.next_state, atol=0)
            assert a.action == b.action
            assert a.reward == b.reward
            assert a.done == b.done
            assert a.provenance == b.provenance
            assert np.allclose(a.noise, b.noise, atol=0)

    def test_metadata_sidecar(self, tmp_path):
        records = generate_trials(CFG, 2, seed=8)
        path = tmp_path / "data.jsonl"
        write_transitions(path, records, CFG, seed=8, gravity_map={0: 9.8})
        meta = read_metadata(path)
        assert meta["seed"] == 8
        assert meta["config_hash"] == CFG.hash()
        assert meta["n_transitions"] == len(records)
        assert meta["gravity_map"] == {"0": 9.8}
        assert meta_path(path).exists()

    def test_missing_file_error_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.jsonl"):
            read_transitions(tmp_path / "nope.jsonl")

    def test_counterfactual_records_round_trip(self, tmp_path):
        tr = Transition(subject_id=1, trial_id=1, t=0, state=np.zeros(4),
                        action=0.5, next_state=np.ones(4) * 0.01, reward=1.0,
                        done=False, provenance="counterfactual", parent=(1, 1, 0))
        path = tmp_path / "cf.jsonl"
        write_transitions(path, [tr], CFG, seed=0)
        loaded = read_transitions(path)[0]
        assert loaded.provenance == "counterfactual"
        assert loaded.parent == (1, 1, 0)
        assert loaded.noise is None

    def test_corrupt_line_raises(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"not": "a transition"}\n')
        with pytest.raises((KeyError, ValueError)):
            read_transitions(path)

    def test_columnar_view(self):
        records = generate_trials(CFG, 3, seed=10)
        cols = transitions_to_arrays(records)
        n = len(records)
        assert cols["states"].shape == (n, STATE_DIM)
        assert cols["next_states"].shape == (n, STATE_DIM)
        assert cols["actions"].shape == (n,)
        assert cols["dones"].dtype == bool
        assert cols["subjects"].dtype == np.int64


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            EnvConfig(noise_frac=-0.1)
        with pytest.raises(ValueError):
            EnvConfig(action_levels=1)
        with pytest.raises(ValueError):
            EnvConfig(max_steps=0)

    def test_hash_changes_with_values(self):
        assert EnvConfig().hash() != EnvConfig(gravity=3.7).hash()

    def test_initial_state_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = initial_state(rng)
            assert (np.abs(s) <= 0.05).all()
