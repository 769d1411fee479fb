import numpy as np
import pytest

from cfrl.augment import (
    AugmentedDataset,
    augment_counterfactual,
    augment_groups,
    augment_with_sampler,
    cartpole_reward_fn,
)
from cfrl.cluster import ClusterModel
from cfrl.env import EnvConfig, generate_trials, reward_done, step_given_noise
from cfrl.scm import (
    ActionSupport,
    AdditiveGaussianScm,
    GroundTruthCartpoleScm,
    SupportError,
)

CFG = EnvConfig()
SUPPORT = ActionSupport.discrete(CFG.action_grid())
REWARD = cartpole_reward_fn(CFG)


@pytest.fixture(scope="module")
def records():
    return generate_trials(CFG, 10, seed=0)


class TestAugmentCounterfactual:
    def test_record_counts(self, records):
        aug = augment_counterfactual(records, GroundTruthCartpoleScm(CFG), 4,
                                     np.random.default_rng(0), REWARD, SUPPORT)
        assert len(aug.records) == len(records) * 5
        assert len(aug.observed) == len(records)
        assert len(aug.counterfactual) == len(records) * 4
        assert aug.k_cf == 4 and aug.n_skipped == 0

    def test_recorded_noise_gives_exact_counterfactuals(self, records):
        # ground-truth model + recorded noise: generated next states must
        # equal the simulator run with the same noise under the new action
        aug = augment_counterfactual(records, GroundTruthCartpoleScm(CFG), 3,
                                     np.random.default_rng(1), REWARD, SUPPORT)
        by_key = {tr.key(): tr for tr in records}
        for cf in aug.counterfactual:
            parent = by_key[cf.parent]
            want = step_given_noise(parent.state, cf.action, parent.noise, CFG)
            assert np.allclose(cf.next_state, want, atol=1e-12)

    def test_alternative_actions_never_factual(self, records):
        aug = augment_counterfactual(records, GroundTruthCartpoleScm(CFG), 10,
                                     np.random.default_rng(2), REWARD, SUPPORT)
        by_key = {tr.key(): tr for tr in records}
        for cf in aug.counterfactual:
            assert not np.isclose(cf.action, by_key[cf.parent].action)

    def test_rewards_recomputed_from_generated_state(self, records):
        aug = augment_counterfactual(records, GroundTruthCartpoleScm(CFG), 5,
                                     np.random.default_rng(3), REWARD, SUPPORT)
        for cf in aug.counterfactual:
            r, d = reward_done(cf.next_state, CFG)
            assert cf.reward == r and cf.done == d

    def test_one_step_only(self, records):
        # every parent key refers to an observed record, never to a generated one
        aug = augment_counterfactual(records, GroundTruthCartpoleScm(CFG), 2,
                                     np.random.default_rng(4), REWARD, SUPPORT)
        observed_keys = {tr.key() for tr in records}
        for cf in aug.counterfactual:
            assert cf.parent in observed_keys
        for tr in aug.observed:
            assert tr.parent is None

    def test_validation(self, records):
        model = GroundTruthCartpoleScm(CFG)
        with pytest.raises(ValueError):
            augment_counterfactual(records, model, 0, np.random.default_rng(0),
                                   REWARD, SUPPORT)
        with pytest.raises(ValueError):
            augment_counterfactual([], model, 2, np.random.default_rng(0),
                                   REWARD, SUPPORT)

    def test_unexplainable_rows_skipped(self, records):
        class Fragile(GroundTruthCartpoleScm):
            def abduct(self, states, actions, next_states, theta=None):
                if len(states) > 1:
                    raise SupportError("batch")
                if states[0, 0] > 0:   # reject roughly half the rows
                    raise SupportError("row")
                return super().abduct(states, actions, next_states, theta)

        subset = records[:40]
        n_bad = sum(1 for tr in subset if tr.state[0] > 0)
        aug = augment_counterfactual(subset, Fragile(CFG), 2,
                                     np.random.default_rng(5), REWARD, SUPPORT,
                                     prefer_recorded_noise=False)
        assert aug.n_skipped == n_bad
        assert len(aug.observed) == len(subset) - n_bad

    def test_deterministic_under_rng_seed(self, records):
        a = augment_counterfactual(records, GroundTruthCartpoleScm(CFG), 3,
                                   np.random.default_rng(7), REWARD, SUPPORT)
        b = augment_counterfactual(records, GroundTruthCartpoleScm(CFG), 3,
                                   np.random.default_rng(7), REWARD, SUPPORT)
        for x, y in zip(a.records, b.records):
            assert x.action == y.action
            assert np.array_equal(x.next_state, y.next_state)


class TestAugmentWithSampler:
    def test_counts_and_tag(self, records):
        def sample_fn(states, actions, rng):
            return states + 0.01

        aug = augment_with_sampler(records, sample_fn, 3,
                                   np.random.default_rng(0), REWARD, SUPPORT,
                                   source_tag="base_d")
        assert len(aug.counterfactual) == 3 * len(records)
        assert aug.source_model_hash == "base_d"

    def test_sampler_receives_alternative_actions(self, records):
        seen = []

        def sample_fn(states, actions, rng):
            seen.append(actions.copy())
            return states

        augment_with_sampler(records, sample_fn, 2, np.random.default_rng(1),
                             REWARD, SUPPORT, source_tag="x")
        flat = np.concatenate(seen)
        assert len(flat) == 2 * len(records)
        grid = CFG.action_grid()
        assert np.isin(flat, grid).all()


class TestAugmentGroups:
    def _clusters(self, records, k=2):
        subjects = sorted({tr.subject_id for tr in records})
        assignment = {sid: sid % k for sid in subjects}
        centroids = np.array([[float(g), -float(g)] for g in range(k)])
        return ClusterModel(k=k, centroids=centroids, assignment=assignment,
                            inertia=0.0)

    def test_groups_partition_records(self, records):
        clusters = self._clusters(records)

        class ThetaEcho(AdditiveGaussianScm):
            d_state = 4
            d_noise = 4
            thetas = []

            def predict(self, states, actions, noise, theta=None):
                self.thetas.append(theta)
                return np.asarray(states)

            def abduct(self, states, actions, next_states, theta=None):
                return np.zeros((len(states), 4))

        model = ThetaEcho()
        out = augment_groups(records, model, clusters, 2,
                             np.random.default_rng(0), REWARD, SUPPORT)
        assert set(out) == {0, 1}
        n_total = sum(len(a.observed) for a in out.values())
        assert n_total == len(records)
        for g, aug in out.items():
            assert aug.group == g
            for tr in aug.observed:
                assert clusters.assignment[tr.subject_id] == g
        # each group's predictions ran under that group's centroid row
        for th in model.thetas:
            assert th is not None
            assert (th == th[0]).all()

    def test_missing_assignment_raises(self, records):
        clusters = self._clusters(records)
        del clusters.assignment[0]
        with pytest.raises(KeyError):
            augment_groups(records, GroundTruthCartpoleScm(CFG), clusters, 2,
                           np.random.default_rng(0), REWARD, SUPPORT)


class TestRewardFn:
    def test_alive_state(self):
        r, d = REWARD(np.zeros(4), 0.5, np.zeros(4))
        assert r == 1.0 and not d

    def test_out_of_bounds_state(self):
        r, d = REWARD(np.zeros(4), 0.5, np.array([2.5, 0, 0, 0]))
        assert r == 0.0 and d
