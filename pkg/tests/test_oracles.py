import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfg_transformer.games import (
    Game,
    apply_isomorphism,
    build_named_game,
    invariant_normalize,
    make_rng,
    random_isomorphism,
    sample_invariant_game,
)
from nfg_transformer.oracles import (
    deviation_gain_mixed,
    deviation_gain_pure,
    embedding_distance,
    enumerate_pure_ne,
    expected_payoff,
    masked_mse,
    max_deviation_gain,
    max_deviation_gain_tensor,
    min_embedding_distance,
    ne_gap,
)

COORD = build_named_game("coordination")
PENNIES = build_named_game("matching_pennies")
UNIFORM2 = [np.full(2, 0.5), np.full(2, 0.5)]


def random_profile(rng, actions):
    return [rng.dirichlet(np.ones(t)) for t in actions]


def point_mass(actions, a):
    return [np.eye(t)[i] for t, i in zip(actions, a)]


def brute_expected(game, profile, player):
    """Sum over every joint action of probability times payoff."""
    total = 0.0
    for a in itertools.product(*(range(t) for t in game.actions_per_player)):
        total += np.prod([profile[q][a[q]] for q in range(game.num_players)]) * game.payoffs[(player, *a)]
    return total


class TestExpectedPayoff:
    def test_pennies_uniform(self):
        assert expected_payoff(PENNIES, UNIFORM2, 0) == 0.0
        assert expected_payoff(PENNIES, UNIFORM2, 1) == 0.0

    def test_coordination_pure(self):
        assert expected_payoff(COORD, point_mass((2, 2), (0, 0)), 0) == 1.0

    def test_point_mass(self):
        game = Game.from_payoffs(make_rng(0).standard_normal((3, 2, 3, 4)))
        for a in [(0, 0, 0), (1, 2, 3), (0, 1, 2)]:
            for p in range(3):
                assert expected_payoff(game, point_mass((2, 3, 4), a), p) == game.payoffs[(p, *a)]

    def test_matches_enumeration(self):
        rng = make_rng(1)
        game = Game.from_payoffs(rng.standard_normal((3, 2, 3, 2)))
        profile = random_profile(rng, (2, 3, 2))
        for p in range(3):
            assert expected_payoff(game, profile, p) == pytest.approx(brute_expected(game, profile, p), abs=1e-12)

    def test_rejects_masked(self):
        with pytest.raises(ValueError):
            expected_payoff(COORD.with_mask(np.eye(2, dtype=bool)), UNIFORM2, 0)

    def test_rejects_bad_profile(self):
        with pytest.raises(ValueError):
            expected_payoff(COORD, [np.array([0.7, 0.7]), np.full(2, 0.5)], 0)


class TestDeviationGains:
    def test_pennies_uniform(self):
        assert deviation_gain_mixed(PENNIES, UNIFORM2, 0) == 0.0

    def test_coordination_miscoordinated(self):
        # enumeration: player 1 earns G(0,1)=0 and would earn G(1,1)=1 by switching
        profile = point_mass((2, 2), (0, 1))
        assert deviation_gain_mixed(COORD, profile, 0) == 1.0
        assert deviation_gain_mixed(COORD, profile, 1) == 1.0

    def test_nonnegative(self):
        rng = make_rng(2)
        for _ in range(50):
            game = Game.from_payoffs(rng.standard_normal((2, 3, 4)))
            profile = random_profile(rng, (3, 4))
            for p in range(2):
                assert deviation_gain_mixed(game, profile, p) >= -1e-12

    def test_ne_gap_examples(self):
        assert ne_gap(PENNIES, UNIFORM2).ne_gap == 0.0
        # enumeration: expected payoff 0.5 and either deviation also earns 0.5
        assert ne_gap(COORD, UNIFORM2).ne_gap == 0.0
        assert ne_gap(COORD, point_mass((2, 2), (0, 0))).ne_gap == 0.0

    def test_report_is_max(self):
        rng = make_rng(3)
        game = Game.from_payoffs(rng.standard_normal((3, 2, 2, 3)))
        report = ne_gap(game, random_profile(rng, (2, 2, 3)))
        assert report.ne_gap == max(report.per_player_gaps)
        assert len(report.per_player_gaps) == 3

    def test_pure_examples(self):
        assert deviation_gain_pure(COORD, (0, 0), 0) == 0.0
        assert deviation_gain_pure(COORD, (0, 0), 1) == 0.0
        assert deviation_gain_pure(COORD, (0, 1), 0) == 1.0
        assert max_deviation_gain(COORD, (0, 0)) == 0.0
        assert max_deviation_gain(COORD, (0, 1)) == 1.0

    def test_pennies_all_positive(self):
        # enumeration: the losing player always gains 2 by switching
        for a in itertools.product(range(2), range(2)):
            assert max_deviation_gain(PENNIES, a) == 2.0

    def test_pure_index_error(self):
        with pytest.raises(IndexError):
            deviation_gain_pure(COORD, (0, 2), 0)

    def test_point_mass_agreement(self):
        rng = make_rng(4)
        for actions in [(2, 2), (3, 4), (2, 3, 2)]:
            game = Game.from_payoffs(rng.standard_normal((len(actions), *actions)))
            for a in itertools.product(*(range(t) for t in actions)):
                profile = point_mass(actions, a)
                for p in range(len(actions)):
                    assert abs(deviation_gain_mixed(game, profile, p) - deviation_gain_pure(game, a, p)) <= 1e-9

    def test_tensor_matches_scalar(self):
        rng = make_rng(5)
        for actions in [(2, 2), (3, 4), (2, 3, 2)]:
            game = Game.from_payoffs(rng.standard_normal((len(actions), *actions)))
            table = max_deviation_gain_tensor(game.payoffs)
            for a in itertools.product(*(range(t) for t in actions)):
                assert table[a] == pytest.approx(max_deviation_gain(game, a), abs=1e-12)
        batch = rng.standard_normal((4, 2, 3, 3))
        stacked = max_deviation_gain_tensor(batch, batched=True)
        for i in range(4):
            np.testing.assert_array_equal(stacked[i], max_deviation_gain_tensor(batch[i]))


class TestPureNE:
    def test_named(self):
        assert enumerate_pure_ne(COORD) == [(0, 0), (1, 1)]
        assert enumerate_pure_ne(PENNIES) == []
        assert enumerate_pure_ne(build_named_game("anti_coordination")) == [(0, 1), (1, 0)]

    def test_exhaustive_equivalence(self):
        rng = make_rng(6)
        for actions in [(2, 2), (3, 3), (4, 4), (2, 3, 4), (4, 4, 4)]:
            for _ in range(5):
                # integer payoffs make exact ties and pure equilibria common
                game = Game.from_payoffs(rng.integers(0, 3, size=(len(actions), *actions)).astype(float))
                ne = set(enumerate_pure_ne(game, 0.0))
                for a in itertools.product(*(range(t) for t in actions)):
                    assert (max_deviation_gain(game, a) == 0.0) == (a in ne)

    def test_too_large(self):
        game = Game(2, (1001, 1000), np.zeros((2, 1001, 1000)))
        with pytest.raises(ValueError):
            enumerate_pure_ne(game)


class TestInvariance:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6), st.sampled_from([(2, 2), (3, 3), (2, 4), (2, 2, 2), (3, 2, 3)]))
    def test_ne_gap_under_isomorphism(self, seed, actions):
        rng = make_rng(seed)
        game = Game.from_payoffs(rng.standard_normal((len(actions), *actions)))
        profile = random_profile(rng, actions)
        iso = random_isomorphism(rng, actions)
        moved = ne_gap(apply_isomorphism(game, iso), iso.permute_players(profile))
        assert abs(moved.ne_gap - ne_gap(game, profile).ne_gap) <= 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_best_response_sets_survive_normalization(self, seed):
        rng = make_rng(seed)
        game = Game.from_payoffs(rng.standard_normal((2, 3, 3)))
        norm = invariant_normalize(game)
        profile = random_profile(rng, (3, 3))
        for p in range(2):
            def best_set(g):
                other = profile[1 - p]
                values = g.payoffs[p] @ other if p == 0 else other @ g.payoffs[p]
                return set(np.flatnonzero(values >= values.max() - 1e-9).tolist())

            assert best_set(game) == best_set(norm)


class TestEmbeddingDistance:
    def test_identical(self):
        e = [np.ones((2, 3)), np.zeros((3, 3))]
        assert embedding_distance(e, e) == 0.0

    def test_unit_shift(self):
        e1 = [np.zeros((2, 3)), np.zeros((4, 3))]
        e2 = [x + 1 for x in e1]
        assert embedding_distance(e1, e2) == pytest.approx(np.sqrt(18))

    def test_symmetric(self):
        rng = make_rng(0)
        e1 = [rng.standard_normal((2, 4)) for _ in range(2)]
        e2 = [rng.standard_normal((2, 4)) for _ in range(2)]
        assert embedding_distance(e1, e2) == embedding_distance(e2, e1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            embedding_distance([np.zeros((2, 3))], [np.zeros((3, 3))])

    def test_min_distance(self):
        embs = [[np.zeros((1, 1))], [np.ones((1, 1))], [np.full((1, 1), 3.0)]]
        assert min_embedding_distance(2, embs) == 2.0


class TestMaskedMSE:
    def test_zero(self):
        x = make_rng(0).standard_normal((2, 3, 3))
        assert masked_mse(x, x, np.ones((2, 3, 3), dtype=bool)) == 0.0

    def test_empty(self):
        with pytest.raises(ValueError):
            masked_mse(np.zeros(4), np.zeros(4), np.zeros(4, dtype=bool))

    def test_constant_offset(self):
        rng = make_rng(1)
        x = rng.standard_normal((2, 4, 4))
        mask = rng.random((2, 4, 4)) < 0.3
        assert masked_mse(x + 0.1, x, mask) == pytest.approx(0.01, abs=1e-12)
