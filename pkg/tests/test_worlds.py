"""Exact world machinery: errors, distances, balls, disagreement regions."""

import json

import numpy as np
import pytest

from cfal.sim import random_class, random_world
from cfal.worlds import (
    CandidateSet,
    FiniteWorld,
    HypothesisClass,
    ball,
    best_hypothesis,
    default_radius_grid,
    disagreement_coefficient,
    disagreement_region,
    dump_world_json,
    hypothesis_distance,
    load_world_json,
    modified_dis_coefficient,
    population_error,
    region_mass,
    sup_modified_dis_coefficient,
)


def two_point_world(label_prob=(1.0, 1.0)):
    return FiniteWorld(mass=[0.5, 0.5], label_prob=label_prob, q0=[1.0, 1.0])


class TestFiniteWorld:
    def test_mass_must_sum_to_one(self):
        with pytest.raises(ValueError):
            FiniteWorld(mass=[0.5, 0.4], label_prob=[1, 1], q0=[1, 1])

    def test_zero_propensity_rejected(self):
        with pytest.raises(ValueError):
            FiniteWorld(mass=[0.5, 0.5], label_prob=[1, 1], q0=[1.0, 0.0])

    def test_immutable(self):
        world = two_point_world()
        with pytest.raises(ValueError):
            world.mass[0] = 0.9

    def test_propensity_cdf(self):
        world = FiniteWorld(mass=[0.2, 0.3, 0.5], label_prob=[1, 1, 1], q0=[0.1, 0.5, 1.0])
        assert world.propensity_cdf(0.05) == 0.0
        assert world.propensity_cdf(0.1) == pytest.approx(0.2)
        assert world.propensity_cdf(0.7) == pytest.approx(0.5)
        assert world.propensity_cdf(1.0) == pytest.approx(1.0)
        assert world.min_propensity == pytest.approx(0.1)


class TestPopulationError:
    def test_perfect_classifier(self):
        world = two_point_world()
        assert population_error(world, np.array([1, 1])) == 0.0

    def test_half_wrong(self):
        world = two_point_world()
        assert population_error(world, np.array([1, -1])) == pytest.approx(0.5)

    def test_label_noise(self):
        world = two_point_world(label_prob=(0.9, 0.9))
        assert population_error(world, np.array([1, 1])) == pytest.approx(0.1)

    def test_dimension_mismatch(self):
        world = two_point_world()
        with pytest.raises(ValueError):
            population_error(world, np.array([1, 1, 1]))


class TestBestHypothesis:
    def test_separable(self):
        world = FiniteWorld(mass=[0.5, 0.5], label_prob=[1.0, 0.0], q0=[1, 1])
        hclass = HypothesisClass(np.array([[1, -1], [1, 1]], dtype=np.int8))
        idx, nu = best_hypothesis(world, hclass)
        assert idx == 0 and nu == 0.0

    def test_singleton(self):
        world = two_point_world(label_prob=(0.8, 0.8))
        hclass = HypothesisClass(np.array([[1, 1]], dtype=np.int8))
        idx, nu = best_hypothesis(world, hclass)
        assert idx == 0
        assert nu == pytest.approx(0.2)

    def test_tie_breaks_low_index(self):
        world = two_point_world(label_prob=(0.5, 0.5))
        hclass = HypothesisClass(np.array([[1, 1], [-1, -1]], dtype=np.int8))
        assert best_hypothesis(world, hclass)[0] == 0


class TestDistanceAndBall:
    def test_identity(self):
        world = two_point_world()
        h = np.array([1, -1])
        assert hypothesis_distance(world, h, h) == 0.0

    def test_single_instance(self):
        world = FiniteWorld(mass=[0.25, 0.75], label_prob=[1, 1], q0=[1, 1])
        assert hypothesis_distance(world, np.array([1, 1]), np.array([-1, 1])) == pytest.approx(0.25)

    def test_complement(self):
        world = two_point_world()
        assert hypothesis_distance(world, np.array([1, -1]), np.array([-1, 1])) == pytest.approx(1.0)

    def test_pseudometric_exhaustive(self):
        # symmetry and triangle inequality over every triple of a random class
        rng = np.random.default_rng(7)
        world = random_world(rng, 6)
        hclass = random_class(rng, 6, 16)
        d = [
            [hypothesis_distance(world, hclass.vector(i), hclass.vector(j)) for j in range(16)]
            for i in range(16)
        ]
        for i in range(16):
            assert d[i][i] == 0.0
            for j in range(16):
                assert d[i][j] == pytest.approx(d[j][i], abs=1e-15)
                for k in range(16):
                    assert d[i][k] <= d[i][j] + d[j][k] + 1e-12

    def test_ball_radius_zero(self):
        world = two_point_world()
        hclass = HypothesisClass(np.array([[1, 1], [1, -1], [-1, -1]], dtype=np.int8))
        assert ball(world, hclass, 0, 0.0).member_indices == (0,)

    def test_ball_radius_one_is_whole_class(self):
        world = two_point_world()
        hclass = HypothesisClass(np.array([[1, 1], [1, -1], [-1, -1]], dtype=np.int8))
        assert len(ball(world, hclass, 0, 1.0)) == 3

    def test_ball_matches_brute_force(self):
        world = FiniteWorld(mass=[0.2, 0.3, 0.5], label_prob=[1, 1, 1], q0=[1, 1, 1])
        hclass = HypothesisClass(np.array([[1, 1, 1], [-1, 1, 1], [1, -1, -1]], dtype=np.int8))
        got = ball(world, hclass, 0, 0.3)
        expect = tuple(
            i
            for i in range(3)
            if hypothesis_distance(world, hclass.vector(0), hclass.vector(i)) <= 0.3
        )
        assert got.member_indices == expect == (0, 1)

    def test_negative_radius_rejected(self):
        world = two_point_world()
        hclass = HypothesisClass(np.array([[1, 1]], dtype=np.int8))
        with pytest.raises(ValueError):
            ball(world, hclass, 0, -0.1)


class TestDisagreementRegion:
    def test_singleton_empty(self):
        hclass = HypothesisClass(np.array([[1, 1], [1, -1]], dtype=np.int8))
        assert disagreement_region(hclass, CandidateSet((0,))).size == 0

    def test_two_hypotheses(self):
        hclass = HypothesisClass(np.array([[1, 1, 1], [1, -1, 1]], dtype=np.int8))
        region = disagreement_region(hclass, CandidateSet((0, 1)))
        assert region.tolist() == [1]

    def test_full_cube_covers_space(self):
        rows = [[a, b] for a in (-1, 1) for b in (-1, 1)]
        hclass = HypothesisClass(np.array(rows, dtype=np.int8))
        region = disagreement_region(hclass, CandidateSet(tuple(range(4))))
        assert region.tolist() == [0, 1]

    def test_monotone_in_candidate_set(self):
        rng = np.random.default_rng(11)
        world = random_world(rng, 5)
        hclass = random_class(rng, 5, 10)
        small = CandidateSet((1, 4, 7))
        big = CandidateSet((1, 2, 4, 7, 9))
        r_small = set(disagreement_region(hclass, small).tolist())
        r_big = set(disagreement_region(hclass, big).tolist())
        assert r_small <= r_big


class TestModifiedDisCoefficient:
    def test_singleton_ball_is_zero(self):
        world = FiniteWorld(mass=[0.5, 0.5], label_prob=[1.0, 0.0], q0=[1, 1])
        hclass = HypothesisClass(np.array([[1, -1], [-1, 1]], dtype=np.int8))
        # radius small enough that only the optimum is inside
        assert modified_dis_coefficient(world, hclass, 0.5, 1.0) == 0.0

    def test_no_low_propensity_mass(self):
        world = FiniteWorld(mass=[0.5, 0.5], label_prob=[1.0, 0.0], q0=[0.9, 0.9])
        hclass = HypothesisClass(np.array([[1, -1], [1, 1]], dtype=np.int8))
        assert modified_dis_coefficient(world, hclass, 1.0, 2.0) == 0.0

    def test_brute_force_fixture(self):
        world = FiniteWorld(mass=[0.3, 0.2, 0.5], label_prob=[1, 1, 0], q0=[1.0, 0.1, 1.0])
        hclass = HypothesisClass(
            np.array([[1, 1, -1], [1, -1, -1], [-1, -1, 1]], dtype=np.int8)
        )
        star, nu = best_hypothesis(world, hclass)
        r, t = 0.25, 5.0
        members = ball(world, hclass, star, r)
        region = disagreement_region(hclass, members)
        low = [x for x in region if world.q0[x] <= 1.0 / t]
        expect = sum(world.mass[x] for x in low) / r
        assert modified_dis_coefficient(world, hclass, r, t) == pytest.approx(expect)
        # exact consistency: mass of the restricted region equals r * coefficient
        assert region_mass(world, np.array(low, dtype=int)) == pytest.approx(
            r * modified_dis_coefficient(world, hclass, r, t)
        )

    def test_bounded_by_standard_coefficient(self):
        rng = np.random.default_rng(23)
        for _ in range(25):
            world = random_world(rng, 6)
            hclass = random_class(rng, 6, 8)
            r = float(rng.uniform(0.05, 1.0))
            t = float(rng.uniform(1.0, 20.0))
            assert (
                modified_dis_coefficient(world, hclass, r, t)
                <= disagreement_coefficient(world, hclass, r) + 1e-15
            )

    def test_sup_over_grid(self):
        rng = np.random.default_rng(5)
        world = random_world(rng, 5)
        hclass = random_class(rng, 5, 6)
        star, nu = best_hypothesis(world, hclass)
        grid = default_radius_grid(nu, step=0.05)
        got = sup_modified_dis_coefficient(world, hclass, grid, m=100, n=50)
        expect = max(
            modified_dis_coefficient(world, hclass, float(r), 4.0, center=star)
            for r in grid
            if r > 2 * nu
        )
        assert got == pytest.approx(expect)

    def test_invalid_radius(self):
        world = two_point_world()
        hclass = HypothesisClass(np.array([[1, 1]], dtype=np.int8))
        with pytest.raises(ValueError):
            modified_dis_coefficient(world, hclass, 0.0, 1.0)


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(3)
        world = random_world(rng, 4)
        hclass = random_class(rng, 4, 5)
        text = dump_world_json(world, hclass)
        world2, hclass2 = load_world_json(text)
        assert np.allclose(world.mass, world2.mass)
        assert np.allclose(world.label_prob, world2.label_prob)
        assert np.allclose(world.q0, world2.q0)
        assert np.array_equal(hclass.predictions, hclass2.predictions)

    def test_schema_keys(self):
        world = two_point_world()
        hclass = HypothesisClass(np.array([[1, -1]], dtype=np.int8))
        doc = json.loads(dump_world_json(world, hclass))
        assert set(doc) == {"mass", "label_prob", "q0", "hypotheses"}

    def test_duplicates_flagged(self):
        hclass = HypothesisClass(np.array([[1, 1], [1, -1], [1, 1]], dtype=np.int8))
        assert hclass.has_duplicates
        assert hclass.duplicate_groups() == [(0, 2)]
        clean = HypothesisClass(np.array([[1, 1], [1, -1]], dtype=np.int8))
        assert not clean.has_duplicates
