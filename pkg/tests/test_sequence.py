import math

import numpy as np
import pytest

from hdnn.losses import LossResult
from hdnn.numerics import softmax_with_temperature
from hdnn.sequence import (Arc, Lattice, LatticeError, SmbrConfig,
                           estimate_state_priors, forward_backward,
                           read_alignment, read_lattice, smbr_kd_objective,
                           smbr_objective, write_alignment, write_lattice)

from oracles import (brute_force_expected_accuracy, brute_force_posteriors,
                     enumerate_paths, fd_array_grad, random_lattice, rel_err)


def single_path_lattice(states, weights=None):
    t = len(states)
    weights = weights if weights is not None else [0.0] * t
    arcs = [Arc(i, i + 1, i, s, w) for i, (s, w) in enumerate(zip(states, weights))]
    return Lattice(t, t + 1, arcs)


def uniform_smbr_cfg(num_states, k=0.5):
    return SmbrConfig(k, np.full(num_states, 1.0 / num_states))


def random_instance(seed, num_frames=4, num_states=3):
    rng = np.random.default_rng(seed)
    lat = random_lattice(rng, num_frames, num_states)
    logits = rng.normal(size=(num_frames, num_states)) * 1.5
    ref = rng.integers(num_states, size=num_frames)
    return lat, logits, ref, rng


class TestLatticeValidation:
    def test_inconsistent_node_frames_rejected(self):
        with pytest.raises(LatticeError):
            Lattice(2, 3, [Arc(0, 1, 0, 0), Arc(0, 1, 1, 0), Arc(1, 2, 1, 0)])

    def test_two_start_nodes_rejected(self):
        with pytest.raises(LatticeError):
            Lattice(1, 3, [Arc(0, 2, 0, 0), Arc(1, 2, 0, 1)])

    def test_orphan_node_rejected(self):
        with pytest.raises(LatticeError):
            Lattice(1, 3, [Arc(0, 1, 0, 0)])

    def test_no_complete_path_rejected(self):
        # both frame-1 arcs leave from a node nothing reaches
        with pytest.raises(LatticeError):
            Lattice(2, 4, [Arc(0, 1, 0, 0), Arc(2, 3, 1, 0), Arc(2, 3, 1, 1)])

    def test_frame_out_of_range_rejected(self):
        with pytest.raises(LatticeError):
            Lattice(1, 2, [Arc(0, 1, 1, 0)])


class TestForwardBackward:
    def test_single_path_all_gamma_one(self):
        lat = single_path_lattice([0, 1, 2], weights=[-0.5, 0.2, 0.1])
        scores = np.log(np.random.default_rng(0).uniform(0.1, 1.0, size=(3, 3)))
        gamma, total = forward_backward(lat, scores)
        np.testing.assert_allclose(gamma, 1.0, atol=1e-12)
        expected_total = sum(scores[i, s] + w for i, (s, w) in
                             enumerate(zip([0, 1, 2], [-0.5, 0.2, 0.1])))
        assert total == pytest.approx(expected_total, abs=1e-9)

    def test_two_parallel_equal_arcs_split_mass(self):
        lat = Lattice(1, 2, [Arc(0, 1, 0, 0, 0.0), Arc(0, 1, 0, 1, 0.0)])
        scores = np.full((1, 2), math.log(0.5))
        gamma, _ = forward_backward(lat, scores)
        np.testing.assert_allclose(gamma, [0.5, 0.5], atol=1e-12)

    def test_per_frame_gamma_sums_to_one(self):
        for seed in range(10):
            lat, logits, _, _ = random_instance(seed, num_frames=5)
            scores = np.log(softmax_with_temperature(logits, 1.0))
            gamma, _ = forward_backward(lat, scores)
            for t in range(lat.num_frames):
                s = sum(gamma[i] for i, a in enumerate(lat.arcs) if a.frame == t)
                assert s == pytest.approx(1.0, abs=1e-6)

    def test_matches_brute_force_enumeration(self):
        for seed in range(30):
            lat, logits, _, _ = random_instance(seed, num_frames=4)
            scores = np.asarray(logits)
            gamma, total = forward_backward(lat, scores)
            bf_gamma, bf_total = brute_force_posteriors(lat, scores)
            assert np.abs(gamma - bf_gamma).max() < 1e-9
            assert abs(total - bf_total) < 1e-9

    def test_per_frame_score_shift_leaves_gamma_unchanged(self):
        lat, logits, _, _ = random_instance(42, num_frames=4)
        scores = np.asarray(logits)
        gamma, _ = forward_backward(lat, scores)
        shifted = scores.copy()
        shifted[2] += 7.3
        gamma2, _ = forward_backward(lat, shifted)
        assert np.abs(gamma - gamma2).max() < 1e-9


class TestSmbrObjective:
    def test_single_path_matching_reference(self):
        states = [1, 0, 2, 1]
        lat = single_path_lattice(states)
        y = softmax_with_temperature(np.random.default_rng(1).normal(size=(4, 3)), 1.0)
        res = smbr_objective(lat, y, states, uniform_smbr_cfg(3))
        assert res.expected_accuracy == pytest.approx(4.0, abs=1e-12)
        assert np.abs(res.dlogits).max() == 0.0

    def test_two_equiprobable_paths(self):
        arcs = [Arc(0, 1, 0, 0, 0.0), Arc(0, 1, 0, 1, 0.0),
                Arc(1, 2, 1, 0, 0.0), Arc(1, 2, 1, 1, 0.0)]
        lat = Lattice(2, 3, arcs)
        y = np.full((2, 2), 0.5)
        res = smbr_objective(lat, y, [0, 0], uniform_smbr_cfg(2))
        assert res.expected_accuracy == pytest.approx(1.0, abs=1e-9)

    def test_reference_length_mismatch_rejected(self):
        lat = single_path_lattice([0, 1])
        y = np.full((2, 2), 0.5)
        with pytest.raises(ValueError):
            smbr_objective(lat, y, [0], uniform_smbr_cfg(2))

    def test_expected_accuracy_matches_enumeration(self):
        for seed in range(25):
            lat, logits, ref, _ = random_instance(seed, num_frames=5)
            y = softmax_with_temperature(logits, 1.0)
            cfg = uniform_smbr_cfg(3, k=0.7)
            res = smbr_objective(lat, y, ref, cfg)
            bf = brute_force_expected_accuracy(lat, y, ref, cfg)
            assert abs(res.expected_accuracy - bf) < 1e-6

    def test_gradient_matches_finite_differences_through_softmax(self):
        for seed in range(10):
            lat, logits, ref, _ = random_instance(seed, num_frames=5)
            cfg = uniform_smbr_cfg(3, k=0.4)
            res = smbr_objective(lat, softmax_with_temperature(logits, 1.0), ref, cfg)

            def f(z):
                y = softmax_with_temperature(z, 1.0)
                return brute_force_expected_accuracy(lat, y, ref, cfg)

            numeric = fd_array_grad(f, logits, step=1e-4)
            # floor at the central-difference noise scale so a structurally
            # zero gradient (single surviving path) compares as equal
            assert rel_err(res.dlogits, numeric, floor=1e-6) < 1e-4

    def test_expected_accuracy_within_path_bounds(self):
        for seed in range(15):
            lat, logits, ref, _ = random_instance(seed, num_frames=4)
            y = softmax_with_temperature(logits, 1.0)
            res = smbr_objective(lat, y, ref, uniform_smbr_cfg(3))
            accs = []
            for path in enumerate_paths(lat):
                accs.append(sum(1 for i in path if lat.arcs[i].state == ref[lat.arcs[i].frame]))
            assert min(accs) - 1e-9 <= res.expected_accuracy <= max(accs) + 1e-9

    def test_posterior_row_rescaling_is_invisible(self):
        lat, logits, ref, _ = random_instance(7, num_frames=4)
        y = softmax_with_temperature(logits, 1.0)
        cfg = uniform_smbr_cfg(3)
        base = smbr_objective(lat, y, ref, cfg)
        y2 = y.copy()
        y2[1] *= 3.0  # shifts that frame's log scores by a constant
        scaled = smbr_objective(lat, y2, ref, cfg)
        assert abs(base.expected_accuracy - scaled.expected_accuracy) < 1e-9
        assert np.abs(base.arc_posteriors - scaled.arc_posteriors).max() < 1e-9
        assert np.abs(base.dlogits - scaled.dlogits).max() < 1e-9

    def test_small_ascent_step_raises_expected_accuracy(self):
        improved = 0
        for seed in range(20):
            lat, logits, ref, _ = random_instance(seed, num_frames=4)
            cfg = uniform_smbr_cfg(3)
            res = smbr_objective(lat, softmax_with_temperature(logits, 1.0), ref, cfg)
            if np.abs(res.dlogits).max() == 0:
                improved += 1
                continue
            stepped = logits + 1e-3 * res.dlogits
            res2 = smbr_objective(lat, softmax_with_temperature(stepped, 1.0), ref, cfg)
            if res2.expected_accuracy >= res.expected_accuracy - 1e-12:
                improved += 1
        assert improved == 20


class TestSmbrKdObjective:
    def make_parts(self, seed=3):
        lat, logits, ref, rng = random_instance(seed, num_frames=4)
        cfg = uniform_smbr_cfg(3)
        smbr = smbr_objective(lat, softmax_with_temperature(logits, 1.0), ref, cfg)
        kd = LossResult(0.9, rng.normal(size=smbr.dlogits.shape) * 0.1)
        return smbr, kd

    def test_p_zero_is_pure_sequence_direction(self):
        smbr, kd = self.make_parts()
        combined = smbr_kd_objective(smbr, None, 0.0)
        n = smbr.dlogits.shape[0]
        np.testing.assert_array_equal(combined.dlogits, -smbr.dlogits / n)
        assert combined.value == pytest.approx(-smbr.expected_accuracy / n)

    def test_huge_p_approaches_kd_direction(self):
        smbr, kd = self.make_parts()
        combined = smbr_kd_objective(smbr, kd, 1e6)
        a = combined.dlogits.ravel()
        b = kd.dlogits.ravel()
        cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        assert cos > 0.999

    def test_different_p_give_different_directions(self):
        smbr, kd = self.make_parts()
        a = smbr_kd_objective(smbr, kd, 0.2).dlogits.ravel()
        b = smbr_kd_objective(smbr, kd, 0.5).dlogits.ravel()
        cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        assert cos < 1.0 - 1e-9

    def test_negative_p_rejected(self):
        smbr, kd = self.make_parts()
        with pytest.raises(ValueError):
            smbr_kd_objective(smbr, kd, -0.5)

    def test_p_positive_needs_regularizer(self):
        smbr, _ = self.make_parts()
        with pytest.raises(ValueError):
            smbr_kd_objective(smbr, None, 0.3)


class TestStatePriors:
    def test_priors_normalized_and_floored(self):
        priors = estimate_state_priors([[0, 0, 1], [1, 1, 1]], 4, floor=1e-6)
        assert priors.sum() == pytest.approx(1.0, abs=1e-12)
        assert priors.min() >= 1e-6 / 2  # renormalization can shave the floor
        assert priors[1] > priors[0] > priors[2]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            estimate_state_priors([], 3)


class TestLatticeIO:
    def test_lattice_round_trip(self, tmp_path):
        lat, _, _, _ = random_instance(9, num_frames=5)
        path = tmp_path / "utt.lat"
        write_lattice(lat, path)
        back = read_lattice(path)
        assert back.num_frames == lat.num_frames
        assert back.num_nodes == lat.num_nodes
        assert sorted(back.arcs, key=lambda a: (a.frame, a.src, a.dst, a.state)) == \
            sorted(lat.arcs, key=lambda a: (a.frame, a.src, a.dst, a.state))

    def test_alignment_round_trip(self, tmp_path):
        ali = np.array([3, 3, 1, 0, 2])
        path = tmp_path / "utt.ali"
        write_alignment(ali, path)
        np.testing.assert_array_equal(read_alignment(path), ali)

    def test_truncated_lattice_rejected(self, tmp_path):
        lat = single_path_lattice([0, 1])
        path = tmp_path / "bad.lat"
        write_lattice(lat, path)
        text = path.read_text().splitlines()
        path.write_text("\n".join(text[:-1]) + "\n")
        with pytest.raises(LatticeError):
            read_lattice(path)
