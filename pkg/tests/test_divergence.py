import numpy as np
import pytest

from feddnc.divergence import (
    DegenerateReferenceError,
    DivergenceProfile,
    LayerDivergence,
    SplitDecision,
    cosine_divergence,
    layer_profile,
    norm_divergence,
    prepass,
    select_split,
)
from feddnc.errors import ConfigurationError, InputError
from feddnc.nn import ParamEntry, ParameterSet, init_params
from feddnc.rng import Rng

from test_federation import iid_state
from test_nn import conv_spec


class TestNormDivergence:
    def test_identical_vectors_zero(self):
        assert norm_divergence([3.0, 4.0], [3.0, 4.0]) == 0.0

    def test_zero_current(self):
        assert norm_divergence([3.0, 4.0], [0.0, 0.0]) == pytest.approx(1.0, abs=1e-7)

    def test_uniform_doubling(self):
        assert norm_divergence([1.0, 1.0], [2.0, 2.0]) == pytest.approx(1.0, abs=1e-7)

    def test_zero_reference_rejected(self):
        with pytest.raises(DegenerateReferenceError):
            norm_divergence([0.0, 0.0], [1.0, 2.0])

    def test_nonnegative_and_triangle_bound(self):
        gen = Rng(1, 0).generator()
        for _ in range(50):
            w1 = gen.standard_normal(20)
            w2 = gen.standard_normal(20)
            d = norm_divergence(w1, w2)
            assert d >= 0.0
            bound = (np.linalg.norm(w1) + np.linalg.norm(w2)) / np.linalg.norm(w1)
            assert d <= bound + 1e-12

    def test_zero_iff_equal(self):
        gen = Rng(2, 0).generator()
        w1 = gen.standard_normal(10)
        assert norm_divergence(w1, w1) == 0.0
        assert norm_divergence(w1, w1 + 1e-3) > 0.0


class TestCosineDivergence:
    def test_parallel_zero(self):
        assert cosine_divergence([1.0, 0.0], [1.0, 0.0]) == 0.0

    def test_orthogonal_unit(self):
        assert cosine_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-7)

    def test_scale_dependence_via_reference_norm(self):
        assert cosine_divergence([2.0, 0.0], [0.0, 2.0]) == pytest.approx(0.5, abs=1e-7)

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateReferenceError):
            cosine_divergence([0.0, 0.0], [1.0, 0.0])
        with pytest.raises(DegenerateReferenceError):
            cosine_divergence([1.0, 0.0], [0.0, 0.0])

    def test_scaling_reference_divides_exactly(self):
        gen = Rng(3, 0).generator()
        w1 = gen.standard_normal(16)
        w2 = gen.standard_normal(16)
        base = cosine_divergence(w1, w2)
        assert cosine_divergence(4.0 * w1, w2) == base / 4.0

    def test_scaling_current_leaves_value_unchanged(self):
        gen = Rng(4, 0).generator()
        w1 = gen.standard_normal(16)
        w2 = gen.standard_normal(16)
        assert cosine_divergence(w1, 4.0 * w2) == cosine_divergence(w1, w2)

    def test_zero_iff_parallel(self):
        gen = Rng(5, 0).generator()
        w1 = np.abs(gen.standard_normal(8)) + 0.1
        assert cosine_divergence(w1, 2.0 * w1) <= 1e-15
        assert cosine_divergence(w1, w1 + np.array([1.0] + [0.0] * 7)) > 1e-6


class TestLayerProfile:
    def test_identical_models_zero_profile(self):
        params = init_params(conv_spec(), Rng(6, 0))
        assert (layer_profile(params, params, "norm").values() == 0.0).all()
        assert layer_profile(params, params, "cosine").values().max() <= 1e-12

    def test_profile_length_matches_param_layers(self):
        spec = conv_spec()
        a = init_params(spec, Rng(7, 0))
        b = init_params(spec, Rng(8, 0))
        profile = layer_profile(a, b, "norm")
        assert len(profile.entries) == spec.num_param_layers
        assert [e.layer_index for e in profile.entries] == list(spec.param_layer_indices())

    def test_hand_built_two_layer_profile(self):
        def two_layer(w1, w2):
            return ParameterSet((
                ParamEntry(1, "a", np.array([w1], np.float32), np.zeros(0, np.float32)),
                ParamEntry(2, "b", np.array([w2], np.float32), np.zeros(0, np.float32)),
            ))

        ref = two_layer([1.0, 0.0], [1.0, 0.0])
        cur = two_layer([1.0, 0.0], [0.0, 1.0])
        profile = layer_profile(ref, cur, "cosine")
        assert profile.values().tolist() == [0.0, pytest.approx(1.0, abs=1e-7)]

    def test_mismatched_models_rejected(self):
        from test_nn import dense_head_spec

        a = init_params(conv_spec(), Rng(9, 0))
        b = init_params(dense_head_spec(4, 3), Rng(9, 0))
        with pytest.raises(InputError):
            layer_profile(a, b, "cosine")

    def test_unknown_metric_rejected(self):
        params = init_params(conv_spec(), Rng(10, 0))
        with pytest.raises(InputError):
            layer_profile(params, params, "manhattan")


def profile_from(values, round_index=6):
    entries = tuple(LayerDivergence(i + 1, f"l{i + 1}", v) for i, v in enumerate(values))
    return DivergenceProfile(round_index, "round5", entries)


class TestSelectSplit:
    def test_knee_profile_splits_at_five(self):
        p = profile_from([0.10, 0.11, 0.10, 0.12, 0.13, 0.48, 0.55, 0.60])
        decision = select_split([p])
        assert decision.kind == "split_at"
        assert decision.split_layer == 5
        assert decision.rationale == "knee_found"

    def test_flat_high_profile_no_split(self):
        p = profile_from([0.50, 0.52, 0.55, 0.51, 0.53, 0.54, 0.52, 0.50])
        decision = select_split([p])
        assert decision.kind == "no_split"

    def test_exactly_constant_profile_no_split(self):
        p = profile_from([0.3] * 6)
        assert select_split([p]).kind == "no_split"

    def test_scaling_invariance(self):
        values = [0.10, 0.11, 0.10, 0.12, 0.13, 0.48, 0.55, 0.60]
        base = select_split([profile_from(values)])
        scaled = select_split([profile_from([17.0 * v for v in values])])
        assert (base.kind, base.split_layer, base.rationale) == (
            scaled.kind, scaled.split_layer, scaled.rationale)

    def test_never_selects_last_layer(self):
        # the largest ratio sits at the end, but the candidate range stops at n-1
        p = profile_from([0.1, 0.1, 0.1, 10.0])
        decision = select_split([p])
        assert decision.kind == "split_at"
        assert decision.split_layer < 4

    def test_tie_breaks_toward_earliest_layer(self):
        p = profile_from([0.1, 0.4, 1.6, 6.4])
        decision = select_split([p], knee_ratio=2.0, flat_tolerance=1.5)
        assert decision.split_layer == 1

    def test_gradual_slope_below_knee_ratio_no_split(self):
        p = profile_from([0.10, 0.14, 0.19, 0.26, 0.36, 0.50])
        decision = select_split([p], knee_ratio=2.0)
        assert decision.kind == "no_split"

    def test_multiple_profiles_averaged(self):
        low = profile_from([0.1, 0.1, 0.1, 0.1, 0.1, 0.1])
        kneed = profile_from([0.1, 0.1, 0.1, 0.9, 0.9, 0.9])
        decision = select_split([low, kneed])
        assert decision.kind == "split_at"
        assert decision.split_layer == 3

    def test_too_few_layers_rejected(self):
        with pytest.raises(ConfigurationError):
            select_split([profile_from([0.1, 0.5])])

    def test_requires_a_profile(self):
        with pytest.raises(ConfigurationError):
            select_split([])


class TestPrepass:
    def test_counts_and_reference_snapshot(self):
        state = iid_state(seed=30, local_epochs=1, batch_size=10)
        reference, profiles, rows = prepass(state, prepass_rounds=5, diagnostic_rounds=3)
        assert len(profiles) == 3
        assert len(rows) == 8
        assert state.round_counter == 8
        assert all(p.reference_id == "round5" for p in profiles)
        assert [p.round for p in profiles] == [6, 7, 8]
        assert all(m.mode == "prepass" for m in state.history)

    def test_zero_eta_diagnostics_zero_profile(self):
        state = iid_state(seed=31)
        reference, profiles, _ = prepass(state, prepass_rounds=1, diagnostic_rounds=1,
                                         metric="norm", eta0=0.0, decay=1.0)
        assert (profiles[0].values() == 0.0).all()

    def test_invalid_round_counts_rejected(self):
        state = iid_state(seed=32)
        with pytest.raises(ConfigurationError):
            prepass(state, 0, 1)
        with pytest.raises(ConfigurationError):
            prepass(state, 1, 0)
