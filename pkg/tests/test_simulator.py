"""Synthetic model: forward pass, interventions, divergence."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import random_selection, selection_from_logits, small_spec
from moetrim.errors import ValidationError
from moetrim.policy import PolicyConfig, full_retain_mask
from moetrim.router import MoEModelSpec, Phase
from moetrim.simulator import (
    Intervention,
    SyntheticMoE,
    build_model,
    deny_expert_rank,
    divergence_report,
    expert_mlp,
    forward_layer,
    layer_mask_schedule,
    run_experiment,
    seeded_inputs,
    simulate,
)


class TestBuildModel:
    def test_deterministic_per_seed(self):
        spec = small_spec()
        a = build_model(spec, 7)
        b = build_model(spec, 7)
        for name in ("router_w", "wq", "wk", "wv", "wo", "w1", "w2"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_different_seeds_differ(self):
        spec = small_spec()
        a = build_model(spec, 7)
        b = build_model(spec, 8)
        assert not np.array_equal(a.router_w, b.router_w)

    def test_weight_shapes(self):
        spec = small_spec(num_layers=3, num_experts=5, d_model=8, d_ff=16)
        m = build_model(spec, 0, d_head=4)
        assert m.router_w.shape == (3, 8, 5)
        assert m.wq.shape == (3, 8, 4)
        assert m.wo.shape == (3, 4, 8)
        assert m.w1.shape == (3, 5, 8, 16)
        assert m.w2.shape == (3, 5, 16, 8)


def tiny_model():
    """Hand-sized model with explicit weights for arithmetic checks."""
    spec = MoEModelSpec(num_layers=1, num_experts=2, top_k=1,
                        d_model=2, d_ff=2)
    w1 = np.zeros((1, 2, 2, 2))
    w2 = np.zeros((1, 2, 2, 2))
    w1[0, 0] = np.eye(2)
    w1[0, 1] = 2.0 * np.eye(2)
    w2[0, 0] = 0.5 * np.eye(2)
    w2[0, 1] = np.array([[0.0, 1.0], [1.0, 0.0]])
    return SyntheticMoE(
        spec=spec, seed=0, d_head=2,
        router_w=np.zeros((1, 2, 2)),
        wq=np.zeros((1, 2, 2)), wk=np.zeros((1, 2, 2)),
        wv=np.zeros((1, 2, 2)), wo=np.zeros((1, 2, 2)),
        w1=w1, w2=w2,
    )


class TestForwardLayer:
    def test_hand_computed_output(self):
        model = tiny_model()
        hidden = np.array([[1.0, 0.0], [0.0, 1.0]])
        sel = selection_from_logits([[5.0, -5.0], [-5.0, 5.0]], k=1)
        mask = full_retain_mask(sel, layer_index=0, phase=Phase.DECODE)
        out = forward_layer(hidden, model, 0, mask)
        # Token 0 -> expert 0: h + 0.5 * tanh(h); token 1 -> expert 1:
        # h + swap(tanh(2h)).
        exp0 = hidden[0] + 0.5 * np.tanh(hidden[0])
        exp1 = hidden[1] + np.tanh(2.0 * hidden[1]) @ np.array(
            [[0.0, 1.0], [1.0, 0.0]])
        assert np.allclose(out[0], exp0, atol=1e-15)
        assert np.allclose(out[1], exp1, atol=1e-15)

    def test_single_expert_weight_is_one(self):
        model = tiny_model()
        hidden = np.array([[0.3, -0.7]])
        sel = selection_from_logits([[5.0, -5.0]], k=1)
        mask = full_retain_mask(sel, layer_index=0, phase=Phase.DECODE)
        out = forward_layer(hidden, model, 0, mask)
        assert np.allclose(out, hidden + expert_mlp(model, 0, 0, hidden),
                           atol=1e-15)

    def test_collapsed_slots_apply_expert_once_with_merged_weight(self):
        spec = MoEModelSpec(num_layers=1, num_experts=4, top_k=2,
                            d_model=2, d_ff=2)
        rng = np.random.default_rng(3)
        model = SyntheticMoE(
            spec=spec, seed=3, d_head=2,
            router_w=np.zeros((1, 2, 4)),
            wq=np.zeros((1, 2, 2)), wk=np.zeros((1, 2, 2)),
            wv=np.zeros((1, 2, 2)), wo=np.zeros((1, 2, 2)),
            w1=rng.normal(size=(1, 4, 2, 2)),
            w2=rng.normal(size=(1, 4, 2, 2)),
        )
        sel = random_selection(rng, 3, 4, 2)
        from moetrim.policy import ExpertMask, remap_tokens

        original, assigned, weights = remap_tokens(sel, np.array([1]))
        mask = ExpertMask(
            layer_index=0, phase=Phase.DECODE, retained=np.array([1]),
            remap_original=original, remap_assigned=assigned,
            remap_weights=weights, clipped=False,
            important_tokens=np.array([], dtype=np.int64))
        hidden = rng.normal(size=(3, 2))
        out = forward_layer(hidden, model, 0, mask)
        assert np.allclose(out, hidden + expert_mlp(model, 0, 1, hidden),
                           atol=1e-12)

    def test_token_count_mismatch_rejected(self, rng):
        model = tiny_model()
        sel = selection_from_logits([[5.0, -5.0]], k=1)
        mask = full_retain_mask(sel, layer_index=0, phase=Phase.DECODE)
        with pytest.raises(ValidationError):
            forward_layer(np.zeros((2, 2)), model, 0, mask)


class TestDenyRank:
    def test_rank0_replacement_and_renormalized_weights(self):
        logits = np.log(np.array([[0.5, 0.3, 0.2]]))
        sel = selection_from_logits(logits, k=2)
        denied = deny_expert_rank(sel, 0)
        assert denied.expert_ids.tolist() == [[1, 2]]
        assert np.allclose(denied.probs, [[0.3, 0.2]], atol=1e-12)
        mask = full_retain_mask(denied, layer_index=0, phase=Phase.DECODE)
        assert np.allclose(mask.remap_weights, [[0.6, 0.4]], atol=1e-12)

    def test_k1_moves_to_runner_up(self):
        logits = np.log(np.array([[0.6, 0.4]]))
        sel = selection_from_logits(logits, k=1)
        denied = deny_expert_rank(sel, 0)
        assert denied.expert_ids.tolist() == [[1]]

    def test_tail_rank_near_tie_changes_little(self):
        logits = np.log(np.array([[0.5, 0.25, 0.2499, 0.0001]]))
        sel = selection_from_logits(logits, k=2)
        denied = deny_expert_rank(sel, 1)
        base_w = full_retain_mask(sel, 0, Phase.DECODE).remap_weights
        new_w = full_retain_mask(denied, 0, Phase.DECODE).remap_weights
        assert denied.expert_ids.tolist() == [[0, 2]]
        assert np.max(np.abs(base_w - new_w)) < 1e-3

    def test_slots_resorted_by_probability(self):
        logits = np.log(np.array([[0.4, 0.35, 0.05, 0.2]]))
        sel = selection_from_logits(logits, k=2)  # ids [0, 1]
        denied = deny_expert_rank(sel, 0)  # 0 -> 3; resort puts 1 first
        assert denied.expert_ids.tolist() == [[1, 3]]
        assert denied.probs[0, 0] >= denied.probs[0, 1]

    def test_subset_of_tokens(self, rng):
        sel = random_selection(rng, 6, 8, 2)
        denied = deny_expert_rank(sel, 0, tokens=np.array([2, 4]))
        changed = [t for t in range(6)
                   if denied.expert_ids[t].tolist() != sel.expert_ids[t].tolist()]
        assert set(changed) <= {2, 4}
        assert 2 in changed and 4 in changed

    def test_empty_token_subset_is_noop(self, rng):
        sel = random_selection(rng, 4, 8, 2)
        denied = deny_expert_rank(sel, 0, tokens=np.array([], dtype=np.int64))
        assert np.array_equal(denied.expert_ids, sel.expert_ids)

    def test_requires_spare_expert(self, rng):
        sel = random_selection(rng, 3, 4, 4)
        with pytest.raises(ValidationError):
            deny_expert_rank(sel, 0)

    def test_rank_bounds(self, rng):
        sel = random_selection(rng, 3, 4, 2)
        with pytest.raises(ValidationError):
            deny_expert_rank(sel, 2)


class TestLayerMaskSchedule:
    def test_window_one_gives_one_config_per_layer(self):
        scheds = layer_mask_schedule(4, 1)
        assert len(scheds) == 4
        for start, iv in enumerate(scheds):
            assert iv.kind == "deny_rank"
            assert iv.layers == frozenset(range(4)) - {start}

    def test_window_counts(self):
        assert len(layer_mask_schedule(32, 2)) == 31
        assert len(layer_mask_schedule(8, 4)) == 5

    def test_full_window_perturbs_nothing(self):
        scheds = layer_mask_schedule(4, 4)
        assert len(scheds) == 1
        assert scheds[0].layers == frozenset()
        assert not scheds[0].active_for(0, Phase.DECODE, None)

    def test_invalid_window_rejected(self):
        with pytest.raises(ValidationError):
            layer_mask_schedule(4, 0)
        with pytest.raises(ValidationError):
            layer_mask_schedule(4, 5)


class TestSimulate:
    def test_bitwise_deterministic(self):
        spec = small_spec(num_layers=3, num_experts=4, d_model=16, d_ff=32)
        model = build_model(spec, 11)
        x = seeded_inputs(4, 5, 16, 99)
        a = simulate(model, x, 6)
        b = simulate(model, x, 6)
        assert np.array_equal(a.hidden, b.hidden)

    def test_output_shape_and_finiteness(self):
        spec = small_spec(num_layers=8, num_experts=8, d_model=32, d_ff=64)
        model = build_model(spec, 0)
        x = seeded_inputs(6, 4, 32, 1)
        res = simulate(model, x, 10)
        assert res.hidden.shape == (6, 14, 32)
        assert np.all(np.isfinite(res.hidden))
        assert np.max(np.linalg.norm(res.hidden, axis=-1)) < 100.0

    def test_drop_zero_policy_equals_baseline_bitwise(self):
        spec = small_spec(num_layers=2, num_experts=4, d_model=16, d_ff=32)
        model = build_model(spec, 5)
        x = seeded_inputs(3, 4, 16, 2)
        base = simulate(model, x, 5)
        iv = Intervention(kind="policy", policy=PolicyConfig(
            mode="latency", drop_count=0))
        mod = simulate(model, x, 5, intervention=iv)
        assert np.array_equal(base.hidden, mod.hidden)

    def test_none_intervention_zero_divergence(self):
        spec = small_spec(num_layers=2, num_experts=4, d_model=16, d_ff=32)
        model = build_model(spec, 5)
        x = seeded_inputs(3, 4, 16, 2)
        rep = run_experiment(model, x, 5, Intervention(kind="none"))
        assert rep.mean_l2 == 0.0
        assert abs(rep.mean_cosine - 1.0) < 1e-12

    def test_prefill_only_denial_leaves_decode_perturbed(self):
        spec = small_spec(num_layers=4, num_experts=8, d_model=32, d_ff=64)
        model = build_model(spec, 3)
        x = seeded_inputs(4, 5, 32, 7)
        iv = Intervention(kind="deny_rank", rank=0,
                          phases=frozenset({Phase.PREFILL}))
        rep = run_experiment(model, x, 6, iv)
        assert rep.prefill_mean_l2 > 0.0
        assert rep.decode_mean_l2 > 0.0  # corruption carries forward

    def test_decode_only_denial_leaves_prefill_clean(self):
        spec = small_spec(num_layers=4, num_experts=8, d_model=32, d_ff=64)
        model = build_model(spec, 3)
        x = seeded_inputs(4, 5, 32, 7)
        iv = Intervention(kind="deny_rank", rank=0,
                          phases=frozenset({Phase.DECODE}))
        rep = run_experiment(model, x, 6, iv)
        assert rep.prefill_mean_l2 == 0.0
        assert rep.decode_mean_l2 > 0.0

    def test_decode_step_limit_restricts_perturbation(self):
        spec = small_spec(num_layers=4, num_experts=8, d_model=32, d_ff=64)
        model = build_model(spec, 3)
        x = seeded_inputs(4, 5, 32, 7)
        full = run_experiment(model, x, 8, Intervention(
            kind="deny_rank", rank=0, phases=frozenset({Phase.DECODE})))
        limited = run_experiment(model, x, 8, Intervention(
            kind="deny_rank", rank=0, phases=frozenset({Phase.DECODE}),
            decode_step_limit=2))
        assert 0.0 < limited.decode_mean_l2 < full.decode_mean_l2

    def test_layer_restriction(self):
        spec = small_spec(num_layers=4, num_experts=8, d_model=32, d_ff=64)
        model = build_model(spec, 3)
        x = seeded_inputs(4, 5, 32, 7)
        one_layer = run_experiment(model, x, 6, Intervention(
            kind="deny_rank", rank=0, layers=frozenset({0})))
        all_layers = run_experiment(model, x, 6, Intervention(
            kind="deny_rank", rank=0))
        assert 0.0 < one_layer.mean_l2 < all_layers.mean_l2

    def test_trace_sink_event_count(self):
        spec = small_spec(num_layers=3, num_experts=4, d_model=16, d_ff=32)
        model = build_model(spec, 1)
        x = seeded_inputs(2, 4, 16, 5)
        calls = []
        simulate(model, x, 6, trace_sink=lambda *a: calls.append(a))
        # One routing event per layer for prefill plus one per decode step.
        assert len(calls) == 3 * (1 + 6)
        events = sorted({c[0] for c in calls})
        assert events == list(range(1 + 6))
        assert {c[2] for c in calls} == {Phase.PREFILL, Phase.DECODE}

    def test_divergence_grows_with_retained_budget_removed(self):
        # Mean divergence over seeds is non-increasing as the retained
        # pool grows (latency policy with shrinking drop counts).
        spec = small_spec(num_layers=4, num_experts=8, d_model=32, d_ff=64)
        means = []
        for drop in (6, 4, 2, 0):
            iv = Intervention(kind="policy", policy=PolicyConfig(
                mode="latency", drop_count=drop))
            vals = []
            for seed in range(20):
                model = build_model(spec, seed)
                x = seeded_inputs(4, 4, 32, 1000 + seed)
                vals.append(run_experiment(model, x, 6, iv).mean_l2)
            means.append(float(np.mean(vals)))
        for bigger_pool, smaller_pool in zip(means[1:], means[:-1]):
            assert bigger_pool <= smaller_pool * 1.02

    def test_inputs_validated(self):
        spec = small_spec()
        model = build_model(spec, 0)
        with pytest.raises(ValidationError):
            simulate(model, np.zeros((2, 3, 5)), 4)  # wrong d_model
        with pytest.raises(ValidationError):
            simulate(model, seeded_inputs(2, 3, 8, 0), -1)


class TestDivergenceReport:
    def test_phase_partition_of_per_token_values(self):
        spec = small_spec(num_layers=2, num_experts=4, d_model=16, d_ff=32)
        model = build_model(spec, 9)
        x = seeded_inputs(3, 4, 16, 11)
        base = simulate(model, x, 5)
        mod = simulate(model, x, 5,
                       intervention=Intervention(kind="deny_rank", rank=0))
        rep = divergence_report(base, mod)
        assert rep.per_token_l2.shape == (3, 9)
        assert abs(rep.prefill_mean_l2 -
                   float(rep.per_token_l2[:, :4].mean())) < 1e-12
        assert abs(rep.decode_mean_l2 -
                   float(rep.per_token_l2[:, 4:].mean())) < 1e-12
        assert abs(rep.final_step_l2 -
                   float(rep.per_token_l2[:, -1].mean())) < 1e-12
        assert abs(rep.mean_l2 - float(rep.per_token_l2.mean())) < 1e-12

    def test_position_slice_means(self):
        spec = small_spec(num_layers=2, num_experts=4, d_model=16, d_ff=32)
        model = build_model(spec, 9)
        x = seeded_inputs(3, 4, 16, 11)
        base = simulate(model, x, 5)
        mod = simulate(model, x, 5,
                       intervention=Intervention(kind="deny_rank", rank=0))
        rep = divergence_report(base, mod)
        last_two = rep.position_mean_l2(np.array([7, 8]))
        manual = float(rep.per_token_l2[:, [7, 8]].mean())
        assert abs(last_two - manual) < 1e-12

    def test_mismatched_runs_rejected(self):
        spec = small_spec(num_layers=2, num_experts=4, d_model=16, d_ff=32)
        model = build_model(spec, 9)
        a = simulate(model, seeded_inputs(3, 4, 16, 1), 5)
        b = simulate(model, seeded_inputs(3, 4, 16, 1), 4)
        with pytest.raises(ValidationError):
            divergence_report(a, b)


class TestSeededInputs:
    def test_deterministic_and_seed_sensitive(self):
        a = seeded_inputs(4, 6, 32, 5)
        b = seeded_inputs(4, 6, 32, 5)
        c = seeded_inputs(4, 6, 32, 6)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert a.shape == (4, 6, 32)
