"""Guidance calculus: directions, masks, combination, momentum, the step."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sega_forge.guidance import (
    NEGATIVE,
    POSITIVE,
    ConceptEdit,
    GuidanceConfig,
    GuidanceState,
    ParameterError,
    apply_recorded,
    cfg_term,
    combine_concepts,
    edit_direction,
    guidance_term,
    momentum_update,
    recorded_guidance,
    sega_step,
    threshold_mask,
)
from sega_forge.tensors import Latent, Rng, ShapeMismatchError, gaussian_sample


# Independent oracle: brute-force selection over sorted magnitudes.
def brute_mask(vec: list[float], edit_scale: float, fraction: float) -> list[float]:
    mags = sorted(abs(x) for x in vec)
    eta = mags[math.ceil(fraction * len(vec)) - 1]
    return [edit_scale if abs(x) >= eta else 0.0 for x in vec]


def lat(*values: float) -> Latent:
    return Latent.of(values)


vectors = st.lists(
    st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6),
    min_size=1, max_size=24,
)


# -- validation ---------------------------------------------------------------

def test_concept_edit_validates_eagerly():
    good = ConceptEdit(condition="sky", edit_scale=5.0, threshold=0.9)
    assert good.direction == POSITIVE and good.weight == 1.0 and good.warmup == 0
    cases = [
        (dict(condition="", edit_scale=5.0, threshold=0.9), "condition"),
        (dict(condition="x", edit_scale=-1.0, threshold=0.9), "edit_scale"),
        (dict(condition="x", edit_scale=21.0, threshold=0.9), "edit_scale"),
        (dict(condition="x", edit_scale=5.0, threshold=0.0), "threshold"),
        (dict(condition="x", edit_scale=5.0, threshold=1.0), "threshold"),
        (dict(condition="x", edit_scale=5.0, threshold=0.9, warmup=-1), "warmup"),
        (dict(condition="x", edit_scale=5.0, threshold=0.9, warmup=1.5), "warmup"),
        (dict(condition="x", edit_scale=5.0, threshold=0.9, direction="sideways"), "direction"),
        (dict(condition="x", edit_scale=5.0, threshold=0.9, weight=float("inf")), "weight"),
    ]
    for kwargs, field_name in cases:
        with pytest.raises(ParameterError) as err:
            ConceptEdit(**kwargs)
        assert err.value.field == field_name


def test_guidance_config_validates_eagerly():
    GuidanceConfig(prompt_condition="p", guidance_scale=7.5, momentum_scale=0.3, momentum_beta=0.9)
    cases = [
        (dict(guidance_scale=-0.5), "guidance_scale"),
        (dict(guidance_scale=25.0), "guidance_scale"),
        (dict(momentum_scale=1.5), "momentum_scale"),
        (dict(momentum_beta=1.0), "momentum_beta"),
        (dict(momentum_beta=-0.1), "momentum_beta"),
        (dict(prompt_condition=""), "prompt_condition"),
    ]
    for kwargs, field_name in cases:
        with pytest.raises(ParameterError) as err:
            GuidanceConfig(**kwargs)
        assert err.value.field == field_name


# -- cfg and directions -------------------------------------------------------

def test_cfg_term_basic():
    assert cfg_term(lat(0.0, 0.0), lat(1.0, 2.0), 2.0) == lat(2.0, 4.0)


def test_cfg_term_scale_one_is_prompt_estimate():
    assert cfg_term(lat(3.0, -1.0), lat(1.0, 2.0), 1.0) == lat(1.0, 2.0)


def test_edit_direction_sign_flip_is_exact():
    eu, ee = lat(0.5, -2.0, 3.0), lat(1.0, 1.0, -1.0)
    pos = edit_direction(eu, ee, POSITIVE)
    neg = edit_direction(eu, ee, NEGATIVE)
    assert pos == lat(0.5, 3.0, -4.0)
    assert np.array_equal(neg.data, -pos.data)


# -- mask and per-concept term ------------------------------------------------

def test_threshold_mask_matches_brute_force_frozen_case():
    vec = [0.1, -0.9, 0.5, -0.2]
    # Oracle: |vec| sorted = [0.1, 0.2, 0.5, 0.9], rank ceil(0.75 * 4) = 3,
    # cut at 0.5, entries with |x| >= 0.5 carry the scale.
    assert brute_mask(vec, 10.0, 0.75) == [0.0, 10.0, 10.0, 0.0]
    assert threshold_mask(Latent.of(vec), 10.0, 0.75) == lat(0.0, 10.0, 10.0, 0.0)


def test_guidance_term_frozen_case():
    got = guidance_term(lat(0.1, -0.9, 0.5, -0.2), 10.0, 0.75)
    assert got == lat(0.0, -9.0, 5.0, 0.0)


def test_mask_includes_ties():
    vec = lat(1.0, -1.0, 0.5, 0.25)
    # Cut magnitude 1.0 is shared by two entries; both stay selected.
    assert threshold_mask(vec, 2.0, 0.9) == lat(2.0, 2.0, 0.0, 0.0)


@given(vectors, st.floats(min_value=0.05, max_value=0.95),
       st.floats(min_value=0.0, max_value=20.0))
def test_mask_matches_brute_force(vec, fraction, scale):
    got = threshold_mask(Latent.of(vec), scale, fraction)
    assert got.tolist() == brute_mask(vec, scale, fraction)


@given(st.lists(st.floats(min_value=0.001, max_value=1e6), min_size=2, max_size=24, unique=True),
       st.floats(min_value=0.05, max_value=0.95),
       st.booleans())
def test_mask_sparsity_count_for_distinct_magnitudes(mags, fraction, flip_signs):
    vec = [(-m if flip_signs and i % 2 else m) for i, m in enumerate(mags)]
    n = len(vec)
    mask = threshold_mask(Latent.of(vec), 3.0, fraction)
    expected_nonzero = n - math.ceil(fraction * n) + 1
    assert int(np.count_nonzero(mask.data)) == expected_nonzero


@given(vectors, st.floats(min_value=0.05, max_value=0.95),
       st.floats(min_value=0.01, max_value=20.0),
       st.floats(min_value=0.1, max_value=4.0))
def test_guidance_term_scales_linearly_in_edit_scale(vec, fraction, scale, factor):
    base = guidance_term(Latent.of(vec), scale, fraction)
    scaled = guidance_term(Latent.of(vec), min(scale * factor, 20.0), fraction)
    eff = min(scale * factor, 20.0) / scale
    np.testing.assert_allclose(scaled.data, base.data * eff, rtol=1e-12, atol=1e-12)


@given(vectors, st.floats(min_value=0.05, max_value=0.95),
       st.floats(min_value=0.0, max_value=20.0))
def test_guidance_term_antisymmetric_in_direction(vec, fraction, scale):
    eu = Latent.zeros((len(vec),))
    ee = Latent.of(vec)
    pos = guidance_term(edit_direction(eu, ee, POSITIVE), scale, fraction)
    neg = guidance_term(edit_direction(eu, ee, NEGATIVE), scale, fraction)
    assert np.array_equal(neg.data, -pos.data)


# -- combination and momentum -------------------------------------------------

def test_combine_concepts_weights_and_gating():
    edits = (
        ConceptEdit(condition="a", edit_scale=1.0, threshold=0.5, weight=2.0, warmup=0),
        ConceptEdit(condition="b", edit_scale=1.0, threshold=0.5, weight=-1.0, warmup=3),
    )
    terms = [lat(1.0, 0.0), lat(0.0, 4.0)]
    assert combine_concepts(terms, edits, t=0) == lat(2.0, 0.0)
    assert combine_concepts(terms, edits, t=3) == lat(2.0, -4.0)


def test_combine_concepts_rejects_mismatched_lengths():
    edits = (ConceptEdit(condition="a", edit_scale=1.0, threshold=0.5),)
    with pytest.raises(ValueError):
        combine_concepts([lat(1.0), lat(2.0)], edits, t=0)
    with pytest.raises(ValueError):
        combine_concepts([], (), t=0)


@given(st.lists(st.lists(st.floats(min_value=-100, max_value=100), min_size=3, max_size=3),
                min_size=2, max_size=5),
       st.randoms(use_true_random=False))
def test_combine_concepts_permutation_reassociation_only(rows, rnd):
    edits = tuple(
        ConceptEdit(condition=f"c{i}", edit_scale=1.0, threshold=0.5, weight=1.0 + 0.25 * i)
        for i in range(len(rows))
    )
    terms = [Latent.of(row) for row in rows]
    base = combine_concepts(terms, edits, t=0)
    order = list(range(len(rows)))
    rnd.shuffle(order)
    permuted = combine_concepts([terms[i] for i in order], tuple(edits[i] for i in order), t=0)
    np.testing.assert_allclose(permuted.data, base.data, rtol=1e-12, atol=1e-9)


def test_momentum_update_basic():
    assert momentum_update(lat(0.0, 0.0), lat(2.0, -2.0), 0.5) == lat(1.0, -1.0)


def test_momentum_matches_closed_form_geometric_sum():
    # Oracle: nu_t = (1 - beta) * sum_{k < t} beta^(t-1-k) * combined_k.
    beta = 0.9
    rng = Rng(77)
    seq = [gaussian_sample(rng, (4,)) for _ in range(100)]
    nu = Latent.zeros((4,))
    for step, combined in enumerate(seq, start=1):
        nu = momentum_update(nu, combined, beta)
        closed = (1.0 - beta) * sum(
            beta ** (step - 1 - k) * seq[k].data for k in range(step)
        )
        np.testing.assert_allclose(nu.data, closed, rtol=0.0, atol=1e-12)


# -- the step -----------------------------------------------------------------

def unconditional_inputs(seed: int, n: int = 6):
    rng = Rng(seed)
    return gaussian_sample(rng, (n,)), gaussian_sample(rng, (n,))


def test_step_without_concepts_is_cfg_bitwise():
    for seed in range(20):
        eu, ep = unconditional_inputs(seed)
        scale = float(Rng(seed).uniforms(1)[0] * 20.0)
        state = GuidanceState.fresh(eu.shape)
        out = sega_step(state, eu, ep, [], GuidanceConfig(prompt_condition="p", guidance_scale=scale))
        ref = cfg_term(eu, ep, scale)
        assert np.array_equal(out.data, ref.data)
        assert not np.any(state.momentum.data)
        assert state.t == 1


def test_step_during_warmup_is_inert_but_builds_momentum():
    eu, ep = unconditional_inputs(3)
    ee = gaussian_sample(Rng(30), (6,))
    edit = ConceptEdit(condition="c", edit_scale=10.0, threshold=0.5, warmup=5)
    config = GuidanceConfig(prompt_condition="p", guidance_scale=2.0,
                            momentum_scale=0.7, momentum_beta=0.8, concepts=(edit,))
    state = GuidanceState.fresh(eu.shape)
    out = sega_step(state, eu, ep, [ee], config)
    # Output is bitwise the plain classifier-free guidance prediction.
    assert np.array_equal(out.data, cfg_term(eu, ep, 2.0).data)
    # But the accumulator already holds the (ungated) combined term.
    expected = guidance_term(edit_direction(eu, ee, POSITIVE), 10.0, 0.5)
    assert np.any(expected.data)
    np.testing.assert_array_equal(
        state.momentum.data, momentum_update(Latent.zeros((6,)), expected, 0.8).data
    )
    assert state.gamma_log[0] == Latent.zeros((6,))


def test_step_output_independent_of_concept_fields_during_warmup():
    eu, ep = unconditional_inputs(11)
    ee = gaussian_sample(Rng(110), (6,))
    outputs = []
    for scale, frac, direction in [(1.0, 0.5, POSITIVE), (20.0, 0.9, NEGATIVE), (7.5, 0.25, POSITIVE)]:
        edit = ConceptEdit(condition="c", edit_scale=scale, threshold=frac,
                           warmup=4, direction=direction)
        config = GuidanceConfig(prompt_condition="p", guidance_scale=3.0, concepts=(edit,))
        state = GuidanceState.fresh(eu.shape)
        outputs.append(sega_step(state, eu, ep, [ee], config))
    assert outputs[0] == outputs[1] == outputs[2]


def test_step_applies_gated_sum_and_momentum_after_warmup():
    eu, ep = unconditional_inputs(8)
    ee = gaussian_sample(Rng(80), (6,))
    edit = ConceptEdit(condition="c", edit_scale=6.0, threshold=0.5, warmup=2)
    config = GuidanceConfig(prompt_condition="p", guidance_scale=1.5,
                            momentum_scale=0.5, momentum_beta=0.6, concepts=(edit,))
    state = GuidanceState.fresh(eu.shape)
    term = guidance_term(edit_direction(eu, ee, POSITIVE), 6.0, 0.5)

    first = sega_step(state, eu, ep, [ee], config)   # t=0, warmup
    second = sega_step(state, eu, ep, [ee], config)  # t=1, warmup
    nu_before_third = state.momentum
    third = sega_step(state, eu, ep, [ee], config)   # t=2, active
    cfg = cfg_term(eu, ep, 1.5)
    assert np.array_equal(first.data, cfg.data) and np.array_equal(second.data, cfg.data)
    expected_total = term.add(nu_before_third.scale(0.5))
    np.testing.assert_array_equal(third.data, cfg.add(expected_total).data)
    assert state.gamma_log[2] == expected_total


def test_step_rejects_shape_and_count_mismatches():
    eu, ep = unconditional_inputs(1)
    state = GuidanceState.fresh(eu.shape)
    config = GuidanceConfig(concepts=(ConceptEdit(condition="c", edit_scale=1.0, threshold=0.5),))
    with pytest.raises(ShapeMismatchError):
        sega_step(state, eu, Latent.zeros((3,)), [eu], config)
    with pytest.raises(ValueError):
        sega_step(GuidanceState.fresh(eu.shape), eu, ep, [], config)


def test_recording_can_be_disabled():
    eu, ep = unconditional_inputs(2)
    edit = ConceptEdit(condition="c", edit_scale=2.0, threshold=0.5)
    config = GuidanceConfig(concepts=(edit,))
    state = GuidanceState.fresh(eu.shape, record=False)
    sega_step(state, eu, ep, [gaussian_sample(Rng(21), (6,))], config)
    assert state.gamma_log == [] and state.mask_log == []
    assert state.t == 1


def test_recorded_guidance_and_replay_lookup():
    eu, ep = unconditional_inputs(4)
    edit = ConceptEdit(condition="c", edit_scale=3.0, threshold=0.5)
    config = GuidanceConfig(concepts=(edit,))
    state = GuidanceState.fresh(eu.shape)
    for seed in (40, 41, 42):
        sega_step(state, eu, ep, [gaussian_sample(Rng(seed), (6,))], config)
    log = recorded_guidance(state)
    assert len(log) == 3
    assert apply_recorded(log, 1) == state.gamma_log[1]
    with pytest.raises(ValueError):
        apply_recorded(log, 3)
    with pytest.raises(ValueError):
        apply_recorded(log, -1)


@given(st.integers(min_value=0, max_value=2**32), st.floats(min_value=0.0, max_value=20.0))
@settings(max_examples=40)
def test_cfg_reduction_property(seed, scale):
    eu, ep = unconditional_inputs(seed)
    state = GuidanceState.fresh(eu.shape)
    out = sega_step(state, eu, ep, [], GuidanceConfig(prompt_condition="p", guidance_scale=scale))
    assert np.array_equal(out.data, cfg_term(eu, ep, scale).data)
