import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tagpr.rewards import (RepetitionConfig, RewardContext, RewardWeights, composite_reward, format_reward,
                           foundation_reward, repetition_reward, score_response, split_reasoning,
                           tag_reward, verifiable_reward)
from tagpr.tags import TagRegistry

REG = TagRegistry()
GOOD_CHAIN = ("<analyze_input>q</analyze_input><examine_examples>e</examine_examples>"
              "<make_decision>d</make_decision>")


def test_verifiable_reward():
    assert verifiable_reward("classification", "sci-fi", "sci-fi") == 1.0
    assert verifiable_reward("classification", "Sci-Fi ", "sci-fi") == 1.0
    assert verifiable_reward("classification", "drama", "sci-fi") == 0.0
    assert verifiable_reward("generation", "a b c", "a b c") == 1.0
    assert verifiable_reward("generation", "a x", "a b", "rougeL") == pytest.approx(0.5, abs=1e-9)
    with pytest.raises(ValueError):
        verifiable_reward("ranking", "a", "a")


def test_format_reward():
    assert format_reward("<think>reasoning</think>answer") == 1.0
    assert format_reward("<think>reasoning answer") == 0.0
    two = "<think>a</think><think>b</think>answer"
    assert two.count("<think>") == 2 and format_reward(two) == 0.0
    assert format_reward("<think>a</think>   ") == 0.0
    assert format_reward("lead<think>a</think>x") == 0.0
    assert format_reward("</think>x<think>") == 0.0


def test_split_reasoning():
    assert split_reasoning("<think> c </think> y ") == (" c ", "y")
    assert split_reasoning("just y") == (None, "just y")


def test_repetition_reward():
    assert repetition_reward(" ".join(["x"] * 10)) == pytest.approx(-6 / (7 + 1e-6), abs=1e-12)
    assert repetition_reward(" ".join(["x"] * 10)) == pytest.approx(-0.857143, abs=1e-6)
    assert repetition_reward(" ".join(["x"] * 10)) == pytest.approx(-6 / (7 + 1e-6), abs=1e-9)
    assert repetition_reward("a b c d e f g") == 0.0
    assert repetition_reward("a b c") == 0.0
    with pytest.raises(ValueError):
        RepetitionConfig(n=0)


@pytest.mark.property
@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from("abc"), max_size=25), st.permutations(["a", "b", "c"]))
def test_repetition_rename_invariance(tokens, perm):
    mapping = dict(zip("abc", perm))
    r = repetition_reward(" ".join(tokens))
    assert -1.0 <= r <= 0.0
    assert repetition_reward(" ".join(mapping[t] for t in tokens)) == r


def test_tag_reward():
    assert tag_reward(f"<think>{GOOD_CHAIN}</think>ans", REG) == 0.0
    bad = GOOD_CHAIN.replace("examine_examples", "foo")
    assert tag_reward(f"<think>{bad}</think>ans", REG) == -1.0
    two = "<analyze_input>q</analyze_input><make_decision>d</make_decision>"
    assert tag_reward(f"<think>{two}</think>ans", REG) == -1.0


def test_composite_examples():
    assert composite_reward(1, 0, 1, 0, 0.5) == pytest.approx(0.9, abs=1e-12)
    assert composite_reward(0.7, -0.1, 0, -1, 0.5) == pytest.approx(-0.7, abs=1e-12)
    assert composite_reward(0, 0, 0, 0, 0.5) == pytest.approx(0.1, abs=1e-12)


def test_foundation_examples():
    assert foundation_reward(1, 0, 1) == 1
    assert foundation_reward(0.9, -0.3, 0) == 0
    assert foundation_reward(0.6, -0.2, 1) == pytest.approx(0.4, abs=1e-12)


components = st.tuples(st.floats(0, 1), st.floats(-1, 0), st.sampled_from([0.0, 1.0]),
                       st.sampled_from([-1.0, 0.0]), st.floats(1e-9, 1 - 1e-9))


@pytest.mark.property
@settings(max_examples=300, deadline=None)
@given(components, st.floats(0, 0.5))
def test_composite_monotone(c, bump):
    r_v, r_rep, _, r_tag, r_prmu = c
    base = composite_reward(r_v, r_rep, 1.0, r_tag, r_prmu)
    assert composite_reward(min(1, r_v + bump), r_rep, 1.0, r_tag, r_prmu) >= base - 1e-15
    assert composite_reward(r_v, min(0, r_rep + bump), 1.0, r_tag, r_prmu) >= base - 1e-15
    assert composite_reward(r_v, r_rep, 1.0, 0.0, r_prmu) >= base
    assert composite_reward(r_v, r_rep, 1.0, r_tag, min(1, r_prmu + bump)) >= base - 1e-15


@pytest.mark.property
@settings(max_examples=300, deadline=None)
@given(components)
def test_gate_and_bounds(c):
    r_v, r_rep, r_f, r_tag, r_prmu = c
    w = RewardWeights()
    if r_f == 0.0:
        assert foundation_reward(r_v, r_rep, r_f) == 0.0
        assert composite_reward(r_v, r_rep, r_f, r_tag, r_prmu) == w.beta * r_tag + w.gamma * r_prmu
    assert -1.6 <= composite_reward(r_v, r_rep, r_f, r_tag, r_prmu) <= 1.0
    assert -1.0 <= foundation_reward(r_v, r_rep, r_f) <= 1.0


def test_weights_validation():
    with pytest.raises(ValueError):
        RewardWeights(alpha=-0.1)


def test_score_response_breakdown():
    ctx = RewardContext()
    bd = score_response(ctx, f"<think>{GOOD_CHAIN}</think>label_1", "classification", "label_1")
    assert (bd.r_v, bd.r_f, bd.r_tag, bd.r_prmu) == (1.0, 1.0, 0.0, 0.5)
    assert bd.composite == pytest.approx(composite_reward(bd.r_v, bd.r_rep, bd.r_f, bd.r_tag, bd.r_prmu), abs=1e-12)
    assert bd.foundation == pytest.approx(foundation_reward(bd.r_v, bd.r_rep, bd.r_f), abs=1e-12)
    bd = score_response(ctx, "<think>x</think>label_1", "classification", "label_1",
                        prmu_scorer=lambda raw, c, a: 0.9)
    assert bd.r_tag == -1.0 and bd.r_prmu == 0.9
    assert set(bd.to_dict()) == {"r_v", "r_f", "r_rep", "r_tag", "r_prmu", "composite", "foundation"}


def test_custom_think_markers():
    ctx = RewardContext(think_open="<reason>", think_close="</reason>")
    bd = score_response(ctx, f"<reason>{GOOD_CHAIN}</reason>yes", "classification", "yes")
    assert bd.r_f == 1.0 and bd.r_tag == 0.0


def test_composite_matches_formula_on_random_tuples():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = (rng.random(), -rng.random(), float(rng.integers(2)), -float(rng.integers(2)), rng.random())
        w = RewardWeights()
        expect = w.alpha * (c[0] + c[1]) * c[2] + w.beta * c[3] + w.gamma * c[4]
        assert composite_reward(*c) == pytest.approx(expect, abs=1e-15)
