import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protomap.adpen import Topology
from protomap.cohort import ValidationError
from protomap.explain import (PrototypicalState, build_clinical_map,
                              decode_prototypes, load_explainable_map, morph_difference,
                              retrieve_nearest_samples, save_explainable_map,
                              select_stage_representatives)

import oracles


def _state(stage, age, mmse=0.8, L=4):
    probs = np.full(L, 0.1 / (L - 1))
    probs[stage] = 0.9
    return PrototypicalState(probs, mmse, age / 100.0)


def test_decoded_states_are_valid_and_repeatable(small_adpen):
    model = small_adpen.model
    a = decode_prototypes(model.vae, model.grid)
    b = decode_prototypes(model.vae, model.grid)
    assert len(a) == model.grid.K
    for s, t in zip(a, b):
        assert abs(s.stage_probs.sum() - 1) < 1e-9
        assert 0 <= s.mmse <= 1 and 0 <= s.age <= 1
        np.testing.assert_array_equal(s.stage_probs, t.stage_probs)
        assert (s.mmse, s.age) == (t.mmse, t.age)


def test_clinical_map_zips_positionally():
    states = [_state(0, 70), _state(3, 80)]
    emap = build_clinical_map(np.array([0.2, 0.9]), states)
    assert emap.states[0] is states[0] and emap.scores[1] == 0.9
    assert emap.top_entry() == (1, states[1])
    with pytest.raises(ValidationError):
        build_clinical_map(np.array([0.2, 0.9, 0.1]), states)


def test_explainable_map_export_round_trip(tmp_path):
    states = [_state(k % 4, 60 + k, mmse=0.5 + 0.05 * k) for k in range(6)]
    emap = build_clinical_map(np.linspace(0, 1, 6), states, Topology("grid2d", (2, 3)))
    d = emap.to_dict()
    entry = d["entries"][2]
    assert entry["stage"] == "pMCI" and entry["age"] == pytest.approx(62.0)
    assert entry["mmse"] == pytest.approx(0.6 * 30)
    path = tmp_path / "map.json"
    save_explainable_map(emap, path)
    back = load_explainable_map(path)
    np.testing.assert_array_equal(back.scores, emap.scores)
    for s, t in zip(back.states, emap.states):
        np.testing.assert_array_equal(s.stage_probs, t.stage_probs)
        assert (s.mmse, s.age) == (t.mmse, t.age)
    assert back.topology == emap.topology


def test_retrieval_examples():
    rng = np.random.default_rng(0)
    latents = rng.normal(size=(20, 3))
    imaging = rng.normal(size=(20, 8))
    P = np.vstack([latents[7], rng.normal(size=(3, 3))])
    one = retrieve_nearest_samples(P, latents, imaging, n=1)
    assert one.ids[0][0] == 7
    np.testing.assert_array_equal(one.averages[0], imaging[7])
    three = retrieve_nearest_samples(P, latents, imaging, n=3)
    assert all(len(ids) == 3 for ids in three.ids)
    np.testing.assert_allclose(three.averages[1], imaging[three.ids[1]].mean(axis=0))


def test_retrieval_with_too_few_samples_warns(caplog):
    latents = np.zeros((2, 3))
    with caplog.at_level(logging.WARNING):
        out = retrieve_nearest_samples(np.ones((4, 3)), latents, np.ones((2, 5)), n=3)
    assert all(len(ids) == 2 for ids in out.ids) and "only 2 samples" in caplog.text
    assert out.averages.shape == (4, 5)


@settings(max_examples=150)
@given(K=st.integers(1, 100), N=st.integers(1, 40), seed=st.integers(0, 10_000),
       ties=st.booleans())
def test_retrieval_matches_exhaustive_scan(K, N, seed, ties):
    rng = np.random.default_rng(seed)
    latents = rng.normal(size=(N, 3))
    if ties and N > 3:
        latents[N // 2:] = latents[: N - N // 2]  # duplicated latents force exact ties
    P = rng.normal(size=(K, 3))
    out = retrieve_nearest_samples(P, latents, rng.normal(size=(N, 2)), n=3)
    for k in range(K):
        assert out.ids[k].tolist() == oracles.nearest_ids(P[k].tolist(), latents.tolist(), 3)


def test_representative_examples():
    states = [_state(0, 70), _state(0, 75), _state(1, 72), _state(0, 60), _state(0, 74)]
    chosen = select_stage_representatives(states, 75.0, per_stage=3)
    assert chosen[0] == [1, 4, 0] and chosen[1] == [2]
    tie = [_state(2, 70), _state(2, 80), _state(2, 70)]
    assert select_stage_representatives(tie, 75.0, per_stage=2)[2] == [0, 1]
    with pytest.raises(ValidationError):
        select_stage_representatives(states, 0.0)


@settings(max_examples=150)
@given(K=st.integers(1, 100), seed=st.integers(0, 10_000), query=st.floats(1.0, 100.0))
def test_representatives_match_sort_oracle(K, seed, query):
    rng = np.random.default_rng(seed)
    stages = rng.integers(0, 4, K)
    ages = np.round(rng.uniform(50, 95, K), 0)  # rounding makes ties common
    states = [_state(int(s), float(a)) for s, a in zip(stages, ages)]
    got = select_stage_representatives(states, query, per_stage=3, n_stages=4)
    expected = oracles.stage_representatives([s.stage for s in states],
                                             [s.age_years for s in states], query, 3, 4)
    assert got == expected


def test_morph_difference_examples():
    x = np.array([0.5, -0.2, 0.1])
    assert np.all(morph_difference(x, x[None], tau=0.0).diffs == 0)
    refs = np.array([[0.1, 0.3, 0.1], [0.0, 0.0, 0.0]])
    raw = morph_difference(x, refs, tau=0.0).diffs
    np.testing.assert_array_equal(raw, x - refs)
    big = np.abs(raw).max() + 1e-9
    assert np.all(morph_difference(x, refs, tau=big).diffs == 0)
    with pytest.raises(ValidationError):
        morph_difference(x, np.zeros((1, 4)))


@given(seed=st.integers(0, 1000))
def test_morph_difference_antisymmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=6), rng.normal(size=6)
    np.testing.assert_array_equal(morph_difference(a, b[None], tau=0.0).diffs,
                                  -morph_difference(b, a[None], tau=0.0).diffs)


def test_morph_default_threshold_and_csv(tmp_path):
    rng = np.random.default_rng(0)
    x, refs = rng.normal(size=10), rng.normal(size=(3, 10))
    m = morph_difference(x, refs, prototype_ids=[4, 9, 2])
    assert m.tau == pytest.approx(np.percentile(np.abs(x - refs), 60))
    assert np.mean(m.diffs == 0) == pytest.approx(0.6, abs=0.04)
    m.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].startswith("prototype,f0") and lines[2].startswith("9,")
