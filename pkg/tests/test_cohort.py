import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from protomap.cohort import (ClinicalRecord, STAGES, SyntheticSpec, ValidationError,
                             denormalize_clinical, generate_cohort, imaging_features,
                             imaging_matrix, load_cohort,
                             longitudinal_series, normalize_clinical, sample_ordering_pairs,
                             save_cohort, stratified_kfold)


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_clinical(ClinicalRecord(0, 30, 75.0)),
                                  [1, 0, 0, 0, 1.0, 0.75])
    np.testing.assert_array_equal(normalize_clinical(ClinicalRecord(3, 0, 100.0)),
                                  [0, 0, 0, 1, 0.0, 1.0])


@pytest.mark.parametrize("record", [ClinicalRecord(4, 20, 70.0), ClinicalRecord(0, 31, 70.0),
                                    ClinicalRecord(0, -1, 70.0), ClinicalRecord(0, 20, 0.0),
                                    ClinicalRecord(0, 20, 100.5)])
def test_normalize_rejects_out_of_range(record):
    with pytest.raises(ValidationError):
        normalize_clinical(record)


@given(stage=st.integers(0, 3), mmse=st.integers(0, 30),
       age=st.floats(0.01, 100.0, allow_nan=False))
def test_normalize_round_trip(stage, mmse, age):
    r = ClinicalRecord(stage, mmse, age)
    back = denormalize_clinical(normalize_clinical(r))
    assert back.stage == stage and back.mmse_raw == mmse
    assert back.age_years == pytest.approx(age, rel=1e-12)
    c = normalize_clinical(r)
    assert c[:4].sum() == 1 and 0 <= c[4] <= 1 and 0 < c[5] <= 1


def test_generation_is_bit_reproducible():
    a, b = generate_cohort(SyntheticSpec(seed=3)), generate_cohort(SyntheticSpec(seed=3))
    np.testing.assert_array_equal(a.imaging, b.imaging)
    np.testing.assert_array_equal(a.clinical, b.clinical)
    assert a.records == b.records
    assert not np.array_equal(a.imaging, generate_cohort(SyntheticSpec(seed=4)).imaging)


def test_noise_free_imaging_is_function_of_clinical_state():
    spec = SyntheticSpec(sigma_img=0.0, seed=1)
    cohort = generate_cohort(spec)
    mapped = imaging_features(cohort.clinical, imaging_matrix(spec), spec.continuous_center)
    np.testing.assert_array_equal(cohort.imaging, mapped)
    twin = imaging_features(cohort.clinical[[7, 7]], imaging_matrix(spec), spec.continuous_center)
    np.testing.assert_array_equal(twin[0], twin[1])
    assert np.all(np.isfinite(cohort.imaging)) and cohort.imaging.shape == (400, 64)


def test_mmse_means_within_three_standard_errors():
    spec = SyntheticSpec(seed=0)
    cohort = generate_cohort(spec)
    for s, target in enumerate(spec.mmse_mean):
        vals = cohort.mmse[cohort.stages == s]
        assert abs(vals.mean() - target) < 3 * spec.mmse_std[s] / np.sqrt(len(vals))


def test_zero_count_stage_rejected():
    with pytest.raises(ValidationError):
        generate_cohort(SyntheticSpec(counts=(10, 0, 10, 10)))


def test_spec_requires_decreasing_mmse():
    with pytest.raises(ValidationError):
        SyntheticSpec(mmse_mean=(25, 27, 25, 21)).validate()
    with pytest.raises(ValidationError):
        SyntheticSpec(sigma_img=-0.1).validate()


def test_spec_dict_round_trip():
    spec = SyntheticSpec(counts=(5, 6, 7, 8), seed=9)
    assert SyntheticSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_cohort_ndjson_round_trip(tmp_path):
    cohort = generate_cohort(SyntheticSpec(counts=(5, 5, 5, 5), seed=2))
    path = tmp_path / "c.jsonl"
    save_cohort(cohort, path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert set(rows[0]) == {"stage", "mmse", "age", "features", "subject_id", "acquisition_index"}
    back = load_cohort(path)
    assert back.records == cohort.records
    np.testing.assert_array_equal(back.imaging, cohort.imaging)
    assert back.subject_ids == cohort.subject_ids


def test_cohort_import_validates(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps({"stage": 0, "mmse": 40, "age": 70, "features": [0.1],
                                "subject_id": "x"}) + "\n")
    with pytest.raises(ValidationError, match="line 1"):
        load_cohort(path)
    path.write_text(json.dumps({"stage": 0, "age": 70, "features": [0.1], "subject_id": "x"}))
    with pytest.raises(ValidationError, match="missing"):
        load_cohort(path)


def test_longitudinal_series_advances_age_and_declines_mmse():
    series = longitudinal_series(SyntheticSpec(), ClinicalRecord(1, 27, 70.0), 4,
                                 stage_path=[1, 1, 2, 3], subject_id="L1")
    assert list(series.acquisition_index) == [0, 1, 2, 3]
    assert list(series.ages) == [70.0, 71.0, 72.0, 73.0]
    assert list(series.mmse) == [27, 26, 25, 24]
    assert list(series.stages) == [1, 1, 2, 3]
    again = longitudinal_series(SyntheticSpec(), ClinicalRecord(1, 27, 70.0), 4,
                                stage_path=[1, 1, 2, 3], subject_id="L1")
    np.testing.assert_array_equal(series.imaging, again.imaging)


# folds ------------------------------------------------------------------------

def test_kfold_ten_samples_one_per_class_per_fold():
    labels = [0] * 5 + [1] * 5
    for _, _, test in stratified_kfold(labels, 5, seed=0):
        assert sorted(np.asarray(labels)[test]) == [0, 1]


def test_kfold_paper_proportions():
    n = 1540
    counts = [round(0.2812 * n), round(0.4857 * n)]
    counts.append(n - sum(counts))
    labels = np.repeat([0, 1, 2], counts)
    glob = np.bincount(labels) / n
    for _, _, test in stratified_kfold(labels, 5, seed=0):
        props = np.bincount(labels[test], minlength=3) / len(test)
        assert np.all(np.abs(props - glob) <= 0.005)


@given(counts=st.lists(st.integers(2, 30), min_size=2, max_size=4), k=st.integers(2, 5),
       seed=st.integers(0, 1000))
def test_kfold_partition_and_stratification(counts, k, seed):
    counts = [max(c, k) for c in counts]
    labels = np.repeat(np.arange(len(counts)), counts)
    folds = stratified_kfold(labels, k, seed=seed)
    assert len(folds) == k
    tests = np.concatenate([f[2] for f in folds])
    assert sorted(tests.tolist()) == list(range(len(labels)))
    for train, val, test in folds:
        assert not (set(train) & set(val)) and not (set(train) & set(test)) and not (set(val) & set(test))
        assert len(train) + len(val) + len(test) == len(labels)
        assert len(train) > 0
        for c, n in enumerate(counts):
            assert abs(np.sum(labels[test] == c) - n / k) < 1 + 1e-9


def test_kfold_insufficient_class():
    with pytest.raises(ValidationError):
        stratified_kfold([0, 0, 0, 1], 3)


# ordering pairs ---------------------------------------------------------------

def test_pairs_link_consecutive_stages():
    stages = np.array([0, 1, 3, 0, 1, 2, 3])
    pairs = sample_ordering_pairs(stages, np.random.default_rng(0))
    assert len(pairs) == 5  # two CN anchors, two sMCI anchors, one pMCI; AD emits none
    assert np.all(stages[pairs[:, 1]] == stages[pairs[:, 0]] + 1)


def test_pairs_skip_missing_next_stage(caplog):
    caplog.set_level("DEBUG", logger="protomap.cohort")
    pairs = sample_ordering_pairs(np.array([0, 0, 3]), np.random.default_rng(0))
    assert pairs.shape == (0, 2)
    assert "no next-stage partner" in caplog.text


def test_pairs_partner_uniform():
    stages = np.array([0, 1, 1, 1])
    rng = np.random.default_rng(0)
    draws = 10_000
    counts = np.zeros(4)
    for _ in range(draws):
        pairs = sample_ordering_pairs(stages, rng)
        counts[pairs[pairs[:, 0] == 0, 1]] += 1
    p = counts[1:] / draws
    stderr = np.sqrt((1 / 3) * (2 / 3) / draws)
    assert np.all(np.abs(p - 1 / 3) < 3 * stderr)


@given(stages=st.lists(st.integers(0, 3), min_size=1, max_size=40), seed=st.integers(0, 99))
def test_pairs_property(stages, seed):
    stages = np.array(stages)
    pairs = sample_ordering_pairs(stages, np.random.default_rng(seed))
    assert np.all(stages[pairs[:, 1]] == stages[pairs[:, 0]] + 1)
    eligible = [i for i, s in enumerate(stages) if s < 3 and np.any(stages == s + 1)]
    assert sorted(pairs[:, 0].tolist()) == eligible


def test_stage_names_default():
    assert STAGES == ("CN", "sMCI", "pMCI", "AD")
