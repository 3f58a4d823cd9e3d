import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from protomap import autodiff as ad
from protomap.adpen import (AdpenConfig, OrderingHead, PrototypeGrid, SomSchedule, Topology,
                            VaeModel, adpen_from_dict, adpen_to_dict, bmu_index, encode,
                            finetune_som, kl_divergence, load_adpen, neighborhood_weights,
                            ordering_loss, ordering_loss_t, quantization_error, radius,
                            reconstruction_loss_t, save_adpen, som_loss, topo_distances,
                            topographic_error, train_adpen, vae_loss)
from protomap.autodiff import Tensor
from protomap.cohort import ValidationError, SyntheticSpec, generate_cohort

from conftest import SMALL_ADPEN
import oracles


def _copy_model(result):
    return adpen_from_dict(adpen_to_dict(result.model, result.model.vae.n_stages))


# encoder / KL / VAE loss ----------------------------------------------------

def test_encode_inference_mode_returns_mean():
    vae = VaeModel(4, rng=np.random.default_rng(0))
    c = np.array([0, 1, 0, 0, 0.9, 0.7])
    lp = encode(vae, c)
    np.testing.assert_array_equal(lp.h, lp.mu)
    assert lp.h.shape == (3,)


def test_encode_sampling_is_seeded():
    vae = VaeModel(4, rng=np.random.default_rng(0))
    c = np.array([0, 1, 0, 0, 0.9, 0.7])
    a = encode(vae, c, np.random.default_rng(5), sample=True).h
    b = encode(vae, c, np.random.default_rng(5), sample=True).h
    np.testing.assert_array_equal(a, b)


def test_encode_vanishing_variance():
    vae = VaeModel(4, rng=np.random.default_rng(0))
    vae.logvar_head.weight.data[:] = 0.0
    vae.logvar_head.bias.data[:] = -40.0
    c = np.tile([1, 0, 0, 0, 0.95, 0.7], (100_000, 1))
    h = encode(vae, c, np.random.default_rng(0), sample=True).h
    assert h.var(axis=0).max() < 1e-6


def test_kl_examples():
    assert kl_divergence([0.0], [0.0]) == 0.0
    assert kl_divergence([1.0], [0.0]) == pytest.approx(0.5)


def test_kl_shape_mismatch():
    with pytest.raises(ValidationError):
        kl_divergence([0.0, 1.0], [0.0])


@given(mu=arrays(np.float64, 3, elements=st.floats(-3, 3)),
       lv=arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_kl_nonnegative(mu, lv):
    kl = kl_divergence(mu, lv)
    assert kl >= -1e-12
    if kl < 1e-12:
        np.testing.assert_allclose(mu, 0, atol=1e-5)
        np.testing.assert_allclose(lv, 0, atol=1e-5)


def test_reconstruction_floor_is_zero():
    c = np.array([[0, 0, 1, 0, 0.8, 0.7]])
    logits = np.concatenate([c[:, :4] * 1e3, np.log(c[:, 4:] / (1 - c[:, 4:]))], axis=1)
    loss = reconstruction_loss_t(Tensor(logits), c, 4).item()
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert kl_divergence(np.zeros(3), np.zeros(3)) == 0.0


def test_vae_loss_sums_over_batch():
    vae = VaeModel(4, rng=np.random.default_rng(0))
    batch = np.array([[1, 0, 0, 0, 0.97, 0.71], [0, 0, 0, 1, 0.7, 0.8]])
    assert vae_loss(vae, np.vstack([batch, batch])) == pytest.approx(2 * vae_loss(vae, batch), rel=1e-12)
    with pytest.raises(ValidationError):
        vae_loss(vae, np.zeros((0, 6)))


def test_decoder_outputs_are_valid():
    vae = VaeModel(4, rng=np.random.default_rng(3))
    out = vae.decode(np.random.default_rng(0).normal(size=(50, 3)) * 5)
    np.testing.assert_allclose(out[:, :4].sum(axis=1), 1.0, atol=1e-9)
    assert np.all((out[:, 4:] >= 0) & (out[:, 4:] <= 1))


# ordering -------------------------------------------------------------------

def _linear_head(w, b=0.0):
    head = OrderingHead(len(w))
    head.layer.weight.data = np.array([w], dtype=float)
    head.layer.bias.data = np.array([b])
    return head


def test_ordering_equal_projection_gives_half():
    head = _linear_head([1.0, 0.0, 0.0])
    a = np.array([[0.5, 1.0, 0.0], [2.0, 0.0, 0.0]])
    b = np.array([[0.5, -1.0, 3.0], [2.0, 1.0, 1.0]])
    assert ordering_loss(head, a, b) == pytest.approx(1.0)


def test_ordering_limit_goes_to_zero():
    head = _linear_head([1000.0, 0.0, 0.0])
    assert ordering_loss(head, np.array([[-1.0, 0, 0]]), np.array([[1.0, 0, 0]])) < 1e-12


@given(a=arrays(np.float64, (4, 3), elements=st.floats(-2, 2)),
       b=arrays(np.float64, (4, 3), elements=st.floats(-2, 2)),
       w=arrays(np.float64, 3, elements=st.floats(-2, 2)))
def test_ordering_scale_invariant_for_linear_head(a, b, w):
    if np.any(np.linalg.norm(a - b, axis=1) < 1e-3):
        return
    head = _linear_head(w)
    assert ordering_loss(head, 2 * a, 2 * b) == pytest.approx(ordering_loss(head, a, b), abs=1e-12)
    assert ordering_loss(head, a, b, bounded=False) == pytest.approx(
        ordering_loss(head, 2 * a, 2 * b, bounded=False), abs=1e-9)


def test_ordering_skips_coincident_pairs():
    head = _linear_head([1.0, 0.0, 0.0])
    h = Tensor(np.array([[1.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]]), requires_grad=True)
    out = ordering_loss_t(head, h, np.array([[0, 1], [0, 2]]))
    assert out.item() == pytest.approx(1 / (1 + math.exp(-1.0)))
    assert ordering_loss_t(head, h, np.array([[0, 1]])) is None


# grid primitives --------------------------------------------------------------

def test_bmu_examples():
    P = np.random.default_rng(0).normal(size=(10, 3)) + 10.0
    assert bmu_index(P[3], P) == 3
    P[2], P[7] = [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]
    assert bmu_index(np.zeros(3), P) == 2


@settings(max_examples=200)
@given(K=st.integers(1, 100), seed=st.integers(0, 10_000), dup=st.booleans())
def test_bmu_matches_exhaustive_scan(K, seed, dup):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(K, 3))
    if dup and K > 2:
        P[K - 1] = P[0]  # forces an exact tie, resolved to the lower index
    h = P[0] + 1e-9 if dup else rng.normal(size=3)
    assert bmu_index(h, P) == oracles.bmu(h.tolist(), P.tolist())


def test_topo_distance_examples():
    grid = Topology("grid2d", (5, 20))
    beta = 1 * 20 + 2
    unit = 3 * 20 + 5
    d = topo_distances(beta, grid)
    assert d[beta] == 0 and d[unit] == 5
    assert topo_distances(0, Topology("chain", (64,)))[63] == 63


def test_topology_validation_and_coords():
    with pytest.raises(ValidationError):
        Topology("grid2d", (5,))
    with pytest.raises(ValidationError):
        Topology("hex", (5, 5))
    coords = Topology("grid3d", (2, 3, 4)).coords()
    assert len({tuple(c) for c in coords}) == 24
    with pytest.raises(ValidationError):
        PrototypeGrid(Topology("grid2d", (2, 2)), np.zeros((5, 3)))


def test_radius_examples():
    s = SomSchedule(10.0, 0.5, 100)
    assert radius(s) == 10.0
    s.t = 100
    assert radius(s) == 0.5
    s.t = 50
    assert radius(s) == pytest.approx(math.sqrt(5.0), rel=1e-15)


@given(gmax=st.floats(0.5, 20), ratio=st.floats(0.01, 1.0), T=st.integers(1, 1000))
def test_radius_bounded_and_monotone(gmax, ratio, T):
    s = SomSchedule(gmax, gmax * ratio, T)
    prev = math.inf
    for t in np.linspace(0, T, 7).astype(int):
        s.t = int(t)
        g = radius(s)
        assert gmax * ratio * (1 - 1e-12) <= g <= gmax * (1 + 1e-12)
        assert g <= prev * (1 + 1e-12)
        prev = g


def test_neighbourhood_examples():
    assert neighborhood_weights(np.array([0.0]), 2.0)[0] == 1.0
    assert abs(neighborhood_weights(np.array([2.0]), 2.0)[0] - math.exp(-0.5)) < 1e-12
    with pytest.raises(ValidationError):
        neighborhood_weights(np.array([1.0]), 0.0)


@given(gamma=st.floats(0.1, 10), deltas=st.lists(st.integers(0, 30), min_size=2, max_size=10))
def test_neighbourhood_properties(gamma, deltas):
    d = np.array(sorted(set(deltas)), dtype=float)
    w = neighborhood_weights(d, gamma)
    assert np.all((w > 0) | (d > 0)) and np.all(w <= 1)
    assert np.all((w == 1) == (d == 0))
    assert np.all(np.diff(w) <= 0)
    nonzero = w > 0
    assert np.all(np.diff(w[nonzero]) < 0)


def test_som_loss_zero_when_prototypes_coincide():
    h = np.array([[0.3, -0.1, 0.7]])
    grid = PrototypeGrid(Topology("chain", (4,)), np.repeat(h, 4, axis=0))
    assert som_loss(Tensor(h), grid, 1.0).item() == 0.0


def test_som_loss_small_radius_is_quantization_sum():
    rng = np.random.default_rng(0)
    grid = PrototypeGrid(Topology("grid2d", (3, 3)), rng.normal(size=(9, 3)))
    h = rng.normal(size=(6, 3))
    expected = quantization_error(h, grid) * len(h)
    assert som_loss(Tensor(h), grid, 1e-3).item() == pytest.approx(expected, rel=1e-12)


def test_som_step_moves_bmu_towards_sample():
    rng = np.random.default_rng(0)
    grid = PrototypeGrid(Topology("grid2d", (3, 3)), rng.normal(size=(9, 3)))
    h = rng.normal(size=(1, 3))
    beta = bmu_index(h[0], grid)
    before = np.linalg.norm(h[0] - grid.prototypes[beta])
    opt = ad.Adam([grid.P])
    ad.backprop(som_loss(Tensor(h), grid, 1.0))
    opt.step(1e-3)
    assert np.linalg.norm(h[0] - grid.prototypes[beta]) < before


def test_quantization_and_topographic_error_hand_cases():
    grid = PrototypeGrid(Topology("chain", (3,)), np.array([[0.0], [1.0], [2.0]]))
    h = np.array([[0.1], [1.9], [1.0]])
    assert quantization_error(h, grid) == pytest.approx((0.01 + 0.01 + 0.0) / 3)
    assert topographic_error(h, grid) == 0.0  # each second-best unit is a neighbour
    swapped = PrototypeGrid(Topology("chain", (3,)), np.array([[0.0], [2.0], [1.0]]))
    assert topographic_error(np.array([[0.1]]), swapped) == 1.0


# training ---------------------------------------------------------------------

def test_zero_lr_leaves_everything_unchanged(small_cohort):
    cfg = dataclasses.replace(SMALL_ADPEN, lr=0.0, epochs=1)
    one = train_adpen(small_cohort, cfg).model
    three = train_adpen(small_cohort, dataclasses.replace(cfg, epochs=3)).model
    for a, b in zip(one.parameters(), three.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_training_is_deterministic(small_cohort):
    cfg = dataclasses.replace(SMALL_ADPEN, epochs=5)
    a, b = train_adpen(small_cohort, cfg), train_adpen(small_cohort, cfg)
    assert a.log.rows == b.log.rows
    np.testing.assert_array_equal(a.model.grid.prototypes, b.model.grid.prototypes)


def test_iteration_counter_advances_per_step(small_adpen):
    sched = small_adpen.model.schedule
    assert sched.t == sched.T == SMALL_ADPEN.epochs * SMALL_ADPEN.n_batches
    assert radius(sched) == SMALL_ADPEN.gamma_min


def test_training_log_columns(small_adpen, tmp_path):
    log = small_adpen.log
    assert len(log.rows) == SMALL_ADPEN.epochs
    assert {"epoch", "gamma", "vae", "order", "som", "total", "qe"} <= set(log.rows[0])
    log.to_csv(tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert len(lines) == SMALL_ADPEN.epochs + 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(small_cohort):
    cfg = dataclasses.replace(SMALL_ADPEN, epochs=2, lr=1e300)
    with pytest.raises(ad.TrainingError):
        train_adpen(small_cohort, cfg)


def test_finetune_zero_epochs_is_noop(small_adpen, small_cohort):
    model = _copy_model(small_adpen)
    before = model.grid.prototypes.copy()
    assert finetune_som(model, small_cohort, epochs=0).rows == []
    np.testing.assert_array_equal(model.grid.prototypes, before)


def test_finetune_freezes_vae_and_keeps_topology(small_adpen, small_cohort):
    model = _copy_model(small_adpen)
    checksum = model.vae_checksum()
    head = [p.data.copy() for p in model.head.parameters()]
    mu = model.latents(small_cohort.clinical)
    te_before = topographic_error(mu, model.grid)
    log = finetune_som(model, small_cohort, epochs=30)
    assert model.vae_checksum() == checksum
    for a, b in zip(head, model.head.parameters()):
        np.testing.assert_array_equal(a, b.data)
    assert log.rows[-1]["te"] <= te_before + 0.02


def test_checkpoint_round_trip(small_adpen, small_cohort, tmp_path):
    path = tmp_path / "adpen.json"
    save_adpen(small_adpen.model, path)
    loaded = load_adpen(path)
    c = small_cohort.clinical
    np.testing.assert_array_equal(loaded.latents(c), small_adpen.model.latents(c))
    np.testing.assert_array_equal(loaded.projection(c), small_adpen.model.projection(c))
    np.testing.assert_array_equal(loaded.grid.prototypes, small_adpen.model.grid.prototypes)
    assert loaded.grid.topology == small_adpen.model.grid.topology
    assert loaded.schedule == small_adpen.model.schedule
    assert loaded.config == small_adpen.model.config


def test_checkpoint_rejects_foreign_format():
    with pytest.raises(ValidationError):
        adpen_from_dict({"format": "other"})


def test_config_dict_round_trip():
    cfg = AdpenConfig(dims=(4, 4), gamma_max=3.0)
    assert AdpenConfig.from_dict(cfg.to_dict()) == cfg
    assert AdpenConfig().resolved_gamma_max() == 10.0


def test_partial_cohort_still_trains():
    # only CN and sMCI present: ordering pairs come from the stages that exist
    cohort = generate_cohort(SyntheticSpec(counts=(8, 8, 8, 8), seed=1)).subset(range(16))
    result = train_adpen(cohort, dataclasses.replace(SMALL_ADPEN, epochs=2))
    assert np.isfinite(result.log.rows[-1]["total"])
