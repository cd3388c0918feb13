import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, example, given, settings
from hypothesis import strategies as st

from feddif import dist
from feddif.dist import (
    DegeneratePartition, DiffusionChain, DistanceMetric, Dol, Dsi, InfeasibleOptimalDsi,
    closed_form_iid_distance, decrement, dirichlet_partition, distance_to_uniform,
    dol_from_variation, dol_update, feasible_size_lower_bound, fold_dols, iid_distance,
    max_distance, optimal_dsi, stratified_partition, variation_from_counts,
)

import oracles

METRICS = list(DistanceMetric)


def simplex(n_classes, min_value=0.0):
    return st.lists(st.floats(min_value, 1.0, allow_nan=False), min_size=n_classes,
                    max_size=n_classes).filter(lambda v: sum(v) > 1e-3).map(
        lambda v: np.asarray(v) / np.sum(v))


@st.composite
def dsis(draw, n_classes=None):
    c = n_classes or draw(st.integers(2, 5))
    return Dsi(draw(simplex(c)), draw(st.integers(1, 500)))


# ----------------------------------------------------------------- types

def test_dsi_rejects_off_simplex():
    with pytest.raises(ValueError):
        Dsi([0.6, 0.6], 10)
    with pytest.raises(ValueError):
        Dsi([1.2, -0.2], 10)
    with pytest.raises(ValueError):
        Dsi([0.5, 0.5], 0)


def test_dol_sentinel_must_be_zero():
    assert Dol.empty(3).is_empty
    with pytest.raises(ValueError):
        Dol([0.5, 0.5], 0)


def test_dsi_from_labels_matches_histogram():
    d = Dsi.from_labels([0, 1, 1, 1], 2)
    assert d.data_size == 4
    np.testing.assert_allclose(d.probs, [0.25, 0.75])
    np.testing.assert_allclose(d.counts, [1, 3])


def test_chain_bookkeeping():
    ch = DiffusionChain()
    ch.append(3, 10)
    ch.append(1, 5)
    assert ch.members == [3, 1] and ch.total_size == 15
    assert 3 in ch and 2 not in ch and len(ch) == 2
    assert not ch.has_duplicates
    ch.append(3, 10)
    assert ch.has_duplicates


# ------------------------------------------------------------ dol_update

def test_first_trainer_copies_dsi():
    out = dol_update(Dol.empty(2), Dsi([0.1, 0.9], 100))
    np.testing.assert_allclose(out.probs, [0.1, 0.9])
    assert out.chain_size == 100


def test_mixture_by_hand():
    out = dol_update(Dol([0.5, 0.5], 100), Dsi([0.1, 0.9], 100))
    np.testing.assert_allclose(out.probs, [0.3, 0.7], atol=1e-15)
    assert out.chain_size == 200


@given(dsis(), st.integers(1, 400))
def test_mixing_identical_distribution_is_noop(d, other_size):
    prev = Dol(d.probs, d.data_size)
    out = dol_update(prev, Dsi(d.probs, other_size))
    np.testing.assert_allclose(out.probs, d.probs, atol=1e-12)


@given(st.integers(2, 4).flatmap(lambda c: st.lists(dsis(c), min_size=1, max_size=8)))
def test_update_matches_exact_rationals(seq):
    dol = Dol.empty(seq[0].n_classes)
    exact, size = [Fraction(0)] * seq[0].n_classes, 0
    for d in seq:
        dol = dol_update(dol, d)
        exact, size = oracles.mix(exact, size, d.probs, d.data_size)
    assert dol.chain_size == size
    np.testing.assert_allclose(dol.probs, [float(x) for x in exact], atol=1e-12)


@given(st.integers(2, 4).flatmap(lambda c: st.lists(dsis(c), min_size=2, max_size=8)),
       st.data())
def test_update_is_associative(seq, data):
    cut = data.draw(st.integers(1, len(seq) - 1))
    whole = fold_dols(seq, seq[0].n_classes)
    left = fold_dols(seq[:cut], seq[0].n_classes)
    right = fold_dols(seq[cut:], seq[0].n_classes)
    grouped = dol_update(left, Dsi(right.probs, right.chain_size))
    np.testing.assert_allclose(grouped.probs, whole.probs, atol=1e-9)
    assert grouped.chain_size == whole.chain_size


# ------------------------------------------------------------- distances

def test_uniform_has_zero_distance():
    for m in METRICS:
        for c in (2, 3, 10):
            assert iid_distance(Dol(np.full(c, 1 / c), 5), m) == pytest.approx(0.0, abs=1e-15)


def test_frozen_distance_values():
    # Oracle values from tests/oracles.py.
    assert iid_distance(Dol([0.3, 0.7], 1)) == pytest.approx(0.28284271247461906, abs=1e-15)
    assert iid_distance(Dol([1.0, 0.0], 1), "kld") == pytest.approx(math.log(2), abs=1e-15)
    assert iid_distance(Dol([1.0, 0.0], 1), "jsd") == pytest.approx(0.31127812445913283, abs=1e-14)
    p = [0.2, 0.3, 0.5]
    assert iid_distance(Dol(p, 1), "w1l2") == pytest.approx(0.21602468994692867, abs=1e-14)
    assert iid_distance(Dol(p, 1), "kld") == pytest.approx(0.06895927460353615, abs=1e-14)
    assert iid_distance(Dol(p, 1), "jsd") == pytest.approx(0.024887904971002635, abs=1e-14)


@given(st.integers(2, 6).flatmap(simplex), st.sampled_from(METRICS))
def test_distance_agrees_with_oracle(p, metric):
    ref = {DistanceMetric.W1L2: oracles.l2_to_uniform, DistanceMetric.KLD: oracles.kld_to_uniform,
           DistanceMetric.JSD: oracles.jsd_to_uniform}[metric](list(p))
    assert distance_to_uniform(p, metric) == pytest.approx(max(ref, 0.0), abs=1e-12)


@given(st.integers(2, 6).flatmap(simplex), st.sampled_from(METRICS))
def test_distance_positive_off_uniform(p, metric):
    assume(np.max(np.abs(p - 1 / p.size)) > 1e-3)
    assert distance_to_uniform(p, metric) > 0


def test_kld_finite_with_empty_class():
    assert np.isfinite(distance_to_uniform([0.0, 0.0, 1.0], "kld"))


def test_jsd_bounded_by_one():
    for c in (2, 5, 50):
        assert 0 < max_distance(c, "jsd") <= 1


def test_untrained_model_has_no_distance():
    with pytest.raises(ValueError):
        iid_distance(Dol.empty(2))


def test_decrement_examples():
    a, b, c = Dol([0.6, 0.4], 1), Dol([0.5, 0.5], 1), Dol([0.3, 0.7], 1)
    assert decrement(a, b) == pytest.approx(0.1414213562373095, abs=1e-12)
    assert decrement(a, a) == 0.0
    assert decrement(b, c) == pytest.approx(-0.28284271247461906, abs=1e-12)


# ------------------------------------------------------------ optimal DSI

def test_optimal_dsi_example():
    prev = Dol([0.6, 0.4], 100)
    d = optimal_dsi(prev, 100, 2)
    np.testing.assert_allclose(d.probs, [0.4, 0.6], atol=1e-12)
    np.testing.assert_allclose(dol_update(prev, d).probs, [0.5, 0.5], atol=1e-12)


def test_optimal_dsi_three_class_matches_rationals():
    prev = Dol([0.2, 0.3, 0.5], 60)
    d = optimal_dsi(prev, 90, 3)
    np.testing.assert_allclose(d.probs, [19 / 45, 16 / 45, 2 / 9], atol=1e-12)


def test_optimal_dsi_infeasible_below_bound():
    with pytest.raises(InfeasibleOptimalDsi, match="infeasible optimal DSI"):
        optimal_dsi(Dol([0.6, 0.4], 100), 19, 2)
    optimal_dsi(Dol([0.6, 0.4], 100), 20, 2)


def test_optimal_dsi_from_uniform_is_uniform():
    for size in (1, 7, 100):
        np.testing.assert_allclose(optimal_dsi(Dol([0.25] * 4, 40), size, 4).probs, [0.25] * 4)


@pytest.mark.parametrize("probs,size,c,expected", [
    ([0.5, 0.5], 100, 2, 1),
    ([1 / 3] * 3, 30, 3, 1),
    ([0.6, 0.4], 100, 2, 20),
    ([1.0, 0.0], 50, 2, 50),
])
def test_feasible_bound_examples(probs, size, c, expected):
    assert feasible_size_lower_bound(Dol(probs, size), c) == expected


@settings(max_examples=200)
@given(st.integers(2, 5).flatmap(lambda c: dsis(c)), st.integers(0, 300))
def test_optimal_dsi_lands_on_uniform(d, slack):
    prev = Dol(d.probs, d.data_size)
    size = feasible_size_lower_bound(prev, d.n_classes) + slack
    out = dol_update(prev, optimal_dsi(prev, size, d.n_classes))
    assert iid_distance(out) <= 1e-12


@settings(max_examples=100)
@given(st.integers(2, 5).flatmap(lambda c: dsis(c)))
def test_bound_is_tight(d):
    prev = Dol(d.probs, d.data_size)
    lower = feasible_size_lower_bound(prev, d.n_classes)
    if lower > 1:
        exact = oracles.exact_optimum(list(d.probs), d.data_size, lower - 1)
        assert min(exact) < 0
    exact = oracles.exact_optimum(list(d.probs), d.data_size, lower)
    assert min(exact) >= -1e-9


def test_optimal_dsi_beats_grid():
    prev = Dol([0.6, 0.4], 100)
    best = decrement(prev, dol_update(prev, optimal_dsi(prev, 100, 2)))
    assert best >= oracles.best_grid_decrement([Fraction(3, 5), Fraction(2, 5)], 100, 100) - 1e-12
    assert best == pytest.approx(0.14142135623730948, abs=1e-12)


# ------------------------------------------------------------ closed form

def test_closed_form_examples():
    assert closed_form_iid_distance([3.0, 3.0, 3.0], 10) == 0.0
    assert closed_form_iid_distance([10, -10], 200) == pytest.approx(0.07071067811865475)


@given(st.integers(2, 5).flatmap(lambda c: st.lists(dsis(c), min_size=1, max_size=10)))
def test_closed_form_matches_replayed_trace(seq):
    c = seq[0].n_classes
    counts = np.zeros(c)
    dol = Dol.empty(c)
    for d in seq:
        counts += d.counts
        dol = dol_update(dol, d)
        phi = variation_from_counts(counts)
        assert closed_form_iid_distance(phi, dol.chain_size) == pytest.approx(
            iid_distance(dol), abs=1e-9)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=5), st.integers(200, 1000))
def test_closed_form_equals_distance_of_implied_dol(phi, size):
    phi = np.asarray(phi)
    probs = ((size - phi.sum()) / phi.size + phi) / size
    assume(np.all(probs >= 0))
    dol = dol_from_variation(phi, size)
    assert closed_form_iid_distance(phi, size) == pytest.approx(iid_distance(dol), abs=1e-9)


def test_full_coverage_reaches_universal_distribution():
    labels = np.repeat([0, 1, 2], 100)
    parts = dirichlet_partition(labels, 10, 0.3, np.random.default_rng(4))
    dol = fold_dols([d for _, d in parts], 3)
    assert iid_distance(dol) <= 1e-9


# ------------------------------------------------------------ partitions

def _check_cover(parts, n):
    allidx = np.concatenate([p for p, _ in parts])
    assert np.array_equal(np.sort(allidx), np.arange(n))


@given(st.integers(1, 12), st.floats(0.05, 100), st.integers(0, 2**31), st.integers(2, 4))
@example(n_parts=2, alpha=0.0625, seed=0, c=2)  # share underflow left the fit unconverged
@settings(max_examples=60, deadline=None)
def test_partition_is_disjoint_cover(n_parts, alpha, seed, c):
    labels = np.random.default_rng(seed).integers(0, c, 120)
    parts = dirichlet_partition(labels, n_parts, alpha, np.random.default_rng(seed), c)
    _check_cover(parts, labels.size)
    for idx, d in parts:
        np.testing.assert_allclose(d.probs, np.bincount(labels[idx], minlength=c) / idx.size)
        assert d.data_size == idx.size


def test_round_margins_repairs_a_poor_fit():
    # Column sums of m are 60/60 but the supplies are 54/66.
    m = np.array([[0.0, 60.0], [60.0, 0.0]])
    out = dist._round_margins(m, np.array([60, 60]), np.array([54, 66]))
    assert out.sum(axis=1).tolist() == [60, 60]
    assert out.sum(axis=0).tolist() == [54, 66]
    assert out.min() >= 0


def test_partition_single_part_is_whole_set():
    labels = np.array([0, 0, 0, 1])
    [(idx, d)] = dirichlet_partition(labels, 1, 0.5, np.random.default_rng(0))
    np.testing.assert_allclose(d.probs, [0.75, 0.25])
    assert idx.size == 4


def test_partition_deterministic():
    labels = np.repeat([0, 1], 50)
    a = dirichlet_partition(labels, 5, 0.5, np.random.default_rng(9))
    b = dirichlet_partition(labels, 5, 0.5, np.random.default_rng(9))
    for (ia, _), (ib, _) in zip(a, b):
        assert np.array_equal(ia, ib)


def test_partition_degenerate():
    with pytest.raises(DegeneratePartition, match="degenerate partition"):
        dirichlet_partition(np.array([0, 1]), 3, 1.0, np.random.default_rng(0))


def test_partition_rejects_bad_args():
    with pytest.raises(ValueError):
        dirichlet_partition(np.array([], dtype=int), 2, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        dirichlet_partition(np.array([0, 1]), 2, 0.0, np.random.default_rng(0))


def _deviations(alpha, n_seeds=20, per_part=100):
    labels = np.repeat([0, 1], 5 * per_part)
    out = []
    for seed in range(n_seeds):
        parts = dirichlet_partition(labels, 10, alpha, np.random.default_rng(seed))
        out.append([abs(d.probs[0] - 0.5) for _, d in parts])
    return np.asarray(out)


def test_near_iid_partition_is_close_to_uniform():
    # A per-part bound of 0.05 is broken by Dir(100, 100) noise alone
    # (std ~0.035), so check the typical part and a loose worst case.
    dev = _deviations(100.0)
    assert dev.mean() <= 0.05
    assert np.mean(dev <= 0.05) >= 0.75
    assert dev.max() <= 0.2
    # Spread is Beta(alpha, alpha) noise with the common-mode part removed by
    # the fixed class totals: var = (1 - 1/N) / (4 (2 alpha + 1)).
    expected = math.sqrt(0.25 / 201 * 0.9)
    assert np.std(np.concatenate([dev, -dev])) == pytest.approx(expected, rel=0.25)


def test_skewed_partition_has_dominated_part():
    labels = np.repeat([0, 1], 500)
    for seed in range(20):
        parts = dirichlet_partition(labels, 10, 0.1, np.random.default_rng(seed))
        assert max(d.probs.max() for _, d in parts) >= 0.9


def test_stratified_partition_is_balanced():
    labels = np.repeat([0, 1, 2], 40)
    parts = stratified_partition(labels, 10)
    _check_cover(parts, labels.size)
    for _, d in parts:
        np.testing.assert_allclose(d.probs, [1 / 3] * 3)
