import numpy as np
import pytest

from taxossm.errors import ConfigError, ShapeError, TaxonomyConflictError
from taxossm.records import BarcodeRecord, N_RANKS, TaxonomicLabel, make_label
from taxossm.seqdata import SynthConfig, synth_generate
from taxossm.taxonomy import (
    Taxonomy,
    build_taxonomy,
    class_weights,
    lift_species_probs,
    shared_ancestor_depth,
    smooth_target,
    truncate_to_known,
)

from conftest import toy_records


# ---------------------------------------------------------------------------
# building


def test_build_toy_counts(toy_taxonomy):
    assert toy_taxonomy.class_counts() == [1, 1, 1, 1, 1, 2, 3]
    for r in range(N_RANKS):
        m = toy_taxonomy.lift_matrix(r)
        assert np.array_equal(m.sum(axis=1), np.ones(3))


def test_build_partial_label_contributes_to_shallow_ranks():
    records = toy_records() + [BarcodeRecord("p", "ACGT", make_label("k", "p", "c", "o", "f", "g1"))]
    taxo = build_taxonomy(records)
    assert taxo.freq_per_rank[5][taxo.index_per_rank[5]["g1"]] == 3
    assert taxo.class_counts()[6] == 3  # no new species registered


def test_build_rejects_conflicting_parentage():
    records = [
        BarcodeRecord("a", "ACGT", make_label("k", "p", "c", "o", "f1", "g1", "s1")),
        BarcodeRecord("b", "ACGT", make_label("k", "p", "c", "o", "f2", "g1", "s2")),
    ]
    with pytest.raises(TaxonomyConflictError) as err:
        build_taxonomy(records)
    assert "f1" in str(err.value) and "f2" in str(err.value)


def test_build_rejects_prefix_violation():
    bad = TaxonomicLabel(("k", None, "c", None, None, None, None))
    with pytest.raises(TaxonomyConflictError):
        build_taxonomy([BarcodeRecord("x", "ACGT", bad)])


def test_ancestor_paths(toy_taxonomy):
    ia = toy_taxonomy.index_per_rank[6]["A"]
    ic = toy_taxonomy.index_per_rank[6]["C"]
    assert toy_taxonomy.ancestor(6, ia, 5) == toy_taxonomy.index_per_rank[5]["g1"]
    assert toy_taxonomy.ancestor(6, ic, 5) == toy_taxonomy.index_per_rank[5]["g2"]
    assert toy_taxonomy.ancestor_path(6, ia) == [0, 0, 0, 0, 0, 0, ia]


def test_taxonomy_json_round_trip(toy_taxonomy):
    back = Taxonomy.from_json(toy_taxonomy.to_json())
    assert back.names_per_rank == toy_taxonomy.names_per_rank
    assert all(np.array_equal(a, b) for a, b in zip(back.parent, toy_taxonomy.parent))
    assert all(np.array_equal(a, b)
               for a, b in zip(back.freq_per_rank, toy_taxonomy.freq_per_rank))
    assert np.array_equal(back.lift_matrix(5), toy_taxonomy.lift_matrix(5))


# ---------------------------------------------------------------------------
# class weights


def _weights_for(freqs):
    records = []
    for i, f in enumerate(freqs):
        for j in range(f):
            records.append(BarcodeRecord(f"r{i}_{j}", "ACGT", make_label(f"k{i}")))
    taxo = build_taxonomy(records)
    return class_weights(taxo).per_rank[0]


def test_weights_worked_example():
    w = _weights_for([1, 4])
    assert np.allclose(w, [4 / 3, 2 / 3], atol=1e-12)


def test_weights_equal_frequencies_are_one():
    assert np.allclose(_weights_for([5, 5, 5]), 1.0)


def test_weights_preserve_inverse_sqrt_ratios():
    w = _weights_for([1, 4, 9])
    assert np.allclose(w / w[2], [3.0, 1.5, 1.0])  # ratios 6:3:2
    assert abs(w.mean() - 1.0) < 1e-12


def test_weights_reject_zero_frequency(toy_taxonomy):
    toy_taxonomy.freq_per_rank[6][0] = 0
    with pytest.raises(ConfigError):
        class_weights(toy_taxonomy)


# ---------------------------------------------------------------------------
# smoothing


def test_smooth_none_is_one_hot(toy_taxonomy):
    tgt = smooth_target(toy_taxonomy, toy_records()[0].label, "none", 0.3)
    assert tgt.mask == (True,) * 7
    assert np.array_equal(tgt.per_rank[6], [1.0, 0.0, 0.0])
    assert np.array_equal(tgt.per_rank[5], [1.0, 0.0])


def test_smooth_hierarchical_toy_values(toy_taxonomy):
    # A and B share the genus (s=6), C only the family (s=5): mass 0.3 split 6:5
    tgt = smooth_target(toy_taxonomy, toy_records()[0].label, "hierarchical", 0.3)
    expected = np.array([0.7, 0.3 * 6 / 11, 0.3 * 5 / 11])
    assert np.abs(tgt.per_rank[6] - expected).max() < 1e-12
    lifted = tgt.per_rank[5]
    assert np.abs(lifted - np.array([0.7 + 0.3 * 6 / 11, 0.3 * 5 / 11])).max() < 1e-12
    assert abs(lifted.sum() - 1.0) < 1e-12
    assert tgt.true_index[6] == 0 and tgt.true_index[5] == 0


def test_smooth_standard_splits_uniformly(toy_taxonomy):
    tgt = smooth_target(toy_taxonomy, toy_records()[0].label, "standard", 0.3)
    assert np.abs(tgt.per_rank[6] - np.array([0.7, 0.15, 0.15])).max() < 1e-12


def test_smooth_epsilon_zero_is_bitwise_one_hot(toy_taxonomy):
    label = toy_records()[1].label
    base = smooth_target(toy_taxonomy, label, "none", 0.0)
    for mode in ("standard", "hierarchical"):
        tgt = smooth_target(toy_taxonomy, label, mode, 0.0)
        for r in range(N_RANKS):
            assert np.array_equal(tgt.per_rank[r], base.per_rank[r])


def test_smooth_partial_label_masks_deeper_ranks(toy_taxonomy):
    tgt = smooth_target(toy_taxonomy, make_label("k", "p", "c"), "hierarchical", 0.2)
    assert tgt.mask == (True, True, True, False, False, False, False)
    assert tgt.per_rank[6] is None
    assert np.array_equal(tgt.per_rank[2], [1.0])  # single class: nowhere to smooth


def test_smooth_monotone_in_shared_ancestor_depth(toy_taxonomy):
    tgt = smooth_target(toy_taxonomy, toy_records()[0].label, "hierarchical", 0.4)
    q = tgt.per_rank[6]
    sB = shared_ancestor_depth(toy_taxonomy, 6, 1, 0)
    sC = shared_ancestor_depth(toy_taxonomy, 6, 2, 0)
    assert sB > sC
    assert q[1] > q[2]


def test_smooth_rejects_bad_inputs(toy_taxonomy):
    with pytest.raises(ConfigError):
        smooth_target(toy_taxonomy, toy_records()[0].label, "hierarchical", 1.0)
    with pytest.raises(ConfigError):
        smooth_target(toy_taxonomy, make_label("nope"), "none", 0.0)
    with pytest.raises(ConfigError):
        smooth_target(toy_taxonomy, toy_records()[0].label, "fancy", 0.1)


def _random_taxonomy_and_labels(seed):
    rng = np.random.default_rng(seed)
    fanouts = tuple(int(rng.integers(1, 3)) for _ in range(5)) + (
        int(rng.integers(1, 4)), int(rng.integers(2, 4)))
    records = synth_generate(SynthConfig(
        rank_fanouts=fanouts, base_length=20, length_jitter=0,
        samples_per_species=2, seed=seed,
        label_dropout_per_rank=(0, 0, 0, 0.1, 0.1, 0.1, 0.2)))
    labelled = [r for r in records if r.label.depth > 0]
    return build_taxonomy(records), labelled, rng


def test_smooth_targets_sum_to_one_over_random_taxonomies():
    checked = 0
    seed = 0
    while checked < 1000:
        taxo, labelled, rng = _random_taxonomy_and_labels(seed)
        seed += 1
        for rec in labelled:
            mode = ("none", "standard", "hierarchical")[checked % 3]
            eps = float(rng.uniform(0.0, 0.9))
            tgt = smooth_target(taxo, rec.label, mode, eps)
            for r in range(N_RANKS):
                if tgt.mask[r]:
                    assert abs(tgt.per_rank[r].sum() - 1.0) < 1e-9
                    assert tgt.per_rank[r].min() >= 0.0
            checked += 1
            if checked >= 1000:
                break


# ---------------------------------------------------------------------------
# lift consistency (brute force over species multiplicities)


def brute_force_rank_target(taxo, rank, label, epsilon):
    """Rank-r hierarchical target built directly: every species under each
    rank-r class keeps its shared-ancestor-depth share of the epsilon mass."""
    y_species = taxo.index_per_rank[6][label.ranks[6]]
    n_species = taxo.n_classes(6)
    s = np.array([0.0 if c == y_species else shared_ancestor_depth(taxo, 6, c, y_species)
                  for c in range(n_species)])
    if s.sum() > 0:
        q_species = epsilon * s / s.sum()
    else:
        q_species = np.full(n_species, epsilon / max(n_species - 1, 1))
    q_species[y_species] = 1.0 - epsilon
    out = np.zeros(taxo.n_classes(rank))
    for c in range(n_species):
        out[taxo.ancestor(6, c, rank)] += q_species[c]
    return out


def test_lift_consistency_on_toy(toy_taxonomy):
    label = toy_records()[0].label
    tgt = smooth_target(toy_taxonomy, label, "hierarchical", 0.3)
    for r in range(N_RANKS):
        direct = brute_force_rank_target(toy_taxonomy, r, label, 0.3)
        assert np.abs(tgt.per_rank[r] - direct).max() < 1e-12


def test_lift_consistency_on_random_taxonomies():
    for seed in range(5):
        taxo, labelled, _ = _random_taxonomy_and_labels(seed + 100)
        for rec in labelled:
            if rec.label.depth < N_RANKS:
                continue
            tgt = smooth_target(taxo, rec.label, "hierarchical", 0.25)
            for r in range(N_RANKS):
                direct = brute_force_rank_target(taxo, r, rec.label, 0.25)
                assert np.abs(tgt.per_rank[r] - direct).max() < 1e-12


# ---------------------------------------------------------------------------
# lifting species probabilities


def test_lift_one_hot_gives_ancestor_path(toy_taxonomy):
    probs = np.array([0.0, 1.0, 0.0])  # species B
    for mode in ("sum", "argmax_path"):
        lifted = lift_species_probs(toy_taxonomy, probs, mode)
        assert np.array_equal(lifted[5], [1.0, 0.0])  # genus g1
        assert np.array_equal(lifted[6], probs)
        assert np.array_equal(lifted[0], [1.0])


def test_lift_uniform_prob_sum(toy_taxonomy):
    lifted = lift_species_probs(toy_taxonomy, np.full(3, 1 / 3), "sum")
    assert np.abs(lifted[5] - np.array([2 / 3, 1 / 3])).max() < 1e-12


def test_lift_modes_can_disagree(toy_taxonomy):
    probs = np.array([0.4, 0.35, 0.25])
    by_sum = lift_species_probs(toy_taxonomy, probs, "sum")
    assert np.abs(by_sum[5] - np.array([0.75, 0.25])).max() < 1e-12
    by_path = lift_species_probs(toy_taxonomy, probs, "argmax_path")
    assert np.array_equal(by_path[5], [1.0, 0.0])


def test_lift_preserves_mass(toy_taxonomy, rng):
    for _ in range(20):
        p = rng.random(3)
        p /= p.sum()
        for vec in lift_species_probs(toy_taxonomy, p, "sum"):
            assert abs(vec.sum() - 1.0) < 1e-12


def test_lift_argmax_path_is_consistent():
    taxo, _, rng = _random_taxonomy_and_labels(7)
    n = taxo.n_classes(6)
    for _ in range(20):
        p = rng.random(n)
        p /= p.sum()
        lifted = lift_species_probs(taxo, p, "argmax_path")
        idxs = [int(v.argmax()) for v in lifted]
        for r in range(1, N_RANKS):
            assert int(taxo.parent[r][idxs[r]]) == idxs[r - 1]


def test_lift_rejects_bad_inputs(toy_taxonomy):
    with pytest.raises(ShapeError):
        lift_species_probs(toy_taxonomy, np.array([0.5, 0.5]), "sum")
    with pytest.raises(ConfigError):
        lift_species_probs(toy_taxonomy, np.array([0.5, 0.5, 0.0]) * 1.5, "sum")


# ---------------------------------------------------------------------------
# unknown-class truncation helper


def test_truncate_to_known(toy_taxonomy):
    unseen = make_label("k", "p", "c", "o", "f", "g1", "Z")
    assert truncate_to_known(toy_taxonomy, unseen).depth == 6
    alien = make_label("other")
    assert truncate_to_known(toy_taxonomy, alien).depth == 0
    known = toy_records()[2].label
    assert truncate_to_known(toy_taxonomy, known) == known
