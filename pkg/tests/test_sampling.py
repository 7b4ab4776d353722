import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from fedoms import rng as rngmod
from fedoms import sampling

RNG = np.random.default_rng(33)


def random_simplex(rng, k):
    p = rng.random(k) + 0.05
    return p / p.sum()


def empirical_inclusion(p, j, n, seed=0):
    rng = rngmod.stream(seed, rngmod.ROLE_TEST)
    counts = np.zeros(p.size)
    done = 0
    while done < n:
        chunk = min(200_000, n - done)
        idx = sampling.subsets_from_uniforms(p, j, rng.random((chunk, j)))
        np.add.at(counts, idx.ravel(), 1.0)
        done += chunk
    return counts / n


# --------------------------------------------------------------------------
# validation and basic structure
# --------------------------------------------------------------------------

def test_subset_size_validation():
    p = random_simplex(RNG, 5)
    rng = rngmod.stream(1, rngmod.ROLE_TEST)
    with pytest.raises(ValueError):
        sampling.sample_subset(p, 1, rng)
    with pytest.raises(ValueError):
        sampling.sample_subset(p, 6, rng)
    with pytest.raises(ValueError):
        sampling.sample_subset(p, 0, rng)
    out = sampling.sample_subset(p, 5, rng)  # J = K allowed
    assert sorted(out.ordered_indices.tolist()) == [0, 1, 2, 3, 4]


def test_degenerate_single_space():
    out = sampling.sample_subset(np.array([1.0]), 1, rngmod.stream(0, rngmod.ROLE_TEST))
    assert out.lead_index == 0
    np.testing.assert_array_equal(out.inclusion_probs, [1.0])
    with pytest.raises(ValueError):
        sampling.sample_subset(np.array([1.0]), 2, rngmod.stream(0, rngmod.ROLE_TEST))


def test_outcome_indices_distinct_lead_first():
    for _ in range(200):
        k = int(RNG.integers(2, 12))
        j = int(RNG.integers(2, k + 1))
        p = random_simplex(RNG, k)
        out = sampling.sample_subset(p, j, rngmod.stream(int(RNG.integers(1e9)), rngmod.ROLE_TEST))
        idx = out.ordered_indices
        assert len(set(idx.tolist())) == j
        assert out.lead_index == idx[0]
        assert np.all((0 <= idx) & (idx < k))


def test_sampling_consumes_exactly_j_uniforms():
    p = random_simplex(RNG, 6)
    a = rngmod.stream(77, rngmod.ROLE_TEST)
    b = rngmod.stream(77, rngmod.ROLE_TEST)
    sampling.sample_subset(p, 3, a)
    b.random(3)
    assert a.random() == b.random()


def test_sampling_is_deterministic_given_stream():
    p = random_simplex(RNG, 8)
    a = sampling.sample_subset(p, 4, rngmod.stream(5, rngmod.ROLE_SAMPLING, 2))
    b = sampling.sample_subset(p, 4, rngmod.stream(5, rngmod.ROLE_SAMPLING, 2))
    np.testing.assert_array_equal(a.ordered_indices, b.ordered_indices)


# --------------------------------------------------------------------------
# the sampling law
# --------------------------------------------------------------------------

def test_inclusion_probability_closed_form_values():
    p = np.full(10, 0.1)
    p[0] = 0.5
    p[1:] = 0.5 / 9
    got = sampling.inclusion_probabilities(p, 2)
    assert got[0] == pytest.approx((8.0 / 9.0) * 0.5 + 1.0 / 9.0)
    got_uniform = sampling.inclusion_probabilities(np.full(5, 0.2), 2)
    np.testing.assert_allclose(got_uniform, 0.4)
    np.testing.assert_allclose(sampling.inclusion_probabilities(random_simplex(RNG, 7), 7), 1.0)


def test_inclusion_matches_two_stage_law():
    # P[i in O] = p_i + (1 - p_i) (J-1)/(K-1), algebraically the closed form
    for _ in range(20):
        k = int(RNG.integers(2, 10))
        j = int(RNG.integers(2, k + 1))
        p = random_simplex(RNG, k)
        lhs = sampling.inclusion_probabilities(p, j)
        rhs = p + (1.0 - p) * (j - 1.0) / (k - 1.0)
        np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_empirical_inclusion_matches_formula():
    p = np.array([0.45, 0.3, 0.15, 0.06, 0.04])
    j = 2
    n = 200_000
    freq = empirical_inclusion(p, j, n, seed=4)
    want = sampling.inclusion_probabilities(p, j)
    se = np.sqrt(want * (1 - want) / n)
    assert np.all(np.abs(freq - want) <= 3.5 * se)


def test_lead_index_follows_p_chi_squared():
    p = np.array([0.4, 0.25, 0.2, 0.1, 0.05])
    n = 100_000
    u = rngmod.stream(9, rngmod.ROLE_TEST).random((n, 2))
    idx = sampling.subsets_from_uniforms(p, 2, u)
    counts = np.bincount(idx[:, 0], minlength=5)
    _, pval = stats.chisquare(counts, f_exp=p * n)
    assert pval > 0.001


def test_non_lead_uniform_over_complement():
    # condition on the lead: remaining slots hit the complement uniformly
    p = np.array([0.5, 0.3, 0.1, 0.1])
    n = 120_000
    u = rngmod.stream(11, rngmod.ROLE_TEST).random((n, 2))
    idx = sampling.subsets_from_uniforms(p, 2, u)
    mask = idx[:, 0] == 0
    counts = np.bincount(idx[mask, 1], minlength=4)[1:]
    _, pval = stats.chisquare(counts)
    assert pval > 0.001


def test_per_row_and_shared_probs_agree():
    k = 6
    p = random_simplex(RNG, k)
    u = rngmod.stream(21, rngmod.ROLE_TEST).random((500, 3))
    shared = sampling.subsets_from_uniforms(p, 3, u)
    tiled = sampling.subsets_from_uniforms(np.tile(p, (500, 1)), 3, u)
    np.testing.assert_array_equal(shared, tiled)


# --------------------------------------------------------------------------
# importance-weighted estimators
# --------------------------------------------------------------------------

def test_estimates_zero_off_subset_and_weighted_on_subset():
    p = np.array([0.5, 0.25, 0.25])
    out = sampling.SamplingOutcome(
        ordered_indices=np.array([2, 0]),
        inclusion_probs=sampling.inclusion_probabilities(p, 2),
    )
    est = sampling.estimate_losses(np.array([1.0, 3.0]), out)
    incl = sampling.inclusion_probabilities(p, 2)
    assert est[1] == 0.0
    assert est[2] == pytest.approx(1.0 / incl[2])
    assert est[0] == pytest.approx(3.0 / incl[0])

    grads = sampling.estimate_gradients(
        [np.array([1.0, 1.0]), np.array([-2.0])], out, dims=[1, 3, 2])
    np.testing.assert_allclose(grads[2], np.array([1.0, 1.0]) / incl[2])
    np.testing.assert_allclose(grads[0], np.array([-2.0]) / incl[0])
    np.testing.assert_array_equal(grads[1], np.zeros(3))


def test_loss_estimator_is_unbiased_monte_carlo():
    k, j = 5, 2
    p = np.array([0.35, 0.3, 0.2, 0.1, 0.05])
    true = np.array([1.0, 0.5, 2.0, 0.0, 3.0])
    n = 200_000
    u = rngmod.stream(13, rngmod.ROLE_TEST).random((n, j))
    idx = sampling.subsets_from_uniforms(p, j, u)
    incl = sampling.inclusion_probabilities(p, j)
    member = np.zeros((n, k))
    member[np.arange(n)[:, None], idx] = 1.0
    est = member * (true / incl)[None, :]
    mean = est.mean(axis=0)
    se = est.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(mean - true) <= 3.5 * np.maximum(se, 1e-12))


def test_estimator_range_bound():
    # importance weights never exceed (K-1)/(J-1), so the estimate of a loss
    # bounded by C stays within C (K-1)/(J-1)
    for _ in range(100):
        k = int(RNG.integers(2, 10))
        j = int(RNG.integers(2, k + 1))
        p = random_simplex(RNG, k)
        out = sampling.sample_subset(p, j, rngmod.stream(int(RNG.integers(1e9)), rngmod.ROLE_TEST))
        c = RNG.uniform(0, 1, size=j)  # losses bounded by 1
        est = sampling.estimate_losses(c, out)
        assert np.all(est <= (k - 1.0) / (j - 1.0) + 1e-9)


def test_estimate_losses_validation():
    out = sampling.SamplingOutcome(np.array([0, 1]), np.array([0.6, 0.6, 0.8]))
    with pytest.raises(ValueError):
        sampling.estimate_losses(np.array([1.0]), out)
    with pytest.raises(ValueError):
        sampling.estimate_losses(np.array([np.inf, 1.0]), out)
    with pytest.raises(ValueError):
        sampling.estimate_gradients([np.zeros(2)], out, dims=[2, 2, 2])


@settings(deadline=None, max_examples=100)
@given(st.integers(2, 9), st.data())
def test_subset_size_matches_request(k, data):
    j = data.draw(st.integers(2, k))
    seed = data.draw(st.integers(0, 2**31 - 1))
    p = np.full(k, 1.0 / k)
    out = sampling.sample_subset(p, j, rngmod.stream(seed, rngmod.ROLE_TEST))
    assert out.subset_size == j
    assert out.inclusion_probs.shape == (k,)
    assert np.all(out.inclusion_probs > 0) and np.all(out.inclusion_probs <= 1.0 + 1e-12)


# --------------------------------------------------------------------------
# grouping subset tables by space
# --------------------------------------------------------------------------

def _random_subset_table(rng, m, k, j):
    # rows mimic sampled subsets: j distinct indices each
    return np.stack([rng.permutation(k)[:j] for _ in range(m)])


def test_group_subsets_hand_example():
    idx = np.array([[3, 1], [0, 3], [3, 2], [1, 0]])
    groups = sampling.group_subsets(idx)
    np.testing.assert_array_equal(groups.touched, [0, 1, 2, 3])
    np.testing.assert_array_equal(groups.bounds, [0, 2, 4, 5, 8])
    np.testing.assert_array_equal(groups.rows, [1, 3, 0, 3, 2, 0, 1, 2])
    np.testing.assert_array_equal(groups.slots, [0, 1, 1, 0, 1, 0, 1, 0])
    assert groups.size == 4  # touched spaces
    assert groups.rows.size == groups.slots.size == idx.size


def test_group_subsets_matches_membership_scan():
    for _ in range(200):
        k = int(RNG.integers(2, 12))
        j = int(RNG.integers(2, k + 1))
        m = int(RNG.integers(1, 9))
        idx = _random_subset_table(RNG, m, k, j)
        groups = sampling.group_subsets(idx)

        present = np.unique(idx)
        np.testing.assert_array_equal(groups.touched, present)
        assert groups.bounds[0] == 0 and groups.bounds[-1] == idx.size
        assert np.all(np.diff(groups.bounds) >= 1)

        for seg, space in enumerate(groups.touched):
            lo, hi = groups.bounds[seg], groups.bounds[seg + 1]
            seg_rows = groups.rows[lo:hi]
            seg_slots = groups.slots[lo:hi]
            # every (row, slot) pair really points at this space
            np.testing.assert_array_equal(idx[seg_rows, seg_slots], space)
            # and the segment covers exactly the rows whose subset holds it
            want_rows = np.nonzero((idx == space).any(axis=1))[0]
            np.testing.assert_array_equal(seg_rows, want_rows)
            # ascending row order inside a segment keeps downstream
            # reductions byte-for-byte reproducible
            assert np.all(np.diff(seg_rows) > 0)

        np.testing.assert_array_equal(groups.space_ids(), groups.touched[groups.segment_of])


def test_group_subsets_rejects_flat_input():
    with pytest.raises(ValueError):
        sampling.group_subsets(np.array([0, 1, 2]))
