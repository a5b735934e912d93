import itertools
import math

import numpy as np
import pytest

from fuala.data import HospitalDataset, featurize_all
from fuala.errors import ValidationError
from fuala.federation import (
    AlgorithmKind,
    FederationConfig,
    HospitalNode,
    aggregate_mean,
    aggregate_weighted,
    initial_state,
    local_seed,
    make_derangement,
    make_permutation,
    protocol_rng,
    read_history_csv,
    run_round_fuala,
    run_training,
    save_heads,
    load_heads,
    select_fraction,
    update_sampling_weights,
    write_history_csv,
)
from fuala.learner import (
    Arch,
    LearnerConfig,
    flat_vector_as_params,
    init_model,
    params_as_flat_vector,
    train_epochs,
)
from fuala.metrics import ScoredSet, generalization_score
from fuala.transport import Bus, audit_privacy

from conftest import make_hospital

LEARNER = LearnerConfig(hidden_dim=4, epochs=2, seed=3)


def small_cohort(n_hospitals=4, n_records=24, vocab=16):
    return [make_hospital(h, n_records, vocab, seed=50 + h) for h in range(n_hospitals)]


# --- permutation ---

def test_permutation_single_element():
    assert make_permutation(1, protocol_rng(0)).tolist() == [0]


def test_permutation_deterministic_per_stream():
    assert np.array_equal(make_permutation(5, protocol_rng(4)), make_permutation(5, protocol_rng(4)))


def test_permutation_is_bijection():
    rng = protocol_rng(1)
    for _ in range(20):
        perm = make_permutation(6, rng)
        assert sorted(perm.tolist()) == list(range(6))


def test_derangement_has_no_fixed_points():
    rng = protocol_rng(2)
    for _ in range(50):
        perm = make_derangement(5, rng)
        assert not np.any(perm == np.arange(5))
    with pytest.raises(ValidationError):
        make_derangement(1, rng)


def test_permutation_uniformity_small():
    rng = protocol_rng(3)
    counts = {}
    n = 20_000
    for _ in range(n):
        key = tuple(make_permutation(3, rng).tolist())
        counts[key] = counts.get(key, 0) + 1
    assert len(counts) == 6
    for key, count in counts.items():
        assert count / n == pytest.approx(1 / 6, abs=0.01)


# --- selection ---

def test_select_all_when_c_equals_k():
    assert select_fraction(np.array([1.0, 2.0, 3.0]), 3, protocol_rng(0)) == frozenset({0, 1, 2})


def test_select_rejects_bad_input():
    with pytest.raises(ValidationError):
        select_fraction(np.array([1.0, 0.0]), 1, protocol_rng(0))
    with pytest.raises(ValidationError):
        select_fraction(np.array([1.0, 1.0]), 3, protocol_rng(0))


def test_select_dominant_weight_always_wins():
    h = np.array([1.0, 1e-12, 1e-12])
    rng = protocol_rng(5)
    hits = sum(0 in select_fraction(h, 1, rng) for _ in range(10_000))
    assert hits / 10_000 > 0.999


def test_select_uniform_frequencies():
    h = np.ones(4)
    rng = protocol_rng(6)
    counts = np.zeros(4)
    n = 20_000
    for _ in range(n):
        (i,) = select_fraction(h, 1, rng)
        counts[i] += 1
    assert np.allclose(counts / n, 0.25, atol=0.02)


def inclusion_probabilities(weights, c):
    """Exact inclusion probabilities of successive proportional draws."""
    k = len(weights)
    probs = np.zeros(k)
    for order in itertools.permutations(range(k), c):
        p = 1.0
        remaining = np.array(weights, dtype=float)
        for i in order:
            p *= remaining[i] / remaining.sum()
            remaining[i] = 0.0
        for i in set(order):
            probs[i] += p
    return probs


def test_select_matches_exact_inclusion_probabilities():
    weights = [0.5, 1.0, 2.0, 4.0]
    c = 2
    expected = inclusion_probabilities(weights, c)
    rng = protocol_rng(7)
    counts = np.zeros(4)
    n = 30_000
    for _ in range(n):
        for i in select_fraction(np.array(weights), c, rng):
            counts[i] += 1
    assert np.allclose(counts / n, expected, atol=0.01)


# --- weight update ---

def test_update_weights_formula():
    assert update_sampling_weights(np.array([0.5]), np.array([0.6])).tolist() == [1.1]


def test_update_weights_zero_scores_identity():
    h = np.array([0.2, 0.3])
    assert np.array_equal(update_sampling_weights(h, np.zeros(2)), h)


def test_update_weights_accumulates_by_induction():
    k = 3
    h = np.full(k, 1 / k)
    a = np.array([0.1, 0.5, 0.9])
    for _ in range(7):
        h = update_sampling_weights(h, a)
    assert np.allclose(h, 1 / k + 7 * a, atol=1e-12)


def test_update_weights_length_mismatch():
    with pytest.raises(ValidationError):
        update_sampling_weights(np.ones(2), np.ones(3))


# --- aggregation ---

def test_aggregate_mean_flat_arithmetic():
    arch = Arch(vocab_size=2, hidden_dim=1)
    p1 = flat_vector_as_params(np.array([1.0, 3.0, 0.0, 1.0, 2.0]), arch)
    p2 = flat_vector_as_params(np.array([3.0, 5.0, 2.0, 3.0, 4.0]), arch)
    mean = aggregate_mean([p1, p2])
    assert params_as_flat_vector(mean).tolist() == [2.0, 4.0, 1.0, 2.0, 3.0]


def test_aggregate_single_update_identity():
    params = init_model(Arch(4, 4), LearnerConfig(hidden_dim=4, seed=1))
    agg = aggregate_mean([params])
    assert np.array_equal(params_as_flat_vector(agg), params_as_flat_vector(params))


def test_aggregate_mean_of_copies():
    params = init_model(Arch(4, 4), LearnerConfig(hidden_dim=4, seed=2))
    agg = aggregate_mean([params] * 5)
    assert np.allclose(
        params_as_flat_vector(agg), params_as_flat_vector(params), atol=1e-12
    )


def test_aggregate_weighted_equal_weights_is_mean():
    arch = Arch(3, 2)
    rng = np.random.default_rng(0)
    updates = [flat_vector_as_params(rng.normal(size=arch.n_params), arch) for _ in range(3)]
    w = aggregate_weighted(updates, [1.0, 1.0, 1.0])
    m = aggregate_mean(updates)
    assert np.allclose(params_as_flat_vector(w), params_as_flat_vector(m), atol=1e-12)


def test_aggregate_weighted_degenerate_weight():
    arch = Arch(3, 2)
    rng = np.random.default_rng(1)
    updates = [flat_vector_as_params(rng.normal(size=arch.n_params), arch) for _ in range(2)]
    w = aggregate_weighted(updates, [1.0, 0.0])
    assert np.allclose(
        params_as_flat_vector(w), params_as_flat_vector(updates[0]), atol=1e-15
    )


def test_aggregate_weighted_arithmetic():
    arch = Arch(2, 1)
    zeros = flat_vector_as_params(np.zeros(5), arch)
    fours = flat_vector_as_params(np.full(5, 4.0), arch)
    out = aggregate_weighted([zeros, fours], [2.0, 6.0])
    assert np.allclose(params_as_flat_vector(out), 3.0, atol=1e-12)


def test_aggregate_weighted_all_zero_weights():
    arch = Arch(2, 1)
    updates = [flat_vector_as_params(np.zeros(5), arch)] * 2
    with pytest.raises(ValidationError):
        aggregate_weighted(updates, [0.0, 0.0])


def test_aggregate_empty():
    with pytest.raises(ValidationError):
        aggregate_mean([])


# --- rounds ---

def fuala_cfg(rounds, n_selected, seed=0, **kw):
    return FederationConfig(rounds=rounds, n_selected=n_selected, learner=LEARNER, seed=seed, **kw)


def test_degenerate_round_equals_train_epochs():
    cohort = small_cohort(n_hospitals=1)
    cfg = fuala_cfg(rounds=1, n_selected=1, seed=9)
    result = run_training(AlgorithmKind.FUALA, cohort, cfg)

    node = HospitalNode(cohort[0], 0)
    w0 = init_model(Arch(cohort[0].vocab_size, LEARNER.hidden_dim), LEARNER)
    expected = train_epochs(w0, (node._X, node._y), LEARNER, local_seed(9, 0, 0))
    assert np.array_equal(
        params_as_flat_vector(result.final_model), params_as_flat_vector(expected)
    )


def test_round_zero_scores_rate_the_initial_model():
    cohort = small_cohort(n_hospitals=3)
    cfg = fuala_cfg(rounds=1, n_selected=2, seed=4)
    result = run_training(AlgorithmKind.FUALA, cohort, cfg)
    a = result.history[0].gen_scores

    w0 = init_model(Arch(cohort[0].vocab_size, LEARNER.hidden_dim), LEARNER)
    # At round 0 every assigned model is w0, so a_k is w0 scored on the
    # evaluating hospital's data; the permutation only routes which dataset.
    nodes = [HospitalNode(d, i) for i, d in enumerate(cohort)]
    expected_scores = sorted(node.evaluate(w0) for node in nodes)
    assert sorted(a.tolist()) == pytest.approx(expected_scores, abs=1e-15)


def test_full_round_matches_scripted_replay():
    cohort = small_cohort(n_hospitals=4)
    cfg = fuala_cfg(rounds=1, n_selected=2, seed=21)
    nodes = [HospitalNode(d, i) for i, d in enumerate(cohort)]
    arch = Arch(cohort[0].vocab_size, LEARNER.hidden_dim)
    w0 = init_model(arch, LEARNER)

    bus = Bus()
    bus.register("F")
    for node in nodes:
        bus.register(node.actor_id)
    state = initial_state(w0, 4, cfg.seed)
    state2, artifacts = run_round_fuala(state, nodes, cfg, bus)

    # scripted replay using the module operations directly, same seeds
    rng = protocol_rng(cfg.seed)
    perm = make_permutation(4, rng)
    selected = select_fraction(np.full(4, 0.25), 2, rng)
    updates = {
        k: train_epochs(w0, (nodes[k]._X, nodes[k]._y), LEARNER, local_seed(cfg.seed, 0, k))
        for k in range(4)
    }
    a = np.zeros(4)
    for k in range(4):
        a[perm[k]] = nodes[k].evaluate(w0)
    expected_model = aggregate_mean([updates[k] for k in sorted(selected)])

    assert np.array_equal(state2.permutation, perm)
    assert state2.selected == selected
    assert np.array_equal(artifacts.eval_scores, a)
    assert np.array_equal(state2.h, 0.25 + a)
    assert np.array_equal(
        params_as_flat_vector(state2.current_model), params_as_flat_vector(expected_model)
    )
    for k in range(4):
        assert np.array_equal(
            params_as_flat_vector(state2.hospital_models[k]),
            params_as_flat_vector(updates[k]),
        )


def test_run_training_zero_rounds_returns_initial_model():
    cohort = small_cohort()
    result = run_training(AlgorithmKind.FUALA, cohort, fuala_cfg(rounds=0, n_selected=2))
    w0 = init_model(Arch(cohort[0].vocab_size, LEARNER.hidden_dim), LEARNER)
    assert np.array_equal(
        params_as_flat_vector(result.final_model), params_as_flat_vector(w0)
    )
    assert result.history == ()


def test_fuala_degenerate_equals_sequential_sgd():
    cohort = small_cohort(n_hospitals=1)
    cfg = fuala_cfg(rounds=2, n_selected=1, seed=13)
    node = HospitalNode(cohort[0], 0)
    result = run_training(AlgorithmKind.FUALA, cohort, cfg)

    params = init_model(Arch(cohort[0].vocab_size, LEARNER.hidden_dim), LEARNER)
    for t in range(2):
        params = train_epochs(params, (node._X, node._y), LEARNER, local_seed(13, t, 0))
    assert np.array_equal(
        params_as_flat_vector(result.final_model), params_as_flat_vector(params)
    )


def test_history_weights_accumulate_exactly():
    cohort = small_cohort()
    cfg = fuala_cfg(rounds=5, n_selected=2, seed=2)
    result = run_training(AlgorithmKind.FUALA, cohort, cfg)
    assert len(result.history) == 5
    k = len(cohort)
    h = np.full(k, 1.0 / k)
    for log in result.history:
        assert np.array_equal(log.weights_before, h)
        h = h + log.gen_scores
    # componentwise nondecreasing since a >= 0
    for earlier, later in zip(result.history, result.history[1:]):
        assert np.all(later.weights_before >= earlier.weights_before)


def test_run_training_deterministic():
    cohort = small_cohort()
    cfg = fuala_cfg(rounds=3, n_selected=2, seed=6)
    r1 = run_training(AlgorithmKind.FUALA, cohort, cfg)
    r2 = run_training(AlgorithmKind.FUALA, cohort, cfg)
    assert np.array_equal(
        params_as_flat_vector(r1.final_model), params_as_flat_vector(r2.final_model)
    )
    for l1, l2 in zip(r1.history, r2.history):
        assert np.array_equal(l1.gen_scores, l2.gen_scores)
        assert l1.selected == l2.selected


def test_fuala_heads_come_from_last_selected_round():
    cohort = small_cohort()
    cfg = fuala_cfg(rounds=3, n_selected=2, seed=8)
    result = run_training(AlgorithmKind.FUALA, cohort, cfg)
    assert len(result.hospital_heads) == 2

    all_heads = run_training(
        AlgorithmKind.FUALA, cohort, fuala_cfg(rounds=3, n_selected=2, seed=8, heads_from_all=True)
    )
    assert len(all_heads.hospital_heads) == len(cohort)


def test_fedavg_and_fuala_coincide_when_c_equals_k_and_sizes_equal():
    cohort = [make_hospital(h, 20, 16, seed=70 + h) for h in range(3)]
    cfg = fuala_cfg(rounds=2, n_selected=3, seed=5)
    fuala = run_training(AlgorithmKind.FUALA, cohort, cfg)
    fedavg = run_training(AlgorithmKind.FEDAVG, cohort, cfg)
    for log_a, log_b in zip(fuala.history, fedavg.history):
        assert log_a.selected == log_b.selected == frozenset({0, 1, 2})
    assert np.allclose(
        params_as_flat_vector(fuala.final_model),
        params_as_flat_vector(fedavg.final_model),
        atol=1e-12,
    )


def test_fedavg_trains_only_selected():
    cohort = small_cohort()
    cfg = fuala_cfg(rounds=3, n_selected=2, seed=1)
    result = run_training(AlgorithmKind.FEDAVG, cohort, cfg)
    for log in result.history:
        trained = {k for k in range(len(cohort)) if not math.isnan(log.local_losses[k])}
        assert trained == log.selected


def test_weighted_fedavg_round0_uniform_matches_fedavg_structure():
    cohort = small_cohort()
    cfg = fuala_cfg(rounds=2, n_selected=2, seed=3)
    result = run_training(AlgorithmKind.WEIGHTED_FEDAVG, cohort, cfg)
    assert len(result.history) == 2
    assert not result.hospital_heads
    # permutation-evaluation ran every round: all scores present
    for log in result.history:
        assert not np.isnan(log.gen_scores).any()


def test_central_ignores_selection_and_has_no_heads():
    cohort = small_cohort()
    cfg = fuala_cfg(rounds=2, n_selected=2, seed=3)
    result = run_training(AlgorithmKind.CENTRAL, cohort, cfg)
    assert not result.hospital_heads
    assert len(result.history) == 2
    assert result.transport_log.entries == []


def test_neutral_score_for_single_class_hospital():
    from conftest import make_record

    records = tuple(make_record(f"r{i}", [[i % 8]], label=0) for i in range(6))
    hospital = HospitalDataset(hospital_id=0, records=records, vocab_size=8)
    node = HospitalNode(hospital, 0)
    params = init_model(Arch(8, 4), LearnerConfig(hidden_dim=4, seed=0))
    assert node.evaluate(params) == 0.5


def test_hospital_evaluate_matches_generalization_score():
    cohort = small_cohort(n_hospitals=1)
    node = HospitalNode(cohort[0], 0)
    params = init_model(Arch(cohort[0].vocab_size, 4), LearnerConfig(hidden_dim=4, seed=2))
    X, y = featurize_all(cohort[0].records, cohort[0].vocab_size)
    from fuala.learner import scores

    expected = generalization_score(
        ScoredSet(scores=scores(params.body, params.head, X), labels=y.astype(int))
    )
    assert node.evaluate(params) == expected


def test_message_counts_per_algorithm():
    cohort = small_cohort()
    cfg = fuala_cfg(rounds=3, n_selected=2, seed=0)
    k = len(cohort)
    fuala = run_training(AlgorithmKind.FUALA, cohort, cfg)
    assert all(c == 4 * k for c in fuala.transport_log.count_per_round().values())
    fedavg = run_training(AlgorithmKind.FEDAVG, cohort, cfg)
    assert all(c == 2 * cfg.n_selected for c in fedavg.transport_log.count_per_round().values())
    weighted = run_training(AlgorithmKind.WEIGHTED_FEDAVG, cohort, cfg)
    assert all(c == 4 * k for c in weighted.transport_log.count_per_round().values())


def test_history_csv_round_trip_and_ledger(tmp_path):
    cohort = small_cohort()
    cfg = fuala_cfg(rounds=4, n_selected=2, seed=12)
    result = run_training(AlgorithmKind.FUALA, cohort, cfg)
    path = tmp_path / "history.csv"
    write_history_csv(result, str(path))
    rows = read_history_csv(str(path))
    assert len(rows) == 4 * len(cohort)

    # h_k^t == 1/K + sum of a_k over earlier rounds, bit-exactly
    k = len(cohort)
    by_hospital = {}
    for row in sorted(rows, key=lambda r: (r["hospital_id"], r["round"])):
        by_hospital.setdefault(row["hospital_id"], []).append(row)
    for rows_k in by_hospital.values():
        h = 1.0 / k
        for row in rows_k:
            assert row["h"] == h
            h = h + row["a"]


def test_heads_file_round_trip(tmp_path):
    cohort = small_cohort()
    result = run_training(AlgorithmKind.FUALA, cohort, fuala_cfg(rounds=2, n_selected=3, seed=2))
    path = tmp_path / "heads.json"
    save_heads(result.hospital_heads, str(path))
    loaded = load_heads(str(path))
    assert sorted(loaded) == sorted(result.hospital_heads)
    for key, head in result.hospital_heads.items():
        assert np.array_equal(loaded[key].as_flat(), head.as_flat())


def test_run_training_validates_selection_size():
    cohort = small_cohort(n_hospitals=2)
    with pytest.raises(ValidationError):
        run_training(AlgorithmKind.FUALA, cohort, fuala_cfg(rounds=1, n_selected=3))
