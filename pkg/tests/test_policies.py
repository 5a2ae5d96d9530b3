from __future__ import annotations

import math

import numpy as np
import pytest

from adaptive_kv.policies import (
    CompressionPolicy,
    PolicyAtom,
    PolicyContext,
    PolicyError,
    RetainedSet,
    apply_policy,
    cache_memory_cost,
    feasible_set,
    format_policy,
    full_policy,
    parse_policy,
    retained_indices,
    update_cumulative_scores,
)
from adaptive_kv.tokens import TokenClass

from conftest import make_annotations, random_context


def ctx_of(classes, prompt_len=None, scores=None):
    n = len(classes)
    return PolicyContext(
        annotations=make_annotations(classes),
        prompt_len=prompt_len if prompt_len is not None else n,
        current_len=n,
        cumulative_scores=np.zeros(n) if scores is None else np.asarray(scores, float),
    )


S, P, O = TokenClass.SPECIAL, TokenClass.PUNCTUATION, TokenClass.OTHER


def atom_policy(atom, **kw):
    return CompressionPolicy(frozenset({atom}), **kw)


def test_local_keeps_last_ceil_budget():
    ctx = ctx_of([O] * 10)
    got = retained_indices(atom_policy(PolicyAtom.LOCAL, r_l=0.3), ctx)
    assert got.indices == (7, 8, 9)


def test_frequent_top_half_by_cumulative_score():
    ctx = ctx_of([O] * 4, scores=[0.9, 0.05, 0.03, 0.02])
    # brute force: sort all four scores, take top ceil(0.5 * 4) = 2
    expected = sorted(
        sorted(range(4), key=lambda j: (-ctx.cumulative_scores[j], j))[:2]
    )
    got = retained_indices(atom_policy(PolicyAtom.FREQUENT, r_f=0.5), ctx)
    assert got.indices == tuple(expected) == (0, 1)


def test_frequent_ties_break_toward_lower_index():
    ctx = ctx_of([O] * 6, scores=[1.0, 2.0, 2.0, 2.0, 1.0, 1.0])
    got = retained_indices(atom_policy(PolicyAtom.FREQUENT, r_f=0.5), ctx)
    assert got.indices == (1, 2, 3)


def test_hybrid_union_of_atoms():
    classes = [S, O, O, O, O, P, O, O, O, O]
    ctx = ctx_of(classes)
    hybrid = CompressionPolicy(
        frozenset({PolicyAtom.SPECIAL, PolicyAtom.PUNCTUATION, PolicyAtom.LOCAL}),
        r_l=0.2,
    )
    assert retained_indices(hybrid, ctx).indices == (0, 5, 8, 9)


def test_full_retains_everything():
    ctx = ctx_of([O] * 7)
    assert retained_indices(full_policy(), ctx).indices == tuple(range(7))


def test_empty_class_sets_yield_empty_retained():
    ctx = ctx_of([O] * 5)
    assert len(retained_indices(atom_policy(PolicyAtom.SPECIAL), ctx)) == 0


def test_full_superset_of_every_policy():
    rng = np.random.default_rng(12)
    policies = feasible_set() + [
        atom_policy(PolicyAtom.PUNCTUATION),
        atom_policy(PolicyAtom.LOCAL, r_l=0.7),
    ]
    for _ in range(100):
        ctx = random_context(rng)
        full = set(retained_indices(full_policy(), ctx))
        for policy in policies:
            assert set(retained_indices(policy, ctx)) <= full


def test_union_commutative_idempotent_at_retained_level():
    rng = np.random.default_rng(13)
    a = CompressionPolicy(frozenset({PolicyAtom.SPECIAL, PolicyAtom.LOCAL}))
    b = CompressionPolicy(frozenset({PolicyAtom.FREQUENT}))
    for _ in range(50):
        ctx = random_context(rng)
        ab = retained_indices(a.union(b), ctx)
        ba = retained_indices(b.union(a), ctx)
        aa = retained_indices(a.union(a), ctx)
        assert ab.indices == ba.indices
        assert aa.indices == retained_indices(a, ctx).indices
        union = set(retained_indices(a, ctx)) | set(retained_indices(b, ctx))
        assert set(ab) == union


def test_candidates_restrict_selection_without_changing_budgets():
    ctx = ctx_of([O] * 10, scores=[9, 8, 7, 6, 5, 4, 3, 2, 1, 0])
    policy = atom_policy(PolicyAtom.FREQUENT, r_f=0.3)
    unrestricted = retained_indices(policy, ctx)
    assert unrestricted.indices == (0, 1, 2)
    restricted = retained_indices(policy, ctx, candidates=[2, 5, 7, 9])
    assert restricted.indices == (2, 5, 7)


def test_apply_policy_identity_empty_and_selection():
    K = np.arange(8.0).reshape(4, 2)
    V = -K
    all_idx = RetainedSet.of(range(4))
    K_C, V_C = apply_policy(K, V, all_idx)
    assert np.array_equal(K_C, K) and np.array_equal(V_C, V)
    K_E, V_E = apply_policy(K, V, RetainedSet.of([]))
    assert K_E.shape == (0, 2) and V_E.shape == (0, 2)
    K_S, _ = apply_policy(K, V, RetainedSet.of([0, 3]))
    assert np.array_equal(K_S, K[[0, 3]])


def test_apply_policy_out_of_range():
    K = np.zeros((4, 2))
    with pytest.raises(PolicyError, match="out of range"):
        apply_policy(K, K, RetainedSet.of([4]))


def test_reexpanding_by_position_reproduces_rows():
    rng = np.random.default_rng(21)
    K = rng.normal(size=(12, 3))
    V = rng.normal(size=(12, 3))
    retained = RetainedSet.of([0, 3, 4, 9])
    K_C, V_C = apply_policy(K, V, retained)
    for row, pos in enumerate(retained.indices):
        assert np.array_equal(K_C[row], K[pos])
        assert np.array_equal(V_C[row], V[pos])


def test_memory_cost_examples():
    assert cache_memory_cost(full_policy(), ctx_of([O] * 512)) == 512
    ctx = ctx_of([S, S, O, S, O])
    assert cache_memory_cost(atom_policy(PolicyAtom.SPECIAL), ctx) == 3


def test_nested_family_and_nondecreasing_cost():
    rng = np.random.default_rng(30)
    family = feasible_set(r_l=0.25, r_f=0.25)
    for _ in range(200):
        ctx = random_context(rng)
        sets = [set(retained_indices(p, ctx)) for p in family]
        costs = [cache_memory_cost(p, ctx) for p in family]
        for earlier, later in zip(sets, sets[1:]):
            assert earlier <= later
        assert costs == sorted(costs)


def test_hybrid_cost_at_least_each_atom():
    rng = np.random.default_rng(31)
    a = atom_policy(PolicyAtom.SPECIAL)
    b = atom_policy(PolicyAtom.LOCAL)
    for _ in range(50):
        ctx = random_context(rng)
        cost_union = cache_memory_cost(a.union(b), ctx)
        assert cost_union >= max(cache_memory_cost(a, ctx), cache_memory_cost(b, ctx))


def test_exact_budget_counts():
    # dyadic ratios make ceil(r * n) exact in float
    rng = np.random.default_rng(32)
    for _ in range(200):
        ctx = random_context(rng)
        r_l = int(rng.integers(1, 17)) / 16.0
        r_f = int(rng.integers(1, 17)) / 16.0
        local = retained_indices(atom_policy(PolicyAtom.LOCAL, r_l=r_l), ctx)
        assert len(local) == min(math.ceil(r_l * ctx.prompt_len), ctx.current_len)
        freq = retained_indices(atom_policy(PolicyAtom.FREQUENT, r_f=r_f), ctx)
        assert len(freq) == math.ceil(r_f * ctx.current_len)


def test_feasible_set_default_is_nested_five_policy_family():
    family = feasible_set()
    assert len(family) == 5
    assert family[0].atoms == {PolicyAtom.SPECIAL}
    assert family[1].atoms == {PolicyAtom.SPECIAL, PolicyAtom.PUNCTUATION}
    assert family[2].atoms == {
        PolicyAtom.SPECIAL,
        PolicyAtom.PUNCTUATION,
        PolicyAtom.FREQUENT,
    }
    assert family[3].atoms == {
        PolicyAtom.SPECIAL,
        PolicyAtom.PUNCTUATION,
        PolicyAtom.FREQUENT,
        PolicyAtom.LOCAL,
    }
    assert family[4].is_full


def test_feasible_set_order_ablation():
    family = feasible_set(
        atom_order=(
            PolicyAtom.SPECIAL,
            PolicyAtom.FREQUENT,
            PolicyAtom.LOCAL,
            PolicyAtom.PUNCTUATION,
        )
    )
    assert [sorted(a.value for a in p.atoms) for p in family[:-1]] == [
        ["special"],
        ["frequent", "special"],
        ["frequent", "local", "special"],
        ["frequent", "local", "punct", "special"],
    ]
    assert family[-1].is_full


def test_feasible_set_drop_ablation():
    family = feasible_set(drop={PolicyAtom.FREQUENT})
    assert len(family) == 4
    assert all(PolicyAtom.FREQUENT not in p.atoms for p in family)
    # dropping the first atom shifts the base, as in the removal ablations
    no_special = feasible_set(drop={PolicyAtom.SPECIAL})
    assert no_special[0].atoms == {PolicyAtom.PUNCTUATION}


def test_update_scores_conserves_mass_when_all_retained():
    ctx = ctx_of([O] * 4, scores=[0.3, 0.3, 0.2, 0.2])
    row = np.array([0.4, 0.3, 0.2, 0.1])
    out = update_cumulative_scores(ctx, row, RetainedSet.of(range(4)))
    assert out.current_len == 5
    assert out.cumulative_scores.sum() == pytest.approx(1.0 + 1.0)
    assert out.cumulative_scores[-1] == 0.0


def test_update_scores_empty_retained_appends_only():
    ctx = ctx_of([O] * 3, scores=[1.0, 2.0, 3.0])
    out = update_cumulative_scores(ctx, np.zeros(0), RetainedSet.of([]))
    assert out.cumulative_scores.tolist() == [1.0, 2.0, 3.0, 0.0]


def test_update_scores_two_steps_hand_summed():
    # three tokens, two decode steps; final scores are elementwise sums
    ctx = ctx_of([O] * 3, scores=[0.5, 0.25, 0.25])
    r1 = np.array([0.6, 0.3, 0.1])
    ctx = update_cumulative_scores(ctx, r1, RetainedSet.of([0, 1, 2]))
    r2 = np.array([0.5, 0.2, 0.2, 0.1])
    ctx = update_cumulative_scores(ctx, r2, RetainedSet.of([0, 1, 2, 3]))
    expected = [0.5 + 0.6 + 0.5, 0.25 + 0.3 + 0.2, 0.25 + 0.1 + 0.2, 0.0 + 0.1, 0.0]
    assert ctx.cumulative_scores == pytest.approx(expected)


def test_update_scores_frozen_for_evicted_positions():
    ctx = ctx_of([O] * 4, scores=[5.0, 1.0, 1.0, 1.0])
    out = update_cumulative_scores(ctx, np.array([0.7, 0.3]), RetainedSet.of([1, 3]))
    assert out.cumulative_scores.tolist() == [5.0, 1.7, 1.0, 1.3, 0.0]


def test_update_scores_length_mismatch():
    ctx = ctx_of([O] * 3)
    with pytest.raises(PolicyError, match="one score per retained"):
        update_cumulative_scores(ctx, np.zeros(3), RetainedSet.of([0, 1]))


def test_policy_invariants():
    with pytest.raises(PolicyError, match="at least one atom"):
        CompressionPolicy(frozenset())
    with pytest.raises(PolicyError, match="full cannot be combined"):
        CompressionPolicy(frozenset({PolicyAtom.FULL, PolicyAtom.LOCAL}))
    with pytest.raises(PolicyError, match="r_l"):
        CompressionPolicy(frozenset({PolicyAtom.LOCAL}), r_l=0.0)
    with pytest.raises(PolicyError, match="r_f"):
        CompressionPolicy(frozenset({PolicyAtom.FREQUENT}), r_f=1.5)


def test_policy_string_round_trips():
    texts = [
        "full",
        "special",
        "special+punct",
        "special+punct+frequent(r_f=0.3)+local(r_l=0.3)",
        "frequent(r_f=0.15)",
        "local(r_l=0.5)",
    ]
    for text in texts:
        policy = parse_policy(text)
        assert format_policy(policy) == text
    # order-insensitive parse, canonical re-render
    assert format_policy(parse_policy("local(r_l=0.3)+special")) == (
        "special+local(r_l=0.3)"
    )


def test_policy_string_round_trips_random():
    rng = np.random.default_rng(44)
    atoms = [
        PolicyAtom.SPECIAL,
        PolicyAtom.PUNCTUATION,
        PolicyAtom.FREQUENT,
        PolicyAtom.LOCAL,
    ]
    for _ in range(100):
        chosen = [a for a in atoms if rng.random() < 0.5] or [PolicyAtom.SPECIAL]
        policy = CompressionPolicy(
            frozenset(chosen),
            r_l=round(float(rng.uniform(0.05, 1.0)), 3),
            r_f=round(float(rng.uniform(0.05, 1.0)), 3),
        )
        parsed = parse_policy(format_policy(policy))
        assert parsed.atoms == policy.atoms
        if PolicyAtom.LOCAL in policy.atoms:
            assert parsed.r_l == policy.r_l
        if PolicyAtom.FREQUENT in policy.atoms:
            assert parsed.r_f == policy.r_f


def test_parse_policy_errors():
    with pytest.raises(PolicyError, match="unknown policy atom"):
        parse_policy("special+average")
    with pytest.raises(PolicyError, match="bad ratio"):
        parse_policy("local(r_l=abc)")
    with pytest.raises(PolicyError, match="not valid"):
        parse_policy("special(r_f=0.3)")
