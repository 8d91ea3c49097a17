import random
from fractions import Fraction
from math import floor

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipeshift.cluster import (
    MIB,
    GpuSpec,
    ModelSpec,
    PPConfig,
    diff_configs,
    max_blocks,
    validate_pp_config,
)

from helpers import make_gpu, make_model, random_config_pair


def fig3_configs():
    c_a = PPConfig([(1, (1, 2)), (2, (3, 4)), (3, (5, 6))])
    c_b = PPConfig([(1, (1, 1)), (2, (2, 3)), (3, (4, 6))])
    return c_a, c_b


class TestValidate:
    def test_valid_three_gpu_six_layer(self):
        model = make_model(num_layers=6, k=1)
        cluster = [make_gpu(i) for i in (1, 2, 3)]
        c_a, _ = fig3_configs()
        assert validate_pp_config(c_a, model, cluster) == []

    def test_overlapping_ranges(self):
        model = make_model(num_layers=6, k=1)
        cluster = [make_gpu(i) for i in (1, 2, 3)]
        cfg = PPConfig([(1, (1, 2)), (2, (2, 3)), (3, (4, 6))])
        violations = validate_pp_config(cfg, model, cluster)
        assert any("overlap" in v for v in violations)

    def test_range_not_multiple_of_k(self):
        model = make_model(num_layers=8, k=4)
        cluster = [make_gpu(1), make_gpu(2)]
        cfg = PPConfig([(1, (1, 6)), (2, (7, 8))])
        violations = validate_pp_config(cfg, model, cluster)
        assert any("multiple" in v for v in violations)

    def test_gap_detected(self):
        model = make_model(num_layers=6, k=1)
        cluster = [make_gpu(1), make_gpu(2)]
        cfg = PPConfig([(1, (1, 2)), (2, (4, 6))])
        assert any("gap" in v for v in validate_pp_config(cfg, model, cluster))

    def test_missing_gpu(self):
        model = make_model(num_layers=6, k=1)
        cluster = [make_gpu(1), make_gpu(2), make_gpu(3)]
        cfg = PPConfig([(1, (1, 3)), (2, (4, 6))])
        assert any("no layer range" in v for v in validate_pp_config(cfg, model, cluster))


class TestMaxBlocks:
    def test_degenerate_identity(self):
        # M=100 units, u=1, L=1, W=0, P=1 unit: granularity=k* P with k=1
        gpu = GpuSpec(id=1, mem_total=100, mem_bandwidth=1, prefill_cost=1,
                      decode_cost=1, alloc_granularity=1)
        model = ModelSpec(num_layers=1, layer_weight_bytes=0,
                          token_kv_bytes_per_layer=1, stacking_factor=1)
        assert max_blocks(gpu, 1, model, 1.0) == 100

    def test_alg1_formula_example(self):
        # 80 GiB at u=0.9 with 40 layers of 800 MiB and 2 MiB pages -> 521
        gpu = GpuSpec(id=1, mem_total=81920 * MIB, mem_bandwidth=1,
                      prefill_cost=1, decode_cost=1, alloc_granularity=2 * MIB)
        model = ModelSpec(num_layers=40, layer_weight_bytes=800 * MIB,
                          token_kv_bytes_per_layer=8 * 1024, stacking_factor=1)
        expected = floor(
            (Fraction(81920 * MIB) * Fraction(0.9) - 40 * 800 * MIB)
            / (40 * Fraction(2 * MIB))
        )
        assert expected == 521
        assert max_blocks(gpu, 40, model, 0.9) == expected

    def test_infeasible_when_weights_exceed_budget(self):
        gpu = GpuSpec(id=1, mem_total=10, mem_bandwidth=1, prefill_cost=1,
                      decode_cost=1, alloc_granularity=1)
        model = ModelSpec(num_layers=5, layer_weight_bytes=3,
                          token_kv_bytes_per_layer=1, stacking_factor=1)
        assert max_blocks(gpu, 5, model, 1.0) is None

    def test_monotone_non_increasing_in_layers(self):
        gpu = make_gpu(mem_mib=8192)
        model = make_model(num_layers=16, k=1, weight_mib=128)
        values = [max_blocks(gpu, layers, model, 0.9) for layers in range(1, 17)]
        for a, b in zip(values, values[1:]):
            assert (b is None) or (a is not None and a >= b)


class TestDiffConfigs:
    def test_fig3_worked_example(self):
        c_a, c_b = fig3_configs()
        c_int, m_add, m_del, m_mig = diff_configs(c_a, c_b)
        assert c_int == {1: {1, 2}, 2: {2, 3, 4}, 3: {4, 5, 6}}
        assert m_add == {2: {2}, 3: {4}}
        assert m_del == {1: {2}, 2: {4}}
        assert m_mig == {(1, 2): {2}, (2, 3): {4}}

    def test_identity(self):
        c_a, _ = fig3_configs()
        c_int, m_add, m_del, m_mig = diff_configs(c_a, c_a)
        assert m_add == {} and m_del == {} and m_mig == {}
        assert c_int == c_a.as_layer_sets()

    def test_two_gpu_hand_trace(self):
        cur = PPConfig([(1, (1, 4)), (2, (5, 8))])
        tgt = PPConfig([(1, (1, 2)), (2, (3, 8))])
        _, m_add, m_del, m_mig = diff_configs(cur, tgt)
        assert m_mig == {(1, 2): {3, 4}}
        assert m_add == {2: {3, 4}}
        assert m_del == {1: {3, 4}}


@st.composite
def config_pairs(draw):
    n_gpus = draw(st.integers(2, 4))
    k = draw(st.sampled_from([1, 2, 4]))
    groups = draw(st.integers(n_gpus, 10))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = random.Random(seed)
    cur, tgt = random_config_pair(rng, n_gpus, groups, k)
    return cur, tgt


@given(config_pairs())
@settings(max_examples=200, deadline=None)
def test_diff_set_identities(pair):
    cur, tgt = pair
    c_int, m_add, m_del, m_mig = diff_configs(cur, tgt)
    cur_sets, tgt_sets = cur.as_layer_sets(), tgt.as_layer_sets()
    for g in cur_sets:
        assert cur_sets[g] | m_add.get(g, set()) == c_int[g]
        assert c_int[g] - m_del.get(g, set()) == tgt_sets[g]
    # every migrated layer lands in exactly one add-set, and vice versa
    mig_union: set[int] = set()
    for (src, dst), layers in m_mig.items():
        assert src != dst
        assert layers <= m_add[dst]
        assert layers <= cur_sets[src]
        assert not (mig_union & layers)
        mig_union |= layers
    add_union = set().union(*m_add.values()) if m_add else set()
    assert mig_union == add_union


@given(config_pairs())
@settings(max_examples=200, deadline=None)
def test_diff_swap_symmetry(pair):
    cur, tgt = pair
    _, m_add, m_del, m_mig = diff_configs(cur, tgt)
    _, r_add, r_del, r_mig = diff_configs(tgt, cur)
    assert m_add == r_del
    assert m_del == r_add
    assert {(d, s): layers for (s, d), layers in m_mig.items()} == r_mig


def test_diff_requires_same_gpu_set():
    cur = PPConfig([(1, (1, 4)), (2, (5, 8))])
    tgt = PPConfig([(1, (1, 4)), (3, (5, 8))])
    with pytest.raises(ValueError):
        diff_configs(cur, tgt)
