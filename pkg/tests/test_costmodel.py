import pytest
from hypothesis import given, settings, strategies as st

from posfree.costmodel import (
    COST_COLUMNS,
    PUBLISHED_TABLE2,
    SOFTMAX_FLOPS,
    TABLE2_SETTINGS,
    CostConfig,
    cost,
    cost_csv,
    cost_pair,
    flops,
    memory,
    param_count,
    scaling_table,
)
from posfree.errors import ConfigError

BASE = CostConfig()


def hand_attention_flops(L, d, l, h):
    return L * (6 * l * d * d + 2 * l * l * d + SOFTMAX_FLOPS * h * l * l + 2 * l * l * d)


def hand_adjacency_flops(L, d, l, r=None):
    gather = l * l if r is None else 2 * l * l * r
    return L * (gather + SOFTMAX_FLOPS * l * l + 2 * l * l * d)


class TestFlops:
    def test_hand_count(self):
        assert flops(BASE).flops == hand_attention_flops(6, 256, 512, 8)
        assert flops(BASE.with_(architecture="adjacency")).flops == hand_adjacency_flops(6, 256, 512)
        fac = BASE.with_(architecture="adjacency", adjacency_mode="factorized", rank=48)
        assert flops(fac).flops == hand_adjacency_flops(6, 256, 512, 48)

    def test_single_token(self):
        d, h = 16, 2
        report = flops(CostConfig(num_layers=1, hidden_dim=d, seq_len=1, heads=h))
        items = {k.split(".")[1]: v for k, v in report.flops_breakdown.items()}
        assert items["qkv_projection"] == 6 * d * d
        assert items["softmax"] == SOFTMAX_FLOPS * h
        assert report.flops == 6 * d * d + 4 * d + SOFTMAX_FLOPS * h

    def test_table2_ratio(self):
        tf, gnn = cost_pair(BASE)
        assert 1.5 <= tf.flops / gnn.flops <= 4.0

    def test_factorized_costs_more_flops_but_fewer_params(self):
        dense = BASE.with_(architecture="adjacency")
        fac = dense.with_(adjacency_mode="factorized", rank=48)
        assert flops(fac).flops > flops(dense).flops
        assert param_count(dense) - param_count(fac) == 6 * (60_000 ** 2 - 2 * 60_000 * 48)


class TestMemory:
    def test_hand_count(self):
        l, d, h, L = 512, 256, 8, 6
        assert memory(BASE).memory_bytes == 4 * (L * (4 * l * d + 2 * h * l * l) + l * d)
        assert memory(BASE.with_(architecture="adjacency")).memory_bytes == 4 * (L * (l * d + 2 * l * l) + l * d)

    def test_table2_ratio(self):
        tf, gnn = cost_pair(BASE)
        assert 3 <= tf.memory_bytes / gnn.memory_bytes <= 10

    def test_length_doubling(self):
        ratio = memory(BASE.with_(seq_len=1024)).memory_bytes / memory(BASE).memory_bytes
        assert 2 <= ratio <= 4
        for arch in ("attention", "adjacency"):
            c = BASE.with_(architecture=arch)
            assert memory(c.with_(seq_len=1024)).memory_bytes > 2 * memory(c).memory_bytes

    def test_bytes_per_scalar(self):
        assert memory(BASE.with_(bytes_per_scalar=8)).memory_bytes == 2 * memory(BASE).memory_bytes

    def test_params_not_in_memory(self):
        big_vocab = BASE.with_(vocab_size=120_000)
        assert memory(big_vocab).memory_bytes == memory(BASE).memory_bytes
        assert param_count(big_vocab) > param_count(BASE)


configs = st.builds(
    CostConfig,
    num_layers=st.integers(1, 8), hidden_dim=st.integers(1, 512), seq_len=st.integers(1, 2048),
    vocab_size=st.integers(64, 100_000), adjacency_mode=st.sampled_from(["dense", "factorized"]),
    rank=st.integers(1, 64), heads=st.integers(1, 16))


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(configs)
    def test_attention_dominates(self, cfg):
        tf, gnn = cost_pair(cfg.with_(adjacency_mode="dense"))
        assert tf.flops > gnn.flops
        assert tf.memory_bytes > gnn.memory_bytes

    @settings(max_examples=200, deadline=None)
    @given(configs, st.sampled_from(["attention", "adjacency"]),
           st.sampled_from(["seq_len", "hidden_dim", "num_layers"]), st.integers(1, 100))
    def test_monotone(self, cfg, arch, name, bump):
        a = cfg.with_(architecture=arch)
        b = a.with_(**{name: getattr(a, name) + bump})
        ra, rb = cost(a), cost(b)
        assert rb.flops >= ra.flops
        assert rb.memory_bytes >= ra.memory_bytes

    @settings(max_examples=100, deadline=None)
    @given(configs, st.sampled_from(["attention", "adjacency"]))
    def test_breakdown_sums(self, cfg, arch):
        r = cost(cfg.with_(architecture=arch))
        assert r.flops == sum(r.flops_breakdown.values())
        assert r.memory_bytes == sum(r.memory_breakdown.values())
        assert all(v > 0 for v in r.flops_breakdown.values())


class TestTable2:
    @pytest.mark.parametrize("d,l", TABLE2_SETTINGS)
    @pytest.mark.parametrize("mode", ["dense", "factorized"])
    def test_attention_dominates_every_row(self, d, l, mode):
        tf, gnn = cost_pair(BASE.with_(hidden_dim=d, seq_len=l, adjacency_mode=mode))
        assert tf.flops > gnn.flops and tf.memory_bytes > gnn.memory_bytes

    def test_published_rows_agree_on_direction(self):
        for tf_f, gnn_f, tf_m, gnn_m in PUBLISHED_TABLE2.values():
            assert tf_f > gnn_f and tf_m > gnn_m


class TestScaling:
    def test_self_consistent_budget(self):
        budget = memory(BASE).memory_bytes
        _, crossing = scaling_table(BASE, [128, 256, 512, 1024, 2048], budget)
        assert crossing["attention"] == 512
        gnn = crossing["adjacency"]
        assert gnn is None or gnn > 512

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e5, 1e10))
    def test_gnn_never_crosses_first(self, budget):
        # pointwise dominance; the two can tie on a coarse grid of lengths
        ls = [2 ** k for k in range(4, 14)]
        _, crossing = scaling_table(BASE, ls, budget)
        tf, gnn = crossing["attention"], crossing["adjacency"]
        inf = float("inf")
        if tf is not None:
            assert (gnn if gnn is not None else inf) >= tf

    def test_csv_columns_and_monotone(self):
        text, _ = scaling_table(BASE, [1024, 256, 512])
        lines = text.strip().splitlines()
        assert tuple(lines[0].split(",")) == COST_COLUMNS
        rows = [line.split(",") for line in lines[1:]]
        assert len(rows) == 6
        for arch in ("attention", "adjacency"):
            mems = [int(r[5]) for r in rows if r[0] == arch]
            assert [int(r[3]) for r in rows if r[0] == arch] == [256, 512, 1024]
            assert mems == sorted(mems)

    def test_empty(self):
        with pytest.raises(ConfigError):
            scaling_table(BASE, [])

    def test_single_config_two_rows(self):
        assert len(cost_csv(cost_pair(BASE)).strip().splitlines()) == 3


class TestValidation:
    @pytest.mark.parametrize("bad", [dict(seq_len=0), dict(rank=0), dict(heads=0), dict(architecture="mlp"),
                                     dict(vocab_size=10, rank=11)])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            CostConfig(**bad)
