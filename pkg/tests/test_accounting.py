import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fatnet.accounting import (
    LayerSpec, Submodel, budget, count_flops, count_params, diff_budgets, format_csv, layer_group, layer_table,
)
from fatnet.model import PRESETS, build_preset, conv_submodel


def closed_form(cfg, res=224):
    """Hand-written totals for the default (refined, interaction) layout."""
    c1, c2 = cfg.stem_channels
    params = 27 * c1 + 2 * c1 + 9 * c1 * c2 + 2 * c2 + 2 * (9 * c2 * c2 + 2 * c2) + c2 * c2 + c2 + 2 * c2
    h = res // 2
    flops = h * h * c1 * 27
    h //= 2
    flops += h * h * (c2 * c1 * 9 + 2 * c2 * c2 * 9 + c2 * c2)
    for s in range(4):
        c, k, n = cfg.channels[s], cfg.fasa_kernels[s], cfg.pool_units[s]
        kc = cfg.cpe_kernels[s]
        for b in range(cfg.blocks[s]):
            ds = s < 3 and b == cfg.blocks[s] - 1
            out = cfg.channels[s + 1] if ds else c
            hw = h * h
            params += c * kc * kc + c + 2 * c  # cpe, norm1
            params += c * c + c  # q
            params += n * (25 * c + 2 * c + c * c + c) + 9 * c + 2 * c  # pool
            params += 2 * c * c + 2 * c + c * k * k + c + c * c + c  # kv, local, proj
            params += 2 * c + 4 * c * c + 4 * c + 4 * c * 25 + 4 * c + 4 * c * out + out  # norm2, ffn
            flops += hw * c * kc * kc + hw * c * c
            p = h
            for _ in range(n):
                p //= 2
                flops += p * p * (c * 25 + c * c)
            flops += p * p * c * 9 + p * p * 2 * c * c
            flops += 2 * hw * p * p * c + hw * c * k * k + hw * c * c
            ho = h // 2 if ds else h
            flops += hw * 4 * c * c + ho * ho * (4 * c * 25 + 4 * c * out)
            if ds:
                params += 9 * c + c + c * out + out
                flops += ho * ho * (9 * c + c * out)
        h //= 2
    c4 = cfg.channels[3]
    params += 2 * c4 + c4 * cfg.num_classes + cfg.num_classes
    flops += c4 * cfg.num_classes
    return params, flops


# exact counts under the MAC convention, frozen after agreeing with closed_form
FROZEN = {
    "B0": (4_662_728, 762_343_200),
    "B1": (8_063_968, 1_255_373_568),
    "B2": (13_900_936, 2_152_610_816),
    "B3": (30_338_184, 4_688_819_456),
    "B3-ST": (30_298_840, 4_665_254_400),
}

TARGETS = {"B0": (4.5e6, 0.7e9), "B1": (7.8e6, 1.2e9), "B2": (13.5e6, 2.0e9), "B3": (29e6, 4.4e9),
           "B3-ST": (29e6, 4.7e9)}


@pytest.mark.parametrize("name", list(PRESETS))
def test_counts_match_closed_form(name):
    cfg = build_preset(name)
    assert (count_params(cfg), count_flops(cfg)) == closed_form(cfg) == FROZEN[name]


@pytest.mark.parametrize("res", [32, 64, 192, 256])
def test_closed_form_other_resolutions(res):
    cfg = build_preset("B1")
    assert count_flops(cfg, res) == closed_form(cfg, res)[1]


@pytest.mark.parametrize("name", list(PRESETS))
def test_budgets_within_ten_percent(name):
    params, flops = FROZEN[name]
    tp, tf = TARGETS[name]
    assert abs(params - tp) <= 0.1 * tp
    assert abs(flops - tf) <= 0.1 * tf


def test_layer_examples():
    assert LayerSpec("l", "linear", (4,), (8,), bias=True).params == 40
    assert LayerSpec("d", "dwconv", (8, 5, 5), (8, 5, 5), kernel=3, groups=8, bias=True).params == 80
    assert LayerSpec("c", "conv", (4, 8, 8), (8, 8, 8)).flops == 2048
    assert LayerSpec("a", "attention", (8, 2, 2), (8, 2, 2), heads=1, kv_tokens=2).flops == 128
    bn = LayerSpec("bn", "norm", (6, 2, 2), (6, 2, 2), norm="batch")
    assert bn.params == 12 and bn.flops == 0
    assert len(bn.param_entries()) == 4
    assert LayerSpec("e", "elementwise", (3, 4, 4), (3, 2, 2)).params == 0
    with pytest.raises(ValueError):
        LayerSpec("x", "pool", (1,), (1,))
    with pytest.raises(ValueError):
        LayerSpec("n", "norm", (1,), (1,))


def test_attention_flops_are_per_head_sum():
    # heads split channels, so the total does not depend on the head count
    one = LayerSpec("a", "attention", (8, 4, 4), (8, 4, 4), heads=1, kv_tokens=4)
    two = LayerSpec("a", "attention", (8, 4, 4), (8, 4, 4), heads=2, kv_tokens=4)
    assert one.flops == two.flops == 2 * 16 * 4 * 8


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(list(PRESETS)), st.integers(1, 8), st.integers(1, 8))
def test_params_resolution_free_flops_monotone(name, a, b):
    cfg = build_preset(name)
    lo, hi = sorted((32 * a, 32 * b))
    assert sum(s.params for s in cfg.layer_specs(lo)) == sum(s.params for s in cfg.layer_specs(hi))
    assert count_flops(cfg, lo) <= count_flops(cfg, hi)


@pytest.mark.parametrize("name", list(PRESETS))
def test_conv_submodel_quadratic(name):
    sub = conv_submodel(build_preset(name))
    assert count_flops(sub, 224) == 4 * count_flops(sub, 112)
    assert all(s.kind in ("conv", "dwconv") for s in sub.layer_specs(112))


def test_diff_identical_is_zero():
    b = budget(build_preset("B0"))
    d = diff_budgets(b, b)
    assert d.is_zero() and d.rows == []


def test_ablation_deltas():
    base = budget(build_preset("B0"))
    cat = diff_budgets(base, budget(build_preset("B0", fusion="cat-linear")))
    assert (cat.total.d_params, cat.total.d_flops) == (299_520, 52_985_856)
    assert abs(cat.total.d_params - 0.3e6) <= 0.5 * 0.3e6
    assert abs(cat.total.d_flops - 0.05e9) <= 0.5 * 0.05e9
    assert all(".fasa" in r.group for r in cat.rows)
    cpe = diff_budgets(base, budget(build_preset("B0", cpe=False)))
    assert (cpe.total.d_params, cpe.total.d_flops) == (-94_784, -16_194_304)
    assert abs(cpe.total.d_params + 0.1e6) <= 0.5 * 0.1e6
    assert abs(cpe.total.d_flops + 0.02e9) <= 0.5 * 0.02e9
    assert "stage1.cpe" in {r.group for r in cpe.rows}
    text = cat.format_text()
    assert "total" in text and "+299520" in text


def test_layer_group_names():
    assert layer_group("stages.2.blocks.4.fasa.pool.units.0.dw") == "stage3.fasa"
    assert layer_group("stem.conv1") == "stem"
    assert layer_group("head.fc") == "head"


def test_budget_groups_sum_to_total():
    b = budget(build_preset("B2"), 192)
    assert sum(p for p, _ in b.groups.values()) == b.params
    assert sum(f for _, f in b.groups.values()) == b.flops


def test_tables():
    sub = Submodel("s", lambda r: [LayerSpec("x.conv", "conv", (2, r, r), (4, r, r), kernel=3, bias=True)])
    text = layer_table(sub.layer_specs(4))
    assert text.splitlines()[0].split() == ["layer", "kind", "params", "flops"]
    assert text.splitlines()[-1].split() == ["TOTAL", "76", "1152"]
    assert layer_table(sub.layer_specs(4), as_csv=True) == "layer,kind,params,flops\nx.conv,conv,76,1152\n"
    assert format_csv(["a"], [["x,y"]]) == 'a\n"x,y"\n'


def test_resolution_validation():
    with pytest.raises(ValueError):
        count_flops(build_preset("B0"), 0)
    with pytest.raises(ValueError):
        count_flops(build_preset("B0"), 100)
