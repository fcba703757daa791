"""Architecture space: descriptors, grids, cost models, budget groups."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_ssl.archspace import (
    ArchDescriptor,
    BudgetExhaustedError,
    BudgetSpec,
    DescriptorError,
    DimRange,
    GroupRangeError,
    ModelSpace,
    desk_space,
    flops,
    format_flops,
    group_of,
    paper_space,
    params,
    parse_flops,
    resnet50_descriptor,
)

SEARCHED_3G4G = ArchDescriptor(32, (48, 96, 192, 512), (3, 2, 17, 3))


def spaces_strategy():
    def build(stem, widths, depths):
        return ModelSpace(
            stem=DimRange(stem, 2 * stem, stem),
            widths=tuple(DimRange(w, 2 * w, w) for w in widths),
            depths=tuple(DimRange(1, d, 1) for d in depths),
        )

    return st.builds(
        build,
        st.sampled_from([8, 16]),
        st.tuples(*[st.sampled_from([8, 16, 32]) for _ in range(4)]),
        st.tuples(*[st.integers(1, 3) for _ in range(4)]),
    )


# ---------------------------------------------------------------------------
# Frozen cost-model oracles.
# ---------------------------------------------------------------------------

class TestCostOracles:
    def test_resnet50_flops_frozen(self):
        assert flops(resnet50_descriptor(), 224) == 3_857_039_360

    def test_resnet50_flops_within_published_band(self):
        value = flops(resnet50_descriptor(), 224)
        assert abs(value - 3.8e9) <= 0.05 * 3.8e9

    def test_resnet50_params_frozen(self):
        value = params(resnet50_descriptor(), head=1000, stem_plan="imagenet")
        assert value == 25_557_032

    def test_resnet50_params_within_published_band(self):
        value = params(resnet50_descriptor(), head=1000, stem_plan="imagenet")
        assert abs(value - 25.5e6) <= 0.02 * 25.5e6

    def test_searched_descriptor_flops_frozen(self):
        assert flops(SEARCHED_3G4G, 224) == 3_544_342_528

    def test_searched_descriptor_in_3g_4g_band(self):
        value = flops(SEARCHED_3G4G, 224)
        assert abs(value - 3.7e9) <= 0.05 * 3.7e9
        spec = BudgetSpec.from_boundaries([i * 10**9 for i in range(1, 9)])
        assert group_of(value, spec) == "3G~4G"

    def test_desk_extremes_frozen(self):
        space = desk_space()
        kw = dict(expansion=4, stem_plan="small")
        assert flops(space.largest(), 32, **kw) == 253_132_800
        assert flops(space.smallest(), 32, **kw) == 28_033_024

    def test_detail_components_sum_to_total(self):
        parts = flops(resnet50_descriptor(), 224, detail=True)
        assert parts["total"] == (
            parts["stem"] + parts["stage_convs"] + parts["downsample"] + parts["head"]
        )
        pparts = params(resnet50_descriptor(), head=1000, stem_plan="imagenet", detail=True)
        assert pparts["total"] == (
            pparts["stem"] + pparts["stage_convs"] + pparts["downsample"]
            + pparts["norm"] + pparts["head"]
        )

    def test_head_replaces_projection(self):
        d = resnet50_descriptor()
        with_head = params(d, head=1000, stem_plan="imagenet", detail=True)
        with_proj = params(d, stem_plan="imagenet", detail=True)
        assert with_head["head"] == 2048 * 1000 + 1000
        assert with_proj["head"] == 2048 * 512 + 512 + 512 * 128 + 128
        assert with_head["stage_convs"] == with_proj["stage_convs"]

    def test_doubling_widths_quadruples_conv_params(self):
        d1 = ArchDescriptor(16, (16, 32, 64, 128), (1, 1, 2, 1))
        d2 = ArchDescriptor(32, (32, 64, 128, 256), (1, 1, 2, 1))
        p1 = params(d1, detail=True)
        p2 = params(d2, detail=True)
        assert p2["stage_convs"] == 4 * p1["stage_convs"]
        assert p2["downsample"] == 4 * p1["downsample"]

    def test_doubling_resolution_quadruples_conv_flops(self):
        d = ArchDescriptor(16, (16, 32, 64, 128), (1, 1, 2, 1))
        f32 = flops(d, 32, stem_plan="small", detail=True)
        f64 = flops(d, 64, stem_plan="small", detail=True)
        for part in ("stem", "stage_convs", "downsample"):
            assert f64[part] == 4 * f32[part]
        assert f64["head"] == f32["head"]

    def test_stem_plan_auto_resolution(self):
        d = resnet50_descriptor()
        assert flops(d, 224) == flops(d, 224, stem_plan="imagenet")
        assert flops(d, 32) == flops(d, 32, stem_plan="small")

    def test_flops_grows_with_each_dimension(self):
        base = ArchDescriptor(16, (16, 32, 64, 128), (1, 1, 2, 1))
        kw = dict(expansion=4, stem_plan="small")
        f0 = flops(base, 32, **kw)
        assert flops(ArchDescriptor(32, base.stage_widths, base.stage_depths), 32, **kw) > f0
        wider = (32, *base.stage_widths[1:])
        assert flops(ArchDescriptor(16, wider, base.stage_depths), 32, **kw) > f0
        deeper = (2, *base.stage_depths[1:])
        assert flops(ArchDescriptor(16, base.stage_widths, deeper), 32, **kw) > f0

    def test_resnet50_not_on_paper_grid(self):
        # The published reference depths sit off this grid; the cost model
        # still prices the descriptor, only sampling is grid-bound.
        assert not paper_space().validate(resnet50_descriptor()).ok
        assert flops(resnet50_descriptor(), 224) > 0


# ---------------------------------------------------------------------------
# Grids and descriptors.
# ---------------------------------------------------------------------------

class TestDimRange:
    def test_choices_and_count(self):
        r = DimRange(16, 32, 8)
        assert r.choices() == (16, 24, 32)
        assert r.count == 3
        assert r.midpoint() == 24

    def test_contains_requires_grid_alignment(self):
        r = DimRange(16, 32, 8)
        assert r.contains(16) and r.contains(32)
        assert not r.contains(20)
        assert not r.contains(40)
        assert not r.contains(8)

    def test_midpoint_rounds_down_on_even_count(self):
        assert DimRange(1, 2, 1).midpoint() == 1
        assert DimRange(1, 3, 1).midpoint() == 2

    @pytest.mark.parametrize("bad", [(0, 8, 1), (8, 4, 1), (4, 8, 3), (4, 8, 0)])
    def test_invalid_ranges_raise(self, bad):
        with pytest.raises(ValueError):
            DimRange(*bad)

    @given(st.integers(1, 16), st.integers(0, 5), st.integers(1, 8), st.integers(0, 1000))
    def test_sample_lands_on_grid(self, lo, extra, step, seed):
        r = DimRange(lo, lo + extra * step, step)
        rng = np.random.default_rng(seed)
        assert r.sample(rng) in r.choices()


class TestArchDescriptor:
    def test_round_trip(self):
        d = resnet50_descriptor()
        assert ArchDescriptor.from_dict(d.to_dict()) == d

    def test_hashable_and_frozen(self):
        d = resnet50_descriptor()
        assert {d: 1}[ArchDescriptor.from_dict(d.to_dict())] == 1
        with pytest.raises(Exception):
            d.stem_width = 1

    def test_unknown_and_missing_keys(self):
        with pytest.raises(DescriptorError, match="unknown"):
            ArchDescriptor.from_dict(
                {"stem_width": 8, "stage_widths": [8] * 4, "stage_depths": [1] * 4,
                 "color": "red"}
            )
        with pytest.raises(DescriptorError, match="missing"):
            ArchDescriptor.from_dict({"stem_width": 8})

    def test_rejects_nonpositive_and_wrong_arity(self):
        with pytest.raises(DescriptorError):
            ArchDescriptor(0, (8, 8, 8, 8), (1, 1, 1, 1))
        with pytest.raises(DescriptorError):
            ArchDescriptor(8, (8, 8, 8), (1, 1, 1, 1))


class TestModelSpace:
    def test_extremes_and_midpoint(self):
        space = desk_space()
        assert space.largest().to_dict() == {
            "stem_width": 32,
            "stage_widths": [32, 64, 128, 256],
            "stage_depths": [2, 3, 6, 2],
        }
        assert space.smallest().to_dict() == {
            "stem_width": 16,
            "stage_widths": [16, 32, 64, 128],
            "stage_depths": [1, 1, 2, 1],
        }
        assert space.validate(space.midpoint()).ok

    def test_subnet_count(self):
        assert desk_space().subnet_count() == 14_580

    def test_validate_reports_each_violation(self):
        space = desk_space()
        bad = ArchDescriptor(17, (16, 32, 64, 128), (1, 1, 2, 9))
        verdict = space.validate(bad)
        assert not verdict.ok
        assert set(verdict.violations) == {"stem_width", "stage_depths[3]"}
        with pytest.raises(DescriptorError):
            space.require_valid(bad)

    def test_round_trip_and_unknown_keys(self):
        space = desk_space()
        assert ModelSpace.from_dict(space.to_dict()) == space
        record = space.to_dict()
        record["colour"] = 1
        with pytest.raises(ValueError, match="unknown"):
            ModelSpace.from_dict(record)

    @given(spaces_strategy(), st.integers(0, 10_000))
    @settings(max_examples=60)
    def test_samples_are_always_valid(self, space, seed):
        d = space.sample(np.random.default_rng(seed))
        assert space.validate(d).ok

    def test_sampling_is_per_dimension_uniform(self):
        space = desk_space()
        rng = np.random.default_rng(7)
        draws = [space.sample(rng) for _ in range(2000)]
        # depths[0] has exactly two choices; each should get about half.
        share = np.mean([d.stage_depths[0] == 1 for d in draws])
        assert 0.45 <= share <= 0.55
        stem_share = np.mean([d.stem_width == 16 for d in draws])
        assert 0.28 <= stem_share <= 0.39

    def test_sample_in_budget_honors_window(self):
        space = desk_space()
        spec = BudgetSpec(40_000_000, 120_000_000)
        rng = np.random.default_rng(0)
        for _ in range(20):
            d = space.sample_in_budget(rng, spec)
            f = flops(d, 32, expansion=4, stem_plan="small")
            assert spec.lower <= f < spec.upper

    def test_sample_in_budget_exhaustion(self):
        space = desk_space()
        rng = np.random.default_rng(0)
        with pytest.raises(BudgetExhaustedError) as info:
            space.sample_in_budget(rng, BudgetSpec(1, 2), max_tries=25)
        assert info.value.tries == 25
        assert info.value.window == (1, 2)
        with pytest.raises(ValueError):
            space.sample_in_budget(rng, BudgetSpec(1, 2), max_tries=0)


# ---------------------------------------------------------------------------
# Budget groups and labels.
# ---------------------------------------------------------------------------

class TestBudgets:
    def test_format_flops(self):
        assert format_flops(3_000_000_000) == "3G"
        assert format_flops(40_000_000) == "40M"
        assert format_flops(1_000) == "1K"
        assert format_flops(1_234) == "1234"

    def test_parse_flops(self):
        assert parse_flops("3.5G") == 3_500_000_000
        assert parse_flops("40M") == 40_000_000
        assert parse_flops("1000") == 1_000
        assert parse_flops(" 2k ") == 2_000
        with pytest.raises(ValueError):
            parse_flops("many")

    @given(st.sampled_from([10**3, 10**6, 10**9]), st.integers(1, 999))
    def test_format_parse_round_trip(self, scale, mult):
        value = scale * mult
        assert parse_flops(format_flops(value)) == value

    def test_group_of_half_open_membership(self):
        spec = BudgetSpec.from_boundaries([0, 10, 20, 30])
        assert group_of(0, spec) == "0~10"
        assert group_of(9, spec) == "0~10"
        assert group_of(10, spec) == "10~20"
        assert group_of(29, spec) == "20~30"
        for outside in (-1, 30, 31):
            with pytest.raises(GroupRangeError):
                group_of(outside, spec)

    def test_budget_spec_validation(self):
        with pytest.raises(ValueError):
            BudgetSpec(10, 10)
        with pytest.raises(ValueError):
            BudgetSpec(-1, 10)
        with pytest.raises(ValueError):
            BudgetSpec(0, 10, boundaries=(5,))
        with pytest.raises(ValueError):
            BudgetSpec(0, 10, boundaries=(5, 5))
        with pytest.raises(ValueError):
            BudgetSpec.from_boundaries([3])

    def test_window_label(self):
        assert BudgetSpec(3 * 10**9, 4 * 10**9).window_label() == "3G~4G"
