import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cvdcm.design import (
    HHC_LEVELS,
    ImagePool,
    TaskTemplate,
    assign_images,
    build_design,
    build_respondent_design,
    enumerate_templates,
    levels_for,
)
from cvdcm.errors import ValidationError
from cvdcm.images import Image


def brute_force_count(hhc_levels, tti_levels):
    """Count ordered pairs from the full factorial that keep a genuine trade-off."""
    n = 0
    alts = [(h, t) for h in hhc_levels for t in tti_levels]
    for a in alts:
        for b in alts:
            if a[0] == b[0] or a[1] == b[1]:
                continue
            a_weakly_better = a[0] <= b[0] and a[1] <= b[1]
            b_weakly_better = b[0] <= a[0] and b[1] <= a[1]
            if not (a_weakly_better or b_weakly_better):
                n += 1
    return n


def manifest(n, municipalities=("m0", "m1", "m2")):
    return [Image(f"i{k}", month=1 + k % 12, municipality=municipalities[k % len(municipalities)]) for k in range(n)]


@pytest.mark.parametrize(
    "tt,n_tti,expected",
    [(15, 5, 420), (25, 6, 630), (45, 7, 882)],
)
def test_template_counts_match_brute_force(tt, n_tti, expected):
    regime = levels_for(tt)
    assert len(regime.hhc_levels) == 7
    assert len(regime.tti_levels) == n_tti
    templates = enumerate_templates(regime)
    assert len(templates) == expected == brute_force_count(regime.hhc_levels, regime.tti_levels)
    assert len(set(templates)) == len(templates)


def test_levels_table_values():
    assert levels_for(15).tti_levels == (-5, 0, 5, 10, 15)
    assert levels_for(25).tti_levels == (-10, -5, 0, 5, 10, 15)
    assert levels_for(31).tti_levels == (-15, -10, -5, 0, 5, 10, 15)
    assert levels_for(20).tt_band == (10, 20)
    assert levels_for(30).tt_band == (20, 30)


@pytest.mark.parametrize("tt", [0, 8, 9.99, -1])
def test_ineligible_respondents(tt):
    with pytest.raises(ValidationError):
        levels_for(tt)


@pytest.mark.parametrize("tt", [15, 25, 60])
def test_templates_trade_off_and_no_equal_levels(tt):
    for t in enumerate_templates(levels_for(tt)):
        assert t.hhc_a != t.hhc_b and t.tti_a != t.tti_b
        assert np.sign(t.hhc_a - t.hhc_b) == -np.sign(t.tti_a - t.tti_b)


def test_template_validity_rules():
    assert not TaskTemplate(0, 0, 75, 5).is_valid()  # A dominates
    assert not TaskTemplate(0, 5, 0, 10).is_valid()  # equal cost
    assert TaskTemplate(-75, 10, 75, -5).is_valid()


def test_assign_images_two_eligible_uses_both():
    imgs = [Image("a", municipality="x"), Image("b", municipality="y"), Image("c", municipality="home")]
    rng = np.random.default_rng(0)
    orders = set()
    for _ in range(50):
        t = assign_images(TaskTemplate(-75, 5, 75, -5), imgs, "home", rng)
        assert set(t.image_ids) == {"a", "b"}
        orders.add(t.image_ids)
    assert len(orders) == 2


def test_assign_images_all_home_municipality_errors():
    imgs = [Image(f"i{k}", municipality="home") for k in range(5)]
    with pytest.raises(ValidationError):
        assign_images(TaskTemplate(-75, 5, 75, -5), imgs, "home", np.random.default_rng(0))


def test_assign_images_carries_month():
    imgs = [Image("a", month=4, municipality="x"), Image("b", month=9, municipality="x")]
    t = assign_images(TaskTemplate(-75, 5, 75, -5), imgs, "home", np.random.default_rng(1))
    months = {a.image_id: a.month for a in t.alternatives}
    assert months == {"a": 4, "b": 9}


def test_assign_images_uniform():
    imgs = manifest(12, ("m0", "m1"))
    pool = ImagePool(imgs)
    rng = np.random.default_rng(7)
    counts = {}
    draws = 10_000
    for _ in range(draws):
        for i in assign_images(TaskTemplate(-75, 5, 75, -5), pool, "m0", rng).image_ids:
            counts[i] = counts.get(i, 0) + 1
    eligible = [im.image_id for im in imgs if im.municipality != "m0"]
    assert set(counts) == set(eligible)
    p = 2 / len(eligible)
    sigma = math.sqrt(draws * p * (1 - p))
    for c in counts.values():
        assert abs(c - draws * p) < 3 * sigma


def test_respondent_design_contract():
    imgs = manifest(40)
    d1 = build_respondent_design(25, imgs, "m1", seed=11, respondent_id="r7")
    d2 = build_respondent_design(25, imgs, "m1", seed=11, respondent_id="r7")
    assert len(d1) == 15
    assert d1 == d2
    valid = set(enumerate_templates(levels_for(25)))
    by_id = {im.image_id: im for im in imgs}
    for t in d1:
        a, b = t.alternatives
        assert TaskTemplate(a.hhc, a.tti, b.hhc, b.tti) in valid
        assert a.image_id != b.image_id
        assert all(by_id[i].municipality != "m1" for i in t.image_ids)
        assert t.chosen is None


@given(st.integers(0, 2**31), st.floats(10, 90))
def test_designs_never_dominated(seed, tt):
    imgs = manifest(20)
    for t in build_respondent_design(tt, imgs, "m0", seed=seed):
        a, b = t.alternatives
        assert a.hhc != b.hhc and a.tti != b.tti
        assert (a.hhc < b.hhc) != (a.tti < b.tti)
        assert a.image_id != b.image_id


def test_build_design_many_respondents():
    imgs = manifest(30)
    resp = [{"respondent_id": f"r{i}", "current_tt": 12 + 7 * i, "municipality": f"m{i % 3}"} for i in range(6)]
    tasks = build_design(resp, imgs, seed=3)
    assert len(tasks) == 90
    assert len({t.task_id for t in tasks}) == 90
    assert build_design(resp, imgs, seed=3) == tasks
    assert all(abs(a.hhc) in {abs(h) for h in HHC_LEVELS} for t in tasks for a in t.alternatives)
