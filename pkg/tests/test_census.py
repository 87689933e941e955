import pytest

from symtrack.census import MODES, adapter_params, param_census
from symtrack.config import ModelConfig

FULL = ModelConfig.full_scale()


def test_adapter_size_at_bottleneck_192():
    assert adapter_params(768, 192) == 768 * 192 + 192 + 192 * 768 + 768 == 295_872


def test_cma_tuned_matches_table_value():
    c = param_census(FULL, "cma")
    assert c.groups["adapters"] == 24 * 295_872
    assert c.tuned_params / 1e6 == pytest.approx(7.69, rel=0.03)


def test_frozen_tuned_matches_table_value():
    c = param_census(FULL, "frozen")
    assert c.groups["adapters"] == 0
    assert c.tuned_params / 1e6 == pytest.approx(0.59, rel=0.05)


def test_base_tunables_are_patch_embed_plus_head_norm():
    c = param_census(FULL, "frozen")
    assert c.tuned_params == (16 * 16 * 3 * 768 + 768) + 2 * 768


@pytest.mark.parametrize("mode", MODES)
def test_tuned_is_a_subset_of_total(mode):
    c = param_census(FULL, mode)
    assert 0 < c.tuned_params < c.total_params
    assert c.as_dict()["mode"] == mode


def test_mode_ordering():
    t = {m: param_census(FULL, m).tuned_params for m in MODES}
    assert t["frozen"] < t["mfa"] < t["cma"] < t["cma+mfa"]
    assert t["cma+mfa"] - t["cma"] == t["mfa"] - t["frozen"]


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        param_census(FULL, "lora")


def test_census_is_pure_arithmetic():
    import time

    t0 = time.perf_counter()
    for m in MODES:
        param_census(FULL, m)
    assert time.perf_counter() - t0 < 1.0
