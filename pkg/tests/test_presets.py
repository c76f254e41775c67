# tests/test_presets.py
import pytest

from app.core.exceptions import BadParams
from app.core.presets import PRESETS, get_preset


def test_ucla50_svm():
    preset = get_preset("appendix-b:ucla50-svm")
    config = preset.descriptor()
    assert config.fieldset == "STRF-Njet"
    assert config.sigma_s == [4.0, 8.0]
    assert config.sigma_tau == [50.0, 100.0]
    assert config.n_comp == 13
    assert config.binary
    assert preset.scheme().kind == "k-fold-by-instance"
    assert preset.scheme().folds == 4


def test_prefix_is_optional():
    assert get_preset("gamma-svm") == get_preset("appendix-b:gamma-svm-njet")
    assert get_preset("appendix-b:gamma-svm").n_comp == 16


def test_spatial_presets_have_no_temporal_scales():
    preset = get_preset("appendix-b:ucla8-nn-spatial")
    assert preset.descriptor().sigma_tau == []
    assert preset.scheme().kind == "random-split"


def test_every_row_is_present():
    assert len(PRESETS) == 4 * 6 * 2 + 6 * 2
    for preset in PRESETS.values():
        preset.descriptor()
        preset.scheme()


def test_unknown():
    with pytest.raises(BadParams):
        get_preset("appendix-b:kth-svm")
