import json

import numpy as np
import pytest

from masv.blocks import ABLATIONS, MASV, ModelConfig
from masv.complexity import (CALIBRATION_FRAMES, REFERENCE, calibrate_frames, count_params, default_matrix,
                             emit_comparison, estimate_flops, layer_costs, parse_comparison)
from masv.errors import ContractError


@pytest.mark.parametrize("name", sorted(ABLATIONS))
@pytest.mark.parametrize("channels", [64, 512])
def test_analytic_count_equals_instantiated(name, channels):
    cfg = ModelConfig.ablation(name, channels=channels)
    assert count_params(cfg) == MASV(cfg).num_parameters()


def test_analytic_count_for_tiny_and_no_context():
    for cfg in (ModelConfig.tiny(), ModelConfig.tiny(context_window=0), ModelConfig.tiny(state_dim=3, expand=1)):
        assert count_params(cfg) == MASV(cfg).num_parameters()


def test_breakdown_sums_to_totals():
    rep = estimate_flops(ModelConfig(), T=200)
    rows = rep.breakdown()
    assert sum(r["params"] for r in rows) == rep.params
    assert abs(sum(r["flops"] for r in rows) - rep.flops_total()) < 1e-3
    doc = json.loads(rep.to_json())
    assert doc["T"] == 200 and doc["params"] == rep.params
    assert [r["layer"] for r in rows][0] == "stem" and rows[-1]["layer"] == "fc"


def test_flops_strictly_increase_in_each_dimension():
    base = ModelConfig.tiny()
    f = lambda cfg, T=100: estimate_flops(cfg, T).flops_total()
    assert f(base, 101) > f(base, 100)
    assert f(ModelConfig.tiny(channels=72)) > f(base)
    assert f(ModelConfig.tiny(state_dim=9)) > f(base)
    assert f(ModelConfig.tiny(num_tri_blocks=3)) > f(base)


def test_flops_linear_in_T():
    rep = estimate_flops(ModelConfig(channels=1024), T=1)
    ratio = rep.flops_total(2000) / rep.flops_total(1000)
    assert 1.9 <= ratio <= 2.1
    per = [layer for layer in layer_costs(ModelConfig()) if "global_mamba" in layer.name][0]
    assert per.flops(2000) == 2 * per.flops(1000)


def test_calibration_constant():
    cfg = ModelConfig(channels=1024)
    # The declared T* is the calibrated count rounded to a whole 0.1 s.
    assert abs(calibrate_frames(cfg) - CALIBRATION_FRAMES) <= 1
    flops = estimate_flops(cfg).flops_total()
    assert abs(flops - REFERENCE["masv_c1024_flops"]) / REFERENCE["masv_c1024_flops"] < 0.01
    with pytest.raises(ContractError):
        estimate_flops(cfg, T=0)


def test_emit_comparison_round_trip_and_order():
    rows = default_matrix(512)
    assert [n for n, _ in rows] == ["base", "lcb", "tri", "complete"]
    csv_text, breakdown = emit_comparison(rows)
    parsed = parse_comparison(csv_text)
    assert csv_text.splitlines()[0] == "name,params,flops"
    assert len(parsed) == 4
    params = [p for _, p, _ in parsed]
    assert params == sorted(params)
    for name, p, f in parsed:
        rep = estimate_flops(dict(rows)[name])
        assert p == rep.params and abs(f - rep.flops_total()) / f < 1e-6
    assert set(json.loads(breakdown)) == {"base", "lcb", "tri", "complete"}
    assert emit_comparison(rows) == (csv_text, breakdown)


def test_single_config_and_channel_monotonicity():
    one, _ = emit_comparison([("x", ModelConfig.tiny())])
    assert len(one.splitlines()) == 2
    text, _ = emit_comparison([("c512", ModelConfig(channels=512)), ("c1024", ModelConfig(channels=1024))])
    rows = {n: (p, f) for n, p, f in parse_comparison(text)}
    assert rows["c1024"][0] > rows["c512"][0] and rows["c1024"][1] > rows["c512"][1]
    with pytest.raises(ContractError):
        emit_comparison([])
    with pytest.raises(ContractError):
        parse_comparison("a,b\n")


def test_reference_table_within_tolerance():
    for name, key in (("base", "base_c512_params"), ("complete", "complete_c512_params")):
        got = count_params(ModelConfig.ablation(name, channels=512))
        assert abs(got - REFERENCE[key]) / REFERENCE[key] <= 0.15
    got = count_params(ModelConfig(channels=1024))
    assert abs(got - REFERENCE["masv_c1024_params"]) / REFERENCE["masv_c1024_params"] <= 0.15
    assert np.isfinite(got)
