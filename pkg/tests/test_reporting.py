import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bkf.estimation import CoefficientSummary, PosteriorSummary, RationalityVerdict
from bkf.reporting import (
    CellStats,
    Layout,
    descriptive_stats,
    fmt,
    forest_csv,
    render_table,
    scenario_means_csv,
    verdict_line,
    verdict_report,
)


def summary(means, lows=None, highs=None):
    lows = lows or [m - 0.06 for m in means]
    highs = highs or [m + 0.06 for m in means]
    names = ("beta_prior", "beta_mic", "beta_mac", "beta_int")
    coefs = [CoefficientSummary(n, m, 0.03, lo, hi) for n, m, lo, hi in zip(names, means, lows, highs)]
    return PosteriorSummary(
        coefficients=coefs,
        sigma=CoefficientSummary("sigma", 1.0, 0.1, 0.8, 1.2),
        r_hat={n: 1.0 for n in names + ("sigma",)},
        ess={n: 4000.0 for n in names + ("sigma",)},
        chain_draws=np.empty((0, 0, 4)),
        sigma2_draws=np.empty((0, 0)),
    )


def test_fmt_half_even_and_negative_zero():
    assert fmt(7.015) == "7.02"  # repr is 7.015, so half-even goes to the even digit
    assert fmt(7.025) == "7.02"
    assert fmt(-0.001) == "0.00"
    assert fmt(0.0409, 3) == "0.041"
    assert fmt(float("nan")) == "nan"


def test_cell_constant(make_records):
    records = [r for r in make_records() if r.persona == "household" and r.scenario_id == "S1"][:3]
    (cell,) = descriptive_stats(records)
    assert (cell.n, fmt(cell.mean), fmt(cell.sd)) == (3, "6.00", "0.00")


def test_cell_two_values(rational_records):
    base = rational_records[0]
    records = [base.__class__(**{**base.__dict__, "updated_expectation": v}) for v in (1.0, 3.0)]
    (cell,) = descriptive_stats(records)
    assert cell.mean == 2.0
    assert cell.sd == pytest.approx(math.sqrt(2.0), abs=1e-12)


def test_cell_monte_carlo_operating_point(rational_records):
    base = rational_records[0]
    values = np.random.default_rng(0).normal(7.02, 1.02, 30)
    records = [base.__class__(**{**base.__dict__, "updated_expectation": float(v)}) for v in values]
    (cell,) = descriptive_stats(records)
    assert abs(cell.mean - 7.02) < 0.6
    assert cell.sd == pytest.approx(np.std(values, ddof=1), rel=1e-12)


def test_aggregation_matches_numpy(make_records):
    records = make_records(beta=(0.5, 0.4, 0.3, -0.02), noise_sd=0.7, seed=3)
    stats = descriptive_stats(records)
    assert len(stats) == 8 and sum(c.n for c in stats) == 240
    for c in stats:
        ys = np.array([r.updated_expectation for r in records
                       if (r.persona, r.scenario_id) == (c.persona, c.scenario_id)])
        assert c.mean == pytest.approx(ys.mean(), abs=1e-12)
        assert c.sd == pytest.approx(ys.std(ddof=1), abs=1e-12)


def test_descriptive_stats_rejects_empty():
    with pytest.raises(ValueError):
        descriptive_stats([])


def test_table_ii_cell_format():
    t = render_table([CellStats("gpt-4o", "household", "S1", 30, 7.02, 1.02)], Layout.TABLE_II)
    lines = t.text.splitlines()
    s1 = next(i for i, ln in enumerate(lines) if ln.startswith("S1"))
    assert lines[s1].split()[-1] == "7.02"
    assert lines[s1 + 1].split()[-1] == "(1.02)"
    assert "gpt-4o HH" in t.text
    assert "Missing:" in t.text and "S2 x gpt-4o HH" in t.text
    assert len(t.missing) == 3


def test_table_iii_cell_format():
    s = summary([0.48, 0.40, 0.39, -0.03], lows=[0.42, 0.39, 0.38, -0.031],
                highs=[0.54, 0.41, 0.40, -0.029])
    t = render_table({("household", "gpt-4o"): s}, "table_iii")
    line = next(ln for ln in t.text.splitlines() if ln.startswith("beta_prior"))
    i = t.text.splitlines().index(line)
    assert line.split()[-1] == "0.48"
    assert t.text.splitlines()[i + 1].split("|")[-1].strip() == "[0.42, 0.54]"
    assert "[HH]" in t.text and t.missing == ()


@pytest.mark.parametrize("layout", list(Layout))
def test_empty_input_header_only(layout):
    t = render_table([] if layout in (Layout.TABLE_II, Layout.TABLE_IV) else {}, layout)
    assert t.text.rstrip().endswith("Missing: all cells (no input)")
    assert t.csv == "panel,row,column,mean,sd,hdi_low,hdi_high,n\n"


def test_render_deterministic(make_records):
    stats = descriptive_stats(make_records(noise_sd=0.5, model_ids=("b", "a")))
    a, b = render_table(stats, "table_ii"), render_table(list(reversed(stats)), "table_ii")
    assert a == b
    header = a.text.splitlines()[2]
    assert header.index("a HH") < header.index("a CEO") < header.index("b HH")


def test_table_iv_orders_persona_then_condition(make_records):
    stats = descriptive_stats(make_records(model_ids=("lora", "base")))
    header = render_table(stats, Layout.TABLE_IV).text.splitlines()[2]
    cols = [c.strip() for c in header.split("|")[1:]]
    assert cols == ["HH base", "HH lora", "CEO base", "CEO lora"]


def test_csv_matches_text(make_records):
    stats = descriptive_stats(make_records(noise_sd=0.5))
    t = render_table(stats, Layout.TABLE_II)
    rows = list(csv.DictReader(io.StringIO(t.csv)))
    assert len(rows) == 8
    for row in rows:
        line = next(ln for ln in t.text.splitlines() if ln.startswith(row["row"]))
        assert row["mean"] in line


def test_table_v_panels():
    t = render_table({("household", "base"): summary([0.5] * 4), ("ceo", "lora"): summary([0.4] * 4)},
                     Layout.TABLE_V)
    assert t.text.index("[HH]") < t.text.index("[CEO]")
    assert "HH/beta_prior x lora" in t.missing


def _verdict(sum_hdi, int_hdi, sum_mean=1.0, int_mean=0.0):
    return RationalityVerdict(
        sum_mean, sum_hdi, sum_hdi[0] <= 1 <= sum_hdi[1],
        int_mean, int_hdi, int_hdi[0] <= 0 <= int_hdi[1],
    )


def test_verdict_rational():
    line = verdict_line("lora", _verdict((0.98, 1.02), (-0.001, 0.001)))
    assert line.endswith("RATIONAL: both conditions satisfied")


def test_verdict_base_ceo_interaction_fixture():
    v = _verdict((0.97, 1.01), (0.034, 0.048), sum_mean=0.99, int_mean=0.041)
    line = verdict_line("base", v)
    assert "FAIL zero-interaction" in line and "FAIL sum-to-one" not in line
    assert "interaction 0.041 [0.034, 0.048] excludes 0" in line


def test_verdict_sum_to_one_failure():
    line = verdict_line("gpt", _verdict((1.3, 1.5), (-0.01, 0.01), sum_mean=1.4))
    assert line.endswith("FAIL sum-to-one")


def test_verdict_report_doc():
    text, doc = verdict_report({"b": _verdict((0.9, 1.1), (-1, 1)), "a": _verdict((2, 3), (-1, 1))})
    assert text.splitlines()[0].startswith("a:")
    assert doc["all_rational"] is False
    assert doc["conditions"]["b"]["rational"] is True


def test_plot_csvs(make_records):
    stats = descriptive_stats(make_records(noise_sd=0.5))
    rows = list(csv.DictReader(io.StringIO(scenario_means_csv(stats))))
    assert len(rows) == 8
    for r in rows:
        assert float(r["upper"]) - float(r["lower"]) == pytest.approx(2 * float(r["sd"]))
    forest = list(csv.DictReader(io.StringIO(forest_csv({("ceo", "m"): summary([0.1, 0.2, 0.3, 0.0])}))))
    assert [r["coefficient"] for r in forest] == ["beta_prior", "beta_mic", "beta_mac", "beta_int"]


@given(st.floats(-1e6, 1e6, allow_nan=False), st.integers(0, 4))
def test_fmt_round_trips_within_half_ulp_of_display(x, d):
    assert abs(float(fmt(x, d)) - x) <= 0.5 * 10**-d + 1e-9 * max(1.0, abs(x))
