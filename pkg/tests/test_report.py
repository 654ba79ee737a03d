import json

import numpy as np

from memiss.core import OutcomeSpec
from memiss.linmod import FitResult
from memiss.report import (
    build_report,
    error_entry,
    format_cell,
    render_csv,
    render_json,
    render_text,
    result_entry,
)


def test_format_cell_matches_published_layout():
    # three-decimal "estimate (lower, upper)" cells
    assert format_cell(0.085, 0.014, 0.157) == "0.085 (0.014, 0.157)"
    assert format_cell(0.114, 0.011, 0.222) == "0.114 (0.011, 0.222)"
    assert format_cell(0.121, 0.055, 0.186) == "0.121 (0.055, 0.186)"
    assert format_cell(0.120, 0.020, 0.219) == "0.120 (0.020, 0.219)"


def _outcome():
    return OutcomeSpec(kind="linear", y="y", covariates=("z",), exposure="x")


def _fit(bx=0.5, bz=0.3):
    return FitResult(
        names=("intercept", "x", "z"), beta=[0.1, bx, bz],
        cov=np.diag([0.01, 0.02, 0.01]), loglik=-10.0, method="naive",
    )


def test_result_entry_rows_follow_display_order():
    entry = result_entry(_fit(), _outcome())
    assert list(entry["rows"]) == ["x", "z"]
    assert "intercept" in entry["parameters"]
    cell = entry["rows"]["x"]["cell"]
    assert cell.startswith("0.500 (")


def test_report_text_and_csv_rendering():
    outcome = _outcome()
    results = {
        "naive": result_entry(_fit(0.5), outcome),
        "rc": result_entry(_fit(0.9), outcome),
        "ml": error_entry(ValueError("boom")),
    }
    report = build_report("compare", {"method": "x"}, 7, outcome, results,
                          truth={"params": {"x": 1.0, "z": 0.3}})
    text = render_text(report)
    lines = text.splitlines()
    assert lines[0].split() == ["covariate", "naive", "rc", "ml", "truth"]
    assert "ERROR" in text
    assert "1.000" in lines[2]
    csv_text = render_csv(report)
    assert csv_text.splitlines()[0] == "method,parameter,estimate,lower,upper,bias"
    assert any(line.startswith("ml,error") for line in csv_text.splitlines())
    # bias recorded for methods that succeeded
    assert report["methods"]["naive"]["bias"]["x"] == -0.5


def test_report_json_round_trips_and_is_sorted():
    outcome = _outcome()
    report = build_report("correct", {"seed": 1}, 1, outcome,
                          {"naive": result_entry(_fit(), outcome)})
    blob = render_json(report)
    parsed = json.loads(blob)
    assert parsed["methods"]["naive"]["rows"]["x"]["estimate"] == 0.5
    assert blob == render_json(parsed) or json.loads(render_json(parsed)) == parsed


def test_metadata_cleaning_drops_arrays():
    fit = _fit()
    fit.metadata["array"] = np.arange(3)
    fit.metadata["nested"] = {"ok": 1.5, "bad": np.eye(2)}
    entry = result_entry(fit, _outcome())
    blob = json.dumps(entry)  # must be serializable
    assert "ok" in blob
