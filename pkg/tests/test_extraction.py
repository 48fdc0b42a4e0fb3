import io
import json

import pandas as pd
import pytest

from src.core.errors import SchemaError
from src.core.validation import InputFileValidator
from src.models.schemas import ObservationKind
from src.services.datasets import DUPILUMAB_ARMS, load_builtin
from src.services.extraction import TrialExtractionService

ARM_CSV = """schedule,interval_hours,dose,response,se,n
weekly,168,0,-18.1,5.2,61
weekly,168,300,-73.7,5.2,63
biweekly,336,200,-65.4,5.2,61
biweekly,336,300,-68.2,5.1,64
monthly,672,100,-44.8,5.0,65
monthly,672,300,-63.5,4.9,65
"""


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_builtin_dataset_matches_published_arms():
    data = load_builtin("dupilumab")
    assert data.kind == ObservationKind.ARM_LEVEL
    assert [s.label for s in data.design.schedules] == ["weekly", "biweekly", "monthly"]
    assert data.design.reference.label == "biweekly"
    assert data.max_dose == pytest.approx(600.0)
    rows = [(r.schedule_id, r.dose, r.value, r.se) for r in data.observations.rows]
    assert rows == [
        (0, 0.0, -18.1, 5.2), (0, 300.0, -73.7, 5.2),
        (1, 200.0, -65.4, 5.2), (1, 300.0, -68.2, 5.1),
        (2, 100.0, -44.8, 5.0), (2, 300.0, -63.5, 4.9),
    ]
    assert [a.n_planned for a in data.design.arms] == [61, 63, 61, 64, 65, 65]
    assert DUPILUMAB_ARMS["n"].sum() == 379


def test_unknown_builtin_dataset():
    with pytest.raises(KeyError):
        load_builtin("nope")


def test_csv_arm_level_round_trip(tmp_path):
    path = _write(tmp_path, "dupi.csv", ARM_CSV)
    data = TrialExtractionService().load_trial(path)
    builtin = load_builtin("dupilumab")
    assert data.name == "dupi"
    assert data.observations == builtin.observations
    assert data.design == builtin.design


def test_intervals_default_from_settings_and_aliases(tmp_path):
    text = "Regimen,Dose Level,LS Mean\nWeekly,0,-20\nweekly,10,-50\nMonthly,10,-40\nmonthly,20,-45\n"
    data = TrialExtractionService().load_trial(_write(tmp_path, "trial.csv", text))
    assert data.kind == ObservationKind.PATIENT_LEVEL
    assert {s.label: s.interval_hours for s in data.design.schedules} == {"weekly": 168.0, "monthly": 672.0}
    # biweekly is absent so the shortest interval becomes the reference
    assert data.design.reference.label == "weekly"


def test_patient_level_rows_are_counted_per_arm():
    df = pd.DataFrame({
        "schedule": ["biweekly"] * 5,
        "dose": [0, 0, 0, 3, 3],
        "response": [-19.0, -22.0, -18.0, -40.0, -43.0],
    })
    data = TrialExtractionService().trial_from_frame(df)
    assert [(a.dose, a.n_planned) for a in data.design.arms] == [(0.0, 3), (3.0, 2)]
    assert len(data.observations) == 5


def test_missing_column_is_reported():
    df = pd.DataFrame({"schedule": ["weekly"], "dose": [0]})
    with pytest.raises(SchemaError) as excinfo:
        TrialExtractionService().trial_from_frame(df)
    assert excinfo.value.column == "response"


@pytest.mark.parametrize("column, bad, message", [
    ("dose", "abc", "Expected a number"),
    ("dose", -5, "non-negative"),
    ("se", 0.0, "positive"),
])
def test_bad_values_report_row_and_column(column, bad, message):
    df = pd.read_csv(io.StringIO(ARM_CSV))
    df[column] = df[column].astype(object)
    df.loc[3, column] = bad
    with pytest.raises(SchemaError, match=message) as excinfo:
        TrialExtractionService().trial_from_frame(df)
    assert excinfo.value.row == 4
    assert excinfo.value.column == column
    assert str(excinfo.value).startswith(f"[row 4, column '{column}']")


def test_unknown_schedule_without_interval():
    df = pd.DataFrame({"schedule": ["every 3 weeks"], "dose": [1.0], "response": [2.0]})
    with pytest.raises(SchemaError, match="Unknown schedule"):
        TrialExtractionService().trial_from_frame(df)


def test_conflicting_intervals():
    df = pd.DataFrame({
        "schedule": ["weekly", "weekly", "monthly"],
        "interval_hours": [168, 170, 672],
        "dose": [0, 1, 1],
        "response": [0.0, 1.0, 2.0],
    })
    with pytest.raises(SchemaError, match="conflicting"):
        TrialExtractionService().trial_from_frame(df)


def test_arm_level_flag_requires_se():
    df = pd.DataFrame({"schedule": ["weekly", "weekly"], "dose": [0, 1], "response": [0.0, 1.0]})
    service = TrialExtractionService()
    with pytest.raises(SchemaError, match="se"):
        service.trial_from_frame(df, arm_level=True)
    with_se = df.assign(se=[1.0, 1.0])
    assert service.trial_from_frame(with_se, arm_level=False).kind == ObservationKind.PATIENT_LEVEL


def test_json_rows(tmp_path):
    records = json.loads(pd.read_csv(io.StringIO(ARM_CSV)).to_json(orient="records"))
    path = _write(tmp_path, "arms.json", json.dumps({"rows": records}))
    data = TrialExtractionService().load_trial(path)
    assert data.kind == ObservationKind.ARM_LEVEL
    assert len(data.observations) == 6


def test_excel_input(tmp_path):
    path = tmp_path / "arms.xlsx"
    pd.read_csv(io.StringIO(ARM_CSV)).to_excel(path, index=False, engine="openpyxl")
    data = TrialExtractionService().load_trial(path)
    assert data.design == load_builtin("dupilumab").design


def test_design_json(tmp_path):
    design = load_builtin("dupilumab").design
    path = _write(tmp_path, "design.json", design.model_dump_json())
    assert TrialExtractionService().load_design(path) == design


@pytest.mark.parametrize("name, content, message", [
    ("trial.txt", "a,b\n", "unsupported extension"),
    ("trial.json", "schedule,dose\n", "does not match"),
    ("trial.csv", "", "empty"),
])
def test_input_file_validation(tmp_path, name, content, message):
    path = _write(tmp_path, name, content)
    is_valid, error = InputFileValidator.validate_input_file(path)
    assert not is_valid
    assert message in error
    with pytest.raises(SchemaError):
        TrialExtractionService().load_trial(path)


def test_missing_file(tmp_path):
    is_valid, error = InputFileValidator.validate_input_file(tmp_path / "absent.csv")
    assert not is_valid and "not found" in error


def test_file_size_limit(tmp_path):
    path = _write(tmp_path, "big.csv", ARM_CSV)
    is_valid, error = InputFileValidator.validate_input_file(path, max_size=10)
    assert not is_valid and "exceeds" in error


def test_sanitize_label():
    assert InputFileValidator.sanitize_label("every two weeks") == "every_two_weeks"
    assert InputFileValidator.sanitize_label("ed50_weekly") == "ed50_weekly"
    assert InputFileValidator.sanitize_label("<>") == "unnamed"


@pytest.mark.parametrize("name", ["arms.json", "arms.csv"])
def test_byte_order_mark_is_accepted(tmp_path, name):
    frame = pd.read_csv(io.StringIO(ARM_CSV))
    text = frame.to_json(orient="records") if name.endswith(".json") else ARM_CSV
    path = tmp_path / name
    path.write_bytes(b"\xef\xbb\xbf" + text.encode("utf-8"))
    assert InputFileValidator.validate_input_file(path) == (True, None)
    data = TrialExtractionService().load_trial(path)
    assert data.design == load_builtin("dupilumab").design
